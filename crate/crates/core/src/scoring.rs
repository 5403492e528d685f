//! Per-class similarity scoring, binary confidences, the inference-time
//! temperature schedule, and the training loss.
//!
//! Each class is scored by two cosine similarities — text vs. visual
//! features under the positive prompts, and the same under the negative
//! prompts — collapsed into a positive confidence through a binary softmax,
//! `ŷ₊ = sigmoid((s⁺ − s⁻)/τ)`. During training τ is fixed at 1; at
//! inference a schedule raises τ with the number of classes seen so far,
//! compressing confidences toward 0.5 without changing their ordering.
//! Classes without prompts (disabled branches or prompt-free ablations) fall
//! back to unprompted encodings, so both branches collapse to the same
//! reference similarity and the confidence to exactly 0.5.

use serde::{Deserialize, Serialize};

use crate::encoder::{DualEncoder, PrefixCache};
use crate::error::{DdpError, Result};
use crate::graph::sigmoid;
use crate::prompting::{PromptSet, PromptStore};
use crate::tensor::{cosine, Tensor};

/// Clamp applied inside the loss logarithms.
const BCE_EPS: f64 = 1e-12;

/// Inference-time temperature schedule over the cumulative class count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcdSchedule {
    pub tau_max: f64,
    pub gamma: f64,
    pub base_classes: usize,
    pub total_classes: usize,
}

impl PcdSchedule {
    /// Validated schedule; requires τ_max > 1, 0 < γ < 1, total > base.
    pub fn new(tau_max: f64, gamma: f64, base_classes: usize, total_classes: usize) -> Result<Self> {
        let s = PcdSchedule {
            tau_max,
            gamma,
            base_classes,
            total_classes,
        };
        s.validate()?;
        Ok(s)
    }

    /// Checks the schedule invariants.
    pub fn validate(&self) -> Result<()> {
        if !self.tau_max.is_finite() || self.tau_max <= 1.0 {
            return Err(DdpError::Domain(format!(
                "tau_max must be finite and > 1, got {}",
                self.tau_max
            )));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 || self.gamma >= 1.0 {
            return Err(DdpError::Domain(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.total_classes <= self.base_classes {
            return Err(DdpError::Domain(format!(
                "total_classes {} must exceed base_classes {}",
                self.total_classes, self.base_classes
            )));
        }
        Ok(())
    }
}

/// Temperature for a cumulative class count, exact at both endpoints:
/// `seen == base` gives exactly 1 and `seen == total` exactly τ_max.
pub fn pcd_tau(schedule: &PcdSchedule, seen_classes: usize) -> Result<f64> {
    schedule.validate()?;
    if seen_classes < schedule.base_classes || seen_classes > schedule.total_classes {
        return Err(DdpError::Domain(format!(
            "seen_classes {} outside [{}, {}]",
            seen_classes, schedule.base_classes, schedule.total_classes
        )));
    }
    if seen_classes == schedule.base_classes {
        return Ok(1.0);
    }
    if seen_classes == schedule.total_classes {
        return Ok(schedule.tau_max);
    }
    let progress = (seen_classes - schedule.base_classes) as f64
        / (schedule.total_classes - schedule.base_classes) as f64;
    Ok(1.0 + (schedule.tau_max - 1.0) * progress.powf(schedule.gamma))
}

/// The positive- and negative-prompt cosine similarities of one
/// (image, class) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub s_pos: f64,
    pub s_neg: f64,
}

impl ScorePair {
    /// Checks both similarities are finite and within [−1, 1].
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_pos", self.s_pos), ("s_neg", self.s_neg)] {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(DdpError::Numeric(format!(
                    "{name} = {v} is outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Positive confidence of a score pair at temperature τ, computed as a
/// numerically stable sigmoid of `(s⁺ − s⁻)/τ`.
pub fn binary_confidence(pair: &ScorePair, tau: f64) -> Result<f64> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(DdpError::Domain(format!(
            "temperature must be finite and positive, got {tau}"
        )));
    }
    Ok(sigmoid((pair.s_pos - pair.s_neg) / tau))
}

/// An all-zero prompt placeholder meaning "no prompt rows".
pub fn empty_prompt(embed_dim: usize) -> Tensor {
    Tensor::zeros(vec![0, embed_dim])
}

/// Image-independent text features of one class, one per branch.
#[derive(Clone, Debug)]
pub struct ClassTextFeatures {
    pub class_id: usize,
    pub positive: Tensor,
    pub negative: Tensor,
}

/// Encodes the class token through the text tower once per branch, honoring
/// the store's sharing policy and branch mode; unprompted branches encode
/// the bare token.
pub fn class_text_features(
    encoder: &DualEncoder,
    store: &PromptStore,
    class_id: usize,
) -> Result<ClassTextFeatures> {
    let token = store.class_token_row(class_id)?;
    let group = store.prompt_group(class_id);
    let none = empty_prompt(store.embed_dim());
    let pos_prompt = match group {
        Some(g) if store.branch().positive_prompted() => g.text_pos.value(),
        _ => &none,
    };
    let neg_prompt = match group {
        Some(g) if store.branch().negative_prompted() => g.text_neg.value(),
        _ => &none,
    };
    Ok(ClassTextFeatures {
        class_id,
        positive: encoder.text_encode(&token, pos_prompt)?,
        negative: encoder.text_encode(&token, neg_prompt)?,
    })
}

/// Scores one image (via its prefix cache) against one class whose text
/// features were precomputed; two visual passes per call.
pub fn image_class_scores(
    encoder: &DualEncoder,
    cache: &PrefixCache,
    store: &PromptStore,
    text: &ClassTextFeatures,
) -> Result<ScorePair> {
    let group = store.prompt_group(text.class_id);
    let none = empty_prompt(store.embed_dim());
    let pos_prompt = match group {
        Some(g) if store.branch().positive_prompted() => g.visual_pos.value(),
        _ => &none,
    };
    let neg_prompt = match group {
        Some(g) if store.branch().negative_prompted() => g.visual_neg.value(),
        _ => &none,
    };
    let visual_pos = encoder.visual_encode(cache, pos_prompt)?;
    let visual_neg = if pos_prompt == neg_prompt {
        visual_pos.clone()
    } else {
        encoder.visual_encode(cache, neg_prompt)?
    };
    let pair = ScorePair {
        s_pos: cosine(&text.positive, &visual_pos)?,
        s_neg: cosine(&text.negative, &visual_neg)?,
    };
    pair.validate()?;
    Ok(pair)
}

/// Scores one image against one class by running the full visual tower per
/// branch instead of reusing a prefix cache; the reference semantics that
/// cached scoring must reproduce bit-for-bit modulo rounding.
pub fn image_class_scores_uncached(
    encoder: &DualEncoder,
    tokens: &Tensor,
    store: &PromptStore,
    text: &ClassTextFeatures,
) -> Result<ScorePair> {
    let group = store.prompt_group(text.class_id);
    let none = empty_prompt(store.embed_dim());
    let pos_prompt = match group {
        Some(g) if store.branch().positive_prompted() => g.visual_pos.value(),
        _ => &none,
    };
    let neg_prompt = match group {
        Some(g) if store.branch().negative_prompted() => g.visual_neg.value(),
        _ => &none,
    };
    let visual_pos = encoder.visual_encode_uncached(tokens, pos_prompt)?;
    let visual_neg = if pos_prompt == neg_prompt {
        visual_pos.clone()
    } else {
        encoder.visual_encode_uncached(tokens, neg_prompt)?
    };
    let pair = ScorePair {
        s_pos: cosine(&text.positive, &visual_pos)?,
        s_neg: cosine(&text.negative, &visual_neg)?,
    };
    pair.validate()?;
    Ok(pair)
}

/// Full four-pass score of one (image, class) pair from its prompt set:
/// two text encodings and two prompted visual encodings over the shared
/// prefix cache.
pub fn class_scores(
    encoder: &DualEncoder,
    cache: &PrefixCache,
    set: &PromptSet<'_>,
) -> Result<ScorePair> {
    let d = set.class_token.len();
    let token = Tensor::new(vec![1, d], set.class_token.values().to_vec())?;
    let text_pos = encoder.text_encode(&token, set.text_pos.value())?;
    let text_neg = encoder.text_encode(&token, set.text_neg.value())?;
    let visual_pos = encoder.visual_encode(cache, set.visual_pos.value())?;
    let visual_neg = encoder.visual_encode(cache, set.visual_neg.value())?;
    let pair = ScorePair {
        s_pos: cosine(&text_pos, &visual_pos)?,
        s_neg: cosine(&text_neg, &visual_neg)?,
    };
    pair.validate()?;
    Ok(pair)
}

/// Positive confidences over images × classes with ground truth and a mask
/// of labeled entries. Negative confidences are never stored; they are
/// `1 − ŷ₊` by construction.
#[derive(Clone, Debug)]
pub struct PredictionMatrix {
    num_images: usize,
    class_ids: Vec<usize>,
    in_task: Vec<bool>,
    confidences: Vec<f64>,
    labels: Vec<bool>,
    mask: Vec<bool>,
}

impl PredictionMatrix {
    /// Empty (fully unmasked) matrix over the given class columns;
    /// `in_task` flags which columns belong to the current task's label set.
    pub fn new(num_images: usize, class_ids: Vec<usize>, in_task: Vec<bool>) -> Result<Self> {
        if class_ids.len() != in_task.len() {
            return Err(DdpError::Usage(format!(
                "{} class ids but {} in-task flags",
                class_ids.len(),
                in_task.len()
            )));
        }
        let cells = num_images * class_ids.len();
        Ok(PredictionMatrix {
            num_images,
            class_ids,
            in_task,
            confidences: vec![0.0; cells],
            labels: vec![false; cells],
            mask: vec![false; cells],
        })
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Records a labeled entry. Confidence must already be in [0, 1].
    pub fn set_entry(
        &mut self,
        image: usize,
        column: usize,
        confidence: f64,
        label: bool,
    ) -> Result<()> {
        if image >= self.num_images || column >= self.class_ids.len() {
            return Err(DdpError::Usage(format!(
                "entry ({image}, {column}) outside {}x{} matrix",
                self.num_images,
                self.class_ids.len()
            )));
        }
        if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
            return Err(DdpError::Domain(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        let i = image * self.class_ids.len() + column;
        self.confidences[i] = confidence;
        self.labels[i] = label;
        self.mask[i] = true;
        Ok(())
    }

    fn cell(&self, image: usize, column: usize) -> usize {
        image * self.class_ids.len() + column
    }

    /// Confidence at a labeled or unlabeled cell.
    pub fn confidence(&self, image: usize, column: usize) -> f64 {
        self.confidences[self.cell(image, column)]
    }

    /// Ground-truth label of a cell.
    pub fn label(&self, image: usize, column: usize) -> bool {
        self.labels[self.cell(image, column)]
    }

    /// Whether a cell carries a label.
    pub fn is_masked(&self, image: usize, column: usize) -> bool {
        self.mask[self.cell(image, column)]
    }
}

/// Binary cross-entropy over the labeled entries, averaged over images.
///
/// Each labeled (image, class) contributes `−y·ln ŷ₊ − (1−y)·ln(1−ŷ₊)`
/// with the log arguments clamped below at 1e-12; a perfect prediction
/// therefore contributes exactly zero. Labeled entries in columns outside
/// the current task violate partial labeling and raise a protocol error.
pub fn bce_loss(preds: &PredictionMatrix) -> Result<f64> {
    if preds.num_images == 0 {
        return Ok(0.0);
    }
    let cols = preds.class_ids.len();
    let mut total = 0.0;
    for image in 0..preds.num_images {
        for column in 0..cols {
            let i = image * cols + column;
            if !preds.mask[i] {
                continue;
            }
            if !preds.in_task[column] {
                return Err(DdpError::Protocol(format!(
                    "labeled entry for class {} outside the current task",
                    preds.class_ids[column]
                )));
            }
            let y_hat = preds.confidences[i];
            let term = if preds.labels[i] {
                -y_hat.max(BCE_EPS).ln()
            } else {
                -(1.0 - y_hat).max(BCE_EPS).ln()
            };
            total += term;
        }
    }
    Ok(total / preds.num_images as f64)
}

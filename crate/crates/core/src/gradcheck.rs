//! Finite-difference validation of every backward rule.
//!
//! The checker rebuilds a scalar loss from scratch for each perturbed
//! coordinate and compares central differences against the tape's analytic
//! gradients. The battery covers each differentiable operation in isolation
//! plus the complete two-class prompted scoring pipeline, so a regression in
//! any backward rule surfaces as a named failure.

use crate::encoder::{init_frozen_encoder, DualEncoder, DualEncoderConfig};
use crate::error::{DdpError, Result};
use crate::graph::{NodeId, Tape};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Floor of the relative-error denominator, guarding near-zero gradients.
const REL_FLOOR: f64 = 1e-6;
/// Step used by the standard battery.
const BATTERY_STEP: f64 = 1e-5;
/// Tolerance every battery entry must meet.
pub const BATTERY_TOLERANCE: f64 = 1e-5;

/// Outcome of one named gradient check.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl GradCheckResult {
    /// True when the check met the battery tolerance.
    pub fn passed(&self) -> bool {
        self.max_rel_err <= BATTERY_TOLERANCE
    }
}

/// Compares the tape's analytic gradients against central finite
/// differences of the loss the builder constructs, returning the worst
/// relative error over every coordinate of every parameter.
///
/// The builder receives a fresh tape plus one leaf per parameter (same
/// order) and returns the scalar loss node; it must be deterministic in the
/// leaf values. Relative error uses `|a − n| / max(|a| + |n|, 1e-6)`.
pub fn finite_diff_check<F>(mut build: F, params: &[Parameter], h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(DdpError::Domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }

    let evaluate = |params: &[Parameter], with_grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &leaves)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(DdpError::Numeric(format!("loss is non-finite: {value}")));
        }
        let mut grads = Vec::new();
        if with_grads {
            tape.backward(loss)?;
            for leaf in &leaves {
                grads.push(tape.leaf_grad(*leaf)?);
            }
        }
        Ok((value, grads))
    };

    // One analytic pass, then two loss evaluations per coordinate.
    let mut evaluate = evaluate;
    let (_, analytic) = evaluate(params, true)?;
    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.value().len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            let mut v_plus = param.value().values().to_vec();
            let mut v_minus = v_plus.clone();
            v_plus[i] += h;
            v_minus[i] -= h;
            let shape = param.value().shape().to_vec();
            plus[pi].set_value(Tensor::new(shape.clone(), v_plus)?)?;
            minus[pi].set_value(Tensor::new(shape, v_minus)?)?;
            let (fp, _) = evaluate(&plus, false)?;
            let (fm, _) = evaluate(&minus, false)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].values()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn rand_param(name: &str, shape: Vec<usize>, seed: u64) -> Parameter {
    let n: usize = shape.iter().product();
    let values = Rng::stream(seed, name, 0).gaussian_vec(n, 0.8);
    Parameter::new(name, Tensor::new(shape, values).expect("finite init"))
}

fn rand_const(shape: Vec<usize>, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let values = Rng::stream(seed, "const", 1).gaussian_vec(n, 0.8);
    Tensor::new(shape, values).expect("finite init")
}

/// Weighted scalar readout: `sum(x ⊙ w)` for a fixed random `w`.
fn weighted_sum(tape: &mut Tape, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(rand_const(shape, seed));
    let prod = tape.mul(x, w)?;
    tape.sum_all(prod)
}

fn check_case<F>(name: &'static str, params: Vec<Parameter>, build: F) -> Result<GradCheckResult>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let max_rel_err = finite_diff_check(build, &params, BATTERY_STEP)?;
    Ok(GradCheckResult { name, max_rel_err })
}

fn battery_encoder() -> Result<(DualEncoderConfig, DualEncoder)> {
    let mut config = DualEncoderConfig::toy(2, 2);
    config.visual.num_layers = 2;
    config.visual.embed_dim = 16;
    config.visual.num_heads = 2;
    config.visual.ff_width = 24;
    config.text.num_layers = 1;
    config.text.attach_depth = 1;
    config.text.embed_dim = 16;
    config.text.num_heads = 2;
    config.text.ff_width = 24;
    config.text.prompt_len = 2;
    config.text.seq_len = 3;
    let encoder = init_frozen_encoder(&config, 1013)?;
    Ok((config, encoder))
}

/// Runs the full named battery: every differentiable op in isolation, the
/// prompted visual and text paths, and the end-to-end two-class loss.
pub fn run_battery() -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();

    results.push(check_case(
        "add",
        vec![rand_param("a", vec![2, 3], 1), rand_param("b", vec![2, 3], 2)],
        |tape, leaves| {
            let s = tape.add(leaves[0], leaves[1])?;
            weighted_sum(tape, s, 100)
        },
    )?);

    results.push(check_case(
        "sub",
        vec![rand_param("a", vec![2, 3], 3), rand_param("b", vec![2, 3], 4)],
        |tape, leaves| {
            let s = tape.sub(leaves[0], leaves[1])?;
            weighted_sum(tape, s, 101)
        },
    )?);

    results.push(check_case(
        "mul",
        vec![rand_param("a", vec![2, 3], 5), rand_param("b", vec![2, 3], 6)],
        |tape, leaves| {
            let s = tape.mul(leaves[0], leaves[1])?;
            tape.sum_all(s)
        },
    )?);

    results.push(check_case(
        "scale",
        vec![rand_param("a", vec![2, 3], 7)],
        |tape, leaves| {
            let s = tape.scale(leaves[0], -2.5)?;
            weighted_sum(tape, s, 102)
        },
    )?);

    results.push(check_case(
        "add-row",
        vec![rand_param("x", vec![3, 4], 8), rand_param("bias", vec![4], 9)],
        |tape, leaves| {
            let s = tape.add_row(leaves[0], leaves[1])?;
            weighted_sum(tape, s, 103)
        },
    )?);

    results.push(check_case(
        "matmul",
        vec![rand_param("a", vec![2, 3], 10), rand_param("b", vec![3, 4], 11)],
        |tape, leaves| {
            let s = tape.matmul(leaves[0], leaves[1])?;
            weighted_sum(tape, s, 104)
        },
    )?);

    results.push(check_case(
        "concat-slice",
        vec![rand_param("a", vec![2, 4], 12), rand_param("b", vec![3, 4], 13)],
        |tape, leaves| {
            let joined = tape.concat_rows(leaves[0], leaves[1])?;
            let sliced = tape.slice_rows(joined, 1, 4)?;
            weighted_sum(tape, sliced, 105)
        },
    )?);

    results.push(check_case(
        "softmax-rows",
        vec![rand_param("x", vec![3, 5], 14)],
        |tape, leaves| {
            let s = tape.softmax_rows(leaves[0], 1.3)?;
            weighted_sum(tape, s, 106)
        },
    )?);

    results.push(check_case(
        "layer-norm",
        vec![
            rand_param("x", vec![2, 6], 15),
            rand_param("scale", vec![6], 16),
            rand_param("shift", vec![6], 17),
        ],
        |tape, leaves| {
            let s = tape.layer_norm(leaves[0], leaves[1], leaves[2], 1e-5)?;
            weighted_sum(tape, s, 107)
        },
    )?);

    results.push(check_case(
        "gelu",
        vec![rand_param("x", vec![3, 4], 18)],
        |tape, leaves| {
            let s = tape.gelu(leaves[0])?;
            weighted_sum(tape, s, 108)
        },
    )?);

    results.push(check_case(
        "attention",
        vec![
            rand_param("q", vec![3, 8], 19),
            rand_param("k", vec![5, 8], 20),
            rand_param("v", vec![5, 8], 21),
        ],
        |tape, leaves| {
            let s = tape.attention(leaves[0], leaves[1], leaves[2], 2)?;
            weighted_sum(tape, s, 109)
        },
    )?);

    results.push(check_case(
        "cosine",
        vec![rand_param("u", vec![1, 6], 22), rand_param("v", vec![1, 6], 23)],
        |tape, leaves| tape.cosine(leaves[0], leaves[1]),
    )?);

    results.push(check_case(
        "bce-with-logit",
        vec![
            Parameter::new("z_pos", Tensor::scalar(0.7)),
            Parameter::new("z_neg", Tensor::scalar(-0.4)),
        ],
        |tape, leaves| {
            let pos = tape.bce_with_logit(leaves[0], 1.0)?;
            let neg = tape.bce_with_logit(leaves[1], 0.0)?;
            tape.add_n(&[pos, neg])
        },
    )?);

    results.push(check_case(
        "quadratic-sum",
        vec![rand_param("theta", vec![2, 2], 24)],
        |tape, leaves| {
            let sq = tape.mul(leaves[0], leaves[0])?;
            tape.sum_all(sq)
        },
    )?);

    let (config, encoder) = battery_encoder()?;
    let grid_len = config.grid_rows * config.grid_cols * config.grid_channels;
    let grid = Tensor::new(
        vec![config.grid_rows, config.grid_cols, config.grid_channels],
        Rng::stream(2050, "grid", 0).gaussian_vec(grid_len, 1.0),
    )?;
    let tokens = encoder.embed_image(&grid)?;
    let cache = encoder.visual_prefix(0, &tokens)?;
    let d = config.visual.embed_dim;

    {
        let enc = &encoder;
        let hidden = cache.hidden.clone();
        results.push(check_case(
            "visual-prompt",
            vec![rand_param("visual_prompt", vec![2, d], 25)],
            move |tape, leaves| {
                let tower = enc.visual.on_tape(tape);
                let h = tape.constant(hidden.clone());
                let out = tower.prompted_tail(tape, h, Some(leaves[0]))?;
                weighted_sum(tape, out, 110)
            },
        )?);
    }

    {
        let enc = &encoder;
        let token = Tensor::new(vec![1, d], Rng::stream(2051, "token", 0).gaussian_vec(d, 1.0))?;
        results.push(check_case(
            "text-prompt",
            vec![rand_param("text_prompt", vec![2, d], 26)],
            move |tape, leaves| {
                let tower = enc.text.on_tape(tape);
                let tok = tape.constant(token.clone());
                let out = tower.text_sequence(tape, Some(leaves[0]), tok)?;
                weighted_sum(tape, out, 111)
            },
        )?);
    }

    results.push(pipeline_case(&config, &encoder)?);

    Ok(results)
}

/// End-to-end check: binary cross-entropy of a two-class, three-image
/// prompted forward, differentiated with respect to all eight prompt
/// parameters.
fn pipeline_case(config: &DualEncoderConfig, encoder: &DualEncoder) -> Result<GradCheckResult> {
    let d = config.visual.embed_dim;
    let grid_len = config.grid_rows * config.grid_cols * config.grid_channels;
    let mut caches = Vec::new();
    for image in 0..3u64 {
        let grid = Tensor::new(
            vec![config.grid_rows, config.grid_cols, config.grid_channels],
            Rng::stream(3000 + image, "grid", 0).gaussian_vec(grid_len, 1.0),
        )?;
        let tokens = encoder.embed_image(&grid)?;
        caches.push(encoder.visual_prefix(image, &tokens)?);
    }
    let tokens: Vec<Tensor> = (0..2u64)
        .map(|c| {
            Tensor::new(
                vec![1, d],
                Rng::stream(3100 + c, "token", 0).gaussian_vec(d, 1.0),
            )
        })
        .collect::<Result<_>>()?;
    // labels[image][class]
    let labels = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];

    let mut params = Vec::new();
    for class in 0..2 {
        for slot in ["text_pos", "text_neg", "visual_pos", "visual_neg"] {
            params.push(rand_param(
                &format!("class{class}.{slot}"),
                vec![2, d],
                4000 + 10 * class as u64 + params.len() as u64,
            ));
        }
    }

    let max_rel_err = finite_diff_check(
        |tape, leaves| {
            let visual_tower = encoder.visual.on_tape(tape);
            let text_tower = encoder.text.on_tape(tape);
            let mut text_features = Vec::new();
            for class in 0..2 {
                let tok = tape.constant(tokens[class].clone());
                let pos = text_tower.text_sequence(tape, Some(leaves[4 * class]), tok)?;
                let neg = text_tower.text_sequence(tape, Some(leaves[4 * class + 1]), tok)?;
                text_features.push((pos, neg));
            }
            let mut terms = Vec::new();
            for (image, cache) in caches.iter().enumerate() {
                let hidden = tape.constant(cache.hidden.clone());
                for class in 0..2 {
                    let visual_pos =
                        visual_tower.prompted_tail(tape, hidden, Some(leaves[4 * class + 2]))?;
                    let visual_neg =
                        visual_tower.prompted_tail(tape, hidden, Some(leaves[4 * class + 3]))?;
                    let s_pos = tape.cosine(text_features[class].0, visual_pos)?;
                    let s_neg = tape.cosine(text_features[class].1, visual_neg)?;
                    let z = tape.sub(s_pos, s_neg)?;
                    terms.push(tape.bce_with_logit(z, labels[image][class])?);
                }
            }
            let total = tape.add_n(&terms)?;
            tape.scale(total, 1.0 / 3.0)
        },
        &params,
        BATTERY_STEP,
    )?;
    Ok(GradCheckResult {
        name: "pipeline-bce",
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_reproduced_tightly() {
        let params = vec![Parameter::new("theta", Tensor::scalar(3.0))];
        let err = finite_diff_check(
            |tape, leaves| {
                let sq = tape.mul(leaves[0], leaves[0])?;
                tape.sum_all(sq)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let params = vec![Parameter::new("theta", Tensor::scalar(1.5))];
        let err = finite_diff_check(
            |tape, _| {
                let c = tape.constant(Tensor::scalar(4.0));
                tape.sum_all(c)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_a_numeric_error() {
        let params = vec![Parameter::new("theta", Tensor::scalar(2.0))];
        let result = finite_diff_check(
            |tape, leaves| {
                let big = tape.scale(leaves[0], 1e308)?;
                let sq = tape.mul(big, big)?;
                tape.sum_all(sq)
            },
            &params,
            1e-4,
        );
        assert!(matches!(result, Err(DdpError::Numeric(_))));
    }

    #[test]
    fn nonpositive_step_is_a_domain_error() {
        let params = vec![Parameter::new("theta", Tensor::scalar(1.0))];
        let result = finite_diff_check(|tape, leaves| tape.sum_all(leaves[0]), &params, 0.0);
        assert!(matches!(result, Err(DdpError::Domain(_))));
    }

    #[test]
    fn battery_passes_everywhere() {
        let results = run_battery().unwrap();
        let names: Vec<&str> = results.iter().map(|r| r.name).collect();
        for expected in [
            "add",
            "sub",
            "mul",
            "scale",
            "add-row",
            "matmul",
            "concat-slice",
            "softmax-rows",
            "layer-norm",
            "gelu",
            "attention",
            "cosine",
            "bce-with-logit",
            "quadratic-sum",
            "visual-prompt",
            "text-prompt",
            "pipeline-bce",
        ] {
            assert!(names.contains(&expected), "missing battery case {expected}");
        }
        for r in &results {
            assert!(
                r.passed(),
                "case {} exceeded tolerance: rel err {}",
                r.name,
                r.max_rel_err
            );
        }
    }
}

//! Resolved run configuration: every knob of a run in one human-readable
//! key-value file, with a canonical rendering and a content hash.
//!
//! The determinism story runs through this module: [`RunManifest::to_text`]
//! emits a byte-stable canonical rendering (fixed key order, shortest
//! round-trip floats), [`RunManifest::hash`] fingerprints that rendering,
//! and reports and checkpoints embed the fingerprint. Rerunning from a
//! persisted manifest therefore reproduces every output byte for byte.
//!
//! The schedule and temperature fields keep the same compact grammar the
//! command line uses (`20:B4-C2`, `tau_max=7,gamma=0.2` or `off`), so a
//! manifest file reads like the invocation that produced it.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{DdpError, Result};
use crate::prompting::{BranchMode, PromptMode};
use crate::protocol::{build_schedule, TaskSchedule, TrainConfig};
use crate::scoring::PcdSchedule;

/// Temperature-schedule parameters as written in a manifest; the class
/// counts come from the schedule at resolution time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PcdParams {
    pub tau_max: f64,
    pub gamma: f64,
}

/// One run's complete configuration. Every field has a default, so an empty
/// manifest file is valid and names the reference benchmark run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    /// Directory holding `train.ddp` and `test.ddp`.
    pub dataset: String,
    /// Directory that receives the report, curves, checkpoint, and the
    /// resolved copy of this manifest.
    pub out: String,
    /// Total classes in the label space.
    pub total_classes: usize,
    /// Classes in the first (base) task; 0 makes every task an increment.
    pub base_classes: usize,
    /// Classes added by each later task.
    pub increment: usize,
    /// Passes over the selected images per task.
    pub epochs: usize,
    /// Images per optimization step.
    pub batch_size: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Prompt length L_P.
    pub prompt_len: usize,
    /// How many final visual layers receive the prompt.
    pub attach_depth: usize,
    /// Prompt sharing policy.
    pub prompt_mode: PromptMode,
    /// Which of the positive/negative branches carry prompts.
    pub branch_mode: BranchMode,
    /// Freeze each task's prompts when the task completes.
    pub freeze_past: bool,
    /// Inference-time temperature schedule; `None` keeps τ = 1.
    pub pcd: Option<PcdParams>,
    /// Standard deviation of prompt initialization.
    pub init_std: f64,
    /// Base decision threshold on positive confidence.
    pub threshold: f64,
    /// Offset of the high-confidence operating point above the base one.
    pub hiconf_delta: f64,
    /// Root seed for prompts, class tokens, and epoch shuffles.
    pub seed: u64,
}

impl Default for RunManifest {
    fn default() -> Self {
        let c = TrainConfig::default();
        RunManifest {
            dataset: "data".into(),
            out: "runs".into(),
            total_classes: 20,
            base_classes: 4,
            increment: 2,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            prompt_len: c.prompt_len,
            attach_depth: c.attach_depth,
            prompt_mode: c.prompt_mode,
            branch_mode: c.branch_mode,
            freeze_past: c.freeze_past,
            pcd: None,
            init_std: c.init_std,
            threshold: c.threshold,
            hiconf_delta: c.hiconf_delta,
            seed: c.seed,
        }
    }
}

impl RunManifest {
    /// Canonical key-value rendering: keys in fixed alphabetical order, one
    /// `key = value` per line, floats in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("attach_depth", self.attach_depth.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("branch_mode", branch_mode_name(self.branch_mode).into());
        kv("dataset", self.dataset.clone());
        kv("epochs", self.epochs.to_string());
        kv("freeze_past", self.freeze_past.to_string());
        kv("hiconf_delta", self.hiconf_delta.to_string());
        kv("init_std", self.init_std.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("out", self.out.clone());
        kv("pcd", format_pcd_spec(self.pcd));
        kv("prompt_len", self.prompt_len.to_string());
        kv("prompt_mode", prompt_mode_name(self.prompt_mode).into());
        kv(
            "schedule",
            format!(
                "{}:B{}-C{}",
                self.total_classes, self.base_classes, self.increment
            ),
        );
        kv("seed", self.seed.to_string());
        kv("threshold", self.threshold.to_string());
        s
    }

    /// Parses a key-value file. Missing keys take their defaults; unknown or
    /// repeated keys and malformed values are configuration errors. Blank
    /// lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        let mut seen: Vec<&str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DdpError::Config(format!("manifest line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(DdpError::Config(format!(
                    "manifest line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            seen.push(key);
            match key {
                "attach_depth" => m.attach_depth = parse_num(key, value)?,
                "batch_size" => m.batch_size = parse_num(key, value)?,
                "branch_mode" => m.branch_mode = parse_branch_mode(value)?,
                "dataset" => m.dataset = value.to_string(),
                "epochs" => m.epochs = parse_num(key, value)?,
                "freeze_past" => m.freeze_past = parse_num(key, value)?,
                "hiconf_delta" => m.hiconf_delta = parse_num(key, value)?,
                "init_std" => m.init_std = parse_num(key, value)?,
                "learning_rate" => m.learning_rate = parse_num(key, value)?,
                "out" => m.out = value.to_string(),
                "pcd" => m.pcd = parse_pcd_spec(value)?,
                "prompt_len" => m.prompt_len = parse_num(key, value)?,
                "prompt_mode" => m.prompt_mode = parse_prompt_mode(value)?,
                "schedule" => {
                    let (total, base, inc) = parse_schedule_spec(value)?;
                    m.total_classes = total;
                    m.base_classes = base;
                    m.increment = inc;
                }
                "seed" => m.seed = parse_num(key, value)?,
                "threshold" => m.threshold = parse_num(key, value)?,
                _ => {
                    return Err(DdpError::Config(format!(
                        "manifest line {}: unknown key `{key}`",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(m)
    }

    /// SHA-256 of the canonical rendering, in lowercase hex. Embedded in
    /// reports and checkpoints so artifacts name the configuration that
    /// produced them.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut s = String::with_capacity(64);
        for byte in digest {
            write!(s, "{byte:02x}").expect("string write");
        }
        s
    }

    /// The incremental schedule this manifest names.
    pub fn schedule(&self) -> Result<TaskSchedule> {
        build_schedule(self.total_classes, self.base_classes, self.increment)
    }

    /// The training configuration this manifest names, with the temperature
    /// schedule resolved against the class counts.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let pcd = match self.pcd {
            Some(p) => {
                let first_task = if self.base_classes == 0 {
                    self.increment
                } else {
                    self.base_classes
                };
                Some(PcdSchedule::new(
                    p.tau_max,
                    p.gamma,
                    first_task,
                    self.total_classes,
                )?)
            }
            None => None,
        };
        let config = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            prompt_len: self.prompt_len,
            attach_depth: self.attach_depth,
            pcd,
            prompt_mode: self.prompt_mode,
            branch_mode: self.branch_mode,
            freeze_past: self.freeze_past,
            init_std: self.init_std,
            threshold: self.threshold,
            hiconf_delta: self.hiconf_delta,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// Writes the canonical rendering to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Reads and parses a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DdpError::Config(format!("manifest key `{key}`: cannot parse `{value}`")))
}

/// Canonical name of a prompt sharing policy.
pub fn prompt_mode_name(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::ClassSpecific => "class-specific",
        PromptMode::TaskSpecific => "task-specific",
        PromptMode::Global => "global",
        PromptMode::None => "none",
    }
}

/// Parses a prompt sharing policy name.
pub fn parse_prompt_mode(value: &str) -> Result<PromptMode> {
    match value {
        "class-specific" => Ok(PromptMode::ClassSpecific),
        "task-specific" => Ok(PromptMode::TaskSpecific),
        "global" => Ok(PromptMode::Global),
        "none" => Ok(PromptMode::None),
        _ => Err(DdpError::Config(format!(
            "unknown prompt mode `{value}` (expected class-specific, task-specific, global, or none)"
        ))),
    }
}

/// Canonical name of a branch selection.
pub fn branch_mode_name(mode: BranchMode) -> &'static str {
    match mode {
        BranchMode::Both => "both",
        BranchMode::PosOnly => "pos-only",
        BranchMode::NegOnly => "neg-only",
        BranchMode::None => "none",
    }
}

/// Parses a branch selection name.
pub fn parse_branch_mode(value: &str) -> Result<BranchMode> {
    match value {
        "both" => Ok(BranchMode::Both),
        "pos-only" => Ok(BranchMode::PosOnly),
        "neg-only" => Ok(BranchMode::NegOnly),
        "none" => Ok(BranchMode::None),
        _ => Err(DdpError::Config(format!(
            "unknown branch mode `{value}` (expected both, pos-only, neg-only, or none)"
        ))),
    }
}

/// Parses `TOTAL:Bx-Cy` into (total, base, increment).
pub fn parse_schedule_spec(spec: &str) -> Result<(usize, usize, usize)> {
    let bad = || DdpError::Config(format!("schedule `{spec}`: expected TOTAL:Bx-Cy, e.g. 20:B4-C2"));
    let (total, rest) = spec.split_once(':').ok_or_else(bad)?;
    let total = total.trim().parse().map_err(|_| bad())?;
    let (b, c) = rest.trim().split_once('-').ok_or_else(bad)?;
    let base = b.strip_prefix('B').ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let inc = c.strip_prefix('C').ok_or_else(bad)?.parse().map_err(|_| bad())?;
    Ok((total, base, inc))
}

/// Parses `tau_max=F,gamma=F` or `off`.
pub fn parse_pcd_spec(spec: &str) -> Result<Option<PcdParams>> {
    if spec == "off" {
        return Ok(None);
    }
    let bad = || {
        DdpError::Config(format!(
            "pcd `{spec}`: expected `tau_max=F,gamma=F` or `off`"
        ))
    };
    let (mut tau_max, mut gamma) = (None, None);
    for part in spec.split(',') {
        let (key, value) = part.trim().split_once('=').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        match key.trim() {
            "tau_max" if tau_max.is_none() => tau_max = Some(value),
            "gamma" if gamma.is_none() => gamma = Some(value),
            _ => return Err(bad()),
        }
    }
    match (tau_max, gamma) {
        (Some(tau_max), Some(gamma)) => Ok(Some(PcdParams { tau_max, gamma })),
        _ => Err(bad()),
    }
}

/// Canonical rendering of the temperature parameters.
pub fn format_pcd_spec(pcd: Option<PcdParams>) -> String {
    match pcd {
        Some(p) => format!("tau_max={},gamma={}", p.tau_max, p.gamma),
        None => "off".into(),
    }
}

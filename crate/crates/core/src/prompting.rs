//! Class-prompt storage: creation, sharing policies, freezing, checkpoints.
//!
//! Each class owns four prompt tensors — positive and negative, in the text
//! and visual modalities — plus a frozen token embedding standing in for the
//! class-name embedding. Prompts of finished tasks are frozen bitwise, which
//! (together with the frozen encoders) makes past-class scores exactly
//! reproducible at any later task. Alternative sharing policies (one prompt
//! group per task, or one global group) sit behind the same interface for
//! ablation runs.
//!
//! Checkpoints use a binary/JSON hybrid layout: an 8-byte magic, a little-
//! endian `u32` version and `u64` header length, a JSON header describing
//! groups and classes, then raw little-endian `f64` arrays (per group: the
//! four prompt slots in order; then per class ascending: its token). The
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DdpError, Result};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Checkpoint file magic bytes.
const MAGIC: &[u8; 8] = b"DDPCKPT\0";
/// Checkpoint format version.
const VERSION: u32 = 1;
/// Standard deviation of the frozen per-class token embeddings.
const TOKEN_STD: f64 = 1.0;

/// How prompt groups are allocated to classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// One prompt group per class (the full method).
    ClassSpecific,
    /// One prompt group shared by all classes of a task.
    TaskSpecific,
    /// A single prompt group shared by every class.
    Global,
    /// No prompts at all; scoring falls back to unprompted encodings.
    None,
}

impl PromptMode {
    /// Stable kebab-case name, matching the CLI flag values.
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::ClassSpecific => "class-specific",
            PromptMode::TaskSpecific => "task-specific",
            PromptMode::Global => "global",
            PromptMode::None => "none",
        }
    }
}

/// Which of the positive/negative prompted branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    /// Positive and negative prompts both trained and scored.
    Both,
    /// Only positive prompts; the negative branch uses unprompted encodings.
    PosOnly,
    /// Only negative prompts; the positive branch uses unprompted encodings.
    NegOnly,
    /// Neither branch prompted.
    None,
}

impl BranchMode {
    /// Stable kebab-case name, matching the CLI flag values.
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchMode::Both => "both",
            BranchMode::PosOnly => "pos-only",
            BranchMode::NegOnly => "neg-only",
            BranchMode::None => "none",
        }
    }

    /// True when the positive branch carries trained prompts.
    pub fn positive_prompted(&self) -> bool {
        matches!(self, BranchMode::Both | BranchMode::PosOnly)
    }

    /// True when the negative branch carries trained prompts.
    pub fn negative_prompted(&self) -> bool {
        matches!(self, BranchMode::Both | BranchMode::NegOnly)
    }
}

/// One of the four prompt slots of a group, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    TextPos,
    TextNeg,
    VisualPos,
    VisualNeg,
}

/// Canonical slot order used for parameter enumeration and checkpoints.
const ALL_SLOTS: [Slot; 4] = [Slot::TextPos, Slot::TextNeg, Slot::VisualPos, Slot::VisualNeg];

impl Slot {
    fn name(&self) -> &'static str {
        match self {
            Slot::TextPos => "text_pos",
            Slot::TextNeg => "text_neg",
            Slot::VisualPos => "visual_pos",
            Slot::VisualNeg => "visual_neg",
        }
    }
}

/// Identity of a prompt group under the active sharing policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKey {
    Class(usize),
    Task(usize),
    Global,
}

impl GroupKey {
    fn prefix(&self) -> String {
        match self {
            GroupKey::Class(c) => format!("class{c}"),
            GroupKey::Task(t) => format!("task{t}"),
            GroupKey::Global => "global".to_string(),
        }
    }
}

/// The four prompt parameters owned by one group.
#[derive(Clone, Debug)]
pub struct PromptGroup {
    pub key: GroupKey,
    pub origin_task: usize,
    pub text_pos: Parameter,
    pub text_neg: Parameter,
    pub visual_pos: Parameter,
    pub visual_neg: Parameter,
}

impl PromptGroup {
    fn new(key: GroupKey, origin_task: usize, seed: u64, init_std: f64, len: usize, d: usize) -> Self {
        let (label, index) = match key {
            GroupKey::Class(c) => ("class", c as u64),
            GroupKey::Task(t) => ("task", t as u64),
            GroupKey::Global => ("global", 0),
        };
        let prefix = key.prefix();
        let slot = |s: Slot| {
            let purpose = format!("prompt.{label}.{}", s.name());
            let values = Rng::stream(seed, &purpose, index).gaussian_vec(len * d, init_std);
            Parameter::new(
                format!("{prefix}.{}", s.name()),
                Tensor::new(vec![len, d], values).expect("prompt init is finite"),
            )
        };
        PromptGroup {
            key,
            origin_task,
            text_pos: slot(Slot::TextPos),
            text_neg: slot(Slot::TextNeg),
            visual_pos: slot(Slot::VisualPos),
            visual_neg: slot(Slot::VisualNeg),
        }
    }

    /// Read access to one slot.
    pub fn slot(&self, s: Slot) -> &Parameter {
        match s {
            Slot::TextPos => &self.text_pos,
            Slot::TextNeg => &self.text_neg,
            Slot::VisualPos => &self.visual_pos,
            Slot::VisualNeg => &self.visual_neg,
        }
    }

    /// True once the group has been frozen (all four slots move together).
    pub fn is_frozen(&self) -> bool {
        self.text_pos.is_frozen()
    }

    fn freeze(&mut self) {
        self.text_pos.freeze();
        self.text_neg.freeze();
        self.visual_pos.freeze();
        self.visual_neg.freeze();
    }
}

/// Read-only view of one class's prompts and token.
#[derive(Debug)]
pub struct PromptSet<'a> {
    pub class_id: usize,
    pub origin_task: usize,
    pub text_pos: &'a Parameter,
    pub text_neg: &'a Parameter,
    pub visual_pos: &'a Parameter,
    pub visual_neg: &'a Parameter,
    pub class_token: &'a Tensor,
}

#[derive(Clone, Debug)]
struct ClassEntry {
    origin_task: usize,
    group_index: Option<usize>,
    token: Tensor,
}

/// All prompt state for a run: groups, class table, and the active task.
#[derive(Clone, Debug)]
pub struct PromptStore {
    mode: PromptMode,
    branch: BranchMode,
    prompt_len: usize,
    embed_dim: usize,
    current_task: Option<usize>,
    groups: Vec<PromptGroup>,
    classes: BTreeMap<usize, ClassEntry>,
}

impl PromptStore {
    /// Empty store for the given sharing policy and prompt geometry.
    pub fn new(mode: PromptMode, branch: BranchMode, prompt_len: usize, embed_dim: usize) -> Self {
        PromptStore {
            mode,
            branch,
            prompt_len,
            embed_dim,
            current_task: None,
            groups: Vec::new(),
            classes: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn branch(&self) -> BranchMode {
        self.branch
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn current_task(&self) -> Option<usize> {
        self.current_task
    }

    /// Number of classes registered so far.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// All registered class ids, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    /// Task the class was introduced in.
    pub fn origin_task(&self, class_id: usize) -> Result<usize> {
        self.entry(class_id).map(|e| e.origin_task)
    }

    /// Makes `task` the active task. Tasks must arrive in increasing order.
    pub fn begin_task(&mut self, task: usize) -> Result<()> {
        if let Some(current) = self.current_task {
            if task <= current {
                return Err(DdpError::Usage(format!(
                    "task {task} does not follow current task {current}"
                )));
            }
        }
        self.current_task = Some(task);
        Ok(())
    }

    /// Begins `task` and creates prompts for its classes (ascending order).
    pub fn register_task(
        &mut self,
        task: usize,
        class_ids: &[usize],
        seed: u64,
        init_std: f64,
    ) -> Result<()> {
        self.begin_task(task)?;
        let mut sorted: Vec<usize> = class_ids.to_vec();
        sorted.sort_unstable();
        for class_id in sorted {
            self.insert_class(class_id, seed, init_std)?;
        }
        Ok(())
    }

    /// Creates the prompt set of one new class under the active task.
    ///
    /// The four prompt tensors are drawn i.i.d. Gaussian(0, init_std²) from
    /// class-scoped (or group-scoped, for shared policies) seeded streams;
    /// the class token comes from a fixed per-class stream so ablation modes
    /// agree on tokens given the same seed.
    pub fn create_class_prompts(
        &mut self,
        class_id: usize,
        seed: u64,
        init_std: f64,
    ) -> Result<PromptSet<'_>> {
        self.insert_class(class_id, seed, init_std)?;
        self.prompt_set(class_id)
    }

    fn insert_class(&mut self, class_id: usize, seed: u64, init_std: f64) -> Result<()> {
        let task = self.current_task.ok_or_else(|| {
            DdpError::Usage("create_class_prompts called before any task began".to_string())
        })?;
        if self.classes.contains_key(&class_id) {
            return Err(DdpError::Usage(format!(
                "class {class_id} already has prompts"
            )));
        }
        let token_values =
            Rng::stream(seed, "class-token", class_id as u64).gaussian_vec(self.embed_dim, TOKEN_STD);
        let token = Tensor::new(vec![self.embed_dim], token_values)?;
        let group_index = match self.mode {
            PromptMode::None => None,
            PromptMode::ClassSpecific => {
                let key = GroupKey::Class(class_id);
                self.groups.push(PromptGroup::new(
                    key,
                    task,
                    seed,
                    init_std,
                    self.prompt_len,
                    self.embed_dim,
                ));
                Some(self.groups.len() - 1)
            }
            PromptMode::TaskSpecific => {
                let key = GroupKey::Task(task);
                Some(self.find_or_create(key, task, seed, init_std))
            }
            PromptMode::Global => Some(self.find_or_create(GroupKey::Global, task, seed, init_std)),
        };
        self.classes.insert(
            class_id,
            ClassEntry {
                origin_task: task,
                group_index,
                token,
            },
        );
        Ok(())
    }

    fn find_or_create(&mut self, key: GroupKey, task: usize, seed: u64, init_std: f64) -> usize {
        if let Some(i) = self.groups.iter().position(|g| g.key == key) {
            return i;
        }
        self.groups.push(PromptGroup::new(
            key,
            task,
            seed,
            init_std,
            self.prompt_len,
            self.embed_dim,
        ));
        self.groups.len() - 1
    }

    fn entry(&self, class_id: usize) -> Result<&ClassEntry> {
        self.classes
            .get(&class_id)
            .ok_or_else(|| DdpError::Usage(format!("unknown class {class_id}")))
    }

    /// The prompt set of a class; errors when the class is unknown or the
    /// policy assigns it no prompts.
    pub fn prompt_set(&self, class_id: usize) -> Result<PromptSet<'_>> {
        let entry = self.entry(class_id)?;
        let index = entry.group_index.ok_or_else(|| {
            DdpError::Usage(format!(
                "class {class_id} has no prompts under mode {}",
                self.mode.as_str()
            ))
        })?;
        let group = &self.groups[index];
        Ok(PromptSet {
            class_id,
            origin_task: entry.origin_task,
            text_pos: &group.text_pos,
            text_neg: &group.text_neg,
            visual_pos: &group.visual_pos,
            visual_neg: &group.visual_neg,
            class_token: &entry.token,
        })
    }

    /// The group serving a class, if the policy assigns one.
    pub fn prompt_group(&self, class_id: usize) -> Option<&PromptGroup> {
        self.classes
            .get(&class_id)
            .and_then(|e| e.group_index)
            .map(|i| &self.groups[i])
    }

    /// The frozen token embedding of a class, shape `[embed_dim]`.
    pub fn class_token(&self, class_id: usize) -> Result<&Tensor> {
        self.entry(class_id).map(|e| &e.token)
    }

    /// The class token reshaped to a single-row matrix for the text encoder.
    pub fn class_token_row(&self, class_id: usize) -> Result<Tensor> {
        let token = self.class_token(class_id)?;
        Tensor::new(vec![1, self.embed_dim], token.values().to_vec())
    }

    /// Freezes every prompt group introduced by `task`. Idempotent.
    pub fn freeze_task_prompts(&mut self, task: usize) -> Result<()> {
        let known = self.classes.values().any(|e| e.origin_task == task)
            || self.groups.iter().any(|g| g.origin_task == task);
        if !known {
            return Err(DdpError::Usage(format!(
                "cannot freeze unknown task {task}"
            )));
        }
        for group in &mut self.groups {
            if group.origin_task == task {
                group.freeze();
            }
        }
        Ok(())
    }

    /// The trainable prompt parameters of the active task, in (class id,
    /// slot) order, deduplicated under shared policies and filtered to the
    /// active branches. A fully prompted class contributes four parameters.
    pub fn trainable_params(&mut self) -> Vec<&mut Parameter> {
        let Some(current) = self.current_task else {
            return Vec::new();
        };
        let mode = self.mode;
        let branch = self.branch;
        let mut out = Vec::new();
        for group in self.groups.iter_mut() {
            let relevant = match mode {
                PromptMode::Global => true,
                _ => group.origin_task == current,
            };
            if !relevant || group.text_pos.is_frozen() {
                continue;
            }
            let PromptGroup {
                text_pos,
                text_neg,
                visual_pos,
                visual_neg,
                ..
            } = group;
            if branch.positive_prompted() {
                out.push(&mut *text_pos);
            }
            if branch.negative_prompted() {
                out.push(&mut *text_neg);
            }
            if branch.positive_prompted() {
                out.push(&mut *visual_pos);
            }
            if branch.negative_prompted() {
                out.push(&mut *visual_neg);
            }
        }
        out
    }

    /// Saves the full store to `path`; `config_hash` names the originating
    /// run configuration and is verified on reload by the caller.
    pub fn save_checkpoint(&self, path: &Path, config_hash: &str) -> Result<()> {
        fs::write(path, self.checkpoint_bytes(config_hash)?)?;
        Ok(())
    }

    /// The serialized checkpoint, deterministic byte-for-byte.
    pub fn checkpoint_bytes(&self, config_hash: &str) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config_hash: config_hash.to_string(),
            mode: self.mode,
            branch: self.branch,
            prompt_len: self.prompt_len,
            embed_dim: self.embed_dim,
            current_task: self.current_task,
            groups: self
                .groups
                .iter()
                .map(|g| GroupMeta {
                    key: g.key,
                    origin_task: g.origin_task,
                    frozen: g.is_frozen(),
                })
                .collect(),
            classes: self
                .classes
                .iter()
                .map(|(&class_id, e)| ClassMeta {
                    class_id,
                    origin_task: e.origin_task,
                    group_index: e.group_index,
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| DdpError::Format {
            section: "header".to_string(),
            offset: HEADER_OFFSET as u64,
            message: e.to_string(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for group in &self.groups {
            for slot in ALL_SLOTS {
                for v in group.slot(slot).value().values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for entry in self.classes.values() {
            for v in entry.token.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Loads a store and its recorded config hash from `path`.
    pub fn load_checkpoint(path: &Path) -> Result<(PromptStore, String)> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Parses a checkpoint from raw bytes.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(PromptStore, String)> {
        let magic = take(bytes, 0, 8, "magic")?;
        if magic != MAGIC {
            return Err(format_error("magic", 0, "bad magic bytes"));
        }
        let version_bytes = take(bytes, 8, 4, "version")?;
        let version = u32::from_le_bytes(version_bytes.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_error(
                "version",
                8,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let len_bytes = take(bytes, 12, 8, "header-length")?;
        let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        let header_bytes = take(bytes, HEADER_OFFSET, header_len, "header")?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)
            .map_err(|e| format_error("header", HEADER_OFFSET as u64, e.to_string()))?;

        let slot_len = header.prompt_len * header.embed_dim;
        let mut offset = HEADER_OFFSET + header_len;
        let mut groups = Vec::with_capacity(header.groups.len());
        for meta in &header.groups {
            let prefix = meta.key.prefix();
            let read_slot = |name: &str, offset: &mut usize| -> Result<Parameter> {
                let raw = take(bytes, *offset, slot_len * 8, "group-data")?;
                *offset += slot_len * 8;
                let values = decode_f64s(raw);
                let mut p = Parameter::new(
                    format!("{prefix}.{name}"),
                    Tensor::new(vec![header.prompt_len, header.embed_dim], values)?,
                );
                if meta.frozen {
                    p.freeze();
                }
                Ok(p)
            };
            let text_pos = read_slot("text_pos", &mut offset)?;
            let text_neg = read_slot("text_neg", &mut offset)?;
            let visual_pos = read_slot("visual_pos", &mut offset)?;
            let visual_neg = read_slot("visual_neg", &mut offset)?;
            groups.push(PromptGroup {
                key: meta.key,
                origin_task: meta.origin_task,
                text_pos,
                text_neg,
                visual_pos,
                visual_neg,
            });
        }
        let mut classes = BTreeMap::new();
        let mut sorted_classes = header.classes.clone();
        sorted_classes.sort_by_key(|c| c.class_id);
        if sorted_classes != header.classes {
            return Err(format_error(
                "header",
                HEADER_OFFSET as u64,
                "class table is not sorted by class id",
            ));
        }
        for meta in &header.classes {
            if let Some(i) = meta.group_index {
                if i >= groups.len() {
                    return Err(format_error(
                        "header",
                        HEADER_OFFSET as u64,
                        format!("class {} references missing group {i}", meta.class_id),
                    ));
                }
            }
            let raw = take(bytes, offset, header.embed_dim * 8, "class-tokens")?;
            offset += header.embed_dim * 8;
            let token = Tensor::new(vec![header.embed_dim], decode_f64s(raw))?;
            if classes
                .insert(
                    meta.class_id,
                    ClassEntry {
                        origin_task: meta.origin_task,
                        group_index: meta.group_index,
                        token,
                    },
                )
                .is_some()
            {
                return Err(format_error(
                    "header",
                    HEADER_OFFSET as u64,
                    format!("duplicate class {}", meta.class_id),
                ));
            }
        }
        if offset != bytes.len() {
            return Err(format_error(
                "payload",
                offset as u64,
                format!("{} trailing bytes", bytes.len() - offset),
            ));
        }
        Ok((
            PromptStore {
                mode: header.mode,
                branch: header.branch,
                prompt_len: header.prompt_len,
                embed_dim: header.embed_dim,
                current_task: header.current_task,
                groups,
                classes,
            },
            header.config_hash,
        ))
    }
}

/// Byte offset where the JSON header starts.
const HEADER_OFFSET: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    mode: PromptMode,
    branch: BranchMode,
    prompt_len: usize,
    embed_dim: usize,
    current_task: Option<usize>,
    groups: Vec<GroupMeta>,
    classes: Vec<ClassMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GroupMeta {
    key: GroupKey,
    origin_task: usize,
    frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ClassMeta {
    class_id: usize,
    origin_task: usize,
    group_index: Option<usize>,
}

fn format_error(section: &str, offset: u64, message: impl Into<String>) -> DdpError {
    DdpError::Format {
        section: section.to_string(),
        offset,
        message: message.into(),
    }
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize, section: &str) -> Result<&'a [u8]> {
    let end = offset.checked_add(len).ok_or_else(|| {
        format_error(section, offset as u64, "section length overflows")
    })?;
    if end > bytes.len() {
        return Err(format_error(
            section,
            offset as u64,
            format!("file truncated: need {len} bytes, have {}", bytes.len().saturating_sub(offset)),
        ));
    }
    Ok(&bytes[offset..end])
}

fn decode_f64s(raw: &[u8]) -> Vec<f64> {
    raw.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{adam_step, AdamState};

    fn store(mode: PromptMode, branch: BranchMode) -> PromptStore {
        PromptStore::new(mode, branch, 3, 8)
    }

    fn bits(p: &Parameter) -> Vec<u64> {
        p.value().values().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn same_class_and_seed_reproduce_prompts_bitwise() {
        let mut a = store(PromptMode::ClassSpecific, BranchMode::Both);
        let mut b = store(PromptMode::ClassSpecific, BranchMode::Both);
        a.register_task(0, &[5], 77, 0.02).unwrap();
        b.register_task(0, &[5], 77, 0.02).unwrap();
        let sa = a.prompt_set(5).unwrap();
        let sb = b.prompt_set(5).unwrap();
        assert_eq!(bits(sa.text_pos), bits(sb.text_pos));
        assert_eq!(bits(sa.visual_neg), bits(sb.visual_neg));
        assert_eq!(sa.class_token, sb.class_token);
    }

    #[test]
    fn positive_and_negative_prompts_differ() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0], 1, 0.02).unwrap();
        let set = s.prompt_set(0).unwrap();
        assert_ne!(set.text_pos.value(), set.text_neg.value());
        assert_ne!(set.visual_pos.value(), set.visual_neg.value());
        assert_ne!(set.text_pos.value(), set.visual_pos.value());
    }

    #[test]
    fn zero_init_std_gives_zero_prompts() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0], 1, 0.0).unwrap();
        let set = s.prompt_set(0).unwrap();
        assert!(set.text_pos.value().values().iter().all(|v| *v == 0.0));
        assert!(set.visual_neg.value().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicate_class_is_a_usage_error() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0], 1, 0.02).unwrap();
        assert!(matches!(
            s.create_class_prompts(0, 1, 0.02),
            Err(DdpError::Usage(_))
        ));
    }

    #[test]
    fn frozen_prompts_survive_adam_with_pending_gradients() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0, 1], 1, 0.02).unwrap();
        let grad = Tensor::new(vec![3, 8], vec![1.0; 24]).unwrap();
        for p in s.trainable_params() {
            p.accumulate_gradient(&grad).unwrap();
        }
        s.freeze_task_prompts(0).unwrap();
        let before: Vec<Vec<u64>> = [0, 1]
            .iter()
            .flat_map(|&c| {
                let set = s.prompt_set(c).unwrap();
                vec![bits(set.text_pos), bits(set.text_neg), bits(set.visual_pos), bits(set.visual_neg)]
            })
            .collect();
        let mut adam = AdamState::new(1e-3);
        let mut params = s.trainable_params();
        assert!(params.is_empty());
        adam_step(&mut adam, &mut params).unwrap();
        let after: Vec<Vec<u64>> = [0, 1]
            .iter()
            .flat_map(|&c| {
                let set = s.prompt_set(c).unwrap();
                vec![bits(set.text_pos), bits(set.text_neg), bits(set.visual_pos), bits(set.visual_neg)]
            })
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn freezing_twice_is_idempotent_and_unknown_task_errors() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0], 1, 0.02).unwrap();
        s.freeze_task_prompts(0).unwrap();
        s.freeze_task_prompts(0).unwrap();
        assert!(s.prompt_group(0).unwrap().is_frozen());
        assert!(matches!(
            s.freeze_task_prompts(3),
            Err(DdpError::Usage(_))
        ));
    }

    #[test]
    fn next_task_stays_trainable_after_freezing_previous() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0, 1], 1, 0.02).unwrap();
        s.freeze_task_prompts(0).unwrap();
        s.register_task(1, &[2], 1, 0.02).unwrap();
        let names: Vec<String> = s
            .trainable_params()
            .iter()
            .map(|p| p.identifier().to_string())
            .collect();
        assert_eq!(
            names,
            vec![
                "class2.text_pos",
                "class2.text_neg",
                "class2.visual_pos",
                "class2.visual_neg"
            ]
        );
    }

    #[test]
    fn trainable_params_follow_class_then_slot_order() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[4, 2], 1, 0.02).unwrap();
        let names: Vec<String> = s
            .trainable_params()
            .iter()
            .map(|p| p.identifier().to_string())
            .collect();
        assert_eq!(names.len(), 8);
        assert_eq!(
            names,
            vec![
                "class2.text_pos",
                "class2.text_neg",
                "class2.visual_pos",
                "class2.visual_neg",
                "class4.text_pos",
                "class4.text_neg",
                "class4.visual_pos",
                "class4.visual_neg"
            ]
        );
        let again: Vec<String> = s
            .trainable_params()
            .iter()
            .map(|p| p.identifier().to_string())
            .collect();
        assert_eq!(names, again);
    }

    #[test]
    fn one_to_one_mapping_under_class_specific_policy() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0, 1, 2], 1, 0.02).unwrap();
        assert_eq!(s.num_classes(), 3);
        let ids: Vec<&str> = [0, 1, 2]
            .iter()
            .map(|&c| s.prompt_group(c).unwrap().text_pos.identifier())
            .collect();
        assert_eq!(ids, vec!["class0.text_pos", "class1.text_pos", "class2.text_pos"]);
    }

    #[test]
    fn task_specific_policy_shares_one_group_per_task() {
        let mut s = store(PromptMode::TaskSpecific, BranchMode::Both);
        s.register_task(0, &[0, 1], 1, 0.02).unwrap();
        assert_eq!(s.trainable_params().len(), 4);
        let a = s.prompt_group(0).unwrap().text_pos.identifier().to_string();
        let b = s.prompt_group(1).unwrap().text_pos.identifier().to_string();
        assert_eq!(a, "task0.text_pos");
        assert_eq!(a, b);
        s.freeze_task_prompts(0).unwrap();
        s.register_task(1, &[2], 1, 0.02).unwrap();
        assert_eq!(
            s.prompt_group(2).unwrap().text_pos.identifier(),
            "task1.text_pos"
        );
        assert!(s.prompt_group(0).unwrap().is_frozen());
        assert!(!s.prompt_group(2).unwrap().is_frozen());
    }

    #[test]
    fn global_policy_keeps_one_group_trainable_across_tasks() {
        let mut s = store(PromptMode::Global, BranchMode::Both);
        s.register_task(0, &[0, 1], 1, 0.02).unwrap();
        s.register_task(1, &[2], 1, 0.02).unwrap();
        let names: Vec<String> = s
            .trainable_params()
            .iter()
            .map(|p| p.identifier().to_string())
            .collect();
        assert_eq!(
            names,
            vec![
                "global.text_pos",
                "global.text_neg",
                "global.visual_pos",
                "global.visual_neg"
            ]
        );
        assert_eq!(
            s.prompt_group(0).unwrap().text_pos.identifier(),
            s.prompt_group(2).unwrap().text_pos.identifier()
        );
        s.freeze_task_prompts(0).unwrap();
        assert!(s.trainable_params().is_empty());
    }

    #[test]
    fn branch_mode_filters_trainable_slots() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::PosOnly);
        s.register_task(0, &[0], 1, 0.02).unwrap();
        let names: Vec<String> = s
            .trainable_params()
            .iter()
            .map(|p| p.identifier().to_string())
            .collect();
        assert_eq!(names, vec!["class0.text_pos", "class0.visual_pos"]);
        let mut n = store(PromptMode::ClassSpecific, BranchMode::NegOnly);
        n.register_task(0, &[0], 1, 0.02).unwrap();
        assert_eq!(n.trainable_params().len(), 2);
        let mut z = store(PromptMode::ClassSpecific, BranchMode::None);
        z.register_task(0, &[0], 1, 0.02).unwrap();
        assert!(z.trainable_params().is_empty());
    }

    #[test]
    fn promptless_policy_still_registers_class_tokens() {
        let mut s = store(PromptMode::None, BranchMode::Both);
        s.register_task(0, &[0, 1], 9, 0.02).unwrap();
        assert!(s.trainable_params().is_empty());
        assert!(s.prompt_group(0).is_none());
        assert_eq!(s.class_token(1).unwrap().shape(), &[8]);
        assert!(matches!(s.prompt_set(0), Err(DdpError::Usage(_))));
        let row = s.class_token_row(0).unwrap();
        assert_eq!(row.shape(), &[1, 8]);
    }

    #[test]
    fn class_tokens_agree_across_policies_for_one_seed() {
        let mut a = store(PromptMode::ClassSpecific, BranchMode::Both);
        let mut b = store(PromptMode::None, BranchMode::Both);
        a.register_task(0, &[3], 42, 0.02).unwrap();
        b.register_task(0, &[3], 42, 0.02).unwrap();
        assert_eq!(a.class_token(3).unwrap(), b.class_token(3).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("ddp-prompt-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.ckpt");
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.register_task(0, &[0, 1], 7, 0.02).unwrap();
        s.freeze_task_prompts(0).unwrap();
        s.register_task(1, &[2], 7, 0.02).unwrap();
        s.save_checkpoint(&path, "cfg-hash-123").unwrap();
        let (loaded, hash) = PromptStore::load_checkpoint(&path).unwrap();
        assert_eq!(hash, "cfg-hash-123");
        assert_eq!(loaded.mode(), s.mode());
        assert_eq!(loaded.current_task(), Some(1));
        assert_eq!(loaded.class_ids(), s.class_ids());
        for c in [0, 1, 2] {
            let a = s.prompt_set(c).unwrap();
            let b = loaded.prompt_set(c).unwrap();
            assert_eq!(bits(a.text_pos), bits(b.text_pos));
            assert_eq!(bits(a.text_neg), bits(b.text_neg));
            assert_eq!(bits(a.visual_pos), bits(b.visual_pos));
            assert_eq!(bits(a.visual_neg), bits(b.visual_neg));
            assert_eq!(a.class_token, b.class_token);
            assert_eq!(a.text_pos.is_frozen(), b.text_pos.is_frozen());
        }
        assert!(loaded.prompt_group(0).unwrap().is_frozen());
        assert!(!loaded.prompt_group(2).unwrap().is_frozen());
        let original = s.checkpoint_bytes("cfg-hash-123").unwrap();
        let re_saved = loaded.checkpoint_bytes("cfg-hash-123").unwrap();
        assert_eq!(original, re_saved);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupt_checkpoints_report_section_and_offset() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.begin_task(0).unwrap();
        s.create_class_prompts(0, 1, 0.02).unwrap();
        let good = s.checkpoint_bytes("h").unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        match PromptStore::from_checkpoint_bytes(&bad_magic) {
            Err(DdpError::Format { section, offset, .. }) => {
                assert_eq!(section, "magic");
                assert_eq!(offset, 0);
            }
            other => panic!("expected magic error, got {other:?}"),
        }

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        match PromptStore::from_checkpoint_bytes(&bad_version) {
            Err(DdpError::Format { section, offset, .. }) => {
                assert_eq!(section, "version");
                assert_eq!(offset, 8);
            }
            other => panic!("expected version error, got {other:?}"),
        }

        let truncated = &good[..good.len() - 5];
        match PromptStore::from_checkpoint_bytes(truncated) {
            Err(DdpError::Format { section, .. }) => {
                assert!(section == "group-data" || section == "class-tokens");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }

        let mut trailing = good.clone();
        trailing.extend_from_slice(&[0u8; 3]);
        match PromptStore::from_checkpoint_bytes(&trailing) {
            Err(DdpError::Format { section, .. }) => assert_eq!(section, "payload"),
            other => panic!("expected trailing-bytes error, got {other:?}"),
        }
    }

    #[test]
    fn tasks_must_arrive_in_increasing_order() {
        let mut s = store(PromptMode::ClassSpecific, BranchMode::Both);
        s.begin_task(1).unwrap();
        assert!(matches!(s.begin_task(1), Err(DdpError::Usage(_))));
        assert!(matches!(s.begin_task(0), Err(DdpError::Usage(_))));
        assert!(s.begin_task(2).is_ok());
    }
}

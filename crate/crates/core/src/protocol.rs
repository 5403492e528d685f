//! Incremental schedule construction, task-level partial labeling, the
//! per-task prompt-training loop, past-prompt freezing, and full-sequence
//! orchestration including ablation modes.
//!
//! Tasks run strictly in order. Training task `t` sees only the label
//! columns of that task's classes; evaluation after task `t` scores every
//! test image against all classes seen so far. Because the encoder is
//! frozen and past prompts are frozen after their task, old-class scores
//! are bit-identical at every later evaluation — non-forgetting is exact
//! rather than approximate.

use std::collections::BTreeMap;

use crate::datagen::Dataset;
use crate::encoder::{init_frozen_encoder, DualEncoder, DualEncoderConfig, PrefixCache};
use crate::error::{DdpError, Result};
use crate::graph::{NodeId, Tape};
use crate::metrics::{
    aggregate, average_precision, f1_scores, false_positive_rate, MetricsRecord, MetricsReport,
};
use crate::optim::{adam_step, AdamState};
use crate::prompting::{BranchMode, PromptMode, PromptStore};
use crate::rng::Rng;
use crate::scoring::{
    binary_confidence, class_text_features, image_class_scores, image_class_scores_uncached,
    pcd_tau, PcdSchedule, ScorePair,
};
use crate::tensor::Tensor;

/// Offset separating test-image cache ids from train-image cache ids.
const TEST_IMAGE_ID_BASE: u64 = 1 << 32;

/// Ordered disjoint class-id sets, one per task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    /// Number of tasks.
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Class ids introduced by task `t` (0-based), ascending.
    pub fn task_classes(&self, t: usize) -> &[usize] {
        &self.tasks[t]
    }

    /// Class ids seen through task `t` inclusive, ascending.
    pub fn cumulative(&self, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.tasks[..=t].concat();
        out.sort_unstable();
        out
    }

    /// All class ids in the schedule, ascending.
    pub fn all_classes(&self) -> Vec<usize> {
        self.cumulative(self.tasks.len() - 1)
    }
}

/// Splits `total_classes` (ids 0..total, numeric order) into a base task of
/// `base` classes (or `increment` when `base` is 0) followed by tasks of
/// `increment` classes each.
pub fn build_schedule(
    total_classes: usize,
    base: usize,
    increment: usize,
) -> Result<TaskSchedule> {
    if total_classes == 0 {
        return Err(DdpError::Schedule("schedule needs at least one class".into()));
    }
    if increment == 0 {
        return Err(DdpError::Schedule("class increment must be at least 1".into()));
    }
    if base > total_classes {
        return Err(DdpError::Schedule(format!(
            "base {base} exceeds {total_classes} total classes"
        )));
    }
    let first = if base == 0 { increment } else { base };
    if first > total_classes {
        return Err(DdpError::Schedule(format!(
            "first task of {first} classes exceeds {total_classes} total"
        )));
    }
    let rest = total_classes - first;
    if rest % increment != 0 {
        return Err(DdpError::Schedule(format!(
            "{rest} classes after the base task do not divide into chunks of {increment}"
        )));
    }
    let mut tasks = vec![(0..first).collect::<Vec<usize>>()];
    let mut next = first;
    while next < total_classes {
        tasks.push((next..next + increment).collect());
        next += increment;
    }
    Ok(TaskSchedule { tasks })
}

/// Hyper-parameters of one incremental run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Passes over the selected images per task.
    pub epochs: usize,
    /// Images per optimization step.
    pub batch_size: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Prompt length L_P (slots per prompt tensor).
    pub prompt_len: usize,
    /// How many final visual layers receive the prompt.
    pub attach_depth: usize,
    /// Inference-time confidence-temperature schedule; `None` keeps τ = 1.
    pub pcd: Option<PcdSchedule>,
    /// Prompt sharing policy.
    pub prompt_mode: PromptMode,
    /// Which of the positive/negative branches carry prompts.
    pub branch_mode: BranchMode,
    /// Freeze each task's prompts when the task completes. Disabling this
    /// with the global sharing policy yields the continually-overwritten
    /// fine-tuning lower bound.
    pub freeze_past: bool,
    /// Standard deviation of prompt initialization.
    pub init_std: f64,
    /// Base decision threshold on positive confidence (strict greater-than).
    pub threshold: f64,
    /// Offset of the high-confidence operating point above the base one.
    pub hiconf_delta: f64,
    /// Root seed for prompts, class tokens, and epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            prompt_len: 16,
            attach_depth: 3,
            pcd: None,
            prompt_mode: PromptMode::ClassSpecific,
            branch_mode: BranchMode::Both,
            freeze_past: true,
            init_std: 0.02,
            threshold: 0.5,
            hiconf_delta: 0.05,
            seed: 9271,
        }
    }
}

impl TrainConfig {
    /// Checks field ranges; the encoder config check happens at run start.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DdpError::Config("epochs and batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(DdpError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.prompt_len == 0 || self.attach_depth == 0 {
            return Err(DdpError::Config(
                "prompt length and attach depth must be positive".into(),
            ));
        }
        if !self.init_std.is_finite() || self.init_std <= 0.0 {
            return Err(DdpError::Config(format!(
                "init std {} must be positive",
                self.init_std
            )));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(DdpError::Config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !self.hiconf_delta.is_finite()
            || self.hiconf_delta < 0.0
            || self.threshold + self.hiconf_delta >= 1.0
        {
            return Err(DdpError::Config(format!(
                "high-confidence offset {} pushes the threshold out of (0, 1)",
                self.hiconf_delta
            )));
        }
        if let Some(pcd) = &self.pcd {
            pcd.validate()?;
        }
        Ok(())
    }

    /// The two reported operating points: ("base", threshold) and
    /// ("hiconf", threshold + delta).
    pub fn operating_points(&self) -> [(String, f64); 2] {
        [
            ("base".to_string(), self.threshold),
            ("hiconf".to_string(), self.threshold + self.hiconf_delta),
        ]
    }
}

/// Read-only image/label access used by training and evaluation; a trait so
/// tests can interpose access-logging doubles to audit partial labeling and
/// replay-freedom.
pub trait DataSource {
    /// Number of images.
    fn num_images(&self) -> usize;
    /// Feature grid dimensions (rows, cols, channels).
    fn grid_dims(&self) -> (usize, usize, usize);
    /// Class-id table; label columns align with it.
    fn class_ids(&self) -> Vec<usize>;
    /// Feature grid of one image.
    fn feature(&self, image: usize) -> Result<Tensor>;
    /// Ground-truth bit of one image for the class at `column`.
    fn label(&self, image: usize, column: usize) -> bool;
}

impl DataSource for Dataset {
    fn num_images(&self) -> usize {
        Dataset::num_images(self)
    }

    fn grid_dims(&self) -> (usize, usize, usize) {
        (self.grid_rows, self.grid_cols, self.grid_channels)
    }

    fn class_ids(&self) -> Vec<usize> {
        self.class_ids.clone()
    }

    fn feature(&self, image: usize) -> Result<Tensor> {
        Dataset::feature(self, image)
    }

    fn label(&self, image: usize, column: usize) -> bool {
        Dataset::label(self, image, column)
    }
}

/// Builds the desk-scale encoder architecture over an arbitrary feature
/// grid: patch side is the largest divisor of both grid sides capped at 4.
pub fn fit_encoder_config(
    prompt_len: usize,
    attach_depth: usize,
    rows: usize,
    cols: usize,
    channels: usize,
) -> Result<DualEncoderConfig> {
    let mut config = DualEncoderConfig::toy(prompt_len, attach_depth);
    config.grid_rows = rows;
    config.grid_cols = cols;
    config.grid_channels = channels;
    let mut patch = 0;
    for side in 1..=4usize {
        if rows % side == 0 && cols % side == 0 {
            patch = side;
        }
    }
    config.patch_grid = patch.max(1);
    config.visual.seq_len = config.patch_grid * config.patch_grid + 1;
    config.validate()?;
    Ok(config)
}

/// Mutable state of one incremental run.
#[derive(Clone)]
pub struct RunState {
    pub config: TrainConfig,
    pub schedule: TaskSchedule,
    pub encoder: DualEncoder,
    pub store: PromptStore,
    pub adam: AdamState,
    /// Tasks completed so far; the next train_task call must pass this.
    pub completed_tasks: usize,
    /// Per-task mean epoch losses (empty for tasks with nothing trainable).
    pub epoch_losses: Vec<Vec<f64>>,
    /// Metrics history: one record per (task, operating point).
    pub records: Vec<MetricsRecord>,
    train_caches: BTreeMap<usize, PrefixCache>,
    test_caches: BTreeMap<usize, PrefixCache>,
}

impl RunState {
    /// Fresh state over a validated config, schedule, and feature grid.
    pub fn new(
        config: TrainConfig,
        schedule: TaskSchedule,
        grid_dims: (usize, usize, usize),
    ) -> Result<RunState> {
        config.validate()?;
        let (rows, cols, channels) = grid_dims;
        let enc_config = fit_encoder_config(
            config.prompt_len,
            config.attach_depth,
            rows,
            cols,
            channels,
        )?;
        let encoder = init_frozen_encoder(&enc_config, config.seed)?;
        let store = PromptStore::new(
            config.prompt_mode,
            config.branch_mode,
            config.prompt_len,
            enc_config.visual.embed_dim,
        );
        let adam = AdamState::new(config.learning_rate);
        Ok(RunState {
            config,
            schedule,
            encoder,
            store,
            adam,
            completed_tasks: 0,
            epoch_losses: Vec::new(),
            records: Vec::new(),
            train_caches: BTreeMap::new(),
            test_caches: BTreeMap::new(),
        })
    }
}

/// Maps each schedule class id to its label column in the data source.
fn column_map(data: &dyn DataSource, class_ids: &[usize]) -> Result<Vec<usize>> {
    let table = data.class_ids();
    class_ids
        .iter()
        .map(|id| {
            table.iter().position(|c| c == id).ok_or_else(|| {
                DdpError::Schedule(format!("class {id} not present in the dataset"))
            })
        })
        .collect()
}

/// Trains the prompts of task `t`: registers the task's classes, runs
/// `epochs` shuffled passes over every training image carrying at least one
/// current-task positive, steps Adam on the current trainable prompts after
/// each batch, then freezes the task's prompts when `freeze_past` is set.
/// Returns the per-epoch mean losses.
pub fn train_task(
    state: &mut RunState,
    t: usize,
    train_data: &dyn DataSource,
) -> Result<Vec<f64>> {
    if t != state.completed_tasks {
        return Err(DdpError::Protocol(format!(
            "task {t} out of order; expected task {}",
            state.completed_tasks
        )));
    }
    if t >= state.schedule.num_tasks() {
        return Err(DdpError::Protocol(format!(
            "task {t} beyond the {}-task schedule",
            state.schedule.num_tasks()
        )));
    }
    let classes: Vec<usize> = state.schedule.task_classes(t).to_vec();
    let columns = column_map(train_data, &classes)?;
    state
        .store
        .register_task(t, &classes, state.config.seed, state.config.init_std)?;
    // Adam restarts per task: each task optimizes a fresh (or, under the
    // global policy, re-opened) set of prompts from step zero.
    state.adam = AdamState::new(state.config.learning_rate);

    // Partial labeling: an image joins the task's pool iff it carries at
    // least one positive among the current classes.
    let selected: Vec<usize> = (0..train_data.num_images())
        .filter(|&i| columns.iter().any(|&col| train_data.label(i, col)))
        .collect();

    let trainable_count = state.store.trainable_params().len();
    let mut epoch_losses = Vec::with_capacity(state.config.epochs);
    if trainable_count > 0 && !selected.is_empty() {
        for epoch in 0..state.config.epochs {
            let mut order = selected.clone();
            let stream_index = ((t as u64) << 32) | epoch as u64;
            Rng::stream(state.config.seed, "epoch-shuffle", stream_index).shuffle(&mut order);
            let mut weighted_loss = 0.0;
            for batch in order.chunks(state.config.batch_size) {
                let loss = train_batch(state, batch, &classes, &columns, train_data)?;
                weighted_loss += loss * batch.len() as f64;
            }
            epoch_losses.push(weighted_loss / selected.len() as f64);
        }
    }
    if state.config.freeze_past {
        state.store.freeze_task_prompts(t)?;
    }
    state.epoch_losses.push(epoch_losses.clone());
    state.completed_tasks = t + 1;
    Ok(epoch_losses)
}

/// Prompt nodes of one class on the training tape, positive and negative,
/// text and visual; `None` where the branch or policy is unprompted.
struct ClassNodes {
    text_pos: Option<NodeId>,
    text_neg: Option<NodeId>,
    visual_pos: Option<NodeId>,
    visual_neg: Option<NodeId>,
}

/// One optimization step over `batch`: a single tape carries the text
/// features of every current class plus two prompted visual tails per
/// (image, class), the mean-per-image binary cross-entropy is backpropagated,
/// and Adam updates the trainable prompts.
fn train_batch(
    state: &mut RunState,
    batch: &[usize],
    classes: &[usize],
    columns: &[usize],
    train_data: &dyn DataSource,
) -> Result<f64> {
    for &image in batch {
        if !state.train_caches.contains_key(&image) {
            let tokens = state.encoder.embed_image(&train_data.feature(image)?)?;
            let cache = state.encoder.visual_prefix(image as u64, &tokens)?;
            state.train_caches.insert(image, cache);
        }
    }
    let store = &state.store;
    let encoder = &state.encoder;
    let branch = store.branch();
    let current = store.current_task();

    let mut tape = Tape::new();
    let mut leaf_nodes: Vec<(String, NodeId)> = Vec::new();
    // One node bundle per prompt group, shared across classes under the
    // task/global policies; trainable prompts enter as leaves, frozen or
    // foreign ones as constants.
    let mut group_nodes: BTreeMap<String, ClassNodes> = BTreeMap::new();
    let mut class_nodes: Vec<ClassNodes> = Vec::new();
    for &class in classes {
        let nodes = match store.prompt_group(class) {
            None => ClassNodes {
                text_pos: None,
                text_neg: None,
                visual_pos: None,
                visual_neg: None,
            },
            Some(group) => {
                let key = group.text_pos.identifier().to_string();
                if let Some(existing) = group_nodes.get(&key) {
                    ClassNodes { ..*existing }
                } else {
                    let trainable = !group.text_pos.is_frozen()
                        && (store.mode() == PromptMode::Global
                            || Some(group.origin_task) == current);
                    let put = |param: &crate::param::Parameter,
                                   prompted: bool,
                                   tape: &mut Tape,
                                   leaf_nodes: &mut Vec<(String, NodeId)>|
                     -> Option<NodeId> {
                        if !prompted {
                            return None;
                        }
                        let node = if trainable {
                            let n = tape.leaf(param);
                            leaf_nodes.push((param.identifier().to_string(), n));
                            n
                        } else {
                            tape.constant(param.value().clone())
                        };
                        Some(node)
                    };
                    let nodes = ClassNodes {
                        text_pos: put(
                            &group.text_pos,
                            branch.positive_prompted(),
                            &mut tape,
                            &mut leaf_nodes,
                        ),
                        text_neg: put(
                            &group.text_neg,
                            branch.negative_prompted(),
                            &mut tape,
                            &mut leaf_nodes,
                        ),
                        visual_pos: put(
                            &group.visual_pos,
                            branch.positive_prompted(),
                            &mut tape,
                            &mut leaf_nodes,
                        ),
                        visual_neg: put(
                            &group.visual_neg,
                            branch.negative_prompted(),
                            &mut tape,
                            &mut leaf_nodes,
                        ),
                    };
                    group_nodes.insert(key, ClassNodes { ..nodes });
                    nodes
                }
            }
        };
        class_nodes.push(nodes);
    }

    let visual_tower = encoder.visual.on_tape(&mut tape);
    let text_tower = encoder.text.on_tape(&mut tape);
    let mut text_features = Vec::with_capacity(classes.len());
    for (&class, nodes) in classes.iter().zip(&class_nodes) {
        let token = tape.constant(store.class_token_row(class)?);
        let pos = text_tower.text_sequence(&mut tape, nodes.text_pos, token)?;
        let neg = if nodes.text_neg == nodes.text_pos {
            pos
        } else {
            text_tower.text_sequence(&mut tape, nodes.text_neg, token)?
        };
        text_features.push((pos, neg));
    }

    let mut terms = Vec::with_capacity(batch.len() * classes.len());
    for &image in batch {
        let cache = &state.train_caches[&image];
        let hidden = tape.constant(cache.hidden.clone());
        for (ci, nodes) in class_nodes.iter().enumerate() {
            let visual_pos = visual_tower.prompted_tail(&mut tape, hidden, nodes.visual_pos)?;
            let visual_neg = if nodes.visual_neg == nodes.visual_pos {
                visual_pos
            } else {
                visual_tower.prompted_tail(&mut tape, hidden, nodes.visual_neg)?
            };
            let s_pos = tape.cosine(text_features[ci].0, visual_pos)?;
            let s_neg = tape.cosine(text_features[ci].1, visual_neg)?;
            let z = tape.sub(s_pos, s_neg)?;
            let y = if train_data.label(image, columns[ci]) {
                1.0
            } else {
                0.0
            };
            terms.push(tape.bce_with_logit(z, y)?);
        }
    }
    let total = tape.add_n(&terms)?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(loss).item()?;
    tape.backward(loss)?;

    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (identifier, node) in &leaf_nodes {
        grads.insert(identifier.clone(), tape.leaf_grad(*node)?);
    }
    drop(tape);
    let mut params = state.store.trainable_params();
    for p in params.iter_mut() {
        if let Some(g) = grads.get(p.identifier()) {
            p.accumulate_gradient(g)?;
        }
    }
    adam_step(&mut state.adam, &mut params)?;
    Ok(loss_value)
}

/// Scores, confidences, and metrics of one post-task evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// Task just completed (0-based).
    pub task: usize,
    /// Temperature used in the binary softmax.
    pub tau: f64,
    /// Classes evaluated (cumulative through the task), ascending.
    pub class_ids: Vec<usize>,
    /// Raw cosine score pairs, image-major, aligned with `class_ids`.
    pub score_pairs: Vec<Vec<ScorePair>>,
    /// Per-class average precision keyed by class id (defined classes only).
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Classes excluded from mAP for lacking test positives.
    pub excluded_classes: Vec<usize>,
    /// One record per operating point ("base", then "hiconf").
    pub records: Vec<MetricsRecord>,
}

/// Evaluates the completed task `t` over every class seen so far, reusing
/// per-image prefix caches across tasks and classes.
pub fn evaluate(state: &mut RunState, t: usize, test_data: &dyn DataSource) -> Result<EvalOutcome> {
    if t + 1 != state.completed_tasks {
        return Err(DdpError::Protocol(format!(
            "evaluate(task {t}) requires exactly tasks 0..={t} complete, have {}",
            state.completed_tasks
        )));
    }
    for image in 0..test_data.num_images() {
        if !state.test_caches.contains_key(&image) {
            let tokens = state.encoder.embed_image(&test_data.feature(image)?)?;
            let cache = state
                .encoder
                .visual_prefix(TEST_IMAGE_ID_BASE + image as u64, &tokens)?;
            state.test_caches.insert(image, cache);
        }
    }
    let caches = &state.test_caches;
    score_and_measure(
        &state.config,
        &state.schedule,
        &state.encoder,
        &state.store,
        t,
        test_data,
        |encoder, store, image, text| {
            image_class_scores(encoder, &caches[&image], store, text)
        },
    )
}

/// Evaluates task `t` with no prefix reuse: every (image, class, branch)
/// pass runs the full visual tower. Bit-compatible with [`evaluate`] up to
/// floating-point associativity (verified to 1e-10 in tests).
pub fn evaluate_uncached(
    state: &RunState,
    t: usize,
    test_data: &dyn DataSource,
) -> Result<EvalOutcome> {
    if t + 1 != state.completed_tasks {
        return Err(DdpError::Protocol(format!(
            "evaluate(task {t}) requires exactly tasks 0..={t} complete, have {}",
            state.completed_tasks
        )));
    }
    let mut tokens = Vec::with_capacity(test_data.num_images());
    for image in 0..test_data.num_images() {
        tokens.push(state.encoder.embed_image(&test_data.feature(image)?)?);
    }
    score_and_measure(
        &state.config,
        &state.schedule,
        &state.encoder,
        &state.store,
        t,
        test_data,
        |encoder, store, image, text| {
            image_class_scores_uncached(encoder, &tokens[image], store, text)
        },
    )
}

/// Shared evaluation core: scores every (image, seen-class) pair with the
/// supplied scorer, converts to confidences at the task's temperature, and
/// assembles per-operating-point metric records.
fn score_and_measure<F>(
    config: &TrainConfig,
    schedule: &TaskSchedule,
    encoder: &DualEncoder,
    store: &PromptStore,
    t: usize,
    test_data: &dyn DataSource,
    mut score: F,
) -> Result<EvalOutcome>
where
    F: FnMut(&DualEncoder, &PromptStore, usize, &crate::scoring::ClassTextFeatures) -> Result<ScorePair>,
{
    let class_ids = schedule.cumulative(t);
    let columns = column_map(test_data, &class_ids)?;
    let tau = match &config.pcd {
        Some(pcd) => pcd_tau(pcd, class_ids.len())?,
        None => 1.0,
    };
    let num_images = test_data.num_images();

    let mut text_features = Vec::with_capacity(class_ids.len());
    for &class in &class_ids {
        text_features.push(class_text_features(encoder, store, class)?);
    }

    let mut score_pairs = Vec::with_capacity(num_images);
    let mut confidences = vec![vec![0.0f64; class_ids.len()]; num_images];
    let mut labels = vec![vec![false; class_ids.len()]; num_images];
    for image in 0..num_images {
        let mut row = Vec::with_capacity(class_ids.len());
        for (ci, text) in text_features.iter().enumerate() {
            let pair = score(encoder, store, image, text)?;
            confidences[image][ci] = binary_confidence(&pair, tau)?;
            labels[image][ci] = test_data.label(image, columns[ci]);
            row.push(pair);
        }
        score_pairs.push(row);
    }

    let mut per_class_ap = BTreeMap::new();
    let mut excluded_classes = Vec::new();
    for (ci, &class) in class_ids.iter().enumerate() {
        let scores: Vec<f64> = (0..num_images).map(|i| confidences[i][ci]).collect();
        let truth: Vec<bool> = (0..num_images).map(|i| labels[i][ci]).collect();
        match average_precision(&scores, &truth) {
            Ok(ap) => {
                per_class_ap.insert(class, ap);
            }
            Err(DdpError::UndefinedAveragePrecision(_)) => excluded_classes.push(class),
            Err(e) => return Err(e),
        }
    }
    if per_class_ap.is_empty() {
        return Err(DdpError::Degenerate(
            "no evaluated class has a test positive".into(),
        ));
    }
    let map = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;

    let mut records = Vec::with_capacity(2);
    for (name, threshold) in config.operating_points() {
        let decisions: Vec<Vec<bool>> = confidences
            .iter()
            .map(|row| row.iter().map(|&c| c > threshold).collect())
            .collect();
        let (cf1, of1) = f1_scores(&decisions, &labels)?;
        let fpr = false_positive_rate(&decisions, &labels)?;
        records.push(MetricsRecord {
            task: t,
            classes_evaluated: class_ids.len(),
            operating_point: name,
            map,
            cf1,
            of1,
            fpr,
            excluded_classes: excluded_classes.clone(),
        });
    }
    Ok(EvalOutcome {
        task: t,
        tau,
        class_ids,
        score_pairs,
        per_class_ap,
        excluded_classes,
        records,
    })
}

/// A finished run: the aggregated report, final state, and every per-task
/// evaluation outcome.
pub struct RunOutput {
    pub report: MetricsReport,
    pub state: RunState,
    pub evals: Vec<EvalOutcome>,
}

/// Runs the full incremental sequence: for each task, train then evaluate
/// over all classes seen so far; aggregates Last and Avg views under the
/// given manifest hash.
pub fn run_sequence(
    config: &TrainConfig,
    schedule: &TaskSchedule,
    train_data: &dyn DataSource,
    test_data: &dyn DataSource,
    manifest_hash: &str,
) -> Result<RunOutput> {
    let mut scheduled = schedule.all_classes();
    scheduled.dedup();
    let mut dataset_classes = train_data.class_ids();
    dataset_classes.sort_unstable();
    if scheduled != dataset_classes {
        return Err(DdpError::Schedule(format!(
            "schedule covers {} classes but the dataset labels {}",
            scheduled.len(),
            dataset_classes.len()
        )));
    }
    let mut state = RunState::new(config.clone(), schedule.clone(), train_data.grid_dims())?;
    let mut evals = Vec::with_capacity(schedule.num_tasks());
    for t in 0..schedule.num_tasks() {
        train_task(&mut state, t, train_data)?;
        let outcome = evaluate(&mut state, t, test_data)?;
        state.records.extend(outcome.records.clone());
        evals.push(outcome);
    }
    let report = aggregate(&state.records, manifest_hash)?;
    Ok(RunOutput {
        report,
        state,
        evals,
    })
}

/// Trains all classes simultaneously with full labels — a single-task
/// schedule over the whole label space — as the upper-bound reference.
pub fn joint_upper_bound(
    config: &TrainConfig,
    train_data: &dyn DataSource,
    test_data: &dyn DataSource,
    manifest_hash: &str,
) -> Result<RunOutput> {
    let mut classes = train_data.class_ids();
    classes.sort_unstable();
    let schedule = TaskSchedule {
        tasks: vec![classes],
    };
    run_sequence(config, &schedule, train_data, test_data, manifest_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, SyntheticSpec};
    use std::cell::RefCell;
    use std::collections::BTreeSet;

    fn tiny_spec(num_classes: usize, seed: u64) -> SyntheticSpec {
        let n = num_classes;
        let mut m = vec![0.0; n * n];
        for c in 0..n {
            m[c * n + c] = 0.05;
        }
        SyntheticSpec {
            num_classes: n,
            grid_rows: 8,
            grid_cols: 8,
            grid_channels: 4,
            prototype_strength: 1.0,
            noise_std: 0.1,
            cooccurrence: m,
            train_per_class: 4,
            test_per_class: 2,
            seed,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            prompt_len: 2,
            attach_depth: 1,
            seed: 77,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_base40_step10_over_80() {
        let s = build_schedule(80, 40, 10).unwrap();
        let sizes: Vec<usize> = (0..s.num_tasks()).map(|t| s.task_classes(t).len()).collect();
        assert_eq!(sizes, vec![40, 10, 10, 10, 10]);
        assert_eq!(s.cumulative(1).len(), 50);
    }

    #[test]
    fn schedule_base0_uses_increment_for_first_task() {
        let s = build_schedule(80, 0, 10).unwrap();
        let sizes: Vec<usize> = (0..s.num_tasks()).map(|t| s.task_classes(t).len()).collect();
        assert_eq!(sizes, vec![10; 8]);
    }

    #[test]
    fn schedule_base4_step2_over_20_has_nine_tasks() {
        let s = build_schedule(20, 4, 2).unwrap();
        assert_eq!(s.num_tasks(), 9);
        assert_eq!(s.task_classes(0), &[0, 1, 2, 3]);
        assert_eq!(s.task_classes(8), &[18, 19]);
        assert_eq!(s.all_classes(), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_tasks_are_disjoint_and_cover_the_space() {
        let s = build_schedule(20, 5, 3).unwrap();
        let mut seen = BTreeSet::new();
        for t in 0..s.num_tasks() {
            for &c in s.task_classes(t) {
                assert!(seen.insert(c), "class {c} appears twice");
            }
        }
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn indivisible_remainder_is_a_schedule_error() {
        assert!(matches!(build_schedule(10, 4, 4), Err(DdpError::Schedule(_))));
        assert!(matches!(build_schedule(10, 0, 3), Err(DdpError::Schedule(_))));
        assert!(matches!(build_schedule(10, 12, 1), Err(DdpError::Schedule(_))));
        assert!(matches!(build_schedule(10, 4, 0), Err(DdpError::Schedule(_))));
    }

    #[test]
    fn encoder_config_fits_common_grids() {
        let c = fit_encoder_config(16, 3, 8, 8, 4).unwrap();
        assert_eq!((c.patch_grid, c.visual.seq_len), (4, 17));
        let c = fit_encoder_config(2, 1, 3, 3, 2).unwrap();
        assert_eq!((c.patch_grid, c.visual.seq_len), (3, 10));
        let c = fit_encoder_config(2, 1, 2, 2, 1).unwrap();
        assert_eq!((c.patch_grid, c.visual.seq_len), (2, 5));
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn out_of_order_task_is_a_protocol_error() {
        let (train, _) = generate(&tiny_spec(4, 3)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let mut state = RunState::new(tiny_config(), schedule, (8, 8, 4)).unwrap();
        assert!(matches!(
            train_task(&mut state, 1, &train),
            Err(DdpError::Protocol(_))
        ));
    }

    #[test]
    fn sequence_produces_contiguous_records_and_equal_single_task_views() {
        let (train, test) = generate(&tiny_spec(4, 5)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let out = run_sequence(&tiny_config(), &schedule, &train, &test, "hash-a").unwrap();
        assert_eq!(out.evals.len(), 3);
        assert_eq!(out.state.records.len(), 6);
        assert_eq!(out.report.records.len(), 6);
        let last_base = out.report.last.get("base").unwrap();
        let final_record = out
            .report
            .records
            .iter()
            .find(|r| r.task == 2 && r.operating_point == "base")
            .unwrap();
        assert_eq!(last_base.map, final_record.map);

        // A single-task schedule reports Last == Avg.
        let single = build_schedule(4, 4, 1).unwrap();
        let one = run_sequence(&tiny_config(), &single, &train, &test, "hash-b").unwrap();
        assert_eq!(one.report.last, one.report.avg);
    }

    #[test]
    fn joint_upper_bound_equals_single_task_sequence() {
        let (train, test) = generate(&tiny_spec(4, 7)).unwrap();
        let joint = joint_upper_bound(&tiny_config(), &train, &test, "h").unwrap();
        let single = build_schedule(4, 4, 1).unwrap();
        let seq = run_sequence(&tiny_config(), &single, &train, &test, "h").unwrap();
        assert_eq!(joint.report.to_json().unwrap(), seq.report.to_json().unwrap());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (train, test) = generate(&tiny_spec(4, 9)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let a = run_sequence(&tiny_config(), &schedule, &train, &test, "h").unwrap();
        let b = run_sequence(&tiny_config(), &schedule, &train, &test, "h").unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
        assert_eq!(a.evals, b.evals);
        assert_eq!(
            a.state.store.checkpoint_bytes("h").unwrap(),
            b.state.store.checkpoint_bytes("h").unwrap()
        );
    }

    #[test]
    fn old_class_scores_are_bit_identical_across_later_tasks() {
        let (train, test) = generate(&tiny_spec(4, 11)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let out = run_sequence(&tiny_config(), &schedule, &train, &test, "h").unwrap();
        let first = &out.evals[0];
        for later in &out.evals[1..] {
            for (ci, &class) in first.class_ids.iter().enumerate() {
                let cj = later.class_ids.iter().position(|&c| c == class).unwrap();
                for image in 0..test.num_images() {
                    let a = first.score_pairs[image][ci];
                    let b = later.score_pairs[image][cj];
                    assert_eq!(a.s_pos.to_bits(), b.s_pos.to_bits());
                    assert_eq!(a.s_neg.to_bits(), b.s_neg.to_bits());
                }
                let ap_first = first.per_class_ap.get(&class);
                let ap_later = later.per_class_ap.get(&class);
                match (ap_first, ap_later) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                    (None, None) => {}
                    _ => panic!("class {class} AP defined at one task only"),
                }
            }
        }
    }

    #[test]
    fn training_losses_are_recorded_per_epoch() {
        let (train, test) = generate(&tiny_spec(4, 13)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let mut config = tiny_config();
        config.epochs = 3;
        let out = run_sequence(&config, &schedule, &train, &test, "h").unwrap();
        assert_eq!(out.state.epoch_losses.len(), 3);
        for losses in &out.state.epoch_losses {
            assert_eq!(losses.len(), 3);
            for &l in losses {
                assert!(l.is_finite() && l >= 0.0);
            }
        }
    }

    #[test]
    fn prompt_free_mode_yields_half_confidence_everywhere() {
        let (train, test) = generate(&tiny_spec(3, 15)).unwrap();
        let schedule = build_schedule(3, 1, 1).unwrap();
        let mut config = tiny_config();
        config.prompt_mode = PromptMode::None;
        let out = run_sequence(&config, &schedule, &train, &test, "h").unwrap();
        for eval in &out.evals {
            for row in &eval.score_pairs {
                for pair in row {
                    assert_eq!(pair.s_pos.to_bits(), pair.s_neg.to_bits());
                    assert_eq!(binary_confidence(pair, eval.tau).unwrap(), 0.5);
                }
            }
        }
        // Nothing was trainable, so no losses were recorded.
        for losses in &out.state.epoch_losses {
            assert!(losses.is_empty());
        }
    }

    #[test]
    fn pcd_changes_tau_but_not_map() {
        let (train, test) = generate(&tiny_spec(4, 17)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let off = tiny_config();
        let mut on = tiny_config();
        on.pcd = Some(PcdSchedule::new(5.0, 0.5, 2, 4).unwrap());
        let a = run_sequence(&off, &schedule, &train, &test, "h").unwrap();
        let b = run_sequence(&on, &schedule, &train, &test, "h").unwrap();
        assert_eq!(b.evals[0].tau, 1.0);
        assert!(b.evals[2].tau > 1.0);
        for (ea, eb) in a.evals.iter().zip(&b.evals) {
            for (ra, rb) in ea.records.iter().zip(&eb.records) {
                assert!((ra.map - rb.map).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cached_and_uncached_evaluation_agree() {
        let (train, test) = generate(&tiny_spec(3, 19)).unwrap();
        let schedule = build_schedule(3, 1, 1).unwrap();
        let config = tiny_config();
        let mut state = RunState::new(config.clone(), schedule.clone(), (8, 8, 4)).unwrap();
        for t in 0..schedule.num_tasks() {
            train_task(&mut state, t, &train).unwrap();
            let cached = evaluate(&mut state, t, &test).unwrap();
            let naive = evaluate_uncached(&state, t, &test).unwrap();
            for (ra, rb) in cached.score_pairs.iter().zip(&naive.score_pairs) {
                for (a, b) in ra.iter().zip(rb) {
                    assert!((a.s_pos - b.s_pos).abs() <= 1e-10);
                    assert!((a.s_neg - b.s_neg).abs() <= 1e-10);
                }
            }
        }
    }

    /// Access-logging wrapper asserting partial labeling and replay-freedom.
    struct AuditSource<'a> {
        inner: &'a Dataset,
        label_columns: RefCell<BTreeSet<usize>>,
        feature_images: RefCell<BTreeSet<usize>>,
    }

    impl<'a> AuditSource<'a> {
        fn new(inner: &'a Dataset) -> Self {
            AuditSource {
                inner,
                label_columns: RefCell::new(BTreeSet::new()),
                feature_images: RefCell::new(BTreeSet::new()),
            }
        }

        fn reset(&self) {
            self.label_columns.borrow_mut().clear();
            self.feature_images.borrow_mut().clear();
        }
    }

    impl DataSource for AuditSource<'_> {
        fn num_images(&self) -> usize {
            self.inner.num_images()
        }

        fn grid_dims(&self) -> (usize, usize, usize) {
            DataSource::grid_dims(self.inner)
        }

        fn class_ids(&self) -> Vec<usize> {
            DataSource::class_ids(self.inner)
        }

        fn feature(&self, image: usize) -> Result<Tensor> {
            self.feature_images.borrow_mut().insert(image);
            self.inner.feature(image)
        }

        fn label(&self, image: usize, column: usize) -> bool {
            self.label_columns.borrow_mut().insert(column);
            self.inner.label(image, column)
        }
    }

    #[test]
    fn training_reads_only_current_task_labels_and_images() {
        let (train, _) = generate(&tiny_spec(4, 21)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let audit = AuditSource::new(&train);
        let mut state = RunState::new(tiny_config(), schedule.clone(), (8, 8, 4)).unwrap();
        for t in 0..schedule.num_tasks() {
            audit.reset();
            train_task(&mut state, t, &audit).unwrap();
            let current: BTreeSet<usize> = schedule.task_classes(t).iter().copied().collect();
            let read = audit.label_columns.borrow();
            assert!(
                read.is_subset(&current),
                "task {t} read label columns {read:?} beyond {current:?}"
            );
            // Replay-freedom: every image whose features were read carries a
            // current-task positive (prefix caching means an image is read at
            // most once over the whole run, never re-read for an old task).
            for &image in audit.feature_images.borrow().iter() {
                assert!(
                    current.iter().any(|&c| train.labels[image][c]),
                    "task {t} read image {image} with no current-task positive"
                );
            }
        }
    }

    #[test]
    fn training_later_tasks_leaves_heldout_first_task_scores_unchanged() {
        let (train, test) = generate(&tiny_spec(4, 23)).unwrap();
        let schedule = build_schedule(4, 2, 1).unwrap();
        let mut state = RunState::new(tiny_config(), schedule, (8, 8, 4)).unwrap();
        train_task(&mut state, 0, &train).unwrap();
        let before = evaluate(&mut state, 0, &test).unwrap();
        train_task(&mut state, 1, &train).unwrap();
        // Rescore task-0 classes on the same held-out image set.
        let text0 = class_text_features(&state.encoder, &state.store, 0).unwrap();
        let cache = &state.test_caches[&0];
        let pair = image_class_scores(&state.encoder, cache, &state.store, &text0).unwrap();
        assert_eq!(
            pair.s_pos.to_bits(),
            before.score_pairs[0][0].s_pos.to_bits()
        );
        assert_eq!(
            pair.s_neg.to_bits(),
            before.score_pairs[0][0].s_neg.to_bits()
        );
    }

    #[test]
    fn schedule_dataset_mismatch_is_a_schedule_error() {
        let (train, test) = generate(&tiny_spec(4, 25)).unwrap();
        let schedule = build_schedule(6, 2, 2).unwrap();
        assert!(matches!(
            run_sequence(&tiny_config(), &schedule, &train, &test, "h"),
            Err(DdpError::Schedule(_))
        ));
    }
}

//! Frozen miniature transformer encoders with prompt attachment.
//!
//! Two encoders share one architecture (pre-LN blocks, multi-head attention,
//! GELU feed-forward): a visual encoder over patch tokens plus a learnable-
//! free summary token, and a text encoder over a per-class token. Prompts
//! enter the two sides differently:
//!
//! - **Visual prompts** are attached to the multi-head self-attention of the
//!   last `attach_depth` layers: the raw prompt rows are concatenated to the
//!   projected keys and values, attention runs over the widened sequence,
//!   and the output is sliced back to the backbone length. One shared prompt
//!   tensor is attached to every one of those layers (interlayer sharing),
//!   so its gradient accumulates across layers.
//! - **Text prompts** are prepended input tokens: the sequence
//!   `[prompt; class_token]` runs through the full, unmodified encoder.
//!
//! Because prompts only touch the last `attach_depth` visual layers, the
//! layers below are prompt-independent; their output per image is computed
//! once and stored in a [`PrefixCache`], which every per-class prompted pass
//! then reuses. All weights are frozen [`Parameter`]s — training never
//! changes the backbone, which is what makes past-task scores exactly
//! reproducible.
//!
//! Every forward runs through the autodiff tape (constants cost no backward
//! work), so the training, evaluation, cached, and uncached paths execute
//! literally the same arithmetic.

use crate::error::{DdpError, Result};
use crate::graph::{attention_forward, gelu_value, layer_norm_forward, NodeId, Tape};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Architecture of one encoder tower.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// Token count of the un-prompted input sequence (visual: patches plus
    /// the summary token; text: prompt slots plus the class token).
    pub seq_len: usize,
    /// Prompt length L_P.
    pub prompt_len: usize,
    /// How many final layers receive the visual prompt. The text tower sets
    /// this to `num_layers` (input-token prompts influence every layer).
    pub attach_depth: usize,
    pub ff_width: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.embed_dim == 0 {
            return Err(DdpError::Config("encoder dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(DdpError::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.attach_depth == 0 || self.attach_depth > self.num_layers {
            return Err(DdpError::Config(format!(
                "attach_depth {} outside 1..={}",
                self.attach_depth, self.num_layers
            )));
        }
        if self.prompt_len == 0 {
            return Err(DdpError::Config("prompt_len must be at least 1".into()));
        }
        if self.seq_len == 0 || self.ff_width == 0 {
            return Err(DdpError::Config("seq_len and ff_width must be positive".into()));
        }
        Ok(())
    }
}

/// Architecture of the dual tower plus the patch stem.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DualEncoderConfig {
    pub visual: EncoderConfig,
    pub text: EncoderConfig,
    /// Input feature grid (rows × cols × channels).
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub grid_channels: usize,
    /// Patches per side; the grid is cut into `patch_grid²` patches.
    pub patch_grid: usize,
}

impl DualEncoderConfig {
    /// Desk-scale default: d = 64, 4 heads, a 6-layer visual tower over a
    /// 4×4 patch grid (17 tokens with the summary token), a 4-layer text
    /// tower, 16 prompt slots, and prompts attached to the last 3 visual
    /// layers.
    pub fn toy(prompt_len: usize, attach_depth: usize) -> Self {
        DualEncoderConfig {
            visual: EncoderConfig {
                num_layers: 6,
                num_heads: 4,
                embed_dim: 64,
                seq_len: 17,
                prompt_len,
                attach_depth,
                ff_width: 128,
            },
            text: EncoderConfig {
                num_layers: 4,
                num_heads: 4,
                embed_dim: 64,
                seq_len: prompt_len + 1,
                prompt_len,
                attach_depth: 4,
                ff_width: 128,
            },
            grid_rows: 8,
            grid_cols: 8,
            grid_channels: 4,
            patch_grid: 4,
        }
    }

    /// Width of one flattened patch.
    pub fn patch_dim(&self) -> usize {
        (self.grid_rows / self.patch_grid)
            * (self.grid_cols / self.patch_grid)
            * self.grid_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.text.validate()?;
        if self.patch_grid == 0
            || self.grid_rows % self.patch_grid != 0
            || self.grid_cols % self.patch_grid != 0
        {
            return Err(DdpError::Config(format!(
                "grid {}x{} not divisible into a {}x{} patch grid",
                self.grid_rows, self.grid_cols, self.patch_grid, self.patch_grid
            )));
        }
        let want = self.patch_grid * self.patch_grid + 1;
        if self.visual.seq_len != want {
            return Err(DdpError::Config(format!(
                "visual seq_len {} but patch grid implies {}",
                self.visual.seq_len, want
            )));
        }
        if self.text.seq_len != self.text.prompt_len + 1 {
            return Err(DdpError::Config(format!(
                "text seq_len {} but prompt_len implies {}",
                self.text.seq_len,
                self.text.prompt_len + 1
            )));
        }
        if self.visual.embed_dim != self.text.embed_dim {
            return Err(DdpError::Config("tower widths differ".into()));
        }
        Ok(())
    }
}

/// One transformer block's frozen weights.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_q: Parameter,
    pub b_q: Parameter,
    pub w_k: Parameter,
    pub b_k: Parameter,
    pub w_v: Parameter,
    pub b_v: Parameter,
    pub w_o: Parameter,
    pub b_o: Parameter,
    pub ln1_scale: Parameter,
    pub ln1_shift: Parameter,
    pub ln2_scale: Parameter,
    pub ln2_shift: Parameter,
    pub w_ff1: Parameter,
    pub b_ff1: Parameter,
    pub w_ff2: Parameter,
    pub b_ff2: Parameter,
}

/// One frozen encoder tower.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub layers: Vec<LayerWeights>,
    pub pos_embed: Parameter,
    pub final_scale: Parameter,
    pub final_shift: Parameter,
}

/// Frozen patch projection and summary token for the visual tower.
#[derive(Debug, Clone)]
pub struct VisualStem {
    pub patch_proj: Parameter,
    pub patch_bias: Parameter,
    pub summary_token: Parameter,
}

/// The frozen dual encoder.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    pub stem: VisualStem,
    pub visual: EncoderWeights,
    pub text: EncoderWeights,
}

/// Hidden states of one image after the un-prompted visual layers; reused by
/// every per-class prompted pass for that image.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    pub image_id: u64,
    pub hidden: Tensor,
}

const LN_EPS: f64 = 1e-5;

fn gaussian_param(id: String, shape: Vec<usize>, std: f64, seed: u64) -> Parameter {
    let mut rng = Rng::stream(seed, &id, 0);
    let n = shape.iter().product();
    let t = Tensor::new(shape, rng.gaussian_vec(n, std)).expect("finite init");
    Parameter::frozen(id, t)
}

fn const_param(id: String, shape: Vec<usize>, value: f64) -> Parameter {
    let n: usize = shape.iter().product();
    Parameter::frozen(id, Tensor::new(shape, vec![value; n]).expect("finite init"))
}

fn init_tower(tower: &str, cfg: &EncoderConfig, seed: u64) -> EncoderWeights {
    let d = cfg.embed_dim;
    let proj_std = 1.0 / (d as f64).sqrt();
    let ff2_std = 1.0 / (cfg.ff_width as f64).sqrt();
    let layers = (0..cfg.num_layers)
        .map(|i| {
            let n = |slot: &str| format!("{tower}.layer{i}.{slot}");
            LayerWeights {
                w_q: gaussian_param(n("w_q"), vec![d, d], proj_std, seed),
                b_q: const_param(n("b_q"), vec![d], 0.0),
                w_k: gaussian_param(n("w_k"), vec![d, d], proj_std, seed),
                b_k: const_param(n("b_k"), vec![d], 0.0),
                w_v: gaussian_param(n("w_v"), vec![d, d], proj_std, seed),
                b_v: const_param(n("b_v"), vec![d], 0.0),
                w_o: gaussian_param(n("w_o"), vec![d, d], proj_std, seed),
                b_o: const_param(n("b_o"), vec![d], 0.0),
                ln1_scale: const_param(n("ln1_scale"), vec![d], 1.0),
                ln1_shift: const_param(n("ln1_shift"), vec![d], 0.0),
                ln2_scale: const_param(n("ln2_scale"), vec![d], 1.0),
                ln2_shift: const_param(n("ln2_shift"), vec![d], 0.0),
                w_ff1: gaussian_param(n("w_ff1"), vec![d, cfg.ff_width], proj_std, seed),
                b_ff1: const_param(n("b_ff1"), vec![cfg.ff_width], 0.0),
                w_ff2: gaussian_param(n("w_ff2"), vec![cfg.ff_width, d], ff2_std, seed),
                b_ff2: const_param(n("b_ff2"), vec![d], 0.0),
            }
        })
        .collect();
    EncoderWeights {
        config: cfg.clone(),
        layers,
        pos_embed: gaussian_param(
            format!("{tower}.pos_embed"),
            vec![cfg.seq_len, d],
            0.1,
            seed,
        ),
        final_scale: const_param(format!("{tower}.final_scale"), vec![d], 1.0),
        final_shift: const_param(format!("{tower}.final_shift"), vec![d], 0.0),
    }
}

/// Deterministic frozen initialization of the dual encoder.
///
/// Projection matrices draw from N(0, 1/fan_in), positional embeddings and
/// the summary token from N(0, 0.1²); biases start at zero and layer-norm
/// affines at identity. Every weight is a frozen [`Parameter`] whose stream
/// is keyed by (seed, weight name), so equal seeds give bitwise-equal towers.
pub fn init_frozen_encoder(config: &DualEncoderConfig, seed: u64) -> Result<DualEncoder> {
    config.validate()?;
    let d = config.visual.embed_dim;
    let patch_dim = config.patch_dim();
    let stem = VisualStem {
        patch_proj: gaussian_param(
            "stem.patch_proj".into(),
            vec![patch_dim, d],
            1.0 / (patch_dim as f64).sqrt(),
            seed,
        ),
        patch_bias: const_param("stem.patch_bias".into(), vec![d], 0.0),
        summary_token: gaussian_param("stem.summary_token".into(), vec![1, d], 0.1, seed),
    };
    Ok(DualEncoder {
        config: config.clone(),
        stem,
        visual: init_tower("visual", &config.visual, seed),
        text: init_tower("text", &config.text, seed),
    })
}

/// Constant node ids of one tower's weights on a tape. Register once per
/// tape and share across every pass recorded on it.
pub struct TowerNodes {
    layers: Vec<LayerNodes>,
    pos_embed: NodeId,
    final_scale: NodeId,
    final_shift: NodeId,
    num_heads: usize,
    attach_boundary: usize,
    num_layers: usize,
}

struct LayerNodes {
    w_q: NodeId,
    b_q: NodeId,
    w_k: NodeId,
    b_k: NodeId,
    w_v: NodeId,
    b_v: NodeId,
    w_o: NodeId,
    b_o: NodeId,
    ln1_scale: NodeId,
    ln1_shift: NodeId,
    ln2_scale: NodeId,
    ln2_shift: NodeId,
    w_ff1: NodeId,
    b_ff1: NodeId,
    w_ff2: NodeId,
    b_ff2: NodeId,
}

impl EncoderWeights {
    /// Register this tower's weights as constants on `tape`.
    pub fn on_tape(&self, tape: &mut Tape) -> TowerNodes {
        let mut c = |p: &Parameter| tape.constant(p.value().clone());
        let layers = self
            .layers
            .iter()
            .map(|l| LayerNodes {
                w_q: c(&l.w_q),
                b_q: c(&l.b_q),
                w_k: c(&l.w_k),
                b_k: c(&l.b_k),
                w_v: c(&l.w_v),
                b_v: c(&l.b_v),
                w_o: c(&l.w_o),
                b_o: c(&l.b_o),
                ln1_scale: c(&l.ln1_scale),
                ln1_shift: c(&l.ln1_shift),
                ln2_scale: c(&l.ln2_scale),
                ln2_shift: c(&l.ln2_shift),
                w_ff1: c(&l.w_ff1),
                b_ff1: c(&l.b_ff1),
                w_ff2: c(&l.w_ff2),
                b_ff2: c(&l.b_ff2),
            })
            .collect();
        TowerNodes {
            layers,
            pos_embed: c(&self.pos_embed),
            final_scale: c(&self.final_scale),
            final_shift: c(&self.final_shift),
            num_heads: self.config.num_heads,
            attach_boundary: self.config.num_layers - self.config.attach_depth,
            num_layers: self.config.num_layers,
        }
    }
}

impl TowerNodes {
    /// One pre-LN transformer block; `prompt` (if any) is attached to the
    /// attention sublayer.
    fn block(&self, tape: &mut Tape, i: usize, x: NodeId, prompt: Option<NodeId>) -> Result<NodeId> {
        let l = &self.layers[i];
        let a = tape.layer_norm(x, l.ln1_scale, l.ln1_shift, LN_EPS)?;
        let attn = attention_sublayer(tape, l, self.num_heads, a, prompt)?;
        let o = tape.matmul(attn, l.w_o)?;
        let o = tape.add_row(o, l.b_o)?;
        let x = tape.add(x, o)?;
        let b = tape.layer_norm(x, l.ln2_scale, l.ln2_shift, LN_EPS)?;
        let f = tape.matmul(b, l.w_ff1)?;
        let f = tape.add_row(f, l.b_ff1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, l.w_ff2)?;
        let f = tape.add_row(f, l.b_ff2)?;
        tape.add(x, f)
    }

    /// The un-prompted layers below the attach boundary.
    pub fn prefix(&self, tape: &mut Tape, tokens: NodeId) -> Result<NodeId> {
        let mut x = tokens;
        for i in 0..self.attach_boundary {
            x = self.block(tape, i, x, None)?;
        }
        Ok(x)
    }

    /// The last `attach_depth` layers with the SAME prompt attached to each
    /// (interlayer sharing), then the final layer norm and the summary row.
    pub fn prompted_tail(
        &self,
        tape: &mut Tape,
        hidden: NodeId,
        prompt: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut x = hidden;
        for i in self.attach_boundary..self.num_layers {
            x = self.block(tape, i, x, prompt)?;
        }
        let summary = tape.slice_rows(x, 0, 1)?;
        tape.layer_norm(summary, self.final_scale, self.final_shift, LN_EPS)
    }

    /// Full text pass: `[prompt; class_token]` plus positional embeddings
    /// through every block (prompts are input tokens here, not attention
    /// attachments), final layer norm, class-token row.
    pub fn text_sequence(
        &self,
        tape: &mut Tape,
        prompt: Option<NodeId>,
        class_token: NodeId,
    ) -> Result<NodeId> {
        let seq = match prompt {
            Some(p) => tape.concat_rows(p, class_token)?,
            None => class_token,
        };
        let rows = tape.value(seq).rows();
        let pos_rows = tape.value(self.pos_embed).rows();
        if rows > pos_rows {
            return Err(DdpError::Shape(format!(
                "text sequence of {rows} rows exceeds {pos_rows} positions"
            )));
        }
        // Positions align to the sequence end so the class token keeps its
        // embedding even when the prompt is shorter than configured (or
        // absent, as in the un-prompted reference pass).
        let pos = tape.slice_rows(self.pos_embed, pos_rows - rows, pos_rows)?;
        let mut x = tape.add(seq, pos)?;
        for i in 0..self.num_layers {
            x = self.block(tape, i, x, None)?;
        }
        let last = tape.slice_rows(x, rows - 1, rows)?;
        tape.layer_norm(last, self.final_scale, self.final_shift, LN_EPS)
    }
}

/// Attention with optional prompt attachment: raw prompt rows are
/// concatenated to the projected keys and values, queries are the backbone
/// rows only, so the result already IS the `[L_P:]` slice of attention over
/// `([prompt; h_Q], [prompt; h_K], [prompt; h_V])` — prompt-row outputs are
/// discarded by that slice, and attention rows only ever read their own
/// query row. An empty (or absent) prompt degenerates to plain attention.
fn attention_sublayer(
    tape: &mut Tape,
    l: &LayerNodes,
    heads: usize,
    a: NodeId,
    prompt: Option<NodeId>,
) -> Result<NodeId> {
    let q = tape.matmul(a, l.w_q)?;
    let q = tape.add_row(q, l.b_q)?;
    let k = tape.matmul(a, l.w_k)?;
    let k = tape.add_row(k, l.b_k)?;
    let v = tape.matmul(a, l.w_v)?;
    let v = tape.add_row(v, l.b_v)?;
    let (k, v) = match prompt {
        Some(p) if tape.value(p).rows() > 0 => {
            (tape.concat_rows(p, k)?, tape.concat_rows(p, v)?)
        }
        _ => (k, v),
    };
    tape.attention(q, k, v, heads)
}

impl EncoderWeights {
    /// One pre-LN block without a tape, calling the same kernels in the
    /// same order as the tape ops so both paths produce identical bits.
    fn block_direct(&self, i: usize, x: &Tensor, prompt: Option<&Tensor>) -> Result<Tensor> {
        let l = &self.layers[i];
        let heads = self.config.num_heads;
        let (a, _, _) = layer_norm_forward(x, l.ln1_scale.value(), l.ln1_shift.value(), LN_EPS)?;
        let q = add_row_direct(a.matmul(l.w_q.value())?, l.b_q.value())?;
        let k = add_row_direct(a.matmul(l.w_k.value())?, l.b_k.value())?;
        let v = add_row_direct(a.matmul(l.w_v.value())?, l.b_v.value())?;
        let (k, v) = match prompt {
            Some(p) if p.rows() > 0 => (concat_rows_direct(p, &k)?, concat_rows_direct(p, &v)?),
            _ => (k, v),
        };
        let (attn, _) = attention_forward(&q, &k, &v, heads)?;
        let o = add_row_direct(attn.matmul(l.w_o.value())?, l.b_o.value())?;
        let x = add_direct(x, &o)?;
        let (b, _, _) = layer_norm_forward(&x, l.ln2_scale.value(), l.ln2_shift.value(), LN_EPS)?;
        let f = add_row_direct(b.matmul(l.w_ff1.value())?, l.b_ff1.value())?;
        let f = gelu_direct(&f)?;
        let f = add_row_direct(f.matmul(l.w_ff2.value())?, l.b_ff2.value())?;
        add_direct(&x, &f)
    }

    /// Tape-free counterpart of [`TowerNodes::prefix`].
    fn prefix_direct(&self, tokens: &Tensor) -> Result<Tensor> {
        let boundary = self.config.num_layers - self.config.attach_depth;
        let mut x = tokens.clone();
        for i in 0..boundary {
            x = self.block_direct(i, &x, None)?;
        }
        Ok(x)
    }

    /// Tape-free counterpart of [`TowerNodes::prompted_tail`].
    fn prompted_tail_direct(&self, hidden: &Tensor, prompt: Option<&Tensor>) -> Result<Tensor> {
        let boundary = self.config.num_layers - self.config.attach_depth;
        let mut x = hidden.clone();
        for i in boundary..self.config.num_layers {
            x = self.block_direct(i, &x, prompt)?;
        }
        let summary = slice_rows_direct(&x, 0, 1)?;
        let (out, _, _) = layer_norm_forward(
            &summary,
            self.final_scale.value(),
            self.final_shift.value(),
            LN_EPS,
        )?;
        Ok(out)
    }

    /// Tape-free counterpart of [`TowerNodes::text_sequence`].
    fn text_sequence_direct(&self, prompt: Option<&Tensor>, class_token: &Tensor) -> Result<Tensor> {
        let seq = match prompt {
            Some(p) => concat_rows_direct(p, class_token)?,
            None => class_token.clone(),
        };
        let rows = seq.rows();
        let pos_rows = self.pos_embed.value().rows();
        if rows > pos_rows {
            return Err(DdpError::Shape(format!(
                "text sequence of {rows} rows exceeds {pos_rows} positions"
            )));
        }
        let pos = slice_rows_direct(self.pos_embed.value(), pos_rows - rows, pos_rows)?;
        let mut x = add_direct(&seq, &pos)?;
        for i in 0..self.config.num_layers {
            x = self.block_direct(i, &x, None)?;
        }
        let last = slice_rows_direct(&x, rows - 1, rows)?;
        let (out, _, _) = layer_norm_forward(
            &last,
            self.final_scale.value(),
            self.final_shift.value(),
            LN_EPS,
        )?;
        Ok(out)
    }
}

fn add_direct(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(DdpError::Shape(format!(
            "add shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let vals = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), vals)
}

fn add_row_direct(a: Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, c) = (a.rows(), a.cols());
    if bias.len() != c {
        return Err(DdpError::Shape(format!(
            "add_row bias length {} vs {} columns",
            bias.len(),
            c
        )));
    }
    let mut vals = a.values().to_vec();
    for row in vals.chunks_mut(c) {
        for (x, b) in row.iter_mut().zip(bias.values()) {
            *x += b;
        }
    }
    Tensor::new(vec![m, c], vals)
}

fn concat_rows_direct(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(DdpError::Shape(format!(
            "concat_rows widths {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut vals = a.values().to_vec();
    vals.extend_from_slice(b.values());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], vals)
}

fn slice_rows_direct(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, c) = (a.rows(), a.cols());
    if start > end || end > m {
        return Err(DdpError::Shape(format!(
            "slice_rows [{start}, {end}) of {m} rows"
        )));
    }
    Tensor::new(vec![end - start, c], a.values()[start * c..end * c].to_vec())
}

fn gelu_direct(a: &Tensor) -> Result<Tensor> {
    let vals = a.values().iter().map(|&x| gelu_value(x)).collect();
    Tensor::new(a.shape().to_vec(), vals)
}

impl DualEncoder {
    /// Fingerprint of every weight bit in both towers and the stem; used to
    /// assert the backbone never changes.
    pub fn weight_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut eat = |p: &Parameter| {
            for v in p.value().values() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        eat(&self.stem.patch_proj);
        eat(&self.stem.patch_bias);
        eat(&self.stem.summary_token);
        for tower in [&self.visual, &self.text] {
            eat(&tower.pos_embed);
            eat(&tower.final_scale);
            eat(&tower.final_shift);
            for l in &tower.layers {
                for p in [
                    &l.w_q, &l.b_q, &l.w_k, &l.b_k, &l.w_v, &l.b_v, &l.w_o, &l.b_o,
                    &l.ln1_scale, &l.ln1_shift, &l.ln2_scale, &l.ln2_shift, &l.w_ff1,
                    &l.b_ff1, &l.w_ff2, &l.b_ff2,
                ] {
                    eat(p);
                }
            }
        }
        h
    }

    /// Token sequence of one image: the summary token, then the flattened
    /// patches of the feature grid through the frozen projection, plus
    /// positional embeddings. Shape `seq_len × d`.
    pub fn embed_image(&self, grid: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let want = c.grid_rows * c.grid_cols * c.grid_channels;
        if grid.len() != want {
            return Err(DdpError::Shape(format!(
                "image grid holds {} values, config wants {}",
                grid.len(),
                want
            )));
        }
        let pg = c.patch_grid;
        let (pr, pc) = (c.grid_rows / pg, c.grid_cols / pg);
        let ch = c.grid_channels;
        let patch_dim = c.patch_dim();
        // Row-major grid layout: (row, col, channel).
        let mut patches = Vec::with_capacity(pg * pg * patch_dim);
        for py in 0..pg {
            for px in 0..pg {
                for dy in 0..pr {
                    for dx in 0..pc {
                        let (r, col) = (py * pr + dy, px * pc + dx);
                        let base = (r * c.grid_cols + col) * ch;
                        patches.extend_from_slice(&grid.values()[base..base + ch]);
                    }
                }
            }
        }
        let patches = Tensor::new(vec![pg * pg, patch_dim], patches)?;
        let projected = patches.matmul(self.stem.patch_proj.value())?;
        let d = c.visual.embed_dim;
        let mut tokens = Vec::with_capacity(c.visual.seq_len * d);
        tokens.extend_from_slice(self.stem.summary_token.value().values());
        let bias = self.stem.patch_bias.value().values();
        for row in projected.values().chunks(d) {
            for (v, b) in row.iter().zip(bias) {
                tokens.push(v + b);
            }
        }
        let tokens = Tensor::new(vec![c.visual.seq_len, d], tokens)?;
        let mut out = tokens.values().to_vec();
        for (x, p) in out.iter_mut().zip(self.visual.pos_embed.value().values()) {
            *x += p;
        }
        Tensor::new(vec![c.visual.seq_len, d], out)
    }

    /// Hidden states after the un-prompted visual layers, cached per image.
    pub fn visual_prefix(&self, image_id: u64, tokens: &Tensor) -> Result<PrefixCache> {
        Ok(PrefixCache {
            image_id,
            hidden: self.visual.prefix_direct(tokens)?,
        })
    }

    /// Prompted visual embedding from a cached prefix (gradient-free path).
    pub fn visual_encode(&self, cache: &PrefixCache, prompt: &Tensor) -> Result<Tensor> {
        self.visual
            .prompted_tail_direct(&cache.hidden, non_empty(prompt))
    }

    /// Prompted visual embedding recomputed from the raw token sequence —
    /// the naive, cache-free reference path.
    pub fn visual_encode_uncached(&self, tokens: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        let hidden = self.visual.prefix_direct(tokens)?;
        self.visual.prompted_tail_direct(&hidden, non_empty(prompt))
    }

    /// Prompted text embedding of one class (gradient-free path).
    pub fn text_encode(&self, class_token: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        self.text.text_sequence_direct(non_empty(prompt), class_token)
    }
}

fn non_empty(prompt: &Tensor) -> Option<&Tensor> {
    if prompt.is_empty() {
        None
    } else {
        Some(prompt)
    }
}

/// Attention sublayer with prompt attachment, as a standalone operation:
/// multi-head attention over `([prompt; h_Q], [prompt; h_K], [prompt; h_V])`
/// sliced back to the backbone rows, including the output projection. An
/// empty prompt yields plain multi-head self-attention on `h`.
pub fn prompted_msa(
    layer: &LayerWeights,
    num_heads: usize,
    prompt: &Tensor,
    h: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = |t: &Parameter, tape: &mut Tape| tape.constant(t.value().clone());
    let nodes = LayerNodes {
        w_q: c(&layer.w_q, &mut tape),
        b_q: c(&layer.b_q, &mut tape),
        w_k: c(&layer.w_k, &mut tape),
        b_k: c(&layer.b_k, &mut tape),
        w_v: c(&layer.w_v, &mut tape),
        b_v: c(&layer.b_v, &mut tape),
        w_o: c(&layer.w_o, &mut tape),
        b_o: c(&layer.b_o, &mut tape),
        ln1_scale: c(&layer.ln1_scale, &mut tape),
        ln1_shift: c(&layer.ln1_shift, &mut tape),
        ln2_scale: c(&layer.ln2_scale, &mut tape),
        ln2_shift: c(&layer.ln2_shift, &mut tape),
        w_ff1: c(&layer.w_ff1, &mut tape),
        b_ff1: c(&layer.b_ff1, &mut tape),
        w_ff2: c(&layer.w_ff2, &mut tape),
        b_ff2: c(&layer.b_ff2, &mut tape),
    };
    let hv = tape.constant(h.clone());
    let p = non_empty(prompt).map(|p| tape.constant(p.clone()));
    let attn = attention_sublayer(&mut tape, &nodes, num_heads, hv, p)?;
    let o = tape.matmul(attn, nodes.w_o)?;
    let o = tape.add_row(o, nodes.b_o)?;
    Ok(tape.value(o).clone())
}

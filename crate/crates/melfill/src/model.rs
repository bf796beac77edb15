//! The reconstruction network.
//!
//! Masked frames are replaced by a learned mask vector, frames pass through a
//! ReLU affine acoustic encoder, and both streams receive sinusoidal
//! positions plus a shared alignment embedding keyed by segment index — a
//! phoneme and the frames it spans look up the same row. The joint sequence
//! (acoustic first, then phonemes) runs through a Conformer encoder; the
//! acoustic positions then run through a Conformer decoder and an affine head
//! to produce the reconstructed spectrogram, which a residual convolutional
//! post-net refines.
//!
//! The objective is the masked reconstruction loss applied to both the
//! refined and the pre-post-net output; unmasked frames contribute nothing.
//!
//! Ablation switches: `block_kind` swaps Conformer blocks for plain
//! Transformer blocks, `use_alignment_embeddings` drops the shared embedding
//! term, `use_postnet` bypasses refinement, and `loss_kind` selects L1 or L2.

use serde::{Deserialize, Serialize};

use crate::autodiff::{scaled_dot_attention, ParameterStore, Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conformer,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    L2,
}

/// Training vs evaluation forward pass; evaluation disables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub encoder_kernel: usize,
    pub decoder_kernel: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub ffn_expansion: usize,
    pub block_kind: BlockKind,
    pub use_alignment_embeddings: bool,
    pub use_postnet: bool,
    pub loss_kind: LossKind,
    pub max_segments: usize,
    pub phone_vocab: usize,
    pub n_mels: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 384,
            heads: 2,
            encoder_layers: 4,
            decoder_layers: 4,
            encoder_kernel: 7,
            decoder_kernel: 31,
            postnet_layers: 5,
            postnet_channels: 384,
            postnet_kernel: 5,
            ffn_expansion: 4,
            block_kind: BlockKind::Conformer,
            use_alignment_embeddings: true,
            use_postnet: true,
            loss_kind: LossKind::L1,
            max_segments: 500,
            phone_vocab: 73,
            n_mels: 80,
            dropout: 0.1,
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// Uniform ±√(1/fan_in).
    Uniform {
        fan_in: usize,
    },
    /// N(0, 0.02²).
    Normal,
    Ones,
    Zeros,
}

impl ModelConfig {
    /// A deliberately small configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 32,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            encoder_kernel: 3,
            decoder_kernel: 3,
            postnet_layers: 2,
            postnet_channels: 32,
            postnet_kernel: 3,
            ffn_expansion: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("postnet_layers", self.postnet_layers),
            ("postnet_channels", self.postnet_channels),
            ("ffn_expansion", self.ffn_expansion),
            ("max_segments", self.max_segments),
            ("phone_vocab", self.phone_vocab),
            ("n_mels", self.n_mels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(
                "d_model must be even for sinusoidal positions".into(),
            ));
        }
        for (name, k) in [
            ("encoder_kernel", self.encoder_kernel),
            ("decoder_kernel", self.decoder_kernel),
            ("postnet_kernel", self.postnet_kernel),
        ] {
            if k % 2 == 0 || k == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} out of [0, 1)",
                self.dropout
            )));
        }
        // Generous upper bounds; they keep hostile configs (e.g. from a
        // corrupt checkpoint header) from driving absurd allocations.
        let caps = [
            ("d_model", self.d_model, 65_536),
            ("heads", self.heads, 4_096),
            ("encoder_layers", self.encoder_layers, 1_024),
            ("decoder_layers", self.decoder_layers, 1_024),
            ("encoder_kernel", self.encoder_kernel, 4_095),
            ("decoder_kernel", self.decoder_kernel, 4_095),
            ("postnet_layers", self.postnet_layers, 1_024),
            ("postnet_channels", self.postnet_channels, 65_536),
            ("postnet_kernel", self.postnet_kernel, 4_095),
            ("ffn_expansion", self.ffn_expansion, 64),
            ("max_segments", self.max_segments, 1_048_576),
            ("phone_vocab", self.phone_vocab, 1_048_576),
            ("n_mels", self.n_mels, 65_536),
        ];
        for (name, v, cap) in caps {
            if v > cap {
                return Err(Error::Config(format!(
                    "{name} {v} exceeds the cap of {cap}"
                )));
            }
        }
        Ok(())
    }

    /// The full parameter inventory — names, shapes, and initialization —
    /// in store order, without allocating any tensor data. Checkpoint
    /// loading validates headers against this before touching memory.
    pub fn parameter_inventory(&self) -> Vec<(String, Vec<usize>, InitKind)> {
        let d = self.d_model;
        let e = self.ffn_expansion * d;
        let mut out: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
        let uniform = |out: &mut Vec<_>, name: String, shape: Vec<usize>, fan_in: usize| {
            out.push((name, shape, InitKind::Uniform { fan_in }));
        };
        let ln = |out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str| {
            out.push((format!("{prefix}.g"), vec![d], InitKind::Ones));
            out.push((format!("{prefix}.b"), vec![d], InitKind::Zeros));
        };

        uniform(
            &mut out,
            "acoustic_in.w".into(),
            vec![self.n_mels, d],
            self.n_mels,
        );
        uniform(&mut out, "acoustic_in.b".into(), vec![d], self.n_mels);
        out.push((
            "phone_table".into(),
            vec![self.phone_vocab, d],
            InitKind::Normal,
        ));
        out.push((
            "aln_table".into(),
            vec![self.max_segments, d],
            InitKind::Normal,
        ));
        out.push(("mask_vector".into(), vec![self.n_mels], InitKind::Normal));

        let ffn = |out: &mut Vec<_>, prefix: String| {
            ln(out, &format!("{prefix}.ln"));
            out.push((
                format!("{prefix}.w1"),
                vec![d, e],
                InitKind::Uniform { fan_in: d },
            ));
            out.push((
                format!("{prefix}.b1"),
                vec![e],
                InitKind::Uniform { fan_in: d },
            ));
            out.push((
                format!("{prefix}.w2"),
                vec![e, d],
                InitKind::Uniform { fan_in: e },
            ));
            out.push((
                format!("{prefix}.b2"),
                vec![d],
                InitKind::Uniform { fan_in: e },
            ));
        };
        let attention = |out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str| {
            ln(out, &format!("{prefix}attn.ln"));
            for proj in ["wq", "wk", "wv", "wo"] {
                out.push((
                    format!("{prefix}attn.{proj}"),
                    vec![d, d],
                    InitKind::Uniform { fan_in: d },
                ));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                out.push((
                    format!("{prefix}attn.{bias}"),
                    vec![d],
                    InitKind::Uniform { fan_in: d },
                ));
            }
        };

        let block = |out: &mut Vec<_>, prefix: String, kernel: usize| match self.block_kind {
            BlockKind::Conformer => {
                ffn(out, format!("{prefix}ffn1"));
                attention(out, &prefix);
                ln(out, &format!("{prefix}conv.ln"));
                uniform(out, format!("{prefix}conv.pw1.w"), vec![d, 2 * d], d);
                uniform(out, format!("{prefix}conv.pw1.b"), vec![2 * d], d);
                uniform(out, format!("{prefix}conv.dw.w"), vec![d, kernel], kernel);
                uniform(out, format!("{prefix}conv.dw.b"), vec![d], kernel);
                uniform(out, format!("{prefix}conv.pw2.w"), vec![d, d], d);
                uniform(out, format!("{prefix}conv.pw2.b"), vec![d], d);
                ffn(out, format!("{prefix}ffn2"));
                ln(out, &format!("{prefix}out_ln"));
            }
            BlockKind::Transformer => {
                attention(out, &prefix);
                ffn(out, format!("{prefix}ffn"));
            }
        };

        for i in 0..self.encoder_layers {
            block(&mut out, format!("enc.{i}."), self.encoder_kernel);
        }
        for i in 0..self.decoder_layers {
            block(&mut out, format!("dec.{i}."), self.decoder_kernel);
        }

        out.push((
            "head.w".into(),
            vec![d, self.n_mels],
            InitKind::Uniform { fan_in: d },
        ));
        out.push((
            "head.b".into(),
            vec![self.n_mels],
            InitKind::Uniform { fan_in: d },
        ));

        if self.use_postnet {
            let k = self.postnet_kernel;
            for j in 0..self.postnet_layers {
                let (c_in, c_out) = postnet_channels(self, j);
                out.push((
                    format!("postnet.{j}.w"),
                    vec![c_out, c_in, k],
                    InitKind::Uniform { fan_in: c_in * k },
                ));
                out.push((
                    format!("postnet.{j}.b"),
                    vec![c_out],
                    InitKind::Uniform { fan_in: c_in * k },
                ));
            }
        }
        out
    }
}

/// One utterance's forward inputs. Masked row content in `frames` is ignored;
/// the mask vector is substituted on the tape so it receives gradient.
#[derive(Debug, Clone)]
pub struct ModelInputs<'a> {
    /// Row-major `num_frames` × n_mels context.
    pub frames: &'a [f64],
    pub num_frames: usize,
    /// Which rows are masked (length `num_frames`).
    pub masked_rows: &'a [bool],
    /// Segment index per frame; `None` for speech-only input, where the
    /// alignment embedding is dropped entirely.
    pub frame_segments: Option<&'a [usize]>,
    /// Phone ids; empty for speech-only input.
    pub phone_ids: &'a [u32],
}

/// Tape handles from one forward pass.
pub struct ForwardVars {
    pub reconstructed: VarId,
    pub refined: VarId,
    pub encoder_states: VarId,
    pub num_frames: usize,
}

/// Concrete (detached) forward outputs.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub reconstructed: Vec<f64>,
    pub refined: Vec<f64>,
    pub encoder_states: Vec<f64>,
    pub num_frames: usize,
    pub n_mels: usize,
    pub d_model: usize,
}

impl ForwardVars {
    pub fn materialize(&self, tape: &Tape, cfg: &ModelConfig) -> ModelOutput {
        ModelOutput {
            reconstructed: tape.value(self.reconstructed).to_vec(),
            refined: tape.value(self.refined).to_vec(),
            encoder_states: tape.value(self.encoder_states).to_vec(),
            num_frames: self.num_frames,
            n_mels: cfg.n_mels,
            d_model: cfg.d_model,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
}

impl Model {
    /// Initialize parameters from a seed. Affine and convolution weights are
    /// uniform ±√(1/fan_in); embedding tables and the mask vector are
    /// N(0, 0.02²); layer-norm gains are 1 and biases 0.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut store = ParameterStore::new();
        for (name, shape, init) in cfg.parameter_inventory() {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                InitKind::Uniform { fan_in } => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| (rng.next_f64() * 2.0 - 1.0) * bound)
                        .collect()
                }
                InitKind::Normal => (0..numel).map(|_| rng.next_normal() * 0.02).collect(),
                InitKind::Ones => vec![1.0; numel],
                InitKind::Zeros => vec![0.0; numel],
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Model { cfg, store })
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Current value of the learned mask vector ε.
    pub fn mask_vector(&self) -> &[f64] {
        &self
            .store
            .get("mask_vector")
            .expect("always present")
            .value
            .data
    }

    fn validate_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        let cfg = &self.cfg;
        if inputs.num_frames == 0 {
            return Err(Error::Shape("forward needs at least one frame".into()));
        }
        if inputs.frames.len() != inputs.num_frames * cfg.n_mels {
            return Err(Error::Shape(format!(
                "frames buffer of {} values does not tile {}×{}",
                inputs.frames.len(),
                inputs.num_frames,
                cfg.n_mels
            )));
        }
        if inputs.masked_rows.len() != inputs.num_frames {
            return Err(Error::Shape(format!(
                "mask flags cover {} rows, input has {}",
                inputs.masked_rows.len(),
                inputs.num_frames
            )));
        }
        if inputs.phone_ids.len() > cfg.max_segments {
            return Err(Error::Shape(format!(
                "{} phonemes exceed the {} segment limit",
                inputs.phone_ids.len(),
                cfg.max_segments
            )));
        }
        if let Some(&id) = inputs
            .phone_ids
            .iter()
            .find(|&&id| id as usize >= cfg.phone_vocab)
        {
            return Err(Error::Shape(format!(
                "phone id {id} outside vocabulary of {}",
                cfg.phone_vocab
            )));
        }
        if let Some(seg) = inputs.frame_segments {
            if seg.len() != inputs.num_frames {
                return Err(Error::Shape(format!(
                    "segment indices cover {} frames, input has {}",
                    seg.len(),
                    inputs.num_frames
                )));
            }
            if let Some(&s) = seg.iter().find(|&&s| s >= cfg.max_segments) {
                return Err(Error::Shape(format!(
                    "segment index {s} outside the {} limit",
                    cfg.max_segments
                )));
            }
        }
        Ok(())
    }

    /// Build the joint embedded sequence: acoustic positions first, then
    /// phonemes, each the sum of content, positional, and (when enabled)
    /// alignment embeddings. Returns the joint var and the acoustic length.
    pub fn embed_inputs(&self, tape: &mut Tape, inputs: &ModelInputs) -> Result<(VarId, usize)> {
        self.validate_inputs(inputs)?;
        let cfg = &self.cfg;
        let t = inputs.num_frames;

        let base = tape.constant(vec![t, cfg.n_mels], inputs.frames.to_vec())?;
        let eps = tape.param("mask_vector", &self.store)?;
        let shat = tape.masked_fill(base, eps, inputs.masked_rows)?;

        let w_in = tape.param("acoustic_in.w", &self.store)?;
        let b_in = tape.param("acoustic_in.b", &self.store)?;
        let affine = tape.matmul(shat, w_in)?;
        let affine = tape.add_row(affine, b_in)?;
        let mut acoustic = tape.relu(affine)?;

        let pos_a = tape.constant(vec![t, cfg.d_model], sinusoidal_positions(t, cfg.d_model))?;
        acoustic = tape.add(acoustic, pos_a)?;

        let use_aln = cfg.use_alignment_embeddings && inputs.frame_segments.is_some();
        let aln_table = if use_aln {
            Some(tape.param("aln_table", &self.store)?)
        } else {
            None
        };
        if let Some(table) = aln_table {
            let rows = tape.embedding(table, inputs.frame_segments.unwrap())?;
            acoustic = tape.add(acoustic, rows)?;
        }

        if inputs.phone_ids.is_empty() {
            return Ok((acoustic, t));
        }

        let ids: Vec<usize> = inputs.phone_ids.iter().map(|&i| i as usize).collect();
        let p = ids.len();
        let phone_table = tape.param("phone_table", &self.store)?;
        let mut text = tape.embedding(phone_table, &ids)?;
        let pos_t = tape.constant(vec![p, cfg.d_model], sinusoidal_positions(p, cfg.d_model))?;
        text = tape.add(text, pos_t)?;
        if let Some(table) = aln_table {
            // A phoneme's segment index is its own position.
            let phone_segments: Vec<usize> = (0..p).collect();
            let rows = tape.embedding(table, &phone_segments)?;
            text = tape.add(text, rows)?;
        }
        Ok((tape.concat(&[acoustic, text], 0)?, t))
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        h: VarId,
        prefix: &str,
        activation: fn(&mut Tape, VarId) -> Result<VarId>,
        p_drop: f64,
        rng: &mut SplitMix64,
    ) -> Result<VarId> {
        let ln_g = tape.param(&format!("{prefix}.ln.g"), &self.store)?;
        let ln_b = tape.param(&format!("{prefix}.ln.b"), &self.store)?;
        let w1 = tape.param(&format!("{prefix}.w1"), &self.store)?;
        let b1 = tape.param(&format!("{prefix}.b1"), &self.store)?;
        let w2 = tape.param(&format!("{prefix}.w2"), &self.store)?;
        let b2 = tape.param(&format!("{prefix}.b2"), &self.store)?;

        let t = tape.layer_norm(h, ln_g, ln_b)?;
        let t = tape.matmul(t, w1)?;
        let t = tape.add_row(t, b1)?;
        let t = activation(tape, t)?;
        let t = tape.dropout(t, p_drop, rng)?;
        let t = tape.matmul(t, w2)?;
        let t = tape.add_row(t, b2)?;
        tape.dropout(t, p_drop, rng)
    }

    fn self_attention(
        &self,
        tape: &mut Tape,
        h: VarId,
        prefix: &str,
        p_drop: f64,
        rng: &mut SplitMix64,
    ) -> Result<VarId> {
        let ln_g = tape.param(&format!("{prefix}attn.ln.g"), &self.store)?;
        let ln_b = tape.param(&format!("{prefix}attn.ln.b"), &self.store)?;
        let t = tape.layer_norm(h, ln_g, ln_b)?;

        let wq = tape.param(&format!("{prefix}attn.wq"), &self.store)?;
        let bq = tape.param(&format!("{prefix}attn.bq"), &self.store)?;
        let wk = tape.param(&format!("{prefix}attn.wk"), &self.store)?;
        let bk = tape.param(&format!("{prefix}attn.bk"), &self.store)?;
        let wv = tape.param(&format!("{prefix}attn.wv"), &self.store)?;
        let bv = tape.param(&format!("{prefix}attn.bv"), &self.store)?;
        let wo = tape.param(&format!("{prefix}attn.wo"), &self.store)?;
        let bo = tape.param(&format!("{prefix}attn.bo"), &self.store)?;

        let q = tape.matmul(t, wq)?;
        let q = tape.add_row(q, bq)?;
        let k = tape.matmul(t, wk)?;
        let k = tape.add_row(k, bk)?;
        let v = tape.matmul(t, wv)?;
        let v = tape.add_row(v, bv)?;

        let attn = scaled_dot_attention(tape, q, k, v, self.cfg.heads, wo, bo)?;
        tape.dropout(attn, p_drop, rng)
    }

    fn convolution_module(
        &self,
        tape: &mut Tape,
        h: VarId,
        prefix: &str,
        p_drop: f64,
        rng: &mut SplitMix64,
    ) -> Result<VarId> {
        let ln_g = tape.param(&format!("{prefix}conv.ln.g"), &self.store)?;
        let ln_b = tape.param(&format!("{prefix}conv.ln.b"), &self.store)?;
        let pw1_w = tape.param(&format!("{prefix}conv.pw1.w"), &self.store)?;
        let pw1_b = tape.param(&format!("{prefix}conv.pw1.b"), &self.store)?;
        let dw_w = tape.param(&format!("{prefix}conv.dw.w"), &self.store)?;
        let dw_b = tape.param(&format!("{prefix}conv.dw.b"), &self.store)?;
        let pw2_w = tape.param(&format!("{prefix}conv.pw2.w"), &self.store)?;
        let pw2_b = tape.param(&format!("{prefix}conv.pw2.b"), &self.store)?;

        let t = tape.layer_norm(h, ln_g, ln_b)?;
        // Pointwise convolutions over time are plain affine maps per frame.
        let t = tape.matmul(t, pw1_w)?;
        let t = tape.add_row(t, pw1_b)?;
        let t = tape.glu(t)?;
        let t = tape.depthwise_conv1d(t, dw_w, dw_b)?;
        let t = tape.swish(t)?;
        let t = tape.matmul(t, pw2_w)?;
        let t = tape.add_row(t, pw2_b)?;
        tape.dropout(t, p_drop, rng)
    }

    /// One encoder/decoder block. Conformer: half-step FFN, self-attention,
    /// convolution module, half-step FFN, final layer norm, all with
    /// pre-norm residuals. Transformer: self-attention then a full-step FFN.
    pub fn block(
        &self,
        tape: &mut Tape,
        h: VarId,
        prefix: &str,
        mode: Mode,
        rng: &mut SplitMix64,
    ) -> Result<VarId> {
        let p_drop = match mode {
            Mode::Train => self.cfg.dropout,
            Mode::Eval => 0.0,
        };
        match self.cfg.block_kind {
            BlockKind::Conformer => {
                let ffn1 =
                    self.feed_forward(tape, h, &format!("{prefix}ffn1"), Tape::swish, p_drop, rng)?;
                let half = tape.scale(ffn1, 0.5)?;
                let h = tape.add(h, half)?;

                let attn = self.self_attention(tape, h, prefix, p_drop, rng)?;
                let h = tape.add(h, attn)?;

                let conv = self.convolution_module(tape, h, prefix, p_drop, rng)?;
                let h = tape.add(h, conv)?;

                let ffn2 =
                    self.feed_forward(tape, h, &format!("{prefix}ffn2"), Tape::swish, p_drop, rng)?;
                let half = tape.scale(ffn2, 0.5)?;
                let h = tape.add(h, half)?;

                let g = tape.param(&format!("{prefix}out_ln.g"), &self.store)?;
                let b = tape.param(&format!("{prefix}out_ln.b"), &self.store)?;
                tape.layer_norm(h, g, b)
            }
            BlockKind::Transformer => {
                let attn = self.self_attention(tape, h, prefix, p_drop, rng)?;
                let h = tape.add(h, attn)?;
                let ffn =
                    self.feed_forward(tape, h, &format!("{prefix}ffn"), Tape::relu, p_drop, rng)?;
                tape.add(h, ffn)
            }
        }
    }

    fn postnet(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let mut h = x;
        for j in 0..self.cfg.postnet_layers {
            let w = tape.param(&format!("postnet.{j}.w"), &self.store)?;
            let b = tape.param(&format!("postnet.{j}.b"), &self.store)?;
            h = tape.conv1d(h, w, b)?;
            if j + 1 < self.cfg.postnet_layers {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Full forward pass: embed, encode the joint sequence, decode the
    /// acoustic positions, project to mel space, refine.
    pub fn forward(
        &self,
        tape: &mut Tape,
        inputs: &ModelInputs,
        mode: Mode,
        rng: &mut SplitMix64,
    ) -> Result<ForwardVars> {
        let (mut h, t) = self.embed_inputs(tape, inputs)?;
        for i in 0..self.cfg.encoder_layers {
            h = self.block(tape, h, &format!("enc.{i}."), mode, rng)?;
        }
        let encoder_states = h;

        let joint_len = tape.shape(h)[0];
        let mut dec = if joint_len > t {
            tape.slice(h, 0, 0, t)?
        } else {
            h
        };
        for i in 0..self.cfg.decoder_layers {
            dec = self.block(tape, dec, &format!("dec.{i}."), mode, rng)?;
        }

        let head_w = tape.param("head.w", &self.store)?;
        let head_b = tape.param("head.b", &self.store)?;
        let recon = tape.matmul(dec, head_w)?;
        let reconstructed = tape.add_row(recon, head_b)?;

        let refined = if self.cfg.use_postnet {
            let residual = self.postnet(tape, reconstructed)?;
            tape.add(reconstructed, residual)?
        } else {
            reconstructed
        };

        Ok(ForwardVars {
            reconstructed,
            refined,
            encoder_states,
            num_frames: t,
        })
    }

    /// The reconstruction objective: masked mean error of the refined output
    /// plus masked mean error of the pre-post-net output. Errors on an empty
    /// mask plan.
    pub fn masked_recon_loss(
        &self,
        tape: &mut Tape,
        fwd: &ForwardVars,
        target: VarId,
        plan: &MaskPlan,
    ) -> Result<VarId> {
        if plan.is_empty() {
            return Err(Error::Data("empty mask plan: loss is undefined".into()));
        }
        let rows = plan.frame_flags(fwd.num_frames)?;
        let (refined_term, recon_term) = match self.cfg.loss_kind {
            LossKind::L1 => (
                tape.masked_l1(fwd.refined, target, &rows)?,
                tape.masked_l1(fwd.reconstructed, target, &rows)?,
            ),
            LossKind::L2 => (
                tape.masked_l2(fwd.refined, target, &rows)?,
                tape.masked_l2(fwd.reconstructed, target, &rows)?,
            ),
        };
        tape.add(refined_term, recon_term)
    }
}

fn postnet_channels(cfg: &ModelConfig, layer: usize) -> (usize, usize) {
    let c_in = if layer == 0 {
        cfg.n_mels
    } else {
        cfg.postnet_channels
    };
    let c_out = if layer + 1 == cfg.postnet_layers {
        cfg.n_mels
    } else {
        cfg.postnet_channels
    };
    (c_in, c_out)
}

/// Fixed sinusoidal position table; each stream's positions start at zero.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 * rate;
            out[pos * d_model + 2 * i] = angle.sin();
            out[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskPlan;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            encoder_kernel: 3,
            decoder_kernel: 3,
            postnet_layers: 2,
            postnet_channels: 8,
            postnet_kernel: 3,
            ffn_expansion: 2,
            max_segments: 20,
            phone_vocab: 10,
            n_mels: 6,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn inputs_buffers(t: usize, n_mels: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = SplitMix64::new(seed);
        let frames: Vec<f64> = (0..t * n_mels).map(|_| rng.next_f64() - 0.5).collect();
        let masked: Vec<bool> = (0..t).map(|i| i % 3 == 1).collect();
        (frames, masked)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let cfg = ModelConfig {
            heads: 5, // 384 % 5 != 0
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            encoder_kernel: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            encoder_layers: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn joint_length_and_width() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let (frames, masked) = inputs_buffers(3, cfg.n_mels, 2);
        let seg = vec![0usize, 0, 1];
        let mut tape = Tape::new();
        let (joint, t) = model
            .embed_inputs(
                &mut tape,
                &ModelInputs {
                    frames: &frames,
                    num_frames: 3,
                    masked_rows: &masked,
                    frame_segments: Some(&seg),
                    phone_ids: &[1, 2],
                },
            )
            .unwrap();
        assert_eq!(t, 3);
        assert_eq!(tape.shape(joint), &[5, cfg.d_model]);
    }

    #[test]
    fn frames_and_phoneme_share_alignment_row() {
        // With content and positional terms zeroed out, the embedding reduces
        // to the alignment row itself, so sharing is directly observable.
        let cfg = small_cfg();
        let mut model = Model::new(cfg.clone(), 3).unwrap();
        for name in ["acoustic_in.w", "acoustic_in.b", "phone_table"] {
            let p = model.store.get_mut(name).unwrap();
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }

        let t = 4usize;
        let frames = vec![0.0; t * cfg.n_mels];
        let masked = vec![false; t];
        let seg = vec![0usize, 0, 1, 1];
        let mut tape = Tape::new();
        let (joint, _) = model
            .embed_inputs(
                &mut tape,
                &ModelInputs {
                    frames: &frames,
                    num_frames: t,
                    masked_rows: &masked,
                    frame_segments: Some(&seg),
                    phone_ids: &[3, 4],
                },
            )
            .unwrap();

        let d = cfg.d_model;
        let v = tape.value(joint);
        let pos_a = sinusoidal_positions(t, d);
        let pos_t = sinusoidal_positions(2, d);
        let aln = &model.store.get("aln_table").unwrap().value.data;

        // Frame 0 (segment 0) and phoneme 0 both carry aln row 0; frame 2
        // (segment 1) and phoneme 1 both carry aln row 1.
        for (row, pos, k) in [
            (0usize, &pos_a[0..d], 0usize),
            (2, &pos_a[2 * d..3 * d], 1),
            (t, &pos_t[0..d], 0),
            (t + 1, &pos_t[d..2 * d], 1),
        ] {
            for j in 0..d {
                let expect = pos[j] + aln[k * d + j];
                assert!(
                    (v[row * d + j] - expect).abs() < 1e-12,
                    "row {row} dim {j}: {} vs {expect}",
                    v[row * d + j]
                );
            }
        }
    }

    #[test]
    fn disabling_alignment_embeddings_is_an_additive_identity() {
        let cfg = small_cfg();
        let model_on = Model::new(cfg.clone(), 5).unwrap();
        let cfg_off = ModelConfig {
            use_alignment_embeddings: false,
            ..cfg.clone()
        };
        let mut model_off = Model::new(cfg_off, 5).unwrap();
        // Same seed gives identical parameters; share the store to be exact.
        model_off.store = model_on.store.clone();

        let (frames, masked) = inputs_buffers(4, cfg.n_mels, 7);
        let seg = vec![0usize, 1, 1, 2];
        let phone_ids = [2u32, 3, 4];

        let embed = |model: &Model| {
            let mut tape = Tape::new();
            let (joint, _) = model
                .embed_inputs(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: 4,
                        masked_rows: &masked,
                        frame_segments: Some(&seg),
                        phone_ids: &phone_ids,
                    },
                )
                .unwrap();
            tape.value(joint).to_vec()
        };

        let on = embed(&model_on);
        let off = embed(&model_off);
        let d = cfg.d_model;
        let aln = &model_on.store.get("aln_table").unwrap().value.data;
        let segments: Vec<usize> = seg.iter().copied().chain(0..phone_ids.len()).collect();
        for (row, &k) in segments.iter().enumerate() {
            for j in 0..d {
                let expect = off[row * d + j] + aln[k * d + j];
                assert_eq!(on[row * d + j], expect, "row {row} dim {j} exact identity");
            }
        }
    }

    #[test]
    fn forward_shapes() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 11).unwrap();
        let (frames, masked) = inputs_buffers(6, cfg.n_mels, 13);
        let seg = vec![0usize, 0, 1, 1, 2, 2];
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(1);
        let fwd = model
            .forward(
                &mut tape,
                &ModelInputs {
                    frames: &frames,
                    num_frames: 6,
                    masked_rows: &masked,
                    frame_segments: Some(&seg),
                    phone_ids: &[1, 2, 3],
                },
                Mode::Eval,
                &mut rng,
            )
            .unwrap();
        assert_eq!(tape.shape(fwd.reconstructed), &[6, cfg.n_mels]);
        assert_eq!(tape.shape(fwd.refined), &[6, cfg.n_mels]);
        assert_eq!(tape.shape(fwd.encoder_states), &[9, cfg.d_model]);
    }

    #[test]
    fn forward_without_phones_or_segments() {
        // Speech-only pathway: no text stream, no alignment embedding.
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 17).unwrap();
        let (frames, masked) = inputs_buffers(5, cfg.n_mels, 19);
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(1);
        let fwd = model
            .forward(
                &mut tape,
                &ModelInputs {
                    frames: &frames,
                    num_frames: 5,
                    masked_rows: &masked,
                    frame_segments: None,
                    phone_ids: &[],
                },
                Mode::Eval,
                &mut rng,
            )
            .unwrap();
        assert_eq!(tape.shape(fwd.refined), &[5, cfg.n_mels]);
        assert_eq!(tape.shape(fwd.encoder_states), &[5, cfg.d_model]);
    }

    #[test]
    fn postnet_switch_exact() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 23).unwrap();
        let cfg_off = ModelConfig {
            use_postnet: false,
            ..cfg.clone()
        };
        let mut model_off = Model::new(cfg_off, 23).unwrap();
        // The post-net-free store is a prefix of the full one; rebuild the
        // full store minus the post-net by copying shared parameters.
        for (name, param) in model.store.iter() {
            if !name.starts_with("postnet.") {
                model_off.store.get_mut(name).unwrap().value = param.value.clone();
            }
        }

        let (frames, masked) = inputs_buffers(4, cfg.n_mels, 29);
        let seg = vec![0usize, 0, 1, 1];
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let mut rng = SplitMix64::new(1);
            let fwd = m
                .forward(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: 4,
                        masked_rows: &masked,
                        frame_segments: Some(&seg),
                        phone_ids: &[1, 2],
                    },
                    Mode::Eval,
                    &mut rng,
                )
                .unwrap();
            (
                tape.value(fwd.reconstructed).to_vec(),
                tape.value(fwd.refined).to_vec(),
            )
        };
        let (recon_off, refined_off) = run(&model_off);
        assert_eq!(
            recon_off, refined_off,
            "no post-net ⇒ refined == reconstructed"
        );

        let (recon_on, refined_on) = run(&model);
        assert_eq!(recon_on, recon_off, "post-net only adds a residual branch");
        assert_ne!(refined_on, recon_on);
    }

    #[test]
    fn block_kind_switch_changes_only_block_internals() {
        let cfg = small_cfg();
        let cfg_tr = ModelConfig {
            block_kind: BlockKind::Transformer,
            ..cfg.clone()
        };
        let conformer = Model::new(cfg.clone(), 31).unwrap();
        let transformer = Model::new(cfg_tr, 31).unwrap();
        assert!(conformer.store.contains("enc.0.conv.dw.w"));
        assert!(!transformer.store.contains("enc.0.conv.dw.w"));
        assert!(transformer.store.contains("enc.0.ffn.w1"));

        let (frames, masked) = inputs_buffers(4, cfg.n_mels, 37);
        let run = |m: &Model| {
            let mut tape = Tape::new();
            let mut rng = SplitMix64::new(9);
            let fwd = m
                .forward(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: 4,
                        masked_rows: &masked,
                        frame_segments: None,
                        phone_ids: &[],
                    },
                    Mode::Eval,
                    &mut rng,
                )
                .unwrap();
            tape.value(fwd.refined).to_vec()
        };
        assert_ne!(run(&conformer), run(&transformer));
    }

    #[test]
    fn block_preserves_shape_for_any_length() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 97).unwrap();
        let mut rng = SplitMix64::new(2);
        for len in [1usize, 2, 5, 9] {
            let mut tape = Tape::new();
            let data: Vec<f64> = (0..len * cfg.d_model)
                .map(|_| rng.next_f64() - 0.5)
                .collect();
            let h = tape.constant(vec![len, cfg.d_model], data).unwrap();
            let mut drop_rng = SplitMix64::new(1);
            let out = model
                .block(&mut tape, h, "enc.0.", Mode::Eval, &mut drop_rng)
                .unwrap();
            assert_eq!(tape.shape(out), &[len, cfg.d_model]);
        }
    }

    #[test]
    fn output_length_equals_acoustic_length_for_any_mask() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 101).unwrap();
        let mut rng = SplitMix64::new(4);
        for t in [1usize, 3, 7, 12] {
            let frames: Vec<f64> = (0..t * cfg.n_mels).map(|_| rng.next_f64() - 0.5).collect();
            let masked: Vec<bool> = (0..t).map(|_| rng.next_f64() < 0.5).collect();
            let mut tape = Tape::new();
            let mut drop_rng = SplitMix64::new(1);
            let fwd = model
                .forward(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: t,
                        masked_rows: &masked,
                        frame_segments: None,
                        phone_ids: &[],
                    },
                    Mode::Eval,
                    &mut drop_rng,
                )
                .unwrap();
            assert_eq!(tape.shape(fwd.refined), &[t, cfg.n_mels]);
            assert_eq!(tape.shape(fwd.reconstructed), &[t, cfg.n_mels]);
        }
    }

    #[test]
    fn tape_masked_fill_agrees_with_apply_mask() {
        // The training path substitutes the mask vector on the tape; the
        // inference utilities substitute it on concrete spectrograms. The
        // two must agree bit for bit.
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 71).unwrap();
        let (frames, masked) = inputs_buffers(5, cfg.n_mels, 73);
        let plan = MaskPlan {
            masked_frames: (0..5).filter(|&i| masked[i]).collect(),
            masked_phonemes: vec![],
            ratio: 0.4,
            seed: 0,
        };
        let spec =
            crate::dsp::Spectrogram::from_model_output(frames.clone(), cfg.n_mels, 300, 24_000)
                .unwrap();
        let via_apply = crate::masking::apply_mask(&spec, &plan, model.mask_vector()).unwrap();

        let mut tape = Tape::new();
        let base = tape.constant(vec![5, cfg.n_mels], frames).unwrap();
        let eps = tape.param("mask_vector", &model.store).unwrap();
        let filled = tape.masked_fill(base, eps, &masked).unwrap();
        assert_eq!(tape.value(filled), via_apply.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 41).unwrap();
        let (frames, masked) = inputs_buffers(5, cfg.n_mels, 43);
        let run = || {
            let mut tape = Tape::new();
            let mut rng = SplitMix64::new(77);
            let fwd = model
                .forward(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: 5,
                        masked_rows: &masked,
                        frame_segments: None,
                        phone_ids: &[],
                    },
                    Mode::Train,
                    &mut rng,
                )
                .unwrap();
            tape.value(fwd.refined).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_examples() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 47).unwrap();
        let t = 3usize;
        let n = cfg.n_mels;
        let mut tape = Tape::new();

        // Fabricate forward vars directly: both outputs off by +1 on the
        // masked frame.
        let target_data = vec![0.25; t * n];
        let mut out_data = target_data.clone();
        for j in 0..n {
            out_data[n + j] += 1.0;
        }
        let out = tape.var(vec![t, n], out_data).unwrap();
        let target = tape.constant(vec![t, n], target_data).unwrap();
        let fwd = ForwardVars {
            reconstructed: out,
            refined: out,
            encoder_states: out,
            num_frames: t,
        };
        let plan = MaskPlan {
            masked_frames: vec![1],
            masked_phonemes: vec![],
            ratio: 0.3,
            seed: 0,
        };
        let loss = model
            .masked_recon_loss(&mut tape, &fwd, target, &plan)
            .unwrap();
        assert!((tape.value(loss)[0] - 2.0).abs() < 1e-12);

        // Outputs equal to the target on the masked frame score zero.
        let exact = tape.constant(vec![t, n], vec![0.25; t * n]).unwrap();
        let zero_fwd = ForwardVars {
            reconstructed: exact,
            refined: exact,
            encoder_states: exact,
            num_frames: t,
        };
        let zero_loss = model
            .masked_recon_loss(&mut tape, &zero_fwd, target, &plan)
            .unwrap();
        assert_eq!(tape.value(zero_loss)[0], 0.0);

        let empty = MaskPlan {
            masked_frames: vec![],
            masked_phonemes: vec![],
            ratio: 0.0,
            seed: 0,
        };
        assert!(model
            .masked_recon_loss(&mut tape, &fwd, target, &empty)
            .is_err());
    }

    #[test]
    fn loss_ignores_unmasked_target_changes() {
        let cfg = small_cfg();
        let model = Model::new(cfg.clone(), 53).unwrap();
        let (frames, _) = inputs_buffers(4, cfg.n_mels, 59);
        let masked = vec![false, true, false, false];
        let plan = MaskPlan {
            masked_frames: vec![1],
            masked_phonemes: vec![],
            ratio: 0.25,
            seed: 0,
        };

        let loss_for = |target: Vec<f64>| {
            let mut tape = Tape::new();
            let mut rng = SplitMix64::new(5);
            let fwd = model
                .forward(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: 4,
                        masked_rows: &masked,
                        frame_segments: None,
                        phone_ids: &[],
                    },
                    Mode::Eval,
                    &mut rng,
                )
                .unwrap();
            let t = tape.constant(vec![4, cfg.n_mels], target).unwrap();
            let loss = model.masked_recon_loss(&mut tape, &fwd, t, &plan).unwrap();
            tape.value(loss)[0]
        };

        let base = frames.clone();
        let mut perturbed = frames.clone();
        for j in 0..cfg.n_mels {
            perturbed[2 * cfg.n_mels + j] += 123.456; // unmasked frame
        }
        let (a, b) = (loss_for(base), loss_for(perturbed));
        assert_eq!(a.to_bits(), b.to_bits(), "unmasked target rows are inert");
    }

    #[test]
    fn full_objective_passes_finite_difference_check() {
        // Gradient of the whole graph w.r.t. a sample of every parameter
        // family on a 2-frame, 2-phone toy.
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            encoder_kernel: 3,
            decoder_kernel: 3,
            postnet_layers: 2,
            postnet_channels: 4,
            postnet_kernel: 3,
            ffn_expansion: 2,
            max_segments: 10,
            phone_vocab: 5,
            n_mels: 4,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg.clone(), 61).unwrap();
        let frames: Vec<f64> = (0..2 * cfg.n_mels)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let target = frames.clone();
        let masked = vec![true, false];
        let seg = vec![0usize, 1];
        let plan = MaskPlan {
            masked_frames: vec![0],
            masked_phonemes: vec![0],
            ratio: 0.5,
            seed: 0,
        };

        let eval_loss = |model: &Model| -> f64 {
            let mut tape = Tape::new();
            let mut rng = SplitMix64::new(1);
            let fwd = model
                .forward(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: 2,
                        masked_rows: &masked,
                        frame_segments: Some(&seg),
                        phone_ids: &[1, 2],
                    },
                    Mode::Eval,
                    &mut rng,
                )
                .unwrap();
            let t = tape.constant(vec![2, cfg.n_mels], target.clone()).unwrap();
            let loss = model.masked_recon_loss(&mut tape, &fwd, t, &plan).unwrap();
            tape.value(loss)[0]
        };

        model.store.zero_grads();
        {
            let mut tape = Tape::new();
            let mut rng = SplitMix64::new(1);
            let fwd = model
                .forward(
                    &mut tape,
                    &ModelInputs {
                        frames: &frames,
                        num_frames: 2,
                        masked_rows: &masked,
                        frame_segments: Some(&seg),
                        phone_ids: &[1, 2],
                    },
                    Mode::Eval,
                    &mut rng,
                )
                .unwrap();
            let t = tape.constant(vec![2, cfg.n_mels], target.clone()).unwrap();
            let loss = model.masked_recon_loss(&mut tape, &fwd, t, &plan).unwrap();
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut model.store).unwrap();
        }

        let eps = 1e-4;
        for name in [
            "mask_vector",
            "acoustic_in.w",
            "aln_table",
            "enc.0.attn.wq",
            "enc.0.conv.dw.w",
            "dec.0.ffn1.w1",
            "head.w",
            "postnet.0.w",
        ] {
            let n = model.store.get(name).unwrap().value.data.len();
            let stride = (n / 5).max(1);
            for i in (0..n).step_by(stride) {
                let analytic = model.store.get(name).unwrap().grad[i];
                let original = model.store.get(name).unwrap().value.data[i];
                model.store.get_mut(name).unwrap().value.data[i] = original + eps;
                let fp = eval_loss(&model);
                model.store.get_mut(name).unwrap().value.data[i] = original - eps;
                let fm = eval_loss(&model);
                model.store.get_mut(name).unwrap().value.data[i] = original;
                let numeric = (fp - fm) / (2.0 * eps);
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-3,
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }
}

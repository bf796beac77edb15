//! Optimization: Noam-scheduled Adam over length-binned batches, with
//! bit-exact checkpointing.
//!
//! Reproducibility contract: a (dataset, configs, seed) triple fully
//! determines the loss log, and resuming from a checkpoint mid-run continues
//! the uninterrupted trajectory bit-exactly. Everything random — batch
//! shuffling, mask sampling, dropout — flows from seeds that are either
//! derived per epoch or carried in the checkpointed generator state.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::{
    frame_segment_indices, parse_alignment, AlignmentMap, PhoneVocab, PhonemeSequence,
};
use crate::autodiff::{ParameterStore, Tape};
use crate::dsp::{read_features, Spectrogram};
use crate::error::{Error, Result};
use crate::masking::{plan_frame_span_mask_with, plan_phoneme_span_mask_with};
use crate::model::{Mode, Model, ModelConfig, ModelInputs};
use crate::rng::SplitMix64;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"A3TC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which masking regime drives pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskMode {
    /// Random phoneme spans; masked frames follow the alignment.
    SpeechText { ratio: f64 },
    /// Random frame spans; no text stream, no alignment embedding.
    SpeechOnly { ratio: f64 },
}

impl Default for MaskMode {
    fn default() -> Self {
        MaskMode::SpeechText { ratio: 0.8 }
    }
}

impl MaskMode {
    pub fn ratio(&self) -> f64 {
        match *self {
            MaskMode::SpeechText { ratio } | MaskMode::SpeechOnly { ratio } => ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Batch budget in total sequence elements (frames + phonemes).
    pub max_batch_bin: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub mask_mode: MaskMode,
    /// Longest masking span, in phonemes (speech-text mode).
    pub phoneme_span_max: u64,
    /// Longest masking span, in frames (speech-only mode).
    pub frame_span_max: u64,
    /// Global-norm gradient clip; `None` disables.
    pub grad_clip: Option<f64>,
    /// Steps between checkpoint writes; 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    /// Stop early once the refined-branch masked L1 falls below this.
    pub stop_refined_l1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.0,
            warmup_steps: 4000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            max_batch_bin: 4000,
            max_steps: 10_000,
            seed: 0,
            mask_mode: MaskMode::default(),
            phoneme_span_max: 10,
            frame_span_max: 5,
            grad_clip: Some(1.0),
            checkpoint_interval: 1000,
            stop_refined_l1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.base_lr <= 0.0 || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} out of [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.max_batch_bin == 0 {
            return Err(Error::Config("max_batch_bin must be positive".into()));
        }
        let ratio = self.mask_mode.ratio();
        if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
            return Err(Error::Config(format!("mask ratio {ratio} out of [0, 1]")));
        }
        if self.phoneme_span_max == 0 || self.frame_span_max == 0 {
            return Err(Error::Config("mask span lengths must be positive".into()));
        }
        Ok(())
    }
}

/// Noam schedule: base · d_model^{-1/2} · min(step^{-1/2}, step · warmup^{-3/2}).
pub fn noam_lr(step: u64, base_lr: f64, d_model: usize, warmup_steps: u64) -> Result<f64> {
    if step < 1 {
        return Err(Error::Config(format!("noam_lr needs step ≥ 1, got {step}")));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    Ok(base_lr * (d_model as f64).powf(-0.5) * f64::min(s.powf(-0.5), s * w.powf(-1.5)))
}

/// One Adam update with bias correction. Moments live in the store.
pub fn adam_step(store: &mut ParameterStore, lr: f64, cfg: &TrainConfig, step: u64) -> Result<()> {
    if !store.grads_ready() {
        return Err(Error::Numeric(
            "adam_step without gradients: run backward first".into(),
        ));
    }
    if step < 1 {
        return Err(Error::Config("adam step count starts at 1".into()));
    }
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for (_, p) in store.iter_mut() {
        for i in 0..p.value.data.len() {
            let g = p.grad[i];
            p.adam_m[i] = b1 * p.adam_m[i] + (1.0 - b1) * g;
            p.adam_v[i] = b2 * p.adam_v[i] + (1.0 - b2) * g * g;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            p.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    store.clear_grads_ready();
    Ok(())
}

/// Sizing entry for the batch packer.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub id: String,
    pub frames: usize,
    pub phones: usize,
}

impl BatchItem {
    pub fn elements(&self) -> usize {
        self.frames + self.phones
    }
}

/// Shuffle by seed, then pack greedily in order; every utterance appears in
/// exactly one batch and each batch's element total stays within the bin.
pub fn make_batches(
    manifest: &[BatchItem],
    max_batch_bin: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    for item in manifest {
        if item.elements() > max_batch_bin {
            return Err(Error::Data(format!(
                "utterance {:?} has {} elements, exceeding the batch bin of {max_batch_bin}",
                item.id,
                item.elements()
            )));
        }
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);

    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0usize;
    for idx in order {
        let need = manifest[idx].elements();
        if used + need > max_batch_bin && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(idx);
        used += need;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// One training utterance. Phones and alignment are absent in speech-only
/// corpora.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub spec: Spectrogram,
    pub phones: Option<PhonemeSequence>,
    pub alignment: Option<AlignmentMap>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

/// One manifest line: `{"id", "feature_path", "alignment_path"}`, the
/// alignment being optional for speech-only corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    #[serde(default)]
    pub alignment_path: Option<String>,
}

/// Render manifest entries back to the JSON-lines format.
pub fn serialize_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
        .collect()
}

/// Parse a JSON-lines manifest without touching the referenced files.
pub fn parse_manifest_str(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("manifest line {}: {e}", lineno + 1)))?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::Data("empty manifest".into()));
    }
    Ok(entries)
}

impl Dataset {
    /// Load a JSON-lines manifest: one `{id, feature_path, alignment_path}`
    /// object per line, paths resolved relative to the manifest location.
    pub fn load(
        manifest_path: impl AsRef<Path>,
        vocab: &PhoneVocab,
        hop_samples: usize,
        sample_rate_hz: u32,
    ) -> Result<Dataset> {
        let manifest_path = manifest_path.as_ref();
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));

        let mut utterances = Vec::new();
        for entry in parse_manifest_str(&text)? {
            let spec = read_features(base.join(&entry.feature_path), hop_samples, sample_rate_hz)?;
            let (phones, alignment) = match &entry.alignment_path {
                Some(p) => {
                    let (phones, map) =
                        parse_alignment(base.join(p), hop_samples, sample_rate_hz, vocab)?;
                    let map = map.clamp_to(spec.num_frames())?;
                    if map.num_frames() < spec.num_frames() {
                        return Err(Error::Data(format!(
                            "utterance {:?}: alignment covers {} of {} frames",
                            entry.id,
                            map.num_frames(),
                            spec.num_frames()
                        )));
                    }
                    (Some(phones), Some(map))
                }
                None => (None, None),
            };
            utterances.push(Utterance {
                id: entry.id,
                spec,
                phones,
                alignment,
            });
        }
        Ok(Dataset { utterances })
    }

    pub fn batch_items(&self) -> Vec<BatchItem> {
        self.utterances
            .iter()
            .map(|u| BatchItem {
                id: u.id.clone(),
                frames: u.spec.num_frames(),
                phones: u.phones.as_ref().map_or(0, |p| p.len()),
            })
            .collect()
    }

    /// (phones, durations) pairs for building duration statistics.
    pub fn duration_pairs(&self) -> Vec<(&PhonemeSequence, crate::alignment::DurationSet)> {
        self.utterances
            .iter()
            .filter_map(|u| match (&u.phones, &u.alignment) {
                (Some(p), Some(a)) => Some((
                    p,
                    crate::alignment::phoneme_durations(
                        a,
                        u.spec.hop_samples,
                        u.spec.sample_rate_hz,
                    ),
                )),
                _ => None,
            })
            .collect()
    }
}

/// Per-step results surfaced to the log.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    /// Full objective value (both branches).
    pub loss: f64,
    /// Masked mean absolute error of the refined branch, independent of the
    /// configured loss kind. This is the quantity early stopping watches.
    pub refined_l1: f64,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub step: u64,
    rng: SplitMix64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let model = Model::new(model_cfg, train_cfg.seed)?;
        let rng = SplitMix64::new(train_cfg.seed ^ 0x5EED_5EED_5EED_5EED);
        Ok(Trainer {
            model,
            cfg: train_cfg,
            step: 0,
            rng,
        })
    }

    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    /// Run one optimization step over a batch of utterance indices.
    pub fn train_step(&mut self, data: &Dataset, batch: &[usize]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let step = self.step + 1;
        self.model.store.zero_grads();

        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        let mut refined_l1_total = 0.0;
        for &idx in batch {
            let utt = data
                .utterances
                .get(idx)
                .ok_or_else(|| Error::Data(format!("batch references utterance {idx}")))?;
            let t = utt.spec.num_frames();

            let (plan, segments, phone_ids) = match self.cfg.mask_mode {
                MaskMode::SpeechText { ratio } => {
                    let alignment = utt.alignment.as_ref().ok_or_else(|| {
                        Error::Data(format!(
                            "utterance {:?} lacks an alignment required by speech-text masking",
                            utt.id
                        ))
                    })?;
                    let phones = utt.phones.as_ref().expect("alignment implies phones");
                    let plan = plan_phoneme_span_mask_with(
                        alignment,
                        ratio,
                        self.cfg.phoneme_span_max,
                        self.rng.next_u64(),
                    )?;
                    let seg = frame_segment_indices(alignment, t)?;
                    (plan, Some(seg), phones.ids().to_vec())
                }
                MaskMode::SpeechOnly { ratio } => {
                    let plan = plan_frame_span_mask_with(
                        t,
                        ratio,
                        self.cfg.frame_span_max,
                        self.rng.next_u64(),
                    )?;
                    (plan, None, Vec::new())
                }
            };
            if plan.is_empty() {
                return Err(Error::Data(format!(
                    "mask ratio {} produced an empty plan for utterance {:?}",
                    self.cfg.mask_mode.ratio(),
                    utt.id
                )));
            }

            let masked_rows = plan.frame_flags(t)?;
            let inputs = ModelInputs {
                frames: utt.spec.data(),
                num_frames: t,
                masked_rows: &masked_rows,
                frame_segments: segments.as_deref(),
                phone_ids: &phone_ids,
            };
            let fwd = self
                .model
                .forward(&mut tape, &inputs, Mode::Train, &mut self.rng)
                .map_err(|e| match e {
                    // Keep the category; add the failing step for diagnosis.
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("step {step}, utterance {:?}: {msg}", utt.id))
                    }
                    other => other,
                })?;
            let target = tape.constant(vec![t, self.model.cfg.n_mels], utt.spec.data().to_vec())?;
            let loss = self
                .model
                .masked_recon_loss(&mut tape, &fwd, target, &plan)?;
            losses.push(loss);

            refined_l1_total += masked_mean_abs(
                tape.value(fwd.refined),
                utt.spec.data(),
                &masked_rows,
                self.model.cfg.n_mels,
            );
        }

        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let total = tape.scale(total, 1.0 / batch.len() as f64)?;
        let loss_value = tape.value(total)[0];
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }

        tape.backward(total)?;
        tape.accumulate_param_grads(&mut self.model.store)?;
        if let Some(max_norm) = self.cfg.grad_clip {
            self.model.store.clip_grad_norm(max_norm);
        }
        let lr = noam_lr(
            step,
            self.cfg.base_lr,
            self.model.cfg.d_model,
            self.cfg.warmup_steps,
        )?;
        adam_step(&mut self.model.store, lr, &self.cfg, step)?;
        self.step = step;

        Ok(StepStats {
            step,
            lr,
            loss: loss_value,
            refined_l1: refined_l1_total / batch.len() as f64,
        })
    }

    /// Run up to `cfg.max_steps`, calling `on_step` after each step.
    /// Batches cycle over epochs reshuffled from per-epoch derived seeds, so
    /// a resumed trainer replays the identical schedule.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&StepStats) -> Result<()>,
    ) -> Result<()> {
        let mut schedule = BatchSchedule::new(data, self.cfg.max_batch_bin, self.cfg.seed)?;
        schedule.skip(self.step)?;
        while self.step < self.cfg.max_steps {
            let batch = schedule.next_batch()?;
            let stats = self.train_step(data, &batch)?;
            on_step(&stats)?;
            if let Some(threshold) = self.cfg.stop_refined_l1 {
                if stats.refined_l1 < threshold {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Deterministic cycle of epoch batch lists. Each epoch reshuffles with a
/// seed derived from (base seed, epoch), so any step's batch can be
/// reconstructed without replaying optimizer state.
pub struct BatchSchedule {
    items: Vec<BatchItem>,
    max_bin: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    cursor: usize,
}

impl BatchSchedule {
    pub fn new(data: &Dataset, max_bin: usize, seed: u64) -> Result<Self> {
        let items = data.batch_items();
        let batches = make_batches(&items, max_bin, derive_epoch_seed(seed, 0))?;
        Ok(BatchSchedule {
            items,
            max_bin,
            seed,
            epoch: 0,
            batches,
            cursor: 0,
        })
    }

    fn advance_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        self.batches = make_batches(
            &self.items,
            self.max_bin,
            derive_epoch_seed(self.seed, self.epoch),
        )?;
        self.cursor = 0;
        Ok(())
    }

    pub fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.cursor >= self.batches.len() {
            self.advance_epoch()?;
        }
        let batch = self.batches[self.cursor].clone();
        self.cursor += 1;
        Ok(batch)
    }

    /// Fast-forward past the first `n` batches (resume support).
    pub fn skip(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.cursor >= self.batches.len() {
                self.advance_epoch()?;
            }
            self.cursor += 1;
        }
        Ok(())
    }
}

fn derive_epoch_seed(seed: u64, epoch: u64) -> u64 {
    SplitMix64::derive(seed, epoch).state()
}

fn masked_mean_abs(pred: &[f64], target: &[f64], rows: &[bool], n_mels: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &masked) in rows.iter().enumerate() {
        if masked {
            for j in 0..n_mels {
                total += (pred[i * n_mels + j] - target[i * n_mels + j]).abs();
            }
            count += n_mels;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

// ── checkpointing ─────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    rng_state: u64,
    tensors: Vec<TensorMeta>,
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub train_cfg: TrainConfig,
    pub step: u64,
    pub rng_state: u64,
}

impl LoadedCheckpoint {
    pub fn into_trainer(self) -> Trainer {
        Trainer {
            model: self.model,
            cfg: self.train_cfg,
            step: self.step,
            rng: SplitMix64::from_state(self.rng_state),
        }
    }
}

/// Serialize model + optimizer state: magic, version, JSON header, then the
/// little-endian f64 blob holding value/m/v per tensor in header order.
pub fn encode_checkpoint(
    model: &Model,
    train_cfg: &TrainConfig,
    step: u64,
    rng_state: u64,
) -> Vec<u8> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.cfg.clone(),
        train: train_cfg.clone(),
        step,
        rng_state,
        tensors: model
            .store
            .iter()
            .map(|(name, p)| TensorMeta {
                name: name.to_string(),
                shape: p.value.shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, p) in model.store.iter() {
        for buf in [&p.value.data, &p.adam_m, &p.adam_v] {
            for &v in buf.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Decode and validate a checkpoint buffer. The header is validated — magic,
/// version, config sanity, tensor inventory, exact blob length — before any
/// tensor data is interpreted.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let bad = |msg: String| Error::Data(format!("checkpoint: {msg}"));
    if bytes.len() < 12 {
        return Err(bad("truncated prelude".into()));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let blob_start = 12usize
        .checked_add(header_len)
        .ok_or_else(|| bad("header overflow".into()))?;
    if blob_start > bytes.len() {
        return Err(bad("header extends past end".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..blob_start])
        .map_err(|e| bad(format!("header parse: {e}")))?;
    header.model.validate()?;
    header.train.validate()?;

    // The header's tensor list must match the config-derived inventory, and
    // the byte length must match exactly, before any tensor allocation.
    let inventory = header.model.parameter_inventory();
    if inventory.len() != header.tensors.len() {
        return Err(bad(format!(
            "tensor inventory mismatch: config implies {}, header lists {}",
            inventory.len(),
            header.tensors.len()
        )));
    }
    let mut total: usize = 0;
    for (meta, (name, shape, _)) in header.tensors.iter().zip(&inventory) {
        if &meta.name != name || &meta.shape != shape {
            return Err(bad(format!(
                "tensor {:?} {:?} does not match the config's {:?} {:?}",
                meta.name, meta.shape, name, shape
            )));
        }
        let mut numel = 1usize;
        for &d in &meta.shape {
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| bad("shape overflow".into()))?;
        }
        total = total
            .checked_add(numel)
            .ok_or_else(|| bad("size overflow".into()))?;
    }
    let expect = total
        .checked_mul(3)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(blob_start))
        .ok_or_else(|| bad("size overflow".into()))?;
    if bytes.len() != expect {
        return Err(bad(format!("expected {expect} bytes, got {}", bytes.len())));
    }

    let mut model = Model::new(header.model.clone(), 0)?;

    let mut at = blob_start;
    let mut read_into = |buf: &mut [f64], bytes: &[u8]| {
        for v in buf.iter_mut() {
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            at += 8;
        }
    };
    for name in model.store.names().to_vec() {
        let p = model.store.get_mut(&name).expect("validated above");
        read_into(&mut p.value.data, bytes);
        read_into(&mut p.adam_m, bytes);
        read_into(&mut p.adam_v, bytes);
    }
    for (name, p) in model.store.iter() {
        if let Some(i) = p.value.data.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite value in tensor {name:?} at {i}")));
        }
    }

    Ok(LoadedCheckpoint {
        model,
        train_cfg: header.train,
        step: header.step,
        rng_state: header.rng_state,
    })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    train_cfg: &TrainConfig,
    step: u64,
    rng_state: u64,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, train_cfg, step, rng_state);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

// ── file-producing train entry point ──────────────────────────────────

pub struct TrainOutputs {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub final_step: u64,
    pub final_loss: f64,
    pub final_refined_l1: f64,
}

/// Train to `max_steps` (or early stop), writing `loss.csv` and
/// `checkpoint.bin` under `out_dir`.
pub fn train(
    data: &Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutputs> {
    let trainer = Trainer::new(model_cfg, train_cfg)?;
    run_to_files(trainer, data, out_dir, false)
}

/// Continue a checkpointed run, appending to the existing loss log.
/// `max_steps` extends the run past the checkpointed budget when given.
pub fn resume(
    checkpoint_path: impl AsRef<Path>,
    data: &Dataset,
    out_dir: impl AsRef<Path>,
    max_steps: Option<u64>,
) -> Result<TrainOutputs> {
    let mut trainer = load_checkpoint(checkpoint_path)?.into_trainer();
    if let Some(steps) = max_steps {
        trainer.cfg.max_steps = steps;
    }
    if trainer.step >= trainer.cfg.max_steps {
        return Err(Error::Config(format!(
            "checkpoint is already at step {} of {}; raise max_steps to continue",
            trainer.step, trainer.cfg.max_steps
        )));
    }
    run_to_files(trainer, data, out_dir, true)
}

fn run_to_files(
    mut trainer: Trainer,
    data: &Dataset,
    out_dir: impl AsRef<Path>,
    append_log: bool,
) -> Result<TrainOutputs> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let loss_log_path = out_dir.join("loss.csv");
    let checkpoint_path = out_dir.join("checkpoint.bin");

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(append_log)
        .write(true)
        .truncate(!append_log)
        .open(&loss_log_path)
        .map_err(|e| Error::io(&loss_log_path, e))?;
    let log_is_empty = log
        .metadata()
        .map_err(|e| Error::io(&loss_log_path, e))?
        .len()
        == 0;
    if !append_log || log_is_empty {
        writeln!(log, "step,lr,loss").map_err(|e| Error::io(&loss_log_path, e))?;
    }

    let interval = trainer.cfg.checkpoint_interval;
    let mut schedule = BatchSchedule::new(data, trainer.cfg.max_batch_bin, trainer.cfg.seed)?;
    schedule.skip(trainer.step)?;

    let mut last: Option<StepStats> = None;
    while trainer.step < trainer.cfg.max_steps {
        let batch = schedule.next_batch()?;
        let stats = trainer.train_step(data, &batch)?;
        writeln!(log, "{},{},{}", stats.step, stats.lr, stats.loss)
            .map_err(|e| Error::io(&loss_log_path, e))?;
        if interval > 0 && stats.step % interval == 0 {
            save_checkpoint(
                &checkpoint_path,
                &trainer.model,
                &trainer.cfg,
                trainer.step,
                trainer.rng_state(),
            )?;
        }
        let stop = trainer
            .cfg
            .stop_refined_l1
            .is_some_and(|threshold| stats.refined_l1 < threshold);
        last = Some(stats);
        if stop {
            break;
        }
    }
    log.flush().map_err(|e| Error::io(&loss_log_path, e))?;

    save_checkpoint(
        &checkpoint_path,
        &trainer.model,
        &trainer.cfg,
        trainer.step,
        trainer.rng_state(),
    )?;
    let last = last.ok_or_else(|| Error::Data("training performed no steps".into()))?;
    Ok(TrainOutputs {
        checkpoint_path,
        loss_log_path,
        final_step: last.step,
        final_loss: last.loss,
        final_refined_l1: last.refined_l1,
    })
}

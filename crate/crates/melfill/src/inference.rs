//! The two downstream pipelines: text-based speech editing and prompt-based
//! synthesis.
//!
//! Editing regenerates only the modified phones: the differing region is
//! found by longest common prefix/suffix over phone ids, its duration comes
//! from a per-phone duration table rate-adjusted against the original
//! speech, the corresponding number of mask frames is spliced between the
//! untouched context frames, and one forward pass fills them in. Frames
//! outside the inserted region are copied from the original bit-exactly.
//!
//! Prompt-based synthesis is the same construction with the prompt utterance
//! as the context prefix and the whole target as the inserted region;
//! segment indices simply continue across the boundary.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    frame_segment_indices, phoneme_durations, AlignmentMap, DurationSet, PhoneVocab,
    PhonemeSequence,
};
use crate::autodiff::Tape;
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelInputs};
use crate::rng::SplitMix64;
use crate::round_half_up;

/// Per-phone mean durations in seconds, with an optional global fallback for
/// phones missing from the table.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationStats {
    per_phone: Vec<Option<f64>>,
    fallback: Option<f64>,
}

impl DurationStats {
    /// Mean interval length per phone id over a corpus.
    pub fn from_corpus<'a>(
        pairs: impl IntoIterator<Item = (&'a PhonemeSequence, DurationSet)>,
        vocab_size: usize,
    ) -> Result<Self> {
        let mut totals = vec![0.0f64; vocab_size];
        let mut counts = vec![0usize; vocab_size];
        let mut grand_total = 0.0;
        let mut grand_count = 0usize;
        for (phones, durations) in pairs {
            if phones.len() != durations.len() {
                return Err(Error::Data(format!(
                    "{} phones vs {} durations",
                    phones.len(),
                    durations.len()
                )));
            }
            for (&id, &d) in phones.ids().iter().zip(durations.values()) {
                totals[id as usize] += d;
                counts[id as usize] += 1;
                grand_total += d;
                grand_count += 1;
            }
        }
        Ok(DurationStats {
            per_phone: totals
                .iter()
                .zip(&counts)
                .map(|(&t, &c)| if c > 0 { Some(t / c as f64) } else { None })
                .collect(),
            fallback: if grand_count > 0 {
                Some(grand_total / grand_count as f64)
            } else {
                None
            },
        })
    }

    /// Same duration for every phone.
    pub fn constant(seconds: f64, vocab_size: usize) -> Self {
        DurationStats {
            per_phone: vec![Some(seconds); vocab_size],
            fallback: Some(seconds),
        }
    }

    /// Parse a `symbol<TAB>seconds` table (the external-predictor hook).
    pub fn from_tsv_str(text: &str, vocab: &PhoneVocab) -> Result<Self> {
        let mut per_phone = vec![None; vocab.len()];
        let mut seen = false;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let (sym, secs) = match (cols.next(), cols.next(), cols.next()) {
                (Some(s), Some(v), None) => (s.trim(), v),
                _ => {
                    return Err(Error::Data(format!(
                        "duration table line {}: expected symbol<TAB>seconds",
                        lineno + 1
                    )))
                }
            };
            let id = vocab
                .id(sym)
                .ok_or_else(|| Error::Data(format!("unknown phone symbol {sym:?}")))?;
            let secs: f64 = secs.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "duration table line {}: bad value {secs:?}",
                    lineno + 1
                ))
            })?;
            if !secs.is_finite() || secs < 0.0 {
                return Err(Error::Data(format!("duration {secs} out of range")));
            }
            per_phone[id as usize] = Some(secs);
            seen = true;
        }
        if !seen {
            return Err(Error::Data("empty duration table".into()));
        }
        Ok(DurationStats {
            per_phone,
            fallback: None,
        })
    }

    pub fn from_tsv(path: impl AsRef<Path>, vocab: &PhoneVocab) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv_str(&text, vocab)
    }

    /// Use `seconds` for phones the table does not cover.
    pub fn with_fallback(mut self, seconds: f64) -> Result<Self> {
        if !seconds.is_finite() || seconds < 0.0 {
            return Err(Error::Config(format!(
                "fallback duration {seconds} out of range"
            )));
        }
        self.fallback = Some(seconds);
        Ok(self)
    }

    /// Render back to the TSV format `from_tsv` accepts.
    pub fn to_tsv(&self, vocab: &PhoneVocab) -> String {
        let mut out = String::new();
        for (id, mean) in self.per_phone.iter().enumerate() {
            if let Some(m) = mean {
                if let Some(sym) = vocab.symbol(id as u32) {
                    out.push_str(&format!("{sym}\t{m}\n"));
                }
            }
        }
        out
    }

    fn lookup(&self, id: u32) -> Result<f64> {
        self.per_phone
            .get(id as usize)
            .copied()
            .flatten()
            .or(self.fallback)
            .ok_or_else(|| {
                Error::Data(format!(
                    "no duration statistic for phone id {id} and no fallback configured"
                ))
            })
    }
}

/// Predicted duration per phone: the table value, or the global fallback.
pub fn predict_durations(phones: &PhonemeSequence, stats: &DurationStats) -> Result<DurationSet> {
    let values: Vec<f64> = phones
        .ids()
        .iter()
        .map(|&id| stats.lookup(id))
        .collect::<Result<_>>()?;
    DurationSet::new(values)
}

/// Rate-adjust predicted durations by the mean ratio between the original
/// speech durations and the predictions for the same phones.
pub fn adjust_durations(
    predicted: &DurationSet,
    original_actual: &DurationSet,
    original_predicted: &DurationSet,
) -> Result<DurationSet> {
    if original_actual.len() != original_predicted.len() {
        return Err(Error::Data(format!(
            "{} actual vs {} predicted original durations",
            original_actual.len(),
            original_predicted.len()
        )));
    }
    if original_actual.is_empty() {
        return Err(Error::Data(
            "cannot estimate speaking rate from zero phones".into(),
        ));
    }
    let mut ratio_sum = 0.0;
    for (&actual, &pred) in original_actual
        .values()
        .iter()
        .zip(original_predicted.values())
    {
        if pred <= 0.0 {
            return Err(Error::Data(format!(
                "predicted original duration {pred} must be positive"
            )));
        }
        ratio_sum += actual / pred;
    }
    let rate = ratio_sum / original_actual.len() as f64;
    DurationSet::new(predicted.values().iter().map(|d| d * rate).collect())
}

/// Number of mask frames covering a duration set: round(Σd · sr / h).
pub fn mask_frame_count(durations: &DurationSet, sample_rate_hz: u32, hop_samples: usize) -> usize {
    assert!(hop_samples > 0, "hop must be positive");
    round_half_up(durations.total_s() * sample_rate_hz as f64 / hop_samples as f64)
}

/// Frames allocated to each phone: independent rounding, with the total
/// forced to `n` by adjusting from the last phone backwards.
fn per_phone_frames(
    durations: &DurationSet,
    sample_rate_hz: u32,
    hop_samples: usize,
    n: usize,
) -> Vec<usize> {
    let fps = sample_rate_hz as f64 / hop_samples as f64;
    let mut counts: Vec<usize> = durations
        .values()
        .iter()
        .map(|d| round_half_up(d * fps))
        .collect();
    let mut total: usize = counts.iter().sum();
    // Remainder goes to the last phone; if that would push a count negative,
    // keep borrowing from earlier phones.
    let mut i = counts.len();
    while total > n && i > 0 {
        i -= 1;
        let cut = (total - n).min(counts[i]);
        counts[i] -= cut;
        total -= cut;
    }
    if total < n {
        if let Some(last) = counts.last_mut() {
            *last += n - total;
        }
    }
    counts
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub original: Spectrogram,
    pub original_phones: PhonemeSequence,
    pub original_alignment: AlignmentMap,
    pub modified_phones: PhonemeSequence,
    /// Explicit region as (prefix phones kept, suffix phones kept). Required
    /// when the two phone sequences are identical (the reconstruction
    /// protocol); otherwise the region is the diff.
    pub region_override: Option<(usize, usize)>,
}

/// Splice bookkeeping, serialized beside edited features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRegion {
    pub prefix_frames: usize,
    pub inserted_frames: usize,
    pub suffix_frames: usize,
    /// Range of regenerated phones within the modified sequence.
    pub modified_phoneme_start: usize,
    pub modified_phoneme_end: usize,
}

#[derive(Debug, Clone)]
pub struct EditResult {
    pub spliced: Spectrogram,
    pub region: EditRegion,
}

/// Longest common prefix and suffix of two id sequences, maximizing the
/// prefix first; ties therefore resolve to the shortest modified region.
fn diff_region(a: &[u32], b: &[u32]) -> (usize, usize) {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let max_suffix = a.len().min(b.len()) - prefix;
    let suffix = a
        .iter()
        .rev()
        .zip(b.iter().rev())
        .take(max_suffix)
        .take_while(|(x, y)| x == y)
        .count();
    (prefix, suffix)
}

/// The phone region selected by the identity-reconstruction protocol: one
/// third of the phones, centered.
pub fn middle_third_region(num_phones: usize) -> (usize, usize) {
    let len = round_half_up(num_phones as f64 / 3.0).clamp(1, num_phones);
    let prefix = (num_phones - len) / 2;
    let suffix = num_phones - prefix - len;
    (prefix, suffix)
}

pub fn edit(req: &EditRequest, model: &Model, stats: &DurationStats) -> Result<EditResult> {
    let x_orig = &req.original_phones;
    let x_new = &req.modified_phones;
    if x_orig.is_empty() || x_new.is_empty() {
        return Err(Error::Data("both phone sequences must be non-empty".into()));
    }
    let alignment = req.original_alignment.clamp_to(req.original.num_frames())?;
    if alignment.num_frames() < req.original.num_frames() {
        return Err(Error::Data(format!(
            "alignment covers {} of {} frames",
            alignment.num_frames(),
            req.original.num_frames()
        )));
    }
    if alignment.num_phonemes() != x_orig.len() {
        return Err(Error::Data(format!(
            "alignment has {} phones, sequence has {}",
            alignment.num_phonemes(),
            x_orig.len()
        )));
    }

    let (prefix, suffix) = match req.region_override {
        Some((p, s)) => {
            if p + s > x_orig.len() || p + s > x_new.len() {
                return Err(Error::Data(format!(
                    "region override ({p}, {s}) exceeds the phone sequences"
                )));
            }
            (p, s)
        }
        None => {
            let (p, s) = diff_region(x_orig.ids(), x_new.ids());
            if p + s == x_orig.len() && p + s == x_new.len() {
                return Err(Error::Data(
                    "phone sequences are identical; supply a region override to reconstruct".into(),
                ));
            }
            (p, s)
        }
    };
    let region_new = prefix..x_new.len() - suffix;
    let region_orig = prefix..x_orig.len() - suffix;

    // Durations for the new region, rate-adjusted over all original phones.
    let d_actual = phoneme_durations(
        &alignment,
        req.original.hop_samples,
        req.original.sample_rate_hz,
    );
    let d_pred_orig = predict_durations(x_orig, stats)?;
    let region_phones = x_new.slice(region_new.clone());
    let (n, counts) = if region_phones.is_empty() {
        (0, Vec::new())
    } else {
        let d_pred_region = predict_durations(&region_phones, stats)?;
        let adjusted = adjust_durations(&d_pred_region, &d_actual, &d_pred_orig)?;
        let n = mask_frame_count(
            &adjusted,
            req.original.sample_rate_hz,
            req.original.hop_samples,
        );
        let counts = per_phone_frames(
            &adjusted,
            req.original.sample_rate_hz,
            req.original.hop_samples,
            n,
        );
        (n, counts)
    };

    splice_and_reconstruct(
        &req.original,
        &alignment,
        x_new,
        region_orig,
        region_new,
        n,
        &counts,
        model,
    )
}

#[allow(clippy::too_many_arguments)]
fn splice_and_reconstruct(
    original: &Spectrogram,
    alignment: &AlignmentMap,
    x_new: &PhonemeSequence,
    region_orig: Range<usize>,
    region_new: Range<usize>,
    n: usize,
    per_phone: &[usize],
    model: &Model,
) -> Result<EditResult> {
    let n_mels = original.n_mels();
    let t_orig = original.num_frames();
    let intervals = alignment.intervals();

    let region_start_frame = if region_orig.start < intervals.len() {
        intervals[region_orig.start].start_frame
    } else {
        t_orig
    };
    let region_end_frame = if region_orig.end > region_orig.start {
        intervals[region_orig.end - 1].end_frame
    } else {
        region_start_frame
    };

    let prefix_frames = region_start_frame;
    let suffix_frames = t_orig - region_end_frame;
    let t_new = prefix_frames + n + suffix_frames;
    if t_new == 0 {
        return Err(Error::Data("edit would produce an empty utterance".into()));
    }

    // Input frames: prefix context ∥ n placeholder rows ∥ suffix context.
    let mut frames = Vec::with_capacity(t_new * n_mels);
    frames.extend_from_slice(&original.data()[..prefix_frames * n_mels]);
    frames.extend(std::iter::repeat_n(0.0, n * n_mels));
    frames.extend_from_slice(&original.data()[region_end_frame * n_mels..]);
    let mut masked = vec![false; t_new];
    for flag in masked.iter_mut().skip(prefix_frames).take(n) {
        *flag = true;
    }

    // Segment indices: prefix keeps its positions, inserted frames carry
    // their phone's position in the modified sequence, suffix positions
    // shift by the length difference.
    let orig_segments = frame_segment_indices(alignment, t_orig)?;
    let shift = x_new.len() as isize - alignment.num_phonemes() as isize;
    let mut segments = Vec::with_capacity(t_new);
    segments.extend_from_slice(&orig_segments[..prefix_frames]);
    for (i, &count) in per_phone.iter().enumerate() {
        let position = region_new.start + i;
        segments.extend(std::iter::repeat_n(position, count));
    }
    for &s in &orig_segments[region_end_frame..] {
        let shifted = s as isize + shift;
        debug_assert!(shifted >= 0);
        segments.push(shifted as usize);
    }
    debug_assert_eq!(segments.len(), t_new);

    if x_new.len() > model.cfg.max_segments {
        return Err(Error::Data(format!(
            "{} phones exceed the {} segment limit",
            x_new.len(),
            model.cfg.max_segments
        )));
    }

    let mut tape = Tape::new();
    let mut rng = SplitMix64::new(0); // eval mode draws nothing
    let fwd = model.forward(
        &mut tape,
        &ModelInputs {
            frames: &frames,
            num_frames: t_new,
            masked_rows: &masked,
            frame_segments: Some(&segments),
            phone_ids: x_new.ids(),
        },
        Mode::Eval,
        &mut rng,
    )?;
    let refined = tape.value(fwd.refined);

    // Splice: context frames come from the original, the model fills only
    // the inserted region.
    let mut out = Vec::with_capacity(t_new * n_mels);
    out.extend_from_slice(&original.data()[..prefix_frames * n_mels]);
    out.extend_from_slice(&refined[prefix_frames * n_mels..(prefix_frames + n) * n_mels]);
    out.extend_from_slice(&original.data()[region_end_frame * n_mels..]);

    Ok(EditResult {
        spliced: Spectrogram::from_model_output(
            out,
            n_mels,
            original.hop_samples,
            original.sample_rate_hz,
        )?,
        region: EditRegion {
            prefix_frames,
            inserted_frames: n,
            suffix_frames,
            modified_phoneme_start: region_new.start,
            modified_phoneme_end: region_new.end,
        },
    })
}

/// Synthesize the target phones in the prompt's voice: the prompt utterance
/// is the context, the target occupies `n` mask frames appended after it,
/// and the output is exactly those `n` refined rows.
pub fn prompt_tts(
    prompt: &Spectrogram,
    prompt_phones: &PhonemeSequence,
    prompt_alignment: &AlignmentMap,
    target_phones: &PhonemeSequence,
    model: &Model,
    stats: &DurationStats,
) -> Result<Spectrogram> {
    if target_phones.is_empty() {
        return Err(Error::Data("target phone sequence is empty".into()));
    }
    if prompt_phones.is_empty() {
        return Err(Error::Data("prompt phone sequence is empty".into()));
    }
    let alignment = prompt_alignment.clamp_to(prompt.num_frames())?;
    if alignment.num_frames() < prompt.num_frames() {
        return Err(Error::Data(format!(
            "prompt alignment covers {} of {} frames",
            alignment.num_frames(),
            prompt.num_frames()
        )));
    }
    if alignment.num_phonemes() != prompt_phones.len() {
        return Err(Error::Data(format!(
            "prompt alignment has {} phones, sequence has {}",
            alignment.num_phonemes(),
            prompt_phones.len()
        )));
    }

    let d_actual = phoneme_durations(&alignment, prompt.hop_samples, prompt.sample_rate_hz);
    let d_pred_prompt = predict_durations(prompt_phones, stats)?;
    let d_pred_target = predict_durations(target_phones, stats)?;
    let adjusted = adjust_durations(&d_pred_target, &d_actual, &d_pred_prompt)?;
    let n = mask_frame_count(&adjusted, prompt.sample_rate_hz, prompt.hop_samples);
    if n == 0 {
        return Err(Error::Data("target durations round to zero frames".into()));
    }
    let counts = per_phone_frames(&adjusted, prompt.sample_rate_hz, prompt.hop_samples, n);

    let joint_phones = prompt_phones.concat(target_phones)?;
    let result = splice_and_reconstruct(
        prompt,
        &alignment,
        &joint_phones,
        prompt_phones.len()..prompt_phones.len(), // pure insertion at the end
        prompt_phones.len()..joint_phones.len(),
        n,
        &counts,
        model,
    )?;

    // Keep only the synthesized rows.
    let n_mels = prompt.n_mels();
    let start = result.region.prefix_frames;
    let data = result.spliced.data()[start * n_mels..(start + n) * n_mels].to_vec();
    Spectrogram::from_model_output(data, n_mels, prompt.hop_samples, prompt.sample_rate_hz)
}

/// Read a whitespace-separated phone file into a sequence.
pub fn read_phones_file(path: impl AsRef<Path>, vocab: &PhoneVocab) -> Result<PhonemeSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let symbols: Vec<&str> = text.split_whitespace().collect();
    if symbols.is_empty() {
        return Err(Error::Data(format!("no phones in {}", path.display())));
    }
    PhonemeSequence::from_symbols(&symbols, vocab)
}

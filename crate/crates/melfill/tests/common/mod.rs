//! Shared fixtures for the integration suites: a full-size phone vocabulary,
//! synthetic utterances with phone-determined spectral patterns, and a
//! finite-difference oracle kept independent of the library's backward pass.

use melfill::alignment::{AlignmentMap, Interval, PhoneVocab, PhonemeSequence};
use melfill::dsp::Spectrogram;
use melfill::model::ModelConfig;
use melfill::training::{Dataset, Utterance};

pub const VOCAB_73: &str = include_str!("../../assets/phones73.txt");

#[allow(dead_code)]
pub fn vocab73() -> PhoneVocab {
    let v = PhoneVocab::parse(VOCAB_73).expect("asset vocabulary parses");
    assert_eq!(v.len(), 73);
    v
}

/// Frames occupied by a phone id: fixed per id, so corpus duration means are
/// exact and reconstruction lengths match the original bit for bit.
#[allow(dead_code)]
pub fn frames_for_phone(id: u32) -> usize {
    6 + (id as usize % 5) * 2
}

/// Phone-dependent spectral template with a mild within-phone ramp.
fn pattern(id: u32, mel: usize, offset: usize, dur: usize) -> f64 {
    let a = ((mel as f64 + 1.0) * (id as f64 + 2.0) * 0.37).sin() * 0.5;
    let b = (offset as f64 / dur as f64 * std::f64::consts::PI + mel as f64 * 0.11).cos() * 0.1;
    a + b
}

/// Build one synthetic utterance from a phone id sequence with explicit
/// per-phone frame counts.
#[allow(dead_code)]
pub fn synth_utterance_with_durations(
    ids: &[u32],
    durations: &[usize],
    n_mels: usize,
) -> (Spectrogram, PhonemeSequence, AlignmentMap) {
    assert_eq!(ids.len(), durations.len());
    let mut intervals = Vec::new();
    let mut data = Vec::new();
    let mut start = 0usize;
    for (pos, (&id, &dur)) in ids.iter().zip(durations).enumerate() {
        for offset in 0..dur {
            for mel in 0..n_mels {
                data.push(pattern(id, mel, offset, dur));
            }
        }
        intervals.push(Interval {
            phoneme_position: pos,
            start_frame: start,
            end_frame: start + dur,
        });
        start += dur;
    }
    let spec = Spectrogram::new(data, n_mels, 300, 24_000).expect("synthetic spectrogram");
    let symbols: Vec<String> = ids.iter().map(|id| format!("p{id}")).collect();
    let phones = PhonemeSequence::new(ids.to_vec(), symbols).expect("synthetic phones");
    let alignment = AlignmentMap::new(intervals).expect("synthetic alignment");
    (spec, phones, alignment)
}

/// Build one synthetic utterance with the standard per-id durations.
#[allow(dead_code)]
pub fn synth_utterance(ids: &[u32], n_mels: usize) -> (Spectrogram, PhonemeSequence, AlignmentMap) {
    let durations: Vec<usize> = ids.iter().map(|&id| frames_for_phone(id)).collect();
    synth_utterance_with_durations(ids, &durations, n_mels)
}

/// Two ~80-frame utterances sharing part of their phone inventory.
#[allow(dead_code)]
pub fn overfit_dataset(n_mels: usize) -> Dataset {
    let sequences: [&[u32]; 2] = [
        &[3, 11, 24, 7, 30, 15, 42, 8, 19, 55],
        &[5, 24, 13, 30, 9, 42, 21, 7, 36, 11],
    ];
    let utterances = sequences
        .iter()
        .enumerate()
        .map(|(i, ids)| {
            let (spec, phones, alignment) = synth_utterance(ids, n_mels);
            Utterance {
                id: format!("synthetic-{i}"),
                spec,
                phones: Some(phones),
                alignment: Some(alignment),
            }
        })
        .collect();
    Dataset { utterances }
}

/// Corpus for the ablation comparison: the same sentences at two speaking
/// rates. Content follows the within-phone fraction, so reconstructing a
/// masked span requires knowing where each phone's frames sit — information
/// the alignment embedding injects and absolute positions do not carry.
#[allow(dead_code)]
pub fn ablation_dataset(n_mels: usize) -> Dataset {
    let sentences: [&[u32]; 2] = [
        &[3, 11, 24, 7, 30, 15, 42, 8, 19, 55],
        &[5, 24, 13, 30, 9, 42, 21, 7, 36, 11],
    ];
    let mut utterances = Vec::new();
    for (i, ids) in sentences.iter().enumerate() {
        for (rate, name) in [(0usize, "slow"), (1, "fast")] {
            let durations: Vec<usize> = (0..ids.len())
                .map(|p| {
                    if rate == 0 {
                        6 + (p % 4) * 2 // 6, 8, 10, 12, …
                    } else {
                        12 - (p % 4) * 2 // 12, 10, 8, 6, …
                    }
                })
                .collect();
            let (spec, phones, alignment) = synth_utterance_with_durations(ids, &durations, n_mels);
            utterances.push(Utterance {
                id: format!("sentence-{i}-{name}"),
                spec,
                phones: Some(phones),
                alignment: Some(alignment),
            });
        }
    }
    Dataset { utterances }
}

/// The scaled-down model used by the overfit experiments.
#[allow(dead_code)]
pub fn overfit_model_cfg(n_mels: usize) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        encoder_kernel: 3,
        decoder_kernel: 7,
        postnet_layers: 3,
        postnet_channels: 32,
        postnet_kernel: 5,
        ffn_expansion: 2,
        max_segments: 500,
        phone_vocab: 73,
        n_mels,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Central finite differences of a scalar function.
#[allow(dead_code)]
pub fn finite_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

#[allow(dead_code)]
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

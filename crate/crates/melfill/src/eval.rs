//! Masked-region scoring and spectrogram images.
//!
//! Mel-cepstral distortion is computed from the log-mel rows directly: an
//! orthonormal DCT-II per frame, coefficients 1..=K (c₀ excluded, so a
//! frame-uniform level shift cancels), no time warping — the protocol always
//! compares frame-aligned regions, and the constant is 10·√2/ln 10.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

/// Cepstral order used throughout the evaluation protocol.
pub const DEFAULT_CEPSTRAL_ORDER: usize = 13;

/// dB conversion constant for cepstral Euclidean distances.
pub fn mcd_constant() -> f64 {
    10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdReport {
    pub mcd_db: f64,
    pub frames_scored: usize,
    pub region_start: usize,
    pub region_end: usize,
}

/// Orthonormal DCT-II of one row.
fn dct_row(row: &[f64], out: &mut [f64]) {
    let n = row.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (t, &x) in row.iter().enumerate() {
            acc +=
                x * (std::f64::consts::PI * k as f64 * (2 * t + 1) as f64 / (2 * n) as f64).cos();
        }
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        *o = acc * scale;
    }
}

/// Per-frame cepstra: coefficients 1..=order of the DCT-II of each log-mel
/// row (c₀ dropped). Returns a T×order matrix.
pub fn mel_cepstra(spec: &Spectrogram, order: usize) -> Result<Vec<f64>> {
    if order == 0 || order >= spec.n_mels() {
        return Err(Error::Config(format!(
            "cepstral order {order} out of range for {} mel bins",
            spec.n_mels()
        )));
    }
    let t = spec.num_frames();
    let mut full = vec![0.0; spec.n_mels()];
    let mut out = Vec::with_capacity(t * order);
    for ti in 0..t {
        dct_row(spec.row(ti), &mut full);
        out.extend_from_slice(&full[1..=order]);
    }
    Ok(out)
}

/// Mean cepstral distortion over a frame-aligned region, in dB.
pub fn mcd_masked_region(
    reference: &Spectrogram,
    hypothesis: &Spectrogram,
    region: Range<usize>,
    order: usize,
) -> Result<McdReport> {
    if reference.num_frames() != hypothesis.num_frames()
        || reference.n_mels() != hypothesis.n_mels()
    {
        return Err(Error::Shape(format!(
            "spectrograms disagree: {}×{} vs {}×{}",
            reference.num_frames(),
            reference.n_mels(),
            hypothesis.num_frames(),
            hypothesis.n_mels()
        )));
    }
    if region.is_empty() {
        return Err(Error::Data("empty scoring region".into()));
    }
    if region.end > reference.num_frames() {
        return Err(Error::Data(format!(
            "region {}..{} outside spectrogram of {} frames",
            region.start,
            region.end,
            reference.num_frames()
        )));
    }

    let ref_c = mel_cepstra(reference, order)?;
    let hyp_c = mel_cepstra(hypothesis, order)?;
    let mut total = 0.0;
    for t in region.clone() {
        let a = &ref_c[t * order..(t + 1) * order];
        let b = &hyp_c[t * order..(t + 1) * order];
        let dist: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        total += dist;
    }
    let frames_scored = region.len();
    Ok(McdReport {
        mcd_db: mcd_constant() * total / frames_scored as f64,
        frames_scored,
        region_start: region.start,
        region_end: region.end,
    })
}

/// Render a binary PGM (P5), width = frames, height = mel bins with bin 79 at
/// the top, linear min-max mapped to 0..255 (all zeros when the spectrogram
/// is constant).
pub fn encode_pgm(spec: &Spectrogram) -> Vec<u8> {
    let t = spec.num_frames();
    let h = spec.n_mels();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in spec.data() {
        min = min.min(v);
        max = max.max(v);
    }
    let span = max - min;

    let mut out = format!("P5\n{t} {h}\n255\n").into_bytes();
    out.reserve(t * h);
    for row in 0..h {
        let mel = h - 1 - row;
        for frame in 0..t {
            let v = spec.row(frame)[mel];
            let pixel = if span == 0.0 {
                0u8
            } else {
                ((v - min) / span * 255.0).round() as u8
            };
            out.push(pixel);
        }
    }
    out
}

pub fn plot_spectrogram(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(spec)).map_err(|e| Error::io(path, e))
}

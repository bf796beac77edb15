//! Log-mel spectrogram extraction.
//!
//! Framing: 50 ms frames, 12.5 ms hop, symmetric Hann window, power spectrum
//! via zero-padded FFT, triangular HTK-scale mel filterbank, natural log with
//! a fixed floor. Frame and hop lengths in samples are `round(seconds · sr)`
//! (half away from zero), so a 24 kHz signal hops by 300 samples and a
//! 22.05 kHz signal by 276.

mod cache;
mod fft;
mod wav;

pub use cache::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use fft::{fft_in_place, power_spectrum};
pub use wav::{load_wav, parse_wav_bytes, write_wav, Waveform, SUPPORTED_RATES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::round_half_up;

pub const LOG_FLOOR: f64 = 1e-10;

/// Analysis parameters. Defaults match the crate's reference configuration;
/// `n_fft = None` selects the smallest power of two covering one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub frame_length_s: f64,
    pub hop_s: f64,
    pub n_fft: Option<usize>,
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// Upper filterbank edge; `None` means Nyquist.
    pub fmax_hz: Option<f64>,
    pub log_floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig {
            frame_length_s: 0.050,
            hop_s: 0.0125,
            n_fft: None,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: None,
            log_floor: LOG_FLOOR,
        }
    }
}

impl AudioConfig {
    pub fn frame_samples(&self, sample_rate_hz: u32) -> usize {
        round_half_up(self.frame_length_s * sample_rate_hz as f64)
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        round_half_up(self.hop_s * sample_rate_hz as f64)
    }

    pub fn fft_size(&self, sample_rate_hz: u32) -> usize {
        match self.n_fft {
            Some(n) => n,
            None => self.frame_samples(sample_rate_hz).next_power_of_two(),
        }
    }

    pub fn fmax(&self, sample_rate_hz: u32) -> f64 {
        self.fmax_hz.unwrap_or(sample_rate_hz as f64 / 2.0)
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        if !(self.hop_s > 0.0 && self.frame_length_s > self.hop_s) {
            return Err(Error::Config(format!(
                "need frame_length_s > hop_s > 0, got {} and {}",
                self.frame_length_s, self.hop_s
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if self.log_floor < LOG_FLOOR {
            return Err(Error::Config(format!(
                "log_floor {} below the spectrogram floor {LOG_FLOOR}",
                self.log_floor
            )));
        }
        let frame = self.frame_samples(sample_rate_hz);
        let n_fft = self.fft_size(sample_rate_hz);
        if n_fft < frame {
            return Err(Error::Config(format!(
                "n_fft {n_fft} smaller than frame of {frame} samples"
            )));
        }
        if !n_fft.is_power_of_two() {
            return Err(Error::Config(format!(
                "n_fft {n_fft} is not a power of two"
            )));
        }
        let fmax = self.fmax(sample_rate_hz);
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < fmax && fmax <= sample_rate_hz as f64 / 2.0) {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax <= sr/2, got fmin {} fmax {fmax}",
                self.fmin_hz
            )));
        }
        Ok(())
    }
}

/// A T×n_mels matrix of log-mel energies plus the framing it was computed
/// with. Rows are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f64>,
    n_mels: usize,
    pub hop_samples: usize,
    pub sample_rate_hz: u32,
}

impl Spectrogram {
    /// Validates invariants: at least one frame, finite entries, entries no
    /// smaller than ln(log_floor).
    pub fn new(
        data: Vec<f64>,
        n_mels: usize,
        hop_samples: usize,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        if n_mels == 0 || data.is_empty() || !data.len().is_multiple_of(n_mels) {
            return Err(Error::Shape(format!(
                "spectrogram data of {} values does not tile rows of {n_mels}",
                data.len()
            )));
        }
        let floor = LOG_FLOOR.ln();
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite spectrogram entry at {i}"
                )));
            }
            if v < floor - 1e-6 {
                return Err(Error::Data(format!(
                    "spectrogram entry {v} at {i} below log floor {floor}"
                )));
            }
        }
        Ok(Spectrogram {
            data,
            n_mels,
            hop_samples,
            sample_rate_hz,
        })
    }

    /// Construct without the log-floor check. Model inputs and outputs live
    /// in the same matrix layout but are not bounded below.
    pub fn from_model_output(
        data: Vec<f64>,
        n_mels: usize,
        hop_samples: usize,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        if n_mels == 0 || data.is_empty() || !data.len().is_multiple_of(n_mels) {
            return Err(Error::Shape(format!(
                "spectrogram data of {} values does not tile rows of {n_mels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite spectrogram entry at {i}"
            )));
        }
        Ok(Spectrogram {
            data,
            n_mels,
            hop_samples,
            sample_rate_hz,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.n_mels
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Seconds per frame hop.
    pub fn frame_period_s(&self) -> f64 {
        self.hop_samples as f64 / self.sample_rate_hz as f64
    }
}

/// Symmetric Hann window: `w[n] = 0.5·(1 − cos(2πn/(L−1)))`. Endpoints are
/// exactly zero; odd lengths peak at exactly 1.
pub fn hann_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / (len - 1) as f64).cos()))
        .collect()
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, rows `n_mels` × columns `n_fft/2 + 1`,
/// unnormalized (peak weight 1).
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate_hz: u32,
    fmin_hz: f64,
    fmax_hz: f64,
) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(fmin_hz);
    let mel_hi = hz_to_mel(fmax_hz);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;

    let mut bank = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rising = (f - lo) / (mid - lo);
            let falling = (hi - f) / (hi - mid);
            bank[m * n_bins + k] = rising.min(falling).max(0.0);
        }
    }
    bank
}

/// Number of analysis frames for `n_samples` of audio: floor((N − L)/h) + 1.
pub fn frame_count(n_samples: usize, frame_samples: usize, hop_samples: usize) -> Option<usize> {
    if n_samples < frame_samples || hop_samples == 0 {
        return None;
    }
    Some((n_samples - frame_samples) / hop_samples + 1)
}

/// Extract a log-mel spectrogram. Tail samples shorter than one frame are
/// dropped; there is no pre-emphasis or padding.
pub fn logmel(w: &Waveform, cfg: &AudioConfig) -> Result<Spectrogram> {
    cfg.validate(w.sample_rate_hz)?;
    let frame_len = cfg.frame_samples(w.sample_rate_hz);
    let hop = cfg.hop_samples(w.sample_rate_hz);
    let n_frames = frame_count(w.len(), frame_len, hop).ok_or_else(|| {
        Error::Data(format!(
            "waveform of {} samples shorter than one frame of {frame_len}",
            w.len()
        ))
    })?;

    let n_fft = cfg.fft_size(w.sample_rate_hz);
    let window = hann_window(frame_len);
    let bank = mel_filterbank(
        cfg.n_mels,
        n_fft,
        w.sample_rate_hz,
        cfg.fmin_hz,
        cfg.fmax(w.sample_rate_hz),
    );
    let n_bins = n_fft / 2 + 1;

    let mut data = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut frame = vec![0.0; frame_len];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, v) in frame.iter_mut().enumerate() {
            *v = w.samples[start + i] * window[i];
        }
        let power = power_spectrum(&frame, n_fft)?;
        for m in 0..cfg.n_mels {
            let row = &bank[m * n_bins..(m + 1) * n_bins];
            let energy: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            data.push(energy.max(cfg.log_floor).ln());
        }
    }

    Spectrogram::new(data, cfg.n_mels, hop, w.sample_rate_hz)
}

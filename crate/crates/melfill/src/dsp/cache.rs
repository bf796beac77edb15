//! Feature cache files: one utterance per file.
//!
//! Layout: 16-byte header — magic `A3TF`, version u32, frame count u32,
//! mel count u32, all little-endian — followed by row-major T×n_mels f32
//! values. Values are clamped to the log floor on read so that f32
//! round-tripping cannot violate the spectrogram floor invariant.

use std::path::Path;

use crate::error::{Error, Result};

use super::{Spectrogram, LOG_FLOOR};

pub const FEATURE_MAGIC: [u8; 4] = *b"A3TF";
const FEATURE_VERSION: u32 = 1;

pub fn encode_features(spec: &Spectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + spec.data().len() * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    for &v in spec.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decode a feature cache buffer. The file does not carry framing metadata,
/// so hop and sample rate come from the caller's configuration.
pub fn decode_features(
    bytes: &[u8],
    hop_samples: usize,
    sample_rate_hz: u32,
) -> Result<Spectrogram> {
    let bad = |msg: String| Error::Data(format!("feature cache: {msg}"));
    if bytes.len() < 16 {
        return Err(bad("truncated header".into()));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let word =
        |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let frames = word(8) as usize;
    let n_mels = word(12) as usize;
    if frames == 0 || n_mels == 0 {
        return Err(bad("empty spectrogram".into()));
    }
    let expect = frames
        .checked_mul(n_mels)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| bad("size overflow".into()))?;
    if bytes.len() != expect {
        return Err(bad(format!("expected {expect} bytes, got {}", bytes.len())));
    }

    let floor = LOG_FLOOR.ln();
    let mut data = Vec::with_capacity(frames * n_mels);
    for chunk in bytes[16..].chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        if !v.is_finite() {
            return Err(bad("non-finite value".into()));
        }
        data.push(v.max(floor));
    }
    Spectrogram::new(data, n_mels, hop_samples, sample_rate_hz)
}

pub fn write_features(path: impl AsRef<Path>, spec: &Spectrogram) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(spec)).map_err(|e| Error::io(path, e))
}

pub fn read_features(
    path: impl AsRef<Path>,
    hop_samples: usize,
    sample_rate_hz: u32,
) -> Result<Spectrogram> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, hop_samples, sample_rate_hz)
}

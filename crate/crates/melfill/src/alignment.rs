//! Forced-alignment ingestion.
//!
//! Alignments arrive as three-column TSV files (`symbol<TAB>start_s<TAB>end_s`,
//! one phone per line, contiguous and monotone). Times become frame indices
//! via `floor(t · sr / h)`, so a boundary sitting exactly on a frame edge
//! belongs to the later phone. The phone inventory is an external text file,
//! one symbol per line; the line number is the id.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed phone inventory size.
pub const PHONE_VOCAB_SIZE: usize = 73;
/// Upper bound on phonemes (and therefore segment indices) per utterance.
pub const MAX_PHONEMES: usize = 500;

/// Phone inventory loaded from a one-symbol-per-line file.
#[derive(Debug, Clone)]
pub struct PhoneVocab {
    symbols: Vec<String>,
    index: HashMap<String, u32>,
}

impl PhoneVocab {
    pub fn parse(text: &str) -> Result<Self> {
        let symbols: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if symbols.is_empty() {
            return Err(Error::Data("empty phone vocabulary".into()));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate phone symbol {s:?}")));
            }
        }
        Ok(PhoneVocab { symbols, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab = Self::parse(&text)?;
        if vocab.len() != PHONE_VOCAB_SIZE {
            return Err(Error::Data(format!(
                "phone vocabulary {} has {} symbols, expected {PHONE_VOCAB_SIZE}",
                path.display(),
                vocab.len()
            )));
        }
        Ok(vocab)
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Phone ids with their surface symbols, in utterance order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    ids: Vec<u32>,
    symbols: Vec<String>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>, symbols: Vec<String>) -> Result<Self> {
        if ids.len() != symbols.len() {
            return Err(Error::Data(format!(
                "{} ids vs {} symbols",
                ids.len(),
                symbols.len()
            )));
        }
        if ids.len() > MAX_PHONEMES {
            return Err(Error::Data(format!(
                "{} phonemes exceed the {MAX_PHONEMES} segment limit",
                ids.len()
            )));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= PHONE_VOCAB_SIZE) {
            return Err(Error::Data(format!(
                "phone id {id} outside vocabulary of {PHONE_VOCAB_SIZE}"
            )));
        }
        Ok(PhonemeSequence { ids, symbols })
    }

    pub fn from_symbols(symbols: &[&str], vocab: &PhoneVocab) -> Result<Self> {
        let mut ids = Vec::with_capacity(symbols.len());
        for s in symbols {
            let id = vocab
                .id(s)
                .ok_or_else(|| Error::Data(format!("unknown phone symbol {s:?}")))?;
            ids.push(id);
        }
        Self::new(ids, symbols.iter().map(|s| s.to_string()).collect())
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Empty sequence, used by the speech-only pathway.
    pub fn empty() -> Self {
        PhonemeSequence {
            ids: Vec::new(),
            symbols: Vec::new(),
        }
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        PhonemeSequence {
            ids: self.ids[range.clone()].to_vec(),
            symbols: self.symbols[range].to_vec(),
        }
    }

    pub fn concat(&self, other: &PhonemeSequence) -> Result<Self> {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut symbols = self.symbols.clone();
        symbols.extend_from_slice(&other.symbols);
        Self::new(ids, symbols)
    }
}

/// One phone's frame span; `end_frame` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub phoneme_position: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

/// Contiguous, ordered phoneme-to-frame intervals starting at frame 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    intervals: Vec<Interval>,
}

impl AlignmentMap {
    pub fn new(intervals: Vec<Interval>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::Data("empty alignment".into()));
        }
        let mut expected_start = 0usize;
        for (i, iv) in intervals.iter().enumerate() {
            if iv.phoneme_position != i {
                return Err(Error::Data(format!(
                    "interval {i} carries phoneme position {}",
                    iv.phoneme_position
                )));
            }
            if iv.start_frame != expected_start {
                return Err(Error::Data(format!(
                    "interval {i} starts at frame {} but previous ended at {expected_start}",
                    iv.start_frame
                )));
            }
            if iv.end_frame <= iv.start_frame {
                return Err(Error::Data(format!(
                    "interval {i} spans no frames ({}..{})",
                    iv.start_frame, iv.end_frame
                )));
            }
            expected_start = iv.end_frame;
        }
        Ok(AlignmentMap { intervals })
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn num_phonemes(&self) -> usize {
        self.intervals.len()
    }

    /// Total frames covered, i.e. the exclusive end of the last interval.
    pub fn num_frames(&self) -> usize {
        self.intervals.last().map_or(0, |iv| iv.end_frame)
    }

    /// Clamp the final interval to a spectrogram of `num_frames` frames.
    /// Feature extraction may drop a trailing partial frame relative to the
    /// aligner's end time; this reconciles the two.
    pub fn clamp_to(&self, num_frames: usize) -> Result<AlignmentMap> {
        let mut intervals = self.intervals.clone();
        let last = intervals.last_mut().expect("non-empty by invariant");
        if last.end_frame > num_frames {
            if num_frames <= last.start_frame {
                return Err(Error::Data(format!(
                    "clamping alignment to {num_frames} frames would empty the final phone"
                )));
            }
            last.end_frame = num_frames;
        }
        AlignmentMap::new(intervals)
    }
}

/// Frame index for a time in seconds: floor(t · sr / h), with a tiny epsilon
/// so that times written as decimal seconds land on the frame edge they
/// denote rather than one frame early.
fn time_to_frame(t: f64, hop_samples: usize, sample_rate_hz: u32) -> usize {
    let frames = t * sample_rate_hz as f64 / hop_samples as f64;
    (frames + 1e-6).floor() as usize
}

/// Parse an alignment TSV against a phone vocabulary. Returns the phoneme
/// sequence and its frame intervals.
pub fn parse_alignment_str(
    text: &str,
    hop_samples: usize,
    sample_rate_hz: u32,
    vocab: &PhoneVocab,
) -> Result<(PhonemeSequence, AlignmentMap)> {
    if hop_samples == 0 {
        return Err(Error::Config("hop_samples must be positive".into()));
    }
    let mut symbols: Vec<&str> = Vec::new();
    let mut times: Vec<(f64, f64)> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let (sym, start, end) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
            (Some(s), Some(a), Some(b), None) => (s.trim(), a, b),
            _ => {
                return Err(Error::Data(format!(
                    "alignment line {}: expected 3 tab-separated columns",
                    lineno + 1
                )))
            }
        };
        let parse_time = |s: &str| -> Result<f64> {
            let v: f64 = s.trim().parse().map_err(|_| {
                Error::Data(format!("alignment line {}: bad time {s:?}", lineno + 1))
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Data(format!(
                    "alignment line {}: time {v} out of range",
                    lineno + 1
                )));
            }
            Ok(v)
        };
        let (start, end) = (parse_time(start)?, parse_time(end)?);
        if end < start {
            return Err(Error::Data(format!(
                "non-monotone alignment at line {}: end {end} < start {start}",
                lineno + 1
            )));
        }
        if let Some(&(_, prev_end)) = times.last() {
            if start < prev_end {
                return Err(Error::Data(format!(
                    "non-monotone alignment at line {}: start {start} < previous end {prev_end}",
                    lineno + 1
                )));
            }
        }
        symbols.push(sym);
        times.push((start, end));
    }

    if symbols.is_empty() {
        return Err(Error::Data("empty alignment file".into()));
    }

    let phones = PhonemeSequence::from_symbols(&symbols, vocab)?;
    let intervals: Vec<Interval> = times
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| Interval {
            phoneme_position: i,
            start_frame: time_to_frame(s, hop_samples, sample_rate_hz),
            end_frame: time_to_frame(e, hop_samples, sample_rate_hz),
        })
        .collect();
    let map = AlignmentMap::new(intervals)?;
    Ok((phones, map))
}

pub fn parse_alignment(
    path: impl AsRef<Path>,
    hop_samples: usize,
    sample_rate_hz: u32,
    vocab: &PhoneVocab,
) -> Result<(PhonemeSequence, AlignmentMap)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment_str(&text, hop_samples, sample_rate_hz, vocab)
}

/// Render an alignment back to the TSV format `parse_alignment` accepts.
pub fn serialize_alignment(
    phones: &PhonemeSequence,
    map: &AlignmentMap,
    hop_samples: usize,
    sample_rate_hz: u32,
) -> String {
    let per_frame = hop_samples as f64 / sample_rate_hz as f64;
    let mut out = String::new();
    for (sym, iv) in phones.symbols().iter().zip(map.intervals()) {
        out.push_str(&format!(
            "{sym}\t{}\t{}\n",
            iv.start_frame as f64 * per_frame,
            iv.end_frame as f64 * per_frame
        ));
    }
    out
}

/// Segment index per frame: frame t maps to the phoneme position of the
/// interval containing it. Errors if any of the `num_frames` frames falls
/// outside the alignment.
pub fn frame_segment_indices(map: &AlignmentMap, num_frames: usize) -> Result<Vec<usize>> {
    if num_frames > map.num_frames() {
        return Err(Error::Data(format!(
            "uncovered frames: alignment ends at {} but spectrogram has {num_frames}",
            map.num_frames()
        )));
    }
    let mut seg = Vec::with_capacity(num_frames);
    for iv in map.intervals() {
        for _ in iv.start_frame..iv.end_frame.min(num_frames) {
            seg.push(iv.phoneme_position);
        }
        if seg.len() >= num_frames {
            break;
        }
    }
    Ok(seg)
}

/// Per-phoneme durations in seconds: (end − start) · h / sr.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationSet {
    values: Vec<f64>,
}

impl DurationSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(&v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!("invalid duration {v}")));
        }
        Ok(DurationSet { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_s(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn phoneme_durations(
    map: &AlignmentMap,
    hop_samples: usize,
    sample_rate_hz: u32,
) -> DurationSet {
    let per_frame = hop_samples as f64 / sample_rate_hz as f64;
    DurationSet {
        values: map
            .intervals()
            .iter()
            .map(|iv| (iv.end_frame - iv.start_frame) as f64 * per_frame)
            .collect(),
    }
}

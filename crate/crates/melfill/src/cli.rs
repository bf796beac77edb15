//! Command-line surface. Every subcommand is deterministic given the config
//! and seed; flags override config keys, which override the documented
//! defaults. Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::alignment::{parse_alignment, PhoneVocab};
use crate::config::RunConfig;
use crate::dsp::{load_wav, logmel, read_features, write_features, Spectrogram};
use crate::error::{Error, Result};
use crate::eval::{mcd_masked_region, plot_spectrogram, McdReport, DEFAULT_CEPSTRAL_ORDER};
use crate::inference::{
    edit, middle_third_region, prompt_tts, read_phones_file, DurationStats, EditRequest,
};
use crate::training::{load_checkpoint, Dataset, MaskMode};

#[derive(Parser)]
#[command(
    name = "melfill",
    version,
    about = "Masked spectrogram reconstruction, speech editing, and prompt-based synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a mono 16-bit PCM WAV into a log-mel feature file.
    ExtractFeatures(ExtractArgs),
    /// Pretrain a reconstruction model from a feature manifest.
    Train(TrainArgs),
    /// Identity reconstruction protocol: regenerate a phone region of an
    /// utterance (default: the middle third) and score it.
    Reconstruct(ReconstructArgs),
    /// Regenerate the region of an utterance whose phones changed.
    Edit(EditArgs),
    /// Synthesize target phones in the voice of a prompt utterance.
    PromptTts(PromptTtsArgs),
    /// Mel-cepstral distortion between two aligned feature files.
    Mcd(McdArgs),
    /// Render a feature file as a PGM image.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Input WAV (RIFF, PCM 16-bit, mono, 24000 or 22050 Hz).
    #[arg(long)]
    wav: PathBuf,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines manifest: {"id", "feature_path", "alignment_path"}.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Phone vocabulary file (one symbol per line).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// speech_text or speech_only.
    #[arg(long)]
    mask_mode: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    alignment: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Per-phone durations TSV (symbol<TAB>seconds). Defaults to means
    /// computed from the utterance's own alignment.
    #[arg(long)]
    durations: Option<PathBuf>,
    /// Duration in seconds for phones missing from the table.
    #[arg(long)]
    duration_fallback: Option<f64>,
    /// First phone of the region (defaults to the middle third).
    #[arg(long)]
    region_start: Option<usize>,
    /// Region length in phones.
    #[arg(long)]
    region_len: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Original utterance as a feature file…
    #[arg(long, conflicts_with = "wav")]
    features: Option<PathBuf>,
    /// …or as a WAV to extract on the fly.
    #[arg(long)]
    wav: Option<PathBuf>,
    #[arg(long)]
    alignment: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Original phones file; validated against the alignment when given.
    #[arg(long)]
    phones: Option<PathBuf>,
    /// Modified phones file (whitespace-separated symbols).
    #[arg(long)]
    modified_phones: PathBuf,
    /// Per-phone durations TSV; defaults to means from the alignment.
    #[arg(long)]
    durations: Option<PathBuf>,
    /// Duration in seconds for phones missing from the table.
    #[arg(long)]
    duration_fallback: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Args)]
struct PromptTtsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "prompt_wav")]
    prompt_features: Option<PathBuf>,
    #[arg(long)]
    prompt_wav: Option<PathBuf>,
    #[arg(long)]
    prompt_alignment: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Target phones file (whitespace-separated symbols).
    #[arg(long)]
    target_phones: PathBuf,
    #[arg(long)]
    durations: Option<PathBuf>,
    /// Duration in seconds for phones missing from the table.
    #[arg(long)]
    duration_fallback: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Args)]
struct McdArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    hypothesis: PathBuf,
    /// First frame of the scored region (defaults to the whole signal).
    #[arg(long)]
    region_start: Option<usize>,
    /// Scored region length in frames.
    #[arg(long)]
    region_len: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_CEPSTRAL_ORDER)]
    order: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractFeatures(args) => extract_features(args),
        Command::Train(args) => train(args),
        Command::Reconstruct(args) => reconstruct(args),
        Command::Edit(args) => edit_cmd(args),
        Command::PromptTts(args) => prompt_tts_cmd(args),
        Command::Mcd(args) => mcd_cmd(args),
        Command::Plot(args) => plot_cmd(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn extract_features(args: ExtractArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let wav = load_wav(&args.wav)?;
    cfg.audio.validate(wav.sample_rate_hz)?;
    let spec = logmel(&wav, &cfg.audio)?;
    write_features(&args.out, &spec)?;
    println!(
        "{} -> {} ({} frames x {} mels)",
        args.wav.display(),
        args.out.display(),
        spec.num_frames(),
        spec.n_mels()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(steps) = args.max_steps {
        cfg.train.max_steps = steps;
    }
    match (args.mask_mode.as_deref(), args.mask_ratio) {
        (Some("speech_text"), ratio) => {
            cfg.train.mask_mode = MaskMode::SpeechText {
                ratio: ratio.unwrap_or(0.8),
            }
        }
        (Some("speech_only"), ratio) => {
            cfg.train.mask_mode = MaskMode::SpeechOnly {
                ratio: ratio.unwrap_or(0.15),
            }
        }
        (Some(other), _) => {
            return Err(Error::Config(format!(
                "unknown mask mode {other:?} (want speech_text or speech_only)"
            )))
        }
        (None, Some(ratio)) => {
            cfg.train.mask_mode = match cfg.train.mask_mode {
                MaskMode::SpeechText { .. } => MaskMode::SpeechText { ratio },
                MaskMode::SpeechOnly { .. } => MaskMode::SpeechOnly { ratio },
            }
        }
        (None, None) => {}
    }
    if let Some(m) = &args.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    if let Some(v) = &args.vocab {
        cfg.paths.vocab = Some(v.clone());
    }
    if let Some(o) = &args.out_dir {
        cfg.paths.output_dir = Some(o.clone());
    }
    let cfg = cfg.resolve()?;

    let manifest = cfg.paths.manifest.clone().ok_or_else(|| {
        Error::Config("no manifest given (flag --manifest or paths.manifest)".into())
    })?;
    let out_dir = cfg.paths.output_dir.clone().ok_or_else(|| {
        Error::Config("no output directory given (flag --out-dir or paths.output_dir)".into())
    })?;

    let speech_only = matches!(cfg.train.mask_mode, MaskMode::SpeechOnly { .. });
    let vocab = match (&cfg.paths.vocab, speech_only) {
        (Some(v), _) => Some(PhoneVocab::load(v)?),
        (None, true) => None,
        (None, false) => {
            return Err(Error::Config(
                "speech-text training needs a phone vocabulary (flag --vocab or paths.vocab)"
                    .into(),
            ))
        }
    };
    let placeholder;
    let vocab_ref = match &vocab {
        Some(v) => v,
        None => {
            placeholder = PhoneVocab::parse("SIL")?;
            &placeholder
        }
    };
    let data = Dataset::load(&manifest, vocab_ref, cfg.hop_samples(), cfg.sample_rate_hz)?;

    ensure_dir(&out_dir)?;
    cfg.echo_into(&out_dir)?;

    let outputs = match &args.resume {
        Some(ckpt) => crate::training::resume(ckpt, &data, &out_dir, Some(cfg.train.max_steps))?,
        None => crate::training::train(&data, cfg.model.clone(), cfg.train.clone(), &out_dir)?,
    };

    // Per-phone duration means power the editing pipelines later.
    if let Some(v) = &vocab {
        let pairs = data.duration_pairs();
        if !pairs.is_empty() {
            let stats =
                DurationStats::from_corpus(pairs.iter().map(|(p, d)| (*p, d.clone())), v.len())?;
            let path = out_dir.join("duration_stats.tsv");
            std::fs::write(&path, stats.to_tsv(v)).map_err(|e| Error::io(&path, e))?;
        }
    }

    println!(
        "trained to step {} (loss {:.6}, masked L1 {:.6}); checkpoint at {}",
        outputs.final_step,
        outputs.final_loss,
        outputs.final_refined_l1,
        outputs.checkpoint_path.display()
    );
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(sr) = args.sample_rate {
        cfg.sample_rate_hz = sr;
    }
    let vocab = PhoneVocab::load(&args.vocab)?;
    let hop = cfg.hop_samples();
    let spec = read_features(&args.features, hop, cfg.sample_rate_hz)?;
    let (phones, alignment) = parse_alignment(&args.alignment, hop, cfg.sample_rate_hz, &vocab)?;
    let alignment = alignment.clamp_to(spec.num_frames())?;

    let loaded = load_checkpoint(&args.checkpoint)?;
    let stats = duration_stats(
        &args.durations,
        args.duration_fallback,
        &vocab,
        &phones,
        &alignment,
        hop,
        cfg.sample_rate_hz,
    )?;

    let region = match (args.region_start, args.region_len) {
        (Some(start), Some(len)) => {
            if start + len > phones.len() {
                return Err(Error::Config(format!(
                    "region {start}+{len} exceeds {} phones",
                    phones.len()
                )));
            }
            (start, phones.len() - start - len)
        }
        (None, None) => middle_third_region(phones.len()),
        _ => {
            return Err(Error::Config(
                "--region-start and --region-len must be given together".into(),
            ))
        }
    };

    let request = EditRequest {
        original: spec.clone(),
        original_phones: phones.clone(),
        original_alignment: alignment,
        modified_phones: phones,
        region_override: Some(region),
    };
    let result = edit(&request, &loaded.model, &stats)?;

    ensure_dir(&args.out_dir)?;
    cfg.echo_into(&args.out_dir)?;
    write_features(args.out_dir.join("reconstructed.a3tf"), &result.spliced)?;
    write_json(&args.out_dir.join("region.json"), &result.region)?;

    let r = &result.region;
    if result.spliced.num_frames() == spec.num_frames() {
        let scored = r.prefix_frames..r.prefix_frames + r.inserted_frames;
        let report = mcd_masked_region(&spec, &result.spliced, scored, DEFAULT_CEPSTRAL_ORDER)?;
        write_json(&args.out_dir.join("mcd.json"), &report)?;
        println!(
            "reconstructed {} frames (region {}..{}), MCD {:.4} dB",
            result.spliced.num_frames(),
            r.prefix_frames,
            r.prefix_frames + r.inserted_frames,
            report.mcd_db
        );
    } else {
        println!(
            "reconstructed {} frames (original {}; region length changed, no MCD)",
            result.spliced.num_frames(),
            spec.num_frames()
        );
    }
    Ok(())
}

fn edit_cmd(args: EditArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(sr) = args.sample_rate {
        cfg.sample_rate_hz = sr;
    }
    let vocab = PhoneVocab::load(&args.vocab)?;
    let hop = cfg.hop_samples();
    let original = load_input_features(&args.features, &args.wav, &cfg, hop)?;
    let (orig_phones, alignment) =
        parse_alignment(&args.alignment, hop, cfg.sample_rate_hz, &vocab)?;
    let alignment = alignment.clamp_to(original.num_frames())?;

    if let Some(phones_path) = &args.phones {
        let given = read_phones_file(phones_path, &vocab)?;
        if given.ids() != orig_phones.ids() {
            return Err(Error::Data(
                "original phones file disagrees with the alignment".into(),
            ));
        }
    }
    let modified = read_phones_file(&args.modified_phones, &vocab)?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    let stats = duration_stats(
        &args.durations,
        args.duration_fallback,
        &vocab,
        &orig_phones,
        &alignment,
        hop,
        cfg.sample_rate_hz,
    )?;

    let request = EditRequest {
        original: original.clone(),
        original_phones: orig_phones,
        original_alignment: alignment,
        modified_phones: modified,
        region_override: None,
    };
    let result = edit(&request, &loaded.model, &stats)?;

    ensure_dir(&args.out_dir)?;
    cfg.echo_into(&args.out_dir)?;
    write_features(args.out_dir.join("edited.a3tf"), &result.spliced)?;
    write_json(&args.out_dir.join("region.json"), &result.region)?;
    let r = &result.region;
    println!(
        "edited: {} -> {} frames ({} inserted at {})",
        original.num_frames(),
        result.spliced.num_frames(),
        r.inserted_frames,
        r.prefix_frames
    );
    Ok(())
}

fn prompt_tts_cmd(args: PromptTtsArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(sr) = args.sample_rate {
        cfg.sample_rate_hz = sr;
    }
    let vocab = PhoneVocab::load(&args.vocab)?;
    let hop = cfg.hop_samples();
    let prompt = load_input_features(&args.prompt_features, &args.prompt_wav, &cfg, hop)?;
    let (prompt_phones, alignment) =
        parse_alignment(&args.prompt_alignment, hop, cfg.sample_rate_hz, &vocab)?;
    let alignment = alignment.clamp_to(prompt.num_frames())?;
    let target = read_phones_file(&args.target_phones, &vocab)?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    let stats = duration_stats(
        &args.durations,
        args.duration_fallback,
        &vocab,
        &prompt_phones,
        &alignment,
        hop,
        cfg.sample_rate_hz,
    )?;

    let out = prompt_tts(
        &prompt,
        &prompt_phones,
        &alignment,
        &target,
        &loaded.model,
        &stats,
    )?;

    ensure_dir(&args.out_dir)?;
    cfg.echo_into(&args.out_dir)?;
    write_features(args.out_dir.join("target.a3tf"), &out)?;
    write_json(
        &args.out_dir.join("report.json"),
        &serde_json::json!({
            "target_frames": out.num_frames(),
            "target_phones": target.len(),
            "prompt_frames": prompt.num_frames(),
        }),
    )?;
    println!(
        "synthesized {} frames for {} phones",
        out.num_frames(),
        target.len()
    );
    Ok(())
}

fn mcd_cmd(args: McdArgs) -> Result<()> {
    // Framing metadata is irrelevant to the cepstral distance; nominal
    // values are fine for files produced elsewhere.
    let reference = read_features(&args.reference, 300, 24_000)?;
    let hypothesis = read_features(&args.hypothesis, 300, 24_000)?;
    let region = match (args.region_start, args.region_len) {
        (Some(s), Some(l)) => s..s + l,
        (None, None) => 0..reference.num_frames(),
        _ => {
            return Err(Error::Config(
                "--region-start and --region-len must be given together".into(),
            ))
        }
    };
    let report: McdReport = mcd_masked_region(&reference, &hypothesis, region, args.order)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn plot_cmd(args: PlotArgs) -> Result<()> {
    let spec = read_features(&args.features, 300, 24_000)?;
    plot_spectrogram(&spec, &args.out)?;
    println!(
        "{} -> {} ({}x{})",
        args.features.display(),
        args.out.display(),
        spec.num_frames(),
        spec.n_mels()
    );
    Ok(())
}

fn load_input_features(
    features: &Option<PathBuf>,
    wav: &Option<PathBuf>,
    cfg: &RunConfig,
    hop: usize,
) -> Result<Spectrogram> {
    match (features, wav) {
        (Some(f), None) => read_features(f, hop, cfg.sample_rate_hz),
        (None, Some(w)) => {
            let wave = load_wav(w)?;
            logmel(&wave, &cfg.audio)
        }
        _ => Err(Error::Config(
            "exactly one of --features or --wav must be given".into(),
        )),
    }
}

/// Duration table: the external TSV when given, otherwise per-phone means
/// from the utterance's own alignment. An explicit fallback covers phones
/// the table misses.
fn duration_stats(
    tsv: &Option<PathBuf>,
    fallback: Option<f64>,
    vocab: &PhoneVocab,
    phones: &crate::alignment::PhonemeSequence,
    alignment: &crate::alignment::AlignmentMap,
    hop: usize,
    sample_rate_hz: u32,
) -> Result<DurationStats> {
    let stats = match tsv {
        Some(path) => DurationStats::from_tsv(path, vocab)?,
        None => {
            let durations = crate::alignment::phoneme_durations(alignment, hop, sample_rate_hz);
            DurationStats::from_corpus(std::iter::once((phones, durations)), vocab.len())?
        }
    };
    match fallback {
        Some(seconds) => stats.with_fallback(seconds),
        None => Ok(stats),
    }
}

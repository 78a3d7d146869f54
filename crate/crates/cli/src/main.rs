use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use vqmark::attack::{AttackSimulator, DistortionKind, DistortionSpec};
use vqmark::audio::{read_wav, write_wav, StftConfig, Waveform};
use vqmark::checkpoint;
use vqmark::codec::{capacity, detect, embed, format_bits, parse_bits, Placement, Selection};
use vqmark::eval::report::{plot_loss, write_report};
use vqmark::eval::{
    run_ai_detection_eval, run_information_hiding_eval, DetectionOptions, HidingOptions, ModelWatermarker,
};
use vqmark::manipulator::SamplingMode;
use vqmark::models::WatermarkModels;
use vqmark::stats::{verdict, DEFAULT_Z_THRESHOLD};
use vqmark::train::{
    calibrate, corpus_clips, held_out_clips, load_corpus, param_digest, train_stage1, train_stage2, TrainConfig, TrainLog,
};
use vqmark::{Error, Result};

#[derive(Parser)]
#[command(name = "vqmark", version, about = "Speech watermarking in the parity of discrete spectrogram tokens")]
struct Cli {
    /// Training uses the config's seed when this is absent; other commands use 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage.
    Train(TrainArgs),
    /// Re-measure the localizer's frame rates on held-out clips.
    Calibrate(CalibrateArgs),
    /// Hide bits in a WAV file.
    Embed(EmbedArgs),
    /// Recover bits and the utterance verdict from a WAV file.
    Detect(DetectArgs),
    /// Utterance-level Z-test only.
    Ztest(ZtestArgs),
    /// Apply one distortion to a WAV file.
    Attack(AttackArgs),
    /// Run an evaluation protocol over a corpus.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Expected STFT size; the checkpoint must have been trained with it.
    #[arg(long)]
    n_fft: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long)]
    win_length: Option<usize>,
}

impl ModelArgs {
    fn load(&self) -> Result<WatermarkModels> {
        let models = checkpoint::load(&self.checkpoint)?;
        if self.n_fft.is_some() || self.hop.is_some() || self.win_length.is_some() {
            let have = models.config.stft;
            let want = StftConfig::new(
                self.n_fft.unwrap_or(have.n_fft),
                self.hop.unwrap_or(have.hop),
                self.win_length.unwrap_or(have.win_length),
            )?;
            checkpoint::check_stft(&models, &want)?;
        }
        Ok(models)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML training config; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
}

impl ConfigArgs {
    fn load(&self, seed: Option<u64>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => match self.preset {
                Preset::Default => TrainConfig::default(),
                Preset::Smoke => TrainConfig::smoke(),
            },
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[command(flatten)]
    config: ConfigArgs,
    /// Written by stage 1; read and updated by stage 2.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the JSONL log, loss plot and final metrics record.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Folder of clean WAVs; defaults to the config's held-out clips.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Manipulator,
    /// Temperature-1 sampling within the parity class.
    Sample,
    Random,
}

impl SelectionArg {
    fn selection(self, seed: u64) -> Selection {
        match self {
            Self::Manipulator => Selection::Manipulator { mode: SamplingMode::Argmax, seed },
            Self::Sample => Selection::Manipulator { mode: SamplingMode::Temperature { tau: 1.0 }, seed },
            Self::Random => Selection::RandomOpposite { seed },
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Payload as 0/1 text or 0x-prefixed hex; random bits are drawn when only --ratio is given.
    #[arg(long)]
    bits: Option<String>,
    /// Watermark ratio used to size a random payload.
    #[arg(long, conflicts_with = "bits")]
    ratio: Option<f64>,
    /// Comma-separated frame indices, one per bit; random placement otherwise.
    #[arg(long, value_delimiter = ',')]
    positions: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "manipulator")]
    selection: SelectionArg,
    /// Where to write the plan JSON; defaults to the output path with a .json extension.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    /// Payload length, when known.
    #[arg(long)]
    expected: Option<usize>,
}

#[derive(Args)]
struct ZtestArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_Z_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// One of GN, AS, RS, MP3, MF, LP, EA, QTZ, SS, PN, NONE.
    #[arg(long)]
    kind: DistortionKind,
    /// Where to write the spec JSON; defaults to the output path with a .json extension.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Hiding,
    Detection,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    mode: EvalMode,
    /// Folder of WAVs; defaults to the config's held-out clips.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Held-out clip count when no corpus folder is given.
    #[arg(long, default_value_t = 16)]
    clips: usize,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, default_value_t = 32)]
    capacity_bps: usize,
    /// Comma-separated distortion kinds for the hiding protocol; all by default.
    #[arg(long, value_delimiter = ',')]
    catalog: Option<Vec<DistortionKind>>,
    /// Comma-separated watermark ratios for the detection sweep.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Ratio at which utterance TPR/FPR are reported.
    #[arg(long, default_value_t = 0.1)]
    ratio: f64,
    #[arg(long, default_value_t = DEFAULT_Z_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "manipulator")]
    selection: SelectionArg,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingPrerequisite(_) | Error::Untrained(_) => 2,
        Error::CapacityExceeded { .. } => 3,
        Error::CodecUnavailable(_) => 4,
        Error::CheckpointMismatch(_) | Error::MalformedCheckpoint { .. } => 5,
        _ => 1,
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = args.config.load(seed)?;
    let sim = AttackSimulator::default();
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.with_extension("logs"));
    std::fs::create_dir_all(&out)?;
    let mut log = TrainLog::to_writer(std::fs::File::create(out.join(format!("train_stage{}.jsonl", args.stage)))?);
    let record = if args.stage == 1 {
        let clips = corpus_clips(&cfg)?;
        let mut models = WatermarkModels::init(cfg.model.clone(), cfg.seed)?;
        let report = train_stage1(&mut models, &clips, &cfg, &sim, &mut log)?;
        let held = held_out_clips(&cfg, cfg.calibration.clips)?;
        let cal = calibrate(&models, &held, cfg.calibration.ratio, cfg.seed, "held-out")?;
        models.calibration = Some(cal.clone());
        checkpoint::save(&models, &args.checkpoint)?;
        json!({ "stage": 1, "report": report, "calibration": cal, "param_digest": param_digest(&models.params, None) })
    } else {
        if !args.checkpoint.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "stage-1 checkpoint required: {} not found",
                args.checkpoint.display()
            )));
        }
        let mut models = checkpoint::load(&args.checkpoint)?;
        if models.config != cfg.model {
            return Err(Error::CheckpointMismatch("model config differs from the stage-1 checkpoint".into()));
        }
        let clips = corpus_clips(&cfg)?;
        let report = train_stage2(&mut models, &clips, &cfg, &mut log)?;
        checkpoint::save(&models, &args.checkpoint)?;
        json!({ "stage": 2, "report": report, "param_digest": param_digest(&models.params, None) })
    };
    log.flush()?;
    plot_loss(&log.records, &out.join(format!("loss_stage{}.svg", args.stage)))?;
    write_json(&out.join(format!("metrics_stage{}.json", args.stage)), &record)?;
    print_json(&record)
}

fn cmd_calibrate(args: &CalibrateArgs, seed: u64) -> Result<()> {
    let mut models = args.model.load()?;
    let cfg = args.config.load(None)?;
    let (clips, source) = match &args.corpus {
        Some(dir) => (load_corpus(dir, models.config.sample_rate, true)?, dir.display().to_string()),
        None => (held_out_clips(&cfg, cfg.calibration.clips)?, "held-out".to_string()),
    };
    let cal = calibrate(&models, &clips, cfg.calibration.ratio, seed, &source)?;
    models.calibration = Some(cal.clone());
    checkpoint::save(&models, &args.model.checkpoint)?;
    print_json(&cal)
}

fn random_bits(n: usize, seed: u64) -> Vec<u8> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..2)).collect()
}

fn cmd_embed(args: &EmbedArgs, seed: u64) -> Result<()> {
    let models = args.model.load()?;
    let wave = read_wav(&args.input, Some(models.config.sample_rate))?;
    let frames = models.config.stft.frames(wave.len());
    let bits = match (&args.bits, args.ratio) {
        (Some(b), _) => parse_bits(b)?,
        (None, Some(r)) => {
            if !(r > 0.0 && r <= 0.5) {
                return Err(Error::InvalidMaskRatio(r));
            }
            random_bits(((r * frames as f64).round() as usize).clamp(1, capacity(frames).max(1)), seed)
        }
        (None, None) => return Err(Error::InvalidArgument("give --bits or --ratio".into())),
    };
    let placement = match &args.positions {
        Some(p) => Placement::Positions(p.clone()),
        None => Placement::Random { seed },
    };
    let out = embed(&models, &wave, &bits, &placement, args.selection.selection(seed))?;
    write_wav(&args.output, &out.watermarked)?;
    let plan_path = args.plan.clone().unwrap_or_else(|| args.output.with_extension("json"));
    let record = json!({
        "bits": format_bits(&out.plan.bits),
        "positions": out.plan.positions,
        "frames": out.plan.frames,
        "ratio": out.plan.ratio(),
        "substituted": out.substituted,
        "selection": args.selection.selection(seed),
    });
    write_json(&plan_path, &record)?;
    print_json(&record)
}

fn cmd_detect(args: &DetectArgs) -> Result<()> {
    let models = args.model.load()?;
    let wave = read_wav(&args.input, Some(models.config.sample_rate))?;
    let r = detect(&models, &wave, args.expected)?;
    print_json(&json!({
        "bits": format_bits(&r.bits),
        "positions": r.positions,
        "confidences": r.confidences,
        "alignment": r.alignment,
        "verdict": r.verdict,
    }))
}

fn cmd_ztest(args: &ZtestArgs) -> Result<()> {
    let models = args.model.load()?;
    let cal = models
        .calibration
        .clone()
        .ok_or_else(|| Error::MissingPrerequisite("checkpoint has no detector calibration; run calibrate".into()))?;
    let wave = read_wav(&args.input, Some(models.config.sample_rate))?;
    let loc = models.localizer_forward(&models.analyze(&wave)?.magnitude)?;
    print_json(&verdict(loc.detected.len(), loc.scores.len(), cal.effective_beta(), args.threshold)?)
}

fn cmd_attack(args: &AttackArgs, seed: u64) -> Result<()> {
    use rand::SeedableRng;
    let wave = read_wav(&args.input, None)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = DistortionSpec::sample(args.kind, &mut rng);
    let out = AttackSimulator::default().apply(&wave, &spec)?;
    write_wav(&args.output, &out)?;
    write_json(&args.spec.clone().unwrap_or_else(|| args.output.with_extension("json")), &spec)?;
    print_json(&spec)
}

fn cmd_evaluate(args: &EvaluateArgs, seed: u64) -> Result<()> {
    let models = args.model.load()?;
    let cfg = args.config.load(None)?;
    let corpus: Vec<Waveform> = match &args.corpus {
        Some(dir) => load_corpus(dir, models.config.sample_rate, true)?,
        None => held_out_clips(&cfg, args.clips)?,
    };
    let system = ModelWatermarker::new(&models, args.selection.selection(seed))?;
    let report = match args.mode {
        EvalMode::Hiding => {
            let opts = HidingOptions {
                capacity_bps: args.capacity_bps,
                catalog: args.catalog.clone().unwrap_or_else(|| DistortionKind::ALL.to_vec()),
                seed,
                ..HidingOptions::default()
            };
            run_information_hiding_eval(&system, &AttackSimulator::default(), &corpus, &opts, &[])?
        }
        EvalMode::Detection => {
            let mut opts = DetectionOptions { ratio: args.ratio, threshold: args.threshold, seed, ..DetectionOptions::default() };
            if let Some(r) = &args.ratios {
                opts.ratios = r.clone();
            }
            run_ai_detection_eval(&system, &corpus, &opts)?
        }
    };
    let written = write_report(&report, &args.output, args.threshold)?;
    print_json(&json!({ "report": report, "files": written }))
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Calibrate(a) => cmd_calibrate(a, seed),
        Command::Embed(a) => cmd_embed(a, seed),
        Command::Detect(a) => cmd_detect(a),
        Command::Ztest(a) => cmd_ztest(a),
        Command::Attack(a) => cmd_attack(a, seed),
        Command::Evaluate(a) => cmd_evaluate(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

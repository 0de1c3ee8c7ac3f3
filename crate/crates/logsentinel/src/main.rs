//! Command-line pipeline: mine templates, group sequences, train the
//! encoder, tune detection, judge sequences, and report metrics.
//!
//! Settings resolve in three layers: built-in defaults, then the TOML
//! file given by --config, then command-line flags. Every command echoes
//! the fully resolved configuration to stderr so a run reproduces from
//! that echo plus its seed. Exit codes: 0 success, 1 usage or config
//! error, 2 data error, 3 numeric failure.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use logsentinel::config::{Grouping, RunConfig};
use logsentinel::detect::{DetectMode, DetectionConfig, MaskingMode};
use logsentinel::error::{Error, Result};
use logsentinel::model::Model;
use logsentinel::parser::{Adapter, AdapterKind, ParsedEvent, ParserState};
use logsentinel::sequence::{Label, LogSequence};
use logsentinel::train::TrainObjective;
use logsentinel::vocab::{encode, EncodedSequence, Vocab};
use logsentinel::{checkpoint, detect, eval, jsonl, sequence, synth, train};

#[derive(Parser)]
#[command(
    name = "logsentinel",
    version,
    about = "Log-sequence anomaly detection: template mining, a masked-key encoder, and top-g/r scoring"
)]
struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; replaces every per-stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Do not echo the resolved configuration.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mine templates from a raw log file and write the event stream.
    Parse(ParseArgs),
    /// Group a parsed event stream into labeled key sequences.
    Sequence(SequenceArgs),
    /// Generate the synthetic corpus splits.
    Synth(SynthArgs),
    /// Train the encoder; writes a checkpoint and a loss curve.
    Train(TrainArgs),
    /// Grid-search detection parameters on a labeled validation file.
    Tune(TuneArgs),
    /// Judge sequences against a checkpoint and write verdicts.
    Detect(DetectArgs),
    /// Judge sequences and score the verdicts against their labels.
    Eval(EvalArgs),
    /// Write per-sequence aggregate embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct ParseArgs {
    /// Raw log file.
    #[arg(long)]
    input: PathBuf,
    /// Line format: generic, hdfs, bgl, or thunderbird.
    #[arg(long)]
    adapter: Option<AdapterKind>,
    /// Template store output (one JSON record per line).
    #[arg(long)]
    templates: PathBuf,
    /// Event stream output (one JSON record per line).
    #[arg(long)]
    events: PathBuf,
}

#[derive(Args)]
struct SequenceArgs {
    /// Event stream from `parse`.
    #[arg(long)]
    events: PathBuf,
    /// Sequence file output.
    #[arg(long)]
    out: PathBuf,
    /// Grouping: session or window.
    #[arg(long)]
    grouping: Option<Grouping>,
    /// Tumbling window width in seconds (window grouping).
    #[arg(long)]
    window_secs: Option<i64>,
    /// Ground-truth labels: records {group_id, label} overriding the
    /// labels derived from per-event alerts.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving train.jsonl, val.jsonl, and test.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training sequences; anomalous-labeled entries are excluded.
    #[arg(long)]
    sequences: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Loss curve output (one JSON record per epoch).
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Weight of the compactness term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of key positions masked per sequence.
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Objective: combined, mlkp_only, or vhm_only.
    #[arg(long)]
    objective: Option<TrainObjective>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Progress line cadence in epochs; 0 disables.
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct DetectFlags {
    /// Decision rule: topg_r or distance.
    #[arg(long)]
    mode: Option<DetectMode>,
    /// Candidate-set size g.
    #[arg(long)]
    top_g: Option<usize>,
    /// Anomalous-key threshold r (strict comparison).
    #[arg(long)]
    r_threshold: Option<usize>,
    #[arg(long)]
    distance_threshold: Option<f64>,
    /// Fraction of key positions masked per judged pass.
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Mask sampling: seeded or exhaustive.
    #[arg(long)]
    masking: Option<MaskingMode>,
}

impl DetectFlags {
    fn apply(&self, d: &mut DetectionConfig) {
        if let Some(v) = self.mode {
            d.mode = v;
        }
        if let Some(v) = self.top_g {
            d.top_g = v;
        }
        if let Some(v) = self.r_threshold {
            d.r_threshold = v;
        }
        if let Some(v) = self.distance_threshold {
            d.distance_threshold = v;
        }
        if let Some(v) = self.mask_ratio {
            d.mask_ratio = v;
        }
        if let Some(v) = self.masking {
            d.masking = v;
        }
    }
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled validation sequences with both classes present.
    #[arg(long)]
    sequences: PathBuf,
    #[command(flatten)]
    flags: DetectFlags,
    /// Write the full configuration with the tuned detection section.
    #[arg(long)]
    out_config: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequences to judge.
    #[arg(long)]
    sequences: PathBuf,
    /// Verdict stream output (one JSON record per line).
    #[arg(long)]
    verdicts: Option<PathBuf>,
    #[command(flatten)]
    flags: DetectFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled sequences to judge and score.
    #[arg(long)]
    sequences: PathBuf,
    /// Tune (g, r) or the distance threshold on this labeled validation
    /// file before judging.
    #[arg(long)]
    tune_on: Option<PathBuf>,
    /// Verdict stream output.
    #[arg(long)]
    verdicts: Option<PathBuf>,
    /// Metrics report output (plain text; also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Metrics record output (single JSON object).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    flags: DetectFlags,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sequences: PathBuf,
    /// CSV output with a header row.
    #[arg(long)]
    out: PathBuf,
}

/// External ground-truth record for `sequence --labels`.
#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    group_id: String,
    label: Label,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    let quiet = cli.quiet;
    match cli.command {
        Command::Parse(args) => cmd_parse(cfg, quiet, args),
        Command::Sequence(args) => cmd_sequence(cfg, quiet, args),
        Command::Synth(args) => cmd_synth(cfg, quiet, args),
        Command::Train(args) => cmd_train(cfg, quiet, args),
        Command::Tune(args) => cmd_tune(cfg, quiet, args),
        Command::Detect(args) => cmd_detect(cfg, quiet, args),
        Command::Eval(args) => cmd_eval(cfg, quiet, args),
        Command::ExportEmbeddings(args) => cmd_export(cfg, quiet, args),
    }
}

/// Echo the settings a command is about to act on, defaults and data-
/// derived values materialized.
fn echo_config(cfg: &RunConfig, quiet: bool) {
    if quiet {
        return;
    }
    eprintln!("resolved configuration:");
    for line in cfg.to_toml().lines() {
        eprintln!("  {line}");
    }
}

fn cmd_parse(mut cfg: RunConfig, quiet: bool, args: ParseArgs) -> Result<()> {
    if let Some(kind) = args.adapter {
        cfg.adapter = kind;
    }
    let cfg = cfg.resolve();
    echo_config(&cfg, quiet);

    let adapter = Adapter::new(cfg.adapter.spec())?;
    let mut state = ParserState::new(cfg.parser.clone())?;
    let reader = BufReader::new(
        File::open(&args.input)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", args.input.display())))?,
    );
    let mut events: Vec<ParsedEvent> = Vec::new();
    let mut skipped = 0u64;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw = match adapter.split_line(&line) {
            Ok(raw) => raw,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        match state.parse_line(&raw.content) {
            Some(template_id) => events.push(ParsedEvent {
                line_no: i as u64 + 1,
                timestamp: raw.timestamp,
                session_key: raw.session_key,
                template_id,
                alert: raw.alert,
            }),
            None => skipped += 1,
        }
    }
    jsonl::write_jsonl(&args.templates, &state.template_records())?;
    jsonl::write_jsonl(&args.events, &events)?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} malformed or empty lines");
    }
    if state.templates().is_empty() {
        eprintln!("warning: no templates mined; the input held no usable lines");
    }
    println!("templates {} events {}", state.templates().len(), events.len());
    Ok(())
}

fn cmd_sequence(mut cfg: RunConfig, quiet: bool, args: SequenceArgs) -> Result<()> {
    if let Some(g) = args.grouping {
        cfg.sequence.grouping = g;
    }
    if let Some(w) = args.window_secs {
        cfg.sequence.window_secs = w;
    }
    let cfg = cfg.resolve();
    echo_config(&cfg, quiet);

    let events: Vec<ParsedEvent> = jsonl::read_jsonl(&args.events)?;
    let (mut sequences, report) = match cfg.sequence.grouping {
        Grouping::Session => sequence::group_by_session(&events),
        Grouping::Window => sequence::group_by_time_window(&events, cfg.sequence.window_secs)?,
    };
    if let Some(path) = &args.labels {
        let records: Vec<LabelRecord> = jsonl::read_jsonl(path)?;
        let map: HashMap<String, Label> =
            records.into_iter().map(|r| (r.group_id, r.label)).collect();
        sequence::apply_session_labels(&mut sequences, &map);
    }
    jsonl::write_jsonl(&args.out, &sequences)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_synth(mut cfg: RunConfig, quiet: bool, args: SynthArgs) -> Result<()> {
    if let Some(v) = args.n_train {
        cfg.synth.n_train = v;
    }
    if let Some(v) = args.n_val {
        cfg.synth.n_val = v;
    }
    if let Some(v) = args.n_test {
        cfg.synth.n_test = v;
    }
    if let Some(v) = args.anomaly_rate {
        cfg.synth.anomaly_rate = v;
    }
    if let Some(v) = args.seq_len {
        cfg.synth.seq_len = v;
    }
    let cfg = cfg.resolve();
    echo_config(&cfg, quiet);

    let corpus = synth::generate(&cfg.synth)?;
    std::fs::create_dir_all(&args.out_dir)?;
    jsonl::write_jsonl(&args.out_dir.join("train.jsonl"), &corpus.train)?;
    jsonl::write_jsonl(&args.out_dir.join("val.jsonl"), &corpus.val)?;
    jsonl::write_jsonl(&args.out_dir.join("test.jsonl"), &corpus.test)?;
    println!(
        "train {} val {} test {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    Ok(())
}

fn encode_all(sequences: &[LogSequence], vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedSequence>> {
    let mut chunks = Vec::with_capacity(sequences.len());
    for s in sequences {
        chunks.extend(encode(&s.keys, vocab, max_len)?);
    }
    Ok(chunks)
}

fn cmd_train(mut cfg: RunConfig, quiet: bool, args: TrainArgs) -> Result<()> {
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.alpha {
        cfg.train.alpha = v;
    }
    if let Some(v) = args.mask_ratio {
        cfg.train.mask_ratio = v;
    }
    if let Some(v) = args.objective {
        cfg.train.objective = v;
    }
    if let Some(v) = args.log_every {
        cfg.train.log_every = v;
    }
    if let Some(v) = args.d_embed {
        cfg.model.d_embed = v;
    }
    if let Some(v) = args.d_model {
        cfg.model.d_model = v;
    }
    if let Some(v) = args.d_ff {
        cfg.model.d_ff = v;
    }
    if let Some(v) = args.n_heads {
        cfg.model.n_heads = v;
    }
    if let Some(v) = args.n_layers {
        cfg.model.n_layers = v;
    }
    if let Some(v) = args.max_len {
        cfg.model.max_len = v;
    }
    let mut cfg = cfg.resolve();

    let sequences: Vec<LogSequence> = jsonl::read_jsonl(&args.sequences)?;
    // one-class training: the model must only ever see normal behavior
    let n_total = sequences.len();
    let training: Vec<LogSequence> = sequences
        .into_iter()
        .filter(|s| s.label != Label::Anomalous)
        .collect();
    let dropped = n_total - training.len();
    if dropped > 0 {
        eprintln!("warning: excluded {dropped} anomalous-labeled sequences from training");
    }
    if training.is_empty() {
        return Err(Error::Data("no normal sequences to train on".into()));
    }

    let vocab = Vocab::build(training.iter().map(|s| s.keys.as_slice()))?;
    if cfg.model.vocab_size == 0 {
        cfg.model.vocab_size = vocab.size();
    } else if cfg.model.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "config says vocab_size {}, the data's vocabulary has {}",
            cfg.model.vocab_size,
            vocab.size()
        )));
    }
    echo_config(&cfg, quiet);

    let chunks = encode_all(&training, &vocab, cfg.model.max_len)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    match train::fit(&mut model, &chunks, &cfg.train) {
        Ok(out) => {
            checkpoint::save(&args.checkpoint, &cfg, &vocab, &model, &out.center.vec)?;
            if let Some(path) = &args.loss_curve {
                jsonl::write_jsonl(path, &out.stats)?;
            }
            let last = out.stats.last().expect("at least one epoch");
            println!(
                "trained {} epochs  total {:.6}  mlkp {:.6}  vhm {:.6}",
                out.stats.len(),
                last.total,
                last.mlkp,
                last.vhm
            );
            println!("checkpoint {}", args.checkpoint.display());
            Ok(())
        }
        Err(e @ Error::Numeric(_)) => {
            // keep the final parameters on disk for post-mortem work, then
            // report the failure
            let center = train::compute_center(&model, &chunks)
                .map(|c| c.vec)
                .unwrap_or_else(|_| Array1::zeros(cfg.model.d_model));
            if let Err(save_err) = checkpoint::save(&args.checkpoint, &cfg, &vocab, &model, &center)
            {
                eprintln!("additionally failed to save the last state: {save_err}");
            } else {
                eprintln!(
                    "training aborted; last state saved to {}",
                    args.checkpoint.display()
                );
            }
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Working detection settings for a checkpoint: the training run's
/// recorded detect section, overridden by the current file (when given)
/// and flags. The mask ratio follows the training ratio unless a file or
/// flag changed it.
fn detection_config(
    loaded: &checkpoint::Loaded,
    current: &RunConfig,
    explicit_file: bool,
    flags: &DetectFlags,
) -> DetectionConfig {
    let mut d = if explicit_file {
        current.detect.clone()
    } else {
        loaded.config.detect.clone()
    };
    if d.mask_ratio == DetectionConfig::default().mask_ratio {
        d.mask_ratio = loaded.config.train.mask_ratio;
    }
    flags.apply(&mut d);
    d
}

fn echo_detection(cfg: &RunConfig, detect_cfg: &DetectionConfig, quiet: bool) {
    let mut shown = cfg.clone();
    shown.detect = detect_cfg.clone();
    echo_config(&shown, quiet);
}

fn cmd_tune(cfg: RunConfig, quiet: bool, args: TuneArgs) -> Result<()> {
    let explicit_file = true_when_detect_overridden(&cfg);
    let cfg = cfg.resolve();
    let loaded = checkpoint::load(&args.checkpoint)?;
    let dcfg = detection_config(&loaded, &cfg, explicit_file, &args.flags);
    echo_detection(&loaded.config, &dcfg, quiet);

    let sequences: Vec<LogSequence> = jsonl::read_jsonl(&args.sequences)?;
    let scores = detect::score_sequences(
        &loaded.model,
        &loaded.vocab,
        &loaded.center,
        &sequences,
        &dcfg,
    )?;
    let outcome = detect::tune(&scores, &dcfg, loaded.vocab.size())?;
    match outcome.config.mode {
        DetectMode::TopgR => println!(
            "tuned mode topg_r top_g {} r_threshold {} f1 {:.2} grid {}",
            outcome.config.top_g,
            outcome.config.r_threshold,
            outcome.best_f1,
            outcome.grid_points
        ),
        DetectMode::Distance => println!(
            "tuned mode distance distance_threshold {} f1 {:.2} grid {}",
            outcome.config.distance_threshold, outcome.best_f1, outcome.grid_points
        ),
    }
    if let Some(path) = &args.out_config {
        let mut tuned = loaded.config.clone();
        tuned.detect = outcome.config.clone();
        std::fs::write(path, tuned.to_toml())?;
        eprintln!("tuned configuration written to {}", path.display());
    }
    Ok(())
}

/// Whether the caller supplied detection settings of their own in the
/// config file (anything differing from the defaults counts).
fn true_when_detect_overridden(cfg: &RunConfig) -> bool {
    cfg.detect != DetectionConfig::default()
}

fn cmd_detect(cfg: RunConfig, quiet: bool, args: DetectArgs) -> Result<()> {
    let explicit_file = true_when_detect_overridden(&cfg);
    let cfg = cfg.resolve();
    let loaded = checkpoint::load(&args.checkpoint)?;
    let dcfg = detection_config(&loaded, &cfg, explicit_file, &args.flags);
    echo_detection(&loaded.config, &dcfg, quiet);

    let sequences: Vec<LogSequence> = jsonl::read_jsonl(&args.sequences)?;
    let verdicts = detect::detect(
        &loaded.model,
        &loaded.vocab,
        &loaded.center,
        &sequences,
        &dcfg,
    )?;
    let anomalous = verdicts.iter().filter(|v| v.is_anomalous).count();
    if let Some(path) = &args.verdicts {
        jsonl::write_jsonl(path, &verdicts)?;
    }
    println!("sequences {} anomalous {}", verdicts.len(), anomalous);
    Ok(())
}

fn cmd_eval(cfg: RunConfig, quiet: bool, args: EvalArgs) -> Result<()> {
    let explicit_file = true_when_detect_overridden(&cfg);
    let cfg = cfg.resolve();
    let loaded = checkpoint::load(&args.checkpoint)?;
    let mut dcfg = detection_config(&loaded, &cfg, explicit_file, &args.flags);

    if let Some(path) = &args.tune_on {
        let validation: Vec<LogSequence> = jsonl::read_jsonl(path)?;
        let scores = detect::score_sequences(
            &loaded.model,
            &loaded.vocab,
            &loaded.center,
            &validation,
            &dcfg,
        )?;
        let outcome = detect::tune(&scores, &dcfg, loaded.vocab.size())?;
        eprintln!(
            "tuned on {}: top_g {} r_threshold {} distance_threshold {} f1 {:.2}",
            path.display(),
            outcome.config.top_g,
            outcome.config.r_threshold,
            outcome.config.distance_threshold,
            outcome.best_f1
        );
        dcfg = outcome.config;
    }
    echo_detection(&loaded.config, &dcfg, quiet);

    let sequences: Vec<LogSequence> = jsonl::read_jsonl(&args.sequences)?;
    let verdicts = detect::detect(
        &loaded.model,
        &loaded.vocab,
        &loaded.center,
        &sequences,
        &dcfg,
    )?;
    if verdicts.iter().all(|v| v.label == Label::Unknown) {
        eprintln!("warning: no labeled sequences; every metric is undefined");
    }
    let metrics = eval::compute_metrics(verdicts.iter().map(|v| (v.label, v.is_anomalous)));
    let report = eval::render_metrics_report(&metrics);

    if let Some(path) = &args.verdicts {
        jsonl::write_jsonl(path, &verdicts)?;
    }
    if let Some(path) = &args.report {
        std::fs::write(path, &report)?;
    }
    if let Some(path) = &args.metrics {
        std::fs::write(path, format!("{}\n", serde_json::to_string(&metrics)?))?;
    }
    print!("{report}");
    Ok(())
}

fn cmd_export(cfg: RunConfig, quiet: bool, args: ExportArgs) -> Result<()> {
    let _ = cfg;
    let loaded = checkpoint::load(&args.checkpoint)?;
    echo_config(&loaded.config, quiet);
    let sequences: Vec<LogSequence> = jsonl::read_jsonl(&args.sequences)?;
    let mut writer = BufWriter::new(File::create(&args.out)?);
    let n = eval::export_embeddings(&loaded.model, &loaded.vocab, &sequences, &mut writer)?;
    use std::io::Write;
    writer.flush()?;
    println!("records {n}");
    Ok(())
}

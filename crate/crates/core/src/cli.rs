//! Command-line front end. `main` parses arguments and maps the outcome to
//! an exit code; everything else lives here so tests can drive it.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::checks::{self, SuiteConfig, FORCED_BUG};
use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, load_ubc, load_verification_pairs, sample_verification_pairs, PatchDataset, VerificationPairs,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_verification, nn_matching_accuracy, stats_report};
use crate::modulation::SelfWeightMode;
use crate::rng::{stream_rng, Stream};
use crate::trainer::{self, Checkpoint, MetricsRow, Model, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sdgm", version, about = "Triplet descriptor training with statistic-based gradient modulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an encoder and write metrics and checkpoints.
    Train(TrainArgs),
    /// FPR@95 and nearest-neighbour accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference checks of every gradient in the pipeline.
    Gradcheck(GradcheckArgs),
    /// Train one model per self-weight / power-adjustment cell.
    Ablate(AblateArgs),
    /// Statistics table from a metrics log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config, self.seed)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pair list in the UBC format; overrides `pairs_file`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test hook: scales every matrix-product adjoint by 1.01 so the
    /// parameter checks must fail.
    #[arg(long)]
    pub force_bug: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated cells such as `af+pa,theta-pa`; all eight by default.
    #[arg(long)]
    pub cells: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics CSV written by `train`.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,50,100,150,200")]
    pub epochs: Vec<u64>,
    /// Defaults to a two-hundredth of `iterations` from `--config`.
    #[arg(long)]
    pub iterations_per_epoch: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// What a successful command concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    ChecksFailed,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => EXIT_OK,
            Outcome::ChecksFailed => EXIT_CHECK_FAILED,
        }
    }
}

pub fn execute(cli: Cli, out: &mut impl Write) -> Result<Outcome> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn print_config(out: &mut impl Write, cfg: &RunConfig) -> Result<()> {
    writeln!(out, "# resolved config\n{}", cfg.to_toml()).map_err(stdout_err)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn training_data(cfg: &RunConfig) -> Result<PatchDataset> {
    match &cfg.ubc_dir {
        Some(dir) => load_ubc(dir, cfg.patch_size),
        None => generate_synthetic(&cfg.synth()),
    }
}

/// Evaluation patches and pairs: a UBC subset with its pair list when one is
/// configured, held-out synthetic classes otherwise.
pub fn evaluation_data(cfg: &RunConfig, pairs_override: Option<&Path>) -> Result<(PatchDataset, VerificationPairs)> {
    let pairs_file = pairs_override.or(cfg.pairs_file.as_deref());
    let (dataset, pairs) = match pairs_file {
        Some(file) => {
            let dir = cfg.eval_ubc_dir.as_ref().or(cfg.ubc_dir.as_ref()).ok_or_else(|| {
                Error::Config("a pair list needs `eval_ubc_dir` or `ubc_dir`".into())
            })?;
            (load_ubc(dir, cfg.patch_size)?, load_verification_pairs(file)?)
        }
        None => {
            let ds = generate_synthetic(&cfg.heldout_synth())?;
            let mut rng = stream_rng(cfg.seed, Stream::EvalPairs, 0, 0);
            let pairs = sample_verification_pairs(&ds, cfg.eval_matches, cfg.eval_non_matches, &mut rng)?;
            (ds, pairs)
        }
    };
    pairs.check_indices(dataset.len())?;
    Ok((dataset, pairs))
}

/// First and second patch of every class with two or more patches.
fn nn_split(ds: &PatchDataset) -> Result<(PatchDataset, PatchDataset)> {
    let classes = ds.trainable_classes();
    let take = |slot: usize| {
        let rows: Vec<usize> = classes.iter().map(|c| ds.class_members(*c)[slot]).collect();
        let dim = ds.pixels().ncols();
        let pixels = Array2::from_shape_fn((rows.len(), dim), |(r, k)| ds.pixels()[[rows[r], k]]);
        let ids: Vec<u64> = classes.iter().map(|c| ds.class_id(*c)).collect();
        PatchDataset::new(ds.patch_size(), pixels, &ids)
    };
    Ok((take(0)?, take(1)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub fpr95: f64,
    pub nn_accuracy: f64,
}

pub fn evaluate(model: &Model, dataset: &PatchDataset, pairs: &VerificationPairs) -> Result<EvalSummary> {
    let fpr95 = evaluate_verification(model, dataset, pairs)?;
    let (reference, query) = nn_split(dataset)?;
    let nn_accuracy = nn_matching_accuracy(model, &reference, &query)?;
    Ok(EvalSummary { fpr95, nn_accuracy })
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

/// Keeps the header and the rows before `iteration` of an existing log, so a
/// resumed run does not duplicate rows.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|f| f.parse::<u64>().ok())
                .is_some_and(|it| it < iteration);
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn cmd_train(args: &TrainArgs, out: &mut impl Write) -> Result<Outcome> {
    let cfg = args.run.resolve()?;
    print_config(out, &cfg)?;
    let train_cfg = cfg.train();
    let dataset = training_data(&cfg)?;
    let mut state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.state.model.config != cfg.encoder() {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different encoder configuration",
                    path.display()
                )));
            }
            writeln!(out, "resuming at iteration {}", ck.state.iteration()).map_err(stdout_err)?;
            ck.state
        }
        None => TrainState::new(Model::init(cfg.encoder())?),
    };
    create_dir(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let log_path = cfg.out_dir.join("metrics.csv");
    let append = args.resume.is_some() && log_path.exists();
    if append {
        truncate_log(&log_path, state.iteration())?;
    }
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::Writer::from_writer(file);
    if !append {
        log.write_record(MetricsRow::header()).map_err(csv_error(&log_path))?;
    }

    let total = train_cfg.total_iterations;
    let progress_every = (total / 20).max(1);
    let run_config = cfg.to_toml();
    let mut skipped = 0u64;
    trainer::run(&mut state, &dataset, &train_cfg, &cfg.augment(), total, |st, row| {
        let it = row.iteration;
        if row.pseudo_loss.is_nan() {
            skipped += 1;
        }
        if it % cfg.log_interval == 0 || it + 1 == total {
            log.write_record(row.record()).map_err(csv_error(&log_path))?;
        }
        if (it + 1) % progress_every == 0 {
            writeln!(
                out,
                "iteration {:>6}  lr {:.5}  pseudo_loss {:+.6}  valid {}",
                it + 1,
                row.lr,
                row.pseudo_loss,
                row.valid_triplets
            )
            .map_err(stdout_err)?;
        }
        if cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0 {
            let ck = Checkpoint {
                run_config: run_config.clone(),
                state: st.clone(),
            };
            ck.save(&cfg.out_dir.join(format!("checkpoint-{}.bin", it + 1)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let ck_path = cfg.out_dir.join("checkpoint.bin");
    Checkpoint {
        run_config,
        state: state.clone(),
    }
    .save(&ck_path)?;
    let (eval_ds, pairs) = evaluation_data(&cfg, None)?;
    let summary = evaluate(&state.model, &eval_ds, &pairs)?;
    writeln!(
        out,
        "trained {} iterations ({skipped} skipped this session)\nfpr95 {:.4}\nnn_accuracy {:.4}\ncheckpoint {}\nmetrics {}",
        state.iteration(),
        summary.fpr95,
        summary.nn_accuracy,
        ck_path.display(),
        log_path.display()
    )
    .map_err(stdout_err)?;
    Ok(Outcome::Success)
}

fn cmd_eval(args: &EvalArgs, out: &mut impl Write) -> Result<Outcome> {
    let cfg = args.run.resolve()?;
    print_config(out, &cfg)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (dataset, pairs) = evaluation_data(&cfg, args.pairs.as_deref())?;
    let summary = evaluate(&ck.state.model, &dataset, &pairs)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("eval.csv");
    let text = format!(
        "metric,value\nfpr95,{}\nnn_accuracy,{}\npairs,{}\n",
        summary.fpr95,
        summary.nn_accuracy,
        pairs.pairs().len()
    );
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    writeln!(
        out,
        "checkpoint {} at iteration {}\nfpr95 {:.4}\nnn_accuracy {:.4}\nwritten {}",
        args.checkpoint.display(),
        ck.state.iteration(),
        summary.fpr95,
        summary.nn_accuracy,
        path.display()
    )
    .map_err(stdout_err)?;
    Ok(Outcome::Success)
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut impl Write) -> Result<Outcome> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path, args.seed)?,
        None => RunConfig {
            seed: args.seed.unwrap_or(0),
            ..RunConfig::default()
        },
    };
    let suite = SuiteConfig {
        seed: cfg.seed,
        patch_size: cfg.patch_size,
        use_frn: cfg.use_frn,
        dropout_rate: cfg.dropout,
        modulation: cfg.modulation(),
        fault: args.force_bug.then_some(FORCED_BUG),
    };
    print_config(out, &cfg)?;
    let enc = suite.encoder();
    writeln!(
        out,
        "# gradcheck encoder widths {:?} -> {}, forced bug {}",
        enc.widths, enc.output_dim, args.force_bug
    )
    .map_err(stdout_err)?;
    let results = checks::run_suite(&suite)?;
    let mut all_passed = true;
    for c in &results {
        all_passed &= c.passed();
        writeln!(
            out,
            "{:<28} max_rel_err {:.3e}  tolerance {:.0e}  values {:>6}  {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.checked,
            if c.passed() { "PASS" } else { "FAIL" }
        )
        .map_err(stdout_err)?;
    }
    Ok(if all_passed {
        Outcome::Success
    } else {
        Outcome::ChecksFailed
    })
}

/// One cell of the ablation matrix, written `<mode>+pa` or `<mode>-pa`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub self_weight: SelfWeightMode,
    pub power_adjust: bool,
}

impl AblationCell {
    pub fn all() -> Vec<Self> {
        SelfWeightMode::ALL
            .into_iter()
            .flat_map(|m| {
                [true, false].map(|pa| AblationCell {
                    self_weight: m,
                    power_adjust: pa,
                })
            })
            .collect()
    }

    pub fn parse_list(text: &str) -> Result<Vec<Self>> {
        text.split(',').map(|s| s.trim().parse()).collect()
    }
}

impl std::fmt::Display for AblationCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}pa", self.self_weight, if self.power_adjust { '+' } else { '-' })
    }
}

impl std::str::FromStr for AblationCell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mode, power_adjust) = if let Some(m) = s.strip_suffix("+pa") {
            (m, true)
        } else if let Some(m) = s.strip_suffix("-pa") {
            (m, false)
        } else {
            return Err(Error::Config(format!("ablation cell `{s}` must end in +pa or -pa")));
        };
        Ok(Self {
            self_weight: mode.parse()?,
            power_adjust,
        })
    }
}

fn cmd_ablate(args: &AblateArgs, out: &mut impl Write) -> Result<Outcome> {
    let cfg = args.run.resolve()?;
    let cells = match &args.cells {
        Some(list) => AblationCell::parse_list(list)?,
        None => AblationCell::all(),
    };
    print_config(out, &cfg)?;
    let names: Vec<String> = cells.iter().map(ToString::to_string).collect();
    writeln!(out, "# cells {}", names.join(",")).map_err(stdout_err)?;
    let dataset = training_data(&cfg)?;
    let (eval_ds, pairs) = evaluation_data(&cfg, None)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("ablation.csv");
    let mut csv = csv::Writer::from_path(&path).map_err(csv_error(&path))?;
    csv.write_record(["cell", "self_weight", "power_adjust", "fpr95", "nn_accuracy"])
        .map_err(csv_error(&path))?;
    for cell in &cells {
        let cell_cfg = RunConfig {
            self_weight: cell.self_weight,
            power_adjust: cell.power_adjust,
            ..cfg.clone()
        };
        let train_cfg = cell_cfg.train();
        let mut state = TrainState::new(Model::init(cell_cfg.encoder())?);
        trainer::run(&mut state, &dataset, &train_cfg, &cell_cfg.augment(), train_cfg.total_iterations, |_, _| Ok(()))?;
        let summary = evaluate(&state.model, &eval_ds, &pairs)?;
        csv.write_record([
            cell.to_string(),
            cell.self_weight.to_string(),
            cell.power_adjust.to_string(),
            summary.fpr95.to_string(),
            summary.nn_accuracy.to_string(),
        ])
        .map_err(csv_error(&path))?;
        writeln!(out, "{cell:<10} fpr95 {:.4}  nn_accuracy {:.4}", summary.fpr95, summary.nn_accuracy)
            .map_err(stdout_err)?;
    }
    csv.flush().map_err(|e| Error::io(&path, e))?;
    writeln!(out, "written {}", path.display()).map_err(stdout_err)?;
    Ok(Outcome::Success)
}

fn cmd_report(args: &ReportArgs, out: &mut impl Write) -> Result<Outcome> {
    let per_epoch = match (args.iterations_per_epoch, &args.config) {
        (Some(n), _) => n,
        (None, Some(path)) => (RunConfig::load(path, None)?.iterations / 200).max(1),
        (None, None) => {
            return Err(Error::Config(
                "report needs --iterations-per-epoch or --config".into(),
            ))
        }
    };
    if per_epoch == 0 || args.epochs.is_empty() || args.epochs.contains(&0) {
        return Err(Error::Config("epochs and iterations per epoch must be positive".into()));
    }
    writeln!(
        out,
        "# resolved report\nlog = \"{}\"\nepochs = {:?}\niterations_per_epoch = {per_epoch}\n",
        args.log.display(),
        args.epochs
    )
    .map_err(stdout_err)?;
    let table = stats_report(&args.log, &args.epochs, per_epoch)?;
    write!(out, "{table}").map_err(stdout_err)?;
    Ok(Outcome::Success)
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use sporadic::harness::{
    self, ColumnReport, PipelineOptions, RunConfig, SsdlReport, Timings, EXP1_HEADER, EXP2_HEADER,
};
use sporadic::io;
use sporadic::oracle::{self, DictionaryEstimate, SupportBuilder};
use sporadic::spectral::SubspaceRecovery;
use sporadic::{intersect, match_columns, Error, Problem, ProblemConfig, SampleSet};

const BUILD: &str = env!("SPORADIC_GIT_DESCRIBE");

#[derive(Parser)]
#[command(name = "sporadic", version, about = "Sparse dictionary learning by subspace intersection")]
struct Cli {
    /// TOML or JSON run config, or a `.meta.json` sidecar from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the problem or experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ProblemDir {
    /// Problem directory holding `config.json` and `Y.csv`; defaults to `--out`.
    #[arg(long)]
    problem: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instance.
    Gen,
    /// Recover spanning subspaces and write them as `S_<j>.csv`.
    Recover {
        #[command(flatten)]
        dir: ProblemDir,
        /// Index of a single sample.
        #[arg(long, conflicts_with = "all")]
        j: Option<usize>,
        /// Every sample used by intersection.
        #[arg(long)]
        all: bool,
    },
    /// Intersect recovered subspaces into candidate columns.
    Ssdl {
        #[command(flatten)]
        dir: ProblemDir,
    },
    /// Estimate supports and refine the candidates.
    Refine {
        #[command(flatten)]
        dir: ProblemDir,
        /// Directory holding `Dhat.csv`; defaults to `--out`.
        #[arg(long)]
        ssdl: Option<PathBuf>,
    },
    /// Average samples over estimated supports.
    Average {
        #[command(flatten)]
        dir: ProblemDir,
        /// Directory holding `Dtil.csv` and `supports.csv`; defaults to `--out`.
        #[arg(long)]
        refined: Option<PathBuf>,
    },
    /// Score an estimate against a ground-truth dictionary.
    Eval {
        /// Problem directory with `D.csv`.
        #[arg(long)]
        truth: PathBuf,
        /// Estimated dictionary CSV.
        #[arg(long)]
        est: PathBuf,
    },
    /// Generate, learn and score one instance end to end.
    Pipeline,
    /// Largest sparsity passing the intersection accuracy gate.
    Exp1,
    /// Per-stage column error against the sample count.
    Exp2,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_config() => 2,
        Some(err) if err.is_numerical() => 3,
        _ if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) => 2,
        _ => 1,
    }
}

/// Missing or contradictory command-line configuration.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

struct Ctx {
    config: RunConfig,
    seed: Option<u64>,
    jobs: usize,
    out: PathBuf,
}

impl Ctx {
    fn problem_config(&self) -> Result<ProblemConfig> {
        let Some(cfg) = &self.config.problem else {
            return Err(config_error("the config has no [problem] section"));
        };
        let cfg = match self.seed {
            Some(seed) => cfg.clone().with_seed(seed),
            None => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn experiment(&mut self) -> Result<sporadic::harness::ExperimentSpec> {
        let Some(spec) = self.config.experiment.as_mut() else {
            return Err(config_error("the config has no [experiment] section"));
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        spec.validate()?;
        Ok(spec.clone())
    }

    fn dir(&self, dir: &Option<PathBuf>) -> PathBuf {
        dir.clone().unwrap_or_else(|| self.out.clone())
    }

    fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(config_error("--jobs must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    let mut ctx = Ctx {
        config,
        seed: cli.seed,
        jobs,
        out: cli.out,
    };
    match cli.command {
        Command::Gen => gen(&ctx),
        Command::Recover { dir, j, all } => recover(&ctx, &ctx.dir(&dir.problem), j, all),
        Command::Ssdl { dir } => ssdl(&ctx, &ctx.dir(&dir.problem)),
        Command::Refine { dir, ssdl } => refine(&ctx, &ctx.dir(&dir.problem), &ctx.dir(&ssdl)),
        Command::Average { dir, refined } => average(&ctx, &ctx.dir(&dir.problem), &ctx.dir(&refined)),
        Command::Eval { truth, est } => eval(&ctx, &truth, &est),
        Command::Pipeline => pipeline(&ctx),
        Command::Exp1 => exp1(&mut ctx),
        Command::Exp2 => exp2(&mut ctx),
    }
}

fn gen(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.problem_config()?;
    ctx.create_out()?;
    let problem = Problem::generate(&cfg)?;
    io::write_problem(&ctx.out, &problem)?;
    info!("wrote M={} K={} s={} N={} to {}", cfg.m, cfg.k, cfg.s, cfg.n, ctx.out.display());
    Ok(())
}

fn load(dir: &Path) -> Result<(ProblemConfig, SampleSet)> {
    let cfg: ProblemConfig = io::load_config(&dir.join(io::CONFIG_FILE))?;
    let samples = io::read_samples(dir)?;
    if samples.m() != cfg.m || samples.n() != cfg.n {
        bail!(Error::Dimension {
            context: "Y.csv against config.json",
            expected: cfg.m * cfg.n,
            found: samples.m() * samples.n(),
        });
    }
    Ok((cfg, samples))
}

fn recover(ctx: &Ctx, dir: &Path, j: Option<usize>, all: bool) -> Result<()> {
    let (cfg, samples) = load(dir)?;
    let range = match (j, all) {
        (Some(j), _) if j >= samples.n() => {
            return Err(config_error(format!("--j {j} is out of range for n = {}", samples.n())))
        }
        (Some(j), _) => j..j + 1,
        (None, true) => 0..ctx.config.intersect.resolve(cfg.k, cfg.s)?.samples_used().min(samples.n()),
        (None, false) => return Err(config_error("pass --j <idx> or --all")),
    };
    ctx.create_out()?;
    let mut recovery = SubspaceRecovery::new(&samples, cfg.s)?;
    recovery.plan(range.len(), ctx.config.memory_budget());
    recovery.recover_batches(range.clone(), ctx.jobs, |start, batch| {
        for (offset, sub) in batch.iter().enumerate() {
            io::write_subspace(&ctx.out, start + offset, sub)?;
        }
        Ok(())
    })?;
    info!("wrote {} subspaces", range.len());
    Ok(())
}

fn ssdl(ctx: &Ctx, dir: &Path) -> Result<()> {
    let (cfg, samples) = load(dir)?;
    let icfg = ctx.config.intersect.resolve(cfg.k, cfg.s)?;
    let used = icfg.samples_used();
    if used > samples.n() {
        return Err(config_error(format!("J = {used} exceeds n = {}", samples.n())));
    }
    ctx.create_out()?;
    let mut timings = Timings::default();
    let t = Instant::now();
    let mut recovery = SubspaceRecovery::new(&samples, cfg.s)?;
    recovery.plan(used, ctx.config.memory_budget());
    let subspaces = recovery.recover_range(0..used, ctx.jobs)?;
    timings.stages.insert("subspace_recovery".into(), t.elapsed().as_secs_f64());
    let t = Instant::now();
    let set = intersect::intersect_blocks(&subspaces, &icfg)?;
    timings.stages.insert("intersection".into(), t.elapsed().as_secs_f64());
    let report = SsdlReport::new(&icfg, &set, recovery.route());
    harness::write_ssdl(&ctx.out, &set, &report, &timings)?;
    info!("{} candidates, {} rejected blocks", set.len(), set.rejected_blocks);
    Ok(())
}

fn refine(ctx: &Ctx, dir: &Path, ssdl_dir: &Path) -> Result<()> {
    let (cfg, samples) = load(dir)?;
    let dhat = DictionaryEstimate::full(io::read_matrix_with_rows(&ssdl_dir.join("Dhat.csv"), cfg.m)?);
    let oracle_cfg = &ctx.config.oracle;
    let n_o = oracle_cfg.oracle_samples.unwrap_or(samples.n()).min(samples.n());
    if n_o == 0 {
        return Err(config_error("oracle_samples must be positive"));
    }
    ctx.create_out()?;
    let mut recovery = SubspaceRecovery::new(&samples, cfg.s)?;
    recovery.plan(n_o, ctx.config.memory_budget());
    let mut builder = SupportBuilder::new(&dhat, oracle_cfg.tau_support)?;
    recovery.recover_batches(0..n_o, ctx.jobs, |_, batch| {
        for sub in &batch {
            builder.push(sub)?;
        }
        Ok(())
    })?;
    let supports = builder.finish();
    let refined = oracle::refine(&samples, recovery.covariance(), &supports)?;
    io::write_supports(&ctx.out.join("supports.csv"), &supports)?;
    let report = ColumnReport::refined(&refined, supports.n(), oracle_cfg.low_confidence_floor);
    harness::write_estimate(&ctx.out, "Dtil", &refined.estimate, &report)?;
    info!("refined {} of {} columns", refined.estimate.present_indices().len(), dhat.k());
    Ok(())
}

fn average(ctx: &Ctx, dir: &Path, refined_dir: &Path) -> Result<()> {
    let (cfg, samples) = load(dir)?;
    let dtil = harness::read_estimate(&refined_dir.join("Dtil.csv"), cfg.m)?;
    let supports = io::read_supports(&refined_dir.join("supports.csv"), dtil.k())?;
    if supports.n() > samples.n() {
        bail!(Error::Dimension {
            context: "supports.csv against Y.csv",
            expected: samples.n(),
            found: supports.n(),
        });
    }
    ctx.create_out()?;
    let averaged = oracle::average(&samples, &supports, &dtil)?;
    let report = ColumnReport::averaged(&averaged, &supports, ctx.config.oracle.low_confidence_floor);
    harness::write_estimate(&ctx.out, "Dbar", &averaged, &report)?;
    Ok(())
}

fn eval(ctx: &Ctx, truth_dir: &Path, est_path: &Path) -> Result<()> {
    let truth = io::read_truth(truth_dir)?;
    let est = harness::read_estimate(est_path, truth.dictionary.m())?;
    let settings = &ctx.config.eval;
    let matching = match_columns(&truth.dictionary, &est, settings.matching)?;
    let metrics = json!({
        "estimate": est_path.display().to_string(),
        "truth_columns": truth.dictionary.k(),
        "estimated_columns": est.present_indices().len(),
        "matched": matching.pairs.len(),
        "recovered": matching.within(settings.recovery_threshold),
        "recovery_threshold": settings.recovery_threshold,
        "total_cost": matching.total_cost(),
        "mean_error": matching.mean_error(),
        "max_error": matching.max_error(),
        "angular_accuracy": sporadic::eval::angular_accuracy(&matching).ok(),
        "unmatched_truth": matching.unmatched_truth,
        "surplus_estimates": matching.surplus_estimates,
    });
    ctx.create_out()?;
    let text = serde_json::to_string_pretty(&metrics)?;
    std::fs::write(ctx.out.join("eval.json"), format!("{text}\n")).context("writing eval.json")?;
    let mut rows = String::from("truth,estimate,sign,error,angular\n");
    for p in &matching.pairs {
        rows.push_str(&format!("{},{},{},{},{}\n", p.truth, p.estimate, p.sign, p.error, p.angular));
    }
    std::fs::write(ctx.out.join("eval_columns.csv"), rows).context("writing eval_columns.csv")?;
    emit(&text);
    Ok(())
}

fn pipeline(ctx: &Ctx) -> Result<()> {
    let cfg = ctx.problem_config()?;
    let opts = PipelineOptions::from_config(&ctx.config, &cfg, ctx.jobs)?;
    ctx.create_out()?;
    let problem = Problem::generate(&cfg)?;
    let run = harness::run_pipeline(&problem, &opts, Some(&ctx.out))?;
    emit(&serde_json::to_string_pretty(&run.summary)?);
    Ok(())
}

/// Print to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

/// The config as actually run, so the sidecar reproduces the output.
fn effective(ctx: &Ctx, spec: sporadic::harness::ExperimentSpec) -> RunConfig {
    RunConfig {
        experiment: Some(spec),
        ..ctx.config.clone()
    }
}

fn exp1(ctx: &mut Ctx) -> Result<()> {
    let spec = ctx.experiment()?;
    if spec.kind != harness::ExperimentKind::Exp1 {
        return Err(config_error("exp1 needs an experiment of kind \"exp1\""));
    }
    let rows = harness::run_exp1(&spec, ctx.jobs)?;
    let csv = harness::format_exp1_csv(&rows)?;
    let path = harness::write_with_sidecar(&ctx.out, "exp1", &csv, &effective(ctx, spec), BUILD)?;
    info!("wrote {} rows ({}) to {}", rows.len(), EXP1_HEADER.join(","), path.display());
    Ok(())
}

fn exp2(ctx: &mut Ctx) -> Result<()> {
    let spec = ctx.experiment()?;
    if spec.kind != harness::ExperimentKind::Exp2 {
        return Err(config_error("exp2 needs an experiment of kind \"exp2\""));
    }
    let rows = harness::run_exp2(&spec, &ctx.config, ctx.jobs)?;
    let csv = harness::format_exp2_csv(&rows)?;
    let path = harness::write_with_sidecar(&ctx.out, "exp2", &csv, &effective(ctx, spec), BUILD)?;
    info!("wrote {} rows ({}) to {}", rows.len(), EXP2_HEADER.join(","), path.display());
    Ok(())
}

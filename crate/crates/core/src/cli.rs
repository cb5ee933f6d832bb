//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 5 evaluation mismatch. Failures print one line to stderr:
//! `error[<kind>]: <message>`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{load_tasks, ConfigFile, RESOLVED_CONFIG_FILE};
use crate::datasets::{self, Primitive};
use crate::error::Error;
use crate::factorization::{
    count_dfcnn, count_l3doc, count_stl, l3doc_breakdown, DfCnnDims, FactorSpec, POINTNET_WIDTHS,
    REPORTED_GROUP1_TOTAL, REPORTED_GROUP2_TOTAL, REPORTED_KERNEL_TOTAL,
};
use crate::metrics::{self, PpaMode, METRICS_FILE, SUMMARY_FILE};
use crate::trainer::{run_sequence, Mode};

#[derive(Debug, Parser)]
#[command(name = "l3doc", version, about = "Lifelong point-cloud classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a task sequence and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter counts for a model family.
    CountParams {
        #[arg(long, value_delimiter = ',', default_value = "3,64,64,64,128,1024")]
        widths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        nhat: usize,
        #[arg(long, default_value_t = 32)]
        lhat: usize,
        #[arg(long, default_value_t = 2)]
        s: usize,
        #[arg(long, default_value_t = 1)]
        tasks: u64,
        #[arg(long, value_enum, default_value_t = Family::L3doc)]
        family: Family,
        #[arg(long, default_value_t = 1)]
        u: u64,
        #[arg(long, default_value_t = 1)]
        vh: u64,
        #[arg(long, default_value_t = 1)]
        vw: u64,
        #[arg(long, default_value_t = 1)]
        lh: u64,
        #[arg(long, default_value_t = 1)]
        lw: u64,
        #[arg(long, default_value_t = 1)]
        lc: u64,
    },
    /// Write a synthetic dataset as PTS files.
    GenSynth {
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute summary.csv from metrics.jsonl and compare.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    L3doc,
    Stl,
    Finetune,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::L3doc => Mode::L3doc,
            ModeArg::Stl => Mode::Stl,
            ModeArg::Finetune => Mode::Finetune,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Stl,
    Dfcnn,
    L3doc,
}

#[derive(Debug)]
pub enum CliError {
    Lib(Error),
    Mismatch(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(Error::Config(_)) => 2,
            CliError::Lib(Error::NonFinite { .. }) => 4,
            CliError::Lib(_) => 3,
            CliError::Mismatch(_) => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Lib(Error::Config(_)) => "config",
            CliError::Lib(Error::NonFinite { .. }) => "numeric",
            CliError::Lib(_) => "data",
            CliError::Mismatch(_) => "mismatch",
        }
    }

    pub fn one_line(&self) -> String {
        let msg = match self {
            CliError::Lib(e) => e.to_string(),
            CliError::Mismatch(m) => m.clone(),
        };
        format!("error[{}]: {}", self.kind(), msg.replace('\n', " "))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Executes a `run`; returns the output directory.
pub fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    mode: Option<Mode>,
    out: Option<PathBuf>,
    eval_threads: usize,
) -> CliResult<PathBuf> {
    let mut cfg = ConfigFile::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if out.is_some() {
        cfg.out = out;
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory (--out or \"out\")".into()))?;
    let (_, tasks) = load_tasks(&cfg.data, cfg.seed)?;
    let outcome = run_sequence(&cfg.experiment(), &tasks, eval_threads)?;
    metrics::export(&outcome.log, &out, cfg.ppa)?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_count_params(
    widths: &[usize],
    n_hat: usize,
    l_hat: usize,
    s: usize,
    tasks: u64,
    family: Family,
    dfcnn: DfCnnDims,
) -> CliResult<String> {
    let mut out = String::new();
    match family {
        Family::Stl => {
            let total = count_stl(widths, tasks)?;
            let _ = writeln!(out, "{total}");
            if widths == POINTNET_WIDTHS {
                let reported = REPORTED_KERNEL_TOTAL * tasks;
                let _ = writeln!(
                    out,
                    "paper-reported {reported} (formula {total}, difference {})",
                    total as i64 - reported as i64
                );
            }
        }
        Family::Dfcnn => {
            let _ = writeln!(out, "{}", count_dfcnn(widths, dfcnn, tasks)?);
        }
        Family::L3doc => {
            let spec = FactorSpec::new(n_hat, l_hat, s, widths.to_vec())?;
            let total = count_l3doc(&spec, tasks);
            let stl = count_stl(widths, tasks)?;
            let _ = writeln!(out, "{total}");
            let _ = writeln!(out, "layer,w_in,w_out,n,l_out,per_task,shared,total");
            for (i, lc) in l3doc_breakdown(&spec).iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    i + 1,
                    lc.shape.w_in,
                    lc.shape.w_out,
                    lc.shape.latent,
                    lc.shape.knowledge,
                    lc.per_task,
                    lc.shared,
                    lc.total(tasks)
                );
            }
            let _ = writeln!(out, "stl {stl}");
            if total > 0 {
                let _ = writeln!(out, "stl_over_l3doc {:.4}", stl as f64 / total as f64);
            }
            if let Some(reported) = reported_total(&spec, tasks) {
                let _ = writeln!(
                    out,
                    "paper-reported {reported} (formula {total}, difference {})",
                    total as i64 - reported as i64
                );
            }
        }
    }
    Ok(out)
}

/// Total quoted for the reference presets at ten tasks, if `spec` is one.
pub fn reported_total(spec: &FactorSpec, tasks: u64) -> Option<u64> {
    if spec.widths() != POINTNET_WIDTHS || tasks != 10 || spec.s() != 2 || spec.l_hat() != 32 {
        return None;
    }
    match spec.n_hat() {
        16 => Some(REPORTED_GROUP1_TOTAL),
        32 => Some(REPORTED_GROUP2_TOTAL),
        _ => None,
    }
}

pub fn cmd_gen_synth(
    classes: &[String],
    per_class: usize,
    points: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    if classes.is_empty() {
        return Err(Error::Config("--classes is empty".into()).into());
    }
    let prims = classes
        .iter()
        .map(|c| c.parse::<Primitive>())
        .collect::<Result<Vec<_>, _>>()?;
    let ds = datasets::gen_synthetic(1, &prims, per_class, points, noise, seed)?;
    Ok(datasets::write_dataset(out, &ds)?)
}

pub fn cmd_eval(run: &Path) -> CliResult<()> {
    let jsonl_path = run.join(METRICS_FILE);
    let jsonl = std::fs::read_to_string(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?;
    let summary_path = run.join(SUMMARY_FILE);
    let original =
        std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let mode = match std::fs::read_to_string(run.join(RESOLVED_CONFIG_FILE)) {
        Ok(text) => ConfigFile::parse(&text)?.ppa,
        Err(_) => PpaMode::default(),
    };
    let log = metrics::parse_jsonl(&jsonl)?;
    let recomputed = metrics::summary_csv(&log, mode)?;
    if recomputed != original {
        let line = recomputed
            .lines()
            .zip(original.lines())
            .position(|(a, b)| a != b)
            .map(|i| i + 1)
            .unwrap_or_else(|| recomputed.lines().count().min(original.lines().count()) + 1);
        return Err(CliError::Mismatch(format!(
            "summary.csv differs from recomputation at line {line}"
        )));
    }
    Ok(())
}

fn eval_threads() -> usize {
    std::env::var("L3DOC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs a parsed command, printing results to stdout.
pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            out,
        } => {
            let dir = cmd_run(&config, seed, mode.map(Into::into), out, eval_threads())?;
            println!("{}", dir.join(SUMMARY_FILE).display());
        }
        Command::CountParams {
            widths,
            nhat,
            lhat,
            s,
            tasks,
            family,
            u,
            vh,
            vw,
            lh,
            lw,
            lc,
        } => {
            let dims = DfCnnDims {
                u,
                v_h: vh,
                v_w: vw,
                l_h: lh,
                l_w: lw,
                l_c: lc,
            };
            print!(
                "{}",
                cmd_count_params(&widths, nhat, lhat, s, tasks, family, dims)?
            );
        }
        Command::GenSynth {
            classes,
            per_class,
            points,
            noise,
            seed,
            out,
        } => {
            let files = cmd_gen_synth(&classes, per_class, points, noise, seed, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Eval { run } => {
            cmd_eval(&run)?;
            println!("ok");
        }
    }
    Ok(())
}

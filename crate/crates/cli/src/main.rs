use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cda_core::pipeline::{self, ExperimentConfig};
use cda_core::trainer::VariantId;
use cda_core::CdaError;
use clap::{Args, Parser, Subcommand};

/// Collaborative dual-branch domain adaptation on a synthetic volumetric benchmark.
#[derive(Parser)]
#[command(name = "cda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults are used for absent fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set plan.tau=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the two-domain phantom dataset and its manifest.
    GenData {
        /// Experiment config whose `data` section describes the domains.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Data seed; overrides `seeds.data`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one variant on all source and target samples.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; without it the benchmark is synthesized in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; defaults to `$CDA_RUNS_DIR/<variant>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Repeated stratified k-fold cross-validation over the target domain.
    Crossval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to `$CDA_RUNS_DIR/crossval_<variant>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Variant trained on the same splits and compared by paired t-test. Repeatable.
        #[arg(long = "baseline")]
        baselines: Vec<String>,
    },
    /// Summarize run directories into a table.
    Report {
        /// Directories each holding a `report.json`.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Variant every other row is compared against.
        #[arg(long)]
        ttest: Option<String>,
    },
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig, CdaError> {
    let base = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&args.overrides)
}

fn absolute(p: &Path) -> Result<PathBuf, CdaError> {
    std::fs::canonicalize(p).map_err(|e| CdaError::io(p, e))
}

fn apply_common(cfg: &mut ExperimentConfig, data: Option<&Path>, variant: Option<&str>) -> Result<(), CdaError> {
    if let Some(d) = data {
        cfg.data.manifest = Some(absolute(d)?);
    }
    if let Some(v) = variant {
        cfg.variant = v.parse()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CdaError> {
    match cli.command {
        Command::GenData {
            spec,
            out,
            seed,
            overrides,
        } => {
            let mut cfg = resolve(&ConfigArgs {
                config: spec,
                overrides,
            })?;
            if let Some(s) = seed {
                cfg.seeds.data = s;
            }
            let m = pipeline::gen_data(&cfg, &out)?;
            println!(
                "wrote {} source and {} target volumes to {}",
                m.count(cda_core::datagen::Domain::Source),
                m.count(cda_core::datagen::Domain::Target),
                out.display()
            );
        }
        Command::Train {
            cfg,
            data,
            out,
            variant,
        } => {
            let mut cfg = resolve(&cfg)?;
            apply_common(&mut cfg, data.as_deref(), variant.as_deref())?;
            let out = out.unwrap_or_else(|| pipeline::default_runs_dir().join(cfg.variant.as_str()));
            let report = pipeline::train(&cfg, &out)?;
            println!("{}: target acc {:.4}", report.variant, report.aggregate["acc"].mean);
        }
        Command::Crossval {
            cfg,
            data,
            out,
            variant,
            folds,
            repeats,
            baselines,
        } => {
            let mut cfg = resolve(&cfg)?;
            apply_common(&mut cfg, data.as_deref(), variant.as_deref())?;
            if let Some(k) = folds {
                cfg.cv.k = k;
            }
            if let Some(r) = repeats {
                cfg.cv.repeats = r;
            }
            for b in &baselines {
                let b: VariantId = b.parse()?;
                if !cfg.cv.baselines.contains(&b) {
                    cfg.cv.baselines.push(b);
                }
            }
            let out = out.unwrap_or_else(|| pipeline::default_runs_dir().join(format!("crossval_{}", cfg.variant)));
            let outcome = pipeline::crossval(&cfg, &out)?;
            for r in std::iter::once(&outcome.main).chain(&outcome.baselines) {
                let acc = r.aggregate["acc"];
                println!("{}: acc {:.4} ± {:.4} over {} folds", r.variant, acc.mean, acc.std, acc.n);
            }
            for (b, ps) in &outcome.main.p_values {
                if let Some(p) = ps.get("acc") {
                    println!("{} vs {b}: paired t-test p = {p:.4}", outcome.main.variant);
                }
            }
        }
        Command::Report { runs, out, csv, ttest } => {
            let table = pipeline::write_report(&runs, ttest.as_deref(), &out, csv.as_deref())?;
            println!("{} rows written to {}", table.rows.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &CdaError) -> u8 {
    match e {
        CdaError::InvalidInput(_) | CdaError::Config(_) => 2,
        CdaError::Invariant(_) => 4,
        CdaError::Format { .. }
        | CdaError::Data(_)
        | CdaError::Io { .. }
        | CdaError::Json { .. }
        | CdaError::UndefinedMetric(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

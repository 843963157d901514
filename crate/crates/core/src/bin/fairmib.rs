use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fairmib::engine::op_suite;
use fairmib::eval::evaluate;
use fairmib::graph::{gen_synthetic, make_splits, save_bundle, SplitSpec, SynthSpec};
use fairmib::harness::{
    run_ablation_grid, run_experiment, ExperimentRecord, Prepared, ReportRow, ReportTable, RunConfig, TrainedModel,
    Variant,
};
use fairmib::model::gradcheck_model;
use fairmib::{Error, Result};

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "fairmib",
    version,
    about = "Fair node classification over feature, structure and diffusion views"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write the experiment record.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a saved checkpoint on the configured data.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        mask: MaskArg,
    },
    /// Run one experiment per variant and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,no_compression,no_conditioning,no_consistency,no_feature_view,no_structure_view,no_diffusion_view,baseline_gcn"
        )]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic biased graph and save it as a bundle.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings; defaults apply otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every operator and of the full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the three view matrices and IPW weights as CSV.
    DumpViews {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the comparison table for an experiment or ablation directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let record = run_experiment(&cfg, Some(&out))?;
            print_record(&record);
            Ok(failures_code(&record))
        }
        Command::Eval {
            config,
            checkpoint,
            mask,
        } => {
            let cfg = RunConfig::load(&config)?;
            let data = Prepared::new(&cfg)?;
            let model = TrainedModel::load(&checkpoint)?;
            let prob = model.predict_proba(&data, cfg.inference_s_mode)?;
            let g = &data.graph;
            let m = match mask {
                MaskArg::Train => &g.masks().train,
                MaskArg::Val => &g.masks().val,
                MaskArg::Test => &g.masks().test,
            };
            let seed = checkpoint_seed(&checkpoint);
            let report = evaluate(&prob, g.labels(), g.sensitive(), m, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { config, variants, out } => {
            let cfg = RunConfig::load(&config)?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<Result<Vec<_>>>()?;
            let records = run_ablation_grid(&cfg, &variants, Some(&out))?;
            print!("{}", ReportTable::from_records(&records).to_markdown());
            Ok(ExitCode::SUCCESS)
        }
        Command::GenSynth { out, spec, seed } => {
            let mut spec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
                        path: path.clone(),
                        source: e,
                    })?;
                    toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let g = gen_synthetic(&spec)?;
            let g = make_splits(
                &g,
                &SplitSpec {
                    seed: spec.seed,
                    ..SplitSpec::default()
                },
            )?;
            save_bundle(&g, &out)?;
            println!("wrote {} nodes, {} edges to {}", g.n(), g.m(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::DumpViews { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let data = Prepared::new(&cfg)?;
            data.bundle.dump(&out)?;
            println!("wrote views for {} nodes to {}", data.bundle.n(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input } => {
            let table = ReportTable::from_dir(&input)?;
            table.write(&input)?;
            print!("{}", table.to_markdown());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gradcheck(seed: u64) -> Result<ExitCode> {
    let mut ok = true;
    for (name, report) in op_suite(seed, GRAD_STEP)? {
        let pass = report.passes(GRAD_TOL);
        ok &= pass;
        println!(
            "{:<5} {name:<24} max rel error {:.3e}",
            if pass { "ok" } else { "FAIL" },
            report.max_rel_error
        );
    }
    let report = gradcheck_model(seed, GRAD_STEP)?;
    let pass = report.passes(GRAD_TOL);
    ok &= pass;
    println!(
        "{:<5} {:<24} max rel error {:.3e} over {} parameters",
        if pass { "ok" } else { "FAIL" },
        "model",
        report.max_rel_error,
        report.checked
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn print_record(record: &ExperimentRecord) {
    for run in &record.runs {
        match (&run.report, &run.error) {
            (Some(r), _) => println!(
                "seed {}: acc {:.4} f1 {:.4} auc {:.4} dp {:.4} eo {:.4} (best epoch {})",
                run.seed,
                r.acc,
                r.f1,
                r.auc,
                r.dp_diff,
                r.eo_diff,
                run.best_epoch.unwrap_or(0)
            ),
            (None, Some(e)) => println!("seed {}: failed: {e}", run.seed),
            (None, None) => {}
        }
    }
    let row = ReportRow::from_aggregate(record.config.variant.name(), &record.aggregate);
    print!("{}", ReportTable { rows: vec![row] }.to_markdown());
}

/// Partial failure still writes results but signals a numeric problem.
fn failures_code(record: &ExperimentRecord) -> ExitCode {
    if record.runs.iter().any(|r| r.report.is_none()) {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn checkpoint_seed(path: &Path) -> u64 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("seed_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

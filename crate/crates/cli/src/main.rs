//! Command-line entry point. Exit codes: 0 all runs succeeded, 1 on
//! config/argument errors, 2 when any run failed.

use clap::{Parser, Subcommand, ValueEnum};
use sparsemdl_cli::config::RunConfig;
use sparsemdl_cli::plot::{emit_plot, PlotKind};
use sparsemdl_cli::sweep::{
    build_dataset, parse_method, read_rows, run, sweep, write_trace, SweepSpec,
};
use sparsemdl_core::model::Checkpoint;
use sparsemdl_core::pruning::{input_bounding_box, random_gradient_prune, tamade};
use sparsemdl_core::training::bare_loss;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sparsemdl", about = "Sparse description-length training harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKindArg {
    LossVsBytes,
    DlVsAlpha,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one config end-to-end; writes row.csv, trace.csv, checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the plan and dataset seeds.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a (method, alpha, seed) grid; writes sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated subset of pmmp,drr,rl1,none.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold-search + zero-influence pruning of a saved checkpoint
    /// against the config's validation split.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adaptive-binned summary of a sweep CSV (test loss vs model bytes).
    Report {
        #[arg(long)]
        csv: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static SVG plot of a sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKindArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, String> {
    match cli.cmd {
        Cmd::Train { config, out, seed } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.plan.seed = s;
                cfg.dataset.set_seed(s);
            }
            let errs = cfg.validate();
            if !errs.is_empty() {
                return Err(errs.join("\n"));
            }
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let result = match run(&cfg) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("run failed: {e}");
                    return Ok(ExitCode::from(2));
                }
            };
            let mut row_file =
                std::fs::File::create(out.join("row.csv")).map_err(|e| e.to_string())?;
            {
                let mut w = csv::Writer::from_writer(&mut row_file);
                w.serialize(&result.row).map_err(|e| e.to_string())?;
            }
            use std::io::Write as _;
            writeln!(row_file, "# config_hash={}", cfg.hash()).map_err(|e| e.to_string())?;
            let mut trace_file =
                std::fs::File::create(out.join("trace.csv")).map_err(|e| e.to_string())?;
            write_trace(&result.trace, &mut trace_file).map_err(|e| e.to_string())?;
            Checkpoint::from_model(&result.model)
                .save(&out.join("checkpoint.json"))
                .map_err(|e| e.to_string())?;
            println!(
                "nnz={} model_bytes={} dl_bytes={} test_loss={}",
                result.row.nnz,
                result.row.model_bytes,
                result.row.description_length_bytes,
                result.row.test_loss
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { config, alphas, seeds, methods, parallelism, out } => {
            let cfg = RunConfig::from_path(&config)?;
            if alphas.is_empty() || seeds.is_empty() || methods.is_empty() {
                return Err("sweep needs nonempty --alphas, --seeds, and --methods".into());
            }
            if parallelism == 0 {
                return Err("--parallelism must be >= 1".into());
            }
            let methods =
                methods.iter().map(|m| parse_method(m)).collect::<Result<Vec<_>, _>>()?;
            let errs = cfg.validate();
            if !errs.is_empty() {
                return Err(errs.join("\n"));
            }
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                }
            }
            let mut file = std::fs::File::create(&out).map_err(|e| e.to_string())?;
            let spec = SweepSpec { methods, alphas, seeds, parallelism };
            let (rows, failures) = sweep(&cfg, &spec, &mut file).map_err(|e| e.to_string())?;
            println!("{} rows, {} failures -> {}", rows.len(), failures, out.display());
            Ok(if failures > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Cmd::Prune { checkpoint, config, out } => {
            let cfg = RunConfig::from_path(&config)?;
            let errs = cfg.validate();
            if !errs.is_empty() {
                return Err(errs.join("\n"));
            }
            let model = Checkpoint::load(&checkpoint)
                .and_then(|c| c.into_model())
                .map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let data = match build_dataset(&cfg.dataset) {
                Ok(d) => d,
                Err(e) => {
                    eprintln!("run failed: {e}");
                    return Ok(ExitCode::from(2));
                }
            };
            let target = bare_loss(&model, &data.val, cfg.loss_kind).map_err(|e| e.to_string())?;
            let high = model
                .layers
                .iter()
                .flat_map(|l| [&l.weight, &l.bias])
                .flat_map(|g| g.theta.iter())
                .fold(0.0f64, |a, v| a.max(v.abs()));
            let (mut pruned, outcome) = tamade(
                &model,
                |m| bare_loss(m, &data.val, cfg.loss_kind),
                target,
                0.0,
                high,
                cfg.plan.tamade.tol,
                cfg.plan.tamade.r,
                cfg.plan.tamade.mode,
            )
            .map_err(|e| e.to_string())?;
            let bounds = input_bounding_box(&data.train.x);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.plan.seed);
            use rand::SeedableRng as _;
            random_gradient_prune(&mut pruned, &mut rng, cfg.plan.rgp_trials, &bounds)
                .map_err(|e| e.to_string())?;
            Checkpoint::from_model(&pruned)
                .save(&out.join("pruned.json"))
                .map_err(|e| e.to_string())?;
            let report = serde_json::to_string_pretty(&outcome).map_err(|e| e.to_string())?;
            std::fs::write(out.join("prune_report.json"), report).map_err(|e| e.to_string())?;
            println!("nnz {} -> {}", model.nonzero_count(), pruned.nonzero_count());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Report { csv, out } => {
            let file = std::fs::File::open(&csv).map_err(|e| e.to_string())?;
            let rows = read_rows(file)?;
            let pts: Vec<(f64, f64)> =
                rows.iter().map(|r| (r.model_bytes as f64, r.test_loss)).collect();
            let bins = sparsemdl_cli::binning::adaptive_bin_summary(&pts, 10, 0.1);
            let mut text = String::from("x_lo,x_hi,count,x_median,median,q1,q3\n");
            for b in &bins {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    b.x_lo, b.x_hi, b.count, b.x_median, b.median, b.q1, b.q3
                ));
            }
            match out {
                Some(path) => std::fs::write(path, text).map_err(|e| e.to_string())?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Plot { csv, kind, out } => {
            let file = std::fs::File::open(&csv).map_err(|e| e.to_string())?;
            let rows = read_rows(file)?;
            let kind = match kind {
                PlotKindArg::LossVsBytes => PlotKind::LossVsBytes,
                PlotKindArg::DlVsAlpha => PlotKind::DlVsAlpha,
            };
            emit_plot(&rows, kind, &out).map_err(|e| e.to_string())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

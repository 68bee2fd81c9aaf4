use clap::{Parser, Subcommand};
use modnet::error::{Error, Result};
use modnet::experiment::{
    data_dir, emit_table, grid_search, materialize_dataset, run_experiment,
    save_stage1_checkpoint, ExperimentConfig, ExperimentReport, GridAxis, Method, Preset,
    TableFormat,
};
use modnet::mask::{export_binary_mask, export_heatmap_csv, export_logits, harden, import_mask,
    MaskFile};
use modnet::pipeline::{run_mrm, stage3_retrain, PipelineData};
use modnet::nn::{build_convnet, InitSnapshot};
use modnet::theory::{verify_proposition, PropositionConfig};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "modnet", about = "Biased-dataset generation, subnetwork probing and retraining")]
struct Cli {
    /// JSON experiment config; omitted fields come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in scale: `desk` (minutes, orderings) or `paper` (full protocol).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Output root for runs, reports and the dataset cache.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Recompute runs even when a completed run directory exists.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load from cache) the biased multi-environment dataset.
    GenerateData,
    /// Stage 1 only: full-model training; saves a checkpoint.
    Train,
    /// Stages 1–2: probe mask logits on a trained model; exports logits,
    /// the hardened mask and per-layer heatmaps.
    Probe,
    /// Stage 3 only: retrain from the original initialization under a mask
    /// previously exported by `probe`.
    Retrain {
        /// Mask directory (binary or logits flavor).
        #[arg(long)]
        mask_dir: PathBuf,
    },
    /// The full three-stage procedure.
    Mrm,
    /// Probe on the out-domain in-split (privileged upper bound), then
    /// retrain.
    Oracle,
    /// Random-mask and magnitude-pruning control runs.
    Baselines,
    /// Directional ablations: fresh-initialization retrain and
    /// rearranged-bias retrain.
    Ablate,
    /// Joint weight-and-mask pruning to a target keep ratio, then retrain.
    Prune {
        #[arg(long, default_value_t = 0.1)]
        target_keep_ratio: f64,
    },
    /// Monte-Carlo check of the sparse-vs-regular linear classifier claims;
    /// emits a CSV sweep.
    LinearCheck,
    /// Cartesian hyperparameter grid; config file must carry a `grid` block.
    Grid,
    /// Aggregate all persisted reports under --out into tables.
    Report,
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, v) => *b = v.clone(),
    }
}

/// The methods a subcommand may run; a config file can pick within the
/// family (e.g. `train` accepts any full-training objective), anything else
/// falls back to the subcommand's default.
fn method_family(default: Method) -> &'static [Method] {
    match default {
        Method::Erm => {
            &[Method::Erm, Method::Irm, Method::Rex, Method::Dro, Method::Unbias]
        }
        Method::Mrm => &[Method::Mrm, Method::ModIrm, Method::ModRex, Method::ModDro],
        _ => &[],
    }
}

fn load_config(cli: &Cli, method: Method) -> Result<(ExperimentConfig, Option<Vec<GridAxis>>)> {
    let preset = Preset::parse(&cli.preset)?;
    let (mut cfg, grid) = match &cli.config {
        Some(path) => {
            // Fields absent from the file keep their preset values.
            let mut patch: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
            let grid = match patch.as_object_mut().and_then(|o| o.remove("grid")) {
                Some(g) => serde_json::from_value(g)?,
                None => None,
            };
            let mut full =
                serde_json::to_value(ExperimentConfig::preset(preset, method, 0))?;
            merge_json(&mut full, &patch);
            (serde_json::from_value::<ExperimentConfig>(full)?, grid)
        }
        None => (ExperimentConfig::preset(preset, method, 0), None),
    };
    if cfg.method != method && !method_family(method).contains(&cfg.method) {
        cfg.method = method;
    }
    if let Some(seed) = cli.seed {
        cfg.mrm.seed = seed;
    }
    cfg.apply_method_invariants();
    cfg.validate()?;
    Ok((cfg, grid))
}

fn print_report(report: &ExperimentReport) {
    println!(
        "{}: train {:.2} ± {:.2}  test {:.2} ± {:.2}  ({} seeds)",
        report.config.method.name(),
        report.train_mean * 100.0,
        report.train_std * 100.0,
        report.test_mean * 100.0,
        report.test_std * 100.0,
        report.per_seed.len()
    );
}

fn run_method(cli: &Cli, method: Method) -> Result<ExperimentReport> {
    let (cfg, _) = load_config(cli, method)?;
    let report = run_experiment(&cfg, &cli.out, cli.force)?;
    print_report(&report);
    Ok(report)
}

fn pipeline_inputs(cfg: &ExperimentConfig, out: &Path) -> Result<PipelineData<f32>> {
    let (envs, _) = materialize_dataset(&cfg.dataset, None, out)?;
    PipelineData::from_environments(envs, cfg.dataset.split_fraction, cfg.dataset.data_seed)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenerateData => {
            let (cfg, _) = load_config(cli, Method::Erm)?;
            let (envs, _) = materialize_dataset(&cfg.dataset, None, &cli.out)?;
            println!("dataset cache: {}", data_dir(&cli.out).display());
            for env in &envs {
                println!(
                    "env {} seen={} items={} bias={:.2}",
                    env.env_id,
                    env.seen,
                    env.len(),
                    env.bias_coefficient
                );
            }
        }
        Command::Train => {
            let (cfg, _) = load_config(cli, Method::Erm)?;
            let dir = save_stage1_checkpoint(&cfg, &cli.out)?;
            println!("checkpoint: {}", dir.display());
        }
        Command::Probe => {
            let (cfg, _) = load_config(cli, Method::Mrm)?;
            let data = pipeline_inputs(&cfg, &cli.out)?;
            let art = run_mrm(&cfg.mrm, &data)?;
            let dir = cli.out.join("masks").join(format!("{}-seed{}", cfg.config_hash(), cfg.mrm.seed));
            export_logits(&art.logits, cfg.mrm.seed, &cfg.config_hash(), &dir.join("logits"))?;
            export_binary_mask(&art.mask, cfg.mrm.seed, &cfg.config_hash(), &dir.join("binary"))?;
            export_heatmap_csv(&art.logits, &dir.join("heatmaps"))?;
            println!(
                "mask exported to {} (keep ratio {:.4})",
                dir.display(),
                art.stage2.keep_ratio_global.unwrap_or(f64::NAN)
            );
        }
        Command::Retrain { mask_dir } => {
            let (cfg, _) = load_config(cli, Method::Mrm)?;
            let data = pipeline_inputs(&cfg, &cli.out)?;
            let mask = match import_mask::<f32>(mask_dir)? {
                MaskFile::Binary(m) => m,
                MaskFile::Logits(l) => harden(&l),
            };
            let (arch, params) = build_convnet::<f32>(data.input_channels(), 10, cfg.mrm.seed)?;
            let snapshot = InitSnapshot::take(&params, cfg.mrm.seed);
            let (_, report) = stage3_retrain(&arch, &snapshot, &mask, &data, &cfg.mrm)?;
            println!(
                "retrained: ood accuracy {:.2} (keep ratio {:.4})",
                report.ood_accuracy * 100.0,
                report.keep_ratio_global.unwrap_or(f64::NAN)
            );
        }
        Command::Mrm => {
            run_method(cli, Method::Mrm)?;
        }
        Command::Oracle => {
            run_method(cli, Method::Oracle)?;
        }
        Command::Baselines => {
            for method in [Method::RandWhole, Method::RandLayer, Method::Magnitude] {
                run_method(cli, method)?;
            }
        }
        Command::Ablate => {
            for method in [Method::Reinit, Method::Rebias] {
                run_method(cli, method)?;
            }
        }
        Command::Prune { target_keep_ratio } => {
            let (mut cfg, _) = load_config(cli, Method::JointPrune)?;
            cfg.target_keep_ratio = *target_keep_ratio;
            let report = run_experiment(&cfg, &cli.out, cli.force)?;
            print_report(&report);
        }
        Command::LinearCheck => {
            fs::create_dir_all(&cli.out)?;
            let mut csv =
                String::from("c,D,n,p,empirical_err,hoeffding_bound,margin_sparse,margin_regular_min\n");
            let mut all_pass = true;
            // D = (2/c)² = 25 sits exactly on the margin-dominance boundary
            // (the expected regular margin equals the sparse margin there),
            // so the sweep stays off it.
            for &d in &[10usize, 50, 100, 200] {
                let cfg = PropositionConfig::new(0.4, d, 1000, 0.1, 50, cli.seed.unwrap_or(0));
                let report = verify_proposition(&cfg)?;
                all_pass &= report.all_pass();
                csv.push_str(&format!(
                    "{},{},{},{:.4},{:.6},{:.6e},{:.4},{:.4}\n",
                    cfg.c,
                    d,
                    cfg.n,
                    report.p_seen,
                    report.regular_seen_error,
                    report.seen_error_bound,
                    report.margin_sparse,
                    report.regular_margin_min
                ));
            }
            let path = cli.out.join("linear_check.csv");
            fs::write(&path, &csv)?;
            println!("{csv}");
            println!("linear-check: {} ({})", if all_pass { "PASS" } else { "FAIL" }, path.display());
            if !all_pass {
                return Err(Error::invalid("linear classifier claims failed verification"));
            }
        }
        Command::Grid => {
            let (cfg, grid) = load_config(cli, Method::Mrm)?;
            let axes = grid.ok_or_else(|| Error::invalid("grid command needs a `grid` block in --config"))?;
            let outcome = grid_search(&cfg, &axes, &cli.out, cli.force)?;
            println!("{}", outcome.csv);
            print_report(&outcome.best);
        }
        Command::Report => {
            let reports_dir = cli.out.join("reports");
            let mut reports = Vec::new();
            if reports_dir.is_dir() {
                for entry in fs::read_dir(&reports_dir)? {
                    let path = entry?.path();
                    if path.extension().is_some_and(|e| e == "json") {
                        reports.push(serde_json::from_slice::<ExperimentReport>(&fs::read(&path)?)?);
                    }
                }
            }
            if reports.is_empty() {
                return Err(Error::invalid(format!(
                    "no reports under {}",
                    reports_dir.display()
                )));
            }
            reports.sort_by_key(|r| r.config.method.name());
            let refs: Vec<&ExperimentReport> = reports.iter().collect();
            let md = emit_table(&refs, TableFormat::Markdown)?;
            let csv = emit_table(&refs, TableFormat::Csv)?;
            fs::write(cli.out.join("table.md"), &md)?;
            fs::write(cli.out.join("table.csv"), &csv)?;
            println!("{md}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

//! Configuration-driven experiment runner: dataset caching, method dispatch,
//! content-addressed run directories, aggregate tables, curve files and grid
//! search.

use crate::data::{
    build_full_colored_mnist, composite_object_background, load_dataset_dir, load_mnist_idx,
    rearrange_bias, save_dataset_dir, synthetic_digit_bank, synthetic_scene_bank,
    synthetic_shape_bank, Backgrounds, BiasSpec, ColorPalette, EnvironmentDataset,
};
use crate::error::{Error, Result};
use crate::mask::{export_binary_mask, keep_ratio, magnitude_mask, BinaryMask};
use crate::nn::{build_convnet, save_checkpoint};
use crate::objective::ObjectiveSpec;
use crate::pipeline::{
    ablation_rebias, ablation_reinit, evaluate_out, joint_prune, oracle_probe, run_mrm,
    run_random_baselines, stage1_train, stage3_retrain, CurvePoint, LabelTarget, MrmConfig,
    PipelineData, StageReport,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

/// Dataset cache location override.
pub const DATA_DIR_ENV: &str = "MODNET_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "REx")]
    Rex,
    #[serde(rename = "DRO")]
    Dro,
    #[serde(rename = "MRM")]
    Mrm,
    #[serde(rename = "ModIRM")]
    ModIrm,
    #[serde(rename = "ModREx")]
    ModRex,
    #[serde(rename = "ModDRO")]
    ModDro,
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "rand_whole")]
    RandWhole,
    #[serde(rename = "rand_layer")]
    RandLayer,
    #[serde(rename = "magnitude")]
    Magnitude,
    #[serde(rename = "joint_prune")]
    JointPrune,
    #[serde(rename = "unbias")]
    Unbias,
    #[serde(rename = "reinit")]
    Reinit,
    #[serde(rename = "rebias")]
    Rebias,
}

impl Method {
    pub const ALL: [Method; 16] = [
        Method::Erm,
        Method::Irm,
        Method::Rex,
        Method::Dro,
        Method::Mrm,
        Method::ModIrm,
        Method::ModRex,
        Method::ModDro,
        Method::Oracle,
        Method::RandWhole,
        Method::RandLayer,
        Method::Magnitude,
        Method::JointPrune,
        Method::Unbias,
        Method::Reinit,
        Method::Rebias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::Irm => "IRM",
            Method::Rex => "REx",
            Method::Dro => "DRO",
            Method::Mrm => "MRM",
            Method::ModIrm => "ModIRM",
            Method::ModRex => "ModREx",
            Method::ModDro => "ModDRO",
            Method::Oracle => "oracle",
            Method::RandWhole => "rand_whole",
            Method::RandLayer => "rand_layer",
            Method::Magnitude => "magnitude",
            Method::JointPrune => "joint_prune",
            Method::Unbias => "unbias",
            Method::Reinit => "reinit",
            Method::Rebias => "rebias",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }

    /// The risk the method minimizes in every training stage it runs.
    fn default_objective(self) -> ObjectiveSpec {
        match self {
            Method::Irm | Method::ModIrm => ObjectiveSpec::irm(100.0, 100, true),
            Method::Rex | Method::ModRex => ObjectiveSpec::rex(100.0, 100, true),
            Method::Dro | Method::ModDro => ObjectiveSpec::dro(0.01),
            _ => ObjectiveSpec::erm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    FullColoredMnist,
    ColoredObject,
    SceneObject,
}

impl GeneratorKind {
    pub fn parse(s: &str) -> Result<GeneratorKind> {
        match s {
            "full_colored_mnist" => Ok(GeneratorKind::FullColoredMnist),
            "colored_object" => Ok(GeneratorKind::ColoredObject),
            "scene_object" => Ok(GeneratorKind::SceneObject),
            other => Err(Error::invalid(format!("unknown generator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::invalid(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportingMode {
    LastStep,
    OracleValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub generator: GeneratorKind,
    /// One coefficient per environment; the last environment is the unseen
    /// out-domain.
    pub bias_coefficients: Vec<f64>,
    pub num_images: usize,
    pub data_seed: u64,
    /// In-split fraction of the out-domain.
    pub split_fraction: f64,
}

impl DatasetConfig {
    pub fn desk() -> Self {
        DatasetConfig {
            generator: GeneratorKind::FullColoredMnist,
            bias_coefficients: vec![1.0, 0.9, 0.0],
            num_images: 10_000,
            data_seed: 7,
            split_fraction: 0.5,
        }
    }

    pub fn paper() -> Self {
        DatasetConfig { num_images: 60_000, ..DatasetConfig::desk() }
    }

    fn num_seen(&self) -> usize {
        self.bias_coefficients.len().saturating_sub(1)
    }

    pub fn bias_spec(&self) -> Result<BiasSpec> {
        BiasSpec::identity(self.bias_coefficients.clone(), self.num_seen())
    }
}

/// The complete description of one experiment; hashes of this struct key the
/// run directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub method: Method,
    pub mrm: MrmConfig,
    pub num_seeds: usize,
    pub reporting: ReportingMode,
    /// Keep ratio used by the magnitude baseline and the joint-pruning stop
    /// rule.
    pub target_keep_ratio: f64,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, method: Method, seed: u64) -> Self {
        let mut mrm = MrmConfig::new(method.default_objective(), seed);
        let dataset = match preset {
            Preset::Desk => {
                mrm.n1 = 500;
                mrm.n2 = 500;
                mrm.batch_size = 4;
                mrm.final_eval_cap = Some(1024);
                // At desk scale the adaptive logit optimizer turns the
                // sparsity penalty into a constant per-step drift, so the
                // probe coefficient must sit well below the typical loss
                // gradient. Joint pruning is the exception: there the drift
                // is the mechanism that reaches the target keep ratio, so it
                // keeps the stronger default coefficient.
                if method != Method::JointPrune {
                    mrm.alpha = 1e-7;
                }
                // With 4-item batches the per-environment risk estimates are
                // spiky, and the full-scale penalty coefficients amplify the
                // spikes until the loss overflows; desk-scale coefficients
                // keep the updates finite.
                match method {
                    Method::Rex | Method::ModRex => {
                        mrm.objective = ObjectiveSpec::rex(0.3, 0, false);
                    }
                    Method::Irm | Method::ModIrm => {
                        mrm.objective = ObjectiveSpec::irm(0.01, 0, false);
                    }
                    _ => {}
                }
                DatasetConfig::desk()
            }
            Preset::Paper => DatasetConfig::paper(),
        };
        let mut cfg = ExperimentConfig {
            dataset,
            method,
            mrm,
            num_seeds: 3,
            reporting: ReportingMode::LastStep,
            target_keep_ratio: 0.1,
        };
        cfg.apply_method_invariants();
        cfg
    }

    /// `unbias` trains on the same protocol with every bias coefficient
    /// forced to zero.
    pub fn apply_method_invariants(&mut self) {
        if self.method == Method::Unbias {
            for c in &mut self.dataset.bias_coefficients {
                *c = 0.0;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_seeds == 0 {
            return Err(Error::invalid("num_seeds must be positive"));
        }
        if self.dataset.bias_coefficients.len() < 2 {
            return Err(Error::invalid("need at least one seen and one unseen environment"));
        }
        if !(0.0 < self.dataset.split_fraction && self.dataset.split_fraction < 1.0) {
            return Err(Error::invalid("split_fraction must be in (0,1)"));
        }
        if self.method == Method::Unbias
            && self.dataset.bias_coefficients.iter().any(|&c| c != 0.0)
        {
            return Err(Error::invalid("unbias requires all-zero bias coefficients"));
        }
        self.dataset.bias_spec()?;
        self.mrm.validate()
    }

    /// Content hash, stable under field reordering (keys are sorted in the
    /// canonical JSON form).
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex::encode(&hasher.finalize()[..8])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub keep_ratio: Option<f64>,
    pub curves: Vec<NamedCurve>,
    pub run_dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedCurve {
    pub stage: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub per_seed: Vec<SeedResult>,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Dataset cache root: `$MODNET_DATA_DIR` or `<out>/datasets`.
pub fn data_dir(out: &Path) -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| out.join("datasets"), PathBuf::from)
}

fn dataset_hash(cfg: &DatasetConfig) -> String {
    let value = serde_json::to_value(cfg).expect("dataset config serializes");
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(&value).expect("canonical json").as_bytes());
    hex::encode(&hasher.finalize()[..8])
}

fn source_digits(cache: &Path, n: usize, seed: u64) -> Result<(ndarray::Array3<f32>, Vec<u8>)> {
    let images = cache.join("mnist/train-images-idx3-ubyte");
    let labels = cache.join("mnist/train-labels-idx1-ubyte");
    if images.exists() && labels.exists() {
        let (gray, y) = load_mnist_idx::<f32>(&images, &labels)?;
        if gray.shape()[0] < n {
            return Err(Error::invalid(format!(
                "requested {n} images but the IDX files hold {}",
                gray.shape()[0]
            )));
        }
        let gray = gray.slice_move(ndarray::s![..n, .., ..]);
        return Ok((gray, y[..n].to_vec()));
    }
    // No real corpus on disk: fall back to the bundled synthetic glyph bank.
    Ok(synthetic_digit_bank::<f32>(n, seed))
}

/// Build (or load from cache) the environments for a dataset config, using
/// a possibly rearranged bias mapping.
pub fn materialize_dataset(
    cfg: &DatasetConfig,
    spec_override: Option<&BiasSpec>,
    out: &Path,
) -> Result<(Vec<EnvironmentDataset<f32>>, BiasSpec)> {
    let cache = data_dir(out);
    let spec = match spec_override {
        Some(s) => s.clone(),
        None => cfg.bias_spec()?,
    };
    let mut key = dataset_hash(cfg);
    if spec_override.is_some() {
        let mut hasher = Sha256::new();
        hasher.update(key.as_bytes());
        hasher.update(serde_json::to_string(&spec)?.as_bytes());
        key = hex::encode(&hasher.finalize()[..8]);
    }
    let dir = cache.join(format!("{:?}-{}", cfg.generator, key).to_lowercase());
    if dir.join("meta.json").exists() {
        let (envs, _, _) = load_dataset_dir::<f32>(&dir)?;
        return Ok((envs, spec));
    }
    let envs = generate_environments(cfg, &spec, Some(&cache))?;
    save_dataset_dir(&envs, &spec, cfg.data_seed, &dir)?;
    Ok((envs, spec))
}

/// Build the environments in memory. `source_cache` optionally points at a
/// directory that may hold real IDX files; without it the synthetic glyph
/// bank is used.
pub fn generate_environments(
    cfg: &DatasetConfig,
    spec: &BiasSpec,
    source_cache: Option<&Path>,
) -> Result<Vec<EnvironmentDataset<f32>>> {
    let palette = ColorPalette::default();
    match cfg.generator {
        GeneratorKind::FullColoredMnist => {
            let (gray, labels) = match source_cache {
                Some(cache) => source_digits(cache, cfg.num_images, cfg.data_seed)?,
                None => synthetic_digit_bank::<f32>(cfg.num_images, cfg.data_seed),
            };
            build_full_colored_mnist(&gray, &labels, spec, &palette, cfg.data_seed)
        }
        GeneratorKind::ColoredObject => {
            let bank = synthetic_shape_bank::<f32>(cfg.num_images, (32, 32), cfg.data_seed);
            composite_object_background(
                &bank,
                &Backgrounds::Palette(&palette),
                spec,
                (32, 32),
                cfg.data_seed,
            )
        }
        GeneratorKind::SceneObject => {
            let bank = synthetic_shape_bank::<f32>(cfg.num_images, (32, 32), cfg.data_seed);
            let scenes = synthetic_scene_bank::<f32>(2000, (32, 32), cfg.data_seed ^ 0x5CE11E);
            composite_object_background(
                &bank,
                &Backgrounds::Scenes(&scenes),
                spec,
                (32, 32),
                cfg.data_seed,
            )
        }
    }
}

fn stage_curve(name: &str, report: &StageReport) -> NamedCurve {
    NamedCurve { stage: name.to_string(), points: report.curve.clone() }
}

fn curve_test_accuracy(curves: &[NamedCurve], mode: ReportingMode, last: f64) -> f64 {
    match mode {
        ReportingMode::LastStep => last,
        // Model selection on the out-domain: best recorded evaluation point
        // of the final stage.
        ReportingMode::OracleValidation => curves
            .last()
            .map(|c| c.points.iter().map(|p| p.ood_accuracy).fold(last, f64::max))
            .unwrap_or(last),
    }
}

struct SeedOutcome {
    train_accuracy: f64,
    test_accuracy: f64,
    keep_ratio: Option<f64>,
    curves: Vec<NamedCurve>,
    mask: Option<BinaryMask>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn run_one_seed(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedOutcome> {
    let (envs, spec) = materialize_dataset(&config.dataset, None, out)?;
    let data =
        PipelineData::from_environments(envs, config.dataset.split_fraction, config.dataset.data_seed)?;
    let mut cfg = config.mrm.clone();
    cfg.seed = seed;

    let outcome = match config.method {
        Method::Erm | Method::Irm | Method::Rex | Method::Dro | Method::Unbias => {
            let (arch, params) = build_convnet::<f32>(data.input_channels(), 10, cfg.seed)?;
            let (trained, _snap, report) = stage1_train(&arch, params, &data, &cfg)?;
            let test = evaluate_out(&arch, &trained, None, &data.eval_split, LabelTarget::Class)?;
            SeedOutcome {
                train_accuracy: mean(&report.train_env_accuracy),
                test_accuracy: test,
                keep_ratio: None,
                curves: vec![stage_curve("stage1", &report)],
                mask: None,
            }
        }
        Method::Mrm | Method::ModIrm | Method::ModRex | Method::ModDro => {
            let art = run_mrm(&cfg, &data)?;
            SeedOutcome {
                train_accuracy: mean(&art.stage3.train_env_accuracy),
                test_accuracy: art.stage3.ood_accuracy,
                keep_ratio: art.stage3.keep_ratio_global,
                curves: vec![
                    stage_curve("stage1", &art.stage1),
                    stage_curve("stage2", &art.stage2),
                    stage_curve("stage3", &art.stage3),
                ],
                mask: Some(art.mask),
            }
        }
        Method::Oracle => {
            let (arch, params) = build_convnet::<f32>(data.input_channels(), 10, cfg.seed)?;
            let (trained, snap, s1) = stage1_train(&arch, params, &data, &cfg)?;
            let (mask, s2) = oracle_probe(&arch, &trained, &data.probe_split, &cfg)?;
            let (_, s3) = stage3_retrain(&arch, &snap, &mask, &data, &cfg)?;
            SeedOutcome {
                train_accuracy: mean(&s3.train_env_accuracy),
                test_accuracy: s3.ood_accuracy,
                keep_ratio: s3.keep_ratio_global,
                curves: vec![
                    stage_curve("stage1", &s1),
                    stage_curve("stage2", &s2),
                    stage_curve("stage3", &s3),
                ],
                mask: Some(mask),
            }
        }
        Method::RandWhole | Method::RandLayer => {
            let art = run_mrm(&cfg, &data)?;
            let ((whole, wr), (layer, lr)) =
                run_random_baselines(&art.arch, &art.snapshot, &art.mask, &data, &cfg)?;
            let (mask, report) = if config.method == Method::RandWhole {
                (whole, wr)
            } else {
                (layer, lr)
            };
            SeedOutcome {
                train_accuracy: mean(&report.train_env_accuracy),
                test_accuracy: report.ood_accuracy,
                keep_ratio: report.keep_ratio_global,
                curves: vec![stage_curve("stage3", &report)],
                mask: Some(mask),
            }
        }
        Method::Magnitude => {
            let (arch, params) = build_convnet::<f32>(data.input_channels(), 10, cfg.seed)?;
            let (trained, snap, s1) = stage1_train(&arch, params, &data, &cfg)?;
            let mask = magnitude_mask(&trained, config.target_keep_ratio)?;
            let (_, s3) = stage3_retrain(&arch, &snap, &mask, &data, &cfg)?;
            SeedOutcome {
                train_accuracy: mean(&s3.train_env_accuracy),
                test_accuracy: s3.ood_accuracy,
                keep_ratio: s3.keep_ratio_global,
                curves: vec![stage_curve("stage1", &s1), stage_curve("stage3", &s3)],
                mask: Some(mask),
            }
        }
        Method::JointPrune => {
            let outcome = joint_prune(&data, &cfg, config.target_keep_ratio)?;
            SeedOutcome {
                train_accuracy: mean(&outcome.retrain_report.train_env_accuracy),
                test_accuracy: outcome.retrain_report.ood_accuracy,
                keep_ratio: Some(keep_ratio(&outcome.mask)),
                curves: vec![stage_curve("retrain", &outcome.retrain_report)],
                mask: Some(outcome.mask),
            }
        }
        Method::Reinit => {
            let art = run_mrm(&cfg, &data)?;
            let (_, report) = ablation_reinit(&art.arch, &art.mask, &data, &cfg, cfg.seed ^ 0xA5A5)?;
            SeedOutcome {
                train_accuracy: mean(&report.train_env_accuracy),
                test_accuracy: report.ood_accuracy,
                keep_ratio: report.keep_ratio_global,
                curves: vec![stage_curve("retrain", &report)],
                mask: Some(art.mask),
            }
        }
        Method::Rebias => {
            let art = run_mrm(&cfg, &data)?;
            let rebias_spec = rearrange_bias(&spec, config.dataset.data_seed ^ 0xB1A5);
            let (envs2, _) = materialize_dataset(&config.dataset, Some(&rebias_spec), out)?;
            let data2 = PipelineData::from_environments(
                envs2,
                config.dataset.split_fraction,
                config.dataset.data_seed,
            )?;
            let (_, report) = ablation_rebias(&art.arch, &art.snapshot, &art.mask, &data2, &cfg)?;
            SeedOutcome {
                train_accuracy: mean(&report.train_env_accuracy),
                test_accuracy: report.ood_accuracy,
                keep_ratio: report.keep_ratio_global,
                curves: vec![stage_curve("retrain", &report)],
                mask: Some(art.mask),
            }
        }
    };
    Ok(outcome)
}

fn run_dir_for(out: &Path, hash: &str, seed: u64) -> PathBuf {
    out.join("runs").join(format!("{hash}-seed{seed}"))
}

/// Run every seed of an experiment, reusing completed run directories unless
/// `force` is set.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: &Path,
    force: bool,
) -> Result<ExperimentReport> {
    config.validate()?;
    let hash = config.config_hash();
    let mut per_seed = Vec::with_capacity(config.num_seeds);
    for i in 0..config.num_seeds {
        let seed = config.mrm.seed + i as u64;
        let dir = run_dir_for(out, &hash, seed);
        let config_path = dir.join("config.json");
        let canonical = serde_json::to_string_pretty(&serde_json::to_value(config)?)?;
        if config_path.exists() {
            let existing = fs::read_to_string(&config_path)?;
            if existing != canonical {
                return Err(Error::invalid(format!(
                    "config hash collision in {}: stored config differs",
                    dir.display()
                )));
            }
        }
        if dir.join("DONE").exists() && !force {
            let raw = fs::read(dir.join("seed_result.json"))?;
            per_seed.push(serde_json::from_slice(&raw)?);
            continue;
        }
        fs::create_dir_all(&dir)?;
        fs::write(&config_path, &canonical)?;
        let outcome = run_one_seed(config, seed, out)?;
        if let Some(mask) = &outcome.mask {
            export_binary_mask(mask, seed, &format!("{hash}-seed{seed}"), &dir.join("mask"))?;
        }
        let last = outcome.test_accuracy;
        let result = SeedResult {
            seed,
            train_accuracy: outcome.train_accuracy,
            test_accuracy: curve_test_accuracy(&outcome.curves, config.reporting, last),
            keep_ratio: outcome.keep_ratio,
            curves: outcome.curves,
            run_dir: dir.display().to_string(),
        };
        fs::write(dir.join("seed_result.json"), serde_json::to_vec_pretty(&result)?)?;
        if result.curves.iter().any(|c| !c.points.is_empty()) {
            emit_curves_file(&result, &dir.join("curves.csv"))?;
        }
        fs::write(dir.join("DONE"), b"done\n")?;
        per_seed.push(result);
    }
    let (train_mean, train_std) =
        mean_std(&per_seed.iter().map(|s| s.train_accuracy).collect::<Vec<_>>());
    let (test_mean, test_std) =
        mean_std(&per_seed.iter().map(|s| s.test_accuracy).collect::<Vec<_>>());
    let report = ExperimentReport {
        config: config.clone(),
        config_hash: hash,
        per_seed,
        train_mean,
        train_std,
        test_mean,
        test_std,
    };
    fs::create_dir_all(out.join("reports"))?;
    fs::write(
        out.join("reports").join(format!("{}-{}.json", config.method.name(), report.config_hash)),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

/// One row per method, accuracies as "mean ± std" percentages with two
/// decimals. All reports must come from the same dataset block.
pub fn emit_table(reports: &[&ExperimentReport], format: TableFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("cannot emit an empty table"));
    }
    let first = dataset_hash(&reports[0].config.dataset);
    for r in reports {
        // The unbias row intentionally differs only in its zeroed coefficients.
        let mut ds = r.config.dataset.clone();
        if r.config.method == Method::Unbias {
            ds.bias_coefficients = reports[0].config.dataset.bias_coefficients.clone();
        }
        if r.config.method != Method::Unbias && dataset_hash(&ds) != first {
            return Err(Error::invalid("table mixes reports from different datasets"));
        }
    }
    let fmt = |m: f64, s: f64| format!("{:.2} ± {:.2}", m * 100.0, s * 100.0);
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("method,train_mean,train_std,test_mean,test_std\n");
            for r in reports {
                out.push_str(&format!(
                    "{},{:.4},{:.4},{:.4},{:.4}\n",
                    r.config.method.name(),
                    r.train_mean * 100.0,
                    r.train_std * 100.0,
                    r.test_mean * 100.0,
                    r.test_std * 100.0
                ));
            }
        }
        TableFormat::Markdown => {
            out.push_str("| Method | Train accuracy | Test accuracy |\n|---|---|---|\n");
            for r in reports {
                out.push_str(&format!(
                    "| {} | {} | {} |\n",
                    r.config.method.name(),
                    fmt(r.train_mean, r.train_std),
                    fmt(r.test_mean, r.test_std)
                ));
            }
        }
    }
    Ok(out)
}

/// step,stage,split,accuracy,loss rows for every recorded curve point.
pub fn emit_curves_file(result: &SeedResult, path: &Path) -> Result<()> {
    if result.curves.iter().all(|c| c.points.is_empty()) {
        return Err(Error::invalid("no curve points to emit"));
    }
    let mut out = String::from("step,stage,split,accuracy,loss\n");
    for curve in &result.curves {
        for p in &curve.points {
            out.push_str(&format!(
                "{},{},train,{:.6},{:.6}\n",
                p.step, curve.stage, p.train_accuracy, p.loss
            ));
            out.push_str(&format!(
                "{},{},ood,{:.6},{:.6}\n",
                p.step, curve.stage, p.ood_accuracy, p.loss
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Which hyperparameter a grid axis sweeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    Alpha(Vec<f64>),
    LogitLearningRate(Vec<f64>),
    Lambda(Vec<f64>),
    WarmupStep(Vec<usize>),
    Rescale(Vec<bool>),
    EtaQ(Vec<f64>),
}

impl GridAxis {
    fn len(&self) -> usize {
        match self {
            GridAxis::Alpha(v) | GridAxis::LogitLearningRate(v) | GridAxis::Lambda(v)
            | GridAxis::EtaQ(v) => v.len(),
            GridAxis::WarmupStep(v) => v.len(),
            GridAxis::Rescale(v) => v.len(),
        }
    }

    fn apply(&self, idx: usize, cfg: &mut ExperimentConfig) {
        match self {
            GridAxis::Alpha(v) => cfg.mrm.alpha = v[idx],
            GridAxis::LogitLearningRate(v) => cfg.mrm.logit_optimizer.learning_rate = v[idx],
            GridAxis::Lambda(v) => cfg.mrm.objective.penalty_coefficient = v[idx],
            GridAxis::WarmupStep(v) => cfg.mrm.objective.warmup_step = v[idx],
            GridAxis::Rescale(v) => cfg.mrm.objective.rescale_by_coefficient = v[idx],
            GridAxis::EtaQ(v) => cfg.mrm.objective.dro_step_size = v[idx],
        }
    }

    fn label(&self, idx: usize) -> String {
        match self {
            GridAxis::Alpha(v) => format!("alpha={}", v[idx]),
            GridAxis::LogitLearningRate(v) => format!("logit_lr={}", v[idx]),
            GridAxis::Lambda(v) => format!("lambda={}", v[idx]),
            GridAxis::WarmupStep(v) => format!("warmup={}", v[idx]),
            GridAxis::Rescale(v) => format!("rescale={}", v[idx]),
            GridAxis::EtaQ(v) => format!("eta_q={}", v[idx]),
        }
    }
}

pub struct GridOutcome {
    pub best: ExperimentReport,
    pub csv: String,
}

/// Run the full Cartesian grid, select the best cell by test accuracy, and
/// return the per-cell per-seed CSV.
pub fn grid_search(
    base: &ExperimentConfig,
    axes: &[GridAxis],
    out: &Path,
    force: bool,
) -> Result<GridOutcome> {
    if axes.is_empty() || axes.iter().any(|a| a.len() == 0) {
        return Err(Error::invalid("grid must have at least one non-empty axis"));
    }
    let total: usize = axes.iter().map(GridAxis::len).product();
    let mut csv = String::from("cell,seed,train_accuracy,test_accuracy\n");
    let mut best: Option<ExperimentReport> = None;
    for cell in 0..total {
        let mut cfg = base.clone();
        let mut rem = cell;
        let mut labels = Vec::new();
        for axis in axes {
            let idx = rem % axis.len();
            rem /= axis.len();
            axis.apply(idx, &mut cfg);
            labels.push(axis.label(idx));
        }
        let label = labels.join(";");
        let report = run_experiment(&cfg, out, force)?;
        for s in &report.per_seed {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                label, s.seed, s.train_accuracy, s.test_accuracy
            ));
        }
        let better = best.as_ref().is_none_or(|b| report.test_mean > b.test_mean);
        if better {
            best = Some(report);
        }
    }
    fs::write(out.join("grid.csv"), &csv)?;
    Ok(GridOutcome { best: best.expect("non-empty grid"), csv })
}

/// Persist stage-1 weights of an ERM run; used by the standalone `train`
/// command.
pub fn save_stage1_checkpoint(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<PathBuf> {
    let (envs, _) = materialize_dataset(&config.dataset, None, out)?;
    let data =
        PipelineData::from_environments(envs, config.dataset.split_fraction, config.dataset.data_seed)?;
    let (arch, params) = build_convnet::<f32>(data.input_channels(), 10, config.mrm.seed)?;
    let (trained, _snap, _report) = stage1_train(&arch, params, &data, &config.mrm)?;
    let dir = out.join("checkpoints").join(format!("{}-seed{}", config.config_hash(), config.mrm.seed));
    save_checkpoint(&trained, config.mrm.seed, &dir)?;
    Ok(dir)
}

/// The "without stage 3" accuracy used by the stage-3 ablation: the hardened
/// mask applied directly to the stage-1 weights.
pub use crate::pipeline::masked_stage1_accuracy as masked_stage1;

//! Manual timing probe (ignored by default): step cost of the full-width
//! model at desk batch sizes.

use modnet::data::{build_full_colored_mnist, synthetic_digit_bank, BiasSpec, ColorPalette};
use modnet::nn::{backward, build_convnet, commit_bn_stats, forward, forward_tape, Mode};
use modnet::objective::{cross_entropy_with_grad, ObjectiveSpec};
use modnet::pipeline::{stage1_train, MrmConfig, PipelineData};
use ndarray::{s, Array4};
use std::time::Instant;

fn desk_data(coefficients: Vec<f64>) -> PipelineData<f32> {
    let (gray, labels) = synthetic_digit_bank::<f32>(10_000, 7);
    let spec = BiasSpec::identity(coefficients, 2).unwrap();
    let envs =
        build_full_colored_mnist(&gray, &labels, &spec, &ColorPalette::default(), 7).unwrap();
    PipelineData::from_environments(envs, 0.5, 7).unwrap()
}

#[test]
#[ignore]
fn pilot_alpha_sweep() {
    let data = desk_data(vec![1.0, 0.9, 0.0]);
    let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 0);
    cfg.n1 = 500;
    cfg.n2 = 500;
    cfg.batch_size = 4;
    cfg.eval_cadence = 500;
    cfg.final_eval_cap = Some(1024);
    let (arch, params) = build_convnet::<f32>(3, 10, cfg.seed).unwrap();
    let (trained, snapshot, s1) = stage1_train(&arch, params, &data, &cfg).unwrap();
    eprintln!("stage1 ERM: train {:?} ood {:.3}", s1.train_env_accuracy, s1.ood_accuracy);
    for &alpha in &[1e-8f64, 1e-7, 1e-6] {
        let mut c2 = cfg.clone();
        c2.alpha = alpha;
        let probe_envs: Vec<&modnet::data::EnvironmentDataset<f32>> =
            data.train_envs.iter().collect();
        let (logits, s2) = modnet::pipeline::stage2_probe(
            &arch,
            &trained,
            &probe_envs,
            modnet::pipeline::LabelTarget::Class,
            Some(&data.eval_split),
            &c2,
        )
        .unwrap();
        let mask = modnet::mask::harden(&logits);
        let masked_s1 = modnet::pipeline::evaluate_out(
            &arch,
            &trained,
            Some(&mask),
            &data.eval_split,
            modnet::pipeline::LabelTarget::Class,
        )
        .unwrap();
        let (_, s3) =
            modnet::pipeline::stage3_retrain(&arch, &snapshot, &mask, &data, &c2).unwrap();
        eprintln!(
            "alpha {alpha:.0e}: keep {:.4} | probe-train {:?} | masked-s1 ood {:.3} | s3 ood {:.3}",
            s2.keep_ratio_global.unwrap(),
            s2.train_env_accuracy,
            masked_s1,
            s3.ood_accuracy
        );
    }
}

#[test]
#[ignore]
fn pilot_tune() {
    use modnet::pipeline as pl;
    let data = desk_data(vec![1.0, 0.9, 0.0]);
    let mut base = MrmConfig::new(ObjectiveSpec::erm(), 0);
    base.alpha = 1e-7;
    base.n1 = 500;
    base.n2 = 500;
    base.batch_size = 4;
    base.eval_cadence = 500;
    base.final_eval_cap = Some(1024);
    let (arch, params) = modnet::nn::build_convnet::<f32>(3, 10, base.seed).unwrap();
    let (trained, snapshot, s1) = stage1_train(&arch, params, &data, &base).unwrap();
    eprintln!("ERM ood {:.3}", s1.ood_accuracy);
    for &init in &[1.0f64, 2.0] {
        let mut cfg = base.clone();
        cfg.init_logit = init;
        let probe_envs: Vec<&modnet::data::EnvironmentDataset<f32>> =
            data.train_envs.iter().collect();
        let (logits, _) = pl::stage2_probe(
            &arch,
            &trained,
            &probe_envs,
            pl::LabelTarget::Class,
            Some(&data.eval_split),
            &cfg,
        )
        .unwrap();
        let mask = modnet::mask::harden(&logits);
        let (_, s3) = pl::stage3_retrain(&arch, &snapshot, &mask, &data, &cfg).unwrap();
        let (omask, _) = pl::oracle_probe(&arch, &trained, &data.probe_split, &cfg).unwrap();
        let (_, os3) = pl::stage3_retrain(&arch, &snapshot, &omask, &data, &cfg).unwrap();
        let ((_, _wr), (_, lr)) =
            pl::run_random_baselines(&arch, &snapshot, &mask, &data, &cfg).unwrap();
        let (_, ri) = pl::ablation_reinit(&arch, &omask, &data, &cfg, cfg.seed ^ 0xA5A5).unwrap();
        eprintln!(
            "init {init}: keep {:.3} per-layer {:?} | MRM {:.3} | oracle {:.3} keep {:.3} | \
             rand_layer {:.3} | reinit {:.3}",
            modnet::mask::keep_ratio(&mask),
            modnet::mask::per_layer_keep_ratio(&mask)
                .iter()
                .map(|r| (r * 100.0).round() / 100.0)
                .collect::<Vec<_>>(),
            s3.ood_accuracy,
            os3.ood_accuracy,
            modnet::mask::keep_ratio(&omask),
            lr.ood_accuracy,
            ri.ood_accuracy
        );
    }
}

#[test]
#[ignore]
fn pilot_jp() {
    let udata = desk_data(vec![0.0, 0.0, 0.0]);
    for (alpha, n1) in [(1e-5f64, 500usize), (1e-5, 1000)] {
        let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 0);
        cfg.alpha = alpha;
        cfg.n1 = n1;
        cfg.n2 = 500;
        cfg.batch_size = 4;
        cfg.eval_cadence = 1000;
        cfg.final_eval_cap = Some(1024);
        let jp = modnet::pipeline::joint_prune(&udata, &cfg, 0.1).unwrap();
        eprintln!(
            "jp alpha {alpha:.0e} n1 {n1}: ood {:.3} keep {:.3} reached {} after {} prune steps",
            jp.retrain_report.ood_accuracy,
            modnet::mask::keep_ratio(&jp.mask),
            jp.target_reached,
            jp.prune_steps
        );
    }
}

#[test]
#[ignore]
fn pilot_a8() {
    use modnet::experiment::{ExperimentConfig, Method, Preset};
    use modnet::pipeline as pl;
    let data = desk_data(vec![1.0, 0.9, 0.0]);
    let alpha = 1e-8;
    let mut cfg = ExperimentConfig::preset(Preset::Desk, Method::Mrm, 0).mrm;
    cfg.alpha = alpha;
    cfg.eval_cadence = 500;
    let art = pl::run_mrm(&cfg, &data).unwrap();
    let masked = pl::masked_stage1_accuracy(&art, &data).unwrap();
    eprintln!(
        "ERM {:.3} MRM {:.3} masked_s1 {:.3} keep {:.3} profile {:?}",
        art.stage1.ood_accuracy,
        art.stage3.ood_accuracy,
        masked,
        modnet::mask::keep_ratio(&art.mask),
        modnet::mask::per_layer_keep_ratio(&art.mask)
            .iter()
            .map(|r| (r * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
    let (omask, _) =
        pl::oracle_probe(&art.arch, &art.stage1_params, &data.probe_split, &cfg).unwrap();
    let (_, os3) = pl::stage3_retrain(&art.arch, &art.snapshot, &omask, &data, &cfg).unwrap();
    eprintln!("oracle {:.3} keep {:.3}", os3.ood_accuracy, modnet::mask::keep_ratio(&omask));
    for rseed in [10u64, 20, 30] {
        let mut c2 = cfg.clone();
        c2.seed = rseed;
        let ((_, wr), (_, lr)) =
            pl::run_random_baselines(&art.arch, &art.snapshot, &art.mask, &data, &c2).unwrap();
        eprintln!("rseed {rseed}: whole {:.3} layer {:.3}", wr.ood_accuracy, lr.ood_accuracy);
    }
    let (_, ri) = pl::ablation_reinit(&art.arch, &omask, &data, &cfg, cfg.seed ^ 0xA5A5).unwrap();
    let spec = BiasSpec::identity(vec![1.0, 0.9, 0.0], 2).unwrap();
    let respec = modnet::data::rearrange_bias(&spec, 7 ^ 0xB1A5);
    let (gray, labels) = synthetic_digit_bank::<f32>(10_000, 7);
    let envs2 =
        build_full_colored_mnist(&gray, &labels, &respec, &ColorPalette::default(), 7).unwrap();
    let data2 = PipelineData::from_environments(envs2, 0.5, 7).unwrap();
    let (_, rb) = pl::ablation_rebias(&art.arch, &art.snapshot, &art.mask, &data2, &cfg).unwrap();
    eprintln!("reinit {:.3} rebias {:.3}", ri.ood_accuracy, rb.ood_accuracy);
    for method in [Method::ModDro, Method::ModRex] {
        let mut mc = ExperimentConfig::preset(Preset::Desk, method, 0).mrm;
        mc.alpha = alpha;
        mc.eval_cadence = 500;
        let a = pl::run_mrm(&mc, &data).unwrap();
        eprintln!(
            "{}: base {:.3} mod {:.3}",
            method.name(),
            a.stage1.ood_accuracy,
            a.stage3.ood_accuracy
        );
    }
}

#[test]
#[ignore]
fn pilot_rand() {
    use modnet::pipeline as pl;
    let data = desk_data(vec![1.0, 0.9, 0.0]);
    let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 0);
    cfg.alpha = 1e-7;
    cfg.n1 = 500;
    cfg.n2 = 500;
    cfg.batch_size = 4;
    cfg.eval_cadence = 500;
    cfg.final_eval_cap = Some(1024);
    let art = modnet::pipeline::run_mrm(&cfg, &data).unwrap();
    eprintln!(
        "ERM {:.3} train {:?} | MRM {:.3} | keep {:.3} profile {:?}",
        art.stage1.ood_accuracy,
        art.stage1.train_env_accuracy,
        art.stage3.ood_accuracy,
        modnet::mask::keep_ratio(&art.mask),
        modnet::mask::per_layer_keep_ratio(&art.mask)
            .iter()
            .map(|r| (r * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
    for rseed in [10u64, 20, 30, 40, 50] {
        let mut c2 = cfg.clone();
        c2.seed = rseed;
        let ((_, wr), (_, lr)) =
            pl::run_random_baselines(&art.arch, &art.snapshot, &art.mask, &data, &c2).unwrap();
        eprintln!(
            "rseed {rseed}: whole ood {:.3} train {:?} | layer ood {:.3} train {:?}",
            wr.ood_accuracy, wr.train_env_accuracy, lr.ood_accuracy, lr.train_env_accuracy
        );
    }
}

#[test]
#[ignore]
fn pilot_bank() {
    use modnet::pipeline as pl;
    let data = desk_data(vec![1.0, 0.9, 0.0]);
    let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 0);
    cfg.alpha = 1e-7;
    cfg.n1 = 500;
    cfg.n2 = 500;
    cfg.batch_size = 4;
    cfg.eval_cadence = 500;
    cfg.final_eval_cap = Some(1024);

    let art = modnet::pipeline::run_mrm(&cfg, &data).unwrap();
    let erm = art.stage1.ood_accuracy;
    let mrm = art.stage3.ood_accuracy;
    eprintln!("ERM {erm:.3} | MRM {mrm:.3} keep {:.3}", art.stage2.keep_ratio_global.unwrap());

    let (omask, _) = pl::oracle_probe(&art.arch, &art.stage1_params, &data.probe_split, &cfg).unwrap();
    let (_, os3) = pl::stage3_retrain(&art.arch, &art.snapshot, &omask, &data, &cfg).unwrap();
    eprintln!("oracle {:.3} keep {:.3}", os3.ood_accuracy, os3.keep_ratio_global.unwrap());

    let ((_, wr), (_, lr)) =
        pl::run_random_baselines(&art.arch, &art.snapshot, &art.mask, &data, &cfg).unwrap();
    eprintln!("rand_whole {:.3} rand_layer {:.3}", wr.ood_accuracy, lr.ood_accuracy);

    let (_, ri) = pl::ablation_reinit(&art.arch, &omask, &data, &cfg, cfg.seed ^ 0xA5A5).unwrap();
    eprintln!("reinit(oracle mask) {:.3}", ri.ood_accuracy);

    let spec = BiasSpec::identity(vec![1.0, 0.9, 0.0], 2).unwrap();
    let respec = modnet::data::rearrange_bias(&spec, 7 ^ 0xB1A5);
    let (gray, labels) = synthetic_digit_bank::<f32>(10_000, 7);
    let envs2 =
        build_full_colored_mnist(&gray, &labels, &respec, &ColorPalette::default(), 7).unwrap();
    let data2 = PipelineData::from_environments(envs2, 0.5, 7).unwrap();
    let (_, rb) = pl::ablation_rebias(&art.arch, &art.snapshot, &art.mask, &data2, &cfg).unwrap();
    eprintln!("rebias(MRM mask) {:.3}", rb.ood_accuracy);

    let mmask = modnet::mask::magnitude_mask(&art.stage1_params, 0.1).unwrap();
    let (_, ms3) = pl::stage3_retrain(&art.arch, &art.snapshot, &mmask, &data, &cfg).unwrap();
    eprintln!("magnitude {:.3}", ms3.ood_accuracy);

    // Unbiased task for the pruning comparison.
    let udata = desk_data(vec![0.0, 0.0, 0.0]);
    let (arch, params) = modnet::nn::build_convnet::<f32>(3, 10, cfg.seed).unwrap();
    let (dense, snap, ds1) = stage1_train(&arch, params, &udata, &cfg).unwrap();
    let jp = pl::joint_prune(&udata, &cfg, 0.1).unwrap();
    let umask = modnet::mask::magnitude_mask(&dense, 0.1).unwrap();
    let (_, us3) = pl::stage3_retrain(&arch, &snap, &umask, &udata, &cfg).unwrap();
    eprintln!(
        "dense(unbias) {:.3} | joint_prune {:.3} keep {:.3} reached {} | magnitude(unbias) {:.3}",
        ds1.ood_accuracy,
        jp.retrain_report.ood_accuracy,
        modnet::mask::keep_ratio(&jp.mask),
        jp.target_reached,
        us3.ood_accuracy
    );
}

#[test]
#[ignore]
fn pilot_mrm() {
    let data = desk_data(vec![1.0, 0.9, 0.0]);
    let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 0);
    cfg.n1 = 500;
    cfg.n2 = 500;
    cfg.batch_size = 4;
    cfg.eval_cadence = 500;
    cfg.final_eval_cap = Some(1024);
    let t = Instant::now();
    let art = modnet::pipeline::run_mrm(&cfg, &data).unwrap();
    println!(
        "ERM ood {:.3} | MRM ood {:.3} keep {:.4} | masked-stage1 ood {:.3} ({:.0} s)",
        art.stage1.ood_accuracy,
        art.stage3.ood_accuracy,
        art.stage2.keep_ratio_global.unwrap(),
        modnet::pipeline::masked_stage1_accuracy(&art, &data).unwrap(),
        t.elapsed().as_secs_f64()
    );
    let (mask, oracle_probe_report) =
        modnet::pipeline::oracle_probe(&art.arch, &art.stage1_params, &data.probe_split, &cfg)
            .unwrap();
    let (_, s3) =
        modnet::pipeline::stage3_retrain(&art.arch, &art.snapshot, &mask, &data, &cfg).unwrap();
    println!(
        "oracle ood {:.3} keep {:.4} (probe {:.0} s)",
        s3.ood_accuracy,
        s3.keep_ratio_global.unwrap(),
        oracle_probe_report.wall_clock_secs
    );
}

#[test]
#[ignore]
fn pilot_erm_vs_unbias() {
    for (name, coeffs) in [
        ("ERM", vec![1.0, 0.9, 0.0]),
        ("unbias", vec![0.0, 0.0, 0.0]),
    ] {
        let data = desk_data(coeffs);
        let mut cfg = MrmConfig::new(ObjectiveSpec::erm(), 0);
        cfg.n1 = 500;
        cfg.n2 = 500;
        cfg.batch_size = 4;
        cfg.eval_cadence = 500;
        cfg.final_eval_cap = Some(1024);
        let (arch, params) = build_convnet::<f32>(3, 10, cfg.seed).unwrap();
        let t = Instant::now();
        let (_, _, report) = stage1_train(&arch, params, &data, &cfg).unwrap();
        println!(
            "{name}: train {:?} ood {:.3} in {:.1} s",
            report.train_env_accuracy,
            report.ood_accuracy,
            t.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn step_timing() {
    let (gray, labels) = synthetic_digit_bank::<f32>(600, 0);
    let spec = BiasSpec::identity(vec![1.0, 0.9, 0.0], 2).unwrap();
    let envs =
        build_full_colored_mnist(&gray, &labels, &spec, &ColorPalette::default(), 0).unwrap();
    let (arch, mut params) = build_convnet::<f32>(3, 10, 0).unwrap();
    for &bs in &[4usize, 8, 16] {
        let batch: Array4<f32> = envs[0].images.slice(s![..bs, .., .., ..]).to_owned();
        let labels: Vec<usize> = envs[0].class_labels[..bs].iter().map(|&l| l as usize).collect();
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let (scores, tape) = forward_tape(&arch, &params, None, &batch).unwrap();
            let (_, d) = cross_entropy_with_grad(&scores, &labels).unwrap();
            commit_bn_stats(&mut params, &tape);
            let _ = backward(&arch, &params, None, tape, &d).unwrap();
        }
        let per = t.elapsed().as_secs_f64() / reps as f64;
        let t2 = Instant::now();
        for _ in 0..reps {
            let _ = forward(&arch, &params, None, &batch, Mode::Eval).unwrap();
        }
        let fwd = t2.elapsed().as_secs_f64() / reps as f64;
        println!("batch {bs}: fwd+bwd {:.1} ms, fwd {:.1} ms", per * 1e3, fwd * 1e3);
    }
}

use std::path::Path;
use trapnet::attack::*;
use trapnet::detect::*;
use trapnet::io::bundle::*;
use trapnet::io::synth::synth_digits;
use trapnet::model::{mnist_cnn_spec, train, Model, TrainConfig};
use trapnet::trapdoor::*;

fn pctl(sorted: &[f32], p: f32) -> f32 {
    let n = sorted.len();
    let rank = ((p * n as f32).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn get_model(path: &str, build: impl FnOnce() -> Model) -> Model {
    let p = Path::new(path);
    if p.exists() {
        load_bundle(p).unwrap().instantiate_model().unwrap()
    } else {
        let m = build();
        save_bundle(&ArtifactBundle::from_model(&m), p).unwrap();
        m
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("all");

    let train_set = synth_digits(10_000, 1).unwrap();
    let test_set = synth_digits(2_000, 2).unwrap();
    let (calib, eval) = test_set.split_at(1_000);
    let target = 5usize;
    let reg = TrapdoorRegistry::single_label([1,28,28], target, 6, 0.1, 200).unwrap();

    let clean_model = get_model("/tmp/bench_clean.bundle", || {
        let mut m = Model::build(mnist_cnn_spec(), 100).unwrap();
        train(&mut m, &train_set, &TrainConfig::standard(101)).unwrap();
        m
    });
    let trap_model = get_model("/tmp/bench_trap.bundle", || {
        let m = Model::build(mnist_cnn_spec(), 100).unwrap();
        train_trapdoored(m, &train_set, &reg, &TrainingConfig::standard(101)).unwrap().0
    });
    println!("clean acc {:.4}  trap acc {:.4}", clean_model.accuracy(&eval).unwrap(), trap_model.accuracy(&eval).unwrap());

    let layer = LayerKey::Single(trap_model.spec.default_feature_layer());
    let det = build_signatures(&trap_model, &reg, &calib, &layer, None, 0.05).unwrap()
        .calibrate(&trap_model, &calib, 0.05).unwrap();
    let det_clean = build_signatures(&clean_model, &reg, &calib, &layer, None, 0.05).unwrap()
        .calibrate(&clean_model, &calib, 0.05).unwrap();
    println!("threshold {:?}  heldout FPR {:.4}", det.thresholds, det.flag_rate(&trap_model, &eval.inputs).unwrap());
    let benign95 = det.thresholds[&target];

    let pool = eval.filter_label_ne(target);
    let craft = pool.subset(&(0..150.min(pool.len())).collect::<Vec<_>>());

    let eps_over: f32 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(8.0);
    let desk = move |method: AttackMethod| -> AttackConfig {
        let mut cfg = AttackConfig::preset(method, 777);
        cfg.eps = eps_over / 255.0;
        cfg.step_size = 0.1 * cfg.eps;
        match method {
            AttackMethod::Cw => { cfg.iterations = 200; cfg.cw.binary_steps = 5; }
            AttackMethod::ElasticNet => { cfg.iterations = 200; cfg.cw.binary_steps = 5; cfg.cw.lr = 0.05; }
            AttackMethod::Spsa => { cfg.iterations = 100; }
            _ => {}
        }
        cfg
    };

    let methods: Vec<AttackMethod> = match which {
        "grad" => vec![AttackMethod::Fgsm, AttackMethod::Pgd, AttackMethod::Bpda],
        "opt" => vec![AttackMethod::Cw, AttackMethod::ElasticNet],
        "spsa" => vec![AttackMethod::Spsa],
        _ => AttackMethod::standard_suite().to_vec(),
    };

    for method in methods {
        let cfg = desk(method);
        let t1 = std::time::Instant::now();
        let out = run_standard_attack(&trap_model, &craft.inputs, target, &cfg).unwrap();
        let succ = out.successful_indices();
        let dets = det.detect_batch(&trap_model, &out.x_adv).unwrap();
        let flags = succ.iter().filter(|&&i| dets[i].flag).count();
        let dr = flags as f32 / succ.len().max(1) as f32;
        let mut sims: Vec<f32> = succ.iter().filter_map(|&i| dets[i].best_similarity).collect();
        sims.sort_by(|a,b| a.partial_cmp(b).unwrap());
        let p25 = if sims.is_empty() { f32::NAN } else { pctl(&sims, 0.25) };

        let out_c = run_standard_attack(&clean_model, &craft.inputs, target, &cfg).unwrap();
        let succ_c = out_c.successful_indices();
        let dets_c = det_clean.detect_batch(&clean_model, &out_c.x_adv).unwrap();
        let flags_c = succ_c.iter().filter(|&&i| dets_c[i].flag).count();
        let dr_c = if succ_c.is_empty() { f32::NAN } else { flags_c as f32 / succ_c.len() as f32 };

        println!("{:12} trap: succ {:.3} det {:.3} p25 {:.3} (thr {:.3}) | clean: succ {:.3} det {:.3} | {:?}",
            method.name(), out.success_rate(), dr, p25, benign95, out_c.success_rate(), dr_c, t1.elapsed());
    }
}

use std::path::Path;
use trapnet::attack::*;
use trapnet::detect::*;
use trapnet::io::bundle::*;
use trapnet::io::synth::synth_digits;
use trapnet::trapdoor::*;

fn main() {
    let test_set = synth_digits(2_000, 2).unwrap();
    let (calib, eval) = test_set.split_at(1_000);
    let target = 5usize;
    let reg = TrapdoorRegistry::single_label([1,28,28], target, 6, 0.1, 200).unwrap();
    let trap_model = load_bundle(Path::new("/tmp/bench_trap.bundle")).unwrap().instantiate_model().unwrap();
    let layer = LayerKey::Single(trap_model.spec.default_feature_layer());
    let det = build_signatures(&trap_model, &reg, &calib, &layer, None, 0.05).unwrap()
        .calibrate(&trap_model, &calib, 0.05).unwrap();
    let pool = eval.filter_label_ne(target);
    let craft = pool.subset(&(0..120.min(pool.len())).collect::<Vec<_>>());

    for (conf, iters, bsteps, lr) in [(2.0f32, 120usize, 4usize, 0.1f32), (5.0, 120, 4, 0.1)] {
        let mut cfg = AttackConfig::preset(AttackMethod::Cw, 777);
        cfg.iterations = iters; cfg.cw.binary_steps = bsteps; cfg.cw.lr = lr; cfg.cw.confidence = conf;
        let t1 = std::time::Instant::now();
        let out = cw_l2(&trap_model, &craft.inputs, target, &cfg).unwrap();
        let succ = out.successful_indices();
        let dets = det.detect_batch(&trap_model, &out.x_adv).unwrap();
        let flags = succ.iter().filter(|&&i| dets[i].flag).count();
        println!("cw conf={conf} iters={iters} bs={bsteps} lr={lr}: succ {:.3} det {:.3} ({:?})",
            out.success_rate(), flags as f32 / succ.len().max(1) as f32, t1.elapsed());
        // elastic net with same confidence
        let mut cfg = AttackConfig::preset(AttackMethod::ElasticNet, 778);
        cfg.iterations = iters; cfg.cw.binary_steps = bsteps; cfg.cw.lr = 0.05; cfg.cw.confidence = conf;
        let t1 = std::time::Instant::now();
        let out = elastic_net(&trap_model, &craft.inputs, target, &cfg).unwrap();
        let succ = out.successful_indices();
        let dets = det.detect_batch(&trap_model, &out.x_adv).unwrap();
        let flags = succ.iter().filter(|&&i| dets[i].flag).count();
        println!("en conf={conf}: succ {:.3} det {:.3} ({:?})",
            out.success_rate(), flags as f32 / succ.len().max(1) as f32, t1.elapsed());
    }
}

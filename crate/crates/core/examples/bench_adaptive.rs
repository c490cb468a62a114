use std::path::Path;
use trapnet::attack::*;
use trapnet::detect::*;
use trapnet::io::bundle::*;
use trapnet::io::synth::synth_digits;
use trapnet::trapdoor::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("spsa");
    let test_set = synth_digits(2_000, 2).unwrap();
    let (calib, eval) = test_set.split_at(1_000);
    let target = 5usize;
    let reg = TrapdoorRegistry::single_label([1,28,28], target, 6, 0.1, 200).unwrap();
    let trap_model = load_bundle(Path::new("/tmp/bench_trap.bundle")).unwrap().instantiate_model().unwrap();
    let layer = LayerKey::Single(trap_model.spec.default_feature_layer());
    let det_full = build_signatures(&trap_model, &reg, &calib, &layer, None, 0.05).unwrap()
        .calibrate(&trap_model, &calib, 0.05).unwrap();
    let pool = eval.filter_label_ne(target);
    let craft = pool.subset(&(0..120.min(pool.len())).collect::<Vec<_>>());
    let eps = 16.0f32 / 255.0;

    match which {
        "spsa" => {
            for (iters, lr, probes) in [(60usize, 0.02f32, 8usize), (100, 0.02, 8)] {
                let mut cfg = AttackConfig::preset(AttackMethod::Spsa, 777);
                cfg.eps = eps; cfg.iterations = iters; cfg.spsa.lr = lr; cfg.spsa.probes = probes;
                let t1 = std::time::Instant::now();
                let out = spsa(&trap_model, &craft.inputs, target, &cfg).unwrap();
                let succ = out.successful_indices();
                let dets = det_full.detect_batch(&trap_model, &out.x_adv).unwrap();
                let flags = succ.iter().filter(|&&i| dets[i].flag).count();
                println!("spsa iters={iters} lr={lr} probes={probes}: succ {:.3} det {:.3} ({:?})",
                    out.success_rate(), flags as f32 / succ.len().max(1) as f32, t1.elapsed());
            }
        }
        "oracle" => {
            // subsampled detector (5% of neurons), rotated seed
            let (skey, sidx) = sample_neuron_subset(&trap_model, &[trap_model.spec.default_feature_layer()], 0.05, 4242).unwrap();
            let det_sub = build_signatures(&trap_model, &reg, &calib, &skey, Some(&sidx), 0.05).unwrap()
                .calibrate(&trap_model, &calib, 0.05).unwrap();

            // PGD baseline post-detection success
            let mut pgd_cfg = AttackConfig::preset(AttackMethod::Pgd, 777);
            pgd_cfg.eps = eps; pgd_cfg.step_size = 0.1 * eps;
            let pgd_out = pgd(&trap_model, &craft.inputs, target, &pgd_cfg).unwrap();
            let pgd_dets = det_full.detect_batch(&trap_model, &pgd_out.x_adv).unwrap();
            let pgd_post = pgd_out.results.iter().enumerate()
                .filter(|(i, r)| r.success && !pgd_dets[*i].flag).count() as f32 / pgd_out.results.len() as f32;
            println!("pgd: succ {:.3} post-detection-succ {:.3}", pgd_out.success_rate(), pgd_post);

            for (w, iters) in [(1.0f32, 300usize), (3.0, 300), (10.0, 300)] {
                let mut cfg = AttackConfig::preset(AttackMethod::OracleSig, 777);
                cfg.eps = eps; cfg.step_size = 0.1 * eps; cfg.iterations = iters;
                cfg.adaptive.distance_weight = w;
                let t1 = std::time::Instant::now();
                let sigs = det_full.signatures.get(&target).unwrap();
                let out = oracle_signature_attack(&trap_model, &craft.inputs, target, sigs, &cfg).unwrap();
                let dets = det_full.detect_batch(&trap_model, &out.x_adv).unwrap();
                let post_full = out.results.iter().enumerate()
                    .filter(|(i, r)| r.success && !dets[*i].flag).count() as f32 / out.results.len() as f32;
                let dets_sub = det_sub.detect_batch(&trap_model, &out.x_adv).unwrap();
                let post_sub = out.results.iter().enumerate()
                    .filter(|(i, r)| r.success && !dets_sub[*i].flag).count() as f32 / out.results.len() as f32;
                println!("oracle w={w} iters={iters}: succ {:.3} post-full {:.3} post-sub5% {:.3} ({:?})",
                    out.success_rate(), post_full, post_sub, t1.elapsed());
            }
        }
        "subset" => {
            // C7: 6% neuron sampling vs full signature on PGD
            let mut pgd_cfg = AttackConfig::preset(AttackMethod::Pgd, 777);
            pgd_cfg.eps = eps; pgd_cfg.step_size = 0.1 * eps;
            let pgd_out = pgd(&trap_model, &craft.inputs, target, &pgd_cfg).unwrap();
            let succ = pgd_out.successful_indices();
            let full_dets = det_full.detect_batch(&trap_model, &pgd_out.x_adv).unwrap();
            let full_rate = succ.iter().filter(|&&i| full_dets[i].flag).count() as f32 / succ.len() as f32;
            let pools: Vec<Vec<usize>> = vec![vec![5], vec![3, 5], vec![3, 5, 6], vec![2, 3, 5, 6]];
            for pool_ids in &pools {
            for seed in [1u64, 2, 3] {
                let (skey, sidx) = sample_neuron_subset(&trap_model, pool_ids, 0.06, seed).unwrap();
                let det_sub = build_signatures(&trap_model, &reg, &calib, &skey, Some(&sidx), 0.05).unwrap()
                    .calibrate(&trap_model, &calib, 0.05).unwrap();
                let dets = det_sub.detect_batch(&trap_model, &pgd_out.x_adv).unwrap();
                let rate = succ.iter().filter(|&&i| dets[i].flag).count() as f32 / succ.len() as f32;
                let fpr = det_sub.flag_rate(&trap_model, &eval.inputs).unwrap();
                println!("subset 6% pool={pool_ids:?} seed={seed}: det {:.3} (full {:.3}) fpr {:.4}", rate, full_rate, fpr);
            }
            }
        }
        _ => {}
    }
}

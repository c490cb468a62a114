use trapnet::attack::*;
use trapnet::detect::*;
use trapnet::io::bundle::*;
use trapnet::io::synth::synth_digits;
use trapnet::model::{mnist_cnn_spec, Model};
use trapnet::trapdoor::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ratio: f32 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(0.7);
    let epochs: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(7);
    let train_set = synth_digits(10_000, 1).unwrap();
    let test_set = synth_digits(2_000, 2).unwrap();
    let (calib, eval) = test_set.split_at(1_000);
    let target = 5usize;
    let reg = TrapdoorRegistry::single_label([1,28,28], target, 6, 0.1, 200).unwrap();

    let model = Model::build(mnist_cnn_spec(), 100).unwrap();
    let cfg = TrainingConfig { injection_ratio: ratio, epochs, ..TrainingConfig::standard(101) };
    let (trap_model, _) = train_trapdoored(model, &train_set, &reg, &cfg).unwrap();
    let inj = injection_success_rate(&trap_model, &eval, &reg).unwrap()[&target];
    let acc = trap_model.accuracy(&eval).unwrap();
    println!("ratio={ratio} epochs={epochs}: inj {:.4} acc {:.4}", inj, acc);
    save_bundle(&ArtifactBundle::from_model(&trap_model), std::path::Path::new("/tmp/bench_trap2.bundle")).unwrap();

    let layer = LayerKey::Single(trap_model.spec.default_feature_layer());
    let det_full = build_signatures(&trap_model, &reg, &calib, &layer, None, 0.05).unwrap()
        .calibrate(&trap_model, &calib, 0.05).unwrap();
    let pool = eval.filter_label_ne(target);
    let craft = pool.subset(&(0..120).collect::<Vec<_>>());
    let eps = 16.0f32/255.0;
    let mut pgd_cfg = AttackConfig::preset(AttackMethod::Pgd, 777);
    pgd_cfg.eps = eps; pgd_cfg.step_size = 0.1*eps;
    let out = pgd(&trap_model, &craft.inputs, target, &pgd_cfg).unwrap();
    let succ = out.successful_indices();
    let fdets = det_full.detect_batch(&trap_model, &out.x_adv).unwrap();
    let frate = succ.iter().filter(|&&i| fdets[i].flag).count() as f32 / succ.len() as f32;
    println!("full: det {:.3} fpr {:.4} thr {:.3}", frate, det_full.flag_rate(&trap_model, &eval.inputs).unwrap(), det_full.thresholds[&target]);
    for pool_ids in [vec![5usize], vec![3,5,6]] {
        for seed in [1u64,2,3,4,5,6] {
            let (skey, sidx) = sample_neuron_subset(&trap_model, &pool_ids, 0.06, seed).unwrap();
            let det_sub = build_signatures(&trap_model, &reg, &calib, &skey, Some(&sidx), 0.05).unwrap()
                .calibrate(&trap_model, &calib, 0.05).unwrap();
            let dets = det_sub.detect_batch(&trap_model, &out.x_adv).unwrap();
            let rate = succ.iter().filter(|&&i| dets[i].flag).count() as f32 / succ.len() as f32;
            print!("{:.3} ", rate);
        }
        println!("<- pool {:?}", pool_ids);
    }
}

use trapnet::io::bundle::*;
use trapnet::io::synth::synth_digits;
use trapnet::model::{mnist_cnn_spec, train, Model, TrainConfig};
use trapnet::trapdoor::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ratio: f32 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(0.8);
    let epochs: usize = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(6);
    let train_set = synth_digits(10_000, 1).unwrap();
    let test_set = synth_digits(2_000, 2).unwrap();
    let (_, eval) = test_set.split_at(1_000);

    let mut clean = Model::build(mnist_cnn_spec(), 100).unwrap();
    train(&mut clean, &train_set, &TrainConfig::standard(101)).unwrap();
    let clean_acc = clean.accuracy(&eval).unwrap();
    save_bundle(&ArtifactBundle::from_model(&clean), std::path::Path::new("/tmp/bench_clean2.bundle")).unwrap();

    let reg = TrapdoorRegistry::all_labels([1,28,28], 10, 0.1, 300).unwrap();
    let warm: bool = args.get(3).map(|v| v == "warm").unwrap_or(false);
    let model = if warm { clean.deep_clone() } else { Model::build(mnist_cnn_spec(), 100).unwrap() };
    let lr: f32 = args.get(4).map(|v| v.parse().unwrap()).unwrap_or(0.001);
    let cfg = TrainingConfig { injection_ratio: ratio, epochs, lr, ..TrainingConfig::standard(101) };
    let t = std::time::Instant::now();
    let (trap, _) = train_trapdoored(model, &train_set, &reg, &cfg).unwrap();
    let acc = trap.accuracy(&eval).unwrap();
    let rates = injection_success_rate(&trap, &eval, &reg).unwrap();
    let min = rates.values().cloned().fold(f32::INFINITY, f32::min);
    println!("all-label ratio={ratio} epochs={epochs}: clean_acc {:.4} trap_acc {:.4} (drop {:.2}pp) min_inj {:.4} ({:?})",
        clean_acc, acc, (clean_acc-acc)*100.0, min, t.elapsed());
    println!("per-label: {:?}", rates.values().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>());
    save_bundle(&ArtifactBundle::from_model(&trap).with_registry(&reg), std::path::Path::new("/tmp/bench_all.bundle")).unwrap();
}

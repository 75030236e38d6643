use dreg_core::model::{ModelParams, NetworkConfig};
use dreg_core::objective::LossConfig;
use dreg_core::phantom::{generate_pair, PhantomClass, PhantomSpec};
use dreg_core::train::{train_step, AdamState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = PhantomSpec::sample(PhantomClass::Norm, 64, &mut rng);
    let pair = generate_pair(&spec).unwrap();
    let mut model = ModelParams::init(NetworkConfig::default(), 64, 64, 1).unwrap();
    println!("params: {}", model.num_parameters());
    let mut adam = AdamState::new(model.params());
    let loss_cfg = LossConfig::default();
    let cfg = TrainConfig::default();
    let eps = vec![vec![0.1; 32]];
    let batch = vec![(&pair.es, &pair.ed)];
    // warmup
    train_step(&mut model, &mut adam, &batch, &eps, &loss_cfg, &cfg).unwrap();
    let t0 = Instant::now();
    let n = 20;
    for _ in 0..n {
        train_step(&mut model, &mut adam, &batch, &eps, &loss_cfg, &cfg).unwrap();
    }
    println!("train_step: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t1 = Instant::now();
    for _ in 0..5 {
        model.register(&pair.es, &pair.ed).unwrap();
    }
    println!("register: {:.1} ms", t1.elapsed().as_secs_f64() * 1000.0 / 5.0);
}

use std::sync::Arc;
use std::time::Instant;

use crce_core::eval::{evaluate_record, EvalOptions};
use crce_core::toy::ToySetup;
use crce_core::trainer::{run_training, ErasureConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let n_img: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50);
    let start = Instant::now();
    let setup = ToySetup::shared();
    println!("pretrain {:?}", start.elapsed());
    let record = setup.world.erasure_record();
    let opts = EvalOptions::with_images(n_img);
    let (base, _) = evaluate_record(&record, &setup.generator(setup.base_params.clone()), &setup.judge(), &opts).unwrap();
    println!("base   {:?}", base.percentages());
    let cfg = ErasureConfig { learning_rate: lr, iterations: iters, ..ErasureConfig::toy() };
    let t = Instant::now();
    let out = run_training(&record, &cfg, setup.backend.as_ref(), &mut setup.encoder(), &setup.base_params).unwrap();
    println!("train {:?} final {:?}", t.elapsed(), out.manifest.final_loss);
    let (rep, _) = evaluate_record(&record, &setup.generator(Arc::new(out.params)), &setup.judge(), &opts).unwrap();
    println!("erased {:?} total {:?}", rep.percentages(), start.elapsed());
}

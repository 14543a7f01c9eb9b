use fcl_core::config::RunConfig;
use fcl_core::data::GeneratorParams;
use fcl_core::params::Sgd;
use fcl_core::segmenter::{Segmenter, SegmenterDims};
use fcl_core::tensor::Tape;
use fcl_core::triadic::{self, Stage1Options, TriadicModels};
use std::time::Instant;

fn main() {
    let gp = GeneratorParams { count: 4, size: 64, difficulty: 0.25, seed: 7, test_fraction: 0.0, val_fraction: 0.0 };
    let sample = fcl_core::data::generate_sample(&gp, 0).unwrap();
    let mut cfg = RunConfig::default();
    cfg.optimizer.lr = 3e-4;
    let arch = Segmenter::new(SegmenterDims { image: 64, patch: 4, dim: 32, rank: 4 }).unwrap();
    let mut models = TriadicModels::init(arch, 1);
    let opts = Stage1Options::default();

    // Warm.
    let _ = triadic::stage1_sample_loss(&models, &sample, &cfg, &opts, 1).unwrap();

    let t0 = Instant::now();
    let n = 10;
    for i in 0..n {
        let sl = triadic::stage1_sample_loss(&models, &sample, &cfg, &opts, i).unwrap();
        let _ = sl.tape.backward(&sl.total).unwrap();
    }
    println!("sample_loss+backward: {:?}/iter", t0.elapsed() / n as u32);

    // Forward-only single branch.
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        let bound = models.teacher.bind(&tape, |_| false);
        let _ = arch.predict_logits(&tape, &bound, &sample.image, &sample.boxes, false).unwrap();
    }
    println!("single forward: {:?}/iter (boxes: {})", t0.elapsed() / n as u32, sample.boxes.len());

    // Full step including optimizer.
    let mut opt = Sgd::new(0.9, 5e-4);
    let t0 = Instant::now();
    for i in 0..n {
        triadic::stage1_step(&mut models, std::slice::from_ref(&sample), &cfg, &opts, 1, i as usize, 1e-4, &mut opt).unwrap();
    }
    println!("full step(batch=1): {:?}/iter", t0.elapsed() / n as u32);
}

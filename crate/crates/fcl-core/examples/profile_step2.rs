use fcl_core::config::RunConfig;
use fcl_core::data::GeneratorParams;
use fcl_core::segmenter::{Segmenter, SegmenterDims};
use fcl_core::tensor::Tape;
use fcl_core::triadic::{self, Stage1Options, TriadicModels};
use std::time::Instant;

fn main() {
    let gp = GeneratorParams { count: 4, size: 64, difficulty: 0.25, seed: 7, test_fraction: 0.0, val_fraction: 0.0 };
    let sample = fcl_core::data::generate_sample(&gp, 0).unwrap();
    let cfg = RunConfig::default();
    let arch = Segmenter::new(SegmenterDims { image: 64, patch: 4, dim: 32, rank: 4 }).unwrap();
    let models = TriadicModels::init(arch, 1);
    let opts = Stage1Options::default();
    let n = 10u32;

    let _ = triadic::stage1_sample_loss(&models, &sample, &cfg, &opts, 1).unwrap();
    let t0 = Instant::now();
    let mut nodes = 0;
    for i in 0..n {
        let sl = triadic::stage1_sample_loss(&models, &sample, &cfg, &opts, i as u64).unwrap();
        nodes = sl.tape.node_count();
    }
    println!("sample_loss only: {:?}/iter nodes={nodes}", t0.elapsed() / n);

    let t0 = Instant::now();
    for i in 0..n {
        let sl = triadic::stage1_sample_loss(&models, &sample, &cfg, &opts, i as u64).unwrap();
        let tb = Instant::now();
        let _ = sl.tape.backward(&sl.total).unwrap();
        if i == 0 { println!("  backward alone: {:?}", tb.elapsed()); }
    }
    println!("sample_loss+backward: {:?}/iter", t0.elapsed() / n);

    // Time binding alone (param leaf registration x3 models).
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        let _b1 = models.student.bind(&tape, |_| true);
        let _b2 = models.teacher.bind(&tape, |_| false);
        let _b3 = models.anchor.bind(&tape, |_| false);
    }
    println!("bind x3: {:?}/iter", t0.elapsed() / n);

    // Augmentation cost.
    let t0 = Instant::now();
    for i in 0..n {
        let _ = triadic::augment(&sample, i as u64).unwrap();
    }
    println!("augment: {:?}/iter", t0.elapsed() / n);

    // Forward + loss pieces: time the gcl-less config.
    let opts2 = Stage1Options { ablate_fora: false, ablate_gcl: true };
    let t0 = Instant::now();
    for i in 0..n {
        let sl = triadic::stage1_sample_loss(&models, &sample, &cfg, &opts2, i as u64).unwrap();
        let _ = sl.tape.backward(&sl.total).unwrap();
    }
    println!("no-gcl sample_loss+backward: {:?}/iter", t0.elapsed() / n);

    let optsf = Stage1Options { ablate_fora: true, ablate_gcl: false };
    let t0 = Instant::now();
    for i in 0..n {
        let sl = triadic::stage1_sample_loss(&models, &sample, &cfg, &optsf, i as u64).unwrap();
        let _ = sl.tape.backward(&sl.total).unwrap();
    }
    println!("no-fora sample_loss+backward: {:?}/iter", t0.elapsed() / n);
}

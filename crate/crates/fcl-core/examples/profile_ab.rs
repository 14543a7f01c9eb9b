use fcl_core::data::GeneratorParams;
use fcl_core::segmenter::{Segmenter, SegmenterDims};
use fcl_core::tensor::Tape;
use fcl_core::triadic::{self, TriadicModels};
use std::time::Instant;

fn main() {
    let gp = GeneratorParams { count: 4, size: 64, difficulty: 0.25, seed: 7, test_fraction: 0.0, val_fraction: 0.0 };
    let sample = fcl_core::data::generate_sample(&gp, 0).unwrap();
    let arch = Segmenter::new(SegmenterDims { image: 64, patch: 4, dim: 32, rank: 4 }).unwrap();
    let models = TriadicModels::init(arch, 1);
    let views = triadic::augment(&sample, 3).unwrap();
    let n = 20u32;

    for (label, img, boxes) in [
        ("plain image + sample boxes", &sample.image, &sample.boxes),
        ("weak view + view boxes", &views.weak, &views.boxes),
        ("strong view + view boxes", &views.strong, &views.boxes),
        ("plain image + view boxes", &sample.image, &views.boxes),
    ] {
        let t0 = Instant::now();
        for _ in 0..n {
            let tape = Tape::new();
            let b = models.teacher.bind(&tape, |_| false);
            let out = arch.predict_logits(&tape, &b, img, boxes, false).unwrap();
            std::hint::black_box(&out);
        }
        println!("{label}: {:?}", t0.elapsed() / n);
    }
}

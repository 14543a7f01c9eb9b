use fcl_core::config::RunConfig;
use fcl_core::data::GeneratorParams;
use fcl_core::segmenter::{Segmenter, SegmenterDims};
use fcl_core::tensor::Tape;
use fcl_core::triadic::{self, MaskBundle, TriadicModels};
use std::time::Instant;

fn main() {
    let gp = GeneratorParams { count: 4, size: 64, difficulty: 0.25, seed: 7, test_fraction: 0.0, val_fraction: 0.0 };
    let sample = fcl_core::data::generate_sample(&gp, 0).unwrap();
    let cfg = RunConfig::default();
    let arch = Segmenter::new(SegmenterDims { image: 64, patch: 4, dim: 32, rank: 4 }).unwrap();
    let models = TriadicModels::init(arch, 1);
    let n = 10u32;

    let views = triadic::augment(&sample, 3).unwrap();

    // Teacher forward on shared tape.
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        let bt = models.teacher.bind(&tape, |_| false);
        let (t_logits, t_fmap) = arch.predict_logits(&tape, &bt, &views.weak, &views.boxes, false).unwrap();
        let bundle = MaskBundle::from_logits(&tape, t_logits).unwrap();
        std::hint::black_box((&bundle, &t_fmap));
    }
    println!("teacher fwd+bundle: {:?}", t0.elapsed() / n);

    // Teacher + grad-cam.
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        let bt = models.teacher.bind(&tape, |_| false);
        let (t_logits, t_fmap) = arch.predict_logits(&tape, &bt, &views.weak, &views.boxes, false).unwrap();
        let bundle = MaskBundle::from_logits(&tape, t_logits).unwrap();
        let union = bundle.union_bin();
        let mut score = None;
        for l in &bundle.logits {
            let m = tape.dot(l, &union).unwrap();
            score = Some(match score { Some(s) => tape.add(&s, &m).unwrap(), None => m });
        }
        let cam = fcl_core::gcl::grad_cam(&tape, &t_fmap, &score.unwrap()).unwrap();
        std::hint::black_box(&cam);
    }
    println!("teacher fwd+bundle+gradcam: {:?}", t0.elapsed() / n);

    // Three forwards, no losses.
    let t0 = Instant::now();
    for _ in 0..n {
        let tape = Tape::new();
        let bt = models.teacher.bind(&tape, |_| false);
        let ba = models.anchor.bind(&tape, |_| false);
        let bs = models.student.bind(&tape, Segmenter::is_trainable);
        let (a, _) = arch.predict_logits(&tape, &bt, &views.weak, &views.boxes, false).unwrap();
        let (b, _) = arch.predict_logits(&tape, &ba, &views.weak, &views.boxes, false).unwrap();
        let (c, _) = arch.predict_logits(&tape, &bs, &views.strong, &views.boxes, false).unwrap();
        std::hint::black_box((&a, &b, &c));
    }
    println!("three forwards: {:?}", t0.elapsed() / n);

    use fcl_core::segmenter::Segmenter as S;
    let _ = S::is_trainable;

    // Loss graph alone on constant bundles.
    let tape = Tape::new();
    let bs = models.student.bind(&tape, S::is_trainable);
    let (sl, _) = arch.predict_logits(&tape, &bs, &views.strong, &views.boxes, false).unwrap();
    let student = MaskBundle::from_logits(&tape, sl).unwrap();
    let bt = models.teacher.bind(&tape, |_| false);
    let (tl, _) = arch.predict_logits(&tape, &bt, &views.weak, &views.boxes, false).unwrap();
    let teacher = MaskBundle::from_logits(&tape, tl).unwrap().detached();
    let t0 = Instant::now();
    for _ in 0..n {
        let f = triadic::focal_st_loss(&tape, &student, &teacher, 2.0).unwrap();
        let d = triadic::dice_loss(&tape, &student.probs, &teacher.bins, 1e-6).unwrap();
        let a = triadic::anchor_loss(&tape, &student, &teacher, &teacher, 0.5, 0.5).unwrap();
        std::hint::black_box((&f, &d, &a));
    }
    println!("loss graphs: {:?}", t0.elapsed() / n);
}

//! Triadic anchor/student/teacher self-training.
//!
//! Weak views (flip + small translate) feed the frozen anchor and the EMA
//! teacher; the strong view (weak plus pixel noise and a cutout kept clear
//! of every prompt box) feeds the student. The student chases the
//! teacher's binarized masks through focal and dice losses, both branches
//! are tethered to the anchor's initial behavior, and a gradient-aware
//! contrastive term separates instance prototypes from confusable
//! background. Only the student takes SGD steps; the teacher follows by
//! exponential moving average and the anchor never changes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::RunConfig;
use crate::data::{bbox_from_mask, union_of, BBox, Manifest, Sample, Split};
use crate::error::{CoreError, Result};
use crate::gcl;
use crate::params::{BoundParams, ParamSet, Sgd};
use crate::rng;
use crate::segmenter::Segmenter;
use crate::tensor::{Tape, Tensor};

/// Per-prompt logits, probabilities, and binarizations.
#[derive(Debug, Clone)]
pub struct MaskBundle {
    pub logits: Vec<Tensor>,
    pub probs: Vec<Tensor>,
    pub bins: Vec<Tensor>,
}

impl MaskBundle {
    pub fn from_logits(tape: &Tape, logits: Vec<Tensor>) -> Result<MaskBundle> {
        if logits.is_empty() {
            return Err(CoreError::Invalid("mask bundle needs at least one prompt".into()));
        }
        let probs: Vec<Tensor> = logits
            .iter()
            .map(|l| tape.sigmoid(l))
            .collect::<Result<_>>()?;
        let bins: Vec<Tensor> = probs.iter().map(|p| p.binarize_gt(0.5)).collect();
        Ok(MaskBundle { logits, probs, bins })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Constant copy with all tape connections severed.
    pub fn detached(&self) -> MaskBundle {
        MaskBundle {
            logits: self.logits.iter().map(Tensor::detach).collect(),
            probs: self.probs.iter().map(Tensor::detach).collect(),
            bins: self.bins.clone(),
        }
    }

    /// Pixelwise union of the binarized masks.
    pub fn union_bin(&self) -> Tensor {
        union_of(&self.bins)
    }
}

/// Geometric transform from original to view coordinates. Both views share
/// it, so the weak-to-strong mask alignment is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricRecord {
    pub flip: bool,
    pub dy: i64,
    pub dx: i64,
}

impl GeometricRecord {
    pub fn align_weak_to_strong(&self, mask: &Tensor) -> Tensor {
        mask.clone()
    }
}

#[derive(Debug, Clone)]
pub struct AugmentationPair {
    pub weak: Tensor,
    pub strong: Tensor,
    pub geom: GeometricRecord,
    /// Ground-truth masks warped into view coordinates.
    pub masks: Vec<Tensor>,
    /// Tight prompt boxes of the warped masks.
    pub boxes: Vec<BBox>,
    pub cutout: Option<BBox>,
}

fn warp_plane(data: &[f64], h: usize, w: usize, g: &GeometricRecord, fill: f64) -> Vec<f64> {
    let mut out = vec![fill; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 - g.dy;
            let sx = x as i64 - g.dx;
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                continue;
            }
            let sx = if g.flip { (w as i64 - 1 - sx) as usize } else { sx as usize };
            out[y * w + x] = data[sy as usize * w + sx];
        }
    }
    out
}

fn warp_image(img: &Tensor, g: &GeometricRecord) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        out.extend(warp_plane(&img.data()[ch * h * w..(ch + 1) * h * w], h, w, g, 0.5));
    }
    Tensor::from_vec(s.to_vec(), out).unwrap()
}

fn warp_mask(mask: &Tensor, g: &GeometricRecord) -> Tensor {
    let s = mask.shape();
    Tensor::from_vec(s.to_vec(), warp_plane(mask.data(), s[0], s[1], g, 0.0)).unwrap()
}

/// Build the weak/strong view pair. Deterministic given `seed`.
pub fn augment(sample: &Sample, seed: u64) -> Result<AugmentationPair> {
    let s = sample.image.shape();
    let (h, w) = (s[1], s[2]);
    let mut r = rng::stream(seed, "augment");

    let max_shift = (0.05 * w as f64).floor() as i64;
    let geom = GeometricRecord {
        flip: r.gen::<f64>() < 0.5,
        dy: r.gen_range(-max_shift..=max_shift),
        dx: r.gen_range(-max_shift..=max_shift),
    };

    let weak = warp_image(&sample.image, &geom);
    let masks: Vec<Tensor> = sample.masks.iter().map(|m| warp_mask(m, &geom)).collect();
    let boxes: Vec<BBox> = masks.iter().map(bbox_from_mask).collect::<Result<_>>()?;

    // Strong view: weak + Gaussian pixel noise, then a rectangular cutout
    // kept clear of every prompt box.
    let sigma = 0.05;
    let mut strong: Vec<f64> = weak
        .data()
        .iter()
        .map(|&v| (v + sigma * rng::normal(&mut r)).clamp(0.0, 1.0))
        .collect();

    let mut cutout = None;
    for _ in 0..50 {
        let ch_frac = rng::uniform(&mut r, 0.10, 0.45);
        let max_w_frac = (0.20 / ch_frac).min(0.45);
        let cw_frac = rng::uniform(&mut r, 0.10, max_w_frac.max(0.10 + 1e-9));
        let cut_h = ((ch_frac * h as f64) as usize).max(1);
        let cut_w = ((cw_frac * w as f64) as usize).max(1);
        if cut_h >= h || cut_w >= w {
            continue;
        }
        let r0 = r.gen_range(0..=(h - cut_h));
        let c0 = r.gen_range(0..=(w - cut_w));
        let rect = BBox { r0, c0, r1: r0 + cut_h - 1, c1: c0 + cut_w - 1 };
        if boxes.iter().any(|b| b.intersects(&rect)) {
            continue;
        }
        for ch in 0..3 {
            for y in rect.r0..=rect.r1 {
                for x in rect.c0..=rect.c1 {
                    strong[ch * h * w + y * w + x] = 0.5;
                }
            }
        }
        cutout = Some(rect);
        break;
    }

    Ok(AugmentationPair {
        weak,
        strong: Tensor::from_vec(s.to_vec(), strong)?,
        geom,
        masks,
        boxes,
        cutout,
    })
}

// ---- losses -------------------------------------------------------------

/// Focal student-teacher loss: teacher binarizations are the constants the
/// student's probabilities chase. Sums over prompts, normalizes by H*W only.
pub fn focal_st_loss(
    tape: &Tape,
    student: &MaskBundle,
    teacher: &MaskBundle,
    gamma: f64,
) -> Result<Tensor> {
    if student.len() != teacher.len() {
        return Err(CoreError::shape(
            "focal_st_loss",
            format!("prompt counts {} vs {}", student.len(), teacher.len()),
        ));
    }
    let hw = student.probs[0].len() as f64;
    let mut acc: Option<Tensor> = None;
    for (m, target) in student.probs.iter().zip(&teacher.bins) {
        if m.shape() != target.shape() {
            return Err(CoreError::shape(
                "focal_st_loss",
                format!("{:?} vs {:?}", m.shape(), target.shape()),
            ));
        }
        let pos = target; // constant 0/1
        let neg = pos.binarize_gt(-0.5); // constant 1 everywhere
        let neg = Tensor::from_vec(
            pos.shape().to_vec(),
            neg.data().iter().zip(pos.data()).map(|(&o, &p)| o - p).collect(),
        )?;
        let one_minus_m = tape.one_minus(m)?;
        let pos_term = tape.mul(&tape.mul(pos, &tape.powf(&one_minus_m, gamma)?)?, &tape.log_eps(m)?)?;
        let neg_term = tape.mul(&tape.mul(&neg, &tape.powf(m, gamma)?)?, &tape.log_eps(&one_minus_m)?)?;
        let term = tape.sum_all(&tape.add(&pos_term, &neg_term)?)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &term)?,
            None => term,
        });
    }
    tape.mul_scalar(&acc.expect("bundle nonempty"), -1.0 / hw)
}

/// Dice loss summed over instances: `sum_j 1 - (2 sum m*t + eps) / (sum m + sum t + eps)`.
pub fn dice_loss(tape: &Tape, probs: &[Tensor], targets: &[Tensor], eps: f64) -> Result<Tensor> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(CoreError::shape(
            "dice_loss",
            format!("instance counts {} vs {}", probs.len(), targets.len()),
        ));
    }
    let mut acc: Option<Tensor> = None;
    for (m, t) in probs.iter().zip(targets) {
        if m.shape() != t.shape() {
            return Err(CoreError::shape("dice_loss", format!("{:?} vs {:?}", m.shape(), t.shape())));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CoreError::Invalid("dice targets must be binary".into()));
        }
        let inter = tape.sum_all(&tape.mul(m, t)?)?;
        let num = tape.add_scalar(&tape.mul_scalar(&inter, 2.0)?, eps)?;
        let den = tape.add_scalar(&tape.add(&tape.sum_all(m)?, &tape.sum_all(t)?)?, eps)?;
        let term = tape.one_minus(&tape.div(&num, &den)?)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &term)?,
            None => term,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Anchor regularizer: both branches' probabilities are pulled toward the
/// anchor's binarizations. The teacher term is computed on detached masks,
/// so it shows up in the logs without steering any gradient.
pub fn anchor_loss(
    tape: &Tape,
    student: &MaskBundle,
    teacher: &MaskBundle,
    anchor: &MaskBundle,
    lambda_stu: f64,
    lambda_tea: f64,
) -> Result<Tensor> {
    let teacher_probs: Vec<Tensor> = teacher.probs.iter().map(Tensor::detach).collect();
    let stu = dice_loss(tape, &student.probs, &anchor.bins, crate::EPS_NUM)?;
    let tea = dice_loss(tape, &teacher_probs, &anchor.bins, crate::EPS_NUM)?;
    tape.add(
        &tape.mul_scalar(&stu, lambda_stu)?,
        &tape.mul_scalar(&tea, lambda_tea)?,
    )
}

// ---- models -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TriadicModels {
    pub arch: Segmenter,
    pub anchor: ParamSet,
    pub student: ParamSet,
    pub teacher: ParamSet,
}

impl TriadicModels {
    /// One initialization, three copies: student and teacher start equal and
    /// the anchor freezes that state forever.
    pub fn init(arch: Segmenter, seed: u64) -> TriadicModels {
        let params = arch.init_params(seed);
        TriadicModels {
            arch,
            anchor: params.clone(),
            student: params.clone(),
            teacher: params,
        }
    }
}

/// EMA teacher update.
pub fn teacher_update(models: &mut TriadicModels, mu: f64) -> Result<()> {
    models.teacher.ema_from(&models.student, mu)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Stage1Options {
    pub ablate_fora: bool,
    pub ablate_gcl: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub dice: f64,
    pub anchor: f64,
    pub gcl: f64,
    pub focal: f64,
    pub total: f64,
    /// Instance pairs that participated in the contrastive term.
    pub gcl_pairs: usize,
}

/// Optional per-sample GCL diagnostics: the activation map and the cosine
/// similarities between student and teacher prototypes (background first,
/// then instances; excluded prototypes hold NaN rows/columns).
#[derive(Debug, Clone)]
pub struct Stage1Diagnostics {
    pub cam: Tensor,
    pub proto_cosine: Tensor,
}

fn cosine_matrix(student: &gcl::PrototypeSet, teacher: &gcl::PrototypeSet) -> Tensor {
    let collect = |set: &gcl::PrototypeSet| -> Vec<Option<Vec<f64>>> {
        std::iter::once(set.background.as_ref().map(|t| t.data().to_vec()))
            .chain(set.foreground.iter().map(|p| p.as_ref().map(|t| t.data().to_vec())))
            .collect()
    };
    let s = collect(student);
    let t = collect(teacher);
    let n = s.len();
    let mut data = vec![f64::NAN; n * n];
    for (i, sv) in s.iter().enumerate() {
        for (j, tv) in t.iter().enumerate() {
            if let (Some(a), Some(b)) = (sv, tv) {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                data[i * n + j] = dot / (na * nb).max(crate::EPS_NUM);
            }
        }
    }
    Tensor::from_vec(vec![n, n], data).unwrap()
}

/// Everything one sample contributes to a step, still attached to its tape.
pub struct SampleLoss {
    pub tape: Tape,
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub bound_student: BoundParams,
    pub bound_teacher: BoundParams,
    pub diagnostics: Option<Stage1Diagnostics>,
}

/// Forward pass and loss assembly for one sample on a fresh tape.
///
/// The contrastive branch is skipped entirely when disabled or when its
/// weight is zero, so an ablated run and a zero-weight run take the exact
/// same code path.
pub fn stage1_sample_loss(
    models: &TriadicModels,
    sample: &Sample,
    cfg: &RunConfig,
    opts: &Stage1Options,
    aug_seed: u64,
) -> Result<SampleLoss> {
    let arch = &models.arch;
    let tape = Tape::new();
    let bound_student = models.student.bind(&tape, Segmenter::is_trainable);
    let bound_teacher = models.teacher.bind(&tape, |_| false);
    let bound_anchor = models.anchor.bind(&tape, |_| false);

    let views = augment(sample, aug_seed)?;
    let gcl_active = !opts.ablate_gcl && cfg.loss.lambda2 > 0.0;

    // Teacher on the weak view; kept on-tape long enough for Grad-CAM.
    let (t_logits, t_fmap) =
        arch.predict_logits(&tape, &bound_teacher, &views.weak, &views.boxes, opts.ablate_fora)?;
    let teacher_live = MaskBundle::from_logits(&tape, t_logits)?;

    let cam = if gcl_active {
        let union = teacher_live.union_bin();
        let mut score: Option<Tensor> = None;
        for logit in &teacher_live.logits {
            let masked = tape.dot(logit, &union)?;
            score = Some(match score {
                Some(s) => tape.add(&s, &masked)?,
                None => masked,
            });
        }
        Some(gcl::grad_cam(&tape, &t_fmap, &score.expect("prompts nonempty"))?)
    } else {
        None
    };
    let teacher = teacher_live.detached();
    let t_fmap = t_fmap.detach();

    // Anchor on the weak view, constants only.
    let (a_logits, _) =
        arch.predict_logits(&tape, &bound_anchor, &views.weak, &views.boxes, opts.ablate_fora)?;
    let anchor = MaskBundle::from_logits(&tape, a_logits)?.detached();

    // Student on the strong view.
    let (s_logits, s_fmap) =
        arch.predict_logits(&tape, &bound_student, &views.strong, &views.boxes, opts.ablate_fora)?;
    let student = MaskBundle::from_logits(&tape, s_logits)?;

    // Teacher masks align to the student's view (identity geometry here).
    let teacher_aligned = MaskBundle {
        logits: teacher.logits.clone(),
        probs: teacher.probs.clone(),
        bins: teacher.bins.iter().map(|b| views.geom.align_weak_to_strong(b)).collect(),
    };

    let focal = focal_st_loss(&tape, &student, &teacher_aligned, cfg.loss.gamma)?;
    let dice = dice_loss(&tape, &student.probs, &teacher_aligned.bins, cfg.loss.epsilon)?;
    let anchor_term = anchor_loss(
        &tape,
        &student,
        &teacher,
        &anchor,
        cfg.loss.lambda_stu_dice,
        cfg.loss.lambda_tea_dice,
    )?;

    let mut diagnostics = None;
    let (gcl_term, gcl_pairs) = if let Some(cam) = cam {
        let patch = arch.dims.patch;
        let grid_masks: Vec<Tensor> = teacher
            .bins
            .iter()
            .map(|b| gcl::downsample_majority(b, patch))
            .collect::<Result<_>>()?;
        let union_grid = union_of(&grid_masks);
        let bg = Tensor::from_vec(
            union_grid.shape().to_vec(),
            union_grid.data().iter().map(|&v| 1.0 - v).collect(),
        )?;
        let weighted_bg = gcl::weighted_bg_mask(&bg, &cam)?;
        let s_norm = gcl::l2_normalize_locations(&tape, &s_fmap)?;
        let t_norm = gcl::l2_normalize_locations(&tape, &t_fmap)?;
        let s_protos = gcl::prototype_pool(&tape, &s_norm, &grid_masks, &weighted_bg)?;
        let t_protos = gcl::prototype_pool(&tape, &t_norm, &grid_masks, &weighted_bg)?;
        diagnostics = Some(Stage1Diagnostics {
            cam: cam.values.clone(),
            proto_cosine: cosine_matrix(&s_protos, &t_protos),
        });
        gcl::gcl_loss(&tape, &s_protos, &t_protos, cfg.loss.tau)?
    } else {
        (tape.sum_all(&Tensor::scalar(0.0))?, 0)
    };

    let lambda2 = if gcl_active { cfg.loss.lambda2 } else { 0.0 };
    let total = gcl::total_stage1_loss(
        &tape,
        &dice,
        &anchor_term,
        &gcl_term,
        &focal,
        cfg.loss.lambda1,
        lambda2,
        cfg.loss.lambda3,
    )?;

    let breakdown = LossBreakdown {
        dice: dice.scalar_value()?,
        anchor: anchor_term.scalar_value()?,
        gcl: gcl_term.scalar_value()?,
        focal: focal.scalar_value()?,
        total: total.scalar_value()?,
        gcl_pairs,
    };
    Ok(SampleLoss { tape, total, breakdown, bound_student, bound_teacher, diagnostics })
}

/// Seed for the augmentation of `sample` at `step`.
pub fn augmentation_seed(run_seed: u64, step: usize, sample_id: &str) -> u64 {
    rng::stream(run_seed, &format!("aug/step={step}/sample={sample_id}")).gen::<u64>()
}

/// One optimizer step over a batch: averaged gradients on the student,
/// then the EMA teacher update. The anchor is never touched.
pub fn stage1_step(
    models: &mut TriadicModels,
    batch: &[Sample],
    cfg: &RunConfig,
    opts: &Stage1Options,
    run_seed: u64,
    step: usize,
    lr: f64,
    opt: &mut Sgd,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(CoreError::Invalid("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut agg = LossBreakdown::default();
    for sample in batch {
        let aug_seed = augmentation_seed(run_seed, step, &sample.id);
        let sl = stage1_sample_loss(models, sample, cfg, opts, aug_seed)?;
        let channel = sl.tape.backward(&sl.total)?;
        for (name, leaf) in sl.bound_student.iter() {
            if !Segmenter::is_trainable(name) {
                continue;
            }
            if let Some(g) = channel.wrt(leaf) {
                let slot = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                for (o, &v) in slot.iter_mut().zip(g.data()) {
                    *o += v * scale;
                }
            }
        }
        agg.dice += sl.breakdown.dice * scale;
        agg.anchor += sl.breakdown.anchor * scale;
        agg.gcl += sl.breakdown.gcl * scale;
        agg.focal += sl.breakdown.focal * scale;
        agg.total += sl.breakdown.total * scale;
        agg.gcl_pairs += sl.breakdown.gcl_pairs;
    }
    opt.step(&mut models.student, &grads, lr)?;
    models.teacher.ema_from(&models.student, cfg.teacher.momentum)?;
    Ok(agg)
}

// ---- pseudo-label export --------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Anchor,
    Student,
    Teacher,
}

impl Branch {
    pub fn parse(s: &str) -> Result<Branch> {
        match s {
            "anchor" => Ok(Branch::Anchor),
            "student" => Ok(Branch::Student),
            "teacher" => Ok(Branch::Teacher),
            other => Err(CoreError::Invalid(format!("unknown branch '{other}'"))),
        }
    }
}

/// Union of binarized predicted masks for one un-augmented sample.
pub fn predict_union_mask(
    arch: &Segmenter,
    params: &ParamSet,
    sample: &Sample,
    ablate_fora: bool,
) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape, |_| false);
    let (logits, _) = arch.predict_logits(&tape, &bound, &sample.image, &sample.boxes, ablate_fora)?;
    let bundle = MaskBundle::from_logits(&tape, logits)?;
    Ok(bundle.union_bin())
}

/// Write one PGM pseudo-label per sample of `split` into `out_dir`.
/// Deterministic: re-export with the same checkpoint is byte-identical.
pub fn export_pseudo_labels(
    arch: &Segmenter,
    params: &ParamSet,
    manifest: &Manifest,
    split: Split,
    out_dir: &Path,
    ablate_fora: bool,
    comment: &str,
) -> Result<Vec<(String, PathBuf)>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CoreError::io(out_dir.display().to_string(), e))?;
    let mut written = Vec::new();
    for record in manifest.records_in(split) {
        let sample = manifest.load_sample(record)?;
        let mask = predict_union_mask(arch, params, &sample, ablate_fora)?;
        let path = out_dir.join(format!("{}.pgm", record.id));
        crate::data::write_pgm(&path, &mask, comment)?;
        written.push((record.id.clone(), path));
    }
    Ok(written)
}

//! Gradient-aware contrastive learning.
//!
//! A Grad-CAM map over the teacher features reweights the background mask,
//! instance and background prototypes are pooled from L2-normalized
//! features, and an InfoNCE-style objective pulls matching student/teacher
//! instance prototypes together while pushing the student away from other
//! instances and from the gradient-weighted background. The teacher branch
//! is detached throughout; its auxiliary backward runs on a dedicated
//! gradient channel.

use crate::error::{CoreError, Result};
use crate::tensor::{Gradients, Tape, Tensor, EPS_NUM};

/// Normalized gradient activation map in `[0,1]`, detached.
#[derive(Debug, Clone)]
pub struct GradActivationMap {
    pub values: Tensor,
}

/// Grad-CAM over a feature map already recorded on `tape`.
///
/// `score` must be a scalar on the tape; its backward pass runs on its own
/// gradient channel, so it never mixes with the training gradients. Channel
/// weights are the spatial means of d(score)/d(feature); the weighted sum is
/// rectified and min-max normalized. A constant raw map degrades to all
/// ones so downstream background weighting never empties the mask.
pub fn grad_cam(tape: &Tape, feature: &Tensor, score: &Tensor) -> Result<GradActivationMap> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(CoreError::shape("grad_cam", format!("feature must be [D,h,w], got {s:?}")));
    }
    if !score.is_scalar() {
        return Err(CoreError::NonScalarRoot { shape: score.shape().to_vec() });
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    // Adjoints stop at the feature map itself; nothing upstream of it is
    // touched by this auxiliary pass.
    let grads: Gradients = tape.backward_stopping(score, &[feature])?;
    let gf = grads
        .wrt(feature)
        .unwrap_or_else(|| Tensor::zeros(vec![d, h, w]));

    let plane = h * w;
    let fdata = feature.data();
    let gdata = gf.data();
    let mut raw = vec![0.0; plane];
    for c in 0..d {
        let weight: f64 = gdata[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        for i in 0..plane {
            raw[i] += weight * fdata[c * plane + i];
        }
    }
    for v in raw.iter_mut() {
        *v = v.max(0.0);
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi - lo < EPS_NUM {
        Tensor::full(vec![h, w], 1.0)
    } else {
        let scale = 1.0 / (hi - lo + EPS_NUM);
        Tensor::from_vec(
            vec![h, w],
            raw.iter().map(|&v| ((v - lo) * scale).clamp(0.0, 1.0)).collect(),
        )?
    };
    Ok(GradActivationMap { values })
}

/// Gradient-weighted background mask: elementwise product of the binary
/// background mask with the activation map.
pub fn weighted_bg_mask(bg: &Tensor, cam: &GradActivationMap) -> Result<Tensor> {
    if bg.shape() != cam.values.shape() {
        return Err(CoreError::shape(
            "weighted_bg_mask",
            format!("{:?} vs {:?}", bg.shape(), cam.values.shape()),
        ));
    }
    let data: Vec<f64> = bg
        .data()
        .iter()
        .zip(cam.values.data())
        .map(|(&m, &g)| m * g)
        .collect();
    Tensor::from_vec(bg.shape().to_vec(), data)
}

/// Downsample a binary mask by an integer factor; a cell is positive when
/// the strict majority of its pixels are.
pub fn downsample_majority(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 2 || factor == 0 || s[0] % factor != 0 || s[1] % factor != 0 {
        return Err(CoreError::shape(
            "downsample_majority",
            format!("mask {s:?} not divisible by factor {factor}"),
        ));
    }
    let (h, w) = (s[0] / factor, s[1] / factor);
    let md = mask.data();
    let mut out = vec![0.0; h * w];
    let cell = (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut on = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    if md[(y * factor + dy) * s[1] + x * factor + dx] > 0.5 {
                        on += 1.0;
                    }
                }
            }
            if on / cell > 0.5 {
                out[y * w + x] = 1.0;
            }
        }
    }
    Tensor::from_vec(vec![h, w], out)
}

/// L2-normalize each spatial location's channel vector (on the tape, so
/// gradients flow into the features).
pub fn l2_normalize_locations(tape: &Tape, f: &Tensor) -> Result<Tensor> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(CoreError::shape("l2_normalize", format!("expected [D,h,w], got {s:?}")));
    }
    let sq = tape.mul(f, f)?;
    let norm_sq = tape.sum_axes(&sq, &[0])?; // [h,w]
    let norm = tape.powf(&tape.add_scalar(&norm_sq, 1e-12)?, 0.5)?;
    let bnorm = tape.repeat0(&norm, s[0])?;
    tape.div(f, &bnorm)
}

/// Pooled prototypes for one branch. Instances whose mask sums to zero are
/// excluded and reported in `skipped`.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub background: Option<Tensor>,
    pub foreground: Vec<Option<Tensor>>,
    pub skipped: Vec<usize>,
}

impl PrototypeSet {
    pub fn detached(&self) -> PrototypeSet {
        PrototypeSet {
            background: self.background.as_ref().map(|t| t.detach()),
            foreground: self.foreground.iter().map(|p| p.as_ref().map(|t| t.detach())).collect(),
            skipped: self.skipped.clone(),
        }
    }
}

/// Masked average pooling of normalized features over each foreground mask
/// and the weighted background mask. Masks are constants at feature-grid
/// resolution.
pub fn prototype_pool(
    tape: &Tape,
    features_norm: &Tensor,
    fg_masks: &[Tensor],
    weighted_bg: &Tensor,
) -> Result<PrototypeSet> {
    let s = features_norm.shape();
    if s.len() != 3 {
        return Err(CoreError::shape("prototype_pool", format!("features must be [D,h,w], got {s:?}")));
    }
    let d = s[0];
    let spatial = [s[1], s[2]];
    let pool_one = |mask: &Tensor| -> Result<Option<Tensor>> {
        if mask.shape() != spatial {
            return Err(CoreError::shape(
                "prototype_pool",
                format!("mask {:?} vs feature grid {:?}", mask.shape(), spatial),
            ));
        }
        let total = mask.sum_value();
        if total <= 0.0 {
            return Ok(None);
        }
        let bmask = tape.repeat0(&mask.detach(), d)?;
        let masked = tape.mul(features_norm, &bmask)?;
        let sums = tape.sum_axes(&masked, &[1, 2])?;
        Ok(Some(tape.mul_scalar(&sums, 1.0 / total)?))
    };

    let background = pool_one(weighted_bg)?;
    let mut foreground = Vec::with_capacity(fg_masks.len());
    let mut skipped = Vec::new();
    for (j, m) in fg_masks.iter().enumerate() {
        let p = pool_one(m)?;
        if p.is_none() {
            skipped.push(j);
        }
        foreground.push(p);
    }
    Ok(PrototypeSet { background, foreground, skipped })
}

/// Contrastive objective over matched instance prototypes.
///
/// Positives pair each student instance with the same teacher instance; the
/// denominator runs over every other teacher prototype including the
/// gradient-weighted background (index 0) and excludes the positive pair.
/// The value can be negative; it is used exactly as written. Returns the
/// loss and the number of participating instance pairs (0 means the
/// contribution degenerated to a constant zero).
pub fn gcl_loss(
    tape: &Tape,
    student: &PrototypeSet,
    teacher: &PrototypeSet,
    tau: f64,
) -> Result<(Tensor, usize)> {
    if tau <= 0.0 {
        return Err(CoreError::Invalid("tau must be > 0".into()));
    }
    if student.foreground.len() != teacher.foreground.len() {
        return Err(CoreError::shape(
            "gcl_loss",
            format!(
                "instance count mismatch: {} vs {}",
                student.foreground.len(),
                teacher.foreground.len()
            ),
        ));
    }
    let teacher = teacher.detached();
    let pairs: Vec<usize> = (0..student.foreground.len())
        .filter(|&j| student.foreground[j].is_some() && teacher.foreground[j].is_some())
        .collect();
    if pairs.is_empty() {
        return Ok((tape.sum_all(&Tensor::scalar(0.0))?, 0));
    }

    let inv_tau = 1.0 / tau;
    let mut numerator: Option<Tensor> = None;
    let mut denominator: Option<Tensor> = None;
    let add_to = |slot: &mut Option<Tensor>, term: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
        Ok(())
    };

    for &j in &pairs {
        let sj = student.foreground[j].as_ref().unwrap();
        let tj = teacher.foreground[j].as_ref().unwrap();
        let pos = tape.exp(&tape.mul_scalar(&tape.dot(sj, tj)?, inv_tau)?)?;
        add_to(&mut numerator, pos)?;
        if let Some(bg) = &teacher.background {
            let term = tape.exp(&tape.mul_scalar(&tape.dot(sj, bg)?, inv_tau)?)?;
            add_to(&mut denominator, term)?;
        }
        for &k in &pairs {
            if k == j {
                continue;
            }
            let tk = teacher.foreground[k].as_ref().unwrap();
            let term = tape.exp(&tape.mul_scalar(&tape.dot(sj, tk)?, inv_tau)?)?;
            add_to(&mut denominator, term)?;
        }
    }

    let denominator = match denominator {
        Some(d) => d,
        // No negatives exist (single instance, empty background): the ratio
        // is undefined, so the contribution degenerates to zero.
        None => return Ok((tape.sum_all(&Tensor::scalar(0.0))?, 0)),
    };
    let numerator = numerator.expect("pairs nonempty");
    let loss = tape.neg(&tape.sub(&tape.log_eps(&numerator)?, &tape.log_eps(&denominator)?)?)?;
    Ok((loss, pairs.len()))
}

/// Total stage-1 objective. Every term must be finite.
pub fn total_stage1_loss(
    tape: &Tape,
    dice: &Tensor,
    anchor: &Tensor,
    gcl: &Tensor,
    focal: &Tensor,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
) -> Result<Tensor> {
    for (name, t) in [("dice", dice), ("anchor", anchor), ("gcl", gcl), ("focal", focal)] {
        if !t.all_finite() {
            return Err(CoreError::NonFinite { term: name.into() });
        }
    }
    let mut total = dice.clone();
    total = tape.add(&total, &tape.mul_scalar(anchor, lambda1)?)?;
    total = tape.add(&total, &tape.mul_scalar(gcl, lambda2)?)?;
    total = tape.add(&total, &tape.mul_scalar(focal, lambda3)?)?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_cam_bounds_and_degenerate_rule() {
        let tape = Tape::new();
        let mut r = rng::stream(3, "cam");
        let f = tape.leaf(&rand_tensor(&mut r, &[4, 3, 3], -1.0, 1.0), true);
        let w = rand_tensor(&mut r, &[4, 3, 3], 0.1, 1.0);
        let score = tape.dot(&f, &w).unwrap();
        let cam = grad_cam(&tape, &f, &score).unwrap();
        assert!(cam.values.min_value() >= 0.0);
        assert!(cam.values.max_value() <= 1.0);

        // Constant feature map -> constant raw map -> all ones.
        let tape2 = Tape::new();
        let f2 = tape2.leaf(&Tensor::full(vec![2, 3, 3], 0.7), true);
        let s2 = tape2.sum_all(&f2).unwrap();
        let cam2 = grad_cam(&tape2, &f2, &s2).unwrap();
        assert!(cam2.values.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_cam_single_channel_uniform_gradient() {
        // With one channel and score = sum(F), the weight is 1 and the map
        // is the min-max normalization of relu(F).
        let tape = Tape::new();
        let vals = vec![-1.0, 0.0, 1.0, 3.0];
        let f = tape.leaf(&t(&[1, 2, 2], &vals), true);
        let score = tape.sum_all(&f).unwrap();
        let cam = grad_cam(&tape, &f, &score).unwrap();
        let relu: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
        let (lo, hi) = (0.0, 3.0);
        for (got, &r) in cam.values.data().iter().zip(&relu) {
            assert!((got - (r - lo) / (hi - lo + EPS_NUM)).abs() < 1e-9);
        }
    }

    #[test]
    fn grad_cam_uses_its_own_channel() {
        // The training backward still works after the auxiliary pass.
        let tape = Tape::new();
        let f = tape.leaf(&t(&[1, 2, 2], &[0.5, 1.0, -0.5, 2.0]), true);
        let score = tape.sum_all(&f).unwrap();
        let _cam = grad_cam(&tape, &f, &score).unwrap();
        let loss = tape.dot(&f, &f).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&f).unwrap().data(), &[1.0, 2.0, -1.0, 4.0]);
    }

    #[test]
    fn weighted_bg_examples() {
        let bg = t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]);
        let ones = GradActivationMap { values: Tensor::full(vec![2, 2], 1.0) };
        assert_eq!(weighted_bg_mask(&bg, &ones).unwrap().data(), bg.data());

        let zero_bg = Tensor::zeros(vec![2, 2]);
        let cam = GradActivationMap { values: t(&[2, 2], &[0.3, 0.5, 0.7, 0.9]) };
        assert!(weighted_bg_mask(&zero_bg, &cam).unwrap().data().iter().all(|&v| v == 0.0));

        let got = weighted_bg_mask(&bg, &cam).unwrap();
        assert_eq!(got.data(), &[0.3, 0.5, 0.0, 0.9]);
        // Pointwise bound: weighted mask never exceeds the binary mask.
        for (w, m) in got.data().iter().zip(bg.data()) {
            assert!(w <= m);
        }
    }

    #[test]
    fn majority_downsample() {
        let m = t(
            &[4, 4],
            &[
                1.0, 1.0, 0.0, 0.0, //
                1.0, 1.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0,
            ],
        );
        let d = downsample_majority(&m, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn prototype_examples() {
        let tape = Tape::new();
        // Uniform unit feature e over the mask -> prototype = e.
        let e = [0.6, 0.8];
        let f = t(&[2, 1, 2], &[e[0], e[0], e[1], e[1]]);
        let mask = Tensor::full(vec![1, 2], 1.0);
        let set = prototype_pool(&tape, &f, &[mask], &Tensor::zeros(vec![1, 2])).unwrap();
        let p = set.foreground[0].as_ref().unwrap();
        assert!((p.data()[0] - e[0]).abs() < 1e-12);
        assert!((p.data()[1] - e[1]).abs() < 1e-12);
        assert!(set.background.is_none());

        // Two unit features u, v with mask (1,1) -> (u+v)/2.
        let u = [1.0, 0.0];
        let v = [0.0, 1.0];
        let f = t(&[2, 1, 2], &[u[0], v[0], u[1], v[1]]);
        let set = prototype_pool(&tape, &f, &[Tensor::full(vec![1, 2], 1.0)], &Tensor::zeros(vec![1, 2])).unwrap();
        let p = set.foreground[0].as_ref().unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        // Norm bound for convex combinations of unit vectors.
        let norm = (p.data()[0] * p.data()[0] + p.data()[1] * p.data()[1]).sqrt();
        assert!(norm <= 1.0 + 1e-12);

        // Background weights (0.2, 0.8) on u, v.
        let wbg = t(&[1, 2], &[0.2, 0.8]);
        let set = prototype_pool(&tape, &f, &[], &wbg).unwrap();
        let b = set.background.as_ref().unwrap();
        assert!((b.data()[0] - 0.2).abs() < 1e-12);
        assert!((b.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_instances_are_skipped() {
        let tape = Tape::new();
        let f = Tensor::full(vec![2, 2, 2], 0.5);
        let good = Tensor::full(vec![2, 2], 1.0);
        let empty = Tensor::zeros(vec![2, 2]);
        let set = prototype_pool(&tape, &f, &[empty, good], &Tensor::zeros(vec![2, 2])).unwrap();
        assert_eq!(set.skipped, vec![0]);
        assert!(set.foreground[0].is_none());
        assert!(set.foreground[1].is_some());
    }

    fn proto_set(bg: Option<Vec<f64>>, fgs: Vec<Vec<f64>>) -> PrototypeSet {
        PrototypeSet {
            background: bg.map(|v| Tensor::from_vec(vec![v.len()], v).unwrap()),
            foreground: fgs
                .into_iter()
                .map(|v| Some(Tensor::from_vec(vec![v.len()], v).unwrap()))
                .collect(),
            skipped: vec![],
        }
    }

    #[test]
    fn gcl_zero_when_all_similarities_vanish() {
        let tape = Tape::new();
        // N=1, tau=1, s1.t1 = 0 and s1.t0 = 0.
        let student = proto_set(None, vec![vec![1.0, 0.0, 0.0]]);
        let teacher = proto_set(Some(vec![0.0, 0.0, 1.0]), vec![vec![0.0, 1.0, 0.0]]);
        let (loss, n) = gcl_loss(&tape, &student, &teacher, 1.0).unwrap();
        assert_eq!(n, 1);
        assert!(loss.scalar_value().unwrap().abs() < 1e-12);
    }

    #[test]
    fn gcl_aligned_pair_hits_neg_inv_tau() {
        let tape = Tape::new();
        let tau = 0.07;
        let student = proto_set(None, vec![vec![1.0, 0.0]]);
        let teacher = proto_set(Some(vec![0.0, 1.0]), vec![vec![1.0, 0.0]]);
        let (loss, _) = gcl_loss(&tape, &student, &teacher, tau).unwrap();
        assert!((loss.scalar_value().unwrap() + 1.0 / tau).abs() < 1e-9);
    }

    #[test]
    fn gcl_invariant_under_constant_similarity_shift() {
        // Append one dimension carrying a constant offset: every dot
        // product shifts by c and the loss is unchanged.
        let tape = Tape::new();
        let tau = 0.5;
        let student = proto_set(None, vec![vec![0.3, 0.4, 0.0], vec![-0.2, 0.6, 0.0]]);
        let teacher = proto_set(
            Some(vec![0.1, -0.5, 1.0]),
            vec![vec![0.8, 0.1, 1.0], vec![0.0, -0.3, 1.0]],
        );
        let (l1, _) = gcl_loss(&tape, &student, &teacher, tau).unwrap();

        let c = 0.37;
        let shifted = proto_set(None, vec![vec![0.3, 0.4, c], vec![-0.2, 0.6, c]]);
        let (l2, _) = gcl_loss(&tape, &shifted, &teacher, tau).unwrap();
        assert!((l1.scalar_value().unwrap() - l2.scalar_value().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn gcl_teacher_receives_no_gradient() {
        let tape = Tape::new();
        let s_leaf = tape.leaf(&t(&[2], &[0.6, 0.2]), true);
        let t_leaf = tape.leaf(&t(&[2], &[0.1, 0.9]), true);
        let bg_leaf = tape.leaf(&t(&[2], &[0.5, -0.5]), true);
        let student = PrototypeSet { background: None, foreground: vec![Some(s_leaf.clone())], skipped: vec![] };
        let teacher = PrototypeSet {
            background: Some(bg_leaf.clone()),
            foreground: vec![Some(t_leaf.clone())],
            skipped: vec![],
        };
        let (loss, _) = gcl_loss(&tape, &student, &teacher, 0.2).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.wrt(&s_leaf).is_some());
        assert!(g.wrt(&t_leaf).is_none(), "teacher prototypes must stay detached");
        assert!(g.wrt(&bg_leaf).is_none(), "teacher background must stay detached");
    }

    #[test]
    fn gcl_empty_pairs_returns_zero() {
        let tape = Tape::new();
        let student = PrototypeSet { background: None, foreground: vec![None], skipped: vec![0] };
        let teacher = PrototypeSet { background: None, foreground: vec![None], skipped: vec![0] };
        let (loss, n) = gcl_loss(&tape, &student, &teacher, 0.07).unwrap();
        assert_eq!(n, 0);
        assert_eq!(loss.scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let tape = Tape::new();
        let z = Tensor::scalar(0.0);
        let total = total_stage1_loss(&tape, &z, &z, &z, &z, 0.5, 1.0, 20.0).unwrap();
        assert_eq!(total.scalar_value().unwrap(), 0.0);

        let one = Tensor::scalar(1.0);
        let total = total_stage1_loss(&tape, &one, &one, &one, &one, 0.5, 1.0, 20.0).unwrap();
        assert!((total.scalar_value().unwrap() - 22.5).abs() < 1e-12);

        // lambda2 = 0 removes the contrastive term.
        let nine = Tensor::scalar(9.0);
        let total = total_stage1_loss(&tape, &one, &one, &nine, &one, 0.5, 0.0, 20.0).unwrap();
        assert!((total.scalar_value().unwrap() - 21.5).abs() < 1e-12);

        let bad = Tensor::scalar(f64::NAN);
        let err = total_stage1_loss(&tape, &one, &bad, &one, &one, 0.5, 1.0, 20.0);
        assert!(matches!(err, Err(CoreError::NonFinite { term }) if term == "anchor"));
    }

    #[test]
    fn l2_normalized_features_have_unit_norm() {
        let tape = Tape::new();
        let mut r = rng::stream(8, "l2");
        let f = rand_tensor(&mut r, &[3, 2, 2], -2.0, 2.0);
        let n = l2_normalize_locations(&tape, &f).unwrap();
        for i in 0..4 {
            let norm: f64 = (0..3).map(|c| n.data()[c * 4 + i].powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}

//! Stage-2 detector with multi-scale frequency-aware attention.
//!
//! A three-stage conv encoder produces features at halving resolutions.
//! Each stage's feature, together with pooled copies at the two coarser
//! resolutions, passes through an MSFA block: a spatial branch (two
//! stacked 3x3 convs) and a frequency branch (1x1 conv over stacked
//! real/imaginary FFT planes), cross-gated per scale by tri-channel
//! attention and fused by 1x1 projections on the fine grid. The decoder
//! mirrors the encoder with nearest-neighbor upsampling and emits one
//! full-resolution probability map. Training uses BCE plus a cosine-
//! annealed uncertainty-aware penalty. The detector takes no prompts.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::params::{BoundParams, ParamSet, Sgd};
use crate::rng;
use crate::tensor::{ComplexTensor, Tape, Tensor};

pub const NUM_STAGES: usize = 3;
pub const NUM_SCALES: usize = 3;

/// Features for one block at three halving resolutions (fine to coarse).
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub small: Tensor,
    pub medium: Tensor,
    pub large: Tensor,
}

impl MultiScaleFeatures {
    /// Derive the medium and large scales from a native fine-scale feature
    /// by average pooling.
    pub fn from_native(tape: &Tape, native: &Tensor) -> Result<MultiScaleFeatures> {
        let medium = tape.avgpool2x2(native)?;
        let large = tape.avgpool2x2(&medium)?;
        Ok(MultiScaleFeatures { small: native.clone(), medium, large })
    }

    fn validate(&self) -> Result<()> {
        let (s, m, l) = (self.small.shape(), self.medium.shape(), self.large.shape());
        if s.len() != 3 || m.len() != 3 || l.len() != 3 {
            return Err(CoreError::shape("msfa", "features must be [C,H,W]".to_string()));
        }
        if s[0] != m[0] || m[0] != l[0] {
            return Err(CoreError::shape("msfa", "scales disagree on channel count".to_string()));
        }
        if s[1] != 2 * m[1] || s[2] != 2 * m[2] || m[1] != 2 * l[1] || m[2] != 2 * l[2] {
            return Err(CoreError::shape(
                "msfa",
                format!("resolutions must halve: {s:?} {m:?} {l:?}"),
            ));
        }
        Ok(())
    }

    fn by_index(&self, i: usize) -> &Tensor {
        match i {
            0 => &self.small,
            1 => &self.medium,
            _ => &self.large,
        }
    }
}

/// One attention bottleneck: reduce `[C] -> [C/rho]`, expand back.
#[derive(Debug, Clone)]
pub struct AttentionPair {
    pub reduce: Tensor,
    pub expand: Tensor,
}

/// Parameters of one MSFA block.
#[derive(Debug, Clone)]
pub struct MsfaBlock {
    /// Two stacked 3x3 kernels, shared across scales.
    pub spa1: Tensor,
    pub spa2: Tensor,
    /// 1x1 kernel over the 2C stacked real/imaginary planes.
    pub fre: Tensor,
    /// Gates for frequency features from spatial contexts: `[gated i][context j]`.
    pub attn_fre: Vec<Vec<AttentionPair>>,
    /// Gates for spatial features from frequency contexts.
    pub attn_spa: Vec<Vec<AttentionPair>>,
    pub fuse_spa: Tensor,
    pub fuse_fre: Tensor,
}

/// Two stacked same-padded 3x3 convolutions.
pub fn spatial_branch(tape: &Tape, f: &Tensor, k1: &Tensor, k2: &Tensor) -> Result<Tensor> {
    tape.conv2d(&tape.conv2d(f, k1, None)?, k2, None)
}

/// FFT per channel, 1x1 conv over the 2C stacked real/imaginary planes,
/// split back, inverse FFT, real part.
pub fn frequency_branch(tape: &Tape, f: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let c = f.shape()[0];
    let spec = tape.fft2(f)?;
    let planes = tape.concat0(&spec.re, &spec.im)?;
    let mixed = tape.conv2d(&planes, kernel, None)?;
    let re = tape.slice0(&mixed, 0, c)?;
    let im = tape.slice0(&mixed, c, c)?;
    let back = tape.ifft2(&ComplexTensor::new(re, im)?)?;
    Ok(back.re)
}

/// Channel gate from three cross-domain contexts:
/// `x * (1/3) sum_j sigmoid(W2_j relu(W1_j GAP(y_j)))`.
///
/// `forced_gate` replaces the computed gate with a constant (testing hook
/// for the identity-configuration chain).
pub fn tri_channel_attention(
    tape: &Tape,
    x: &Tensor,
    contexts: [&Tensor; NUM_SCALES],
    weights: &[AttentionPair],
    forced_gate: Option<f64>,
) -> Result<Tensor> {
    let c = x.shape()[0];
    if let Some(g) = forced_gate {
        return tape.mul_scalar(x, g);
    }
    if weights.len() != NUM_SCALES {
        return Err(CoreError::shape("tri_channel_attention", "need one weight pair per context"));
    }
    let mut gate_sum: Option<Tensor> = None;
    for (y, pair) in contexts.iter().zip(weights) {
        if pair.reduce.shape()[1] != y.shape()[0] || pair.expand.shape()[0] != c {
            return Err(CoreError::shape(
                "tri_channel_attention",
                format!(
                    "weights {:?}/{:?} incompatible with context {:?} and gated {:?}",
                    pair.reduce.shape(),
                    pair.expand.shape(),
                    y.shape(),
                    x.shape()
                ),
            ));
        }
        let pooled = tape.reshape(&tape.gap(y)?, vec![1, y.shape()[0]])?;
        let hidden = tape.relu(&tape.linear(&pooled, &pair.reduce, None)?)?;
        let gate = tape.sigmoid(&tape.linear(&hidden, &pair.expand, None)?)?;
        gate_sum = Some(match gate_sum {
            Some(acc) => tape.add(&acc, &gate)?,
            None => gate,
        });
    }
    let gate = tape.mul_scalar(&gate_sum.expect("three contexts"), 1.0 / NUM_SCALES as f64)?;
    let gate = tape.reshape(&gate, vec![c])?;
    let gate_map = tape.broadcast_trailing(&gate, &x.shape()[1..])?;
    tape.mul(x, &gate_map)
}

/// Full MSFA block: dual branches at three scales, cross-domain gating,
/// upsampling to the fine grid, and 1x1 fusion.
pub fn msfa_forward(
    tape: &Tape,
    block: &MsfaBlock,
    feats: &MultiScaleFeatures,
    forced_gate: Option<f64>,
) -> Result<Tensor> {
    feats.validate()?;
    let spa: Vec<Tensor> = (0..NUM_SCALES)
        .map(|i| spatial_branch(tape, feats.by_index(i), &block.spa1, &block.spa2))
        .collect::<Result<_>>()?;
    let fre: Vec<Tensor> = (0..NUM_SCALES)
        .map(|i| frequency_branch(tape, feats.by_index(i), &block.fre))
        .collect::<Result<_>>()?;

    let mut gated_fre = Vec::with_capacity(NUM_SCALES);
    let mut gated_spa = Vec::with_capacity(NUM_SCALES);
    for i in 0..NUM_SCALES {
        gated_fre.push(tri_channel_attention(
            tape,
            &fre[i],
            [&spa[0], &spa[1], &spa[2]],
            &block.attn_fre[i],
            forced_gate,
        )?);
        gated_spa.push(tri_channel_attention(
            tape,
            &spa[i],
            [&fre[0], &fre[1], &fre[2]],
            &block.attn_spa[i],
            forced_gate,
        )?);
    }

    let to_fine = |tape: &Tape, xs: &[Tensor]| -> Result<Tensor> {
        let m_up = tape.upsample2x(&xs[1])?;
        let l_up = tape.upsample2x(&tape.upsample2x(&xs[2])?)?;
        tape.concat0(&tape.concat0(&xs[0], &m_up)?, &l_up)
    };
    let spa_cat = to_fine(tape, &gated_spa)?;
    let fre_cat = to_fine(tape, &gated_fre)?;
    let fused_spa = tape.conv2d(&spa_cat, &block.fuse_spa, None)?;
    let fused_fre = tape.conv2d(&fre_cat, &block.fuse_fre, None)?;
    tape.add(&fused_spa, &fused_fre)
}

// ---- losses -----------------------------------------------------------------

/// Uncertainty-aware loss: mean of `1 - |2p - 1|^2`. Errors if any value
/// leaves [0,1].
pub fn ual(tape: &Tape, p: &Tensor) -> Result<Tensor> {
    if p.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(CoreError::Invalid("ual expects probabilities in [0,1]".into()));
    }
    let centered = tape.add_scalar(&tape.mul_scalar(p, 2.0)?, -1.0)?;
    let mag = tape.abs_val(&centered)?;
    let sq = tape.mul(&mag, &mag)?;
    tape.mean_all(&tape.one_minus(&sq)?)
}

/// Cosine-annealed UAL coefficient with exact endpoints.
pub fn ual_weight(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::Invalid(format!("training progress {t} outside [0,1]")));
    }
    Ok(if t == 0.0 {
        1.0
    } else if t == 1.0 {
        0.0
    } else {
        (std::f64::consts::PI * t / 2.0).cos()
    })
}

/// Pixel-mean binary cross-entropy with clamped logarithms.
pub fn bce(tape: &Tape, p: &Tensor, target: &Tensor) -> Result<Tensor> {
    if p.shape() != target.shape() {
        return Err(CoreError::shape(
            "bce",
            format!("{:?} vs {:?}", p.shape(), target.shape()),
        ));
    }
    let pos = tape.mul(target, &tape.log_eps(p)?)?;
    let neg = tape.mul(
        &Tensor::from_vec(
            target.shape().to_vec(),
            target.data().iter().map(|&v| 1.0 - v).collect(),
        )?,
        &tape.log_eps(&tape.one_minus(p)?)?,
    )?;
    tape.neg(&tape.mean_all(&tape.add(&pos, &neg)?)?)
}

/// Stage-2 objective: `BCE(p, target) + alpha(t) * UAL(p)`.
pub fn stage2_loss(tape: &Tape, p: &Tensor, target: &Tensor, t: f64) -> Result<Tensor> {
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CoreError::Invalid("stage2 targets must be binary".into()));
    }
    let alpha = ual_weight(t)?;
    let b = bce(tape, p, target)?;
    let u = ual(tape, p)?;
    tape.add(&b, &tape.mul_scalar(&u, alpha)?)
}

// ---- detector ------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct Detector {
    pub image: usize,
    pub channels: usize,
    pub reduction: usize,
}

impl Detector {
    pub fn new(image: usize, channels: usize, reduction: usize) -> Result<Detector> {
        if image % 32 != 0 {
            return Err(CoreError::Invalid(
                "image size must be divisible by 32 (three stages + two pooled scales)".into(),
            ));
        }
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return Err(CoreError::Invalid("reduction must divide channels".into()));
        }
        Ok(Detector { image, channels, reduction })
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let c = self.channels;
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, "detector/init");
        params.insert("enc1.w", kaiming_conv(&mut r, c, 3, 3));
        params.insert("enc1.b", Tensor::zeros(vec![c]));
        params.insert("enc2.w", kaiming_conv(&mut r, c, c, 3));
        params.insert("enc2.b", Tensor::zeros(vec![c]));
        params.insert("enc3.w", kaiming_conv(&mut r, c, c, 3));
        params.insert("enc3.b", Tensor::zeros(vec![c]));
        for stage in 0..NUM_STAGES {
            self.init_block_params(&mut params, &format!("msfa{stage}"), &mut r);
        }
        params.insert("dec2.w", kaiming_conv(&mut r, c, 2 * c, 3));
        params.insert("dec2.b", Tensor::zeros(vec![c]));
        params.insert("dec1.w", kaiming_conv(&mut r, c, 2 * c, 3));
        params.insert("dec1.b", Tensor::zeros(vec![c]));
        params.insert("out.w", kaiming_conv(&mut r, 1, c, 3));
        params.insert("out.b", Tensor::zeros(vec![1]));
        params
    }

    fn init_block_params(&self, params: &mut ParamSet, prefix: &str, r: &mut ChaCha8Rng) {
        let c = self.channels;
        let hidden = c / self.reduction;
        params.insert(format!("{prefix}.spa1"), kaiming_conv(r, c, c, 3));
        params.insert(format!("{prefix}.spa2"), kaiming_conv(r, c, c, 3));
        params.insert(format!("{prefix}.fre"), kaiming_conv(r, 2 * c, 2 * c, 1));
        for domain in ["fre", "spa"] {
            for i in 0..NUM_SCALES {
                for j in 0..NUM_SCALES {
                    params.insert(
                        format!("{prefix}.attn.{domain}.{i}.{j}.w1"),
                        xavier(r, hidden, c),
                    );
                    params.insert(
                        format!("{prefix}.attn.{domain}.{i}.{j}.w2"),
                        xavier(r, c, hidden),
                    );
                }
            }
        }
        params.insert(format!("{prefix}.fuse_spa"), kaiming_conv(r, c, 3 * c, 1));
        params.insert(format!("{prefix}.fuse_fre"), kaiming_conv(r, c, 3 * c, 1));
    }

    pub fn block(&self, bound: &BoundParams, prefix: &str) -> Result<MsfaBlock> {
        let pair_grid = |domain: &str| -> Result<Vec<Vec<AttentionPair>>> {
            (0..NUM_SCALES)
                .map(|i| {
                    (0..NUM_SCALES)
                        .map(|j| {
                            Ok(AttentionPair {
                                reduce: bound.get(&format!("{prefix}.attn.{domain}.{i}.{j}.w1"))?.clone(),
                                expand: bound.get(&format!("{prefix}.attn.{domain}.{i}.{j}.w2"))?.clone(),
                            })
                        })
                        .collect()
                })
                .collect()
        };
        Ok(MsfaBlock {
            spa1: bound.get(&format!("{prefix}.spa1"))?.clone(),
            spa2: bound.get(&format!("{prefix}.spa2"))?.clone(),
            fre: bound.get(&format!("{prefix}.fre"))?.clone(),
            attn_fre: pair_grid("fre")?,
            attn_spa: pair_grid("spa")?,
            fuse_spa: bound.get(&format!("{prefix}.fuse_spa"))?.clone(),
            fuse_fre: bound.get(&format!("{prefix}.fuse_fre"))?.clone(),
        })
    }

    /// Full-resolution probability map. No prompt input exists anywhere in
    /// this path. `ablate_msfa` bypasses the blocks, passing the encoder
    /// features straight to the decoder.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        image: &Tensor,
        ablate_msfa: bool,
    ) -> Result<Tensor> {
        let n = self.image;
        if image.shape() != [3, n, n] {
            return Err(CoreError::shape(
                "detector",
                format!("image must be [3,{n},{n}], got {:?}", image.shape()),
            ));
        }
        let conv_block = |x: &Tensor, name: &str| -> Result<Tensor> {
            let y = tape.relu(&tape.conv2d(
                x,
                bound.get(&format!("{name}.w"))?,
                Some(bound.get(&format!("{name}.b"))?),
            )?)?;
            tape.avgpool2x2(&y)
        };
        let x1 = conv_block(image, "enc1")?;
        let x2 = conv_block(&x1, "enc2")?;
        let x3 = conv_block(&x2, "enc3")?;

        let stage_out = |x: &Tensor, idx: usize| -> Result<Tensor> {
            if ablate_msfa {
                return Ok(x.clone());
            }
            let feats = MultiScaleFeatures::from_native(tape, x)?;
            msfa_forward(tape, &self.block(bound, &format!("msfa{idx}"))?, &feats, None)
        };
        let y1 = stage_out(&x1, 0)?;
        let y2 = stage_out(&x2, 1)?;
        let y3 = stage_out(&x3, 2)?;

        let u3 = tape.upsample2x(&y3)?;
        let d2 = tape.relu(&tape.conv2d(
            &tape.concat0(&u3, &y2)?,
            bound.get("dec2.w")?,
            Some(bound.get("dec2.b")?),
        )?)?;
        let u2 = tape.upsample2x(&d2)?;
        let d1 = tape.relu(&tape.conv2d(
            &tape.concat0(&u2, &y1)?,
            bound.get("dec1.w")?,
            Some(bound.get("dec1.b")?),
        )?)?;
        let u1 = tape.upsample2x(&d1)?;
        let logits = tape.conv2d(&u1, bound.get("out.w")?, Some(bound.get("out.b")?))?;
        let p = tape.sigmoid(&tape.reshape(&logits, vec![n, n])?)?;
        Ok(p)
    }
}

/// One optimizer step on a batch of `(image, pseudo_label)` pairs.
pub struct Stage2StepReport {
    pub bce: f64,
    pub ual: f64,
    pub alpha: f64,
    pub total: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    det: &Detector,
    params: &mut ParamSet,
    batch: &[(Tensor, Tensor)],
    t_progress: f64,
    lr: f64,
    opt: &mut Sgd,
    ablate_msfa: bool,
) -> Result<Stage2StepReport> {
    if batch.is_empty() {
        return Err(CoreError::Invalid("empty batch".into()));
    }
    let alpha = ual_weight(t_progress)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut report = Stage2StepReport { bce: 0.0, ual: 0.0, alpha, total: 0.0 };
    for (image, pseudo) in batch {
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| true);
        let p = det.forward(&tape, &bound, image, ablate_msfa)?;
        let b = bce(&tape, &p, pseudo)?;
        let u = ual(&tape, &p)?;
        let total = tape.add(&b, &tape.mul_scalar(&u, alpha)?)?;
        let channel = tape.backward(&total)?;
        for (name, leaf) in bound.iter() {
            if ablate_msfa && name.starts_with("msfa") {
                continue;
            }
            if let Some(g) = channel.wrt(leaf) {
                let slot = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                for (o, &v) in slot.iter_mut().zip(g.data()) {
                    *o += v * scale;
                }
            }
        }
        report.bce += b.scalar_value()? * scale;
        report.ual += u.scalar_value()? * scale;
        report.total += total.scalar_value()? * scale;
    }
    opt.step(params, &grads, lr)?;
    Ok(report)
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng::normal(rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn xavier(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    gaussian(rng, vec![fan_out, fan_in], std)
}

fn kaiming_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> Tensor {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    gaussian(rng, vec![cout, cin, k, k], std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fora::delta_kernel;
    use crate::gradcheck::{check_scalar_fn, rand_tensor, DEFAULT_H, DEFAULT_TOL};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn identity_1x1(planes: usize) -> Tensor {
        let mut d = vec![0.0; planes * planes];
        for i in 0..planes {
            d[i * planes + i] = 1.0;
        }
        Tensor::from_vec(vec![planes, planes, 1, 1], d).unwrap()
    }

    #[test]
    fn spatial_branch_configurations() {
        let tape = Tape::new();
        let c = 2;
        let f = rand_tensor(&mut rng::stream(1, "sb"), &[c, 4, 4], -1.0, 1.0);
        let zero = Tensor::zeros(vec![c, c, 3, 3]);
        let y = spatial_branch(&tape, &f, &zero, &zero).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let d = delta_kernel(c, 3);
        let y = spatial_branch(&tape, &f, &d, &d).unwrap();
        assert!(y.max_abs_diff(&f) < 1e-12);

        let two = scale_kernel(&d, 2.0);
        let three = scale_kernel(&d, 3.0);
        let y = spatial_branch(&tape, &f, &two, &three).unwrap();
        let want = tape.mul_scalar(&f, 6.0).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    fn scale_kernel(k: &Tensor, s: f64) -> Tensor {
        Tensor::from_vec(k.shape().to_vec(), k.data().iter().map(|&v| s * v).collect()).unwrap()
    }

    #[test]
    fn frequency_branch_configurations() {
        let tape = Tape::new();
        let c = 2;
        let f = rand_tensor(&mut rng::stream(2, "fb"), &[c, 4, 4], -1.0, 1.0);

        let y = frequency_branch(&tape, &f, &identity_1x1(2 * c)).unwrap();
        assert!(y.max_abs_diff(&f) < 1e-9, "identity kernel round-trips");

        let y = frequency_branch(&tape, &f, &Tensor::zeros(vec![2 * c, 2 * c, 1, 1])).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-15));

        let y = frequency_branch(&tape, &f, &scale_kernel(&identity_1x1(2 * c), 2.0)).unwrap();
        let want = tape.mul_scalar(&f, 2.0).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-9);
    }

    fn zero_attention(c: usize, hidden: usize) -> Vec<AttentionPair> {
        (0..NUM_SCALES)
            .map(|_| AttentionPair {
                reduce: Tensor::zeros(vec![hidden, c]),
                expand: Tensor::zeros(vec![c, hidden]),
            })
            .collect()
    }

    #[test]
    fn zero_weight_attention_halves_input() {
        let tape = Tape::new();
        let c = 4;
        let x = rand_tensor(&mut rng::stream(3, "attn"), &[c, 4, 4], -1.0, 1.0);
        let ctx1 = rand_tensor(&mut rng::stream(4, "c1"), &[c, 4, 4], -1.0, 1.0);
        let ctx2 = rand_tensor(&mut rng::stream(5, "c2"), &[c, 2, 2], -1.0, 1.0);
        let ctx3 = rand_tensor(&mut rng::stream(6, "c3"), &[c, 1, 1], -1.0, 1.0);
        let y = tri_channel_attention(&tape, &x, [&ctx1, &ctx2, &ctx3], &zero_attention(c, 2), None).unwrap();
        let want = tape.mul_scalar(&x, 0.5).unwrap();
        assert_eq!(y.data(), want.data(), "sigma(0) = 0.5 exactly");
    }

    #[test]
    fn zero_contexts_also_halve_input() {
        let tape = Tape::new();
        let c = 4;
        let mut r = rng::stream(9, "attn2");
        let x = rand_tensor(&mut r, &[c, 4, 4], -1.0, 1.0);
        let weights: Vec<AttentionPair> = (0..NUM_SCALES)
            .map(|_| AttentionPair {
                reduce: rand_tensor(&mut r, &[2, c], -1.0, 1.0),
                expand: rand_tensor(&mut r, &[c, 2], -1.0, 1.0),
            })
            .collect();
        let z1 = Tensor::zeros(vec![c, 4, 4]);
        let z2 = Tensor::zeros(vec![c, 2, 2]);
        let z3 = Tensor::zeros(vec![c, 1, 1]);
        let y = tri_channel_attention(&tape, &x, [&z1, &z2, &z3], &weights, None).unwrap();
        let want = tape.mul_scalar(&x, 0.5).unwrap();
        assert_eq!(y.data(), want.data());
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let tape = Tape::new();
        let c = 4;
        let mut r = rng::stream(10, "attn3");
        let x = Tensor::full(vec![c, 2, 2], 1.0);
        let weights: Vec<AttentionPair> = (0..NUM_SCALES)
            .map(|_| AttentionPair {
                reduce: rand_tensor(&mut r, &[2, c], -3.0, 3.0),
                expand: rand_tensor(&mut r, &[c, 2], -3.0, 3.0),
            })
            .collect();
        let ctx = rand_tensor(&mut r, &[c, 2, 2], -2.0, 2.0);
        let y = tri_channel_attention(&tape, &x, [&ctx, &ctx, &ctx], &weights, None).unwrap();
        for &v in y.data() {
            assert!(v > 0.0 && v < 1.0, "gate escaped (0,1): {v}");
        }
    }

    fn tiny_block(seed: u64, c: usize, hidden: usize) -> MsfaBlock {
        let mut r = rng::stream(seed, "block");
        let pairs = |r: &mut ChaCha8Rng| -> Vec<Vec<AttentionPair>> {
            (0..NUM_SCALES)
                .map(|_| {
                    (0..NUM_SCALES)
                        .map(|_| AttentionPair {
                            reduce: rand_tensor(r, &[hidden, c], -0.5, 0.5),
                            expand: rand_tensor(r, &[c, hidden], -0.5, 0.5),
                        })
                        .collect()
                })
                .collect()
        };
        MsfaBlock {
            spa1: rand_tensor(&mut r, &[c, c, 3, 3], -0.4, 0.4),
            spa2: rand_tensor(&mut r, &[c, c, 3, 3], -0.4, 0.4),
            fre: rand_tensor(&mut r, &[2 * c, 2 * c, 1, 1], -0.4, 0.4),
            attn_fre: pairs(&mut r),
            attn_spa: pairs(&mut r),
            fuse_spa: rand_tensor(&mut r, &[c, 3 * c, 1, 1], -0.4, 0.4),
            fuse_fre: rand_tensor(&mut r, &[c, 3 * c, 1, 1], -0.4, 0.4),
        }
    }

    #[test]
    fn msfa_zero_fusion_or_zero_input_gives_zero() {
        let tape = Tape::new();
        let c = 2;
        let native = rand_tensor(&mut rng::stream(7, "msfa"), &[c, 4, 4], -1.0, 1.0);
        let feats = MultiScaleFeatures::from_native(&tape, &native).unwrap();
        let mut block = tiny_block(3, c, 1);
        block.fuse_spa = Tensor::zeros(vec![c, 3 * c, 1, 1]);
        block.fuse_fre = Tensor::zeros(vec![c, 3 * c, 1, 1]);
        let y = msfa_forward(&tape, &block, &feats, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let zero_feats = MultiScaleFeatures::from_native(&tape, &Tensor::zeros(vec![c, 4, 4])).unwrap();
        let block = tiny_block(4, c, 1);
        let y = msfa_forward(&tape, &block, &zero_feats, None).unwrap();
        assert!(
            y.data().iter().all(|&v| v.abs() < 1e-12),
            "zero input stays zero through bias-free branches"
        );
    }

    #[test]
    fn identity_configuration_chain() {
        // Delta spatial kernels, identity frequency kernel, gates forced
        // to 1: the block reduces to fuse_spa([S,M^,L^]) + fuse_fre(same).
        let tape = Tape::new();
        let c = 2;
        let native = rand_tensor(&mut rng::stream(8, "msfa-id"), &[c, 4, 4], -1.0, 1.0);
        let feats = MultiScaleFeatures::from_native(&tape, &native).unwrap();
        let mut block = tiny_block(5, c, 1);
        block.spa1 = delta_kernel(c, 3);
        block.spa2 = delta_kernel(c, 3);
        block.fre = identity_1x1(2 * c);
        let y = msfa_forward(&tape, &block, &feats, Some(1.0)).unwrap();

        let m_up = tape.upsample2x(&feats.medium).unwrap();
        let l_up = tape.upsample2x(&tape.upsample2x(&feats.large).unwrap()).unwrap();
        let cat = tape.concat0(&tape.concat0(&feats.small, &m_up).unwrap(), &l_up).unwrap();
        let want = tape
            .add(
                &tape.conv2d(&cat, &block.fuse_spa, None).unwrap(),
                &tape.conv2d(&cat, &block.fuse_fre, None).unwrap(),
            )
            .unwrap();
        assert!(y.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn msfa_gradients_match_finite_differences() {
        let c = 2;
        let hidden = 1;
        let block = tiny_block(11, c, hidden);
        let native = rand_tensor(&mut rng::stream(12, "msfa-fd"), &[c, 4, 4], -1.0, 1.0);
        let mut inputs = vec![native, block.spa1.clone(), block.spa2.clone(), block.fre.clone()];
        for grid in [&block.attn_fre, &block.attn_spa] {
            for row in grid {
                for pair in row {
                    inputs.push(pair.reduce.clone());
                    inputs.push(pair.expand.clone());
                }
            }
        }
        inputs.push(block.fuse_spa.clone());
        inputs.push(block.fuse_fre.clone());

        let err = check_scalar_fn(
            &inputs,
            |tape, v| {
                let mut it = v[4..].iter();
                let mut grids = Vec::new();
                for _ in 0..2 {
                    let grid: Vec<Vec<AttentionPair>> = (0..NUM_SCALES)
                        .map(|_| {
                            (0..NUM_SCALES)
                                .map(|_| AttentionPair {
                                    reduce: it.next().unwrap().clone(),
                                    expand: it.next().unwrap().clone(),
                                })
                                .collect()
                        })
                        .collect();
                    grids.push(grid);
                }
                let block = MsfaBlock {
                    spa1: v[1].clone(),
                    spa2: v[2].clone(),
                    fre: v[3].clone(),
                    attn_fre: grids.remove(0),
                    attn_spa: grids.remove(0),
                    fuse_spa: it.next().unwrap().clone(),
                    fuse_fre: it.next().unwrap().clone(),
                };
                let feats = MultiScaleFeatures::from_native(tape, &v[0])?;
                let y = msfa_forward(tape, &block, &feats, None)?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            DEFAULT_H,
        )
        .unwrap();
        assert!(err <= DEFAULT_TOL, "max rel err {err}");
    }

    #[test]
    fn ual_examples_and_bounds() {
        let tape = Tape::new();
        let half = Tensor::full(vec![2, 2], 0.5);
        assert_eq!(ual(&tape, &half).unwrap().scalar_value().unwrap(), 1.0);

        let confident = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ual(&tape, &confident).unwrap().scalar_value().unwrap(), 0.0);

        let p75 = Tensor::full(vec![2, 2], 0.75);
        assert!((ual(&tape, &p75).unwrap().scalar_value().unwrap() - 0.75).abs() < 1e-12);

        assert!(ual(&tape, &Tensor::full(vec![2], 1.5)).is_err());

        // Bounds and unique maximum at 0.5.
        let mut r = rng::stream(14, "ual");
        for _ in 0..30 {
            let p = rand_tensor(&mut r, &[3, 3], 0.0, 1.0);
            let v = ual(&tape, &p).unwrap().scalar_value().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ual_weight_schedule() {
        assert_eq!(ual_weight(0.0).unwrap(), 1.0);
        assert_eq!(ual_weight(1.0).unwrap(), 0.0);
        assert!(ual_weight(1.2).is_err());
        assert!(ual_weight(-0.1).is_err());
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let a = ual_weight(t).unwrap();
            assert!(a <= prev + 1e-15, "alpha not nonincreasing at t={t}");
            prev = a;
        }
    }

    #[test]
    fn stage2_loss_examples() {
        let tape = Tape::new();
        // Perfect binary prediction: both terms vanish (clamps keep BCE finite).
        let target = t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]);
        let v = stage2_loss(&tape, &target, &target, 0.3).unwrap().scalar_value().unwrap();
        assert!(v.abs() < 1e-9);

        // p = 0.5, t = 0: ln 2 + 1.
        let half = Tensor::full(vec![2, 2], 0.5);
        let v = stage2_loss(&tape, &half, &target, 0.0).unwrap().scalar_value().unwrap();
        assert!((v - (std::f64::consts::LN_2 + 1.0)).abs() < 1e-9);

        // At t = 1 UAL contributes nothing.
        let v1 = stage2_loss(&tape, &half, &target, 1.0).unwrap().scalar_value().unwrap();
        let b = bce(&tape, &half, &target).unwrap().scalar_value().unwrap();
        assert_eq!(v1, b);

        assert!(stage2_loss(&tape, &half, &target, 1.5).is_err());
    }

    #[test]
    fn stage2_loss_gradient_check() {
        let mut r = rng::stream(15, "s2fd");
        let logits = rand_tensor(&mut r, &[3, 3], -1.5, 1.5);
        let bits: Vec<f64> = (0..9).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let target = t(&[3, 3], &bits);
        let err = check_scalar_fn(
            &[logits],
            move |tape, v| {
                let p = tape.sigmoid(&v[0])?;
                stage2_loss(tape, &p, &target, 0.4)
            },
            DEFAULT_H,
        )
        .unwrap();
        assert!(err <= DEFAULT_TOL, "max rel err {err}");
    }

    #[test]
    fn detector_basics() {
        let det = Detector::new(32, 8, 4).unwrap();
        let params = det.init_params(5);
        let image = rand_tensor(&mut rng::stream(16, "det"), &[3, 32, 32], 0.0, 1.0);

        let run = |ablate: bool| {
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| false);
            det.forward(&tape, &bound, &image, ablate).unwrap()
        };
        let p = run(false);
        assert_eq!(p.shape(), &[32, 32]);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let p2 = run(false);
        assert_eq!(p.data(), p2.data(), "same seed, same map");
        let pa = run(true);
        assert!(p.data() != pa.data(), "ablation changes the path");

        // Zero parameters: p = 0.5 everywhere.
        let mut zeroed = ParamSet::new();
        for (name, t) in params.iter() {
            zeroed.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        let tape = Tape::new();
        let bound = zeroed.bind(&tape, |_| false);
        let p = det.forward(&tape, &bound, &image, false).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn stage2_step_descends() {
        let det = Detector::new(32, 8, 4).unwrap();
        let mut deltas = Vec::new();
        for seed in 0..5u64 {
            let mut params = det.init_params(seed);
            let image = rand_tensor(&mut rng::stream(seed, "img"), &[3, 32, 32], 0.0, 1.0);
            let mut bits = vec![0.0; 32 * 32];
            for y in 8..20 {
                for x in 10..24 {
                    bits[y * 32 + x] = 1.0;
                }
            }
            let pseudo = t(&[32, 32], &bits);
            let batch = vec![(image.clone(), pseudo.clone())];
            let eval = |params: &ParamSet| {
                let tape = Tape::new();
                let bound = params.bind(&tape, |_| false);
                let p = det.forward(&tape, &bound, &image, false).unwrap();
                stage2_loss(&tape, &p, &pseudo, 0.0).unwrap().scalar_value().unwrap()
            };
            let before = eval(&params);
            let mut opt = Sgd::new(0.9, 0.0);
            stage2_step(&det, &mut params, &batch, 0.0, 1e-3, &mut opt, false).unwrap();
            let after = eval(&params);
            deltas.push(after - before);
        }
        deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(deltas[2] < 0.0, "median delta {deltas:?}");
    }
}

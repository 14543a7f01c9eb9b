//! Central finite-difference verification of tape gradients.
//!
//! Each check rebuilds the computation from constant inputs, perturbs one
//! element at a time by +/-h, and compares the resulting difference quotient
//! against the analytic adjoint. The harness stays independent of any
//! particular adjoint rule: it only ever calls the public forward API.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Max relative error between tape gradients and central differences for a
/// scalar-valued function of the given inputs.
pub fn check_scalar_fn<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    // Analytic pass.
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = f(&tape, &leaves)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| {
            grads
                .wrt(l)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; l.len()])
        })
        .collect();

    // Numeric pass, one element at a time.
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = tensors.iter().map(|t| tape.leaf(t, false)).collect();
        f(&tape, &leaves)?.scalar_value()
    };
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = t.data().to_vec();
            let mut dm = t.data().to_vec();
            dp[e] += h;
            dm[e] -= h;
            plus[ti] = Tensor::from_vec(t.shape().to_vec(), dp)?;
            minus[ti] = Tensor::from_vec(t.shape().to_vec(), dm)?;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ti][e], fd));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub tol: f64,
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.ops.iter().all(|o| o.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for op in &self.ops {
            out.push_str(&format!(
                "{:<28} configs={:<4} max_rel_err={:.3e} {}\n",
                op.name,
                op.configs,
                op.max_rel_err,
                if op.pass { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Random tensor with entries in [lo, hi).
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n).map(|_| rng::uniform(rng, lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Random tensor bounded away from zero (for kinked ops like relu/abs).
fn rand_tensor_offzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng::uniform(rng, 0.2, 1.5);
            if rng::uniform(rng, 0.0, 1.0) < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng, rank_choices: &[usize]) -> Vec<usize> {
    let rank = rank_choices[(rng::uniform(rng, 0.0, rank_choices.len() as f64)) as usize
        % rank_choices.len()];
    (0..rank)
        .map(|_| 1 + (rng::uniform(rng, 0.0, 4.0)) as usize)
        .collect()
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

fn run_entry(
    name: &str,
    seed: u64,
    configs: usize,
    tol: f64,
    check: CheckFn,
) -> Result<OpReport> {
    let mut worst = 0.0f64;
    for i in 0..configs {
        let mut rng = rng::stream(seed, &format!("gradcheck/{name}/{i}"));
        worst = worst.max(check(&mut rng)?);
    }
    Ok(OpReport {
        name: name.to_string(),
        configs,
        max_rel_err: worst,
        pass: worst <= tol,
    })
}

macro_rules! sum_of {
    ($tape:ident, $x:expr) => {
        $tape.sum_all(&$x)
    };
}

fn check_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2, 3]);
    let a = rand_tensor(rng, &s, -1.0, 1.0);
    let b = rand_tensor(rng, &s, -1.0, 1.0);
    check_scalar_fn(&[a, b], |t, v| {
        let y = t.add(&v[0], &v[1])?;
        let y = t.mul(&y, &y)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2]);
    let a = rand_tensor(rng, &s, -1.0, 1.0);
    let b = rand_tensor(rng, &s, -1.0, 1.0);
    check_scalar_fn(&[a, b], |t, v| {
        let y = t.sub(&v[0], &v[1])?;
        let y = t.mul(&y, &y)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2, 3]);
    let a = rand_tensor(rng, &s, -1.0, 1.0);
    let b = rand_tensor(rng, &s, -1.0, 1.0);
    check_scalar_fn(&[a, b], |t, v| {
        let y = t.mul(&v[0], &v[1])?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_mul_scalar_broadcast(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[2]);
    let a = rand_tensor(rng, &s, -1.0, 1.0);
    let c = rand_tensor(rng, &[], 0.5, 1.5);
    check_scalar_fn(&[a, c], |t, v| {
        let y = t.mul(&v[0], &v[1])?;
        let y = t.mul(&y, &y)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_div(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2]);
    let a = rand_tensor(rng, &s, -1.0, 1.0);
    let b = rand_tensor(rng, &s, 0.4, 2.0);
    check_scalar_fn(&[a, b], |t, v| {
        let y = t.div(&v[0], &v[1])?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_unary_smooth(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2]);
    let a = rand_tensor(rng, &s, -1.2, 1.2);
    check_scalar_fn(&[a], |t, v| {
        let e = t.exp(&v[0])?;
        let sg = t.sigmoid(&e)?;
        let n = t.neg(&sg)?;
        let y = t.add_scalar(&t.mul_scalar(&n, 0.7)?, 1.3)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_log_eps(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2]);
    let a = rand_tensor(rng, &s, 0.1, 2.0);
    check_scalar_fn(&[a], |t, v| {
        let y = t.log_eps(&v[0])?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[2, 3]);
    let a = rand_tensor_offzero(rng, &s);
    check_scalar_fn(&[a], |t, v| {
        let y = t.relu(&v[0])?;
        let y = t.mul(&y, &y)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_abs(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2]);
    let a = rand_tensor_offzero(rng, &s);
    check_scalar_fn(&[a], |t, v| {
        let y = t.abs_val(&v[0])?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_powf(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = small_shape(rng, &[1, 2]);
    let a = rand_tensor(rng, &s, 0.2, 1.5);
    let e = rng::uniform(rng, 0.5, 3.0);
    check_scalar_fn(&[a], move |t, v| {
        let y = t.powf(&v[0], e)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_reduce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = vec![2, 3, 2];
    let a = rand_tensor(rng, &shape, -1.0, 1.0);
    let axis = (rng::uniform(rng, 0.0, 3.0)) as usize % 3;
    check_scalar_fn(&[a], move |t, v| {
        let m = t.mean_axes(&v[0], &[axis])?;
        let s = t.sum_axes(&v[0], &[axis])?;
        let y = t.mul(&m, &s)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_gap(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_tensor(rng, &[3, 4, 4], -1.0, 1.0);
    check_scalar_fn(&[a], |t, v| {
        let g = t.gap(&v[0])?;
        let y = t.mul(&g, &g)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rows, a_dim, b_dim) = (
        1 + (rng::uniform(rng, 0.0, 3.0)) as usize,
        1 + (rng::uniform(rng, 0.0, 4.0)) as usize,
        1 + (rng::uniform(rng, 0.0, 4.0)) as usize,
    );
    let x = rand_tensor(rng, &[rows, a_dim], -1.0, 1.0);
    let w = rand_tensor(rng, &[b_dim, a_dim], -1.0, 1.0);
    let bias = rand_tensor(rng, &[b_dim], -0.5, 0.5);
    check_scalar_fn(&[x, w, bias], |t, v| {
        let y = t.linear(&v[0], &v[1], Some(&v[2]))?;
        let y = t.mul(&y, &y)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cin = 1 + (rng::uniform(rng, 0.0, 2.0)) as usize;
    let cout = 1 + (rng::uniform(rng, 0.0, 2.0)) as usize;
    let ks = [1usize, 3, 5][(rng::uniform(rng, 0.0, 3.0)) as usize % 3];
    let (h, w) = (4, 5);
    let x = rand_tensor(rng, &[cin, h, w], -1.0, 1.0);
    let k = rand_tensor(rng, &[cout, cin, ks, ks], -0.7, 0.7);
    let bias = rand_tensor(rng, &[cout], -0.3, 0.3);
    check_scalar_fn(&[x, k, bias], |t, v| {
        let y = t.conv2d(&v[0], &v[1], Some(&v[2]))?;
        let y = t.mul(&y, &y)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_fft_roundtrip_path(rng: &mut ChaCha8Rng) -> Result<f64> {
    // Differentiate through fft2 -> pointwise square of both planes.
    let c = 1 + (rng::uniform(rng, 0.0, 2.0)) as usize;
    let (h, w) = (3, 4);
    let x = rand_tensor(rng, &[c, h, w], -1.0, 1.0);
    check_scalar_fn(&[x], |t, v| {
        let z = t.fft2(&v[0])?;
        let r2 = t.mul(&z.re, &z.re)?;
        let i2 = t.mul(&z.im, &z.im)?;
        let s = t.add(&r2, &i2)?;
        sum_of!(t, s)
    }, DEFAULT_H)
}

fn check_ifft_path(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (4, 4);
    let re = rand_tensor(rng, &[1, h, w], -1.0, 1.0);
    let im = rand_tensor(rng, &[1, h, w], -1.0, 1.0);
    check_scalar_fn(&[re, im], |t, v| {
        let z = crate::tensor::ComplexTensor::new(v[0].clone(), v[1].clone())?;
        let b = t.ifft2(&z)?;
        let r2 = t.mul(&b.re, &b.re)?;
        let i2 = t.mul(&b.im, &b.im)?;
        let s = t.add(&r2, &i2)?;
        sum_of!(t, s)
    }, DEFAULT_H)
}

fn check_movement(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(rng, &[1, 3], -1.0, 1.0);
    check_scalar_fn(&[a, b], |t, v| {
        let c = t.concat0(&v[0], &v[1])?;
        let s = t.slice0(&c, 1, 2)?;
        let tr = t.transpose2d(&s)?;
        let r = t.reshape(&tr, vec![6])?;
        let rep = t.repeat0(&r, 2)?;
        let y = t.mul(&rep, &rep)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_broadcast_trailing(rng: &mut ChaCha8Rng) -> Result<f64> {
    let gate = rand_tensor(rng, &[3], -1.0, 1.0);
    let x = rand_tensor(rng, &[3, 2, 2], -1.0, 1.0);
    check_scalar_fn(&[gate, x], |t, v| {
        let g = t.broadcast_trailing(&v[0], &[2, 2])?;
        let y = t.mul(&g, &v[1])?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_tensor(rng, &[2, 4], -2.0, 2.0);
    let w = rand_tensor(rng, &[2, 4], -1.0, 1.0);
    check_scalar_fn(&[a, w], |t, v| {
        let y = t.softmax_lastdim(&v[0])?;
        let y = t.mul(&y, &v[1])?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_resample(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
    check_scalar_fn(&[a], |t, v| {
        let u = t.upsample2x(&v[0])?;
        let p = t.avgpool2x2(&u)?;
        let q = t.avgpool2x2(&p)?;
        let y = t.mul(&q, &q)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

fn check_patchify(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
    let w = rand_tensor(rng, &[3, 8], -1.0, 1.0);
    check_scalar_fn(&[a, w], |t, v| {
        let p = t.patchify(&v[0], 2)?;
        let y = t.linear(&p, &v[1], None)?;
        let y = t.mul(&y, &y)?;
        sum_of!(t, y)
    }, DEFAULT_H)
}

/// Random composition of smooth primitives, depth <= 6.
fn check_composite(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = vec![2, 3];
    let a = rand_tensor(rng, &shape, 0.3, 1.2);
    let b = rand_tensor(rng, &shape, 0.3, 1.2);
    let picks: Vec<usize> = (0..6)
        .map(|_| (rng::uniform(rng, 0.0, 6.0)) as usize % 6)
        .collect();
    check_scalar_fn(&[a, b], move |t, v| {
        let mut cur = t.mul(&v[0], &v[1])?;
        for &p in &picks {
            cur = match p {
                0 => t.sigmoid(&cur)?,
                1 => t.exp(&t.mul_scalar(&cur, 0.5)?)?,
                2 => t.add(&cur, &v[0])?,
                3 => t.mul(&cur, &v[1])?,
                4 => t.log_eps(&t.add_scalar(&cur, 1.5)?)?,
                _ => t.div(&cur, &t.add_scalar(&v[1], 1.0)?)?,
            };
        }
        sum_of!(t, cur)
    }, DEFAULT_H)
}

// ---- module-level entries ---------------------------------------------------

fn check_fora_forward(rng: &mut ChaCha8Rng) -> Result<f64> {
    use crate::fora::{Fora, FrequencyModulator, LowRankAdapter, SpatialEnhancer};
    let (a, b, r, hg, wg) = (5, 4, 2, 2, 3);
    let x = rand_tensor(rng, &[hg * wg, a], -1.0, 1.0);
    let inputs = vec![
        x,
        rand_tensor(rng, &[b, a], -0.5, 0.5),
        rand_tensor(rng, &[r, a], -0.5, 0.5),
        rand_tensor(rng, &[b, r], -0.5, 0.5),
        rand_tensor(rng, &[r, r, 1, 1], -0.4, 0.4),
        rand_tensor(rng, &[r, r, 3, 3], -0.4, 0.4),
        rand_tensor(rng, &[r, r, 5, 5], -0.4, 0.4),
        rand_tensor(rng, &[r, r, 3, 3], -0.4, 0.4),
    ];
    check_scalar_fn(
        &inputs,
        move |tape, v| {
            let fora = Fora {
                adapter: LowRankAdapter::new(v[1].clone(), v[2].clone(), v[3].clone(), (hg, wg))?,
                enhancer: SpatialEnhancer::new(v[4].clone(), v[5].clone(), v[6].clone())?,
                modulator: FrequencyModulator::new(v[7].clone())?,
            };
            let y = crate::fora::fora_forward(tape, &fora, &v[0])?;
            let sq = tape.mul(&y, &y)?;
            tape.sum_all(&sq)
        },
        DEFAULT_H,
    )
}

fn check_msfa_forward(rng: &mut ChaCha8Rng) -> Result<f64> {
    use crate::msfa::{msfa_forward, AttentionPair, MsfaBlock, MultiScaleFeatures, NUM_SCALES};
    let (c, hidden) = (2, 1);
    let mut inputs = vec![rand_tensor(rng, &[c, 4, 4], -1.0, 1.0)];
    inputs.push(rand_tensor(rng, &[c, c, 3, 3], -0.4, 0.4));
    inputs.push(rand_tensor(rng, &[c, c, 3, 3], -0.4, 0.4));
    inputs.push(rand_tensor(rng, &[2 * c, 2 * c, 1, 1], -0.4, 0.4));
    for _ in 0..2 * NUM_SCALES * NUM_SCALES {
        inputs.push(rand_tensor(rng, &[hidden, c], -0.5, 0.5));
        inputs.push(rand_tensor(rng, &[c, hidden], -0.5, 0.5));
    }
    inputs.push(rand_tensor(rng, &[c, 3 * c, 1, 1], -0.4, 0.4));
    inputs.push(rand_tensor(rng, &[c, 3 * c, 1, 1], -0.4, 0.4));
    check_scalar_fn(
        &inputs,
        move |tape, v| {
            let mut it = v[4..].iter();
            let mut grid = || -> Vec<Vec<AttentionPair>> {
                (0..NUM_SCALES)
                    .map(|_| {
                        (0..NUM_SCALES)
                            .map(|_| AttentionPair {
                                reduce: it.next().unwrap().clone(),
                                expand: it.next().unwrap().clone(),
                            })
                            .collect()
                    })
                    .collect()
            };
            let attn_fre = grid();
            let attn_spa = grid();
            let block = MsfaBlock {
                spa1: v[1].clone(),
                spa2: v[2].clone(),
                fre: v[3].clone(),
                attn_fre,
                attn_spa,
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
}

fn rand_binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| if rng::uniform(rng, 0.0, 1.0) < 0.5 { 0.0 } else { 1.0 })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn const_bundle_of(probs: Vec<Tensor>) -> crate::triadic::MaskBundle {
    let bins = probs.iter().map(|p| p.binarize_gt(0.5)).collect();
    crate::triadic::MaskBundle { logits: probs.clone(), probs, bins }
}

fn check_focal_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = rand_tensor(rng, &[3, 3], -1.5, 1.5);
    let target = rand_binary(rng, &[3, 3]);
    let gamma = rng::uniform(rng, 0.5, 3.0);
    check_scalar_fn(
        &[logits],
        move |tape, v| {
            let probs = tape.sigmoid(&v[0])?;
            let student = crate::triadic::MaskBundle {
                logits: vec![v[0].clone()],
                probs: vec![probs],
                bins: vec![target.clone()],
            };
            let teacher = const_bundle_of(vec![target.clone()]);
            crate::triadic::focal_st_loss(tape, &student, &teacher, gamma)
        },
        DEFAULT_H,
    )
}

fn check_dice_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = rand_tensor(rng, &[3, 4], -1.5, 1.5);
    let target = rand_binary(rng, &[3, 4]);
    check_scalar_fn(
        &[logits],
        move |tape, v| {
            let probs = tape.sigmoid(&v[0])?;
            crate::triadic::dice_loss(tape, &[probs], &[target.clone()], 1e-6)
        },
        DEFAULT_H,
    )
}

fn check_anchor_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s_logits = rand_tensor(rng, &[3, 3], -1.5, 1.5);
    let t_probs = rand_tensor(rng, &[3, 3], 0.1, 0.9);
    let a_target = rand_binary(rng, &[3, 3]);
    check_scalar_fn(
        &[s_logits],
        move |tape, v| {
            let probs = tape.sigmoid(&v[0])?;
            let student = crate::triadic::MaskBundle {
                logits: vec![v[0].clone()],
                probs: vec![probs],
                bins: vec![a_target.clone()],
            };
            let teacher = const_bundle_of(vec![t_probs.clone()]);
            let anchor = const_bundle_of(vec![a_target.clone()]);
            crate::triadic::anchor_loss(tape, &student, &teacher, &anchor, 0.5, 0.5)
        },
        DEFAULT_H,
    )
}

fn check_gcl_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    // Differentiates through normalization, pooling, and the contrastive
    // objective with respect to the student feature map.
    let (d, h, w) = (3, 2, 4);
    let features = rand_tensor(rng, &[d, h, w], -1.0, 1.0);
    let t_feat = rand_tensor(rng, &[d, h, w], -1.0, 1.0);
    let m1 = Tensor::from_vec(vec![h, w], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let m2 = Tensor::from_vec(vec![h, w], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let bg = Tensor::from_vec(vec![h, w], vec![0.0, 0.0, 0.0, 0.0, 0.6, 0.8, 0.4, 0.9]).unwrap();
    let tau = rng::uniform(rng, 0.2, 1.0);
    check_scalar_fn(
        &[features],
        move |tape, v| {
            let s_norm = crate::gcl::l2_normalize_locations(tape, &v[0])?;
            let t_norm = crate::gcl::l2_normalize_locations(tape, &t_feat.detach())?;
            let s = crate::gcl::prototype_pool(tape, &s_norm, &[m1.clone(), m2.clone()], &bg)?;
            let t = crate::gcl::prototype_pool(tape, &t_norm, &[m1.clone(), m2.clone()], &bg)?;
            let (loss, _) = crate::gcl::gcl_loss(tape, &s, &t, tau)?;
            Ok(loss)
        },
        DEFAULT_H,
    )
}

fn check_stage2_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let logits = rand_tensor(rng, &[4, 4], -1.5, 1.5);
    let target = rand_binary(rng, &[4, 4]);
    let t = rng::uniform(rng, 0.0, 1.0);
    check_scalar_fn(
        &[logits],
        move |tape, v| {
            let p = tape.sigmoid(&v[0])?;
            crate::msfa::stage2_loss(tape, &p, &target, t)
        },
        DEFAULT_H,
    )
}

/// Primitive-level sweep. `configs` is the number of random configurations
/// per operation.
pub fn primitive_suite(seed: u64, configs: usize, tol: f64) -> Result<SuiteReport> {
    let entries: &[(&str, CheckFn)] = &[
        ("add", check_add),
        ("sub", check_sub),
        ("mul", check_mul),
        ("mul_scalar_broadcast", check_mul_scalar_broadcast),
        ("div", check_div),
        ("unary_smooth_chain", check_unary_smooth),
        ("log_eps", check_log_eps),
        ("relu", check_relu),
        ("abs", check_abs),
        ("powf", check_powf),
        ("reduce_sum_mean", check_reduce),
        ("gap", check_gap),
        ("linear", check_linear),
        ("conv2d", check_conv2d),
        ("fft2", check_fft_roundtrip_path),
        ("ifft2", check_ifft_path),
        ("movement_chain", check_movement),
        ("broadcast_trailing", check_broadcast_trailing),
        ("softmax_lastdim", check_softmax),
        ("upsample_avgpool", check_resample),
        ("patchify", check_patchify),
        ("random_composite_depth6", check_composite),
    ];
    let mut ops = Vec::new();
    for (name, f) in entries {
        ops.push(run_entry(name, seed, configs, tol, *f)?);
    }
    Ok(SuiteReport { tol, ops })
}

/// The complete sweep: every primitive plus the composed forwards and loss
/// functions the pipeline trains with.
pub fn full_suite(seed: u64, configs: usize, tol: f64) -> Result<SuiteReport> {
    let mut report = primitive_suite(seed, configs, tol)?;
    let extra: &[(&str, CheckFn)] = &[
        ("fora_forward", check_fora_forward),
        ("msfa_forward", check_msfa_forward),
        ("loss_focal", check_focal_loss),
        ("loss_dice", check_dice_loss),
        ("loss_anchor", check_anchor_loss),
        ("loss_gcl", check_gcl_loss),
        ("loss_stage2", check_stage2_loss),
    ];
    for (name, f) in extra {
        report.ops.push(run_entry(name, seed, configs, tol, *f)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_fd_checks() {
        let report = primitive_suite(42, 8, DEFAULT_TOL).unwrap();
        assert!(report.all_pass(), "\n{}", report.render());
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        // The comparator must catch a wrong analytic gradient.
        let a = 1.0;
        let fd = 1.0 + 0.1;
        assert!(rel_err(a, fd) > DEFAULT_TOL);
        // And a correct one must pass.
        assert!(rel_err(1.0, 1.0 + 1e-9) < DEFAULT_TOL);
    }

    #[test]
    fn fd_catches_wrong_forward_consistency() {
        // A function whose "gradient" path deliberately disagrees with its
        // value path: f uses x^2 forward, but we check against the gradient
        // of x^3 by corrupting the analytic side.
        let x = Tensor::from_vec(vec![1], vec![0.7]).unwrap();
        let err = check_scalar_fn(&[x], |t, v| {
            let y = t.mul(&v[0], &v[0])?;
            t.sum_all(&y)
        }, DEFAULT_H)
        .unwrap();
        assert!(err < DEFAULT_TOL);
    }
}

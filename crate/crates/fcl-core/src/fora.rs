//! Frequency-aware low-rank adaptation.
//!
//! A frozen base projection is augmented by a rank-r residual path whose
//! encoded tokens are reshaped onto the encoder's patch grid, enhanced by
//! multi-scale spatial convolutions, modulated in the Fourier domain by a
//! shared real kernel on the real and imaginary planes, and decoded back
//! to the output width.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::{ComplexTensor, Tape, Tensor};

/// Frozen base projection plus trainable rank-r encoder/decoder pair.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    /// Frozen base weight, `[b, a]`.
    pub w0: Tensor,
    /// Trainable encoder, `[r, a]`.
    pub we: Tensor,
    /// Trainable decoder, `[b, r]`.
    pub wd: Tensor,
    /// Patch-grid dims the tokens reshape onto.
    pub grid: (usize, usize),
}

impl LowRankAdapter {
    pub fn new(w0: Tensor, we: Tensor, wd: Tensor, grid: (usize, usize)) -> Result<LowRankAdapter> {
        let (b, a) = match w0.shape() {
            [b, a] => (*b, *a),
            s => return Err(CoreError::shape("lora", format!("w0 must be [b,a], got {s:?}"))),
        };
        let r = match we.shape() {
            [r, wa] if *wa == a => *r,
            s => return Err(CoreError::shape("lora", format!("we must be [r,{a}], got {s:?}"))),
        };
        if wd.shape() != [b, r] {
            return Err(CoreError::shape(
                "lora",
                format!("wd must be [{b},{r}], got {:?}", wd.shape()),
            ));
        }
        if r == 0 || r > a.min(b) / 2 {
            return Err(CoreError::Invalid(format!(
                "rank {r} must satisfy 1 <= r <= min(a,b)/2 = {}",
                a.min(b) / 2
            )));
        }
        Ok(LowRankAdapter { w0, we, wd, grid })
    }

    pub fn rank(&self) -> usize {
        self.we.shape()[0]
    }
}

/// Multi-scale spatial enhancement kernels, each `r -> r`, bias-free.
#[derive(Debug, Clone)]
pub struct SpatialEnhancer {
    pub k1: Tensor,
    pub k3: Tensor,
    pub k5: Tensor,
}

impl SpatialEnhancer {
    pub fn new(k1: Tensor, k3: Tensor, k5: Tensor) -> Result<SpatialEnhancer> {
        for (k, sz) in [(&k1, 1usize), (&k3, 3), (&k5, 5)] {
            match k.shape() {
                [co, ci, kh, kw] if co == ci && *kh == sz && *kw == sz => {}
                s => {
                    return Err(CoreError::shape(
                        "spatial_enhancer",
                        format!("kernel must be [r,r,{sz},{sz}], got {s:?}"),
                    ))
                }
            }
        }
        if k1.shape()[0] != k3.shape()[0] || k3.shape()[0] != k5.shape()[0] {
            return Err(CoreError::shape("spatial_enhancer", "kernels disagree on r"));
        }
        Ok(SpatialEnhancer { k1, k3, k5 })
    }
}

/// Frequency-domain kernel: one real 3x3 `r -> r` conv applied identically
/// to the real and imaginary planes of the spectrum.
#[derive(Debug, Clone)]
pub struct FrequencyModulator {
    pub kernel: Tensor,
}

impl FrequencyModulator {
    pub fn new(kernel: Tensor) -> Result<FrequencyModulator> {
        match kernel.shape() {
            [co, ci, 3, 3] if co == ci => Ok(FrequencyModulator { kernel }),
            s => Err(CoreError::shape(
                "frequency_modulator",
                format!("kernel must be [r,r,3,3], got {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fora {
    pub adapter: LowRankAdapter,
    pub enhancer: SpatialEnhancer,
    pub modulator: FrequencyModulator,
}

/// Plain low-rank forward: `W0 x + Wd We x` over tokens `[T, a]`.
pub fn lora_forward(tape: &Tape, adapter: &LowRankAdapter, x: &Tensor) -> Result<Tensor> {
    check_tokens(adapter, x)?;
    let base = tape.linear(x, &adapter.w0, None)?;
    let enc = tape.linear(x, &adapter.we, None)?;
    let dec = tape.linear(&enc, &adapter.wd, None)?;
    tape.add(&base, &dec)
}

/// `(phi1(F) + phi3(F) + phi5(F)) / 3 + F` on `[r, Hg, Wg]`.
pub fn spatial_enhance(tape: &Tape, enh: &SpatialEnhancer, f: &Tensor) -> Result<Tensor> {
    let c1 = tape.conv2d(f, &enh.k1, None)?;
    let c3 = tape.conv2d(f, &enh.k3, None)?;
    let c5 = tape.conv2d(f, &enh.k5, None)?;
    let sum = tape.add(&tape.add(&c1, &c3)?, &c5)?;
    let avg = tape.mul_scalar(&sum, 1.0 / 3.0)?;
    tape.add(&avg, f)
}

/// `Re(IFFT(phi3x3(FFT(F))))` with the kernel shared across planes.
pub fn freq_modulate(tape: &Tape, modu: &FrequencyModulator, f: &Tensor) -> Result<Tensor> {
    let spec = tape.fft2(f)?;
    let re = tape.conv2d(&spec.re, &modu.kernel, None)?;
    let im = tape.conv2d(&spec.im, &modu.kernel, None)?;
    let back = tape.ifft2(&ComplexTensor::new(re, im)?)?;
    Ok(back.re)
}

/// Full forward: `W0 x + Wd flatten(S_fre(S_spa(grid(We x))))`. The spatial
/// stage runs before the frequency stage.
pub fn fora_forward(tape: &Tape, fora: &Fora, x: &Tensor) -> Result<Tensor> {
    check_tokens(&fora.adapter, x)?;
    let (hg, wg) = fora.adapter.grid;
    let r = fora.adapter.rank();
    let base = tape.linear(x, &fora.adapter.w0, None)?;
    let enc = tape.linear(x, &fora.adapter.we, None)?; // [T, r]
    let grid = tape.reshape(&tape.transpose2d(&enc)?, vec![r, hg, wg])?;
    let spa = spatial_enhance(tape, &fora.enhancer, &grid)?;
    let fre = freq_modulate(tape, &fora.modulator, &spa)?;
    let tokens = tape.transpose2d(&tape.reshape(&fre, vec![r, hg * wg])?)?; // [T, r]
    let dec = tape.linear(&tokens, &fora.wd_ref(), None)?;
    tape.add(&base, &dec)
}

impl Fora {
    fn wd_ref(&self) -> Tensor {
        self.adapter.wd.clone()
    }
}

fn check_tokens(adapter: &LowRankAdapter, x: &Tensor) -> Result<()> {
    let (hg, wg) = adapter.grid;
    match x.shape() {
        [t, a] if *a == adapter.w0.shape()[1] && *t == hg * wg => Ok(()),
        s => Err(CoreError::shape(
            "fora",
            format!(
                "tokens {s:?} must be [{}x{}={}, {}]",
                hg,
                wg,
                hg * wg,
                adapter.w0.shape()[1]
            ),
        )),
    }
}

/// Centered per-channel delta kernel `[r, r, k, k]` (identity convolution).
pub fn delta_kernel(r: usize, k: usize) -> Tensor {
    let mut data = vec![0.0; r * r * k * k];
    let mid = k / 2;
    for c in 0..r {
        data[((c * r + c) * k + mid) * k + mid] = 1.0;
    }
    Tensor::from_vec(vec![r, r, k, k], data).unwrap()
}

/// Freshly initialized FoRA parameter tensors: the encoder is small
/// Gaussian, the decoder zero, enhancer kernels zero, and the modulator a
/// centered delta, so the adapted layer starts exactly at the base layer.
pub struct ForaInit {
    pub we: Tensor,
    pub wd: Tensor,
    pub k1: Tensor,
    pub k3: Tensor,
    pub k5: Tensor,
    pub kf: Tensor,
}

pub fn init_fora(rng: &mut ChaCha8Rng, a: usize, b: usize, r: usize) -> ForaInit {
    let we_data: Vec<f64> = (0..r * a).map(|_| 0.02 * rng::normal(rng)).collect();
    ForaInit {
        we: Tensor::from_vec(vec![r, a], we_data).unwrap(),
        wd: Tensor::zeros(vec![b, r]),
        k1: Tensor::zeros(vec![r, r, 1, 1]),
        k3: Tensor::zeros(vec![r, r, 3, 3]),
        k5: Tensor::zeros(vec![r, r, 5, 5]),
        kf: delta_kernel(r, 3),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_scalar_fn, rand_tensor, DEFAULT_H, DEFAULT_TOL};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::from_vec(vec![n, n], d).unwrap()
    }

    #[test]
    fn lora_zero_encoder_is_base() {
        let tape = Tape::new();
        let adapter = LowRankAdapter::new(
            t(&[2, 2], &[0.3, -0.1, 0.7, 0.2]),
            Tensor::zeros(vec![1, 2]),
            t(&[2, 1], &[0.5, 0.5]),
            (1, 1),
        )
        .unwrap();
        let x = t(&[1, 2], &[3.0, 4.0]);
        let base = tape.linear(&x, &adapter.w0, None).unwrap();
        let y = lora_forward(&tape, &adapter, &x).unwrap();
        assert_eq!(y.data(), base.data());
    }

    #[test]
    fn lora_hand_example() {
        // a=b=2, W0=I, Wd=[[1],[0]], We=[[0,1]], x=(3,4) -> (7,4).
        let tape = Tape::new();
        let adapter = LowRankAdapter::new(
            eye(2),
            t(&[1, 2], &[0.0, 1.0]),
            t(&[2, 1], &[1.0, 0.0]),
            (1, 1),
        )
        .unwrap();
        let x = t(&[1, 2], &[3.0, 4.0]);
        let y = lora_forward(&tape, &adapter, &x).unwrap();
        assert_eq!(y.data(), &[7.0, 4.0]);
    }

    #[test]
    fn lora_zero_base_is_low_rank_path() {
        let tape = Tape::new();
        let adapter = LowRankAdapter::new(
            Tensor::zeros(vec![2, 2]),
            t(&[1, 2], &[1.0, 1.0]),
            t(&[2, 1], &[2.0, -1.0]),
            (1, 1),
        )
        .unwrap();
        let x = t(&[1, 2], &[3.0, 4.0]);
        let y = lora_forward(&tape, &adapter, &x).unwrap();
        assert_eq!(y.data(), &[14.0, -7.0]);
    }

    #[test]
    fn rank_bound_enforced() {
        assert!(LowRankAdapter::new(
            eye(4),
            Tensor::zeros(vec![3, 4]),
            Tensor::zeros(vec![4, 3]),
            (1, 1)
        )
        .is_err());
    }

    #[test]
    fn spatial_enhance_configurations() {
        let tape = Tape::new();
        let r = 2;
        let f = rand_tensor(&mut crate::rng::stream(3, "se"), &[r, 4, 4], -1.0, 1.0);

        // All kernels zero: residual only.
        let zero = SpatialEnhancer::new(
            Tensor::zeros(vec![r, r, 1, 1]),
            Tensor::zeros(vec![r, r, 3, 3]),
            Tensor::zeros(vec![r, r, 5, 5]),
        )
        .unwrap();
        let y = spatial_enhance(&tape, &zero, &f).unwrap();
        assert!(y.max_abs_diff(&f) < 1e-15);

        // phi1 identity, others zero: (4/3) F.
        let enh = SpatialEnhancer::new(
            delta_kernel(r, 1),
            Tensor::zeros(vec![r, r, 3, 3]),
            Tensor::zeros(vec![r, r, 5, 5]),
        )
        .unwrap();
        let y = spatial_enhance(&tape, &enh, &f).unwrap();
        let want = tape.mul_scalar(&f, 4.0 / 3.0).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);

        // All identity: 2F.
        let enh = SpatialEnhancer::new(delta_kernel(r, 1), delta_kernel(r, 3), delta_kernel(r, 5)).unwrap();
        let y = spatial_enhance(&tape, &enh, &f).unwrap();
        let want = tape.mul_scalar(&f, 2.0).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn freq_modulate_configurations() {
        let tape = Tape::new();
        let r = 2;
        let f = rand_tensor(&mut crate::rng::stream(5, "fm"), &[r, 4, 6], -1.0, 1.0);

        // Delta kernel: identity to 1e-9.
        let modu = FrequencyModulator::new(delta_kernel(r, 3)).unwrap();
        let y = freq_modulate(&tape, &modu, &f).unwrap();
        assert!(y.max_abs_diff(&f) < 1e-9);

        // Zero kernel: zero output.
        let modu = FrequencyModulator::new(Tensor::zeros(vec![r, r, 3, 3])).unwrap();
        let y = freq_modulate(&tape, &modu, &f).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-15));

        // 2x delta: doubled.
        let two = {
            let d = delta_kernel(r, 3);
            let data: Vec<f64> = d.data().iter().map(|&v| 2.0 * v).collect();
            Tensor::from_vec(vec![r, r, 3, 3], data).unwrap()
        };
        let modu = FrequencyModulator::new(two).unwrap();
        let y = freq_modulate(&tape, &modu, &f).unwrap();
        let want = tape.mul_scalar(&f, 2.0).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-9);
    }

    fn small_fora(seed: u64) -> (Fora, Tensor) {
        let mut r = crate::rng::stream(seed, "fora");
        let (a, b, rank, hg, wg) = (6, 5, 2, 3, 4);
        let adapter = LowRankAdapter::new(
            rand_tensor(&mut r, &[b, a], -0.5, 0.5),
            rand_tensor(&mut r, &[rank, a], -0.5, 0.5),
            rand_tensor(&mut r, &[b, rank], -0.5, 0.5),
            (hg, wg),
        )
        .unwrap();
        let enhancer = SpatialEnhancer::new(
            rand_tensor(&mut r, &[rank, rank, 1, 1], -0.4, 0.4),
            rand_tensor(&mut r, &[rank, rank, 3, 3], -0.4, 0.4),
            rand_tensor(&mut r, &[rank, rank, 5, 5], -0.4, 0.4),
        )
        .unwrap();
        let modulator = FrequencyModulator::new(rand_tensor(&mut r, &[rank, rank, 3, 3], -0.4, 0.4)).unwrap();
        let x = rand_tensor(&mut r, &[hg * wg, a], -1.0, 1.0);
        (Fora { adapter, enhancer, modulator }, x)
    }

    #[test]
    fn identity_configured_fora_reduces_to_lora() {
        for seed in 0..50 {
            let (mut fora, x) = small_fora(seed);
            let r = fora.adapter.rank();
            fora.enhancer = SpatialEnhancer::new(
                Tensor::zeros(vec![r, r, 1, 1]),
                Tensor::zeros(vec![r, r, 3, 3]),
                Tensor::zeros(vec![r, r, 5, 5]),
            )
            .unwrap();
            fora.modulator = FrequencyModulator::new(delta_kernel(r, 3)).unwrap();
            let tape = Tape::new();
            let full = fora_forward(&tape, &fora, &x).unwrap();
            let plain = lora_forward(&tape, &fora.adapter, &x).unwrap();
            assert!(full.max_abs_diff(&plain) < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn zero_encoder_yields_base_projection() {
        let (mut fora, x) = small_fora(7);
        let r = fora.adapter.rank();
        let a = fora.adapter.w0.shape()[1];
        fora.adapter.we = Tensor::zeros(vec![r, a]);
        let tape = Tape::new();
        let y = fora_forward(&tape, &fora, &x).unwrap();
        let base = tape.linear(&x, &fora.adapter.w0, None).unwrap();
        assert!(y.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn low_rank_path_linear_in_encoder_scale() {
        // Scaling We by alpha scales (fora - W0 x) by alpha: every stage in
        // the residual path is linear.
        let (fora, x) = small_fora(11);
        let tape = Tape::new();
        let base = tape.linear(&x, &fora.adapter.w0, None).unwrap();
        let y1 = fora_forward(&tape, &fora, &x).unwrap();
        let resid1 = tape.sub(&y1, &base).unwrap();

        let alpha = 2.5;
        let mut scaled = fora.clone();
        scaled.adapter.we = {
            let d: Vec<f64> = fora.adapter.we.data().iter().map(|&v| alpha * v).collect();
            Tensor::from_vec(fora.adapter.we.shape().to_vec(), d).unwrap()
        };
        let y2 = fora_forward(&tape, &scaled, &x).unwrap();
        let resid2 = tape.sub(&y2, &base).unwrap();
        let want = tape.mul_scalar(&resid1, alpha).unwrap();
        assert!(resid2.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn fora_gradients_match_finite_differences() {
        let (fora, x) = small_fora(13);
        let grid = fora.adapter.grid;
        let inputs = vec![
            x,
            fora.adapter.w0.clone(),
            fora.adapter.we.clone(),
            fora.adapter.wd.clone(),
            fora.enhancer.k1.clone(),
            fora.enhancer.k3.clone(),
            fora.enhancer.k5.clone(),
            fora.modulator.kernel.clone(),
        ];
        let err = check_scalar_fn(
            &inputs,
            |tape, v| {
                let fora = Fora {
                    adapter: LowRankAdapter::new(v[1].clone(), v[2].clone(), v[3].clone(), grid)?,
                    enhancer: SpatialEnhancer::new(v[4].clone(), v[5].clone(), v[6].clone())?,
                    modulator: FrequencyModulator::new(v[7].clone())?,
                };
                let y = fora_forward(tape, &fora, &v[0])?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            DEFAULT_H,
        )
        .unwrap();
        assert!(err <= DEFAULT_TOL, "max rel err {err}");
    }

    #[test]
    fn init_starts_at_base() {
        let mut r = crate::rng::stream(1, "init");
        let init = init_fora(&mut r, 8, 8, 2);
        let adapter = LowRankAdapter::new(eye(8), init.we, init.wd, (2, 2)).unwrap();
        let enhancer = SpatialEnhancer::new(init.k1, init.k3, init.k5).unwrap();
        let modulator = FrequencyModulator::new(init.kf).unwrap();
        let fora = Fora { adapter, enhancer, modulator };
        let x = rand_tensor(&mut r, &[4, 8], -1.0, 1.0);
        let tape = Tape::new();
        let y = fora_forward(&tape, &fora, &x).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-9);
    }
}

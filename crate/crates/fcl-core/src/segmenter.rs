//! Compact prompt-conditioned encoder-decoder used by stage 1.
//!
//! A 4x4 patch embedding feeds two pre-norm self-attention blocks whose
//! query and value projections carry FoRA adapters; the frozen backbone
//! plus trainable adapters and conv decoder mirror the role of a large
//! promptable segmentation model adapted with low-rank updates. The
//! decoder consumes the token grid concatenated with one rasterized
//! prompt-box channel and emits a logit map per prompt at image
//! resolution. The decoder init carries a positive pathway from the box
//! channel, so the untrained model already responds to its prompt the way
//! a pretrained promptable model would.

use rand_chacha::ChaCha8Rng;

use crate::data::BBox;
use crate::error::{CoreError, Result};
use crate::fora::{self, Fora, FrequencyModulator, LowRankAdapter, SpatialEnhancer};
use crate::params::{BoundParams, ParamSet};
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub const N_BLOCKS: usize = 2;
const DEC_C1: usize = 16;
const DEC_C2: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct SegmenterDims {
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    pub rank: usize,
}

impl SegmenterDims {
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Segmenter {
    pub dims: SegmenterDims,
}

impl Segmenter {
    pub fn new(dims: SegmenterDims) -> Result<Segmenter> {
        if dims.patch != 4 {
            return Err(CoreError::Invalid(
                "the decoder's two 2x upsampling stages require patch_size = 4".into(),
            ));
        }
        if dims.image % dims.patch != 0 {
            return Err(CoreError::Invalid("patch size must divide image size".into()));
        }
        if dims.rank == 0 || dims.rank > dims.dim / 2 {
            return Err(CoreError::Invalid("rank must satisfy 1 <= r <= dim/2".into()));
        }
        Ok(Segmenter { dims })
    }

    /// Only the adapters and the mask decoder train; the backbone stays
    /// frozen at its initialization, like the base model it stands in for.
    pub fn is_trainable(name: &str) -> bool {
        name.contains(".fora.") || name.starts_with("dec.")
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let d = self.dims.dim;
        let p = self.dims.patch;
        let t = self.dims.tokens();
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, "segmenter/init");

        params.insert("embed.w", xavier(&mut r, d, 3 * p * p));
        params.insert("embed.b", Tensor::zeros(vec![d]));
        params.insert("pos", gaussian(&mut r, vec![t, d], 0.02));

        for blk in 0..N_BLOCKS {
            for proj in ["q", "v"] {
                params.insert(format!("blk{blk}.{proj}.w0"), xavier(&mut r, d, d));
                let init = fora::init_fora(&mut r, d, d, self.dims.rank);
                params.insert(format!("blk{blk}.{proj}.fora.we"), init.we);
                params.insert(format!("blk{blk}.{proj}.fora.wd"), init.wd);
                params.insert(format!("blk{blk}.{proj}.fora.k1"), init.k1);
                params.insert(format!("blk{blk}.{proj}.fora.k3"), init.k3);
                params.insert(format!("blk{blk}.{proj}.fora.k5"), init.k5);
                params.insert(format!("blk{blk}.{proj}.fora.kf"), init.kf);
            }
            params.insert(format!("blk{blk}.k.w"), xavier(&mut r, d, d));
            params.insert(format!("blk{blk}.o.w"), xavier(&mut r, d, d));
            params.insert(format!("blk{blk}.mlp.w1"), xavier(&mut r, 2 * d, d));
            params.insert(format!("blk{blk}.mlp.b1"), Tensor::zeros(vec![2 * d]));
            params.insert(format!("blk{blk}.mlp.w2"), xavier(&mut r, d, 2 * d));
            params.insert(format!("blk{blk}.mlp.b2"), Tensor::zeros(vec![d]));
        }

        // Decoder with a deliberate positive path from the prompt channel
        // (input plane index d) through feature plane 0 to the logit.
        let mut c1 = kaiming_conv(&mut r, DEC_C1, d + 1, 3, 0.3);
        set_kernel_tap(&mut c1, d + 1, 3, 0, d, 2.0);
        params.insert("dec.c1.w", c1);
        params.insert("dec.c1.b", Tensor::zeros(vec![DEC_C1]));

        let mut c2 = kaiming_conv(&mut r, DEC_C2, DEC_C1, 3, 0.3);
        set_kernel_tap(&mut c2, DEC_C1, 3, 0, 0, 2.0);
        params.insert("dec.c2.w", c2);
        params.insert("dec.c2.b", Tensor::zeros(vec![DEC_C2]));

        let mut c3 = kaiming_conv(&mut r, 1, DEC_C2, 3, 0.3);
        set_kernel_tap(&mut c3, DEC_C2, 3, 0, 0, 1.0);
        params.insert("dec.c3.w", c3);
        params.insert("dec.c3.b", Tensor::from_vec(vec![1], vec![-1.5]).unwrap());

        params
    }

    fn fora_for(&self, bound: &BoundParams, blk: usize, proj: &str) -> Result<Fora> {
        let g = self.dims.grid();
        let key = |leaf: &str| format!("blk{blk}.{proj}.{leaf}");
        Ok(Fora {
            adapter: LowRankAdapter::new(
                bound.get(&key("w0"))?.clone(),
                bound.get(&key("fora.we"))?.clone(),
                bound.get(&key("fora.wd"))?.clone(),
                (g, g),
            )?,
            enhancer: SpatialEnhancer::new(
                bound.get(&key("fora.k1"))?.clone(),
                bound.get(&key("fora.k3"))?.clone(),
                bound.get(&key("fora.k5"))?.clone(),
            )?,
            modulator: FrequencyModulator::new(bound.get(&key("fora.kf"))?.clone())?,
        })
    }

    /// Token-sequence layer norm without affine parameters.
    fn layer_norm(tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let d = *x.shape().last().unwrap();
        let mu = tape.mean_axes(x, &[1])?;
        let bmu = tape.broadcast_trailing(&mu, &[d])?;
        let xc = tape.sub(x, &bmu)?;
        let var = tape.mean_axes(&tape.mul(&xc, &xc)?, &[1])?;
        let istd = tape.powf(&tape.add_scalar(&var, 1e-6)?, -0.5)?;
        let bistd = tape.broadcast_trailing(&istd, &[d])?;
        tape.mul(&xc, &bistd)
    }

    /// Encoder: returns tokens `[T, d]` and the feature map `[d, g, g]`.
    ///
    /// `ablate_fora` swaps every adapted projection for its frozen base.
    pub fn forward_features(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        image: &Tensor,
        ablate_fora: bool,
    ) -> Result<(Tensor, Tensor)> {
        let d = self.dims.dim;
        let g = self.dims.grid();
        if image.shape() != [3, self.dims.image, self.dims.image] {
            return Err(CoreError::shape(
                "segmenter",
                format!("image must be [3,{0},{0}], got {1:?}", self.dims.image, image.shape()),
            ));
        }
        let patches = tape.patchify(image, self.dims.patch)?;
        let mut x = tape.linear(&patches, bound.get("embed.w")?, Some(bound.get("embed.b")?))?;
        x = tape.add(&x, bound.get("pos")?)?;

        let scale = 1.0 / (d as f64).sqrt();
        for blk in 0..N_BLOCKS {
            let xn = Self::layer_norm(tape, &x)?;
            let (q, v) = if ablate_fora {
                (
                    tape.linear(&xn, bound.get(&format!("blk{blk}.q.w0"))?, None)?,
                    tape.linear(&xn, bound.get(&format!("blk{blk}.v.w0"))?, None)?,
                )
            } else {
                (
                    fora::fora_forward(tape, &self.fora_for(bound, blk, "q")?, &xn)?,
                    fora::fora_forward(tape, &self.fora_for(bound, blk, "v")?, &xn)?,
                )
            };
            let k = tape.linear(&xn, bound.get(&format!("blk{blk}.k.w"))?, None)?;
            let scores = tape.mul_scalar(&tape.linear(&q, &k, None)?, scale)?;
            let attn = tape.softmax_lastdim(&scores)?;
            let ctx = tape.linear(&attn, &tape.transpose2d(&v)?, None)?;
            let proj = tape.linear(&ctx, bound.get(&format!("blk{blk}.o.w"))?, None)?;
            x = tape.add(&x, &proj)?;

            let xn2 = Self::layer_norm(tape, &x)?;
            let h = tape.relu(&tape.linear(
                &xn2,
                bound.get(&format!("blk{blk}.mlp.w1"))?,
                Some(bound.get(&format!("blk{blk}.mlp.b1"))?),
            )?)?;
            let h2 = tape.linear(
                &h,
                bound.get(&format!("blk{blk}.mlp.w2"))?,
                Some(bound.get(&format!("blk{blk}.mlp.b2"))?),
            )?;
            x = tape.add(&x, &h2)?;
        }
        let fmap = tape.reshape(&tape.transpose2d(&x)?, vec![d, g, g])?;
        Ok((x, fmap))
    }

    /// Fractional coverage of each grid cell by the box, `[1, g, g]`.
    pub fn rasterize_box(&self, b: &BBox) -> Tensor {
        let g = self.dims.grid();
        let p = self.dims.patch as f64;
        let mut data = vec![0.0; g * g];
        for gy in 0..g {
            for gx in 0..g {
                let (top, left) = (gy as f64 * p, gx as f64 * p);
                let (bottom, right) = (top + p, left + p);
                let ov_r = (b.r1 as f64 + 1.0).min(bottom) - (b.r0 as f64).max(top);
                let ov_c = (b.c1 as f64 + 1.0).min(right) - (b.c0 as f64).max(left);
                if ov_r > 0.0 && ov_c > 0.0 {
                    data[gy * g + gx] = (ov_r * ov_c) / (p * p);
                }
            }
        }
        Tensor::from_vec(vec![1, g, g], data).unwrap()
    }

    /// Decode one prompt box against a feature map into a `[H, W]` logit map.
    pub fn decode_prompt(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        fmap: &Tensor,
        prompt: &BBox,
    ) -> Result<Tensor> {
        let n = self.dims.image;
        let channel = self.rasterize_box(prompt);
        let dec_in = tape.concat0(fmap, &channel)?;
        let c1 = tape.relu(&tape.conv2d(&dec_in, bound.get("dec.c1.w")?, Some(bound.get("dec.c1.b")?))?)?;
        let u1 = tape.upsample2x(&c1)?;
        let c2 = tape.relu(&tape.conv2d(&u1, bound.get("dec.c2.w")?, Some(bound.get("dec.c2.b")?))?)?;
        let u2 = tape.upsample2x(&c2)?;
        let logits = tape.conv2d(&u2, bound.get("dec.c3.w")?, Some(bound.get("dec.c3.b")?))?;
        tape.reshape(&logits, vec![n, n])
    }

    /// One logit map per prompt box. Errors on an empty prompt list or a
    /// box outside the image bounds.
    pub fn predict_logits(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        image: &Tensor,
        prompts: &[BBox],
        ablate_fora: bool,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        if prompts.is_empty() {
            return Err(CoreError::Invalid("predict requires at least one prompt box".into()));
        }
        let n = self.dims.image;
        for b in prompts {
            if b.r1 >= n || b.c1 >= n {
                return Err(CoreError::Invalid(format!(
                    "prompt box {:?} exceeds image bounds {n}",
                    b
                )));
            }
        }
        let (_tokens, fmap) = self.forward_features(tape, bound, image, ablate_fora)?;
        let logits = prompts
            .iter()
            .map(|b| self.decode_prompt(tape, bound, &fmap, b))
            .collect::<Result<Vec<_>>>()?;
        Ok((logits, fmap))
    }
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

fn kaiming_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize, gain: f64) -> Tensor {
    let std = gain * (2.0 / (cin * k * k) as f64).sqrt();
    gaussian(rng, vec![cout, cin, k, k], std)
}

fn set_kernel_tap(kernel: &mut Tensor, cin: usize, k: usize, co: usize, ci: usize, value: f64) {
    let mut data = kernel.data().to_vec();
    let mid = k / 2;
    data[((co * cin + ci) * k + mid) * k + mid] = value;
    *kernel = Tensor::from_vec(kernel.shape().to_vec(), data).unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> SegmenterDims {
        SegmenterDims { image: 32, patch: 4, dim: 16, rank: 4 }
    }

    fn any_box() -> BBox {
        BBox { r0: 8, c0: 10, r1: 20, c1: 24 }
    }

    #[test]
    fn init_is_deterministic() {
        let seg = Segmenter::new(dims()).unwrap();
        let a = seg.init_params(5);
        let b = seg.init_params(5);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = seg.init_params(6);
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn forward_is_deterministic_and_prompted() {
        let seg = Segmenter::new(dims()).unwrap();
        let params = seg.init_params(3);
        let image = Tensor::full(vec![3, 32, 32], 0.5);
        let run = || {
            let tape = Tape::new();
            let bound = params.bind(&tape, |_| false);
            let (logits, _) = seg
                .predict_logits(&tape, &bound, &image, &[any_box(), any_box()], false)
                .unwrap();
            logits.iter().map(|l| l.data().to_vec()).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        // Duplicate prompts give identical maps.
        assert_eq!(a[0], a[1]);
    }

    #[test]
    fn empty_prompt_list_errors() {
        let seg = Segmenter::new(dims()).unwrap();
        let params = seg.init_params(3);
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let image = Tensor::zeros(vec![3, 32, 32]);
        assert!(seg.predict_logits(&tape, &bound, &image, &[], false).is_err());
    }

    #[test]
    fn out_of_bounds_prompt_errors() {
        let seg = Segmenter::new(dims()).unwrap();
        let params = seg.init_params(3);
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let image = Tensor::zeros(vec![3, 32, 32]);
        let bad = BBox { r0: 0, c0: 0, r1: 32, c1: 5 };
        assert!(seg.predict_logits(&tape, &bound, &image, &[bad], false).is_err());
    }

    #[test]
    fn zero_parameters_give_half_probability() {
        let seg = Segmenter::new(dims()).unwrap();
        let init = seg.init_params(1);
        let mut zeroed = ParamSet::new();
        for (name, t) in init.iter() {
            zeroed.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        let tape = Tape::new();
        let bound = zeroed.bind(&tape, |_| false);
        let image = Tensor::full(vec![3, 32, 32], 0.7);
        let (logits, _) = seg
            .predict_logits(&tape, &bound, &image, &[any_box()], false)
            .unwrap();
        let probs = tape.sigmoid(&logits[0]).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
        let bins = probs.binarize_gt(0.5);
        assert!(bins.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn initial_masks_follow_the_prompt_box() {
        // The decoder's prompt pathway must make the untrained model
        // respond inside the box and stay quiet outside it.
        let seg = Segmenter::new(dims()).unwrap();
        let params = seg.init_params(42);
        let tape = Tape::new();
        let bound = params.bind(&tape, |_| false);
        let image = Tensor::full(vec![3, 32, 32], 0.5);
        let b = any_box();
        let (logits, _) = seg.predict_logits(&tape, &bound, &image, &[b], false).unwrap();
        let prob = tape.sigmoid(&logits[0]).unwrap();
        let bin = prob.binarize_gt(0.5);
        let d = bin.data();
        let mut inside_on = 0.0;
        let mut inside_n = 0.0;
        let mut outside_on = 0.0;
        let mut outside_n = 0.0;
        for r in 0..32 {
            for c in 0..32 {
                // Skip a 3px fuzzy band around the box edge.
                let well_inside = r >= b.r0 + 3 && r + 3 <= b.r1 && c >= b.c0 + 3 && c + 3 <= b.c1;
                let well_outside =
                    r + 3 < b.r0 || r > b.r1 + 3 || c + 3 < b.c0 || c > b.c1 + 3;
                if well_inside {
                    inside_on += d[r * 32 + c];
                    inside_n += 1.0;
                } else if well_outside {
                    outside_on += d[r * 32 + c];
                    outside_n += 1.0;
                }
            }
        }
        assert!(inside_on / inside_n > 0.9, "box interior mostly on");
        assert!(outside_on / outside_n < 0.1, "box exterior mostly off");
    }

    #[test]
    fn box_rasterization_covers_partial_cells() {
        let seg = Segmenter::new(dims()).unwrap();
        let b = BBox { r0: 0, c0: 0, r1: 5, c1: 3 }; // 6 rows, 4 cols
        let m = seg.rasterize_box(&b);
        // Cell (0,0): fully covered.
        assert!((m.data()[0] - 1.0).abs() < 1e-12);
        // Cell (1,0): rows 4..6 of 4..8 covered -> 1/2.
        assert!((m.data()[8] - 0.5).abs() < 1e-12);
        // Cell (0,1): vacancy: cols 4..8 vs box cols 0..=3 -> 0.
        assert_eq!(m.data()[1], 0.0);
    }

    #[test]
    fn trainable_set_is_adapters_and_decoder() {
        assert!(Segmenter::is_trainable("blk0.q.fora.we"));
        assert!(Segmenter::is_trainable("dec.c1.w"));
        assert!(!Segmenter::is_trainable("blk0.q.w0"));
        assert!(!Segmenter::is_trainable("blk0.k.w"));
        assert!(!Segmenter::is_trainable("embed.w"));
        assert!(!Segmenter::is_trainable("pos"));
    }
}

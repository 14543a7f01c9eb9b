//! Raw 2-D discrete Fourier transform kernels.
//!
//! Power-of-two lengths take an iterative radix-2 path; everything else
//! falls back to the O(n^2) direct transform, which is plenty at desk
//! scale. `sign` is the exponent sign: -1 for the forward transform,
//! +1 for the inverse kernel. No normalization is applied here; callers
//! scale by 1/(H*W) where the inverse transform needs it.

use std::f64::consts::PI;

/// In-place 1-D transform of one complex line.
pub fn fft1d(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert_eq!(n, im.len());
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft1d_pow2(re, im, sign);
    } else {
        dft1d_naive(re, im, sign);
    }
}

fn fft1d_pow2(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let (wsin, wcos) = ang.sin_cos();
        let mut start = 0;
        while start < n {
            let mut wr = 1.0;
            let mut wi = 0.0;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let nwr = wr * wcos - wi * wsin;
                wi = wr * wsin + wi * wcos;
                wr = nwr;
            }
            start += len;
        }
        len <<= 1;
    }
}

fn dft1d_naive(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    let base = sign * 2.0 * PI / n as f64;
    for (k, (or, oi)) in out_re.iter_mut().zip(out_im.iter_mut()).enumerate() {
        let mut sr = 0.0;
        let mut si = 0.0;
        for t in 0..n {
            let (s, c) = (base * (k * t) as f64).sin_cos();
            sr += re[t] * c - im[t] * s;
            si += re[t] * s + im[t] * c;
        }
        *or = sr;
        *oi = si;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// In-place unnormalized 2-D transform of one H x W complex plane pair.
pub fn dft2_pair(re: &mut [f64], im: &mut [f64], h: usize, w: usize, sign: f64) {
    debug_assert_eq!(re.len(), h * w);
    // Rows.
    for y in 0..h {
        fft1d(&mut re[y * w..(y + 1) * w], &mut im[y * w..(y + 1) * w], sign);
    }
    // Columns, via gather/scatter.
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        fft1d(&mut cr, &mut ci, sign);
        for y in 0..h {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(h: usize, w: usize) {
        let n = h * w;
        let src: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 101) as f64 * 0.01 - 0.5).collect();
        let mut re = src.clone();
        let mut im = vec![0.0; n];
        dft2_pair(&mut re, &mut im, h, w, -1.0);
        dft2_pair(&mut re, &mut im, h, w, 1.0);
        let scale = 1.0 / n as f64;
        for i in 0..n {
            assert!((re[i] * scale - src[i]).abs() < 1e-10, "{h}x{w} re[{i}]");
            assert!((im[i] * scale).abs() < 1e-10, "{h}x{w} im[{i}]");
        }
    }

    #[test]
    fn roundtrip_pow2_and_odd_sizes() {
        roundtrip(8, 8);
        roundtrip(16, 4);
        roundtrip(5, 7); // exercises the naive path
        roundtrip(6, 8); // mixed
        roundtrip(1, 9);
    }

    #[test]
    fn dc_bin_of_constant_plane() {
        let (h, w) = (4, 6);
        let mut re = vec![2.5; h * w];
        let mut im = vec![0.0; h * w];
        dft2_pair(&mut re, &mut im, h, w, -1.0);
        assert!((re[0] - 2.5 * (h * w) as f64).abs() < 1e-9);
        for i in 1..h * w {
            assert!(re[i].abs() < 1e-9 && im[i].abs() < 1e-9, "bin {i}");
        }
    }

    #[test]
    fn matches_naive_on_pow2() {
        let n = 16;
        let src: Vec<f64> = (0..n).map(|i| (i as f64 * 0.71).sin()).collect();
        let mut r1 = src.clone();
        let mut i1 = vec![0.25; n];
        let mut r2 = r1.clone();
        let mut i2 = i1.clone();
        fft1d_pow2(&mut r1, &mut i1, -1.0);
        dft1d_naive(&mut r2, &mut i2, -1.0);
        for k in 0..n {
            assert!((r1[k] - r2[k]).abs() < 1e-9);
            assert!((i1[k] - i2[k]).abs() < 1e-9);
        }
    }
}

use fcl_core::tensor::{Tape, Tensor};
use std::time::Instant;

fn main() {
    let rows = 256; let a = 32; let b = 256;
    let x = Tensor::from_vec(vec![rows, a], (0..rows*a).map(|i| (i as f64 * 0.001).sin()).collect()).unwrap();
    let w = Tensor::from_vec(vec![b, a], (0..b*a).map(|i| (i as f64 * 0.002).cos()).collect()).unwrap();
    let n = 200u32;
    let tape = Tape::new();
    let t0 = Instant::now();
    for _ in 0..n {
        let y = tape.linear(&x, &w, None).unwrap();
        std::hint::black_box(&y);
    }
    let per = t0.elapsed() / n;
    let flops = 2.0 * rows as f64 * a as f64 * b as f64;
    println!("linear [256,32]x[256,32]: {:?}/iter = {:.2} Gflop/s", per, flops / per.as_secs_f64() / 1e9);

    // conv benchmark: decoder c1: [33,16,16] x [16,33,3,3]
    let x = Tensor::from_vec(vec![33,16,16], (0..33*256).map(|i| (i as f64*0.01).sin()).collect()).unwrap();
    let k = Tensor::from_vec(vec![16,33,3,3], (0..16*33*9).map(|i| (i as f64*0.02).cos()).collect()).unwrap();
    let t0 = Instant::now();
    for _ in 0..n {
        let y = tape.conv2d(&x, &k, None).unwrap();
        std::hint::black_box(&y);
    }
    let per = t0.elapsed() / n;
    let flops = 2.0*16.0*33.0*9.0*256.0;
    println!("conv 33->16 @16x16: {:?}/iter = {:.2} Gflop/s", per, flops/per.as_secs_f64()/1e9);

    // conv at 64x64: [8,64,64] x [1,8,3,3]
    let x = Tensor::from_vec(vec![8,64,64], (0..8*4096).map(|i| (i as f64*0.01).sin()).collect()).unwrap();
    let k = Tensor::from_vec(vec![1,8,3,3], (0..72).map(|i| (i as f64*0.02).cos()).collect()).unwrap();
    let t0 = Instant::now();
    for _ in 0..n {
        let y = tape.conv2d(&x, &k, None).unwrap();
        std::hint::black_box(&y);
    }
    let per = t0.elapsed() / n;
    let flops = 2.0*8.0*9.0*4096.0;
    println!("conv 8->1 @64x64: {:?}/iter = {:.2} Gflop/s", per, flops/per.as_secs_f64()/1e9);
}

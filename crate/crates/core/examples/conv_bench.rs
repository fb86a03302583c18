//! Throughput probe for the convolution kernels at the layer shapes the
//! backbone actually uses. Run with `cargo run --release -p handprime
//! --example conv_bench` and read GMAC/s per layer (one multiply-accumulate
//! counts as one MAC).

use std::time::Instant;

use handprime::kernels::{conv2d_backward, conv2d_forward, ConvShape};

fn fill(v: &mut [f32], seed: u32) {
    let mut state = seed | 1;
    for x in v.iter_mut() {
        state = state.wrapping_mul(1664525).wrapping_add(1013904223);
        *x = (state >> 8) as f32 / (1 << 24) as f32 - 0.5;
    }
}

fn bench_layer(name: &str, n: usize, cin: usize, cout: usize, hw: usize) {
    let s = ConvShape::infer(&[n, cin, hw, hw], &[cout, cin, 3, 3], 1, 1).unwrap();
    let mut x = vec![0f32; n * cin * hw * hw];
    let mut w = vec![0f32; cout * cin * 9];
    let b = vec![0f32; cout];
    fill(&mut x, 7);
    fill(&mut w, 13);

    let macs = (n * cout * hw * hw * cin * 9) as f64;
    let reps = (2e9 / macs).ceil().max(3.0) as usize;

    let t0 = Instant::now();
    let mut sink = 0f32;
    for _ in 0..reps {
        let out = conv2d_forward(&x, &w, &b, &s);
        sink += out[0];
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let d_out = {
        let mut d = vec![0f32; n * cout * hw * hw];
        fill(&mut d, 29);
        d
    };
    let mut dx = vec![0f32; x.len()];
    let mut dw = vec![0f32; w.len()];
    let mut db = vec![0f32; b.len()];
    let t1 = Instant::now();
    for _ in 0..reps {
        conv2d_backward(&x, &w, &d_out, &s, Some(&mut dx), &mut dw, &mut db);
    }
    let bwd = t1.elapsed().as_secs_f64() / reps as f64;
    sink += dx[0] + dw[0];

    println!(
        "{name:10} {cin:3}ch -> {cout:3}ch @{hw}x{hw}  fwd {:7.2} GMAC/s   bwd(2x) {:7.2} GMAC/s   [{sink:.3}]",
        macs / fwd / 1e9,
        2.0 * macs / bwd / 1e9,
    );
}

fn main() {
    let n = 8;
    bench_layer("conv1a", n, 3, 16, 64);
    bench_layer("conv1b", n, 16, 16, 64);
    bench_layer("conv2b", n, 32, 32, 32);
    bench_layer("conv3b", n, 64, 64, 16);
    bench_layer("conv4b", n, 128, 128, 8);
    bench_layer("conv5b", n, 128, 128, 4);
}

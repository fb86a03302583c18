//! Property tests pinning the optimized kernels to slow reference
//! implementations over randomized small geometries.

use proptest::prelude::*;

use handprime::kernels::{conv2d_forward, softmax_channels, upsample_forward, ConvShape, UpShape};
use handprime::reference::{conv2d_naive, upsample_naive};

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize)> {
    // (n, cin, h, w, cout, k, stride, pad)
    (
        1usize..=2,
        1usize..=4,
        3usize..=8,
        3usize..=8,
        1usize..=5,
        prop_oneof![Just(1usize), Just(3usize)],
    )
        .prop_flat_map(|(n, cin, h, w, cout, k)| {
            (
                Just(n),
                Just(cin),
                Just(h),
                Just(w),
                Just(cout),
                Just(k),
                1usize..=2,
                0..=(k - 1).max(1),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// The blocked forward pass must agree with six plain loops bit for bit:
    /// both accumulate each output element in the same fixed order.
    #[test]
    fn conv2d_matches_naive_reference_bitwise(
        (n, cin, h, w, cout, k, stride, pad) in conv_case(),
        seed in 0u64..1_000_000,
    ) {
        let s = ConvShape::infer(&[n, cin, h, w], &[cout, cin, k, k], stride, pad).unwrap();
        let mut state = seed | 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        let x: Vec<f32> = (0..n * cin * h * w).map(|_| next()).collect();
        let wt: Vec<f32> = (0..cout * cin * k * k).map(|_| next()).collect();
        let b: Vec<f32> = (0..cout).map(|_| next()).collect();

        let fast = conv2d_forward(&x, &wt, &b, &s);
        let naive = conv2d_naive(&x, &wt, &b, &s);
        for (i, (f, nv)) in fast.iter().zip(&naive).enumerate() {
            prop_assert_eq!(f.to_bits(), nv.to_bits(), "element {} differs: {} vs {}", i, f, nv);
        }
    }

    /// The transposed-convolution gather agrees with the textbook scatter
    /// formulation up to reassociation rounding.
    #[test]
    fn upsample_matches_naive_scatter(
        n in 1usize..=2,
        cin in 1usize..=3,
        cout in 1usize..=3,
        hw in 1usize..=4,
        factor in prop_oneof![Just(2usize), Just(4usize)],
        seed in 0u64..1_000_000,
    ) {
        let k = 2 * factor;
        let s = UpShape::infer(&[n, cin, hw, hw], &[cin, cout, k, k], factor).unwrap();
        let mut state = seed | 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let x: Vec<f64> = (0..n * cin * hw * hw).map(|_| next()).collect();
        let wt: Vec<f64> = (0..cin * cout * k * k).map(|_| next()).collect();

        let fast = upsample_forward(&x, &wt, &s);
        let naive = upsample_naive(&x, &wt, &s);
        for (f, nv) in fast.iter().zip(&naive) {
            prop_assert!((f - nv).abs() < 1e-12, "{} vs {}", f, nv);
        }
    }

    /// Channel softmax sums to one at every pixel.
    #[test]
    fn softmax_channels_sum_to_one(
        n in 1usize..=2,
        kc in 2usize..=4,
        hw in 1usize..=9,
        seed in 0u64..1_000_000,
    ) {
        let mut state = seed | 1;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f32 / (1u64 << 28) as f32) - 4.0
        };
        let logits: Vec<f32> = (0..n * kc * hw).map(|_| next()).collect();
        let probs = softmax_channels(&logits, n, kc, hw);
        for ni in 0..n {
            for p in 0..hw {
                let sum: f32 = (0..kc).map(|c| probs[ni * kc * hw + c * hw + p]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-6, "pixel sum {}", sum);
            }
        }
    }
}

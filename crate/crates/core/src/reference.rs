//! Slow, obviously correct counterparts to the optimized kernels, plus a
//! finite-difference helper. These exist purely to cross-check: tests compare
//! the fast paths against them instead of trusting either side alone.

use crate::kernels::{ConvShape, UpShape};
use crate::tensor::Scalar;

/// Six nested loops, nothing clever. Accumulates each output element over
/// (kernel row, kernel col, input channel) starting from zero, with padding
/// taps contributing an explicit zero, and adds the bias last. That is the
/// same summation order the fast path uses, so the two must agree bitwise.
pub fn conv2d_naive<T: Scalar>(x: &[T], weight: &[T], bias: &[T], s: &ConvShape) -> Vec<T> {
    let mut out = vec![T::zero(); s.n * s.cout * s.oh * s.ow];
    for n in 0..s.n {
        for co in 0..s.cout {
            for oy in 0..s.oh {
                for ox in 0..s.ow {
                    let mut acc = T::zero();
                    for ky in 0..s.k {
                        for kx in 0..s.k {
                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                            let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                            for ci in 0..s.cin {
                                let xv =
                                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize
                                    {
                                        x[((n * s.cin + ci) * s.h + iy as usize) * s.w
                                            + ix as usize]
                                    } else {
                                        T::zero()
                                    };
                                let wv = weight[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                                acc = acc + wv * xv;
                            }
                        }
                    }
                    out[((n * s.cout + co) * s.oh + oy) * s.ow + ox] = acc + bias[co];
                }
            }
        }
    }
    out
}

/// Transposed convolution in its textbook scatter form: every input pixel
/// throws `weight * value` onto a `k` x `k` output patch. The accumulation
/// order differs from the optimized gather, so comparisons use a tolerance.
pub fn upsample_naive<T: Scalar>(x: &[T], weight: &[T], s: &UpShape) -> Vec<T> {
    let mut out = vec![T::zero(); s.n * s.cout * s.oh * s.ow];
    for n in 0..s.n {
        for ci in 0..s.cin {
            for iy in 0..s.h {
                for ix in 0..s.w {
                    let xv = x[((n * s.cin + ci) * s.h + iy) * s.w + ix];
                    for co in 0..s.cout {
                        for ky in 0..s.k {
                            let oy = (iy * s.factor + ky) as isize - s.pad as isize;
                            if oy < 0 || oy >= s.oh as isize {
                                continue;
                            }
                            for kx in 0..s.k {
                                let ox = (ix * s.factor + kx) as isize - s.pad as isize;
                                if ox < 0 || ox >= s.ow as isize {
                                    continue;
                                }
                                let idx =
                                    ((n * s.cout + co) * s.oh + oy as usize) * s.ow + ox as usize;
                                let wv = weight[((ci * s.cout + co) * s.k + ky) * s.k + kx];
                                out[idx] = out[idx] + wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function at `x`:
/// `g[i] = (f(x + h·e_i) − f(x − h·e_i)) / 2h`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic gradient and a reference,
/// using `max(1, |reference|)` as the denominator so near-zero entries do
/// not blow up the ratio.
pub fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g - w).abs() / w.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compare a tape-computed gradient against central finite differences.
///
/// `build` records a graph over the given inputs (registered in order as
/// tracked parameters) and returns a scalar root buffer. The check runs
/// backward once for the analytic gradients, then re-runs the forward pass
/// with each input coordinate nudged by `±h`, and returns the worst relative
/// error across every coordinate of every input. Callers are responsible for
/// keeping inputs away from kinks and ties (ReLU zeros, pooling near-ties);
/// finite differences are meaningless within `h` of those points.
#[allow(clippy::needless_range_loop)] // `j` addresses probe, input, and analytic alike
pub fn gradcheck<F>(inputs: &[crate::tensor::Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut crate::tape::Tape<f64>, &[crate::tape::BufId]) -> crate::tape::BufId,
{
    let run =
        |tensors: &[crate::tensor::Tensor<f64>]| -> (crate::tape::Tape<f64>, crate::tape::BufId) {
            let mut tape = crate::tape::Tape::new();
            let ids: Vec<_> = tensors.iter().map(|t| tape.param(t)).collect();
            let root = build(&mut tape, &ids);
            assert_eq!(tape.data(root).len(), 1, "gradcheck root must be scalar");
            (tape, root)
        };

    let (mut tape, root) = run(inputs);
    tape.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = (0..inputs.len())
        .map(|i| {
            tape.grad(i)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<crate::tensor::Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let (t_up, r_up) = run(&probe);
            let up = t_up.data(r_up)[0];
            probe[i].data_mut()[j] = orig - h;
            let (t_dn, r_dn) = run(&probe);
            let down = t_dn.data(r_dn)[0];
            probe[i].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[i][j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

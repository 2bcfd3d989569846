//! Naive reference kernels.
//!
//! Straight nested loops with no im2col, no GEMM and no shared code with
//! the optimized kernels. The self-test suite compares the fast paths
//! against these.

use crate::ops::{out_extent, ConvOpts, Padding, PoolOpts, TimeBorder};
use crate::tensor::{Scalar, Tensor};

fn dims5(shape: &[usize]) -> [usize; 5] {
    shape.try_into().expect("rank-5 tensor")
}

/// Direct convolution: one accumulator per output element, summed over
/// `(dt, dh, dw, ci)` in that order.
pub fn conv3d<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: Option<&Tensor<S>>, opts: &ConvOpts) -> Tensor<S> {
    let [n, t, h, wd, cin] = dims5(x.shape());
    let [kt, kh, kw, _, cout] = dims5(w.shape());
    let (ot, pt) = out_extent(t, kt, opts.stride[0], opts.padding).expect("time extent");
    let (oh, ph) = out_extent(h, kh, opts.stride[1], opts.padding).expect("height extent");
    let (ow, pw) = out_extent(wd, kw, opts.stride[2], opts.padding).expect("width extent");
    let mut y = Tensor::zeros(vec![n, ot, oh, ow, cout]);
    for b in 0..n {
        for to in 0..ot {
            for ho in 0..oh {
                for wo in 0..ow {
                    for co in 0..cout {
                        let mut acc = S::zero();
                        for dt in 0..kt {
                            let mut ti = (to * opts.stride[0] + dt) as isize - pt as isize;
                            if ti < 0 || ti >= t as isize {
                                if opts.time_border == TimeBorder::Zero {
                                    continue;
                                }
                                ti = ti.clamp(0, t as isize - 1);
                            }
                            for dh in 0..kh {
                                let hi = (ho * opts.stride[1] + dh) as isize - ph as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for dw in 0..kw {
                                    let wi = (wo * opts.stride[2] + dw) as isize - pw as isize;
                                    if wi < 0 || wi >= wd as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let xv = x.at(&[b, ti as usize, hi as usize, wi as usize, ci]);
                                        let wv = w.at(&[dt, dh, dw, ci, co]);
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        if let Some(bias) = bias {
                            acc += bias.data()[co];
                        }
                        let i = y.offset(&[b, to, ho, wo, co]);
                        y.data_mut()[i] = acc;
                    }
                }
            }
        }
    }
    y
}

/// Windowed maximum, ignoring padded positions.
pub fn maxpool3d<S: Scalar>(x: &Tensor<S>, opts: &PoolOpts) -> Tensor<S> {
    let [n, t, h, w, c] = dims5(x.shape());
    let ext = [t, h, w];
    let mut out = [0; 3];
    let mut pad = [0; 3];
    for a in 0..3 {
        let (o, p) = out_extent(ext[a], opts.window[a], opts.stride[a], opts.padding).expect("pool extent");
        out[a] = o;
        pad[a] = p;
    }
    let mut y = Tensor::zeros(vec![n, out[0], out[1], out[2], c]);
    for b in 0..n {
        for to in 0..out[0] {
            for ho in 0..out[1] {
                for wo in 0..out[2] {
                    for ch in 0..c {
                        let mut best = S::neg_infinity();
                        for dt in 0..opts.window[0] {
                            for dh in 0..opts.window[1] {
                                for dw in 0..opts.window[2] {
                                    let idx = [to * opts.stride[0] + dt, ho * opts.stride[1] + dh, wo * opts.stride[2] + dw];
                                    let inside = (0..3).all(|a| idx[a] >= pad[a] && idx[a] - pad[a] < ext[a]);
                                    if inside {
                                        let v = x.at(&[b, idx[0] - pad[0], idx[1] - pad[1], idx[2] - pad[2], ch]);
                                        if v > best {
                                            best = v;
                                        }
                                    }
                                }
                            }
                        }
                        let i = y.offset(&[b, to, ho, wo, ch]);
                        y.data_mut()[i] = best;
                    }
                }
            }
        }
    }
    y
}

/// Mean over `(T, H, W)` as `[N, C]`.
pub fn avgpool_spacetime<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let [n, t, h, w, c] = dims5(x.shape());
    let mut y = Tensor::zeros(vec![n, c]);
    for b in 0..n {
        for ch in 0..c {
            let mut acc = S::zero();
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        acc += x.at(&[b, ti, hi, wi, ch]);
                    }
                }
            }
            y.data_mut()[b * c + ch] = acc / S::lit((t * h * w) as f64);
        }
    }
    y
}

/// `W x + b` for a square or rectangular `W`.
pub fn matvec<S: Scalar>(w: &Tensor<S>, x: &[S], b: Option<&[S]>) -> Vec<S> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|i| {
            let mut acc = S::zero();
            for j in 0..n {
                acc += w.at(&[i, j]) * x[j];
            }
            match b {
                Some(b) => acc + b[i],
                None => acc,
            }
        })
        .collect()
}

/// Per `(batch, channel)` gate values `σ(W · mean(x) + b)` as `[N, C]`.
pub fn gate_values<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let pooled = avgpool_spacetime(x);
    let [n, c] = [pooled.shape()[0], pooled.shape()[1]];
    let mut out = Vec::with_capacity(n * c);
    for row in pooled.data().chunks(c) {
        for z in matvec(w, row, Some(b.data())) {
            out.push(S::one() / (S::one() + (-z).exp()));
        }
    }
    Tensor::new(vec![n, c], out).expect("gate shape")
}

/// Gated features `gate[n, c] · x[n, t, h, w, c]`.
pub fn feature_gate<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let gates = gate_values(x, w, b);
    let [n, t, h, wd, c] = dims5(x.shape());
    let mut y = x.clone();
    for bi in 0..n {
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..wd {
                    for ch in 0..c {
                        let i = y.offset(&[bi, ti, hi, wi, ch]);
                        y.data_mut()[i] = gates.at(&[bi, ch]) * x.data()[i];
                    }
                }
            }
        }
    }
    y
}

/// 2D convolution of one `[H, W, C]` frame with a `[kh, kw, C_in, C_out]`
/// filter under SAME padding and spatial stride.
pub fn conv2d_frame<S: Scalar>(frame: &Tensor<S>, w: &Tensor<S>, stride: [usize; 2]) -> Tensor<S> {
    let (h, wd, cin) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let (oh, ph) = out_extent(h, kh, stride[0], Padding::Same).expect("height extent");
    let (ow, pw) = out_extent(wd, kw, stride[1], Padding::Same).expect("width extent");
    let mut y = Tensor::zeros(vec![oh, ow, cout]);
    for ho in 0..oh {
        for wo in 0..ow {
            for co in 0..cout {
                let mut acc = S::zero();
                for dh in 0..kh {
                    let hi = (ho * stride[0] + dh) as isize - ph as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for dw in 0..kw {
                        let wi = (wo * stride[1] + dw) as isize - pw as isize;
                        if wi < 0 || wi >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += frame.at(&[hi as usize, wi as usize, ci]) * w.at(&[dh, dw, ci, co]);
                        }
                    }
                }
                let i = y.offset(&[ho, wo, co]);
                y.data_mut()[i] = acc;
            }
        }
    }
    y
}

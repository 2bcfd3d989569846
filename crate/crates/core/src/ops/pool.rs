//! Max pooling over space-time windows and global space-time averaging.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::conv::{out_extent, Padding};
use crate::tensor::{video_dims, Scalar, Tensor};

/// Window, stride and padding of a max pool. Padded positions never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolOpts {
    pub window: [usize; 3],
    pub stride: [usize; 3],
    #[serde(default)]
    pub padding: Padding,
}

impl PoolOpts {
    pub fn new(window: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            window,
            stride,
            padding: Padding::Same,
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    /// Output `(T, H, W)` for an input extent, or an error when a window
    /// cannot fit.
    pub fn out_extents(&self, input: [usize; 3]) -> Result<([usize; 3], [usize; 3])> {
        if self.window.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid("maxpool3d", format!("window {:?} and stride {:?} must be positive", self.window, self.stride)));
        }
        let mut out = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            let (o, p) = out_extent(input[a], self.window[a], self.stride[a], self.padding).ok_or_else(|| {
                Error::invalid(
                    "maxpool3d",
                    format!("window {:?} larger than padded input {:?}", self.window, input),
                )
            })?;
            out[a] = o;
            pad[a] = p;
        }
        Ok((out, pad))
    }
}

/// Forward max pool returning the output and, per output element, the flat
/// input index of its maximum.
pub fn maxpool3d_forward<S: Scalar>(x: &Tensor<S>, opts: &PoolOpts) -> Result<(Tensor<S>, Vec<usize>)> {
    let [n, t, h, w, c] = video_dims(x.shape(), "maxpool3d")?;
    let (out, pad) = opts.out_extents([t, h, w])?;
    let [ot, oh, ow] = out;
    let input = [t as isize, h as isize, w as isize];
    let range = |axis: usize, o: usize| {
        let start = (o * opts.stride[axis]) as isize - pad[axis] as isize;
        let lo = start.max(0);
        let hi = (start + opts.window[axis] as isize).min(input[axis]);
        lo as usize..hi.max(lo) as usize
    };
    let xd = x.data();
    let mut y = Vec::with_capacity(n * ot * oh * ow * c);
    let mut arg = Vec::with_capacity(y.capacity());
    for b in 0..n {
        for to in 0..ot {
            let rt = range(0, to);
            for ho in 0..oh {
                let rh = range(1, ho);
                for wo in 0..ow {
                    let rw = range(2, wo);
                    for ch in 0..c {
                        let mut best: Option<(S, usize)> = None;
                        for ti in rt.clone() {
                            for hi in rh.clone() {
                                for wi in rw.clone() {
                                    let idx = (((b * t + ti) * h + hi) * w + wi) * c + ch;
                                    let v = xd[idx];
                                    // Strict comparison keeps the first maximum in scan order;
                                    // a NaN wins so non-finite values stay visible.
                                    #[allow(clippy::eq_op)]
                                    if best.is_none_or(|(bv, _)| v > bv || (v != v && bv == bv)) {
                                        best = Some((v, idx));
                                    }
                                }
                            }
                        }
                        let (v, idx) = best.ok_or_else(|| Error::invalid("maxpool3d", "window covers no input element"))?;
                        y.push(v);
                        arg.push(idx);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, ot, oh, ow, c], y)?, arg))
}

/// Mean over `(T, H, W)`, giving `[N, C]`.
pub fn avgpool_spacetime_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let [n, _, _, _, c] = video_dims(x.shape(), "avgpool_spacetime")?;
    let pooled = x.sum_to_shape(&[n, 1, 1, 1, c])?;
    let count = S::lit((x.len() / (n * c).max(1)) as f64);
    pooled.map(|v| v / count).reshape(vec![n, c])
}

impl<S: Scalar> Graph<S> {
    pub fn maxpool3d(&mut self, x: Var, opts: &PoolOpts) -> Result<Var> {
        let (value, arg) = maxpool3d_forward(self.value(x), opts)?;
        Ok(self.record(
            value,
            &[x],
            Box::new(move |c| {
                let mut dx = Tensor::zeros(c.inputs[0].shape().to_vec());
                let d = dx.data_mut();
                for (&i, &g) in arg.iter().zip(c.grad.data()) {
                    d[i] += g;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean over `(T, H, W)` of a video tensor, giving `[N, C]`.
    pub fn avgpool_spacetime(&mut self, x: Var) -> Result<Var> {
        let [n, _, _, _, c] = video_dims(self.shape(x), "avgpool_spacetime")?;
        let m = self.reduce_mean(x, &[1, 2, 3])?;
        self.reshape(m, &[n, c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_in_constant_out() {
        let x = Tensor::<f64>::full(vec![1, 4, 5, 5, 2], 3.5);
        let (y, _) = maxpool3d_forward(&x, &PoolOpts::new([3, 3, 3], [2, 2, 2])).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn one_dimensional_case() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 4, 1], vec![1.0, 2.0, 4.0, 3.0]).unwrap();
        let opts = PoolOpts::new([1, 1, 2], [1, 1, 2]).with_padding(Padding::Valid);
        let (y, _) = maxpool3d_forward(&x, &opts).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn ties_route_to_first_in_scan_order() {
        let x = Tensor::<f64>::full(vec![1, 1, 2, 2, 1], 1.0);
        let opts = PoolOpts::new([1, 2, 2], [1, 2, 2]);
        let (_, arg) = maxpool3d_forward(&x, &opts).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn oversized_valid_window_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2, 2, 1]);
        let opts = PoolOpts::new([3, 1, 1], [1, 1, 1]).with_padding(Padding::Valid);
        assert!(maxpool3d_forward(&x, &opts).is_err());
    }

    #[test]
    fn avgpool_constant_and_one_hot() {
        let x = Tensor::<f64>::full(vec![2, 3, 2, 2, 4], -1.25);
        let y = avgpool_spacetime_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| v == -1.25));

        let mut hot = Tensor::<f64>::zeros(vec![1, 3, 2, 2, 1]);
        hot.data_mut()[5] = 1.0;
        let y = avgpool_spacetime_forward(&hot).unwrap();
        assert_eq!(y.data(), &[1.0 / 12.0]);
    }
}

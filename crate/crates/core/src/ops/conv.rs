//! 3D convolution on channels-last video tensors via im2col and GEMM.
//!
//! Weights are laid out `(kt, kh, kw, c_in, c_out)`, which flattens
//! row-major into the `[kt·kh·kw·c_in, c_out]` matrix the GEMM consumes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{video_dims, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// `out = ceil(n / s)`; odd padding totals put the extra element on the
    /// trailing side.
    #[default]
    Same,
    /// No padding; `out = (n - k) / s + 1`.
    Valid,
}

/// How temporal padding positions are filled. Spatial padding is always zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeBorder {
    #[default]
    Zero,
    /// Padding frames repeat the nearest edge frame.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvOpts {
    pub stride: [usize; 3],
    pub padding: Padding,
    pub time_border: TimeBorder,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: [1, 1, 1],
            padding: Padding::Same,
            time_border: TimeBorder::Zero,
        }
    }
}

impl ConvOpts {
    pub fn stride(stride: [usize; 3]) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_time_border(mut self, border: TimeBorder) -> Self {
        self.time_border = border;
        self
    }
}

/// Output extent and leading pad for one axis.
pub fn out_extent(n: usize, k: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    if k == 0 || s == 0 || n == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            Some((out, total / 2))
        }
        Padding::Valid => (n >= k).then(|| ((n - k) / s + 1, 0)),
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Debug)]
pub(crate) struct ConvPlan {
    pub n: usize,
    pub input: [usize; 3],
    pub cin: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
    pub cout: usize,
    pub border: TimeBorder,
}

impl ConvPlan {
    pub fn new(op: &'static str, x: &[usize], w: &[usize], opts: &ConvOpts) -> Result<Self> {
        let [n, t, h, wd, cin] = video_dims(x, op)?;
        let [kt, kh, kw, wcin, cout] = w[..] else {
            return Err(Error::invalid(op, format!("filter must be rank 5 (kt, kh, kw, c_in, c_out), got {w:?}")));
        };
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let kernel = [kt, kh, kw];
        let input = [t, h, wd];
        if kernel.contains(&0) || opts.stride.contains(&0) || cout == 0 {
            return Err(Error::invalid(op, format!("kernel {kernel:?} and stride {:?} must be positive", opts.stride)));
        }
        let mut out = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            let (o, p) = out_extent(input[a], kernel[a], opts.stride[a], opts.padding).ok_or_else(|| {
                Error::invalid(
                    op,
                    format!("input extents {input:?} give an empty output for kernel {kernel:?} under {:?} padding", opts.padding),
                )
            })?;
            out[a] = o;
            pad[a] = p;
        }
        Ok(Self {
            n,
            input,
            cin,
            kernel,
            stride: opts.stride,
            pad,
            out,
            cout,
            border: opts.time_border,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.out[0], self.out[1], self.out[2], self.cout]
    }

    pub fn rows(&self) -> usize {
        self.out.iter().product()
    }

    pub fn kdim(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    fn in_len(&self) -> usize {
        self.input.iter().product::<usize>() * self.cin
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    /// Input index along `axis` feeding output `o` at kernel tap `d`.
    #[inline]
    fn source(&self, axis: usize, o: usize, d: usize) -> Option<usize> {
        let i = (o * self.stride[axis] + d) as isize - self.pad[axis] as isize;
        let n = self.input[axis] as isize;
        if (0..n).contains(&i) {
            Some(i as usize)
        } else if axis == 0 && self.border == TimeBorder::Replicate {
            Some(i.clamp(0, n - 1) as usize)
        } else {
            None
        }
    }

    /// Calls `f(col_offset, input_offset)` for every in-range tap of output
    /// row `r`; out-of-range taps are skipped.
    #[inline]
    fn for_each_tap(&self, r: usize, mut f: impl FnMut(usize, usize)) {
        let [_, ho, wo] = self.out;
        let (ot, oh, ow) = (r / (ho * wo), (r / wo) % ho, r % wo);
        let [kt, kh, kw] = self.kernel;
        let [_, h, w] = self.input;
        for dt in 0..kt {
            let Some(ti) = self.source(0, ot, dt) else { continue };
            for dh in 0..kh {
                let Some(hi) = self.source(1, oh, dh) else { continue };
                for dw in 0..kw {
                    let Some(wi) = self.source(2, ow, dw) else { continue };
                    let col = ((dt * kh + dh) * kw + dw) * self.cin;
                    let src = ((ti * h + hi) * w + wi) * self.cin;
                    f(col, src);
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let k = self.kdim();
        let c = self.cin;
        cols.fill(S::zero());
        for r in 0..self.rows() {
            let row = &mut cols[r * k..(r + 1) * k];
            self.for_each_tap(r, |col, src| row[col..col + c].copy_from_slice(&x[src..src + c]));
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let k = self.kdim();
        let c = self.cin;
        for r in 0..self.rows() {
            let row = &cols[r * k..(r + 1) * k];
            self.for_each_tap(r, |col, src| {
                for (d, &g) in dx[src..src + c].iter_mut().zip(&row[col..col + c]) {
                    *d += g;
                }
            });
        }
    }
}

/// Forward convolution on plain tensors.
pub fn conv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    opts: &ConvOpts,
) -> Result<Tensor<S>> {
    let plan = ConvPlan::new("conv3d", x.shape(), w.shape(), opts)?;
    if let Some(b) = bias {
        if b.shape() != [plan.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                lhs: vec![plan.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(forward_planned(&plan, x.data(), w.data(), bias.map(|b| b.data())))
}

fn forward_planned<S: Scalar>(plan: &ConvPlan, x: &[S], w: &[S], bias: Option<&[S]>) -> Tensor<S> {
    let (rows, k, cout) = (plan.rows(), plan.kdim(), plan.cout);
    let total_rows = if plan.pointwise() { plan.n * rows } else { rows };
    let mut y = vec![S::zero(); plan.n * rows * cout];
    if let Some(b) = bias {
        for chunk in y.chunks_mut(cout) {
            chunk.copy_from_slice(b);
        }
    }
    let beta = S::one();
    if plan.pointwise() {
        S::gemm(total_rows, k, cout, S::one(), x, (k as isize, 1), w, (cout as isize, 1), beta, &mut y, (cout as isize, 1));
    } else {
        let mut cols = vec![S::zero(); rows * k];
        let in_len = plan.in_len();
        for s in 0..plan.n {
            plan.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
            let out = &mut y[s * rows * cout..(s + 1) * rows * cout];
            S::gemm(rows, k, cout, S::one(), &cols, (k as isize, 1), w, (cout as isize, 1), beta, out, (cout as isize, 1));
        }
    }
    Tensor::new(plan.out_shape(), y).expect("planned output shape")
}

/// Input, weight and bias gradients of a planned convolution.
fn backward_planned<S: Scalar>(
    plan: &ConvPlan,
    x: &[S],
    w: &[S],
    g: &[S],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (rows, k, cout) = (plan.rows(), plan.kdim(), plan.cout);
    let mut dx = need_x.then(|| vec![S::zero(); plan.n * plan.in_len()]);
    let mut dw = need_w.then(|| vec![S::zero(); k * cout]);
    if plan.pointwise() {
        let total = plan.n * rows;
        if let Some(dw) = dw.as_mut() {
            // dW[k, cout] = Xᵀ · G
            S::gemm(k, total, cout, S::one(), x, (1, k as isize), g, (cout as isize, 1), S::zero(), dw, (cout as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dX[total, k] = G · Wᵀ
            S::gemm(total, cout, k, S::one(), g, (cout as isize, 1), w, (1, cout as isize), S::zero(), dx, (k as isize, 1));
        }
        return (dx, dw);
    }
    let in_len = plan.in_len();
    let mut cols = vec![S::zero(); rows * k];
    for s in 0..plan.n {
        let gs = &g[s * rows * cout..(s + 1) * rows * cout];
        if let Some(dw) = dw.as_mut() {
            plan.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
            S::gemm(k, rows, cout, S::one(), &cols, (1, k as isize), gs, (cout as isize, 1), S::one(), dw, (cout as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            S::gemm(rows, cout, k, S::one(), gs, (cout as isize, 1), w, (1, cout as isize), S::zero(), &mut cols, (k as isize, 1));
            plan.col2im(&cols, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Convolution weights plus their application settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<S> {
    pub weights: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub opts: ConvOpts,
}

impl<S: Scalar> FilterBank<S> {
    pub fn new(weights: Tensor<S>, bias: Option<Tensor<S>>, opts: ConvOpts) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 5 || s.contains(&0) {
            return Err(Error::invalid("filter bank", format!("weights must be a positive rank-5 shape, got {s:?}")));
        }
        if opts.stride.contains(&0) {
            return Err(Error::invalid("filter bank", "strides must be positive"));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[4]] {
                return Err(Error::ShapeMismatch {
                    op: "filter bank bias",
                    lhs: vec![s[4]],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Self { weights, bias, opts })
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = self.weights.shape();
        [s[0], s[1], s[2]]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[4]
    }

    /// `kt == 1`.
    pub fn is_spatial(&self) -> bool {
        self.kernel()[0] == 1
    }

    /// `kh == kw == 1`.
    pub fn is_temporal(&self) -> bool {
        let [_, kh, kw] = self.kernel();
        kh == 1 && kw == 1
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv3d_forward(x, &self.weights, self.bias.as_ref(), &self.opts)
    }
}

/// Spatial `1×k×k` bank followed by a temporal `kt×1×1` bank.
pub fn sepconv3d_forward<S: Scalar>(
    x: &Tensor<S>,
    spatial: &FilterBank<S>,
    temporal: &FilterBank<S>,
) -> Result<Tensor<S>> {
    check_separable(spatial.weights.shape(), temporal.weights.shape())?;
    temporal.apply(&spatial.apply(x)?)
}

fn check_separable(spatial: &[usize], temporal: &[usize]) -> Result<()> {
    if spatial[0] != 1 {
        return Err(Error::invalid("sepconv3d", format!("spatial filter must have kt = 1, got {spatial:?}")));
    }
    if temporal[1] != 1 || temporal[2] != 1 {
        return Err(Error::invalid("sepconv3d", format!("temporal filter must have kh = kw = 1, got {temporal:?}")));
    }
    if spatial[4] != temporal[3] {
        return Err(Error::ShapeMismatch {
            op: "sepconv3d",
            lhs: spatial.to_vec(),
            rhs: temporal.to_vec(),
        });
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    /// Differentiable 3D convolution of `x: [N, T, H, W, C_in]` with
    /// `w: [kt, kh, kw, C_in, C_out]` and optional `bias: [C_out]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, opts: &ConvOpts) -> Result<Var> {
        let plan = ConvPlan::new("conv3d", self.shape(x), self.shape(w), opts)?;
        if let Some(b) = bias {
            if self.shape(b) != [plan.cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv3d bias",
                    lhs: vec![plan.cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let value = forward_planned(
            &plan,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.record(
            value,
            &parents,
            Box::new(move |c| {
                let (dx, dw) = backward_planned(&plan, c.inputs[0].data(), c.inputs[1].data(), c.grad.data(), c.needs[0], c.needs[1]);
                let mut out = vec![
                    dx.map(|d| Tensor::new(c.inputs[0].shape().to_vec(), d).unwrap()),
                    dw.map(|d| Tensor::new(c.inputs[1].shape().to_vec(), d).unwrap()),
                ];
                if c.inputs.len() == 3 {
                    out.push(c.needs[2].then(|| c.grad.sum_to_shape(&[plan.cout]).unwrap()));
                }
                out
            }),
        ))
    }

    /// Spatial conv then temporal conv; the composition of two [`Graph::conv3d`] calls.
    #[allow(clippy::too_many_arguments)]
    pub fn sepconv3d(
        &mut self,
        x: Var,
        spatial_w: Var,
        spatial_b: Option<Var>,
        spatial_opts: &ConvOpts,
        temporal_w: Var,
        temporal_b: Option<Var>,
        temporal_opts: &ConvOpts,
    ) -> Result<Var> {
        check_separable(self.shape(spatial_w), self.shape(temporal_w))?;
        let mid = self.conv3d(x, spatial_w, spatial_b, spatial_opts)?;
        self.conv3d(mid, temporal_w, temporal_b, temporal_opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn same_extents() {
        assert_eq!(out_extent(7, 3, 2, Padding::Same), Some((4, 1)));
        assert_eq!(out_extent(8, 3, 2, Padding::Same), Some((4, 0)));
        assert_eq!(out_extent(13, 7, 2, Padding::Same), Some((7, 3)));
        assert_eq!(out_extent(4, 2, 2, Padding::Same), Some((2, 0)));
        assert_eq!(out_extent(2, 3, 1, Padding::Valid), None);
        assert_eq!(out_extent(7, 3, 2, Padding::Valid), Some((3, 0)));
    }

    #[test]
    fn identity_pointwise_filter() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 5, 6], 1.0, &mut r);
        let eye = Tensor::from_fn(vec![1, 1, 1, 6, 6], |i| if i % 7 == 0 { 1.0 } else { 0.0 });
        let y = conv3d_forward(&x, &eye, None, &ConvOpts::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2, 2, 3]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 1, 4, 2]);
        assert!(conv3d_forward(&x, &w, None, &ConvOpts::default()).is_err());
    }

    #[test]
    fn valid_padding_rejects_empty_output() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 2, 2, 1]);
        let w = Tensor::<f64>::zeros(vec![3, 1, 1, 1, 1]);
        let opts = ConvOpts::default().with_padding(Padding::Valid);
        assert!(conv3d_forward(&x, &w, None, &opts).is_err());
    }

    #[test]
    fn replicate_border_keeps_constant_time_constant() {
        let frame = Tensor::<f64>::randn(vec![1, 1, 4, 4, 2], 1.0, &mut rng());
        let x = Tensor::from_fn(vec![1, 5, 4, 4, 2], |i| frame.data()[i % 32]);
        let w = Tensor::<f64>::randn(vec![3, 3, 3, 2, 3], 1.0, &mut rng());
        let opts = ConvOpts::default().with_time_border(TimeBorder::Replicate);
        let y = conv3d_forward(&x, &w, None, &opts).unwrap();
        let per_frame = 4 * 4 * 3;
        for t in 1..5 {
            assert_eq!(&y.data()[..per_frame], &y.data()[t * per_frame..(t + 1) * per_frame]);
        }
    }

    #[test]
    fn separable_rejects_wrong_factor_shapes() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 3, 3, 2]);
        let opts = ConvOpts::default();
        let s = FilterBank::new(Tensor::zeros(vec![3, 3, 3, 2, 2]), None, opts).unwrap();
        let t = FilterBank::new(Tensor::zeros(vec![3, 1, 1, 2, 2]), None, opts).unwrap();
        assert!(sepconv3d_forward(&x, &s, &t).is_err());
    }
}

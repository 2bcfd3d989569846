//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Graph`] appends a node holding its value, its
//! parents and a closure that maps the output gradient to input gradients.
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees for one node.
pub(crate) struct BackCtx<'a, S> {
    pub grad: &'a Tensor<S>,
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    /// Whether each input needs a gradient at all.
    pub needs: Vec<bool>,
}

pub(crate) type BackFn<S> = Box<dyn Fn(&BackCtx<'_, S>) -> Vec<Option<Tensor<S>>>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<Var>,
    backward: Option<BackFn<S>>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn record(&mut self, value: Tensor<S>, parents: &[Var], backward: BackFn<S>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. Every node that requires a gradient
    /// and is reachable from `loss` gets one; constants get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].as_ref() else {
                continue;
            };
            let ctx = BackCtx {
                grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let input_grads = back(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: fn(S, S) -> S,
        back: fn(&BackCtx<'_, S>) -> Vec<Option<Tensor<S>>>,
    ) -> Result<Var> {
        let value = self.value(a).broadcast_with(self.value(b), op, f)?;
        Ok(self.record(value, &[a, b], Box::new(back)))
    }

    /// `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |c| {
            vec![
                c.needs[0].then(|| c.grad.sum_to_shape(c.inputs[0].shape()).unwrap()),
                c.needs[1].then(|| c.grad.sum_to_shape(c.inputs[1].shape()).unwrap()),
            ]
        })
    }

    /// `a - b` with broadcasting.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |c| {
            vec![
                c.needs[0].then(|| c.grad.sum_to_shape(c.inputs[0].shape()).unwrap()),
                c.needs[1].then(|| c.grad.sum_to_shape(c.inputs[1].shape()).unwrap().scale(-S::one())),
            ]
        })
    }

    /// Elementwise product `a ⊙ b` with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |c| {
            let da = c.needs[0].then(|| {
                c.grad
                    .mul(c.inputs[1])
                    .and_then(|g| g.sum_to_shape(c.inputs[0].shape()))
                    .unwrap()
            });
            let db = c.needs[1].then(|| {
                c.grad
                    .mul(c.inputs[0])
                    .and_then(|g| g.sum_to_shape(c.inputs[1].shape()))
                    .unwrap()
            });
            vec![da, db]
        })
    }

    pub fn mul_scalar(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).scale(s);
        self.record(value, &[a], Box::new(move |c| vec![Some(c.grad.scale(s))]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.record(
            value,
            &[a],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item()))]),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::lit(self.value(a).len() as f64);
        let value = Tensor::scalar(self.value(a).sum() / n);
        self.record(
            value,
            &[a],
            Box::new(move |c| vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item() / n))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        Ok(self.record(
            value,
            &[a],
            Box::new(|c| vec![Some(c.grad.reshape(c.inputs[0].shape().to_vec()).unwrap())]),
        ))
    }

    /// Mean over `axes`, keeping them as extent-1 dimensions.
    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let mut out_shape = in_shape.clone();
        for &ax in axes {
            if ax >= in_shape.len() {
                return Err(Error::invalid(
                    "reduce_mean",
                    format!("axis {ax} out of range for shape {in_shape:?}"),
                ));
            }
            out_shape[ax] = 1;
        }
        let count = S::lit((numel(&in_shape) / numel(&out_shape).max(1)) as f64);
        let value = self.value(a).sum_to_shape(&out_shape)?.map(|v| v / count);
        Ok(self.record(
            value,
            &[a],
            Box::new(move |c| {
                vec![Some(
                    c.grad
                        .broadcast_to(c.inputs[0].shape())
                        .unwrap()
                        .scale(S::one() / count),
                )]
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.record(
            value,
            parts,
            Box::new(move |c| {
                let g = c.grad.data();
                let mut offset = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if !c.needs[i] {
                        out.push(None);
                        offset += w;
                        continue;
                    }
                    let mut d = Vec::with_capacity(outer * w * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + w * inner]);
                    }
                    out.push(Some(Tensor::new(c.inputs[i].shape().to_vec(), d).unwrap()));
                    offset += w;
                }
                out
            }),
        ))
    }

    /// `y = W x + b` applied to the trailing axis of `x`: `W` is `[m, n]`,
    /// `x` is `[..., n]`, `b` is `[m]`.
    pub fn matvec(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: ws,
                rhs: xs,
            });
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::ShapeMismatch {
                    op: "matvec bias",
                    lhs: vec![m],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&xs) / n;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = m;
        // Row-by-row dot products summed in index order, then the bias: the
        // same rounding as a naive loop. Gate widths keep this cheap.
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let bd = b.map(|b| self.value(b).data());
        let mut y = Vec::with_capacity(rows * m);
        for xr in xd.chunks(n) {
            for i in 0..m {
                let mut acc = S::zero();
                for (&wv, &xv) in wd[i * n..(i + 1) * n].iter().zip(xr) {
                    acc += wv * xv;
                }
                y.push(match bd {
                    Some(bd) => acc + bd[i],
                    None => acc,
                });
            }
        }
        let value = Tensor::new(out_shape, y)?;
        let mut parents = vec![w, x];
        parents.extend(b);
        Ok(self.record(
            value,
            &parents,
            Box::new(move |c| {
                let g = c.grad.data();
                let dw = c.needs[0].then(|| {
                    let mut d = vec![S::zero(); m * n];
                    // dW[m, n] = Gᵀ[m, rows] · X[rows, n]
                    S::gemm(m, rows, n, S::one(), g, (1, m as isize), c.inputs[1].data(), (n as isize, 1), S::zero(), &mut d, (n as isize, 1));
                    Tensor::new(vec![m, n], d).unwrap()
                });
                let dx = c.needs[1].then(|| {
                    let mut d = vec![S::zero(); rows * n];
                    // dX[rows, n] = G[rows, m] · W[m, n]
                    S::gemm(rows, m, n, S::one(), g, (m as isize, 1), c.inputs[0].data(), (n as isize, 1), S::zero(), &mut d, (n as isize, 1));
                    Tensor::new(c.inputs[1].shape().to_vec(), d).unwrap()
                });
                let mut out = vec![dw, dx];
                if c.inputs.len() == 3 {
                    out.push(c.needs[2].then(|| {
                        let mut d = vec![S::zero(); m];
                        for r in 0..rows {
                            for (acc, &v) in d.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                                *acc += v;
                            }
                        }
                        Tensor::new(vec![m], d).unwrap()
                    }));
                }
                out
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // Written as a comparison so NaN passes through for diagnostics.
        let value = self.value(a).map(|v| if v < S::zero() { S::zero() } else { v });
        self.record(
            value,
            &[a],
            Box::new(|c| {
                vec![Some(
                    c.grad
                        .zip_map(c.inputs[0], |g, x| if x > S::zero() { g } else { S::zero() })
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.record(
            value,
            &[a],
            Box::new(|c| {
                vec![Some(
                    c.grad
                        .zip_map(c.output, |g, y| g * y * (S::one() - y))
                        .unwrap(),
                )]
            }),
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_last(self.value(a))?;
        Ok(self.record(
            value,
            &[a],
            Box::new(|c| {
                let k = *c.output.shape().last().unwrap();
                let y = c.output.data();
                let g = c.grad.data();
                let mut d = vec![S::zero(); y.len()];
                for r in 0..y.len() / k {
                    let row = r * k..(r + 1) * k;
                    let dot: S = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in row {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(Tensor::new(c.output.shape().to_vec(), d).unwrap())]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape[..] else {
            return Err(Error::invalid("cross_entropy", format!("logits must be [N, K], got {shape:?}")));
        };
        if labels.len() != n {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} labels for a batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_last(self.value(logits))?;
        let x = self.value(logits).data();
        let mut total = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            total += lse - row[label];
        }
        let inv_n = S::one() / S::lit(n as f64);
        let value = Tensor::scalar(total * inv_n);
        let labels = labels.to_vec();
        Ok(self.record(
            value,
            &[logits],
            Box::new(move |c| {
                let scale = c.grad.item() * inv_n;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d.data_mut()[r * k + label] -= S::one();
                }
                vec![Some(d.scale(scale))]
            }),
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = S::lit(1.0 / (1.0 - rate));
        let mask = Tensor::from_fn(self.shape(a).to_vec(), |_| {
            if rng.random::<f64>() < rate {
                S::zero()
            } else {
                keep
            }
        });
        let value = self.value(a).mul(&mask)?;
        Ok(self.record(value, &[a], Box::new(move |c| vec![Some(c.grad.mul(&mask).unwrap())])))
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    // exp(-x) overflowing to +inf still yields the correct limit 0.
    S::one() / (S::one() + (-x).exp())
}

/// Numerically stabilised softmax over the trailing axis.
pub fn softmax_last<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let k = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

//! Central finite-difference checks of analytic gradients in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::BatchNormConfig;
use crate::autograd::{Graph, Var};
use crate::blocks::{BlockCtx, Mode};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    pub step: f64,
    /// Check at most this many coordinates per input, chosen at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Relative error per input, `‖a − n‖ / max(‖a‖, ‖n‖)` over the checked
/// coordinates (0 when both are zero).
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_err: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks every input of `f`. Non-scalar outputs are reduced to a scalar
/// with a fixed random projection so every output element is exercised.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: GradCheckOpts, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let projection = Tensor::<f64>::uniform(out_shape, -1.0, 1.0, &mut rng);
    compare(inputs.to_vec(), opts, &mut rng, |vals, with_grad| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let y = f(&mut g, &vars)?;
        let (value, grads) = project(&mut g, y, &projection, with_grad)?;
        Ok((value, vars.iter().map(|&v| grads.as_ref().and_then(|gr| gr.get(v).cloned())).collect()))
    })
}

/// Checks the input and every parameter of a block-level function. The
/// report lists the input first, then parameters in store order.
pub fn check_block_gradients<F>(
    x: &Tensor<f64>,
    params: &ParamStore<f64>,
    buffers: &ParamStore<f64>,
    bn: BatchNormConfig,
    mode: Mode,
    opts: GradCheckOpts,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut BlockCtx<'_, f64>, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names = params.names().to_vec();
    let run = |vals: &[Tensor<f64>], with_grad: bool, projection: Option<&Tensor<f64>>| -> Result<(f64, Vec<Option<Tensor<f64>>>, Vec<usize>)> {
        let mut store = params.clone();
        for (slot, v) in store.tensors_mut().iter_mut().zip(&vals[1..]) {
            *slot = v.clone();
        }
        let mut ctx = BlockCtx::new(&store, buffers, bn, mode, with_grad);
        let xv = ctx.graph.leaf(vals[0].clone(), with_grad);
        let y = f(&mut ctx, xv)?;
        let shape = ctx.graph.shape(y).to_vec();
        let Some(p) = projection else { return Ok((0.0, Vec::new(), shape)) };
        let (value, grads) = project(&mut ctx.graph, y, p, with_grad)?;
        let mut out = vec![grads.as_ref().and_then(|g| g.get(xv).cloned())];
        for n in &names {
            out.push(ctx.param_var(n).and_then(|v| grads.as_ref().and_then(|g| g.get(v).cloned())));
        }
        Ok((value, out, shape))
    };
    let mut inputs = vec![x.clone()];
    inputs.extend(params.tensors().iter().cloned());
    let (_, _, shape) = run(&inputs, false, None)?;
    let projection = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    compare(inputs, opts, &mut rng, |vals, with_grad| {
        let (v, g, _) = run(vals, with_grad, Some(&projection))?;
        Ok((v, g))
    })
}

type Gradient = Option<Tensor<f64>>;

fn project(g: &mut Graph<f64>, y: Var, projection: &Tensor<f64>, with_grad: bool) -> Result<(f64, Option<crate::autograd::Gradients<f64>>)> {
    let p = g.constant(projection.clone());
    let yp = g.mul(y, p)?;
    let loss = g.sum(yp);
    let value = g.value(loss).item();
    Ok((value, if with_grad { Some(g.backward(loss)?) } else { None }))
}

fn compare<L>(inputs: Vec<Tensor<f64>>, opts: GradCheckOpts, rng: &mut ChaCha8Rng, loss_of: L) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor<f64>], bool) -> Result<(f64, Vec<Gradient>)>,
{
    let (_, analytic) = loss_of(&inputs, true)?;
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut vals = inputs.clone();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < input.len() => (0..k).map(|_| rng.random_range(0..input.len())).collect(),
            _ => (0..input.len()).collect(),
        };
        let a = analytic[i].clone().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &j in &coords {
            let orig = input.data()[j];
            vals[i].data_mut()[j] = orig + opts.step;
            let (plus, _) = loss_of(&vals, false)?;
            vals[i].data_mut()[j] = orig - opts.step;
            let (minus, _) = loss_of(&vals, false)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let an = a.data()[j];
            diff += (an - numeric).powi(2);
            na += an * an;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        rel_err.push(if denom == 0.0 { 0.0 } else { diff.sqrt() / denom });
    }
    Ok(GradCheckReport { rel_err })
}

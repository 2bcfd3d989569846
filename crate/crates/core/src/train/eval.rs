//! Clip-level evaluation with eval-mode batch norm on full clips.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Scalar, Tensor};

/// Clips per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 32;

/// Evaluation policy written to metrics logs.
pub const EVAL_POLICY: &str = "full-clip no-crop bn=eval";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    /// Top-1 accuracy per class; NaN for classes without samples.
    pub per_class: Vec<f64>,
    pub samples: usize,
}

/// Ranks the true label among `[N, K]` logits; ties go to the lower class
/// index, as with a first-maximum argmax.
pub fn metrics_from_logits<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<EvalReport> {
    let [n, k] = logits.shape()[..] else {
        return Err(Error::invalid("evaluate", format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if n != labels.len() {
        return Err(Error::invalid("evaluate", format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid("evaluate", format!("label {bad} out of range for {k} classes")));
    }
    let (mut top1, mut top5) = (0usize, 0usize);
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let target = row[label];
        let rank = row.iter().enumerate().filter(|&(j, &v)| v > target || (v == target && j < label)).count();
        counts[label] += 1;
        if rank == 0 {
            top1 += 1;
            hits[label] += 1;
        }
        if rank < 5 {
            top5 += 1;
        }
    }
    let denom = n.max(1) as f64;
    Ok(EvalReport {
        top1: top1 as f64 / denom,
        top5: top5 as f64 / denom,
        per_class: hits.iter().zip(&counts).map(|(&h, &c)| h as f64 / c as f64).collect(),
        samples: n,
    })
}

/// Eval-mode logits `[N, K]` for every clip, split over `workers` threads
/// in contiguous chunks.
pub fn predict<S: Scalar>(net: &Network<S>, clips: &Tensor<S>, workers: usize) -> Result<Tensor<S>> {
    let n = clips.shape().first().copied().unwrap_or(0);
    let chunks: Vec<(usize, usize)> = (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect();
    let per = if n == 0 { 0 } else { clips.len() / n };
    let run = |&(s, e): &(usize, usize)| -> Result<Tensor<S>> {
        let mut shape = clips.shape().to_vec();
        shape[0] = e - s;
        net.logits(&Tensor::new(shape, clips.data()[s * per..e * per].to_vec())?)
    };
    let parts: Vec<Result<Tensor<S>>> = if workers <= 1 || chunks.len() <= 1 {
        chunks.iter().map(run).collect()
    } else {
        let per_worker = chunks.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .chunks(per_worker)
                .map(|group| scope.spawn(move || group.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let k = net.spec().classes;
    let data: Vec<S> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![n, k], data)
}

pub fn evaluate<S: Scalar>(net: &Network<S>, data: &Dataset<S>, workers: usize) -> Result<EvalReport> {
    metrics_from_logits(&predict(net, &data.clips, workers)?, &data.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_logits() {
        let labels = [0, 2, 1, 2];
        let perfect = Tensor::<f64>::from_fn(vec![4, 3], |i| if i % 3 == labels[i / 3] { 1.0 } else { 0.0 });
        let r = metrics_from_logits(&perfect, &labels).unwrap();
        assert_eq!((r.top1, r.top5), (1.0, 1.0));
        // Constant logits predict class 0: top-1 is the share of label 0.
        let flat = Tensor::<f64>::zeros(vec![4, 3]);
        let r = metrics_from_logits(&flat, &labels).unwrap();
        assert_eq!(r.top1, 0.25);
        assert_eq!(r.top5, 1.0);
    }

    #[test]
    fn top5_counts_rank_below_five() {
        let logits = Tensor::<f64>::from_fn(vec![1, 7], |i| -(i as f64));
        assert_eq!(metrics_from_logits(&logits, &[4]).unwrap().top5, 1.0);
        assert_eq!(metrics_from_logits(&logits, &[5]).unwrap().top5, 0.0);
        assert_eq!(metrics_from_logits(&logits, &[0]).unwrap().per_class[0], 1.0);
    }
}

//! Sensitivity of predictions to playing clips backwards.

use serde::Serialize;

use crate::data::Dataset;
use crate::error::Result;
use crate::network::Network;
use crate::tensor::Scalar;
use crate::train::eval::{metrics_from_logits, predict};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReversalReport {
    /// Top-1 on clips in recorded order.
    pub acc_normal: f64,
    /// Top-1 on reversed clips against the original labels.
    pub acc_reversed: f64,
    /// Largest `|logit(x) − logit(reverse(x))|` over clips and classes.
    pub max_logit_delta: f64,
    pub clips: usize,
}

pub fn reversal_probe<S: Scalar>(net: &Network<S>, data: &Dataset<S>, workers: usize) -> Result<ReversalReport> {
    let normal = predict(net, &data.clips, workers)?;
    let reversed = predict(net, &data.clips.reverse_time()?, workers)?;
    Ok(ReversalReport {
        acc_normal: metrics_from_logits(&normal, &data.labels)?.top1,
        acc_reversed: metrics_from_logits(&reversed, &data.labels)?.top1,
        max_logit_delta: normal.max_abs_diff(&reversed).as_f64(),
        clips: data.len(),
    })
}

/// Rows are models, columns are test order; values are top-1 accuracy.
pub fn write_reversal_grid<W: std::io::Write>(rows: &[(String, ReversalReport)], out: W) -> Result<()> {
    let mut out = out;
    writeln!(out, "# reversal_grid v1")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "normal", "reversed", "max_logit_delta", "clips"])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{:.4}", r.acc_normal),
            format!("{:.4}", r.acc_reversed),
            format!("{:e}", r.max_logit_delta),
            r.clips.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

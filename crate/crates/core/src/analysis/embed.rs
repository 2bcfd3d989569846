//! Space-time pooled activations of one layer, one row per clip.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Scalar, Tensor};
use crate::train::eval::EVAL_CHUNK;

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub layer: String,
    /// `[N, C]`.
    pub vectors: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Embeddings {
    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# embeddings v1 layer={}", self.layer)?;
        let mut w = csv::Writer::from_writer(out);
        let dim = self.dim();
        w.write_record(std::iter::once("label".to_string()).chain((0..dim).map(|i| format!("e{i}"))))?;
        for (row, label) in self.vectors.data().chunks(dim.max(1)).zip(&self.labels) {
            w.write_record(std::iter::once(label.to_string()).chain(row.iter().map(|v| format!("{v:e}"))))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean over time and space of `layer`'s eval-mode output for every clip.
pub fn export_embeddings<S: Scalar>(net: &Network<S>, data: &Dataset<S>, layer: &str) -> Result<Embeddings> {
    net.spec().layer(layer)?;
    let n = data.len();
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (x, _) = data.batch(&idx);
        let pass = net.forward(&x, crate::network::ForwardOpts::eval())?;
        let out = pass.layer(layer).ok_or_else(|| Error::invalid("export embeddings", format!("no output for `{layer}`")))?;
        let shape = out.shape();
        dim = *shape.last().expect("layer outputs have a channel axis");
        let per_clip = out.len() / idx.len();
        let positions = (per_clip / dim) as f64;
        for clip in out.data().chunks(per_clip) {
            let mut acc = vec![0.0; dim];
            for pos in clip.chunks(dim) {
                for (a, v) in acc.iter_mut().zip(pos) {
                    *a += v.as_f64();
                }
            }
            rows.extend(acc.into_iter().map(|a| a / positions));
        }
    }
    Ok(Embeddings {
        layer: layer.to_string(),
        vectors: Tensor::new(vec![n, dim], rows)?,
        labels: data.labels.clone(),
    })
}

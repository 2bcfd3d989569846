//! Distribution of temporal-kernel weights per layer and temporal offset.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::network::Network;
use crate::tensor::{Scalar, Tensor};

/// Summary of one weight population.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                q25: f64::NAN,
                median: f64::NAN,
                q75: f64::NAN,
                max: f64::NAN,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            count: n,
            mean,
            std: var.sqrt(),
            min: v[0],
            q25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q75: quantile(&v, 0.75),
            max: v[n - 1],
        }
    }
}

/// Linear interpolation between order statistics of sorted `v`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffsetRow {
    /// Centred temporal offset; 0 is the middle tap.
    pub offset: i64,
    pub stats: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerOffsets {
    pub layer: String,
    /// Depth order among layers with temporal kernels (0 is the lowest).
    pub depth: usize,
    pub offsets: Vec<OffsetRow>,
    /// Std of all off-centre weights over std of the centre weights.
    pub off_center_ratio: f64,
}

impl LayerOffsets {
    pub fn at(&self, offset: i64) -> Option<&Summary> {
        self.offsets.iter().find(|r| r.offset == offset).map(|r| &r.stats)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffsetStats {
    pub layers: Vec<LayerOffsets>,
    /// Set when the network has no temporal kernels.
    pub notice: Option<String>,
}

impl OffsetStats {
    pub fn bottom(&self) -> Option<&LayerOffsets> {
        self.layers.first()
    }

    pub fn top(&self) -> Option<&LayerOffsets> {
        self.layers.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# offset_stats v1")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer", "depth", "offset", "count", "mean", "std", "min", "q25", "median", "q75", "max", "off_center_ratio",
        ])?;
        for l in &self.layers {
            for r in &l.offsets {
                let s = &r.stats;
                w.write_record(
                    [l.layer.clone(), l.depth.to_string(), r.offset.to_string(), s.count.to_string()]
                        .into_iter()
                        .chain([s.mean, s.std, s.min, s.q25, s.median, s.q75, s.max, l.off_center_ratio].map(|v| format!("{v:e}"))),
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Weights of one layer grouped by centred offset along axis 0 of each
/// kernel (`[kt, kh, kw, c_in, c_out]`).
pub fn layer_offsets<S: Scalar>(layer: &str, depth: usize, kernels: &[&Tensor<S>]) -> LayerOffsets {
    let mut groups: Vec<(i64, Vec<f64>)> = Vec::new();
    for k in kernels {
        let kt = k.shape()[0];
        let per = k.len() / kt.max(1);
        for t in 0..kt {
            let offset = t as i64 - (kt as i64 - 1) / 2;
            let vals = k.data()[t * per..(t + 1) * per].iter().map(|v| v.as_f64());
            match groups.iter_mut().find(|(o, _)| *o == offset) {
                Some((_, g)) => g.extend(vals),
                None => groups.push((offset, vals.collect())),
            }
        }
    }
    groups.sort_by_key(|(o, _)| *o);
    let center: Vec<f64> = groups.iter().filter(|(o, _)| *o == 0).flat_map(|(_, v)| v.iter().copied()).collect();
    let off: Vec<f64> = groups.iter().filter(|(o, _)| *o != 0).flat_map(|(_, v)| v.iter().copied()).collect();
    let off_center_ratio = Summary::of(&off).std / Summary::of(&center).std;
    LayerOffsets {
        layer: layer.to_string(),
        depth,
        offsets: groups.into_iter().map(|(offset, v)| OffsetRow { offset, stats: Summary::of(&v) }).collect(),
        off_center_ratio,
    }
}

/// Per-layer, per-offset statistics of every temporal kernel with more
/// than one tap, bottom layer first.
pub fn weight_offset_stats<S: Scalar>(net: &Network<S>) -> OffsetStats {
    let kernels = net.temporal_kernels();
    if kernels.is_empty() {
        return OffsetStats {
            layers: Vec::new(),
            notice: Some("network has no temporal kernels; nothing to report".into()),
        };
    }
    OffsetStats {
        layers: kernels.iter().enumerate().map(|(d, (name, ks))| layer_offsets(name, d, ks)).collect(),
        notice: None,
    }
}

/// Matplotlib script that renders one boxplot panel per layer from the
/// quantile columns of an offset-stats CSV.
pub fn boxplot_script() -> &'static str {
    r##"#!/usr/bin/env python3
"""Render offset boxplots: python3 plot_offsets.py offset_stats.csv [-o out.png]"""
import csv
import sys
from collections import OrderedDict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main(argv):
    out = "offsets.png"
    if "-o" in argv:
        i = argv.index("-o")
        out = argv[i + 1]
        argv = argv[:i] + argv[i + 2 :]
    with open(argv[0]) as f:
        f.readline()
        rows = list(csv.DictReader(f))
    layers = OrderedDict()
    for r in rows:
        layers.setdefault(r["layer"], []).append(r)
    fig, axes = plt.subplots(1, len(layers), figsize=(3 * len(layers), 3), squeeze=False)
    for ax, (name, rs) in zip(axes[0], layers.items()):
        stats = [
            {
                "label": r["offset"],
                "whislo": float(r["min"]),
                "q1": float(r["q25"]),
                "med": float(r["median"]),
                "q3": float(r["q75"]),
                "whishi": float(r["max"]),
                "fliers": [],
            }
            for r in rs
        ]
        ax.bxp(stats, showfliers=False)
        ax.set_title(name)
        ax.set_xlabel("temporal offset")
    fig.tight_layout()
    fig.savefig(out, dpi=150)


if __name__ == "__main__":
    main(sys.argv[1:])
"##
}

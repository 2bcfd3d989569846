//! FLOPs along a surgery family as the transition index `K` moves.

use std::io::Write;

use serde::Serialize;

use crate::analysis::cost::{count_flops, CostConvention};
use crate::arch::{build_variant_with, ConvMode, Family, VariantOpts, K_TOTAL};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub k: usize,
    /// Surgery units that mix information across frames.
    pub n_3d: usize,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffCurve {
    pub family: Family,
    pub conv: ConvMode,
    pub convention: CostConvention,
    pub points: Vec<CurvePoint>,
}

/// Range of `K` that spans the family from all-2D to all-3D.
pub fn k_range(family: Family) -> Result<std::ops::RangeInclusive<usize>> {
    match family {
        Family::BottomHeavy => Ok(0..=K_TOTAL),
        Family::TopHeavy => Ok(1..=K_TOTAL + 1),
        f => Err(Error::Config(format!("{f:?} has no transition index; use bottom_heavy or top_heavy"))),
    }
}

/// One point per `K`, ordered by increasing number of 3D units. `flops`
/// here is `conv_flops` (the elementwise column is excluded).
pub fn tradeoff_curve(family: Family, conv: ConvMode, opts: &VariantOpts, convention: CostConvention) -> Result<TradeoffCurve> {
    let mut points = Vec::new();
    for k in k_range(family)? {
        let spec = build_variant_with(family, conv, k, false, opts)?;
        let r = count_flops(&spec, opts.input, 1, convention)?;
        points.push(CurvePoint {
            k,
            n_3d: spec.temporal_units(),
            params: r.totals.params,
            macs: r.totals.macs,
            flops: r.totals.conv_flops,
        });
    }
    points.sort_by_key(|p| p.n_3d);
    Ok(TradeoffCurve {
        family,
        conv,
        convention,
        points,
    })
}

impl TradeoffCurve {
    pub fn at_n_3d(&self, n: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.n_3d == n)
    }

    pub fn at_k(&self, k: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.k == k)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# tradeoff_curve v1 family={:?} conv={:?} {}", self.family, self.conv, self.convention)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "n_3d", "params", "macs", "flops"])?;
        for p in &self.points {
            w.write_record([p.k, p.n_3d].map(|v| v.to_string()).into_iter().chain([p.params, p.macs, p.flops].map(|v| v.to_string())))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Matplotlib script that draws FLOPs against the number of 3D units for
/// every curve CSV passed on its command line.
pub fn plot_script() -> &'static str {
    r##"#!/usr/bin/env python3
"""Plot tradeoff curves: python3 plot_curve.py curve_a.csv [curve_b.csv ...] [-o out.png]"""
import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    with open(path) as f:
        tag = f.readline().strip()
        rows = list(csv.DictReader(f))
    return tag, rows


def main(argv):
    out = "curve.png"
    if "-o" in argv:
        i = argv.index("-o")
        out = argv[i + 1]
        argv = argv[:i] + argv[i + 2 :]
    for path in argv:
        tag, rows = load(path)
        xs = [int(r["n_3d"]) for r in rows]
        ys = [int(r["flops"]) / 1e9 for r in rows]
        plt.plot(xs, ys, marker="o", label=tag.replace("# tradeoff_curve v1 ", ""))
    plt.xlabel("3D units")
    plt.ylabel("GFLOPs")
    plt.legend(fontsize="small")
    plt.savefig(out, dpi=150)


if __name__ == "__main__":
    main(sys.argv[1:])
"##
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::cost::count_params;
    use crate::arch::Preset;

    #[test]
    fn endpoints_are_i2d_and_i3d() {
        let opts = VariantOpts::mini();
        let conv = CostConvention::default();
        let flops = |p: Preset| count_flops(&p.build(&opts).unwrap(), opts.input, 1, conv).unwrap().totals.conv_flops;
        for family in [Family::TopHeavy, Family::BottomHeavy] {
            let c = tradeoff_curve(family, ConvMode::Full, &opts, conv).unwrap();
            assert_eq!(c.points.len(), K_TOTAL + 1);
            assert_eq!(c.points[0].n_3d, 0);
            assert_eq!(c.points[0].flops, flops(Preset::I2D));
            assert_eq!(c.points[K_TOTAL].flops, flops(Preset::I3D));
            assert!(c.points.windows(2).all(|w| w[0].flops < w[1].flops));
        }
    }

    #[test]
    fn fast_s3d_sits_on_top_heavy_separable_curve() {
        let opts = VariantOpts::mini();
        let c = tradeoff_curve(Family::TopHeavy, ConvMode::Separable, &opts, CostConvention::default()).unwrap();
        let fast = count_params(&Preset::FAST_S3D.build(&opts).unwrap(), CostConvention::default()).unwrap();
        let p = c.at_k(K_TOTAL - 1).unwrap();
        assert_eq!(p.n_3d, 2);
        assert_eq!(p.flops, fast.totals.conv_flops);
        let mut csv = Vec::new();
        c.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("# tradeoff_curve v1"));
    }
}

//! Analytic parameter and FLOP counts.
//!
//! Counts are derived from the layer list alone, independently of the
//! parameter declarations used to build networks.
//!
//! Conventions:
//! - convolution MACs are dense: every kernel tap at every SAME-padded
//!   output position counts, including taps that land in padding;
//! - `conv_flops = macs × factor` with factor 1 or 2;
//! - elementwise work (BN at inference, bias adds, ReLU, mean pooling,
//!   gate sigmoid and product) is 1 FLOP per element, kept in its own
//!   column;
//! - max pooling and concatenation cost nothing;
//! - the gate's `n×n` matrix-vector product counts as MACs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ConvKind, InputGeometry, LayerSpec};
use crate::error::{Error, Result};

/// FLOPs per multiply-accumulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MacConvention {
    One,
    Two,
}

impl MacConvention {
    pub const ALL: [Self; 2] = [Self::One, Self::Two];

    pub fn factor(self) -> u64 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }
}

/// Which batch-norm tensors count as parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnParams {
    Excluded,
    /// Trainable shift (and scale, when enabled); matches `Network::num_params`.
    Learnable,
    /// Learnable tensors plus running mean and variance.
    WithStatistics,
}

impl BnParams {
    pub fn label(self) -> &'static str {
        match self {
            Self::Excluded => "excluded",
            Self::Learnable => "learnable",
            Self::WithStatistics => "with_statistics",
        }
    }
}

impl FromStr for BnParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "excluded" => Ok(Self::Excluded),
            "learnable" => Ok(Self::Learnable),
            "with_statistics" => Ok(Self::WithStatistics),
            _ => Err(Error::Config(format!("unknown batch-norm counting `{s}` (excluded, learnable, with_statistics)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CostConvention {
    pub mac: MacConvention,
    pub bn: BnParams,
}

impl Default for CostConvention {
    fn default() -> Self {
        Self {
            mac: MacConvention::One,
            bn: BnParams::Learnable,
        }
    }
}

impl fmt::Display for CostConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mac={} bn={} elementwise=separate padding=dense",
            self.mac.factor(),
            self.bn.label()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub layer_type: String,
    pub params: u64,
    pub macs: u64,
    pub conv_flops: u64,
    pub elementwise_flops: u64,
    /// `conv_flops + elementwise_flops`.
    pub flops: u64,
    /// `(T, H, W, C)` of the layer output.
    pub output: [usize; 4],
    /// Output elements over the whole batch.
    pub activations: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostTotals {
    pub params: u64,
    pub macs: u64,
    pub conv_flops: u64,
    pub elementwise_flops: u64,
    pub flops: u64,
    pub activations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input: InputGeometry,
    pub batch: usize,
    pub convention: CostConvention,
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Versioned CSV: a `# cost_report v1 ...` line, a header, one row per
    /// layer and a final `TOTAL` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let g = self.input;
        writeln!(
            out,
            "# cost_report v1 input={}x{}x{}x{} batch={} {}",
            g.frames, g.height, g.width, g.channels, self.batch, self.convention
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "name",
            "type",
            "params",
            "macs",
            "conv_flops",
            "elementwise_flops",
            "flops",
            "out_t",
            "out_h",
            "out_w",
            "out_c",
            "activations",
        ])?;
        for r in &self.rows {
            let o = r.output;
            w.write_record([
                r.name.clone(),
                r.layer_type.clone(),
                r.params.to_string(),
                r.macs.to_string(),
                r.conv_flops.to_string(),
                r.elementwise_flops.to_string(),
                r.flops.to_string(),
                o[0].to_string(),
                o[1].to_string(),
                o[2].to_string(),
                o[3].to_string(),
                r.activations.to_string(),
            ])?;
        }
        let t = self.totals;
        w.write_record([
            "TOTAL".to_string(),
            "-".into(),
            t.params.to_string(),
            t.macs.to_string(),
            t.conv_flops.to_string(),
            t.elementwise_flops.to_string(),
            t.flops.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            t.activations.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Per-layer parameters at the spec's own input geometry and batch 1.
pub fn count_params(spec: &ArchSpec, convention: CostConvention) -> Result<CostReport> {
    count_flops(spec, spec.input, 1, convention)
}

/// Per-layer costs for `batch` clips of the given geometry.
pub fn count_flops(spec: &ArchSpec, input: InputGeometry, batch: usize, convention: CostConvention) -> Result<CostReport> {
    if [input.frames, input.height, input.width, input.channels, batch].contains(&0) {
        return Err(Error::Config(format!("cost input must be positive, got {input:?} with batch {batch}")));
    }
    let mut spec = spec.clone();
    spec.input = input;
    // Structural validation only; extents below are recomputed locally.
    spec.geometry()?;
    let counter = Counter {
        batch: batch as u64,
        bn_enabled: spec.batch_norm.enabled,
        bn_per_channel: match (spec.batch_norm.enabled, convention.bn) {
            (false, _) | (true, BnParams::Excluded) => 0,
            (true, BnParams::Learnable) => 1 + spec.batch_norm.scale as u64,
            (true, BnParams::WithStatistics) => 3 + spec.batch_norm.scale as u64,
        },
    };
    let mut cur = Extent {
        t: input.frames,
        h: input.height,
        w: input.width,
        c: input.channels,
    };
    let mut rows = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let mut acc = Acc::default();
        let out = match layer {
            LayerSpec::Conv(l) => counter.unit(&mut acc, cur, l.kind, l.kernel, l.stride, l.out, l.gated),
            LayerSpec::MaxPool(l) => cur.strided(l.stride),
            LayerSpec::Inception(l) => {
                let w = &l.widths;
                let kt = l.temporal_kernel;
                let g = l.gated && l.kind == ConvKind::Sep;
                let (pw_kind, pw_kernel, pw_gate) = match l.kind {
                    ConvKind::Sep => (ConvKind::Sep, [kt, 1, 1], g),
                    _ => (ConvKind::Conv2d, [1, 1, 1], false),
                };
                let one = [1, 1, 1];
                let pointwise = |acc: &mut Acc, c_out| counter.unit(acc, cur, pw_kind, pw_kernel, one, c_out, pw_gate);
                let b0 = pointwise(&mut acc, w.b0);
                let r1 = counter.unit(&mut acc, cur, ConvKind::Conv2d, one, one, w.b1_reduce, false);
                let b1 = counter.unit(&mut acc, r1, l.kind, [kt, 3, 3], one, w.b1, g);
                let r2 = counter.unit(&mut acc, cur, ConvKind::Conv2d, one, one, w.b2_reduce, false);
                let b2 = counter.unit(&mut acc, r2, l.kind, [kt, 3, 3], one, w.b2, g);
                let b3 = pointwise(&mut acc, w.b3);
                Extent {
                    c: b0.c + b1.c + b2.c + b3.c,
                    ..cur
                }
            }
            LayerSpec::Head(_) => {
                let k = spec.classes as u64;
                let (t, c) = (cur.t as u64, cur.c as u64);
                acc.params += c * k + k;
                acc.macs += counter.batch * t * c * k;
                // Spatial mean, bias add, temporal mean.
                acc.elementwise += counter.batch * (cur.numel() + t * k + t * k);
                Extent {
                    t: 1,
                    h: 1,
                    w: 1,
                    c: spec.classes,
                }
            }
        };
        let conv_flops = acc.macs * convention.mac.factor();
        rows.push(CostRow {
            name: layer.name().to_string(),
            layer_type: layer.type_label().to_string(),
            params: acc.params,
            macs: acc.macs,
            conv_flops,
            elementwise_flops: acc.elementwise,
            flops: conv_flops + acc.elementwise,
            output: [out.t, out.h, out.w, out.c],
            activations: counter.batch * out.numel(),
        });
        cur = out;
    }
    let mut totals = CostTotals::default();
    for r in &rows {
        totals.params += r.params;
        totals.macs += r.macs;
        totals.conv_flops += r.conv_flops;
        totals.elementwise_flops += r.elementwise_flops;
        totals.flops += r.flops;
        totals.activations += r.activations;
    }
    Ok(CostReport {
        input,
        batch,
        convention,
        rows,
        totals,
    })
}

#[derive(Clone, Copy, Debug)]
struct Extent {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
}

impl Extent {
    /// SAME padding: `ceil(n / s)` along each axis.
    fn strided(self, s: [usize; 3]) -> Self {
        Self {
            t: self.t.div_ceil(s[0]),
            h: self.h.div_ceil(s[1]),
            w: self.w.div_ceil(s[2]),
            c: self.c,
        }
    }

    fn numel(&self) -> u64 {
        (self.t * self.h * self.w * self.c) as u64
    }
}

#[derive(Default)]
struct Acc {
    params: u64,
    macs: u64,
    elementwise: u64,
}

struct Counter {
    batch: u64,
    bn_enabled: bool,
    bn_per_channel: u64,
}

impl Counter {
    /// One convolution followed by BN (or bias) and ReLU.
    fn conv(&self, acc: &mut Acc, input: Extent, kernel: [usize; 3], stride: [usize; 3], c_out: usize) -> Extent {
        let out = Extent { c: c_out, ..input.strided(stride) };
        let taps = (kernel[0] * kernel[1] * kernel[2] * input.c) as u64;
        acc.params += taps * c_out as u64;
        acc.params += if self.bn_enabled { self.bn_per_channel * c_out as u64 } else { c_out as u64 };
        acc.macs += self.batch * out.numel() * taps;
        acc.elementwise += self.batch * out.numel() * 2;
        out
    }

    fn unit(&self, acc: &mut Acc, input: Extent, kind: ConvKind, kernel: [usize; 3], stride: [usize; 3], c_out: usize, gated: bool) -> Extent {
        match kind {
            ConvKind::Conv2d => self.conv(acc, input, [1, kernel[1], kernel[2]], stride, c_out),
            ConvKind::Conv3d => self.conv(acc, input, kernel, stride, c_out),
            ConvKind::Sep => {
                let mid = self.conv(acc, input, [1, kernel[1], kernel[2]], [1, stride[1], stride[2]], c_out);
                let out = self.conv(acc, mid, [kernel[0], 1, 1], [stride[0], 1, 1], c_out);
                if gated {
                    let n = c_out as u64;
                    acc.params += n * n + n;
                    acc.macs += self.batch * n * n;
                    // Mean pool, bias, sigmoid, product.
                    acc.elementwise += self.batch * (out.numel() + 2 * n + out.numel());
                }
                out
            }
        }
    }
}

//! Architecture specifications for the inflated Inception-V1 video family.
//!
//! An [`ArchSpec`] is pure structure: an ordered layer list plus input
//! geometry. Families (I3D, I2D, bottom-/top-heavy hybrids) and the
//! separable and gated variants are ways of producing one; two routes that
//! yield the same structure compare equal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{out_extent, Padding, TimeBorder};

/// Number of surgery units: `Conv1a`, `Conv2c` and the nine Inception blocks.
pub const K_TOTAL: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    I3d,
    I2d,
    /// Units with surgery index `<= k` are 3D, the rest 2D.
    BottomHeavy,
    /// Units with surgery index `>= k` are 3D, the rest 2D.
    TopHeavy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    #[default]
    Full,
    Separable,
}

/// How a convolutional unit treats time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    /// `1×k×k`; temporal stride is kept.
    #[serde(rename = "2d")]
    Conv2d,
    /// `kt×k×k`.
    #[serde(rename = "3d")]
    Conv3d,
    /// `1×k×k` then `kt×1×1`.
    #[serde(rename = "sep")]
    Sep,
}

impl ConvKind {
    pub fn label(self) -> &'static str {
        match self {
            ConvKind::Conv2d => "2d",
            ConvKind::Conv3d => "3d",
            ConvKind::Sep => "sep",
        }
    }

    /// Whether the unit mixes information across frames.
    pub fn is_temporal(self) -> bool {
        self != ConvKind::Conv2d
    }
}

/// Output widths of the four Inception branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionWidths {
    pub b0: usize,
    pub b1_reduce: usize,
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3: usize,
}

impl InceptionWidths {
    pub const fn new(b0: usize, b1_reduce: usize, b1: usize, b2_reduce: usize, b2: usize, b3: usize) -> Self {
        Self {
            b0,
            b1_reduce,
            b1,
            b2_reduce,
            b2,
            b3,
        }
    }

    pub fn out(&self) -> usize {
        self.b0 + self.b1 + self.b2 + self.b3
    }

    fn scaled(&self, m: f64) -> Self {
        Self {
            b0: scale_width(self.b0, m),
            b1_reduce: scale_width(self.b1_reduce, m),
            b1: scale_width(self.b1, m),
            b2_reduce: scale_width(self.b2_reduce, m),
            b2: scale_width(self.b2, m),
            b3: scale_width(self.b3, m),
        }
    }
}

fn scale_width(c: usize, m: f64) -> usize {
    ((c as f64 * m).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputGeometry {
    pub const fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
        }
    }

    /// 64 RGB frames at 224×224.
    pub const fn paper() -> Self {
        Self::new(64, 224, 224, 3)
    }

    /// Desk-scale clips. 13 frames keep every temporal stride of the
    /// backbone symmetric under time reversal.
    pub const fn mini() -> Self {
        Self::new(13, 32, 32, 1)
    }

    pub fn shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.frames, self.height, self.width, self.channels]
    }
}

impl Default for InputGeometry {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Learnable per-channel scale in addition to the shift.
    #[serde(default)]
    pub scale: bool,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: false,
        }
    }
}

fn yes() -> bool {
    true
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub kind: ConvKind,
    pub out: usize,
    /// Full kernel; a 2D unit drops `kernel[0]`.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    #[serde(default)]
    pub gated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surgery: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolLayer {
    pub name: String,
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InceptionLayer {
    pub name: String,
    pub kind: ConvKind,
    #[serde(default = "three")]
    pub temporal_kernel: usize,
    #[serde(default)]
    pub gated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surgery: Option<usize>,
    #[serde(flatten)]
    pub widths: InceptionWidths,
}

/// Spatial mean, dropout, `1×1×1` classifier, temporal mean of logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadLayer {
    pub name: String,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvLayer),
    MaxPool(PoolLayer),
    Inception(InceptionLayer),
    Head(HeadLayer),
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv(l) => &l.name,
            LayerSpec::MaxPool(l) => &l.name,
            LayerSpec::Inception(l) => &l.name,
            LayerSpec::Head(l) => &l.name,
        }
    }

    pub fn type_label(&self) -> &'static str {
        match self {
            LayerSpec::Conv(_) => "conv",
            LayerSpec::MaxPool(_) => "max_pool",
            LayerSpec::Inception(_) => "inception",
            LayerSpec::Head(_) => "head",
        }
    }

    pub fn kind(&self) -> Option<ConvKind> {
        match self {
            LayerSpec::Conv(l) => Some(l.kind),
            LayerSpec::Inception(l) => Some(l.kind),
            _ => None,
        }
    }

    pub fn surgery(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv(l) => l.surgery,
            LayerSpec::Inception(l) => l.surgery,
            _ => None,
        }
    }

    pub fn gated(&self) -> bool {
        match self {
            LayerSpec::Conv(l) => l.gated,
            LayerSpec::Inception(l) => l.gated,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: InputGeometry,
    pub classes: usize,
    #[serde(default)]
    pub batch_norm: BatchNormConfig,
    /// Fill rule for temporal padding of convolutions.
    #[serde(default = "replicate")]
    pub temporal_padding: TimeBorder,
    pub layers: Vec<LayerSpec>,
}

fn replicate() -> TimeBorder {
    TimeBorder::Replicate
}

/// Output geometry of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    /// `(T, H, W, C)` entering the layer.
    pub input: [usize; 4],
    /// `(T, H, W, C)` leaving the layer; the head reports `(1, 1, 1, classes)`.
    pub output: [usize; 4],
}

impl ArchSpec {
    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        self.layers.iter().find(|l| l.name() == name).ok_or_else(|| Error::UnknownLayer {
            name: name.to_string(),
            valid: self.layer_names(),
        })
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name().to_string()).collect()
    }

    /// Number of units that mix information across frames.
    pub fn temporal_units(&self) -> usize {
        self.layers.iter().filter(|l| l.kind().is_some_and(ConvKind::is_temporal) && l.surgery().is_some()).count()
    }

    /// Propagates the input geometry through every layer, checking the
    /// structural invariants on the way.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>> {
        let g = self.input;
        if [g.frames, g.height, g.width, g.channels].contains(&0) {
            return Err(Error::Config(format!("input geometry must be positive, got {g:?}")));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be at least 1".into()));
        }
        let mut cur = [g.frames, g.height, g.width, g.channels];
        let mut out = Vec::with_capacity(self.layers.len());
        let mut heads = 0;
        let mut next_surgery = 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let name = layer.name();
            if self.layers[..i].iter().any(|l| l.name() == name) {
                return Err(Error::Config(format!("duplicate layer name `{name}`")));
            }
            if let Some(k) = layer.surgery() {
                if k != next_surgery {
                    return Err(Error::Config(format!(
                        "surgery indices must run 1, 2, ... in order; `{name}` has {k}, expected {next_surgery}"
                    )));
                }
                next_surgery += 1;
            }
            if layer.gated() && layer.kind() != Some(ConvKind::Sep) {
                return Err(Error::Config(format!("`{name}`: gating requires a separable unit")));
            }
            let input = cur;
            cur = match layer {
                LayerSpec::Conv(l) => {
                    let k = effective_kernel(l.kind, l.kernel);
                    if l.out == 0 {
                        return Err(Error::Config(format!("`{name}`: zero output channels")));
                    }
                    let [t, h, w] = extents(name, [cur[0], cur[1], cur[2]], k, l.stride, Padding::Same)?;
                    [t, h, w, l.out]
                }
                LayerSpec::MaxPool(l) => {
                    let [t, h, w] = extents(name, [cur[0], cur[1], cur[2]], l.window, l.stride, Padding::Same)?;
                    [t, h, w, cur[3]]
                }
                LayerSpec::Inception(l) => {
                    let w = &l.widths;
                    if [w.b0, w.b1_reduce, w.b1, w.b2_reduce, w.b2, w.b3].contains(&0) || l.temporal_kernel == 0 {
                        return Err(Error::Config(format!("`{name}`: branch widths and temporal kernel must be positive")));
                    }
                    [cur[0], cur[1], cur[2], l.widths.out()]
                }
                LayerSpec::Head(h) => {
                    heads += 1;
                    if i + 1 != self.layers.len() {
                        return Err(Error::Config(format!("head `{name}` must be the last layer")));
                    }
                    if !(0.0..1.0).contains(&h.dropout) {
                        return Err(Error::Config(format!("`{name}`: dropout {} not in [0, 1)", h.dropout)));
                    }
                    [1, 1, 1, self.classes]
                }
            };
            out.push(LayerGeometry { input, output: cur });
        }
        if heads != 1 {
            return Err(Error::Config(format!("expected exactly one head, found {heads}")));
        }
        Ok(out)
    }

    /// Serializes to the TOML config format with an explicit layer list.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        ArchConfig::from_toml(text)?.resolve()
    }
}

/// Kernel actually applied by a unit of the given kind.
pub fn effective_kernel(kind: ConvKind, kernel: [usize; 3]) -> [usize; 3] {
    match kind {
        ConvKind::Conv2d => [1, kernel[1], kernel[2]],
        _ => kernel,
    }
}

fn extents(name: &str, input: [usize; 3], k: [usize; 3], s: [usize; 3], padding: Padding) -> Result<[usize; 3]> {
    let mut o = [0; 3];
    for a in 0..3 {
        o[a] = out_extent(input[a], k[a], s[a], padding)
            .ok_or_else(|| Error::Config(format!("`{name}`: kernel {k:?} / stride {s:?} invalid for input {input:?}")))?
            .0;
    }
    Ok(o)
}

/// Inception-V1 branch widths for the nine mixed blocks.
pub const INCEPTION_TABLE: [(&str, InceptionWidths); 9] = [
    ("Mixed3b", InceptionWidths::new(64, 96, 128, 16, 32, 32)),
    ("Mixed3c", InceptionWidths::new(128, 128, 192, 32, 96, 64)),
    ("Mixed4b", InceptionWidths::new(192, 96, 208, 16, 48, 64)),
    ("Mixed4c", InceptionWidths::new(160, 112, 224, 24, 64, 64)),
    ("Mixed4d", InceptionWidths::new(128, 128, 256, 24, 64, 64)),
    ("Mixed4e", InceptionWidths::new(112, 144, 288, 32, 64, 64)),
    ("Mixed4f", InceptionWidths::new(256, 160, 320, 32, 128, 128)),
    ("Mixed5b", InceptionWidths::new(256, 160, 320, 32, 128, 128)),
    ("Mixed5c", InceptionWidths::new(384, 192, 384, 48, 128, 128)),
];

/// Everything besides the family that shapes a built variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantOpts {
    pub input: InputGeometry,
    pub classes: usize,
    pub channel_multiplier: f64,
    pub dropout: f64,
    pub batch_norm: BatchNormConfig,
    pub temporal_padding: TimeBorder,
}

impl Default for VariantOpts {
    fn default() -> Self {
        Self {
            input: InputGeometry::paper(),
            classes: 400,
            channel_multiplier: 1.0,
            dropout: 0.5,
            batch_norm: BatchNormConfig::default(),
            temporal_padding: TimeBorder::Replicate,
        }
    }
}

impl VariantOpts {
    /// Channels ÷ 8 on 13×32×32 grey clips, two classes.
    pub fn mini() -> Self {
        Self {
            input: InputGeometry::mini(),
            classes: 2,
            channel_multiplier: 0.125,
            ..Self::default()
        }
    }
}

/// Builds a family member with paper-scale defaults.
pub fn build_variant(family: Family, conv: ConvMode, k: usize, gated: bool) -> Result<ArchSpec> {
    build_variant_with(family, conv, k, gated, &VariantOpts::default())
}

pub fn build_variant_with(family: Family, conv: ConvMode, k: usize, gated: bool, opts: &VariantOpts) -> Result<ArchSpec> {
    if k > K_TOTAL + 1 {
        return Err(Error::Config(format!("k = {k} outside 0..={}", K_TOTAL + 1)));
    }
    if gated && conv == ConvMode::Full {
        return Err(Error::Config("gating applies after temporal convolutions of separable units; use conv = separable".into()));
    }
    if !(opts.channel_multiplier > 0.0 && opts.channel_multiplier.is_finite()) {
        return Err(Error::Config(format!("channel multiplier must be positive, got {}", opts.channel_multiplier)));
    }
    let m = opts.channel_multiplier;
    let temporal = |idx: usize| match family {
        Family::I3d => true,
        Family::I2d => false,
        Family::BottomHeavy => idx <= k,
        Family::TopHeavy => idx >= k,
    };
    let kind_for = |idx: usize| match (temporal(idx), conv) {
        (false, _) => ConvKind::Conv2d,
        (true, ConvMode::Full) => ConvKind::Conv3d,
        (true, ConvMode::Separable) => ConvKind::Sep,
    };
    let conv_layer = |name: &str, out: usize, kernel: [usize; 3], stride: [usize; 3], surgery: Option<usize>| {
        let kind = surgery.map_or(ConvKind::Conv2d, kind_for);
        LayerSpec::Conv(ConvLayer {
            name: name.into(),
            kind,
            out: scale_width(out, m),
            kernel,
            stride,
            gated: gated && kind == ConvKind::Sep,
            surgery,
        })
    };
    let pool = |name: &str, window: [usize; 3], stride: [usize; 3]| {
        LayerSpec::MaxPool(PoolLayer {
            name: name.into(),
            window,
            stride,
        })
    };
    let mut layers = vec![
        conv_layer("Conv1a", 64, [7, 7, 7], [2, 2, 2], Some(1)),
        pool("Max2a", [1, 3, 3], [1, 2, 2]),
        conv_layer("Conv2b", 64, [1, 1, 1], [1, 1, 1], None),
        conv_layer("Conv2c", 192, [3, 3, 3], [1, 1, 1], Some(2)),
        pool("Max3a", [1, 3, 3], [1, 2, 2]),
    ];
    for (i, (name, widths)) in INCEPTION_TABLE.iter().enumerate() {
        match *name {
            "Mixed4b" => layers.push(pool("Max4a", [3, 3, 3], [2, 2, 2])),
            "Mixed5b" => layers.push(pool("Max5a", [2, 2, 2], [2, 2, 2])),
            _ => {}
        }
        let surgery = i + 3;
        let kind = kind_for(surgery);
        layers.push(LayerSpec::Inception(InceptionLayer {
            name: (*name).into(),
            kind,
            temporal_kernel: 3,
            gated: gated && kind == ConvKind::Sep,
            surgery: Some(surgery),
            widths: widths.scaled(m),
        }));
    }
    layers.push(LayerSpec::Head(HeadLayer {
        name: "Head".into(),
        dropout: opts.dropout,
    }));
    let spec = ArchSpec {
        input: opts.input,
        classes: opts.classes,
        batch_norm: opts.batch_norm,
        temporal_padding: opts.temporal_padding,
        layers,
    };
    spec.geometry()?;
    Ok(spec)
}

/// Named members of the family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub family: Family,
    pub conv: ConvMode,
    pub k: usize,
    pub gated: bool,
}

impl Preset {
    pub const NAMES: [&'static str; 7] = ["i3d", "i2d", "s3d", "s3d-g", "fast-s3d", "bottom-heavy[-s3d]:K", "top-heavy[-s3d]:K"];

    pub const I3D: Self = Self::new(Family::I3d, ConvMode::Full, 0, false);
    pub const I2D: Self = Self::new(Family::I2d, ConvMode::Full, 0, false);
    pub const S3D: Self = Self::new(Family::I3d, ConvMode::Separable, 0, false);
    pub const S3D_G: Self = Self::new(Family::I3d, ConvMode::Separable, 0, true);
    /// Separable 3D in the top two units only.
    pub const FAST_S3D: Self = Self::new(Family::TopHeavy, ConvMode::Separable, K_TOTAL - 1, false);

    pub const fn new(family: Family, conv: ConvMode, k: usize, gated: bool) -> Self {
        Self { family, conv, k, gated }
    }

    pub fn build(&self, opts: &VariantOpts) -> Result<ArchSpec> {
        build_variant_with(self.family, self.conv, self.k, self.gated, opts)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let fixed = match lower.as_str() {
            "i3d" => Some(Self::I3D),
            "i2d" => Some(Self::I2D),
            "s3d" => Some(Self::S3D),
            "s3d-g" | "s3dg" => Some(Self::S3D_G),
            "fast-s3d" => Some(Self::FAST_S3D),
            _ => None,
        };
        if let Some(p) = fixed {
            return Ok(p);
        }
        let bad = || Error::Config(format!("unknown architecture `{s}`; expected one of {}", Self::NAMES.join(", ")));
        let (base, k) = lower.split_once(':').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        let (family, conv) = match base {
            "bottom-heavy" | "bottom-heavy-i3d" => (Family::BottomHeavy, ConvMode::Full),
            "bottom-heavy-s3d" => (Family::BottomHeavy, ConvMode::Separable),
            "top-heavy" | "top-heavy-i3d" => (Family::TopHeavy, ConvMode::Full),
            "top-heavy-s3d" => (Family::TopHeavy, ConvMode::Separable),
            _ => return Err(bad()),
        };
        Ok(Self::new(family, conv, k, false))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (*self, self.family) {
            (Self::I3D, _) => f.write_str("i3d"),
            (Self::I2D, _) => f.write_str("i2d"),
            (Self::S3D, _) => f.write_str("s3d"),
            (Self::S3D_G, _) => f.write_str("s3d-g"),
            (Self::FAST_S3D, _) => f.write_str("fast-s3d"),
            (_, Family::BottomHeavy) | (_, Family::TopHeavy) => {
                let base = if self.family == Family::BottomHeavy { "bottom-heavy" } else { "top-heavy" };
                let conv = if self.conv == ConvMode::Separable { "-s3d" } else { "" };
                write!(f, "{base}{conv}:{}", self.k)?;
                if self.gated {
                    f.write_str("+gated")?;
                }
                Ok(())
            }
            _ => write!(f, "{:?}/{:?}{}", self.family, self.conv, if self.gated { "+gated" } else { "" }),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn default_classes() -> usize {
    400
}

/// The human-editable architecture file. Either names a family (with `k`,
/// `conv`, `gated` and `channel_multiplier`) or lists `[[layers]]`
/// explicitly; an explicit list wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default)]
    pub conv: ConvMode,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub gated: bool,
    #[serde(default = "one")]
    pub channel_multiplier: f64,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "half")]
    pub dropout: f64,
    #[serde(default)]
    pub batch_norm: BatchNormConfig,
    #[serde(default = "replicate")]
    pub temporal_padding: TimeBorder,
    #[serde(default)]
    pub input: InputGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            family: Some(Family::I3d),
            conv: ConvMode::Full,
            k: 0,
            gated: false,
            channel_multiplier: 1.0,
            classes: default_classes(),
            dropout: half(),
            batch_norm: BatchNormConfig::default(),
            temporal_padding: TimeBorder::Replicate,
            input: InputGeometry::paper(),
            layers: None,
        }
    }
}

impl ArchConfig {
    pub fn from_preset(preset: Preset, opts: &VariantOpts) -> Self {
        Self {
            family: Some(preset.family),
            conv: preset.conv,
            k: preset.k,
            gated: preset.gated,
            channel_multiplier: opts.channel_multiplier,
            classes: opts.classes,
            dropout: opts.dropout,
            batch_norm: opts.batch_norm,
            temporal_padding: opts.temporal_padding,
            input: opts.input,
            layers: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn variant_opts(&self) -> VariantOpts {
        VariantOpts {
            input: self.input,
            classes: self.classes,
            channel_multiplier: self.channel_multiplier,
            dropout: self.dropout,
            batch_norm: self.batch_norm,
            temporal_padding: self.temporal_padding,
        }
    }

    pub fn resolve(&self) -> Result<ArchSpec> {
        if let Some(layers) = &self.layers {
            let spec = ArchSpec {
                input: self.input,
                classes: self.classes,
                batch_norm: self.batch_norm,
                temporal_padding: self.temporal_padding,
                layers: layers.clone(),
            };
            spec.geometry()?;
            return Ok(spec);
        }
        let family = self
            .family
            .ok_or_else(|| Error::Config("config needs either `family` or a `[[layers]]` list".into()))?;
        build_variant_with(family, self.conv, self.k, self.gated, &self.variant_opts())
    }
}

/// One row of a layer table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DescribeRow {
    pub name: String,
    pub layer_type: String,
    pub kind: String,
    pub kernel: String,
    pub stride: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_t: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub gated: bool,
    pub surgery: Option<usize>,
}

pub fn describe(spec: &ArchSpec) -> Result<Vec<DescribeRow>> {
    let geo = spec.geometry()?;
    let fmt3 = |a: [usize; 3]| format!("{}x{}x{}", a[0], a[1], a[2]);
    Ok(spec
        .layers
        .iter()
        .zip(geo)
        .map(|(layer, g)| {
            let (kernel, stride) = match layer {
                LayerSpec::Conv(l) => (fmt3(effective_kernel(l.kind, l.kernel)), fmt3(l.stride)),
                LayerSpec::MaxPool(l) => (fmt3(l.window), fmt3(l.stride)),
                LayerSpec::Inception(l) => (fmt3(effective_kernel(l.kind, [l.temporal_kernel, 3, 3])), "1x1x1".into()),
                LayerSpec::Head(_) => ("1x1x1".into(), "1x1x1".into()),
            };
            DescribeRow {
                name: layer.name().into(),
                layer_type: layer.type_label().into(),
                kind: layer.kind().map_or("-", ConvKind::label).into(),
                kernel,
                stride,
                in_channels: g.input[3],
                out_channels: g.output[3],
                out_t: g.output[0],
                out_h: g.output[1],
                out_w: g.output[2],
                gated: layer.gated(),
                surgery: layer.surgery(),
            }
        })
        .collect())
}

/// Fixed-width text rendering of [`describe`].
pub fn render_table(rows: &[DescribeRow]) -> String {
    let mut s = format!(
        "{:<8} {:<9} {:<4} {:<8} {:<7} {:>5} {:>5} {:>12} {:<5} {:>3}\n",
        "layer", "type", "kind", "kernel", "stride", "c_in", "c_out", "out TxHxW", "gate", "k"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:<9} {:<4} {:<8} {:<7} {:>5} {:>5} {:>12} {:<5} {:>3}\n",
            r.name,
            r.layer_type,
            r.kind,
            r.kernel,
            r.stride,
            r.in_channels,
            r.out_channels,
            format!("{}x{}x{}", r.out_t, r.out_h, r.out_w),
            if r.gated { "yes" } else { "no" },
            r.surgery.map_or("-".into(), |k| k.to_string())
        ));
    }
    s
}

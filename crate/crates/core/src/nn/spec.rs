//! Layer notation and the architecture catalog.
//!
//! Layers are written in the compact notation `conv11-32-s4-p5` (kernel 11,
//! 32 filters, stride 4, padding 5), `pool3-s2-p0`, `spp-4-2-1`, `fc-2048`,
//! plus `bn` and `relu` for the normalization and activation that follow
//! every learnable layer. Stride defaults to 1 and padding to 0 when omitted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spp::PyramidSpec;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { kernel: usize, filters: usize, stride: usize, padding: usize },
    MaxPool { size: usize, stride: usize, padding: usize },
    Spp(PyramidSpec),
    Fc { units: usize },
    BatchNorm,
    Relu,
}

impl LayerSpec {
    pub fn is_learnable(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    /// Output `(channels, height, width)` for an input of the given shape.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match *self {
            LayerSpec::Conv { kernel, filters, stride, padding } => {
                let oh = window_out(h, kernel, stride, padding);
                let ow = window_out(w, kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok([filters, oh, ow]),
                    _ => Err(Error::shape(
                        self.to_string(),
                        format!("kernel {kernel} does not fit padded input {h}x{w} (padding {padding})"),
                    )),
                }
            }
            LayerSpec::MaxPool { size, stride, padding } => {
                let oh = window_out(h, size, stride, padding);
                let ow = window_out(w, size, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok([c, oh, ow]),
                    _ => Err(Error::shape(
                        self.to_string(),
                        format!("window {size} larger than padded input {h}x{w} (padding {padding})"),
                    )),
                }
            }
            LayerSpec::Spp(ref pyramid) => {
                if h == 0 || w == 0 {
                    return Err(Error::shape(self.to_string(), "empty input maps"));
                }
                Ok([c * pyramid.units_per_channel(), 1, 1])
            }
            LayerSpec::Fc { units } => Ok([units, 1, 1]),
            LayerSpec::BatchNorm | LayerSpec::Relu => Ok(input),
        }
    }
}

/// `floor((len + 2p - k) / s) + 1`, or `None` when the window does not fit.
pub(crate) fn window_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { kernel, filters, stride, padding } => {
                write!(f, "conv{kernel}-{filters}")?;
                if *stride != 1 {
                    write!(f, "-s{stride}")?;
                }
                write!(f, "-p{padding}")
            }
            LayerSpec::MaxPool { size, stride, padding } => write!(f, "pool{size}-s{stride}-p{padding}"),
            LayerSpec::Spp(pyramid) => write!(f, "{pyramid}"),
            LayerSpec::Fc { units } => write!(f, "fc-{units}"),
            LayerSpec::BatchNorm => f.write_str("bn"),
            LayerSpec::Relu => f.write_str("relu"),
        }
    }
}

fn parse_num(token: &str, field: &str, whole: &str) -> Result<usize> {
    token.parse().map_err(|_| Error::Config(format!("bad {field} '{token}' in layer '{whole}'")))
}

/// Parses the `-sN` / `-pN` suffixes shared by conv and pool rows.
fn parse_stride_padding(parts: &[&str], whole: &str) -> Result<(usize, usize)> {
    let (mut stride, mut padding) = (None, None);
    for part in parts {
        if let Some(v) = part.strip_prefix('s') {
            if stride.replace(parse_num(v, "stride", whole)?).is_some() {
                return Err(Error::Config(format!("duplicate stride in '{whole}'")));
            }
        } else if let Some(v) = part.strip_prefix('p') {
            if padding.replace(parse_num(v, "padding", whole)?).is_some() {
                return Err(Error::Config(format!("duplicate padding in '{whole}'")));
            }
        } else {
            return Err(Error::Config(format!("unexpected '{part}' in layer '{whole}'")));
        }
    }
    let stride = stride.unwrap_or(1);
    if stride == 0 {
        return Err(Error::Config(format!("stride must be >= 1 in '{whole}'")));
    }
    Ok((stride, padding.unwrap_or(0)))
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parts: Vec<&str> = lower.split('-').collect();
        let head = parts[0];
        if lower == "bn" {
            return Ok(LayerSpec::BatchNorm);
        }
        if lower == "relu" {
            return Ok(LayerSpec::Relu);
        }
        if head == "spp" {
            return Ok(LayerSpec::Spp(lower.parse()?));
        }
        if let Some(k) = head.strip_prefix("conv") {
            let kernel = parse_num(k, "kernel", s)?;
            let filters = parts.get(1).ok_or_else(|| Error::Config(format!("missing filter count in '{s}'")))?;
            let filters = parse_num(filters, "filters", s)?;
            let (stride, padding) = parse_stride_padding(&parts[2..], s)?;
            if kernel == 0 || filters == 0 {
                return Err(Error::Config(format!("empty convolution '{s}'")));
            }
            return Ok(LayerSpec::Conv { kernel, filters, stride, padding });
        }
        if let Some(k) = head.strip_prefix("pool") {
            let size = parse_num(k, "pool size", s)?;
            if size == 0 {
                return Err(Error::Config(format!("empty pooling window '{s}'")));
            }
            let (stride, padding) = parse_stride_padding(&parts[1..], s)?;
            return Ok(LayerSpec::MaxPool { size, stride, padding });
        }
        if let Some(index) = head.strip_prefix("fc") {
            // Accepts both `fc-2048` and the indexed `FC1-2048` form.
            if !index.chars().all(|c| c.is_ascii_digit()) || parts.len() != 2 {
                return Err(Error::Config(format!("bad fully-connected layer '{s}'")));
            }
            let units = parse_num(parts[1], "units", s)?;
            if units == 0 {
                return Err(Error::Config(format!("empty fully-connected layer '{s}'")));
            }
            return Ok(LayerSpec::Fc { units });
        }
        Err(Error::Config(format!("unknown layer '{s}'")))
    }
}

/// Declarative network description: body layers plus output heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub input_channels: usize,
    /// Fixed input size for networks without SPP.
    pub nominal_input: Option<(usize, usize)>,
    /// Size `M` of the user-classification softmax head.
    pub users: usize,
    pub forgery_head: bool,
}

impl NetworkSpec {
    /// Space-separated layer notation, e.g. `conv3-32-p1 bn relu spp-4-2-1`.
    pub fn layers_text(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
        text.split_whitespace().map(str::parse).collect()
    }

    /// Only the rows of the compact catalog notation (no `bn` / `relu`).
    pub fn table_rows(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| !matches!(l, LayerSpec::BatchNorm | LayerSpec::Relu))
            .map(ToString::to_string)
            .collect()
    }

    pub fn has_spp(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Spp(_)))
    }

    /// Shape after every layer for a `height x width` input.
    pub fn shapes(&self, height: usize, width: usize) -> Result<Vec<[usize; 3]>> {
        let mut shape = [self.input_channels, height, width];
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Width of the representation fed to the heads (last layer output).
    pub fn feature_dim(&self) -> Result<usize> {
        let (h, w) = self.reference_input();
        let last = self.shapes(h, w)?.last().copied().unwrap_or([self.input_channels, h, w]);
        Ok(last.iter().product())
    }

    /// Input used to derive parameter shapes: the nominal input, or for SPP
    /// networks any size that fits (parameter shapes do not depend on it).
    pub fn reference_input(&self) -> (usize, usize) {
        if let Some(dims) = self.nominal_input {
            return dims;
        }
        // Smallest square input on which every layer is defined.
        let mut side = 1;
        while self.shapes(side, side).is_err() && side < 1 << 14 {
            side += 1;
        }
        (side, side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.users < 1 {
            return Err(Error::Config("user head needs at least one unit".into()));
        }
        if self.input_channels < 1 {
            return Err(Error::Config("input needs at least one channel".into()));
        }
        if !self.has_spp() && self.nominal_input.is_none() {
            return Err(Error::Config(format!(
                "network '{}' has no SPP layer and needs a nominal input size",
                self.name
            )));
        }
        let (h, w) = self.reference_input();
        let shapes = self.shapes(h, w)?;
        if let Some(&[_, sh, sw]) = shapes.last() {
            if sh != 1 || sw != 1 {
                return Err(Error::Config(format!("network '{}' must end in a fully-connected layer", self.name)));
            }
        }
        Ok(())
    }
}

/// Names accepted by [`build_architecture`].
pub const CATALOG: &[&str] = &[
    "SigNet",
    "SigNet-SPP",
    "SigNet-300dpi",
    "SigNet-SPP-300dpi",
    "SigNet-600dpi",
    "SigNet-SPP-600dpi",
    "SigNet-SPP-desk",
    "SigNet-desk",
];

fn catalog_rows(name: &str) -> Option<(&'static str, (usize, usize))> {
    // (conv/pool rows, default nominal input for the fixed-size variant)
    Some(match name {
        "SigNet" => (
            "conv11-96-s4-p0 pool3-s2-p0 conv5-256-p2 pool3-s2-p0 conv3-384-p1 conv3-384-p1 conv3-256-p1 pool3-s2-p0",
            (150, 220),
        ),
        "SigNet-SPP" => (
            "conv11-96-s4-p0 pool3-s2-p0 conv5-256-p2 pool3-s2-p0 conv3-384-p1 conv3-384-p1 conv3-180-p1 spp-4-2-1",
            (150, 220),
        ),
        "SigNet-300dpi" => (
            "conv11-32-s3-p5 pool3-s2-p0 conv5-64-p2 pool3-s3-p0 conv3-128-p1 conv3-128-p1 pool3-s2-p0 conv3-128-p1 pool3-s3-p0",
            (400, 600),
        ),
        "SigNet-SPP-300dpi" => (
            "conv11-32-s3-p5 pool3-s2-p0 conv5-64-p2 pool3-s3-p0 conv3-128-p1 conv3-128-p1 pool3-s2-p0 conv3-128-p1 spp-4-2-1",
            (400, 600),
        ),
        "SigNet-600dpi" => (
            "conv11-32-s4-p5 pool3-s3-p0 conv5-64-p2 pool3-s2-p0 conv3-128-p1 conv3-128-p1 pool2-s2-p0 conv3-128-p1 pool4-s4-p0",
            (778, 1212),
        ),
        "SigNet-SPP-600dpi" => (
            "conv11-32-s4-p5 pool3-s3-p0 conv5-64-p2 pool3-s2-p0 conv3-128-p1 conv3-128-p1 pool2-s2-p0 conv3-128-p1 spp-4-2-1",
            (778, 1212),
        ),
        // Scaled-down variants for CPU-sized experiments; not part of the
        // published catalog.
        "SigNet-SPP-desk" => (
            "conv5-16-s2-p2 pool3-s2-p0 conv3-32-p1 pool3-s2-p0 conv3-32-p1 conv3-32-p1 spp-4-2-1",
            (120, 180),
        ),
        "SigNet-desk" => (
            "conv5-16-s2-p2 pool3-s2-p0 conv3-32-p1 pool3-s2-p0 conv3-32-p1 conv3-32-p1 pool3-s2-p0",
            (120, 180),
        ),
        _ => return None,
    })
}

fn fc_width(name: &str) -> usize {
    if name.ends_with("-desk") {
        128
    } else {
        2048
    }
}

/// Builds a catalog architecture with batch norm and ReLU after every
/// convolution and hidden fully-connected layer.
///
/// `input` overrides the default nominal input of fixed-size networks; it is
/// ignored for SPP networks.
pub fn build_architecture(
    name: &str,
    input: Option<(usize, usize)>,
    users: usize,
    forgery_head: bool,
) -> Result<NetworkSpec> {
    let (rows, default_input) = catalog_rows(name)
        .ok_or_else(|| Error::Config(format!("unknown architecture '{name}' (known: {})", CATALOG.join(", "))))?;
    let mut layers = Vec::new();
    let rows = rows
        .split_whitespace()
        .map(str::parse::<LayerSpec>)
        .chain((0..2).map(|_| Ok(LayerSpec::Fc { units: fc_width(name) })));
    for row in rows {
        let row = row?;
        let learnable = row.is_learnable();
        layers.push(row);
        if learnable {
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::Relu);
        }
    }
    let spec = NetworkSpec {
        name: name.to_string(),
        nominal_input: if layers.iter().any(|l| matches!(l, LayerSpec::Spp(_))) {
            None
        } else {
            Some(input.unwrap_or(default_input))
        },
        layers,
        input_channels: 1,
        users,
        forgery_head,
    };
    spec.validate()?;
    Ok(spec)
}

/// Default fixed input of a catalog entry (used for the fixed-size protocol).
pub fn nominal_input(name: &str) -> Option<(usize, usize)> {
    catalog_rows(name).map(|(_, dims)| dims)
}

/// Serializable reference to a catalog architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureRef {
    pub name: String,
    pub input: Option<(usize, usize)>,
}

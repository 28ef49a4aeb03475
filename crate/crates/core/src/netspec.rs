//! Declarative layer tables for every network in the toolkit.
//!
//! A [`NetworkSpec`] is a flat list of layers; layer 0 is the input and every
//! other layer names the earlier layers it reads from. Two or more inputs are
//! concatenated along the channel axis (a skip connection). Models, parameter
//! shapes, and receptive fields are all derived from the table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial size the architecture tables are written for.
pub const REFERENCE_SIZE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv,
    Tconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Batch normalization followed by ReLU.
    ReluBn,
    Tanh,
    Sigmoid,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub input_refs: Vec<usize>,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/cols appended to a transposed convolution's output.
    #[serde(default)]
    pub output_padding: usize,
    pub activation: Activation,
}

impl LayerSpec {
    fn input(channels: usize) -> Self {
        LayerSpec {
            index: 0,
            kind: LayerKind::Input,
            input_refs: Vec::new(),
            out_channels: channels,
            kernel: 1,
            stride: 1,
            padding: 0,
            output_padding: 0,
            activation: Activation::None,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        self.kind != LayerKind::Input
    }

    pub fn has_batch_norm(&self) -> bool {
        self.activation == Activation::ReluBn
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Patch size the architecture is named for, when it has one.
    pub nominal_rf: Option<usize>,
    pub bottleneck_dim: Option<usize>,
}

/// Channel count and spatial size of one layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl NetworkSpec {
    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSpec { name: self.name.clone(), reason: reason.into() }
    }

    /// Structural checks that do not depend on the input resolution.
    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or_else(|| self.invalid("no layers"))?;
        if first.kind != LayerKind::Input || first.out_channels != self.in_channels {
            return Err(self.invalid("layer 0 must be the input with in_channels channels"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.index != i {
                return Err(self.invalid(format!("layer at position {i} has index {}", layer.index)));
            }
            if i == 0 {
                continue;
            }
            if layer.kind == LayerKind::Input {
                return Err(self.invalid(format!("layer {i}: only layer 0 may be an input")));
            }
            if layer.kernel < 1 {
                return Err(self.invalid(format!("layer {i}: kernel must be >= 1")));
            }
            if !matches!(layer.stride, 1 | 2) {
                return Err(self.invalid(format!("layer {i}: stride must be 1 or 2")));
            }
            if layer.input_refs.is_empty() || layer.input_refs.iter().any(|&r| r >= i) {
                return Err(self.invalid(format!("layer {i}: inputs must reference earlier layers")));
            }
        }
        let last = self.layers.last().expect("non-empty");
        if last.out_channels != self.out_channels {
            return Err(self.invalid("final layer channels differ from out_channels"));
        }
        Ok(())
    }

    /// Concatenated input channel count of layer `index`.
    pub fn layer_in_channels(&self, index: usize) -> usize {
        self.layers[index]
            .input_refs
            .iter()
            .map(|&r| self.layers[r].out_channels)
            .sum()
    }

    /// Propagates an input resolution through the table, returning the output
    /// shape of every layer (including the input at position 0).
    pub fn output_shapes(&self, height: usize, width: usize) -> Result<Vec<Shape>> {
        self.validate()?;
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        shapes.push(Shape { channels: self.in_channels, height, width });
        for layer in &self.layers[1..] {
            let first = shapes[layer.input_refs[0]];
            for &r in &layer.input_refs[1..] {
                let s = shapes[r];
                if (s.height, s.width) != (first.height, first.width) {
                    return Err(self.invalid(format!(
                        "layer {}: skip inputs {} and {} differ spatially",
                        layer.index, first, s
                    )));
                }
            }
            let out_h = layer_extent(layer, first.height)
                .ok_or_else(|| self.invalid(format!("layer {}: input {} too small", layer.index, first)))?;
            let out_w = layer_extent(layer, first.width)
                .ok_or_else(|| self.invalid(format!("layer {}: input {} too small", layer.index, first)))?;
            shapes.push(Shape { channels: layer.out_channels, height: out_h, width: out_w });
        }
        Ok(shapes)
    }

    /// Total number of trainable scalars: weights, biases, and batch-norm
    /// scale/shift.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.is_parameterized())
            .map(|l| {
                let cin = self.layer_in_channels(l.index);
                let mut n = l.kernel * l.kernel * cin * l.out_channels + l.out_channels;
                if l.has_batch_norm() {
                    n += 2 * l.out_channels;
                }
                n
            })
            .sum()
    }
}

fn layer_extent(layer: &LayerSpec, input: usize) -> Option<usize> {
    match layer.kind {
        LayerKind::Input => Some(input),
        LayerKind::Conv => {
            let padded = input + 2 * layer.padding;
            (padded >= layer.kernel).then(|| (padded - layer.kernel) / layer.stride + 1)
        }
        LayerKind::Tconv => {
            let grown = (input.checked_sub(1)?) * layer.stride + layer.kernel + layer.output_padding;
            grown.checked_sub(2 * layer.padding).filter(|&v| v > 0)
        }
    }
}

/// Maximum receptive field of every non-input layer, in input pixels.
///
/// Tracks the receptive field together with the jump (input pixels between
/// adjacent positions of a layer's output grid). A transposed convolution
/// divides the jump before widening the field; it cannot go below one input
/// pixel.
pub fn receptive_field(spec: &NetworkSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut rf = vec![1usize; spec.layers.len()];
    let mut jump = vec![1usize; spec.layers.len()];
    for layer in &spec.layers[1..] {
        let (mut r, mut j) = (0usize, 0usize);
        for &src in &layer.input_refs {
            r = r.max(rf[src]);
            j = j.max(jump[src]);
        }
        match layer.kind {
            LayerKind::Conv => {
                r += (layer.kernel - 1) * j;
                j *= layer.stride;
            }
            LayerKind::Tconv => {
                if j % layer.stride != 0 {
                    return Err(Error::UpsamplingBeyondInput { layer: layer.index });
                }
                j /= layer.stride;
                r += (layer.kernel - 1) * j;
            }
            LayerKind::Input => unreachable!("validated"),
        }
        rf[layer.index] = r;
        jump[layer.index] = j;
    }
    Ok(rf[1..].to_vec())
}

/// Names of the built-in architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinNet {
    Patchclass13,
    Patchclass21,
    Patchclass29,
    Patchclass35,
    Patchclass51,
    GeneratorG,
    DiscriminatorD,
    Diff13,
    Diff21,
    Diff29,
    Diff35,
    Diff51,
}

impl BuiltinNet {
    pub const ALL: [BuiltinNet; 12] = [
        BuiltinNet::Patchclass13,
        BuiltinNet::Patchclass21,
        BuiltinNet::Patchclass29,
        BuiltinNet::Patchclass35,
        BuiltinNet::Patchclass51,
        BuiltinNet::GeneratorG,
        BuiltinNet::DiscriminatorD,
        BuiltinNet::Diff13,
        BuiltinNet::Diff21,
        BuiltinNet::Diff29,
        BuiltinNet::Diff35,
        BuiltinNet::Diff51,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinNet::Patchclass13 => "patchclass13",
            BuiltinNet::Patchclass21 => "patchclass21",
            BuiltinNet::Patchclass29 => "patchclass29",
            BuiltinNet::Patchclass35 => "patchclass35",
            BuiltinNet::Patchclass51 => "patchclass51",
            BuiltinNet::GeneratorG => "generator_g",
            BuiltinNet::DiscriminatorD => "discriminator_d",
            BuiltinNet::Diff13 => "diff13",
            BuiltinNet::Diff21 => "diff21",
            BuiltinNet::Diff29 => "diff29",
            BuiltinNet::Diff35 => "diff35",
            BuiltinNet::Diff51 => "diff51",
        }
    }

    /// Patch classifier with the given nominal receptive field.
    pub fn patchclass(patch: usize) -> Result<Self> {
        match patch {
            13 => Ok(BuiltinNet::Patchclass13),
            21 => Ok(BuiltinNet::Patchclass21),
            29 => Ok(BuiltinNet::Patchclass29),
            35 => Ok(BuiltinNet::Patchclass35),
            51 => Ok(BuiltinNet::Patchclass51),
            other => Err(Error::UnknownSpec(format!("patchclass{other}"))),
        }
    }

    /// Semantic differentiator with the given nominal receptive field.
    pub fn diff(patch: usize) -> Result<Self> {
        match patch {
            13 => Ok(BuiltinNet::Diff13),
            21 => Ok(BuiltinNet::Diff21),
            29 => Ok(BuiltinNet::Diff29),
            35 => Ok(BuiltinNet::Diff35),
            51 => Ok(BuiltinNet::Diff51),
            other => Err(Error::UnknownSpec(format!("diff{other}"))),
        }
    }
}

impl fmt::Display for BuiltinNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuiltinNet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BuiltinNet::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::UnknownSpec(s.to_string()))
    }
}

/// Returns the layer table for a built-in architecture.
pub fn builtin_spec(net: BuiltinNet) -> NetworkSpec {
    match net {
        BuiltinNet::Patchclass13 => patchclass(13, 3),
        BuiltinNet::Patchclass21 => patchclass(21, 3),
        BuiltinNet::Patchclass29 => patchclass(29, 3),
        BuiltinNet::Patchclass35 => patchclass(35, 3),
        BuiltinNet::Patchclass51 => patchclass(51, 3),
        BuiltinNet::Diff13 => patchclass(13, 6),
        BuiltinNet::Diff21 => patchclass(21, 6),
        BuiltinNet::Diff29 => patchclass(29, 6),
        BuiltinNet::Diff35 => patchclass(35, 6),
        BuiltinNet::Diff51 => patchclass(51, 6),
        BuiltinNet::GeneratorG => generator_g(),
        BuiltinNet::DiscriminatorD => discriminator_d(REFERENCE_SIZE),
    }
}

/// Looks up a built-in architecture by name.
pub fn builtin_spec_by_name(name: &str) -> Result<NetworkSpec> {
    name.parse().map(builtin_spec)
}

// (kind, inputs, out_channels, kernel, stride)
type Row = (LayerKind, &'static [usize], usize, usize, usize);

use LayerKind::{Conv as C, Tconv as T};

const PATCHCLASS13: &[Row] = &[
    (C, &[0], 32, 3, 1),
    (C, &[1], 32, 3, 1),
    (C, &[2], 32, 3, 2),
    (T, &[3], 32, 3, 2),
    (T, &[4], 32, 3, 1),
    (T, &[5], 32, 3, 1),
    (C, &[6], 2, 1, 1),
];

const PATCHCLASS21: &[Row] = &[
    (C, &[0], 32, 3, 1),
    (C, &[1], 32, 3, 1),
    (C, &[2], 32, 3, 2),
    (C, &[3], 64, 3, 1),
    (T, &[4], 32, 3, 1),
    (T, &[5], 32, 3, 2),
    (T, &[2, 6], 32, 3, 1),
    (T, &[7], 32, 3, 1),
    (C, &[8], 2, 1, 1),
];

const PATCHCLASS29: &[Row] = &[
    (C, &[0], 32, 3, 1),
    (C, &[1], 32, 3, 1),
    (C, &[2], 32, 3, 2),
    (C, &[3], 64, 3, 1),
    (C, &[4], 64, 3, 1),
    (T, &[5], 64, 3, 1),
    (T, &[6], 32, 3, 1),
    (T, &[7], 32, 3, 2),
    (T, &[2, 8], 32, 3, 1),
    (T, &[9], 32, 3, 1),
    (C, &[10], 2, 1, 1),
];

const PATCHCLASS35: &[Row] = &[
    (C, &[0], 32, 3, 1),
    (C, &[1], 32, 3, 1),
    (C, &[2], 32, 3, 2),
    (C, &[3], 64, 3, 1),
    (C, &[4], 64, 3, 1),
    (C, &[5], 64, 3, 2),
    (T, &[6], 64, 3, 2),
    (T, &[5, 7], 64, 3, 1),
    (T, &[8], 32, 3, 1),
    (T, &[9], 32, 3, 2),
    (T, &[2, 10], 32, 3, 1),
    (T, &[11], 32, 3, 1),
    (C, &[12], 2, 1, 1),
];

const PATCHCLASS51: &[Row] = &[
    (C, &[0], 32, 3, 1),
    (C, &[1], 32, 3, 1),
    (C, &[2], 32, 3, 2),
    (C, &[3], 64, 3, 1),
    (C, &[4], 64, 3, 1),
    (C, &[5], 64, 3, 2),
    (C, &[6], 128, 3, 1),
    (T, &[7], 64, 3, 1),
    (T, &[8], 64, 3, 2),
    (T, &[5, 9], 64, 3, 1),
    (T, &[10], 32, 3, 1),
    (T, &[11], 32, 3, 2),
    (T, &[2, 12], 32, 3, 1),
    (T, &[13], 32, 3, 1),
    (C, &[14], 2, 1, 1),
];

/// Builds a spec from table rows. Every layer but the last is followed by
/// batch norm + ReLU; stride-2 3x3 transposed convolutions get one row of
/// output padding so they exactly double the resolution.
fn from_rows(name: &str, in_channels: usize, rows: &[Row], head: Activation) -> NetworkSpec {
    let mut layers = vec![LayerSpec::input(in_channels)];
    for (i, &(kind, refs, out, kernel, stride)) in rows.iter().enumerate() {
        let last = i + 1 == rows.len();
        // 1x1 heads are listed with padding 1 but keep the input resolution.
        let padding = if kernel == 1 { 0 } else { 1 };
        let output_padding = usize::from(kind == T && stride == 2 && kernel % 2 == 1);
        layers.push(LayerSpec {
            index: i + 1,
            kind,
            input_refs: refs.to_vec(),
            out_channels: out,
            kernel,
            stride,
            padding,
            output_padding,
            activation: if last { head } else { Activation::ReluBn },
        });
    }
    let out_channels = layers.last().map(|l| l.out_channels).unwrap_or(in_channels);
    NetworkSpec {
        name: name.to_string(),
        layers,
        in_channels,
        out_channels,
        nominal_rf: None,
        bottleneck_dim: None,
    }
}

fn patchclass(patch: usize, in_channels: usize) -> NetworkSpec {
    let rows = match patch {
        13 => PATCHCLASS13,
        21 => PATCHCLASS21,
        29 => PATCHCLASS29,
        35 => PATCHCLASS35,
        51 => PATCHCLASS51,
        _ => unreachable!("only builtin patch sizes"),
    };
    let name = if in_channels == 3 { format!("patchclass{patch}") } else { format!("diff{patch}") };
    let mut spec = from_rows(&name, in_channels, rows, Activation::None);
    spec.nominal_rf = Some(patch);
    spec
}

fn generator_g() -> NetworkSpec {
    let encoder: [(usize, usize, usize); 20] = [
        (32, 3, 1),
        (32, 3, 1),
        (32, 4, 2),
        (32, 3, 1),
        (32, 3, 1),
        (64, 4, 2),
        (64, 3, 1),
        (64, 3, 1),
        (64, 4, 2),
        (64, 3, 1),
        (64, 3, 1),
        (128, 4, 2),
        (128, 3, 1),
        (128, 3, 1),
        (256, 4, 2),
        (128, 3, 1),
        (64, 3, 1),
        (32, 3, 1),
        (32, 3, 1),
        (8, 3, 1),
    ];
    let decoder: [(usize, usize, usize); 20] = [
        (16, 3, 1),
        (32, 3, 1),
        (64, 3, 1),
        (128, 3, 1),
        (256, 3, 1),
        (128, 4, 2),
        (128, 3, 1),
        (128, 3, 1),
        (64, 4, 2),
        (64, 3, 1),
        (64, 3, 1),
        (64, 4, 2),
        (64, 3, 1),
        (64, 3, 1),
        (32, 4, 2),
        (32, 3, 1),
        (32, 3, 1),
        (32, 4, 2),
        (32, 3, 1),
        (3, 3, 1),
    ];
    let rows: Vec<Row> = encoder
        .iter()
        .map(|&(c, k, s)| (C, c, k, s))
        .chain(decoder.iter().map(|&(c, k, s)| (T, c, k, s)))
        .enumerate()
        .map(|(i, (kind, c, k, s))| (kind, PREV[i], c, k, s))
        .collect();
    let mut spec = from_rows("generator_g", 3, &rows, Activation::Tanh);
    spec.bottleneck_dim = Some(7 * 7 * 8);
    spec
}

// Sequential inputs for tables without skips: layer i+1 reads layer i.
const PREV: [&[usize]; 40] = [
    &[0], &[1], &[2], &[3], &[4], &[5], &[6], &[7], &[8], &[9], &[10], &[11], &[12], &[13],
    &[14], &[15], &[16], &[17], &[18], &[19], &[20], &[21], &[22], &[23], &[24], &[25], &[26],
    &[27], &[28], &[29], &[30], &[31], &[32], &[33], &[34], &[35], &[36], &[37], &[38], &[39],
];

/// Conditional discriminator for square inputs of side `input_size`.
///
/// Four stride-2 convolutions reduce the input by 16; the final layer's kernel
/// covers the remaining map (14x14 at 224) to produce a single probability.
pub fn discriminator_d(input_size: usize) -> NetworkSpec {
    let tail = (input_size / 16).max(1);
    let rows: [Row; 5] = [
        (C, &[0], 64, 4, 2),
        (C, &[1], 128, 4, 2),
        (C, &[2], 256, 4, 2),
        (C, &[3], 512, 4, 2),
        (C, &[4], 1, tail, 1),
    ];
    let mut spec = from_rows("discriminator_d", 4, &rows, Activation::Sigmoid);
    spec.layers[5].padding = 0;
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_conv(kind: LayerKind, kernel: usize, stride: usize) -> NetworkSpec {
        let mut spec = from_rows("single", 1, &[(kind, &[0], 1, kernel, stride)], Activation::None);
        spec.out_channels = 1;
        spec
    }

    #[test]
    fn single_conv_rf() {
        assert_eq!(receptive_field(&single_conv(C, 3, 1)).unwrap(), vec![3]);
    }

    #[test]
    fn tconv_without_downsampling_is_rejected() {
        let err = receptive_field(&single_conv(T, 3, 2)).unwrap_err();
        assert!(matches!(err, Error::UpsamplingBeyondInput { layer: 1 }));
        assert_eq!(err.to_string(), "upsampling beyond input resolution at layer 1");
    }

    #[test]
    fn names_round_trip() {
        for net in BuiltinNet::ALL {
            assert_eq!(net.as_str().parse::<BuiltinNet>().unwrap(), net);
            let spec = builtin_spec(net);
            assert_eq!(spec.name, net.as_str());
            spec.validate().unwrap();
        }
        assert!(matches!("patchclass17".parse::<BuiltinNet>(), Err(Error::UnknownSpec(_))));
    }

    #[test]
    fn diff_variants_widen_first_layer() {
        let d = builtin_spec(BuiltinNet::Diff21);
        let p = builtin_spec(BuiltinNet::Patchclass21);
        assert_eq!(d.in_channels, 6);
        assert_eq!(d.layers[1..], p.layers[1..]);
        assert_eq!(receptive_field(&d).unwrap(), receptive_field(&p).unwrap());
    }

    #[test]
    fn patchclass13_parameter_count() {
        // 3->32 3x3, 32->32 3x3 x2, three 32->32 3x3 transposed, 32->2 1x1 head.
        let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
        let bn = |c: usize| 2 * c;
        let expected = conv(3, 32, 3)
            + bn(32)
            + 5 * (conv(32, 32, 3) + bn(32))
            + conv(32, 2, 1);
        assert_eq!(builtin_spec(BuiltinNet::Patchclass13).parameter_count(), expected);
    }

    #[test]
    fn mismatched_skip_is_rejected() {
        let mut spec = builtin_spec(BuiltinNet::Patchclass21);
        spec.layers[7].input_refs = vec![3, 6];
        assert!(spec.output_shapes(224, 224).is_err());
    }

    #[test]
    fn toy_resolution_shapes() {
        let g = builtin_spec(BuiltinNet::GeneratorG).output_shapes(64, 64).unwrap();
        assert_eq!(g[20], Shape { channels: 8, height: 2, width: 2 });
        assert_eq!(g[40], Shape { channels: 3, height: 64, width: 64 });
        let d = discriminator_d(64).output_shapes(64, 64).unwrap();
        assert_eq!(d[5], Shape { channels: 1, height: 1, width: 1 });
    }
}

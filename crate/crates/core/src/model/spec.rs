//! Declarative layer stacks and the line-oriented spec file format.
//!
//! ```text
//! input C x H x W
//! conv KxK D stride S pad valid|same [std SIGMA] [in C]
//! fc D [std SIGMA] [in N]
//! maxpool KxK stride S
//! act relu|lrelu A|prelu_shared A|prelu A|identity
//! dropout P
//! softmax CLASSES
//! ```
//!
//! `#` starts a comment. `std` pins a layer's init std regardless of the
//! scheme. `in` declares the expected input channel (conv) or unit (fc)
//! count and is checked against shape inference.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu(f64),
    PreluChannelWise(f64),
    PreluShared(f64),
    Identity,
}

impl ActivationKind {
    /// Negative-side slope at initialization.
    pub fn initial_slope(&self) -> f64 {
        match *self {
            ActivationKind::Relu => 0.0,
            ActivationKind::LeakyRelu(a)
            | ActivationKind::PreluChannelWise(a)
            | ActivationKind::PreluShared(a) => a,
            ActivationKind::Identity => 1.0,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(
            self,
            ActivationKind::PreluChannelWise(_) | ActivationKind::PreluShared(_)
        )
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::Relu => write!(f, "relu"),
            ActivationKind::LeakyRelu(a) => write!(f, "lrelu {a}"),
            ActivationKind::PreluChannelWise(a) => write!(f, "prelu {a}"),
            ActivationKind::PreluShared(a) => write!(f, "prelu_shared {a}"),
            ActivationKind::Identity => write!(f, "identity"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding giving `ceil(size / stride)` outputs; an odd total pad
    /// puts the extra row/column after the input.
    Same,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Input {
        channels: usize,
        height: usize,
        width: usize,
    },
    Conv {
        kernel: usize,
        filters: usize,
        stride: usize,
        padding: Padding,
        std_override: Option<f64>,
        expect_in: Option<usize>,
    },
    Fc {
        units: usize,
        std_override: Option<f64>,
        expect_in: Option<usize>,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Activation(ActivationKind),
    Dropout {
        rate: f64,
    },
    SoftmaxXent {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn conv(kernel: usize, filters: usize, stride: usize, padding: Padding) -> Self {
        LayerSpec::Conv {
            kernel,
            filters,
            stride,
            padding,
            std_override: None,
            expect_in: None,
        }
    }

    pub fn fc(units: usize) -> Self {
        LayerSpec::Fc {
            units,
            std_override: None,
            expect_in: None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Activation(_) => "act",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::SoftmaxXent { .. } => "softmax",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Input {
                channels,
                height,
                width,
            } => write!(f, "input {channels}x{height}x{width}"),
            LayerSpec::Conv {
                kernel,
                filters,
                stride,
                padding,
                std_override,
                expect_in,
            } => {
                let pad = match padding {
                    Padding::Valid => "valid",
                    Padding::Same => "same",
                };
                write!(f, "conv {kernel}x{kernel} {filters} stride {stride} pad {pad}")?;
                if let Some(s) = std_override {
                    write!(f, " std {s}")?;
                }
                if let Some(c) = expect_in {
                    write!(f, " in {c}")?;
                }
                Ok(())
            }
            LayerSpec::Fc {
                units,
                std_override,
                expect_in,
            } => {
                write!(f, "fc {units}")?;
                if let Some(s) = std_override {
                    write!(f, " std {s}")?;
                }
                if let Some(c) = expect_in {
                    write!(f, " in {c}")?;
                }
                Ok(())
            }
            LayerSpec::MaxPool { kernel, stride } => {
                write!(f, "maxpool {kernel}x{kernel} stride {stride}")
            }
            LayerSpec::Activation(kind) => write!(f, "act {kind}"),
            LayerSpec::Dropout { rate } => write!(f, "dropout {rate}"),
            LayerSpec::SoftmaxXent { classes } => write!(f, "softmax {classes}"),
        }
    }
}

/// Per-example feature map shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn batched(&self, batch: usize) -> [usize; 4] {
        [batch, self.channels, self.height, self.width]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A layer with its inferred input/output shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    /// 1-based source line (or position, for programmatic specs).
    pub line: usize,
}

impl Layer {
    pub fn is_weighted(&self) -> bool {
        self.spec.is_weighted()
    }

    /// Leading zero padding (top, left) for a conv layer.
    pub fn conv_padding(&self) -> (usize, usize) {
        match self.spec {
            LayerSpec::Conv {
                kernel,
                stride,
                padding: Padding::Same,
                ..
            } => (
                same_pad_before(self.input.height, kernel, stride),
                same_pad_before(self.input.width, kernel, stride),
            ),
            _ => (0, 0),
        }
    }
}

fn same_out(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

fn same_pad_before(size: usize, kernel: usize, stride: usize) -> usize {
    let out = same_out(size, stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(size);
    total / 2
}

/// A validated layer stack: starts with `input`, ends with `softmax`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            specs.push((parse_line(body, line)?, line));
        }
        Self::build(specs)
    }

    /// Validates a programmatic layer list; positions stand in for lines.
    pub fn from_layers(layers: Vec<LayerSpec>) -> Result<Self> {
        Self::build(layers.into_iter().enumerate().map(|(i, l)| (l, i + 1)).collect())
    }

    fn build(specs: Vec<(LayerSpec, usize)>) -> Result<Self> {
        let Some((first, first_line)) = specs.first() else {
            return Err(Error::Spec {
                line: 0,
                message: "empty spec".into(),
            });
        };
        let mut shape = match *first {
            LayerSpec::Input {
                channels,
                height,
                width,
            } => Shape::new(channels, height, width),
            _ => {
                return Err(Error::Spec {
                    line: *first_line,
                    message: "spec must begin with an input layer".into(),
                })
            }
        };
        if shape.size() == 0 {
            return Err(Error::Spec {
                line: *first_line,
                message: "input dimensions must be positive".into(),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        let last = specs.len() - 1;
        for (pos, (spec, line)) in specs.into_iter().enumerate() {
            let err = |message: String| Error::Spec { line, message };
            let input = shape;
            let output = match &spec {
                LayerSpec::Input { .. } => {
                    if pos != 0 {
                        return Err(err("input layer only allowed first".into()));
                    }
                    input
                }
                LayerSpec::Conv {
                    kernel,
                    filters,
                    stride,
                    padding,
                    std_override,
                    expect_in,
                } => {
                    check_positive(line, &[("kernel", *kernel), ("filters", *filters), ("stride", *stride)])?;
                    check_std(line, *std_override)?;
                    if let Some(c) = *expect_in {
                        if c != input.channels {
                            return Err(Error::ChannelMismatch {
                                line,
                                expected: c,
                                found: input.channels,
                            });
                        }
                    }
                    let (h, w) = match padding {
                        Padding::Same => (same_out(input.height, *stride), same_out(input.width, *stride)),
                        Padding::Valid => {
                            if input.height < *kernel || input.width < *kernel {
                                return Err(err(format!(
                                    "conv {kernel}x{kernel} does not fit input {input}"
                                )));
                            }
                            (
                                (input.height - kernel) / stride + 1,
                                (input.width - kernel) / stride + 1,
                            )
                        }
                    };
                    Shape::new(*filters, h, w)
                }
                LayerSpec::Fc {
                    units,
                    std_override,
                    expect_in,
                } => {
                    check_positive(line, &[("units", *units)])?;
                    check_std(line, *std_override)?;
                    if let Some(n) = *expect_in {
                        if n != input.size() {
                            return Err(Error::ChannelMismatch {
                                line,
                                expected: n,
                                found: input.size(),
                            });
                        }
                    }
                    Shape::new(*units, 1, 1)
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    check_positive(line, &[("kernel", *kernel), ("stride", *stride)])?;
                    if input.height < *kernel || input.width < *kernel {
                        return Err(err(format!(
                            "maxpool {kernel}x{kernel} does not fit input {input}"
                        )));
                    }
                    Shape::new(
                        input.channels,
                        (input.height - kernel) / stride + 1,
                        (input.width - kernel) / stride + 1,
                    )
                }
                LayerSpec::Activation(kind) => {
                    let a = kind.initial_slope();
                    if !a.is_finite() {
                        return Err(err(format!("activation slope must be finite, got {a}")));
                    }
                    input
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(err(format!("dropout rate must be in [0, 1), got {rate}")));
                    }
                    input
                }
                LayerSpec::SoftmaxXent { classes } => {
                    if pos != last {
                        return Err(err("softmax must be the last layer".into()));
                    }
                    check_positive(line, &[("classes", *classes)])?;
                    if *classes != input.size() {
                        return Err(err(format!(
                            "softmax over {classes} classes but previous layer produces {} values",
                            input.size()
                        )));
                    }
                    input
                }
            };
            shape = output;
            layers.push(Layer {
                spec,
                input,
                output,
                line,
            });
        }
        if !matches!(layers.last().map(|l| &l.spec), Some(LayerSpec::SoftmaxXent { .. })) {
            return Err(Error::Spec {
                line: layers.last().map_or(0, |l| l.line),
                message: "spec must end with a softmax layer".into(),
            });
        }
        Ok(NetworkSpec { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.layers[0].output
    }

    pub fn classes(&self) -> usize {
        match self.layers.last().map(|l| &l.spec) {
            Some(LayerSpec::SoftmaxXent { classes }) => *classes,
            _ => unreachable!("validated spec ends with softmax"),
        }
    }

    /// Number of weighted (conv + fc) layers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    /// Positions of the weighted layers in the stack.
    pub fn weighted_positions(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].is_weighted()).collect()
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.is_weighted())
    }

    pub fn activation_positions(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i].spec, LayerSpec::Activation(_)))
            .collect()
    }

    /// The common initial slope of every activation layer, if they agree.
    /// A spec without activations is linear (slope 1).
    pub fn uniform_activation_slope(&self) -> Option<f64> {
        let mut slopes = self.layers.iter().filter_map(|l| match l.spec {
            LayerSpec::Activation(kind) => Some(kind.initial_slope()),
            _ => None,
        });
        match slopes.next() {
            None => Some(1.0),
            Some(first) => slopes.all(|a| a == first).then_some(first),
        }
    }

    /// Same stack with every activation layer replaced by `kind`.
    pub fn with_activation(&self, kind: ActivationKind) -> NetworkSpec {
        let mut out = self.clone();
        for layer in &mut out.layers {
            if let LayerSpec::Activation(k) = &mut layer.spec {
                *k = kind;
            }
        }
        out
    }

    /// Renders the spec back to the file format.
    pub fn to_text(&self) -> String {
        self.layers.iter().map(|l| format!("{}\n", l.spec)).collect()
    }
}

pub fn parse_spec(text: &str) -> Result<NetworkSpec> {
    NetworkSpec::parse(text)
}

fn check_positive(line: usize, fields: &[(&str, usize)]) -> Result<()> {
    for (name, v) in fields {
        if *v == 0 {
            return Err(Error::Spec {
                line,
                message: format!("{name} must be >= 1"),
            });
        }
    }
    Ok(())
}

fn check_std(line: usize, std: Option<f64>) -> Result<()> {
    match std {
        Some(s) if !(s >= 0.0 && s.is_finite()) => Err(Error::Spec {
            line,
            message: format!("std override must be finite and >= 0, got {s}"),
        }),
        _ => Ok(()),
    }
}

fn parse_line(body: &str, line: usize) -> Result<LayerSpec> {
    let tokens: Vec<&str> = body.split_whitespace().collect();
    let err = |message: String| Error::Spec { line, message };
    let num = |tok: Option<&&str>, what: &str| -> Result<usize> {
        let tok = tok.ok_or_else(|| err(format!("missing {what}")))?;
        tok.parse::<usize>()
            .map_err(|_| err(format!("bad {what} '{tok}'")))
    };
    let real = |tok: Option<&&str>, what: &str| -> Result<f64> {
        let tok = tok.ok_or_else(|| err(format!("missing {what}")))?;
        tok.parse::<f64>()
            .map_err(|_| err(format!("bad {what} '{tok}'")))
    };
    let square = |tok: Option<&&str>| -> Result<usize> {
        let tok = tok.ok_or_else(|| err("missing kernel size".into()))?;
        let parts: Vec<&str> = tok.split('x').collect();
        match parts.as_slice() {
            [k] | [k, _] if parts.iter().all(|p| p == k) => k
                .parse::<usize>()
                .map_err(|_| err(format!("bad kernel size '{tok}'"))),
            _ => Err(err(format!("kernel must be square KxK, got '{tok}'"))),
        }
    };

    match tokens[0] {
        "input" => {
            let joined: String = tokens[1..].concat();
            let dims: Vec<&str> = joined.split('x').collect();
            if dims.len() != 3 {
                return Err(err(format!("input expects C x H x W, got '{joined}'")));
            }
            let d: Vec<usize> = dims
                .iter()
                .map(|d| d.parse::<usize>().map_err(|_| err(format!("bad input dim '{d}'"))))
                .collect::<Result<_>>()?;
            Ok(LayerSpec::Input {
                channels: d[0],
                height: d[1],
                width: d[2],
            })
        }
        "conv" => {
            let kernel = square(tokens.get(1))?;
            let filters = num(tokens.get(2), "filter count")?;
            let mut stride = 1;
            let mut padding = Padding::Valid;
            let mut std_override = None;
            let mut expect_in = None;
            let mut i = 3;
            while i < tokens.len() {
                match tokens[i] {
                    "stride" => stride = num(tokens.get(i + 1), "stride")?,
                    "pad" => {
                        padding = match tokens.get(i + 1).copied() {
                            Some("valid") => Padding::Valid,
                            Some("same") => Padding::Same,
                            other => return Err(err(format!("pad must be valid|same, got {other:?}"))),
                        }
                    }
                    "std" => std_override = Some(real(tokens.get(i + 1), "std")?),
                    "in" => expect_in = Some(num(tokens.get(i + 1), "input channels")?),
                    other => return Err(err(format!("unknown conv option '{other}'"))),
                }
                i += 2;
            }
            Ok(LayerSpec::Conv {
                kernel,
                filters,
                stride,
                padding,
                std_override,
                expect_in,
            })
        }
        "fc" => {
            let units = num(tokens.get(1), "unit count")?;
            let mut std_override = None;
            let mut expect_in = None;
            let mut i = 2;
            while i < tokens.len() {
                match tokens[i] {
                    "std" => std_override = Some(real(tokens.get(i + 1), "std")?),
                    "in" => expect_in = Some(num(tokens.get(i + 1), "input units")?),
                    other => return Err(err(format!("unknown fc option '{other}'"))),
                }
                i += 2;
            }
            Ok(LayerSpec::Fc {
                units,
                std_override,
                expect_in,
            })
        }
        "maxpool" => {
            let kernel = square(tokens.get(1))?;
            let stride = match tokens.get(2).copied() {
                Some("stride") => num(tokens.get(3), "stride")?,
                None => kernel,
                Some(other) => return Err(err(format!("unknown maxpool option '{other}'"))),
            };
            Ok(LayerSpec::MaxPool { kernel, stride })
        }
        "act" => {
            let kind = match tokens.get(1).copied() {
                Some("relu") => ActivationKind::Relu,
                Some("identity") => ActivationKind::Identity,
                Some("lrelu") => ActivationKind::LeakyRelu(real(tokens.get(2), "slope")?),
                Some("prelu") => ActivationKind::PreluChannelWise(real(tokens.get(2), "slope")?),
                Some("prelu_shared") => ActivationKind::PreluShared(real(tokens.get(2), "slope")?),
                other => return Err(err(format!("unknown activation {other:?}"))),
            };
            Ok(LayerSpec::Activation(kind))
        }
        "dropout" => Ok(LayerSpec::Dropout {
            rate: real(tokens.get(1), "dropout rate")?,
        }),
        "softmax" => Ok(LayerSpec::SoftmaxXent {
            classes: num(tokens.get(1), "class count")?,
        }),
        other => Err(err(format!("unknown layer keyword '{other}'"))),
    }
}

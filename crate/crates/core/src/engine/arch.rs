//! Layer descriptors and their resolved shapes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    /// Fully connected; spatial inputs are read in channel-major order.
    Dense {
        out: usize,
    },
    /// Square-kernel 2-D convolution with zero padding.
    Conv {
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Tanh,
    Flatten,
}

fn one() -> usize {
    1
}

/// A classifier architecture: input shape plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub input: ImageShape,
    pub layers: Vec<Layer>,
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial(ImageShape),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match self {
            Shape::Spatial(s) => s.len(),
            Shape::Flat(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One layer with its resolved input/output shapes and parameter slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub layer: Layer,
    pub input: Shape,
    pub output: Shape,
    /// Offset of the weights in the flat parameter vector.
    pub offset: usize,
    pub weights: usize,
    pub biases: usize,
}

impl Slot {
    pub fn param_count(&self) -> usize {
        self.weights + self.biases
    }

    pub fn fan_in(&self) -> usize {
        match (self.layer, self.input) {
            (Layer::Dense { .. }, s) => s.len(),
            (Layer::Conv { kernel, .. }, Shape::Spatial(s)) => s.channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// Resolved layout of an [`Arch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub slots: Vec<Slot>,
    pub param_count: usize,
    pub input_len: usize,
    pub class_count: usize,
}

impl Arch {
    pub fn new(input: ImageShape, layers: Vec<Layer>) -> Self {
        Self { input, layers }
    }

    /// `[dense(d → classes)]`
    pub fn linear(input: ImageShape, classes: usize) -> Self {
        Self::new(input, vec![Layer::Dense { out: classes }])
    }

    pub fn mlp(input: ImageShape, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(Layer::Dense { out: h });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { out: classes });
        Self::new(input, layers)
    }

    /// One convolution block followed by a linear read-out.
    pub fn tiny_cnn(input: ImageShape, channels: usize, kernel: usize, classes: usize) -> Self {
        Self::new(
            input,
            vec![
                Layer::Conv {
                    out: channels,
                    kernel,
                    stride: 1,
                    padding: kernel / 2,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { out: classes },
            ],
        )
    }

    /// Resolve shapes and parameter offsets, rejecting incompatible stacks.
    pub fn plan(&self) -> Result<Plan> {
        if self.input.is_empty() {
            return Err(Error::Config(format!("empty input shape {}", self.input)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        let mut shape = Shape::Spatial(self.input);
        let mut offset = 0;
        let mut slots = Vec::with_capacity(self.layers.len());
        for (i, &layer) in self.layers.iter().enumerate() {
            let (output, weights, biases) = match layer {
                Layer::Dense { out } => {
                    if out == 0 {
                        return Err(Error::Config(format!("layer {i}: dense with zero outputs")));
                    }
                    (Shape::Flat(out), out * shape.len(), out)
                }
                Layer::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Shape::Spatial(s) = shape else {
                        return Err(Error::Config(format!(
                            "layer {i}: convolution needs a spatial input, got a flat vector"
                        )));
                    };
                    if out == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!("layer {i}: convolution sizes must be positive")));
                    }
                    let (ph, pw) = (s.height + 2 * padding, s.width + 2 * padding);
                    if kernel > ph || kernel > pw {
                        return Err(Error::Config(format!(
                            "layer {i}: kernel {kernel} exceeds padded input {ph}x{pw}"
                        )));
                    }
                    let oh = (ph - kernel) / stride + 1;
                    let ow = (pw - kernel) / stride + 1;
                    (
                        Shape::Spatial(ImageShape::new(out, oh, ow)),
                        out * s.channels * kernel * kernel,
                        out,
                    )
                }
                Layer::Relu | Layer::Tanh => (shape, 0, 0),
                Layer::Flatten => (Shape::Flat(shape.len()), 0, 0),
            };
            slots.push(Slot {
                layer,
                input: shape,
                output,
                offset,
                weights,
                biases,
            });
            offset += weights + biases;
            shape = output;
        }
        let Shape::Flat(class_count) = shape else {
            return Err(Error::Config("architecture must end in a flat logit vector".into()));
        };
        if class_count < 2 {
            return Err(Error::Config(format!(
                "architecture outputs {class_count} logits, need at least 2"
            )));
        }
        if offset == 0 {
            return Err(Error::Config("architecture has no parameters".into()));
        }
        Ok(Plan {
            slots,
            param_count: offset,
            input_len: self.input.len(),
            class_count,
        })
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Dense { out } => write!(f, "dense {out}"),
            Layer::Conv {
                out,
                kernel,
                stride,
                padding,
            } => write!(f, "conv {out} k{kernel} s{stride} p{padding}"),
            Layer::Relu => f.write_str("relu"),
            Layer::Tanh => f.write_str("tanh"),
            Layer::Flatten => f.write_str("flatten"),
        }
    }
}

/// Text form used in checkpoint headers, e.g.
/// `input 1x8x8; conv 4 k3 s1 p1; relu; flatten; dense 2`.
impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input {}", self.input)?;
        for l in &self.layers {
            write!(f, "; {l}")?;
        }
        Ok(())
    }
}

fn parse_num(tok: &str, prefix: &str, what: &str) -> Result<usize> {
    tok.strip_prefix(prefix)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Config(format!("bad {what} {tok:?}")))
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let toks: Vec<&str> = s.split_whitespace().collect();
        match toks.as_slice() {
            ["dense", out] => Ok(Layer::Dense {
                out: parse_num(out, "", "dense width")?,
            }),
            ["conv", out, k, st, p] => Ok(Layer::Conv {
                out: parse_num(out, "", "conv channels")?,
                kernel: parse_num(k, "k", "kernel")?,
                stride: parse_num(st, "s", "stride")?,
                padding: parse_num(p, "p", "padding")?,
            }),
            ["relu"] => Ok(Layer::Relu),
            ["tanh"] => Ok(Layer::Tanh),
            ["flatten"] => Ok(Layer::Flatten),
            _ => Err(Error::Config(format!("unknown layer {s:?}"))),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(';').map(str::trim).filter(|p| !p.is_empty());
        let head = parts.next().ok_or_else(|| Error::Config("empty architecture".into()))?;
        let dims = head
            .strip_prefix("input ")
            .ok_or_else(|| Error::Config(format!("architecture must start with input, got {head:?}")))?;
        let d: Vec<usize> = dims
            .split('x')
            .map(|t| t.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad input shape {dims:?}")))?;
        let [c, h, w] = d[..] else {
            return Err(Error::Config(format!("bad input shape {dims:?}")));
        };
        let layers = parts.map(str::parse).collect::<Result<Vec<Layer>>>()?;
        Ok(Arch::new(ImageShape::new(c, h, w), layers))
    }
}

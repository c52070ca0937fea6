use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;

/// Hidden widths of the transfer classifier head.
pub const TRANSFER_HIDDEN: [usize; 2] = [1024, 128];
/// Default feature-generator conv widths; with 32x32 input the embedding is
/// `32 * 4 * 4 = 512`.
pub const PHI_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// Feature generator: image to embedding.
    Phi,
    /// Classifier: embedding to logits.
    Psi,
    /// Augmentation transformer: embedding to embedding.
    Omega,
    /// Anything else, e.g. a concatenation of the above.
    Composite,
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Phi => "phi",
            Self::Psi => "psi",
            Self::Omega => "omega",
            Self::Composite => "composite",
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi" => Ok(Self::Phi),
            "psi" => Ok(Self::Psi),
            "omega" => Ok(Self::Omega),
            "composite" => Ok(Self::Composite),
            _ => Err(Error::Format(format!("unknown network role `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Affine { .. })
    }

    /// `(weight shape, bias shape)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
            Layer::Affine { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` for fan-scaled initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            Layer::Affine { inputs, outputs } => Some((inputs, outputs)),
            _ => None,
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (*self, input) {
            (
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                &[c, h, w],
            ) => {
                if c != in_channels {
                    return Err(Error::dim(format!(
                        "conv expects {in_channels} channels, input has {c}"
                    )));
                }
                let g = ConvGeometry {
                    in_channels,
                    height: h,
                    width: w,
                    out_channels,
                    kernel_h: kernel,
                    kernel_w: kernel,
                    stride,
                    padding,
                };
                g.validate()?;
                Ok(vec![out_channels, g.out_h(), g.out_w()])
            }
            (Layer::Affine { inputs, outputs }, &[d]) if d == inputs => Ok(vec![outputs]),
            (Layer::Relu, s) => Ok(s.to_vec()),
            (Layer::MaxPool2, &[c, h, w]) if h >= 2 && w >= 2 => Ok(vec![c, h / 2, w / 2]),
            (Layer::Flatten, s) => Ok(vec![s.iter().product()]),
            (layer, s) => Err(Error::dim(format!("layer {layer} cannot take input {s:?}"))),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv{in_channels}-{out_channels}k{kernel}s{stride}p{padding}"),
            Layer::Affine { inputs, outputs } => write!(f, "fc{inputs}-{outputs}"),
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool2 => f.write_str("pool"),
            Layer::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad layer `{s}`"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        match s {
            "relu" => Ok(Layer::Relu),
            "pool" => Ok(Layer::MaxPool2),
            "flatten" => Ok(Layer::Flatten),
            _ => {
                if let Some(rest) = s.strip_prefix("fc") {
                    let (a, b) = rest.split_once('-').ok_or_else(bad)?;
                    Ok(Layer::Affine {
                        inputs: num(a)?,
                        outputs: num(b)?,
                    })
                } else if let Some(rest) = s.strip_prefix("conv") {
                    let (cin, rest) = rest.split_once('-').ok_or_else(bad)?;
                    let (cout, rest) = rest.split_once('k').ok_or_else(bad)?;
                    let (k, rest) = rest.split_once('s').ok_or_else(bad)?;
                    let (st, p) = rest.split_once('p').ok_or_else(bad)?;
                    Ok(Layer::Conv {
                        in_channels: num(cin)?,
                        out_channels: num(cout)?,
                        kernel: num(k)?,
                        stride: num(st)?,
                        padding: num(p)?,
                    })
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Declarative network: role, per-sample input shape and an ordered layer list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Validates layer composition and the role's structural rules.
    pub fn new(role: Role, input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let spec = Self {
            role,
            input_shape,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-sample shapes entering each layer, followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::dim(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("non-empty"))
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.output_shape()?;
        match self.role {
            Role::Phi => {
                if self.layers.last() != Some(&Layer::Flatten) {
                    return Err(Error::dim("a feature generator must end in flatten"));
                }
            }
            Role::Psi => {
                if self.input_shape.len() != 1 || out.len() != 1 {
                    return Err(Error::dim("a classifier maps a vector to a vector"));
                }
            }
            Role::Omega => {
                let d = match *self.input_shape {
                    [d] => d,
                    _ => return Err(Error::dim("an augmentation transformer takes a vector")),
                };
                let expected = [
                    Layer::Affine {
                        inputs: d,
                        outputs: 2 * d,
                    },
                    Layer::Relu,
                    Layer::Affine {
                        inputs: 2 * d,
                        outputs: d,
                    },
                ];
                if self.layers != expected {
                    return Err(Error::dim(format!(
                        "augmentation transformer for dim {d} must be fc{d}-{}, relu, fc{}-{d}",
                        2 * d,
                        2 * d
                    )));
                }
            }
            Role::Composite => {}
        }
        Ok(())
    }

    /// Conv/relu/pool blocks over `channels`, then flatten.
    pub fn phi(input_shape: [usize; 3], channels: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = input_shape[0];
        for &out in channels {
            layers.push(Layer::Conv {
                in_channels: c,
                out_channels: out,
                kernel: 3,
                stride: 1,
                padding: 1,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            c = out;
        }
        layers.push(Layer::Flatten);
        Self::new(Role::Phi, input_shape.to_vec(), layers)
    }

    pub fn phi_default() -> Self {
        Self::phi([3, 32, 32], &PHI_CHANNELS).expect("default feature generator is valid")
    }

    /// Single affine layer from embedding to classes.
    pub fn psi_base(embedding_dim: usize, classes: usize) -> Result<Self> {
        Self::new(
            Role::Psi,
            vec![embedding_dim],
            vec![Layer::Affine {
                inputs: embedding_dim,
                outputs: classes,
            }],
        )
    }

    /// Three affine layers (1024, 128, classes) with relu between.
    pub fn psi_transfer(embedding_dim: usize, classes: usize) -> Result<Self> {
        let [h1, h2] = TRANSFER_HIDDEN;
        Self::new(
            Role::Psi,
            vec![embedding_dim],
            vec![
                Layer::Affine {
                    inputs: embedding_dim,
                    outputs: h1,
                },
                Layer::Relu,
                Layer::Affine { inputs: h1, outputs: h2 },
                Layer::Relu,
                Layer::Affine {
                    inputs: h2,
                    outputs: classes,
                },
            ],
        )
    }

    /// `d -> 2d -> d` with relu in between.
    pub fn omega(embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::dim("embedding dimension must be positive"));
        }
        let d = embedding_dim;
        Self::new(
            Role::Omega,
            vec![d],
            vec![
                Layer::Affine {
                    inputs: d,
                    outputs: 2 * d,
                },
                Layer::Relu,
                Layer::Affine {
                    inputs: 2 * d,
                    outputs: d,
                },
            ],
        )
    }

    /// The layers of `parts` run back to back.
    pub fn concat(parts: &[&NetworkSpec]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("nothing to concatenate"))?;
        let layers = parts.iter().flat_map(|p| p.layers.iter().copied()).collect();
        Self::new(Role::Composite, first.input_shape.clone(), layers)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::param_shapes)
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum()
    }

    /// 64-bit FNV-1a of the canonical text form.
    pub fn digest(&self) -> u64 {
        fnv1a(self.to_string().as_bytes())
    }
}

/// Canonical text: `role|CxHxW|layer,layer,...`.
impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(usize::to_string).collect();
        let layers: Vec<String> = self.layers.iter().map(Layer::to_string).collect();
        write!(f, "{}|{}|{}", self.role.name(), dims.join("x"), layers.join(","))
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('|');
        let (Some(role), Some(dims), Some(layers), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Format(format!("bad network spec `{s}`")));
        };
        let input_shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("bad dims `{dims}`"))))
            .collect::<Result<_>>()?;
        let layers = if layers.is_empty() {
            Vec::new()
        } else {
            layers.split(',').map(str::parse).collect::<Result<_>>()?
        };
        Self::new(role.parse()?, input_shape, layers)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

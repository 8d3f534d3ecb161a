use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEPTHS: [usize; 4] = [1, 2, 3, 4];
pub const WIDTHS: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    #[serde(alias = "leaky-relu")]
    LeakyRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    None,
    Batch,
    Layer,
    Instance,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    None,
    Max,
    Avg,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Sigmoid, Activation::Relu, Activation::LeakyRelu];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leakyrelu",
        }
    }
}

impl Norm {
    pub const ALL: [Norm; 5] = [Norm::None, Norm::Batch, Norm::Layer, Norm::Instance, Norm::Group];

    /// Groups used by group norm.
    pub const GROUPS: usize = 4;

    pub fn name(self) -> &'static str {
        match self {
            Norm::None => "none",
            Norm::Batch => "batch",
            Norm::Layer => "layer",
            Norm::Instance => "instance",
            Norm::Group => "group",
        }
    }
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::None, Pooling::Max, Pooling::Avg];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::None => "none",
            Pooling::Max => "max",
            Pooling::Avg => "avg",
        }
    }
}

macro_rules! parse_by_name {
    ($t:ty) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let s = s.to_ascii_lowercase().replace('-', "");
                <$t>::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::param(format!("unknown {} `{s}`", stringify!($t))))
            }
        }
    };
}
parse_by_name!(Activation);
parse_by_name!(Norm);
parse_by_name!(Pooling);

/// One point of the ConvNet family plus the data shape it is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub norm: Norm,
    pub pooling: Pooling,
    /// `[C, H, W]`.
    pub input: [usize; 3],
    pub num_classes: usize,
}

impl ConvNetSpec {
    /// Three blocks of 128 channels with instance norm, ReLU and average pooling;
    /// four blocks for inputs of 64 pixels or more.
    pub fn default_for(input: [usize; 3], num_classes: usize) -> Self {
        ConvNetSpec {
            depth: if input[1] >= 64 { 4 } else { 3 },
            width: 128,
            activation: Activation::Relu,
            norm: Norm::Instance,
            pooling: Pooling::Avg,
            input,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !DEPTHS.contains(&self.depth) {
            return Err(Error::param(format!("depth {} not in {DEPTHS:?}", self.depth)));
        }
        if !WIDTHS.contains(&self.width) {
            return Err(Error::param(format!("width {} not in {WIDTHS:?}", self.width)));
        }
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 || self.num_classes == 0 {
            return Err(Error::param("input shape and class count must be positive"));
        }
        if self.pooling != Pooling::None {
            let f = 1 << self.depth;
            if h % f != 0 || w % f != 0 {
                return Err(Error::param(format!(
                    "{h}×{w} input cannot be halved {} times exactly",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    /// `[C_l, H_l, W_l]` of each block output.
    pub fn block_shapes(&self) -> Vec<[usize; 3]> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        (0..self.depth)
            .map(|_| {
                if self.pooling != Pooling::None {
                    h /= 2;
                    w /= 2;
                }
                [self.width, h, w]
            })
            .collect()
    }

    pub fn embedding_size(&self) -> usize {
        self.block_shapes().last().map(|s| s.iter().product()).unwrap_or(0)
    }

    /// Canonical name `D{d}-W{w}-{act}-{norm}-{pool}`.
    pub fn canonical(&self) -> String {
        self.to_string()
    }

    /// Parses a canonical name for the given data shape.
    pub fn parse(name: &str, input: [usize; 3], num_classes: usize) -> Result<Self> {
        let parts: Vec<&str> = name.split('-').collect();
        let bad = || Error::param(format!("malformed spec name `{name}`"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let depth = parts[0].strip_prefix('D').and_then(|d| d.parse().ok()).ok_or_else(bad)?;
        let width = parts[1].strip_prefix('W').and_then(|d| d.parse().ok()).ok_or_else(bad)?;
        let spec = ConvNetSpec {
            depth,
            width,
            activation: parts[2].parse()?,
            norm: parts[3].parse()?,
            pooling: parts[4].parse()?,
            input,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Architecture choice independent of the data shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Encoder {
    /// Defaults to 3, or 4 for inputs of 64 pixels or more.
    pub depth: Option<usize>,
    pub width: usize,
    pub activation: Activation,
    pub norm: Norm,
    pub pooling: Pooling,
}

impl Default for Encoder {
    fn default() -> Self {
        Encoder {
            depth: None,
            width: 128,
            activation: Activation::Relu,
            norm: Norm::Instance,
            pooling: Pooling::Avg,
        }
    }
}

impl Encoder {
    pub fn spec(&self, input: [usize; 3], num_classes: usize) -> ConvNetSpec {
        let base = ConvNetSpec::default_for(input, num_classes);
        ConvNetSpec {
            depth: self.depth.unwrap_or(base.depth),
            width: self.width,
            activation: self.activation,
            norm: self.norm,
            pooling: self.pooling,
            ..base
        }
    }

    pub fn from_spec(spec: &ConvNetSpec) -> Self {
        Encoder {
            depth: Some(spec.depth),
            width: spec.width,
            activation: spec.activation,
            norm: spec.norm,
            pooling: spec.pooling,
        }
    }
}

impl fmt::Display for ConvNetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "D{}-W{}-{}-{}-{}",
            self.depth,
            self.width,
            self.activation.name(),
            self.norm.name(),
            self.pooling.name()
        )
    }
}

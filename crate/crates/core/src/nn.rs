//! Layer, block and network specifications, seeded initialization, and the
//! block forward pass.
//!
//! A network is an ordered list of blocks; the classifier is the final
//! linear layer of the last block. Blocks are the unit the tree module
//! duplicates.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Op, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Linear {
        input: usize,
        output: usize,
    },
    Relu,
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        size: usize,
    },
    Flatten,
}

impl LayerSpec {
    /// Shapes of the trainable tensors, weight first, then bias.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Linear { input, output } => vec![vec![input, output], vec![output]],
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { input, .. } => input,
            LayerSpec::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample `input` shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: String| Err(Error::InvalidNetwork(format!("{self}: {what}")));
        match *self {
            LayerSpec::Linear { input: i, output } => match input {
                [n] if *n == i => Ok(vec![output]),
                _ => mismatch(format!("expects input [{i}], got {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => match *input {
                [c, h, w] if c == in_ch && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                    Ok(vec![
                        out_ch,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                _ => mismatch(format!("does not fit input {input:?}")),
            },
            LayerSpec::MaxPool { size } => match *input {
                [c, h, w] if size <= h && size <= w => Ok(vec![c, h / size, w / size]),
                _ => mismatch(format!("does not fit input {input:?}")),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let dims_ok = match *self {
            LayerSpec::Linear { input, output } => input > 0 && output > 0,
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0,
            LayerSpec::MaxPool { size } => size > 0,
            LayerSpec::Relu | LayerSpec::Flatten => true,
        };
        if dims_ok {
            Ok(())
        } else {
            Err(Error::InvalidNetwork(format!("{self}: dimensions must be positive")))
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Linear { input, output } => write!(f, "linear {input} {output}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => write!(f, "conv {in_ch} {out_ch} {kernel} {stride} {padding}"),
            LayerSpec::MaxPool { size } => write!(f, "maxpool {size}"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    /// Parses `linear IN OUT`, `relu`, `conv IN OUT K [STRIDE [PAD]]`,
    /// `maxpool K` or `flatten`.
    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let bad = || Error::InvalidNetwork(format!("cannot parse layer `{}`", s.trim()));
        let nums = |ws: &[&str]| -> Result<Vec<usize>> {
            ws.iter().map(|w| w.parse().map_err(|_| bad())).collect()
        };
        let layer = match words.split_first() {
            Some((&"linear", rest)) => match nums(rest)?[..] {
                [input, output] => LayerSpec::Linear { input, output },
                _ => return Err(bad()),
            },
            Some((&"relu", [])) => LayerSpec::Relu,
            Some((&"flatten", [])) => LayerSpec::Flatten,
            Some((&"maxpool", rest)) => match nums(rest)?[..] {
                [size] => LayerSpec::MaxPool { size },
                _ => return Err(bad()),
            },
            Some((&"conv", rest)) => {
                let n = nums(rest)?;
                let (stride, padding) = match n.len() {
                    3 => (1, 0),
                    4 => (n[3], 0),
                    5 => (n[3], n[4]),
                    _ => return Err(bad()),
                };
                LayerSpec::Conv {
                    in_ch: n[0],
                    out_ch: n[1],
                    kernel: n[2],
                    stride,
                    padding,
                }
            }
            _ => return Err(bad()),
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// A depth-contiguous slice of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    layers: Vec<LayerSpec>,
}

impl BlockSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("empty block".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for BlockSpec {
    type Err = Error;

    /// Comma-separated layers, e.g. `linear 2 32, relu`.
    fn from_str(s: &str) -> Result<Self> {
        let layers = s
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<LayerSpec>>>()?;
        Self::new(layers)
    }
}

/// The original (pre-tree) network: an input shape and `H >= 2` blocks, the
/// last of which ends in the classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    blocks: Vec<BlockSpec>,
    classes: usize,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, blocks: Vec<BlockSpec>) -> Result<Self> {
        if blocks.len() < 2 {
            return Err(Error::InvalidNetwork(format!(
                "need at least 2 blocks, got {}",
                blocks.len()
            )));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.clone();
        for (d, b) in blocks.iter().enumerate() {
            shape = b
                .output_shape(&shape)
                .map_err(|e| Error::InvalidNetwork(format!("block {}: {e}", d + 1)))?;
        }
        let Some(LayerSpec::Linear { output, .. }) = blocks.last().and_then(|b| b.layers.last())
        else {
            return Err(Error::InvalidNetwork(
                "last block must end in a linear classifier".into(),
            ));
        };
        let classes = *output;
        Ok(Self {
            input_shape,
            blocks,
            classes,
        })
    }

    /// Fully connected network of `depth` blocks: `linear, relu` blocks of
    /// `width` units, and a last block `linear, relu, linear -> classes`.
    pub fn mlp(input: usize, width: usize, depth: usize, classes: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(depth);
        let mut prev = input;
        for _ in 0..depth.saturating_sub(1) {
            blocks.push(BlockSpec::new(vec![
                LayerSpec::Linear {
                    input: prev,
                    output: width,
                },
                LayerSpec::Relu,
            ])?);
            prev = width;
        }
        blocks.push(BlockSpec::new(vec![
            LayerSpec::Linear {
                input: prev,
                output: width,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                input: width,
                output: classes,
            },
        ])?);
        Self::new(vec![input], blocks)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(BlockSpec::param_count).sum()
    }
}

/// Trainable tensors of one block instance, in layer order (weight then bias
/// for each parameterized layer).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    tensors: Vec<Tensor>,
}

impl BlockParams {
    pub fn new(block: &BlockSpec, tensors: Vec<Tensor>) -> Result<Self> {
        let expected: Vec<Vec<usize>> = block.layers.iter().flat_map(|l| l.param_shapes()).collect();
        let actual: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        if expected != actual {
            return Err(Error::InvalidNetwork(format!(
                "parameter shapes {actual:?} do not match block `{block}` ({expected:?})"
            )));
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    pub fn bind_constant(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(b"tsa-init");
    bytes
}

/// Fan-in uniform initialization: weights drawn from
/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases zero.
///
/// Each layer draws from its own ChaCha stream selected by
/// `(instance_id, layer_index)`, so the result is a pure function of
/// `(block, seed, instance_id)` and sibling instances differ.
pub fn init_params(block: &BlockSpec, seed: u64, instance_id: u32) -> BlockParams {
    let mut tensors = Vec::new();
    for (li, layer) in block.layers.iter().enumerate() {
        let shapes = layer.param_shapes();
        let [weight, bias] = &shapes[..] else {
            continue;
        };
        let mut rng = ChaCha8Rng::from_seed(seed_bytes(seed));
        rng.set_stream(((instance_id as u64) << 32) | li as u64);
        let bound = (6.0 / layer.fan_in() as f64).sqrt();
        let n: usize = weight.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        tensors.push(Tensor::new(weight.clone(), values).expect("shape from spec"));
        tensors.push(Tensor::zeros(bias));
    }
    BlockParams { tensors }
}

/// Applies every layer of `block` to a batched `input` node.
///
/// `params` are the block's tensors as bound into `g` (see
/// [`BlockParams::bind`]).
pub fn block_forward(g: &mut Graph, block: &BlockSpec, params: &[NodeId], input: NodeId) -> Result<NodeId> {
    let mut x = input;
    let mut next = params.iter().copied();
    let mut take = |what: &str| {
        next.next()
            .ok_or_else(|| Error::InvalidNetwork(format!("missing {what} parameter for `{block}`")))
    };
    for layer in &block.layers {
        x = match *layer {
            LayerSpec::Linear { .. } => {
                let (w, b) = (take("weight")?, take("bias")?);
                let xw = g.matmul(x, w)?;
                g.add(xw, b)?
            }
            LayerSpec::Relu => g.relu(x)?,
            LayerSpec::Conv {
                stride, padding, ..
            } => {
                let (w, b) = (take("weight")?, take("bias")?);
                g.apply(Op::Conv2d { stride, padding }, &[x, w, b])?
            }
            LayerSpec::MaxPool { size } => g.apply(Op::MaxPool2d { size }, &[x])?,
            LayerSpec::Flatten => {
                let shape = g.shape(x);
                let batch = shape[0];
                let rest = shape[1..].iter().product();
                g.reshape(x, vec![batch, rest])?
            }
        };
    }
    Ok(x)
}

/// A plain chain of block instances: the deployable form of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    blocks: Vec<BlockParams>,
}

impl Network {
    /// Instantiates block `d` with instance id `d`.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(d, b)| init_params(b, seed, d as u32))
            .collect();
        Self { spec, blocks }
    }

    pub fn from_parts(spec: NetworkSpec, blocks: Vec<BlockParams>) -> Result<Self> {
        if blocks.len() != spec.depth() {
            return Err(Error::InvalidNetwork(format!(
                "{} parameter sets for {} blocks",
                blocks.len(),
                spec.depth()
            )));
        }
        for (b, p) in spec.blocks.iter().zip(&blocks) {
            BlockParams::new(b, p.tensors.clone())?;
        }
        Ok(Self { spec, blocks })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockParams] {
        &mut self.blocks
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(BlockParams::param_count).sum()
    }

    /// Logits for a batch whose trailing dimensions match the input shape.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut x = g.constant(batch.clone());
        for (spec, params) in self.spec.blocks.iter().zip(&self.blocks) {
            let ids = params.bind_constant(&mut g);
            x = block_forward(&mut g, spec, &ids, x)?;
        }
        Ok(g.value(x).clone())
    }
}

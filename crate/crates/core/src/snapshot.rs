//! Versioned binary container for a trained [`TreeNetwork`].
//!
//! Little-endian throughout:
//!
//! | field | type |
//! |---|---|
//! | magic | 4 bytes, `TSAM` |
//! | version | u32, currently 1 |
//! | spec length | u32, bytes of the spec text |
//! | spec text | UTF-8, see [`spec_text`] |
//! | node count | u32 |
//! | per node: tensor count | u32 |
//! | per tensor: rank, dims | u32, rank x u32 |
//! | per tensor: values | prod(dims) x f64 |
//!
//! Nodes follow the tree's depth-first order and tensors follow
//! [`BlockParams::tensors`]. Values are stored as `f64`, so a round trip is
//! exact.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::nn::{BlockParams, BlockSpec, NetworkSpec};
use crate::tree::{Topology, TreeNetwork, TreeSpec};
use crate::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"TSAM";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Line-oriented description of a tree:
///
/// ```text
/// input 2
/// block linear 2 8, relu
/// block linear 8 3
/// topology ((())(()))
/// ```
pub fn spec_text(spec: &TreeSpec) -> String {
    let base = spec.base();
    let mut out = String::from("input");
    for d in base.input_shape() {
        out += &format!(" {d}");
    }
    out.push('\n');
    for b in base.blocks() {
        out += &format!("block {b}\n");
    }
    out += &format!("topology {}\n", spec.topology_string());
    out
}

pub fn parse_spec_text(text: &str) -> Result<TreeSpec> {
    let bad = |msg: String| Error::InvalidTree(msg);
    let (mut input, mut blocks, mut topology) = (None, Vec::new(), None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "input" => {
                let dims = rest
                    .split_whitespace()
                    .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad input dimension `{d}`"))))
                    .collect::<Result<Vec<_>>>()?;
                input = Some(dims);
            }
            "block" => blocks.push(rest.parse::<BlockSpec>()?),
            "topology" => topology = Some(Topology::parse_forest(rest.trim())?),
            other => return Err(bad(format!("unknown spec line `{other}`"))),
        }
    }
    let input = input.ok_or_else(|| bad("spec has no `input` line".into()))?;
    let roots = topology.ok_or_else(|| bad("spec has no `topology` line".into()))?;
    TreeSpec::explicit(NetworkSpec::new(input, blocks)?, &roots)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_snapshot(net: &TreeNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    let text = spec_text(net.spec());
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, net.params().len());
    for block in net.params() {
        put_u32(&mut out, block.tensors().len());
        for t in block.tensors() {
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::TruncatedPayload {
            path: self.path.into(),
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_snapshot(bytes: &[u8], path: &Path) -> Result<TreeNetwork> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.into(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != SNAPSHOT_MAGIC {
        return Err(malformed("bad magic, expected `TSAM`".into()));
    }
    let mut r = Reader { bytes, pos: 4, path };
    let version = r.u32()? as u32;
    if version != SNAPSHOT_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| malformed("spec text is not UTF-8".into()))?;
    let spec = parse_spec_text(text)?;
    let nodes = r.u32()?;
    if nodes != spec.node_count() {
        return Err(malformed(format!("{nodes} nodes stored, spec has {}", spec.node_count())));
    }
    let mut params = Vec::with_capacity(nodes);
    for (i, node) in spec.nodes().iter().enumerate() {
        let count = r.u32()?;
        let block = &spec.base().blocks()[node.depth - 1];
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = r.u32()?;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| malformed(format!("node {i}: tensor too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| malformed(format!("node {i}: tensor too large")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::new(dims, data)?);
        }
        params.push(BlockParams::new(block, tensors)?);
    }
    if r.pos != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    TreeNetwork::from_parts(spec, params)
}

pub fn save_snapshot(net: &TreeNetwork, path: &Path) -> Result<()> {
    fs::write(path, encode_snapshot(net)).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<TreeNetwork> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&bytes, path)
}

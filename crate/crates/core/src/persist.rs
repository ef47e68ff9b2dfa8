//! Versioned little-endian file formats for trained models (`.fsva`) and
//! fitted forests (`.fsif`).
//!
//! Model layout:
//!
//! ```text
//! "FSVA" | version u32 | latent u32 | n_sizes u32 | sizes u32* | train_seed u64 | epochs u64
//!        | n_sections u32 | (name_len u8, name, offset u64, length u64)* | f32 payloads
//! ```
//!
//! Offsets are absolute and lengths are in bytes. Forest layout:
//!
//! ```text
//! "FSIF" | version u32 | psi u32 | t u32 | seed u64 | n_features u32 | height_limit u32 | trees
//! ```
//!
//! Each tree is written in pre-order: tag `0` then `split_attr` (LEB128) and
//! `split_value` (f32) for an internal node, tag `1` then `size` (LEB128)
//! for a leaf.

use thiserror::Error;

use crate::iforest::{ITreeNode, IsolationForest};
use crate::vae::{Dense, VaeArch, VaeParams};

pub const MODEL_MAGIC: &[u8; 4] = b"FSVA";
pub const FOREST_MAGIC: &[u8; 4] = b"FSIF";
pub const FORMAT_VERSION: u32 = 1;

const MAX_TREE_DEPTH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PersistError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload in {section}")]
    Truncated { section: String },
    #[error("forest file holds no trees")]
    EmptyForest,
    #[error("malformed file: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, PersistError>;

/// Training provenance stored with a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelMeta {
    pub train_seed: u64,
    pub epochs: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(PersistError::Truncated {
                section: section.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f32(&mut self, section: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn varint(&mut self, section: &str) -> Result<u64> {
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8(section)?;
            let bits = (b & 0x7f) as u64;
            if shift == 63 && bits > 1 {
                return Err(PersistError::Malformed(format!(
                    "varint overflows u64 in {section}"
                )));
            }
            value |= bits << shift;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(PersistError::Malformed(format!(
            "varint longer than 10 bytes in {section}"
        )))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "header")?;
        if got != expected {
            return Err(PersistError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
            });
        }
        let version = self.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(PersistError::UnsupportedVersion(version));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(PersistError::Malformed(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let b = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(b);
            return;
        }
        out.push(b | 0x80);
    }
}

fn to_u32(v: usize, what: &str) -> u32 {
    u32::try_from(v).unwrap_or_else(|_| panic!("{what} {v} does not fit in u32"))
}

fn sections(params: &VaeParams) -> Vec<(String, &[f32])> {
    params
        .layers()
        .into_iter()
        .flat_map(|(name, d)| {
            [
                (format!("{name}.w"), d.weights.as_slice()),
                (format!("{name}.b"), d.bias.as_slice()),
            ]
        })
        .collect()
}

/// Layer sizes as stored: input, hidden widths, latent.
fn layer_sizes(arch: &VaeArch) -> Vec<usize> {
    let mut sizes = vec![arch.input];
    sizes.extend(&arch.hidden);
    sizes.push(arch.latent);
    sizes
}

/// Section names and byte lengths implied by `arch`.
fn expected_sections(arch: &VaeArch) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (name, fan_in, fan_out) in arch.layer_shapes() {
        let w = fan_in
            .checked_mul(fan_out)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| PersistError::Malformed(format!("layer {name} is too large")))?;
        out.push((format!("{name}.w"), w));
        out.push((format!("{name}.b"), fan_out * 4));
    }
    Ok(out)
}

pub fn save_model(params: &VaeParams, meta: &ModelMeta) -> Vec<u8> {
    let sizes = layer_sizes(&params.arch);
    let secs = sections(params);
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(params.arch.latent, "latent dim").to_le_bytes());
    out.extend_from_slice(&to_u32(sizes.len(), "layer count").to_le_bytes());
    for &s in &sizes {
        out.extend_from_slice(&to_u32(s, "layer size").to_le_bytes());
    }
    out.extend_from_slice(&meta.train_seed.to_le_bytes());
    out.extend_from_slice(&meta.epochs.to_le_bytes());
    out.extend_from_slice(&to_u32(secs.len(), "section count").to_le_bytes());
    let table_len: usize = secs.iter().map(|(n, _)| 1 + n.len() + 16).sum();
    let mut offset = (out.len() + table_len) as u64;
    for (name, data) in &secs {
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        let len = (data.len() * 4) as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        offset += len;
    }
    for (_, data) in &secs {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_model(bytes: &[u8]) -> Result<(VaeParams, ModelMeta)> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let latent = r.u32("metadata")? as usize;
    let n_sizes = r.u32("metadata")? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(PersistError::Malformed(format!("{n_sizes} layer sizes")));
    }
    let sizes = (0..n_sizes)
        .map(|_| r.u32("metadata").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let meta = ModelMeta {
        train_seed: r.u64("metadata")?,
        epochs: r.u64("metadata")?,
    };
    if sizes[n_sizes - 1] != latent {
        return Err(PersistError::Malformed(format!(
            "latent dim {latent} disagrees with layer sizes {sizes:?}"
        )));
    }
    let arch = VaeArch {
        input: sizes[0],
        hidden: sizes[1..n_sizes - 1].to_vec(),
        latent,
    };
    arch.validate()
        .map_err(|e| PersistError::Malformed(e.to_string()))?;
    let expected = expected_sections(&arch)?;

    let n_sections = r.u32("section table")? as usize;
    if n_sections != expected.len() {
        return Err(PersistError::Malformed(format!(
            "{n_sections} sections, architecture needs {}",
            expected.len()
        )));
    }
    let mut table = Vec::with_capacity(n_sections);
    for (want, want_len) in &expected {
        let name_len = r.u8("section table")? as usize;
        let name = r.take(name_len, "section table")?;
        if name != want.as_bytes() {
            return Err(PersistError::Malformed(format!(
                "section {:?} where {want} was expected",
                String::from_utf8_lossy(name)
            )));
        }
        let offset = r.u64("section table")?;
        let len = r.u64("section table")?;
        if len != *want_len as u64 {
            return Err(PersistError::Malformed(format!(
                "section {want} declares {len} bytes, architecture needs {want_len}"
            )));
        }
        table.push((want.clone(), offset, len));
    }

    // Locate every section before allocating.
    let mut end = r.pos as u64;
    for (name, offset, len) in &table {
        if *offset != end {
            return Err(PersistError::Malformed(format!(
                "section {name} starts at {offset}, expected {end}"
            )));
        }
        end = offset
            .checked_add(*len)
            .filter(|&s| s <= bytes.len() as u64)
            .ok_or_else(|| PersistError::Truncated {
                section: name.clone(),
            })?;
    }
    if end != bytes.len() as u64 {
        return Err(PersistError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() as u64 - end
        )));
    }

    let mut params = VaeParams::zeros(arch).map_err(|e| PersistError::Malformed(e.to_string()))?;
    let mut dests: Vec<&mut Vec<f32>> = params
        .layers_mut()
        .into_iter()
        .flat_map(|d: &mut Dense<f32>| [&mut d.weights, &mut d.bias])
        .collect();
    for ((_, offset, len), dest) in table.iter().zip(dests.iter_mut()) {
        let raw = &bytes[*offset as usize..(offset + len) as usize];
        for (d, chunk) in dest.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((params, meta))
}

fn put_tree(out: &mut Vec<u8>, node: &ITreeNode) {
    match node {
        ITreeNode::Internal {
            split_attr,
            split_value,
            left,
            right,
        } => {
            out.push(0);
            put_varint(out, *split_attr as u64);
            out.extend_from_slice(&split_value.to_le_bytes());
            put_tree(out, left);
            put_tree(out, right);
        }
        ITreeNode::External { size } => {
            out.push(1);
            put_varint(out, *size as u64);
        }
    }
}

pub fn save_forest(forest: &IsolationForest) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FOREST_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(forest.psi, "psi").to_le_bytes());
    out.extend_from_slice(&to_u32(forest.trees.len(), "tree count").to_le_bytes());
    out.extend_from_slice(&forest.seed.to_le_bytes());
    out.extend_from_slice(&to_u32(forest.n_features, "feature count").to_le_bytes());
    out.extend_from_slice(&to_u32(forest.height_limit, "height limit").to_le_bytes());
    for tree in &forest.trees {
        put_tree(&mut out, tree);
    }
    out
}

struct TreeLimits {
    n_features: usize,
    max_depth: usize,
}

fn read_tree(r: &mut Reader, section: &str, limits: &TreeLimits, depth: usize) -> Result<ITreeNode> {
    match r.u8(section)? {
        0 => {
            if depth >= limits.max_depth {
                return Err(PersistError::Malformed(format!(
                    "{section} deeper than {}",
                    limits.max_depth
                )));
            }
            let attr = r.varint(section)?;
            if attr >= limits.n_features as u64 {
                return Err(PersistError::Malformed(format!(
                    "{section} splits on attribute {attr} of {}",
                    limits.n_features
                )));
            }
            let value = r.f32(section)?;
            if !value.is_finite() {
                return Err(PersistError::Malformed(format!(
                    "{section} has a non-finite split"
                )));
            }
            let left = read_tree(r, section, limits, depth + 1)?;
            let right = read_tree(r, section, limits, depth + 1)?;
            Ok(ITreeNode::Internal {
                split_attr: attr as usize,
                split_value: value,
                left: Box::new(left),
                right: Box::new(right),
            })
        }
        1 => {
            let size = r.varint(section)?;
            if size == 0 || size > u32::MAX as u64 {
                return Err(PersistError::Malformed(format!(
                    "{section} has a leaf of size {size}"
                )));
            }
            Ok(ITreeNode::External { size: size as usize })
        }
        tag => Err(PersistError::Malformed(format!("{section} has node tag {tag}"))),
    }
}

pub fn load_forest(bytes: &[u8]) -> Result<IsolationForest> {
    let mut r = Reader::new(bytes);
    r.magic(FOREST_MAGIC)?;
    let psi = r.u32("header")? as usize;
    let t = r.u32("header")? as usize;
    let seed = r.u64("header")?;
    let n_features = r.u32("header")? as usize;
    let height_limit = r.u32("header")? as usize;
    if t == 0 {
        return Err(PersistError::EmptyForest);
    }
    if psi == 0 || n_features == 0 {
        return Err(PersistError::Malformed(format!(
            "psi {psi} and feature count {n_features} must be positive"
        )));
    }
    let limits = TreeLimits {
        n_features,
        max_depth: height_limit.min(MAX_TREE_DEPTH),
    };
    let mut trees = Vec::with_capacity(t.min(1 << 16));
    for i in 0..t {
        let section = format!("tree {i}");
        let tree = read_tree(&mut r, &section, &limits, 0)?;
        if tree.size() != psi {
            return Err(PersistError::Malformed(format!(
                "{section} holds {} points, psi is {psi}",
                tree.size()
            )));
        }
        trees.push(tree);
    }
    r.finish()?;
    Ok(IsolationForest {
        trees,
        psi,
        height_limit,
        seed,
        n_features,
    })
}

//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SEMFILL\0"
//! u32 header length, JSON header
//! u32 block count
//! per block: u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f32 data[prod(dims)]
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Files are written to a temporary sibling and renamed into place, so a
//! reader never sees a half-written checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semfill_nn::Param;

use crate::config::ExperimentConfig;
use crate::embed::{AttributeNet, SegmentationNet};
use crate::error::{io_err, Error, Result};
use crate::nets::{Arch, ParamSet};

pub const MAGIC: &[u8; 8] = b"SEMFILL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Attribute,
    Segmentation,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub fingerprint: String,
    /// Canonical configuration text the fingerprint was computed from.
    pub config: String,
    pub arch: Arch,
    pub step: u64,
    pub seed: u64,
    /// Arbitrary JSON attached by the writer (reports, running averages,
    /// optimizer counters).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Header {
    pub fn new(kind: CheckpointKind, cfg: &ExperimentConfig, arch: Arch, step: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            fingerprint: cfg.fingerprint(),
            config: cfg.canonical(),
            arch,
            step,
            seed: cfg.seed,
            extra: BTreeMap::new(),
        }
    }

    /// Parses the embedded configuration and checks it against the stored
    /// fingerprint.
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::parse(&self.config, &[])?;
        if cfg.fingerprint() != self.fingerprint {
            return Err(Error::IncompatibleCheckpoint(
                "embedded configuration does not match its fingerprint".into(),
            ));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            blocks: Vec::new(),
        }
    }

    pub fn push_params<N: ParamSet<f32> + ?Sized>(&mut self, net: &N) {
        for p in net.params() {
            self.blocks.push(Block {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            });
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.blocks.push(Block {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing block {name:?}")))
    }

    /// Copies stored values into every parameter of `net`, checking names
    /// and shapes.
    pub fn restore_params<N: ParamSet<f32> + ?Sized>(&self, net: &mut N) -> Result<()> {
        for p in net.params_mut() {
            let b = self.block(&p.name)?;
            check_shape(b, &p.shape)?;
            p.value.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);

        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, &out).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            msg,
        })
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch (truncated or corrupted file)".into());
        }
        let mut r = Reader {
            bytes: body,
            at: MAGIC.len(),
        };
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("header: {e}"))?;
        if header.format_version != FORMAT_VERSION {
            return Err(format!(
                "unsupported format version {}",
                header.format_version
            ));
        }
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name =
                String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "block name is not UTF-8")?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or("block size overflows")?;
            let raw = r.take(len.checked_mul(4).ok_or("block size overflows")?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(Block { name, shape, data });
        }
        if r.at != body.len() {
            return Err("trailing bytes after last block".into());
        }
        Ok(Self { header, blocks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("unexpected end of file")?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

fn check_shape(b: &Block, shape: &[usize]) -> Result<()> {
    if b.shape != shape {
        return Err(Error::IncompatibleCheckpoint(format!(
            "block {:?} has shape {:?}, expected {:?}",
            b.name, b.shape, shape
        )));
    }
    Ok(())
}

/// Copies a stored vector into an arbitrary buffer (e.g. optimizer moments).
pub fn restore_vec(c: &Container, name: &str, dst: &mut [f32]) -> Result<()> {
    let b = c.block(name)?;
    check_shape(b, &[dst.len()])?;
    dst.copy_from_slice(&b.data);
    Ok(())
}

fn expect_kind(c: &Container, kind: CheckpointKind) -> Result<()> {
    if c.header.kind != kind {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected a {kind:?} checkpoint, found {:?}",
            c.header.kind
        )));
    }
    Ok(())
}

/// Frozen attribute network plus the report produced while training it.
pub fn save_attribute_net(
    path: &Path,
    net: &AttributeNet,
    cfg: &ExperimentConfig,
    report: Option<serde_json::Value>,
) -> Result<()> {
    let mut h = Header::new(CheckpointKind::Attribute, cfg, cfg.arch(), 0);
    if let Some(r) = report {
        h.extra.insert("report".into(), r);
    }
    let mut c = Container::new(h);
    c.push_params(net);
    c.write(path)
}

pub fn load_attribute_net(path: &Path) -> Result<(AttributeNet, Header)> {
    let c = Container::read(path)?;
    expect_kind(&c, CheckpointKind::Attribute)?;
    let mut net = AttributeNet::new(&c.header.arch, 0);
    c.restore_params(&mut net)?;
    Ok((net, c.header))
}

pub fn save_segmentation_net(
    path: &Path,
    net: &SegmentationNet,
    cfg: &ExperimentConfig,
    report: Option<serde_json::Value>,
) -> Result<()> {
    let mut h = Header::new(CheckpointKind::Segmentation, cfg, cfg.arch(), 0);
    if let Some(r) = report {
        h.extra.insert("report".into(), r);
    }
    let mut c = Container::new(h);
    c.push_params(net);
    c.write(path)
}

pub fn load_segmentation_net(path: &Path) -> Result<(SegmentationNet, Header)> {
    let c = Container::read(path)?;
    expect_kind(&c, CheckpointKind::Segmentation)?;
    let mut net = SegmentationNet::new(&c.header.arch, 0);
    c.restore_params(&mut net)?;
    Ok((net, c.header))
}

/// Flattened view of a parameter, for tests and diagnostics.
pub fn param_block(p: &Param<f32>) -> Block {
    Block {
        name: p.name.clone(),
        shape: p.shape.clone(),
        data: p.value.clone(),
    }
}

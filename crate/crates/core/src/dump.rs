//! Activation dump container and its on-disk format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "DNAD" | version u32 = 1 | n_layers u32 | n_samples u32 | feat_dim u32
//!        | attn_len u32 | flags u32 (bit0 = attention present)
//! labels: n_samples bytes, each 0 or 1
//! per layer: features f32 [n_samples x feat_dim] row-major,
//!            then attention f32 [n_samples x attn_len] if bit0
//! ```
//!
//! Layer indices are 1-based everywhere in the public API.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"DNAD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
const FLAG_ATTENTION: u32 = 1;

/// Per-layer features, optional per-layer attention and binary labels for a sample set.
///
/// Immutable once constructed; every constructor path validates the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    labels: Vec<u8>,
    features: Vec<Matrix<f32>>,
    attention: Option<Vec<Matrix<f32>>>,
}

impl ActivationDump {
    pub fn new(labels: Vec<u8>, features: Vec<Matrix<f32>>, attention: Option<Vec<Matrix<f32>>>) -> Result<Self> {
        let dump = Self { labels, features, attention };
        dump.validate()?;
        Ok(dump)
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n < 2 {
            return Err(Error::InvalidDump(format!("need at least 2 samples, got {n}")));
        }
        if let Some(bad) = self.labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidDump(format!("label {} at sample {bad} is not 0 or 1", self.labels[bad])));
        }
        if !self.labels.contains(&0) || !self.labels.contains(&1) {
            return Err(Error::SingleClass);
        }
        if self.features.is_empty() {
            return Err(Error::InvalidDump("need at least one layer".into()));
        }
        let d = self.features[0].cols();
        if d == 0 {
            return Err(Error::InvalidDump("feat_dim must be at least 1".into()));
        }
        for (i, m) in self.features.iter().enumerate() {
            if m.rows() != n || m.cols() != d {
                return Err(Error::InvalidDump(format!(
                    "layer {} features are {}x{}, expected {n}x{d}",
                    i + 1,
                    m.rows(),
                    m.cols()
                )));
            }
            if let Some(p) = m.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "layer {} features (sample {}, neuron {})",
                    i + 1,
                    p / d,
                    p % d + 1
                )));
            }
        }
        if let Some(att) = &self.attention {
            if att.len() != self.features.len() {
                return Err(Error::InvalidDump(format!(
                    "{} attention matrices for {} layers",
                    att.len(),
                    self.features.len()
                )));
            }
            let p_len = att[0].cols();
            if p_len == 0 {
                return Err(Error::InvalidDump("attention present but attn_len is 0".into()));
            }
            for (i, m) in att.iter().enumerate() {
                if m.rows() != n || m.cols() != p_len {
                    return Err(Error::InvalidDump(format!(
                        "layer {} attention is {}x{}, expected {n}x{p_len}",
                        i + 1,
                        m.rows(),
                        m.cols()
                    )));
                }
                for &v in m.as_slice() {
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("layer {} attention", i + 1)));
                    }
                    if v < 0.0 {
                        return Err(Error::InvalidDump(format!("layer {} attention has negative entry {v}", i + 1)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.features.len()
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.features[0].cols()
    }

    pub fn attn_len(&self) -> usize {
        self.attention.as_ref().map_or(0, |a| a[0].cols())
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// All feature matrices, 0-based slice order.
    pub fn features(&self) -> &[Matrix<f32>] {
        &self.features
    }

    pub fn attention(&self) -> Option<&[Matrix<f32>]> {
        self.attention.as_deref()
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers() {
            return Err(Error::OutOfRange(format!("layer {layer} not in 1..={}", self.n_layers())));
        }
        Ok(())
    }

    /// Features of a 1-based layer.
    pub fn layer_features(&self, layer: usize) -> Result<&Matrix<f32>> {
        self.check_layer(layer)?;
        Ok(&self.features[layer - 1])
    }

    /// Attention of a 1-based layer.
    pub fn layer_attention(&self, layer: usize) -> Result<&Matrix<f32>> {
        self.check_layer(layer)?;
        self.attention.as_ref().map(|a| &a[layer - 1]).ok_or(Error::AttentionAbsent)
    }

    /// Same layers and labels, features replaced. Used by masking.
    pub(crate) fn with_features(&self, features: Vec<Matrix<f32>>) -> Result<Self> {
        Self::new(self.labels.clone(), features, self.attention.clone())
    }

    /// Keep the given samples (0-based), in the given order.
    pub fn select_samples(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n_samples()) {
            return Err(Error::OutOfRange(format!("sample {bad}")));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        let features = self.features.iter().map(|m| m.select_rows(idx)).collect();
        let attention = self.attention.as_ref().map(|a| a.iter().map(|m| m.select_rows(idx)).collect());
        Self::new(labels, features, attention)
    }

    /// Exact byte length of the serialized form.
    pub fn encoded_len(&self) -> usize {
        let per_layer = self.n_samples() * (self.feat_dim() + self.attn_len()) * 4;
        HEADER_LEN + self.n_samples() + self.n_layers() * per_layer
    }
}

pub fn encode_dump(dump: &ActivationDump) -> Vec<u8> {
    let mut out = Vec::with_capacity(dump.encoded_len());
    out.extend_from_slice(&MAGIC);
    let flags = if dump.has_attention() { FLAG_ATTENTION } else { 0 };
    for v in [
        VERSION,
        dump.n_layers() as u32,
        dump.n_samples() as u32,
        dump.feat_dim() as u32,
        dump.attn_len() as u32,
        flags,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&dump.labels);
    for i in 0..dump.n_layers() {
        for v in dump.features[i].as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(att) = &dump.attention {
            for v in att[i].as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{} ({} bytes needed at offset {}, {} available)",
                what(),
                n,
                self.pos,
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, || format!("header field {what}"))?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize, what: impl Fn() -> String) -> Result<Matrix<f32>> {
        let b = self.take(rows * cols * 4, &what)?;
        let data = b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn decode_dump(buf: &[u8]) -> Result<ActivationDump> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, || "magic".into())?;
    if magic != MAGIC {
        return Err(Error::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_layers = cur.u32("n_layers")? as usize;
    let n_samples = cur.u32("n_samples")? as usize;
    let feat_dim = cur.u32("feat_dim")? as usize;
    let attn_len = cur.u32("attn_len")? as usize;
    let flags = cur.u32("flags")?;
    if flags & !FLAG_ATTENTION != 0 {
        return Err(Error::InvalidDump(format!("unknown flag bits {flags:#x}")));
    }
    let has_attention = flags & FLAG_ATTENTION != 0;
    if !has_attention && attn_len != 0 {
        return Err(Error::InvalidDump(format!("attn_len {attn_len} declared without the attention flag")));
    }

    // Declared size against actual size, in u64 so garbage headers cannot overflow.
    let per_layer = (n_samples as u64)
        .checked_mul(feat_dim as u64 + if has_attention { attn_len as u64 } else { 0 })
        .and_then(|v| v.checked_mul(4));
    let expected = per_layer
        .and_then(|p| p.checked_mul(n_layers as u64))
        .and_then(|v| v.checked_add(HEADER_LEN as u64 + n_samples as u64))
        .ok_or_else(|| Error::InvalidDump("declared sizes overflow".into()))?;
    let actual = buf.len() as u64;
    if actual > expected {
        return Err(Error::TrailingBytes { extra: actual - expected });
    }

    let labels = cur.take(n_samples, || "labels".into())?.to_vec();
    let mut features = Vec::with_capacity(n_layers);
    let mut attention = has_attention.then(|| Vec::with_capacity(n_layers));
    for layer in 1..=n_layers {
        features.push(cur.f32_matrix(n_samples, feat_dim, || format!("layer {layer} features"))?);
        if let Some(att) = attention.as_mut() {
            att.push(cur.f32_matrix(n_samples, attn_len, || format!("layer {layer} attention"))?);
        }
    }
    ActivationDump::new(labels, features, attention)
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let buf = fs::read(path)?;
    decode_dump(&buf)
}

/// Writes atomically: the bytes go to a sibling temp file which is then renamed over `path`.
pub fn write_dump(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<()> {
    dump.validate()?;
    write_atomic(path.as_ref(), &encode_dump(dump))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

/// New dump holding the given 1-based layers in the given order; labels unchanged.
pub fn slice_layers(dump: &ActivationDump, layers: &[usize]) -> Result<ActivationDump> {
    if layers.is_empty() {
        return Err(Error::InvalidConfig("layer selection is empty".into()));
    }
    for &l in layers {
        dump.check_layer(l)?;
    }
    let features = layers.iter().map(|&l| dump.features[l - 1].clone()).collect();
    let attention = dump.attention.as_ref().map(|a| layers.iter().map(|&l| a[l - 1].clone()).collect());
    ActivationDump::new(dump.labels.clone(), features, attention)
}

//! Vision-token corpora: the in-memory types, a synthetic object-structured
//! generator with ground-truth labels, and the OCVT binary container.
//!
//! OCVT layout (all integers little-endian):
//!
//! ```text
//! "OCVT" | version u16 = 1 | item_count u32
//! per item:
//!   id_len u16 | id (UTF-8) | layer_tag i16 | n u32 | c u32 | has_labels u8
//!   n*c f32 row-major | n u32 labels (only if has_labels = 1)
//! ```
//!
//! A JSON sidecar with the same basename and a `.json` extension carries the
//! corpus metadata.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OcvtpError, Result};
use crate::matrix::Matrix;
use crate::params::rng;
use crate::scalar::Scalar;

pub const OCVT_MAGIC: &[u8; 4] = b"OCVT";
pub const OCVT_VERSION: u16 = 1;

/// Layer tag used for generated (non-encoder) tokens.
pub const SYNTHETIC_LAYER: i16 = -1;

/// One image's vision tokens (n×c), stored as `f32` exactly as on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub item_id: String,
    pub layer_tag: i16,
    pub tokens: Matrix<f32>,
    pub labels: Option<Vec<u32>>,
}

impl TokenSequence {
    pub fn n(&self) -> usize {
        self.tokens.rows()
    }

    pub fn c(&self) -> usize {
        self.tokens.cols()
    }

    /// Token matrix in the model's scalar type.
    pub fn tokens_as<T: Scalar>(&self) -> Matrix<T> {
        self.tokens.cast()
    }

    pub fn n_objects(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().collect::<HashSet<_>>().len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() == 0 || self.c() == 0 {
            return Err(OcvtpError::Validation(format!(
                "item {}: empty token matrix ({}x{})",
                self.item_id,
                self.n(),
                self.c()
            )));
        }
        if !self.tokens.is_finite() {
            return Err(OcvtpError::Validation(format!(
                "item {}: non-finite token values",
                self.item_id
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.n() {
                return Err(OcvtpError::Validation(format!(
                    "item {}: {} labels for {} tokens",
                    self.item_id,
                    labels.len(),
                    self.n()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.n()) {
                return Err(OcvtpError::Validation(format!(
                    "item {}: label {bad} out of range",
                    self.item_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenCorpus {
    pub items: Vec<TokenSequence>,
    pub meta: BTreeMap<String, String>,
}

impl TokenCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Shared channel width, `None` for an empty corpus.
    pub fn channels(&self) -> Option<usize> {
        self.items.first().map(TokenSequence::c)
    }

    pub fn min_tokens(&self) -> Option<usize> {
        self.items.iter().map(TokenSequence::n).min()
    }

    pub fn get(&self, item_id: &str) -> Option<&TokenSequence> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let c = self.channels();
        for item in &self.items {
            item.validate()?;
            if Some(item.c()) != c {
                return Err(OcvtpError::Validation(format!(
                    "item {}: channel width {} differs from corpus width {}",
                    item.item_id,
                    item.c(),
                    c.unwrap_or(0)
                )));
            }
            if !ids.insert(item.item_id.as_str()) {
                return Err(OcvtpError::Validation(format!(
                    "duplicate item id {}",
                    item.item_id
                )));
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of ids, shapes and payload bits.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for item in &self.items {
            eat(item.item_id.as_bytes());
            eat(&(item.n() as u64).to_le_bytes());
            eat(&(item.c() as u64).to_le_bytes());
            for v in item.tokens.as_slice() {
                eat(&v.to_le_bytes());
            }
        }
        format!("{h:016x}")
    }
}

/// Parameters of the synthetic object-structured generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_objects: usize,
    /// Inclusive range `[min, max]` of tokens per object.
    pub tokens_per_object: (usize, usize),
    pub c: usize,
    pub center_scale: f64,
    pub noise_scale: f64,
    pub n_items: usize,
    pub seed: u64,
    /// When set, drawn object sizes are rescaled so every item has exactly this many tokens.
    #[serde(default)]
    pub total_tokens: Option<usize>,
    /// When set, the last object is a tiny one with exactly this many tokens.
    #[serde(default)]
    pub tiny_object_tokens: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_objects: 8,
            tokens_per_object: (8, 16),
            c: 64,
            center_scale: 1.0,
            noise_scale: 0.1,
            n_items: 64,
            seed: 0,
            total_tokens: Some(96),
            tiny_object_tokens: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tokens_per_object;
        if self.n_objects == 0 {
            return Err(OcvtpError::config("n_objects", "must be at least 1"));
        }
        if lo == 0 || lo > hi {
            return Err(OcvtpError::config(
                "tokens_per_object",
                format!("need 1 <= min <= max, got [{lo}, {hi}]"),
            ));
        }
        if self.c == 0 {
            return Err(OcvtpError::config("c", "must be at least 1"));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(OcvtpError::config("center_scale", "must be positive"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(OcvtpError::config("noise_scale", "must be nonnegative"));
        }
        let tiny = self.tiny_object_tokens.unwrap_or(0);
        if self.tiny_object_tokens == Some(0) {
            return Err(OcvtpError::config("tiny_object_tokens", "must be at least 1"));
        }
        if self.tiny_object_tokens.is_some() && self.n_objects < 2 {
            return Err(OcvtpError::config("tiny_object_tokens", "needs n_objects >= 2"));
        }
        if let Some(total) = self.total_tokens {
            let regular = self.n_objects - usize::from(self.tiny_object_tokens.is_some());
            if total < tiny + regular {
                return Err(OcvtpError::config(
                    "total_tokens",
                    format!("{total} tokens cannot hold {} objects", self.n_objects),
                ));
            }
        }
        Ok(())
    }

    fn object_sizes(&self, rng: &mut impl Rng) -> Vec<usize> {
        let (lo, hi) = self.tokens_per_object;
        let regular = self.n_objects - usize::from(self.tiny_object_tokens.is_some());
        let mut sizes: Vec<usize> = (0..regular).map(|_| rng.random_range(lo..=hi)).collect();
        if let Some(total) = self.total_tokens {
            let budget = total - self.tiny_object_tokens.unwrap_or(0);
            let drawn: usize = sizes.iter().sum();
            let mut assigned = 0;
            for s in sizes.iter_mut().take(regular - 1) {
                *s = ((*s * budget) as f64 / drawn as f64).floor().max(1.0) as usize;
                assigned += *s;
            }
            // the last regular object absorbs the rounding remainder
            sizes[regular - 1] = budget.saturating_sub(assigned).max(1);
        }
        if let Some(t) = self.tiny_object_tokens {
            sizes.push(t);
        }
        sizes
    }
}

/// Generates a labeled corpus of well-defined object clusters.
///
/// Per item: draw `n_objects` centers from N(0, center_scale²) per channel,
/// emit each object's tokens as center + N(0, noise_scale²) noise. Objects are
/// laid out as contiguous runs in token order, in a random order per item, the
/// way objects occupy connected patch regions of an image. Pure function of
/// `spec`.
pub fn synth_corpus(spec: &SynthSpec) -> Result<TokenCorpus> {
    spec.validate()?;
    let mut r = rng(spec.seed);
    let mut items = Vec::with_capacity(spec.n_items);
    for item in 0..spec.n_items {
        let sizes = spec.object_sizes(&mut r);
        let centers: Vec<Vec<f64>> = (0..spec.n_objects)
            .map(|_| {
                (0..spec.c)
                    .map(|_| spec.center_scale * r.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..spec.n_objects).collect();
        order.shuffle(&mut r);
        let mut rows: Vec<(u32, Vec<f32>)> = Vec::new();
        for obj in order {
            for _ in 0..sizes[obj] {
                let tok = centers[obj]
                    .iter()
                    .map(|&m| (m + spec.noise_scale * r.sample::<f64, _>(StandardNormal)) as f32)
                    .collect();
                rows.push((obj as u32, tok));
            }
        }
        let n = rows.len();
        let labels = rows.iter().map(|(l, _)| *l).collect();
        let data = rows.into_iter().flat_map(|(_, t)| t).collect();
        items.push(TokenSequence {
            item_id: format!("synth-{item:05}"),
            layer_tag: SYNTHETIC_LAYER,
            tokens: Matrix::from_vec(n, spec.c, data)?,
            labels: Some(labels),
        });
    }
    let mut meta = BTreeMap::new();
    meta.insert("source".into(), "synthetic".into());
    meta.insert(
        "synth_spec".into(),
        serde_json::to_string(spec).expect("spec serializes"),
    );
    Ok(TokenCorpus { items, meta })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_corpus(corpus: &TokenCorpus) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(OCVT_MAGIC);
    out.extend_from_slice(&OCVT_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.items.len() as u32).to_le_bytes());
    for item in &corpus.items {
        let id = item.item_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| OcvtpError::Validation(format!("item id too long: {}", item.item_id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&item.layer_tag.to_le_bytes());
        out.extend_from_slice(&(item.n() as u32).to_le_bytes());
        out.extend_from_slice(&(item.c() as u32).to_le_bytes());
        out.push(u8::from(item.labels.is_some()));
        for v in item.tokens.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &item.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.bytes.len() {
            return Err(OcvtpError::Format(format!(
                "truncated file: needed {k} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<TokenCorpus> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(OCVT_MAGIC.as_slice()) {
        return Err(OcvtpError::Format("missing OCVT magic".into()));
    }
    let version = r.u16()?;
    if version != OCVT_VERSION {
        return Err(OcvtpError::Format(format!(
            "unsupported OCVT version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut items = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let item_id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| OcvtpError::Format("item id is not UTF-8".into()))?
            .to_string();
        let layer_tag = r.i16()?;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        if n == 0 || c == 0 {
            return Err(OcvtpError::Validation(format!(
                "item {item_id}: declared shape {n}x{c}"
            )));
        }
        let has_labels = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(OcvtpError::Format(format!(
                    "item {item_id}: has_labels byte {other}"
                )))
            }
        };
        let raw = r.take(n.checked_mul(c).and_then(|k| k.checked_mul(4)).ok_or_else(
            || OcvtpError::Format(format!("item {item_id}: shape overflow")),
        )?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels = if has_labels {
            Some((0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        items.push(TokenSequence {
            item_id,
            layer_tag,
            tokens: Matrix::from_vec(n, c, data)?,
            labels,
        });
    }
    if r.pos != bytes.len() {
        return Err(OcvtpError::Format(format!(
            "{} trailing bytes after last item",
            bytes.len() - r.pos
        )));
    }
    let corpus = TokenCorpus {
        items,
        meta: BTreeMap::new(),
    };
    corpus.validate()?;
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u16,
    item_count: usize,
    meta: BTreeMap<String, String>,
}

pub fn save_corpus(corpus: &TokenCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_corpus(corpus)?;
    fs::write(path, bytes).map_err(|e| OcvtpError::storage(path, e))?;
    let sidecar = Sidecar {
        format: "OCVT".into(),
        version: OCVT_VERSION,
        item_count: corpus.len(),
        meta: corpus.meta.clone(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| OcvtpError::storage(side, e))
}

/// Loads an OCVT file; metadata is taken from the sidecar when one exists.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<TokenCorpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| OcvtpError::storage(path, e))?;
    let mut corpus = decode_corpus(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| OcvtpError::storage(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| OcvtpError::Format(format!("sidecar {}: {e}", side.display())))?;
        corpus.meta = sidecar.meta;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_objects: 3,
            tokens_per_object: (4, 4),
            c: 8,
            n_items: 2,
            seed: 7,
            total_tokens: None,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn synth_counts_by_construction() {
        let corpus = synth_corpus(&small_spec()).unwrap();
        assert_eq!(corpus.len(), 2);
        for item in &corpus.items {
            assert_eq!(item.n(), 12);
            assert_eq!(item.n_objects(), Some(3));
            assert_eq!(item.layer_tag, SYNTHETIC_LAYER);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(
            synth_corpus(&small_spec()).unwrap(),
            synth_corpus(&small_spec()).unwrap()
        );
    }

    #[test]
    fn total_tokens_is_exact() {
        let spec = SynthSpec {
            n_items: 20,
            ..SynthSpec::default()
        };
        for item in synth_corpus(&spec).unwrap().items {
            assert_eq!(item.n(), 96);
            assert_eq!(item.n_objects(), Some(8));
        }
    }

    #[test]
    fn tiny_object_has_requested_size() {
        let spec = SynthSpec {
            tiny_object_tokens: Some(2),
            n_items: 5,
            ..SynthSpec::default()
        };
        for item in synth_corpus(&spec).unwrap().items {
            let labels = item.labels.unwrap();
            assert_eq!(labels.len(), 96);
            assert_eq!(labels.iter().filter(|&&l| l == 7).count(), 2);
        }
    }

    #[test]
    fn invalid_spec_names_field() {
        let spec = SynthSpec {
            tokens_per_object: (5, 4),
            ..small_spec()
        };
        match synth_corpus(&spec) {
            Err(OcvtpError::Config { field, .. }) => assert_eq!(field, "tokens_per_object"),
            other => panic!("unexpected {other:?}"),
        }
        let spec = SynthSpec {
            noise_scale: -1.0,
            ..small_spec()
        };
        assert!(matches!(synth_corpus(&spec), Err(OcvtpError::Config { field, .. }) if field == "noise_scale"));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_corpus(&synth_corpus(&small_spec()).unwrap()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_corpus(&bytes), Err(OcvtpError::Format(_))));
    }

    #[test]
    fn zero_token_item_is_validation_error() {
        let mut out = Vec::new();
        out.extend_from_slice(OCVT_MAGIC);
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.push(b'a');
        out.extend_from_slice(&0i16.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        out.push(0);
        assert!(matches!(decode_corpus(&out), Err(OcvtpError::Validation(_))));
    }

    #[test]
    fn nan_payload_names_item() {
        let mut corpus = synth_corpus(&small_spec()).unwrap();
        corpus.items[1].tokens.set(0, 0, f32::NAN);
        let bytes = encode_corpus(&corpus).unwrap();
        match decode_corpus(&bytes) {
            Err(OcvtpError::Validation(msg)) => assert!(msg.contains("synth-00001")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = encode_corpus(&synth_corpus(&small_spec()).unwrap()).unwrap();
        assert!(matches!(
            decode_corpus(&bytes[..bytes.len() - 3]),
            Err(OcvtpError::Format(_))
        ));
    }
}

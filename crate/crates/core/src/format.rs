//! Little-endian binary formats for descriptor and vocabulary files.
//!
//! Descriptor file: `"BMV1" | u32 dim | u32 image_count |` then per image
//! `u32 image_id | u32 feature_count | feature_count * dim f32`.
//!
//! Vocabulary file: `"BMVC" | u32 dim | u32 size | u64 seed | size * dim f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{Corpus, ImageRecord, Vocabulary};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"BMV1";
pub const VOCABULARY_MAGIC: &[u8; 4] = b"BMVC";

/// Serializes a corpus into the descriptor file layout.
pub fn encode_descriptors(corpus: &Corpus) -> Result<Vec<u8>> {
    let payload: usize = corpus.num_features() * corpus.dim() * 4;
    let mut out = Vec::with_capacity(12 + 8 * corpus.num_images() + payload);
    out.extend_from_slice(DESCRIPTOR_MAGIC);
    put_u32(&mut out, to_u32(corpus.dim(), "dimension")?);
    put_u32(&mut out, to_u32(corpus.num_images(), "image count")?);
    for img in corpus.images() {
        if img.dim() != corpus.dim() {
            return Err(Error::DimMismatch {
                expected: corpus.dim(),
                got: img.dim(),
            });
        }
        put_u32(&mut out, img.image_id);
        put_u32(&mut out, to_u32(img.len(), "feature count")?);
        for v in img.raw() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<Corpus> {
    let mut r = ByteReader::new(bytes);
    r.magic(DESCRIPTOR_MAGIC, "BMV1")?;
    let dim = r.u32("dimension")? as usize;
    let count = r.u32("image count")? as usize;
    if dim == 0 {
        return Err(Error::InvalidCorpus("dimension is zero".into()));
    }
    let mut images = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let at = r.offset();
        let image_id = r.u32("image header")?;
        let n = r
            .u32("image header")
            .map_err(|_| Error::Truncated { image_id, offset: at })? as usize;
        let mut data = Vec::with_capacity(n.saturating_mul(dim).min(1 << 24));
        for _ in 0..n * dim {
            let off = r.offset();
            let v = r.f32().ok_or(Error::Truncated { image_id, offset: off })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { image_id, offset: off });
            }
            data.push(v);
        }
        images.push(ImageRecord::new(image_id, dim, data)?);
    }
    if r.remaining() != 0 {
        return Err(Error::InvalidCorpus(format!(
            "{} trailing bytes at offset {}",
            r.remaining(),
            r.offset()
        )));
    }
    Corpus::new(dim, images)
}

pub fn write_descriptors(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_descriptors(corpus)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_descriptors(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_descriptors(&bytes)
}

pub fn encode_vocabulary(vocab: &Vocabulary) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + vocab.raw().len() * 4);
    out.extend_from_slice(VOCABULARY_MAGIC);
    put_u32(&mut out, to_u32(vocab.dim(), "dimension")?);
    put_u32(&mut out, to_u32(vocab.size(), "vocabulary size")?);
    out.extend_from_slice(&vocab.seed.to_le_bytes());
    for v in vocab.raw() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_vocabulary(bytes: &[u8]) -> Result<Vocabulary> {
    let mut r = ByteReader::new(bytes);
    r.magic(VOCABULARY_MAGIC, "BMVC")?;
    let dim = r.u32("dimension")? as usize;
    let size = r.u32("vocabulary size")? as usize;
    let seed = r.u64("seed")?;
    let mut centroids = Vec::with_capacity(size.saturating_mul(dim).min(1 << 24));
    for _ in 0..size * dim {
        let off = r.offset();
        let v = r.f32().ok_or(Error::TruncatedHeader {
            what: "centroids",
            offset: off,
        })?;
        centroids.push(v);
    }
    Vocabulary::new(dim, centroids, seed)
}

pub fn write_vocabulary(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_vocabulary(vocab)?).map_err(|e| Error::io(path, e))
}

pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vocabulary(&bytes)
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} does not fit in u32")))
}

/// Cursor over a byte buffer that reports offsets on failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], name: &'static str) -> Result<()> {
        match self.take(4) {
            Some(m) if m == magic => Ok(()),
            _ => Err(Error::BadMagic {
                offset: 0,
                expected: name,
            }),
        }
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        let offset = self.offset();
        self.take(1)
            .map(|b| b[0])
            .ok_or(Error::TruncatedHeader { what, offset })
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        let offset = self.offset();
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or(Error::TruncatedHeader { what, offset })
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        let offset = self.offset();
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or(Error::TruncatedHeader { what, offset })
    }

    pub(crate) fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
}

//! One inverted file per vocabulary, with IDF, image norms and optional
//! Hamming signatures.
//!
//! Index file: `"BMIX" | u8 has_signatures | u32 K | u32 N |` then per
//! inverted file `u32 vocab_size |` per word `u32 count | entries` where an
//! entry is `u32 image_id | u32 feature_id [| u64 signature]`; then
//! `N * f32` image norms.
//!
//! Hamming parameters, when present, live in a sidecar file
//! (`<index>.he`): `"BMHE" | u32 K |` per vocabulary `u32 bits | u32 dim |
//! u64 seed | u32 vocab_size | bits*dim f32 | vocab_size*bits f32`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bayes::{OverlapTable, MAX_VOCABULARIES};
use crate::error::{Error, Result};
use crate::format::{put_u32, to_u32, ByteReader};
use crate::hamming::{compute_signature, HammingParams, Signature};
use crate::types::{Corpus, FeatureRef, Vocabulary};
use crate::vocab::quantize_corpus;

pub const INDEX_MAGIC: &[u8; 4] = b"BMIX";
pub const HAMMING_MAGIC: &[u8; 4] = b"BMHE";

/// One posting as handed out to callers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostingEntry {
    pub feature: FeatureRef,
    pub signature: Option<Signature>,
}

/// Entries of one visual word, sorted by `FeatureRef`.
///
/// Besides the packed key, each entry carries the feature's word and
/// signature under every vocabulary (`K` values per entry), so a query can
/// tell which of its `K` lists hold the entry without merging them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PostingList {
    pub(crate) keys: Vec<u64>,
    pub(crate) words: Vec<u32>,
    pub(crate) signatures: Option<Vec<u64>>,
}

impl PostingList {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn features(&self) -> impl Iterator<Item = FeatureRef> + '_ {
        self.keys.iter().map(|&k| FeatureRef::from_key(k))
    }

    /// Entry `i` of a list in vocabulary `k`.
    pub fn entry(&self, i: usize, k: usize, width: u32) -> PostingEntry {
        let stride = self.stride();
        PostingEntry {
            feature: FeatureRef::from_key(self.keys[i]),
            signature: self
                .signatures
                .as_ref()
                .map(|s| Signature::new(s[i * stride + k], width)),
        }
    }

    fn stride(&self) -> usize {
        if self.keys.is_empty() {
            1
        } else {
            self.words.len() / self.keys.len()
        }
    }

    /// Word tuples of all entries, `K` per entry.
    pub fn word_tuples(&self) -> &[u32] {
        &self.words
    }

    /// Signatures of all entries under every vocabulary, `K` per entry.
    pub fn signatures(&self) -> Option<&[u64]> {
        self.signatures.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedFile {
    pub vocabulary_id: usize,
    pub postings: Vec<PostingList>,
    pub idf: Vec<f64>,
}

impl InvertedFile {
    pub fn num_entries(&self) -> usize {
        self.postings.iter().map(PostingList::len).sum()
    }
}

/// Everything a query needs.
#[derive(Debug, Clone)]
pub struct IndexBundle {
    pub vocabularies: Vec<Vocabulary>,
    pub inverted_files: Vec<InvertedFile>,
    pub image_norms: Vec<f32>,
    pub n_images: u32,
    pub hamming: Option<Vec<HammingParams>>,
    pub(crate) overlap: OverlapTable,
}

/// Posting lists for one vocabulary as plain features plus optional raw
/// signature bits, the input of [`IndexBundle::from_postings`].
pub type RawPostings = Vec<Vec<(FeatureRef, u64)>>;

impl IndexBundle {
    /// Assembles a bundle from explicit posting lists; IDF, norms and the
    /// overlap table are derived. Lists need not be sorted.
    pub fn from_postings(
        vocabularies: Vec<Vocabulary>,
        postings: Vec<RawPostings>,
        n_images: u32,
        hamming: Option<Vec<HammingParams>>,
    ) -> Result<Self> {
        let k = vocabularies.len();
        if k == 0 || k > MAX_VOCABULARIES {
            return Err(Error::InvalidIndex(format!(
                "K must be in 1..={MAX_VOCABULARIES}, got {k}"
            )));
        }
        if postings.len() != k {
            return Err(Error::InvalidIndex(format!(
                "{} inverted files for {k} vocabularies",
                postings.len()
            )));
        }
        if n_images == 0 {
            return Err(Error::InvalidIndex("database is empty".into()));
        }
        if let Some(h) = &hamming {
            if h.len() != k {
                return Err(Error::InvalidIndex(format!(
                    "{} Hamming parameter sets for K = {k}",
                    h.len()
                )));
            }
            for (v, p) in vocabularies.iter().zip(h) {
                if p.vocab_size() != v.size() || p.dim() != v.dim() {
                    return Err(Error::InvalidIndex("Hamming parameters do not match vocabulary".into()));
                }
            }
        }
        let with_sigs = hamming.is_some();
        let mut files = Vec::with_capacity(k);
        for (id, (vocab, lists)) in vocabularies.iter().zip(postings).enumerate() {
            if lists.len() != vocab.size() {
                return Err(Error::InvalidIndex(format!(
                    "inverted file {id} has {} lists for a vocabulary of {}",
                    lists.len(),
                    vocab.size()
                )));
            }
            let mut out = Vec::with_capacity(lists.len());
            for mut list in lists {
                list.sort_unstable_by_key(|(f, _)| f.key());
                if let Some(w) = list.windows(2).find(|w| w[0].0 == w[1].0) {
                    return Err(Error::InvalidIndex(format!(
                        "feature {:?} indexed twice in file {id}",
                        w[0].0
                    )));
                }
                if let Some((f, _)) = list.iter().find(|(f, _)| f.image_id >= n_images) {
                    return Err(Error::InvalidIndex(format!("image id {} out of range", f.image_id)));
                }
                out.push(PostingList {
                    keys: list.iter().map(|(f, _)| f.key()).collect(),
                    words: Vec::new(),
                    signatures: with_sigs.then(|| list.iter().map(|(_, s)| *s).collect()),
                });
            }
            files.push(InvertedFile {
                vocabulary_id: id,
                postings: out,
                idf: Vec::new(),
            });
        }
        let norms = derive_norms(&mut files, n_images)?;
        Self::assemble(vocabularies, files, norms, n_images, hamming)
    }

    fn assemble(
        vocabularies: Vec<Vocabulary>,
        mut inverted_files: Vec<InvertedFile>,
        image_norms: Vec<f32>,
        n_images: u32,
        hamming: Option<Vec<HammingParams>>,
    ) -> Result<Self> {
        for f in &mut inverted_files {
            f.idf = compute_idf(&f.postings, n_images);
        }
        let tuples = attach_tuples(&mut inverted_files, hamming.is_some())?;
        let sizes: Vec<usize> = vocabularies.iter().map(Vocabulary::size).collect();
        let overlap = OverlapTable::build(&sizes, tuples.chunks_exact(vocabularies.len()))?;
        Ok(Self {
            vocabularies,
            inverted_files,
            image_norms,
            n_images,
            hamming,
            overlap,
        })
    }

    pub fn num_vocabularies(&self) -> usize {
        self.vocabularies.len()
    }

    pub fn has_signatures(&self) -> bool {
        self.hamming.is_some()
    }

    pub fn dim(&self) -> usize {
        self.vocabularies[0].dim()
    }

    pub fn overlap(&self) -> &OverlapTable {
        &self.overlap
    }

    /// The posting list of `word` in vocabulary `k`.
    pub fn postings(&self, k: usize, word: u32) -> &PostingList {
        &self.inverted_files[k].postings[word as usize]
    }

    pub fn signature_width(&self, k: usize) -> u32 {
        self.hamming.as_ref().map_or(0, |h| h[k].bits)
    }

    /// Checks `vocabularies` against the bundle, for callers loading the
    /// two from separate files.
    pub fn check_vocabularies(&self, vocabularies: &[Vocabulary]) -> Result<()> {
        if vocabularies.len() != self.num_vocabularies() {
            return Err(Error::InvalidIndex(format!(
                "index has K = {} but {} vocabularies were given",
                self.num_vocabularies(),
                vocabularies.len()
            )));
        }
        for (k, (a, b)) in vocabularies.iter().zip(&self.vocabularies).enumerate() {
            if a != b {
                return Err(Error::InvalidIndex(format!(
                    "vocabulary {k} differs from the one indexed"
                )));
            }
        }
        Ok(())
    }
}

/// Quantizes every database feature and files it under its word in each
/// vocabulary.
pub fn build_index(
    db: &Corpus,
    vocabularies: &[Vocabulary],
    hamming: Option<Vec<HammingParams>>,
) -> Result<IndexBundle> {
    if vocabularies.is_empty() {
        return Err(Error::InvalidIndex("at least one vocabulary required".into()));
    }
    let quantized = quantize_corpus(db, vocabularies)?;
    let sigs: Option<Vec<Vec<u64>>> = match &hamming {
        None => None,
        Some(params) => {
            if params.len() != vocabularies.len() {
                return Err(Error::InvalidIndex(format!(
                    "{} Hamming parameter sets for K = {}",
                    params.len(),
                    vocabularies.len()
                )));
            }
            let all: Vec<(FeatureRef, &[f32])> = db.features().collect();
            Some(
                all.par_iter()
                    .zip(&quantized)
                    .map(|((_, x), q)| {
                        q.words
                            .iter()
                            .zip(params)
                            .map(|(&w, p)| compute_signature(x, w, p).map(|s| s.bits))
                            .collect::<Result<Vec<u64>>>()
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    let mut postings: Vec<RawPostings> = vocabularies.iter().map(|v| vec![Vec::new(); v.size()]).collect();
    // Features arrive in key order, so every list is filled already sorted.
    for (i, q) in quantized.iter().enumerate() {
        for (k, &w) in q.words.iter().enumerate() {
            let s = sigs.as_ref().map_or(0, |s| s[i][k]);
            postings[k][w as usize].push((q.feature, s));
        }
    }
    log::info!(
        "indexed {} features of {} images in {} vocabularies",
        quantized.len(),
        db.num_images(),
        vocabularies.len()
    );
    IndexBundle::from_postings(
        vocabularies.to_vec(),
        postings,
        to_u32(db.num_images(), "image count")?,
        hamming,
    )
}

/// `ln(N / n_w)` with `n_w` the number of distinct images in list `w`.
fn compute_idf(postings: &[PostingList], n_images: u32) -> Vec<f64> {
    postings
        .iter()
        .map(|list| {
            let mut distinct = 0usize;
            let mut last = u32::MAX;
            for f in list.features() {
                if f.image_id != last {
                    distinct += 1;
                    last = f.image_id;
                }
            }
            if distinct == 0 {
                0.0
            } else {
                (n_images as f64 / distinct as f64).ln()
            }
        })
        .collect()
}

/// Mean over vocabularies of the L2 norm of each image's tf-idf histogram.
/// Images whose weighted histograms all vanish (possible when every word
/// they use appears in every image) fall back to the mean raw-tf norm so
/// that non-empty images keep a positive norm.
fn derive_norms(files: &mut [InvertedFile], n_images: u32) -> Result<Vec<f32>> {
    let n = n_images as usize;
    let mut weighted = vec![0.0f64; n];
    let mut raw = vec![0.0f64; n];
    for f in files.iter_mut() {
        let idf = compute_idf(&f.postings, n_images);
        let mut sq_w = vec![0.0f64; n];
        let mut sq_r = vec![0.0f64; n];
        for (list, &idf_w) in f.postings.iter().zip(&idf) {
            let mut i = 0;
            let keys = &list.keys;
            while i < keys.len() {
                let img = (keys[i] >> 32) as usize;
                let mut j = i;
                while j < keys.len() && (keys[j] >> 32) as usize == img {
                    j += 1;
                }
                let tf = (j - i) as f64;
                sq_w[img] += (tf * idf_w).powi(2);
                sq_r[img] += tf * tf;
                i = j;
            }
        }
        for i in 0..n {
            weighted[i] += sq_w[i].sqrt();
            raw[i] += sq_r[i].sqrt();
        }
    }
    let k = files.len() as f64;
    Ok(weighted
        .iter()
        .zip(&raw)
        .map(|(&w, &r)| if w > 0.0 { (w / k) as f32 } else { (r / k) as f32 })
        .collect())
}

/// Rebuilds every feature's word tuple (and signatures) from the lists and
/// copies them into each entry. Lists arrive holding only their own
/// signature. Returns the tuples of all features in key order.
fn attach_tuples(files: &mut [InvertedFile], has_sigs: bool) -> Result<Vec<u32>> {
    let k = files.len();
    // Per file: (key, word, position in list), sorted by key.
    let sorted: Vec<Vec<(u64, u32, u32)>> = files
        .iter()
        .map(|file| {
            let mut v: Vec<(u64, u32, u32)> = file
                .postings
                .iter()
                .enumerate()
                .flat_map(|(w, l)| {
                    l.keys
                        .iter()
                        .enumerate()
                        .map(move |(i, &key)| (key, w as u32, i as u32))
                })
                .collect();
            v.sort_unstable();
            v
        })
        .collect();
    let n = sorted[0].len();
    for (fi, v) in sorted.iter().enumerate() {
        if let Some(w) = v.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidIndex(format!(
                "feature {:?} appears twice in inverted file {fi}",
                FeatureRef::from_key(w[0].0)
            )));
        }
        if v.len() != n || v.iter().zip(&sorted[0]).any(|(a, b)| a.0 != b.0) {
            return Err(Error::InvalidIndex(format!(
                "inverted files 0 and {fi} do not index the same features"
            )));
        }
    }
    let mut tuples = vec![0u32; n * k];
    for (fi, v) in sorted.iter().enumerate() {
        for (i, e) in v.iter().enumerate() {
            tuples[i * k + fi] = e.1;
        }
    }
    let mut sigs = vec![0u64; if has_sigs { n * k } else { 0 }];
    if has_sigs {
        for (fi, v) in sorted.iter().enumerate() {
            for (i, e) in v.iter().enumerate() {
                let own = files[fi].postings[e.1 as usize].signatures.as_ref();
                sigs[i * k + fi] = own.map_or(0, |s| s[e.2 as usize]);
            }
        }
    }
    for (fi, v) in sorted.iter().enumerate() {
        for list in &mut files[fi].postings {
            list.words = vec![0; list.keys.len() * k];
            if has_sigs {
                list.signatures = Some(vec![0; list.keys.len() * k]);
            }
        }
        for (i, e) in v.iter().enumerate() {
            let list = &mut files[fi].postings[e.1 as usize];
            let at = e.2 as usize * k;
            list.words[at..at + k].copy_from_slice(&tuples[i * k..(i + 1) * k]);
            if let Some(s) = &mut list.signatures {
                s[at..at + k].copy_from_slice(&sigs[i * k..(i + 1) * k]);
            }
        }
    }
    Ok(tuples)
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

pub fn encode_index(index: &IndexBundle) -> Result<Vec<u8>> {
    let entries: usize = index.inverted_files.iter().map(InvertedFile::num_entries).sum();
    let sigs = index.has_signatures();
    let mut out = Vec::with_capacity(13 + entries * if sigs { 16 } else { 8 } + index.image_norms.len() * 4);
    out.extend_from_slice(INDEX_MAGIC);
    out.push(sigs as u8);
    put_u32(&mut out, to_u32(index.num_vocabularies(), "K")?);
    put_u32(&mut out, index.n_images);
    let k = index.num_vocabularies();
    for (fi, file) in index.inverted_files.iter().enumerate() {
        put_u32(&mut out, to_u32(file.postings.len(), "vocabulary size")?);
        for list in &file.postings {
            put_u32(&mut out, to_u32(list.len(), "posting count")?);
            for (i, &key) in list.keys.iter().enumerate() {
                let f = FeatureRef::from_key(key);
                put_u32(&mut out, f.image_id);
                put_u32(&mut out, f.feature_id);
                if let Some(s) = &list.signatures {
                    out.extend_from_slice(&s[i * k + fi].to_le_bytes());
                }
            }
        }
    }
    for v in &index.image_norms {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes an index; `vocabularies` and `hamming` come from their own files.
pub fn decode_index(
    bytes: &[u8],
    vocabularies: Vec<Vocabulary>,
    hamming: Option<Vec<HammingParams>>,
) -> Result<IndexBundle> {
    let mut r = ByteReader::new(bytes);
    r.magic(INDEX_MAGIC, "BMIX")?;
    let flag = r.u8("signature flag")?;
    if flag > 1 {
        return Err(Error::InvalidIndex(format!("signature flag {flag} is not 0 or 1")));
    }
    let sigs = flag == 1;
    if sigs != hamming.is_some() {
        return Err(Error::InvalidIndex(if sigs {
            "index carries signatures but no Hamming parameters were supplied".into()
        } else {
            "Hamming parameters supplied for an index without signatures".into()
        }));
    }
    let k = r.u32("K")? as usize;
    let n = r.u32("N")?;
    if k != vocabularies.len() {
        return Err(Error::InvalidIndex(format!(
            "index has K = {k} but {} vocabularies were given",
            vocabularies.len()
        )));
    }
    let mut files = Vec::with_capacity(k);
    for (id, vocab) in vocabularies.iter().enumerate() {
        let size = r.u32("vocabulary size")? as usize;
        if size != vocab.size() {
            return Err(Error::InvalidIndex(format!(
                "inverted file {id} has {size} words, vocabulary has {}",
                vocab.size()
            )));
        }
        let mut postings = Vec::with_capacity(size);
        for _ in 0..size {
            let count = r.u32("posting count")? as usize;
            let cap = count.min(r.remaining() / 8);
            let mut keys = Vec::with_capacity(cap);
            let mut signatures = sigs.then(|| Vec::with_capacity(cap));
            for _ in 0..count {
                let image_id = r.u32("posting entry")?;
                let feature_id = r.u32("posting entry")?;
                if image_id >= n {
                    return Err(Error::InvalidIndex(format!(
                        "image id {image_id} out of range at offset {}",
                        r.offset()
                    )));
                }
                keys.push(FeatureRef::new(image_id, feature_id).key());
                if let Some(s) = &mut signatures {
                    s.push(r.u64("signature")?);
                }
            }
            if let Some(p) = keys.windows(2).position(|w| w[0] >= w[1]) {
                return Err(Error::UnsortedPostings {
                    list: postings.len(),
                    position: p + 1,
                });
            }
            postings.push(PostingList {
                keys,
                words: Vec::new(),
                signatures,
            });
        }
        files.push(InvertedFile {
            vocabulary_id: id,
            postings,
            idf: Vec::new(),
        });
    }
    let mut norms = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let off = r.offset();
        let v = r.f32().ok_or(Error::TruncatedHeader {
            what: "image norms",
            offset: off,
        })?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidIndex(format!("bad image norm at offset {off}")));
        }
        norms.push(v);
    }
    if r.remaining() != 0 {
        return Err(Error::InvalidIndex(format!("{} trailing bytes", r.remaining())));
    }
    IndexBundle::assemble(vocabularies, files, norms, n, hamming)
}

pub fn encode_hamming(params: &[HammingParams]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(HAMMING_MAGIC);
    put_u32(&mut out, to_u32(params.len(), "K")?);
    for p in params {
        put_u32(&mut out, p.bits);
        put_u32(&mut out, to_u32(p.dim(), "dimension")?);
        out.extend_from_slice(&p.projection_seed.to_le_bytes());
        put_u32(&mut out, to_u32(p.vocab_size(), "vocabulary size")?);
        for v in p.projection().iter().chain(p.thresholds()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_hamming(bytes: &[u8]) -> Result<Vec<HammingParams>> {
    let mut r = ByteReader::new(bytes);
    r.magic(HAMMING_MAGIC, "BMHE")?;
    let k = r.u32("K")? as usize;
    let mut out = Vec::with_capacity(k.min(MAX_VOCABULARIES));
    for _ in 0..k {
        let bits = r.u32("signature width")?;
        let dim = r.u32("dimension")? as usize;
        let seed = r.u64("projection seed")?;
        let size = r.u32("vocabulary size")? as usize;
        let mut read = |n: usize| -> Result<Vec<f32>> {
            (0..n)
                .map(|_| {
                    let off = r.offset();
                    r.f32().ok_or(Error::TruncatedHeader {
                        what: "Hamming tables",
                        offset: off,
                    })
                })
                .collect()
        };
        let projection = read(bits as usize * dim)?;
        let thresholds = read(size * bits as usize)?;
        out.push(HammingParams::from_parts(bits, seed, dim, projection, thresholds)?);
    }
    if r.remaining() != 0 {
        return Err(Error::InvalidConfig(format!(
            "{} trailing bytes in Hamming file",
            r.remaining()
        )));
    }
    Ok(out)
}

/// Path of the Hamming sidecar next to an index file.
pub fn hamming_sidecar(index_path: &Path) -> PathBuf {
    let mut s = index_path.as_os_str().to_owned();
    s.push(".he");
    PathBuf::from(s)
}

/// Writes the index and, when it carries signatures, its sidecar.
pub fn write_index(index: &IndexBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_index(index)?).map_err(|e| Error::io(path, e))?;
    if let Some(h) = &index.hamming {
        let side = hamming_sidecar(path);
        fs::write(&side, encode_hamming(h)?).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads an index written by [`write_index`]; the sidecar is picked up when
/// present.
pub fn read_index(path: impl AsRef<Path>, vocabularies: Vec<Vocabulary>) -> Result<IndexBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = hamming_sidecar(path);
    let hamming = if bytes.get(4) == Some(&1) {
        let h = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        Some(decode_hamming(&h)?)
    } else {
        None
    };
    decode_index(&bytes, vocabularies, hamming)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ImageRecord;
    use crate::vocab::{nearest_word, train_vocabulary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_corpus(n: usize, per: usize, dim: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|i| {
                let data = (0..per * dim).map(|_| rng.random::<f32>()).collect();
                ImageRecord::new(i as u32, dim, data).unwrap()
            })
            .collect();
        Corpus::new(dim, images).unwrap()
    }

    #[test]
    fn single_feature_lands_in_one_list_per_file() {
        let db = Corpus::new(2, vec![ImageRecord::new(0, 2, vec![0.9, 0.1]).unwrap()]).unwrap();
        let v0 = Vocabulary::new(2, vec![0.0, 0.0, 1.0, 0.0], 0).unwrap();
        let v1 = Vocabulary::new(2, vec![1.0, 1.0, 5.0, 5.0, 0.0, 0.0], 1).unwrap();
        let idx = build_index(&db, &[v0, v1], None).unwrap();
        for f in &idx.inverted_files {
            let nonempty: Vec<&PostingList> = f.postings.iter().filter(|l| !l.is_empty()).collect();
            assert_eq!(nonempty.len(), 1);
            assert_eq!(nonempty[0].features().collect::<Vec<_>>(), vec![FeatureRef::new(0, 0)]);
        }
        assert_eq!(idx.postings(0, 1).len(), 1);
        assert_eq!(idx.postings(1, 0).len(), 1);
        // N = 1, so every idf is zero and the norm falls back to raw tf.
        assert!(idx.image_norms[0] > 0.0);
    }

    #[test]
    fn word_in_every_image_has_zero_idf() {
        let dim = 1;
        let images = (0..4)
            .map(|i| ImageRecord::new(i, dim, vec![0.0, 10.0 + i as f32]).unwrap())
            .collect();
        let db = Corpus::new(dim, images).unwrap();
        let v = Vocabulary::new(1, vec![0.0, 10.0, 13.0], 0).unwrap();
        let idx = build_index(&db, &[v], None).unwrap();
        let idf = &idx.inverted_files[0].idf;
        assert_eq!(idf[0], 0.0);
        assert!((idf[1] - (4.0f64 / 2.0).ln()).abs() < 1e-12);
        assert!((idf[2] - (4.0f64 / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn postings_match_brute_force_quantization() {
        let db = random_corpus(40, 25, 6, 1);
        let train = random_corpus(30, 40, 6, 2);
        let vocabs: Vec<Vocabulary> = (0..2).map(|s| train_vocabulary(&train, 64, s, 20).unwrap()).collect();
        let idx = build_index(&db, &vocabs, None).unwrap();
        for (k, file) in idx.inverted_files.iter().enumerate() {
            assert_eq!(file.num_entries(), db.num_features());
            let mut expected: Vec<Vec<FeatureRef>> = vec![Vec::new(); 64];
            for (f, x) in db.features() {
                let mut best = (f32::INFINITY, 0);
                for (w, c) in vocabs[k].centroids().enumerate() {
                    let d: f32 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, w);
                    }
                }
                expected[best.1].push(f);
            }
            for (w, list) in file.postings.iter().enumerate() {
                assert_eq!(list.features().collect::<Vec<_>>(), expected[w], "file {k} word {w}");
                assert!(list.keys.windows(2).all(|p| p[0] < p[1]));
            }
            // IDF monotone in document frequency.
            let df: Vec<usize> = file
                .postings
                .iter()
                .map(|l| {
                    let mut ids: Vec<u32> = l.features().map(|f| f.image_id).collect();
                    ids.dedup();
                    ids.len()
                })
                .collect();
            for a in 0..64 {
                for b in 0..64 {
                    if df[a] > 0 && df[a] < df[b] {
                        assert!(file.idf[a] >= file.idf[b]);
                    }
                }
            }
        }
        for (img, norm) in db.images().iter().zip(&idx.image_norms) {
            assert_eq!(img.is_empty(), *norm == 0.0);
        }
    }

    #[test]
    fn index_and_sidecar_round_trip() {
        let db = random_corpus(12, 10, 4, 5);
        let vocabs: Vec<Vocabulary> = (0..2).map(|s| train_vocabulary(&db, 8, s, 10).unwrap()).collect();
        let he: Vec<HammingParams> = vocabs
            .iter()
            .enumerate()
            .map(|(k, v)| HammingParams::train(&db, v, 16, k as u64).unwrap())
            .collect();
        let idx = build_index(&db, &vocabs, Some(he)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.bmix");
        write_index(&idx, &path).unwrap();
        let back = read_index(&path, vocabs.clone()).unwrap();
        assert_eq!(back.inverted_files, idx.inverted_files);
        assert_eq!(back.image_norms, idx.image_norms);
        assert_eq!(back.hamming, idx.hamming);
        assert_eq!(encode_index(&back).unwrap(), encode_index(&idx).unwrap());
        // Signature sanity: stored bits equal recomputed ones.
        let he = idx.hamming.as_ref().unwrap();
        for (f, x) in db.features() {
            let w = nearest_word(x, &vocabs[1]);
            let list = idx.postings(1, w);
            let i = list.keys.binary_search(&f.key()).unwrap();
            let s = compute_signature(x, w, &he[1]).unwrap();
            assert_eq!(list.entry(i, 1, 16).signature, Some(s));
        }
        assert!(read_index(&path, vocabs[..1].to_vec()).is_err());
    }

    #[test]
    fn malformed_index_rejected() {
        let db = random_corpus(3, 4, 2, 9);
        let v = vec![train_vocabulary(&db, 4, 0, 5).unwrap()];
        let idx = build_index(&db, &v, None).unwrap();
        let bytes = encode_index(&idx).unwrap();
        assert!(decode_index(&bytes[..bytes.len() - 2], v.clone(), None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(
            decode_index(&bad, v.clone(), None),
            Err(Error::BadMagic { .. })
        ));
        let mut flag = bytes.clone();
        flag[4] = 1;
        assert!(decode_index(&flag, v, None).is_err());
    }

    #[test]
    fn duplicate_feature_rejected() {
        let v = Vocabulary::new(1, vec![0.0, 1.0], 0).unwrap();
        let f = FeatureRef::new(0, 0);
        let r = IndexBundle::from_postings(vec![v], vec![vec![vec![(f, 0)], vec![(f, 0)]]], 1, None);
        assert!(r.is_err());
    }
}

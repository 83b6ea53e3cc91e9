//! Hamming embedding: binary signatures that refine word-level matches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::types::{Corpus, Vocabulary};
use crate::vocab::nearest_word;

/// Maximum signature width; one machine word per signature.
pub const MAX_BITS: u32 = 64;

/// Default acceptance threshold: matches need a distance strictly below it.
pub const DEFAULT_HE_THRESHOLD: u32 = 20;

/// Words with fewer training descriptors than this use global medians.
const MIN_WORD_POINTS: usize = 4;

/// A fixed-width bit string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature {
    pub bits: u64,
    pub width: u32,
}

impl Signature {
    pub fn new(bits: u64, width: u32) -> Self {
        debug_assert!(width <= MAX_BITS);
        Self { bits, width }
    }

    pub fn complement(self) -> Self {
        Self::new(!self.bits & mask(self.width), self.width)
    }
}

fn mask(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

pub fn hamming_distance(a: Signature, b: Signature) -> Result<u32> {
    if a.width != b.width {
        return Err(Error::WidthMismatch(a.width, b.width));
    }
    Ok((a.bits ^ b.bits).count_ones())
}

/// Projection and per-word thresholds for one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct HammingParams {
    pub bits: u32,
    pub projection_seed: u64,
    dim: usize,
    /// `bits x dim`, row major.
    projection: Vec<f32>,
    /// `vocab_size x bits`, row major.
    thresholds: Vec<f32>,
}

impl HammingParams {
    pub fn from_parts(
        bits: u32,
        projection_seed: u64,
        dim: usize,
        projection: Vec<f32>,
        thresholds: Vec<f32>,
    ) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::InvalidConfig(format!("signature width {bits} not in 1..=64")));
        }
        if dim == 0 || projection.len() != bits as usize * dim {
            return Err(Error::InvalidConfig(
                "projection shape does not match bits x dim".into(),
            ));
        }
        if !thresholds.len().is_multiple_of(bits as usize) {
            return Err(Error::InvalidConfig("threshold table is not a multiple of bits".into()));
        }
        Ok(Self {
            bits,
            projection_seed,
            dim,
            projection,
            thresholds,
        })
    }

    /// Draws a random orthogonal projection from `seed` and learns per-word
    /// median thresholds from the descriptors of `training`.
    pub fn train(training: &Corpus, vocab: &Vocabulary, bits: u32, seed: u64) -> Result<Self> {
        if training.dim() != vocab.dim() {
            return Err(Error::DimMismatch {
                expected: vocab.dim(),
                got: training.dim(),
            });
        }
        let dim = vocab.dim();
        let projection = random_projection(bits, dim, seed)?;
        let b = bits as usize;
        let mut per_word: Vec<Vec<Vec<f32>>> = vec![Vec::new(); vocab.size()];
        let mut global: Vec<Vec<f32>> = vec![Vec::new(); b];
        for (_, x) in training.features() {
            let w = nearest_word(x, vocab) as usize;
            let p = project_with(&projection, dim, x);
            for (g, v) in global.iter_mut().zip(&p) {
                g.push(*v);
            }
            per_word[w].push(p);
        }
        if global[0].is_empty() {
            return Err(Error::InvalidCorpus(
                "no training descriptors for Hamming embedding".into(),
            ));
        }
        let global_median: Vec<f32> = global.iter_mut().map(|v| median(v)).collect();
        let mut thresholds = Vec::with_capacity(vocab.size() * b);
        for rows in &per_word {
            if rows.len() < MIN_WORD_POINTS {
                thresholds.extend_from_slice(&global_median);
                continue;
            }
            for bit in 0..b {
                let mut col: Vec<f32> = rows.iter().map(|r| r[bit]).collect();
                thresholds.push(median(&mut col));
            }
        }
        Self::from_parts(bits, seed, dim, projection, thresholds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.thresholds.len() / self.bits as usize
    }

    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn word_thresholds(&self, word: u32) -> Option<&[f32]> {
        let b = self.bits as usize;
        self.thresholds.get(word as usize * b..(word as usize + 1) * b)
    }

    /// Projections of `x` onto every row.
    pub fn project(&self, x: &[f32]) -> Vec<f32> {
        project_with(&self.projection, self.dim, x)
    }
}

/// Bit `b` is set iff the `b`-th projection of `x` exceeds the word's
/// threshold.
pub fn compute_signature(x: &[f32], word: u32, params: &HammingParams) -> Result<Signature> {
    if x.len() != params.dim {
        return Err(Error::DimMismatch {
            expected: params.dim,
            got: x.len(),
        });
    }
    let thr = params
        .word_thresholds(word)
        .ok_or_else(|| Error::InvalidConfig(format!("no Hamming thresholds for word {word}")))?;
    let mut bits = 0u64;
    for (b, (row, t)) in params.projection.chunks_exact(params.dim).zip(thr).enumerate() {
        if dot(row, x) > *t {
            bits |= 1 << b;
        }
    }
    Ok(Signature::new(bits, params.bits))
}

fn project_with(projection: &[f32], dim: usize, x: &[f32]) -> Vec<f32> {
    projection.chunks_exact(dim).map(|row| dot(row, x)).collect()
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn median(v: &mut [f32]) -> f32 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gaussian rows, orthonormalized within blocks of `dim` rows.
fn random_projection(bits: u32, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::InvalidConfig(format!("signature width {bits} not in 1..=64")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(bits as usize);
    for r in 0..bits as usize {
        let block_start = r - r % dim;
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for prev in &rows[block_start..r] {
            let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= d * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        rows.push(v);
    }
    Ok(rows.into_iter().flatten().map(|v| v as f32).collect())
}

//! Synthetic corpora with known relevance.
//!
//! Descriptors come from a mixture of Gaussian clusters with Zipf-like
//! popularity. Each image also picks a few "theme" clusters and draws a
//! share of its features from them, which gives within-image burstiness.
//! The relevant images of a query are copies of it with Gaussian noise
//! added to every descriptor.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::GroundTruth;
use crate::error::{Error, Result};
use crate::types::{Corpus, ImageRecord};

const THEMES_PER_IMAGE: usize = 3;
const PATTERNS_PER_IMAGE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Database size, relevant copies included.
    pub n_images: usize,
    pub n_queries: usize,
    /// Images in the independent training corpus.
    pub training_images: usize,
    pub features_per_image: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Standard deviation of a feature around its cluster center; centers
    /// are standard normal.
    pub cluster_spread: f64,
    /// Popularity exponent: cluster `c` is drawn with weight `(c + 1)^-zipf`.
    pub zipf: f64,
    /// Share of each image's features drawn from its theme clusters.
    pub burst: f64,
    /// Number of extra tight clusters shared across images, standing in for
    /// near-identical generic patches (corners, textures).
    pub generic_clusters: usize,
    pub generic_spread: f64,
    /// Share of each image's features drawn from the generic clusters.
    pub generic_share: f64,
    pub duplicates_per_query: usize,
    /// Standard deviation of the noise added to each copied descriptor.
    pub noise: f64,
    /// Put each query into the database as well, at id = query id.
    pub include_query_in_db: bool,
    pub seed: u64,
}

/// The standard benchmark: a diffuse 32-dimensional descriptor
/// distribution in which two 1024-word vocabularies trained with different
/// seeds disagree on most cell boundaries, plus a tenth of every image
/// drawn from tight generic clusters on which they agree.
impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_images: 2000,
            n_queries: 300,
            training_images: 300,
            features_per_image: 100,
            dim: 32,
            n_clusters: 400,
            cluster_spread: 1.5,
            zipf: 0.8,
            burst: 0.0,
            generic_clusters: 50,
            generic_spread: 0.1,
            generic_share: 0.1,
            duplicates_per_query: 2,
            noise: 1.3,
            include_query_in_db: false,
            seed: 7,
        }
    }
}

/// Vocabulary size used with the standard benchmark.
pub const BENCHMARK_VOCAB_SIZE: usize = 1024;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("synthetic spec: {m}")));
        for (name, v) in [
            ("n_images", self.n_images),
            ("n_queries", self.n_queries),
            ("training_images", self.training_images),
            ("features_per_image", self.features_per_image),
            ("dim", self.dim),
            ("n_clusters", self.n_clusters),
            ("duplicates_per_query", self.duplicates_per_query),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("noise", self.noise),
            ("zipf", self.zipf),
            ("generic_spread", self.generic_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.burst) {
            return bad("burst must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.generic_share) {
            return bad("generic_share must lie in [0, 1]".into());
        }
        if self.generic_share > 0.0 && self.generic_clusters == 0 {
            return bad("generic_share needs generic_clusters > 0".into());
        }
        if self.n_images < self.relevant_images() {
            return bad(format!(
                "{} database images cannot hold {} relevant copies",
                self.n_images,
                self.relevant_images()
            ));
        }
        if self.n_images > u32::MAX as usize - 1 {
            return bad("too many images".into());
        }
        Ok(())
    }

    fn relevant_images(&self) -> usize {
        self.n_queries * (self.duplicates_per_query + self.include_query_in_db as usize)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub training: Corpus,
    pub db: Corpus,
    pub queries: Corpus,
    pub ground_truth: GroundTruth,
}

struct ClusterModel {
    dim: usize,
    centers: Vec<f32>,
    popularity: WeightedIndex<f64>,
    spread: f64,
    burst: f64,
    generic: Vec<f32>,
    generic_spread: f64,
    generic_share: f64,
}

impl ClusterModel {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let centers = (0..spec.n_clusters * spec.dim)
            .map(|_| StandardNormal.sample(rng))
            .map(|v: f64| v as f32)
            .collect();
        let generic = (0..spec.generic_clusters * spec.dim)
            .map(|_| StandardNormal.sample(rng))
            .map(|v: f64| v as f32)
            .collect();
        let weights: Vec<f64> = (0..spec.n_clusters)
            .map(|c| (c as f64 + 1.0).powf(-spec.zipf))
            .collect();
        Self {
            dim: spec.dim,
            centers,
            popularity: WeightedIndex::new(weights).expect("positive weights"),
            spread: spec.cluster_spread,
            burst: spec.burst,
            generic,
            generic_spread: spec.generic_spread,
            generic_share: spec.generic_share,
        }
    }

    fn image(&self, n_features: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let themes: Vec<usize> = (0..THEMES_PER_IMAGE).map(|_| self.popularity.sample(rng)).collect();
        let mut data = Vec::with_capacity(n_features * self.dim);
        let n_generic = self.generic.len() / self.dim;
        let patterns: Vec<usize> = if n_generic > 0 {
            (0..PATTERNS_PER_IMAGE)
                .map(|_| rng.random_range(0..n_generic))
                .collect()
        } else {
            Vec::new()
        };
        for _ in 0..n_features {
            let (center, spread) = if n_generic > 0 && rng.random::<f64>() < self.generic_share {
                let g = patterns[rng.random_range(0..patterns.len())];
                (&self.generic[g * self.dim..(g + 1) * self.dim], self.generic_spread)
            } else {
                let c = if rng.random::<f64>() < self.burst {
                    themes[rng.random_range(0..themes.len())]
                } else {
                    self.popularity.sample(rng)
                };
                (&self.centers[c * self.dim..(c + 1) * self.dim], self.spread)
            };
            for &m in center {
                let z: f64 = StandardNormal.sample(rng);
                data.push((m as f64 + spread * z) as f32);
            }
        }
        data
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn perturb(data: &[f32], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    data.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            (v as f64 + noise * z) as f32
        })
        .collect()
}

/// Deterministic in `spec` (including its seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let model = ClusterModel::new(spec, &mut stream_rng(spec.seed, 0));
    let f = spec.features_per_image;
    // Streams: training 1.., queries 1<<40.., database 2<<40..
    let draw = |base: u64, n: usize| -> Vec<Vec<f32>> {
        (0..n)
            .into_par_iter()
            .map(|i| model.image(f, &mut stream_rng(spec.seed, base + i as u64)))
            .collect()
    };
    let training = draw(1, spec.training_images);
    let queries = draw(1 << 40, spec.n_queries);

    let q = spec.n_queries;
    let offset = if spec.include_query_in_db { q } else { 0 };
    let mut slots: Vec<u32> = (offset as u32..spec.n_images as u32).collect();
    slots.shuffle(&mut stream_rng(spec.seed, 3 << 40));

    // Each non-query slot gets a copy of a query or a distractor.
    let copies = q * spec.duplicates_per_query;
    let mut db_data: Vec<Option<Vec<f32>>> = vec![None; spec.n_images];
    let mut gt = GroundTruth::default();
    for (qi, qdata) in queries.iter().enumerate() {
        if spec.include_query_in_db {
            db_data[qi] = Some(qdata.clone());
            gt.insert(qi as u32, [qi as u32]);
        }
        for d in 0..spec.duplicates_per_query {
            let id = slots[qi * spec.duplicates_per_query + d];
            let mut rng = stream_rng(spec.seed, (2 << 40) + id as u64);
            db_data[id as usize] = Some(perturb(qdata, spec.noise, &mut rng));
            gt.insert(qi as u32, [id]);
        }
    }
    let distractors: Vec<(u32, Vec<f32>)> = slots[copies..]
        .par_iter()
        .map(|&id| (id, model.image(f, &mut stream_rng(spec.seed, (2 << 40) + id as u64))))
        .collect();
    for (id, data) in distractors {
        db_data[id as usize] = Some(data);
    }

    let corpus = |images: Vec<Vec<f32>>| -> Result<Corpus> {
        let records = images
            .into_iter()
            .enumerate()
            .map(|(i, d)| ImageRecord::new(i as u32, spec.dim, d))
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(spec.dim, records)
    };
    Ok(SyntheticData {
        training: corpus(training)?,
        db: corpus(db_data.into_iter().map(|d| d.expect("every slot filled")).collect())?,
        queries: corpus(queries)?,
        ground_truth: gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_images: 60,
            n_queries: 5,
            training_images: 10,
            features_per_image: 12,
            dim: 4,
            n_clusters: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.db, b.db);
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.training, b.training);
        assert_eq!(a.ground_truth, b.ground_truth);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.db, c.db);
    }

    #[test]
    fn zero_noise_copies_are_exact() {
        let spec = SyntheticSpec {
            noise: 0.0,
            duplicates_per_query: 3,
            include_query_in_db: true,
            ..small()
        };
        let d = generate_synthetic(&spec).unwrap();
        d.ground_truth.validate(d.db.num_images() as u32).unwrap();
        for (q, rel) in &d.ground_truth.relevant {
            assert_eq!(rel.len(), 4);
            assert!(rel.contains(q));
            for &r in rel {
                assert_eq!(d.db.image(r).raw(), d.queries.image(*q).raw());
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synthetic(&SyntheticSpec { n_images: 0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { n_images: 9, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { noise: -1.0, ..small() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { burst: 1.5, ..small() }).is_err());
    }
}

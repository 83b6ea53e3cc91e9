//! Vocabulary training (k-means++ seeding followed by Lloyd iterations) and
//! nearest-centroid quantization.

use std::collections::HashSet;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{canonical_bits, Corpus, FeatureRef, Vocabulary};

/// A feature with its visual word in each of the `K` vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFeature {
    pub feature: FeatureRef,
    pub words: Vec<u32>,
}

/// Result of a training run, with the within-cluster sum of squares
/// measured after every assignment step.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub vocabulary: Vocabulary,
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

/// Squared Euclidean distance, accumulated in eight lanes so the loop
/// vectorizes. Deterministic for a given input.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Index of the nearest centroid; ties go to the lowest index.
#[inline]
pub fn nearest_word(x: &[f32], vocab: &Vocabulary) -> u32 {
    let mut best = 0u32;
    let mut best_d = f32::INFINITY;
    for (i, c) in vocab.centroids().enumerate() {
        let d = squared_distance(x, c);
        if d < best_d {
            best_d = d;
            best = i as u32;
        }
    }
    best
}

/// Quantizes `x` against each vocabulary in turn.
pub fn quantize(x: &[f32], vocabularies: &[Vocabulary]) -> Result<Vec<u32>> {
    vocabularies
        .iter()
        .map(|v| {
            if v.dim() != x.len() {
                Err(Error::DimMismatch {
                    expected: v.dim(),
                    got: x.len(),
                })
            } else {
                Ok(nearest_word(x, v))
            }
        })
        .collect()
}

/// Quantizes every feature of a corpus. Output order follows
/// [`Corpus::features`].
pub fn quantize_corpus(corpus: &Corpus, vocabularies: &[Vocabulary]) -> Result<Vec<QuantizedFeature>> {
    check_dims(corpus.dim(), vocabularies)?;
    let refs: Vec<(FeatureRef, &[f32])> = corpus.features().collect();
    Ok(refs
        .par_iter()
        .map(|(f, x)| QuantizedFeature {
            feature: *f,
            words: vocabularies.iter().map(|v| nearest_word(x, v)).collect(),
        })
        .collect())
}

pub(crate) fn check_dims(dim: usize, vocabularies: &[Vocabulary]) -> Result<()> {
    if vocabularies.is_empty() {
        return Err(Error::Invalid("at least one vocabulary is required".into()));
    }
    for v in vocabularies {
        if v.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.dim(),
            });
        }
    }
    Ok(())
}

pub fn train_vocabulary(training: &Corpus, size: usize, seed: u64, max_iters: usize) -> Result<Vocabulary> {
    train_vocabulary_with_report(training, size, seed, max_iters).map(|r| r.vocabulary)
}

/// Exact Lloyd's k-means over every descriptor of `training`.
pub fn train_vocabulary_with_report(
    training: &Corpus,
    size: usize,
    seed: u64,
    max_iters: usize,
) -> Result<TrainingReport> {
    if size == 0 {
        return Err(Error::Invalid("vocabulary size must be positive".into()));
    }
    if max_iters == 0 {
        return Err(Error::Invalid("max_iters must be positive".into()));
    }
    let dim = training.dim();
    let points: Vec<f32> = training
        .images()
        .iter()
        .flat_map(|img| img.raw().iter().copied())
        .collect();
    let n = points.len() / dim;
    if n == 0 {
        return Err(Error::InvalidCorpus("training corpus has no descriptors".into()));
    }
    let distinct = points
        .chunks_exact(dim)
        .map(|p| p.iter().map(|v| canonical_bits(*v)).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len();
    if distinct < size {
        return Err(Error::InvalidCorpus(format!(
            "{distinct} distinct training points cannot support {size} centroids"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&points, dim, size, &mut rng);
    let mut assignment = vec![u32::MAX; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iters {
        iterations = iter + 1;
        let (new_assignment, dists): (Vec<u32>, Vec<f32>) = points
            .par_chunks_exact(dim)
            .map(|p| nearest_in(p, &centroids, dim))
            .unzip();
        let sse: f64 = dists.iter().map(|&d| d as f64).sum();
        sse_history.push(sse);
        let converged = new_assignment == assignment;
        assignment = new_assignment;
        if converged {
            break;
        }
        let mut dists = dists;
        repair_empty_clusters(&mut assignment, &mut dists, size);
        centroids = cluster_means(&points, dim, &assignment, size);
    }
    debug!(
        "k-means size={size} seed={seed}: {iterations} iterations, final sse {:.4}",
        sse_history.last().copied().unwrap_or(0.0)
    );
    let vocabulary = Vocabulary::new(dim, centroids, seed)?;
    Ok(TrainingReport {
        vocabulary,
        sse_history,
        iterations,
    })
}

fn nearest_in(p: &[f32], centroids: &[f32], dim: usize) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (i as u32, d);
        }
    }
    best
}

/// k-means++ seeding: first center uniform, later centers drawn with
/// probability proportional to squared distance from the chosen set.
fn seed_plus_plus(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .par_chunks_exact(dim)
        .map(|p| squared_distance(p, &centroids[..dim]) as f64)
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        // Distinct-point count was checked, so some mass remains.
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                chosen = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        let c = chosen.expect("no remaining mass during seeding");
        let start = centroids.len();
        centroids.extend_from_slice(&points[c * dim..(c + 1) * dim]);
        let new_c = &centroids[start..];
        d2.par_iter_mut().zip(points.par_chunks_exact(dim)).for_each(|(d, p)| {
            let nd = squared_distance(p, new_c) as f64;
            if nd < *d {
                *d = nd;
            }
        });
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty_clusters(assignment: &mut [u32], dists: &mut [f32], k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a as usize] += 1;
    }
    for empty in 0..k {
        if counts[empty] != 0 {
            continue;
        }
        let mut victim: Option<usize> = None;
        for (i, &d) in dists.iter().enumerate() {
            if counts[assignment[i] as usize] < 2 {
                continue;
            }
            if victim.is_none_or(|v| d > dists[v]) {
                victim = Some(i);
            }
        }
        let v = victim.expect("fewer points than clusters");
        counts[assignment[v] as usize] -= 1;
        assignment[v] = empty as u32;
        counts[empty] = 1;
        dists[v] = 0.0;
    }
}

fn cluster_means(points: &[f32], dim: usize, assignment: &[u32], k: usize) -> Vec<f32> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks_exact(dim).zip(assignment) {
        let a = a as usize;
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += *v as f64;
        }
    }
    sums.chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |v| (v / c as f64) as f32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ImageRecord;
    use rand_distr::{Distribution, Normal};

    fn corpus_from(points: &[Vec<f32>], per_image: usize) -> Corpus {
        let dim = points[0].len();
        let images = points
            .chunks(per_image)
            .enumerate()
            .map(|(i, ch)| ImageRecord::from_descriptors(i as u32, dim, ch).unwrap())
            .collect();
        Corpus::new(dim, images).unwrap()
    }

    fn brute_nearest(x: &[f32], v: &Vocabulary) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in v.centroids().enumerate() {
            let d: f64 = x.iter().zip(c).map(|(a, b)| ((*a as f64) - (*b as f64)).powi(2)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn exact_size_points_become_centroids() {
        let pts: Vec<Vec<f32>> = (0..12)
            .map(|i| vec![i as f32, (i * i) as f32 * 0.1, -(i as f32)])
            .collect();
        for seed in [0, 1, 77] {
            let v = train_vocabulary(&corpus_from(&pts, 5), 12, seed, 10).unwrap();
            let mut got: Vec<Vec<f32>> = v.centroids().map(|c| c.to_vec()).collect();
            let mut want = pts.clone();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want);
        }
    }

    #[test]
    fn separated_gaussians_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0f32, 0.3).unwrap();
        let means: Vec<Vec<f32>> = (0..10)
            .map(|i| {
                (0..4)
                    .map(|d| if d == i % 4 { 20.0 * (1 + i / 4) as f32 } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (m, mean) in means.iter().enumerate() {
            for _ in 0..100 {
                pts.push(mean.iter().map(|c| c + normal.sample(&mut rng)).collect::<Vec<f32>>());
                labels.push(m);
            }
        }
        let v = train_vocabulary(&corpus_from(&pts, 50), 10, 3, 50).unwrap();
        // Purity: the cluster each point lands in is dominated by one true mean.
        let mut table = vec![[0usize; 10]; 10];
        for (p, &l) in pts.iter().zip(&labels) {
            table[nearest_word(p, &v) as usize][l] += 1;
        }
        let pure: usize = table.iter().map(|row| *row.iter().max().unwrap()).sum();
        assert!(pure as f64 / pts.len() as f64 > 0.95);
        // Every true mean has a centroid nearby.
        for mean in &means {
            let (_, d) = brute_nearest(mean, &v);
            assert!(d.sqrt() < 1.0, "mean not covered: {d}");
        }
    }

    #[test]
    fn training_is_deterministic_and_seed_dependent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f32>> = (0..400)
            .map(|_| (0..6).map(|_| rng.random::<f32>()).collect())
            .collect();
        let c = corpus_from(&pts, 40);
        let a = train_vocabulary(&c, 16, 1, 20).unwrap();
        let b = train_vocabulary(&c, 16, 1, 20).unwrap();
        assert_eq!(a.raw(), b.raw());
        let other = train_vocabulary(&c, 16, 2, 20).unwrap();
        assert_ne!(a.raw(), other.raw());
    }

    #[test]
    fn sse_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec<f32>> = (0..600)
            .map(|_| (0..5).map(|_| rng.random::<f32>() * 4.0).collect())
            .collect();
        let report = train_vocabulary_with_report(&corpus_from(&pts, 60), 24, 4, 40).unwrap();
        for w in report.sse_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{:?}", report.sse_history);
        }
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = vec![vec![1.0, 1.0]; 20];
        assert!(train_vocabulary(&corpus_from(&pts, 5), 2, 0, 5).is_err());
        let empty = Corpus::new(2, vec![ImageRecord::new(0, 2, vec![]).unwrap()]).unwrap();
        assert!(train_vocabulary(&empty, 1, 0, 5).is_err());
    }

    #[test]
    fn empty_cluster_is_repaired() {
        let mut assignment = vec![0, 0, 0, 1];
        let mut dists = vec![1.0, 5.0, 2.0, 0.0];
        repair_empty_clusters(&mut assignment, &mut dists, 3);
        assert_eq!(assignment, vec![0, 2, 0, 1]);
    }

    #[test]
    fn quantize_exact_and_ties() {
        let v = Vocabulary::new(1, (0..10).map(|i| i as f32 * 2.0).collect(), 0).unwrap();
        assert_eq!(quantize(&[14.0], std::slice::from_ref(&v)).unwrap(), vec![7]);
        // Equidistant from centroids 2 (4.0) and 3 (6.0).
        assert_eq!(quantize(&[5.0], std::slice::from_ref(&v)).unwrap(), vec![2]);
        // Centroid 2 is [1,0] and centroid 5 is [-1,0]: equidistant from the origin.
        let tie2 = Vocabulary::new(
            2,
            vec![9.0, 9.0, 5.0, 5.0, 1.0, 0.0, 9.0, -9.0, 5.0, -5.0, -1.0, 0.0],
            0,
        )
        .unwrap();
        assert_eq!(nearest_word(&[0.0, 0.0], &tie2), 2);
        assert!(quantize(&[1.0, 2.0], &[v]).is_err());
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mk =
            |rng: &mut ChaCha8Rng| Vocabulary::new(7, (0..16 * 7).map(|_| rng.random::<f32>()).collect(), 0).unwrap();
        let vocabs = vec![mk(&mut rng), mk(&mut rng)];
        for _ in 0..1000 {
            let x: Vec<f32> = (0..7).map(|_| rng.random::<f32>()).collect();
            let words = quantize(&x, &vocabs).unwrap();
            for (k, v) in vocabs.iter().enumerate() {
                let (want, best_d) = brute_nearest(&x, v);
                if words[k] as usize != want {
                    // Only acceptable for a floating-point near tie.
                    let c = v.centroid(words[k] as usize);
                    let d: f64 = x.iter().zip(c).map(|(a, b)| ((*a as f64) - (*b as f64)).powi(2)).sum();
                    assert!((d - best_d).abs() < 1e-5, "{d} vs {best_d}");
                }
            }
        }
    }

    #[test]
    fn centroids_quantize_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec<f32>> = (0..300)
            .map(|_| (0..8).map(|_| rng.random::<f32>()).collect())
            .collect();
        let v = train_vocabulary(&corpus_from(&pts, 30), 32, 8, 15).unwrap();
        for (i, c) in v.centroids().enumerate() {
            assert_eq!(nearest_word(c, &v) as usize, i);
        }
    }
}

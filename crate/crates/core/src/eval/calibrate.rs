//! Term-2 calibration and cardinality-ratio histograms.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::GroundTruth;
use crate::bayes::{full_mask, KWayMerge, OverlapTable};
use crate::error::{Error, Result};
use crate::index::IndexBundle;
use crate::retrieval::{prepare_query, PreparedQuery};
use crate::types::{Corpus, Vocabulary};
use crate::vocab::quantize_corpus;

/// Number of equal-width ratio bins used by the calibration fit.
pub const CALIBRATION_BINS: usize = 20;

/// Least-squares line through the binned `(r, t)` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub a: f64,
    pub b: f64,
    /// Count-weighted RMS residual of the bin means around the line.
    pub rms: f64,
    /// Occupied bins as `(mean r, mean t, count)`.
    pub bins: Vec<(f64, f64, usize)>,
    pub n_points: usize,
}

/// Smallest intercept a projected line may have.
pub const MIN_INTERCEPT: f64 = 1e-6;

impl CalibrationFit {
    fn sse(&self, a: f64, b: f64) -> f64 {
        self.bins
            .iter()
            .map(|p| p.2 as f64 * (p.1 - (a * p.0 + b)).powi(2))
            .sum()
    }

    /// RMS residual with every occupied bin counted once.
    pub fn unweighted_rms(&self) -> f64 {
        let n = self.bins.len() as f64;
        (self
            .bins
            .iter()
            .map(|p| (p.1 - (self.a * p.0 + self.b)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    }

    /// Least-squares line over the same bins restricted to `a >= 0`,
    /// `b >= MIN_INTERCEPT` and `a + b <= 1`, the range a term-2 line may
    /// take. Equals `(a, b)` when the free fit already lies in it.
    pub fn feasible_line(&self) -> (f64, f64) {
        let feasible = |a: f64, b: f64| a >= 0.0 && b >= MIN_INTERCEPT && a + b <= 1.0 + 1e-12;
        if feasible(self.a, self.b) {
            return (self.a, self.b);
        }
        let amax = 1.0 - MIN_INTERCEPT;
        let w = |p: &(f64, f64, usize)| p.2 as f64;
        let total: f64 = self.bins.iter().map(w).sum();
        let mean_t = self.bins.iter().map(|p| w(p) * p.1).sum::<f64>() / total;
        let srr: f64 = self.bins.iter().map(|p| w(p) * p.0 * p.0).sum();
        let srt: f64 = self.bins.iter().map(|p| w(p) * p.0 * (p.1 - MIN_INTERCEPT)).sum();
        let suu: f64 = self.bins.iter().map(|p| w(p) * (1.0 - p.0).powi(2)).sum();
        let sut: f64 = self.bins.iter().map(|p| w(p) * (1.0 - p.0) * (1.0 - p.1)).sum();
        // The constrained optimum lies on one of the three edges.
        let a_low = if srr > 0.0 { (srt / srr).clamp(0.0, amax) } else { 0.0 };
        let a_top = if suu > 0.0 { (sut / suu).clamp(0.0, amax) } else { 0.0 };
        let candidates = [
            (0.0, mean_t.clamp(MIN_INTERCEPT, 1.0)),
            (a_low, MIN_INTERCEPT),
            (a_top, 1.0 - a_top),
        ];
        candidates
            .into_iter()
            .min_by(|x, y| self.sse(x.0, x.1).total_cmp(&self.sse(y.0, y.1)))
            .expect("three candidates")
    }
}

/// For every query feature with at least one true match in the union of
/// its two lists, `r = |A∩B| / |A∪B|` and `t` = the share of true matches
/// lying in `A∩B`. A true match sits in a relevant image and is within
/// `he_threshold` of the query signature under a vocabulary it matched in.
pub fn calibration_points(
    index: &IndexBundle,
    queries: &[(PreparedQuery, &BTreeSet<u32>)],
    he_threshold: u32,
) -> Result<Vec<(f64, f64)>> {
    if index.num_vocabularies() != 2 {
        return Err(Error::Invalid(format!(
            "calibration needs K = 2, index has K = {}",
            index.num_vocabularies()
        )));
    }
    if !index.has_signatures() {
        return Err(Error::InvalidIndex(
            "calibration needs an index with Hamming signatures".into(),
        ));
    }
    let k = 2;
    let full = full_mask(k);
    let mut out = Vec::new();
    for (q, relevant) in queries {
        let qsigs = q
            .signatures
            .as_ref()
            .ok_or_else(|| Error::Invalid("calibration queries need signatures".into()))?;
        for n in 0..q.num_features() {
            let words = &q.words[n * k..(n + 1) * k];
            let lists: Vec<_> = (0..k).map(|j| index.postings(j, words[j])).collect();
            let keys: Vec<&[u64]> = lists.iter().map(|l| l.keys()).collect();
            let (mut inter, mut union, mut true_inter, mut true_union) = (0usize, 0usize, 0usize, 0usize);
            let mut merge = KWayMerge::new(&keys);
            while let Some((key, mask)) = merge.next() {
                union += 1;
                let both = mask == full;
                inter += both as usize;
                if !relevant.contains(&((key >> 32) as u32)) {
                    continue;
                }
                let pos = merge.positions();
                let close = (0..k).filter(|j| mask >> j & 1 == 1).any(|j| {
                    let sig = lists[j].signatures().expect("checked")[pos[j] * k + j];
                    (sig ^ qsigs[n * k + j]).count_ones() < he_threshold
                });
                if close {
                    true_union += 1;
                    true_inter += both as usize;
                }
            }
            if true_union > 0 {
                out.push((inter as f64 / union as f64, true_inter as f64 / true_union as f64));
            }
        }
    }
    Ok(out)
}

/// Bins `points` by `r` into equal-width bins on `[0, 1]` and fits
/// `t = a * r + b` to the bin means, weighted by bin counts.
pub fn fit_term2(points: &[(f64, f64)], bins: usize) -> Result<CalibrationFit> {
    if points.is_empty() {
        return Err(Error::Invalid(
            "no true matches found for calibration; use a larger corpus or a looser Hamming threshold".into(),
        ));
    }
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); bins];
    for &(r, t) in points {
        let b = ((r * bins as f64) as usize).min(bins - 1);
        sums[b].0 += r;
        sums[b].1 += t;
        sums[b].2 += 1;
    }
    let occupied: Vec<(f64, f64, usize)> = sums
        .into_iter()
        .filter(|s| s.2 > 0)
        .map(|(r, t, n)| (r / n as f64, t / n as f64, n))
        .collect();
    if occupied.len() < 2 {
        return Err(Error::Invalid(format!(
            "calibration observations fill only {} ratio bin(s); a line needs two",
            occupied.len()
        )));
    }
    // Each bin mean is weighted by its count, the inverse of its variance
    // when observations share one spread.
    let total = points.len() as f64;
    let wmean = |f: &dyn Fn(&(f64, f64, usize)) -> f64| occupied.iter().map(|p| p.2 as f64 * f(p)).sum::<f64>() / total;
    let mx = wmean(&|p| p.0);
    let my = wmean(&|p| p.1);
    let sxx = wmean(&|p| (p.0 - mx).powi(2));
    let sxy = wmean(&|p| (p.0 - mx) * (p.1 - my));
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - a * mx;
    let rms = wmean(&|p| (p.1 - (a * p.0 + b)).powi(2)).sqrt();
    Ok(CalibrationFit {
        a,
        b,
        rms,
        bins: occupied,
        n_points: points.len(),
    })
}

/// Calibrates the term-2 line on `queries` against `index`, whose images
/// the ground truth refers to.
pub fn calibrate_term2(
    queries: &Corpus,
    gt: &GroundTruth,
    index: &IndexBundle,
    he_threshold: u32,
) -> Result<CalibrationFit> {
    gt.validate(index.n_images)?;
    let mut prepared = Vec::with_capacity(gt.len());
    for (&q, rel) in &gt.relevant {
        if q as usize >= queries.num_images() {
            return Err(Error::Invalid(format!(
                "ground truth names query {q} beyond the query corpus"
            )));
        }
        prepared.push((prepare_query(queries.image(q), index)?, rel));
    }
    let points = calibration_points(index, &prepared, he_threshold)?;
    fit_term2(&points, CALIBRATION_BINS)
}

/// Histogram of the full-intersection cardinality ratio for one database
/// size.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioHistogram {
    pub db_size: usize,
    pub counts: Vec<u64>,
    /// Mean ratio over query features with a non-empty intersection.
    pub mean: f64,
}

/// Indexes the first `n` database images for each `n` in `sizes` and
/// histograms `|∩A_k| / |∪A_k|` over all query features whose
/// intersection is non-empty.
pub fn ratio_histogram(
    db: &Corpus,
    vocabularies: &[Vocabulary],
    sizes: &[usize],
    queries: &Corpus,
    bins: usize,
) -> Result<Vec<RatioHistogram>> {
    if vocabularies.len() < 2 {
        return Err(Error::Invalid("ratio histograms need at least two vocabularies".into()));
    }
    if bins == 0 {
        return Err(Error::Invalid("need at least one bin".into()));
    }
    let k = vocabularies.len();
    let full = full_mask(k) as usize;
    let vocab_sizes: Vec<usize> = vocabularies.iter().map(Vocabulary::size).collect();
    let quantized = quantize_corpus(db, vocabularies)?;
    let query_words = quantize_corpus(queries, vocabularies)?;
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size > db.num_images() {
            return Err(Error::Invalid(format!(
                "database subset of {size} images out of range 1..={}",
                db.num_images()
            )));
        }
        let end = quantized.partition_point(|f| (f.feature.image_id as usize) < size);
        let prefix = &quantized[..end];
        let mut lens: Vec<Vec<usize>> = vocab_sizes.iter().map(|&s| vec![0; s]).collect();
        for f in prefix {
            for (j, &w) in f.words.iter().enumerate() {
                lens[j][w as usize] += 1;
            }
        }
        let table = OverlapTable::build(&vocab_sizes, prefix.iter().map(|f| f.words.as_slice()))?;
        let mut counts = vec![0u64; bins];
        let (mut sum, mut n) = (0.0, 0usize);
        for qf in &query_words {
            let l: Vec<usize> = qf.words.iter().enumerate().map(|(j, &w)| lens[j][w as usize]).collect();
            let (inter, union) = table.cardinalities(&qf.words, &l)[full];
            if inter == 0 {
                continue;
            }
            let r = inter as f64 / union as f64;
            counts[((r * bins as f64) as usize).min(bins - 1)] += 1;
            sum += r;
            n += 1;
        }
        log::info!("ratio histogram: {size} images, {n} query features with non-empty intersection");
        out.push(RatioHistogram {
            db_size: size,
            counts,
            mean: if n > 0 { sum / n as f64 } else { f64::NAN },
        });
    }
    Ok(out)
}

/// `db_size,bin_low,bin_high,count` rows.
pub fn write_histogram_csv(hists: &[RatioHistogram]) -> String {
    let mut s = String::from("db_size,bin_low,bin_high,count\n");
    for h in hists {
        let bins = h.counts.len();
        for (i, c) in h.counts.iter().enumerate() {
            writeln!(
                s,
                "{},{},{},{}",
                h.db_size,
                i as f64 / bins as f64,
                (i + 1) as f64 / bins as f64,
                c
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamming::HammingParams;
    use crate::types::{FeatureRef, ImageRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feasible_line_projects_onto_constraints() {
        let fit = |pts: &[(f64, f64)]| fit_term2(pts, 20).unwrap();
        // Already feasible: unchanged.
        let f = fit(&[(0.1, 0.5), (0.9, 0.9)]);
        assert_eq!(f.feasible_line(), (f.a, f.b));
        // Steep line through (0, 0.2) and (1, 1.2) lands on a + b = 1.
        let f = fit(&[(0.05, 0.25), (0.95, 1.15)]);
        let (a, b) = f.feasible_line();
        assert!((a + b - 1.0).abs() < 1e-12 && a >= 0.0 && b > 0.0);
        // Decreasing data lands on a = 0 at the mean.
        let f = fit(&[(0.05, 0.8), (0.95, 0.2)]);
        assert_eq!(f.feasible_line(), (0.0, 0.5));
        // Brute-force check over a grid of feasible lines.
        let f = fit(&[(0.05, -0.1), (0.5, 0.3), (0.95, 1.3)]);
        let (a, b) = f.feasible_line();
        let best = f.sse(a, b);
        for i in 0..=200 {
            for j in 1..=200 {
                let (ga, gb) = (i as f64 / 200.0, j as f64 / 200.0);
                if ga + gb <= 1.0 {
                    assert!(f.sse(ga, gb) >= best - 1e-12, "({ga}, {gb}) beats ({a}, {b})");
                }
            }
        }
    }

    #[test]
    fn bin_means_weighted_by_count() {
        // Oracle: ordinary least squares over each bin mean repeated once
        // per observation in its bin.
        let mut pts = vec![(0.01, 0.1); 90];
        pts.extend([(0.51, 0.9), (0.53, 0.7), (0.97, 0.4), (0.33, 0.5), (0.31, 0.6)]);
        let fit = fit_term2(&pts, 20).unwrap();
        let rep: Vec<(f64, f64)> = fit
            .bins
            .iter()
            .flat_map(|&(r, t, n)| std::iter::repeat_n((r, t), n))
            .collect();
        let n = rep.len() as f64;
        let (sx, sy) = rep.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (sxx, sxy) = rep.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 * p.0, a.1 + p.0 * p.1));
        let a = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let b = (sy - a * sx) / n;
        assert!(
            (fit.a - a).abs() < 1e-9 && (fit.b - b).abs() < 1e-9,
            "{fit:?} vs {a} {b}"
        );
        let rms = (rep.iter().map(|p| (p.1 - a * p.0 - b).powi(2)).sum::<f64>() / n).sqrt();
        assert!((fit.rms - rms).abs() < 1e-9);
        assert!(fit.unweighted_rms() > fit.rms);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..100)
            .map(|i| (i as f64 / 100.0, 0.3 * i as f64 / 100.0 + 0.6))
            .collect();
        let fit = fit_term2(&pts, 20).unwrap();
        assert!((fit.a - 0.3).abs() < 1e-9 && (fit.b - 0.6).abs() < 1e-9);
        assert!(fit.rms < 1e-9);
        assert_eq!(fit.bins.len(), 20);
        assert!(fit_term2(&[], 20).is_err());
        assert!(fit_term2(&[(0.5, 0.5)], 20).is_err());
    }

    /// Hand-built two-vocabulary index: query feature `i` has lists
    /// `A_i` (word `i` of vocabulary 0) and `B_i` (word `i` of vocabulary
    /// 1). Features not in the other list use the spare word `m`.
    fn construction(all_true_in_intersection: bool) -> CalibrationFit {
        let m = 200u32;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = Vocabulary::new(1, (0..=m).map(|w| w as f32).collect(), 0).unwrap();
        let mut lists: Vec<Vec<Vec<(FeatureRef, u64)>>> = vec![vec![Vec::new(); m as usize + 1]; 2];
        let n_images = 200u32;
        let relevant: BTreeSet<u32> = (0..40).collect();
        let mut next_feature = vec![0u32; n_images as usize];
        let mut feature = |rng: &mut ChaCha8Rng, want_relevant: bool| {
            let img = if want_relevant {
                rng.random_range(0..40)
            } else {
                rng.random_range(40..n_images)
            };
            let f = FeatureRef::new(img, next_feature[img as usize]);
            next_feature[img as usize] += 1;
            f
        };
        for i in 0..m {
            let union = 300;
            let inter = ((i as f64 + 0.5) / m as f64 * union as f64) as usize;
            let only_a = (union - inter) / 2;
            let only_b = union - inter - only_a;
            for (count, (wa, wb), in_inter) in [(inter, (i, i), true), (only_a, (i, m), false), (only_b, (m, i), false)]
            {
                for _ in 0..count {
                    let rel = if all_true_in_intersection {
                        in_inter && rng.random::<f64>() < 0.2
                    } else {
                        rng.random::<f64>() < 0.2
                    };
                    let f = feature(&mut rng, rel);
                    lists[0][wa as usize].push((f, 0));
                    lists[1][wb as usize].push((f, 0));
                }
            }
        }
        let he = |seed| HammingParams::from_parts(8, seed, 1, vec![1.0; 8], vec![0.0; (m as usize + 1) * 8]).unwrap();
        let index =
            IndexBundle::from_postings(vec![vocab.clone(), vocab], lists, n_images, Some(vec![he(0), he(1)])).unwrap();
        let q = PreparedQuery {
            k: 2,
            words: (0..m).flat_map(|i| [i, i]).collect(),
            signatures: Some(vec![0; 2 * m as usize]),
        };
        let pts = calibration_points(&index, &[(q, &relevant)], 20).unwrap();
        fit_term2(&pts, 20).unwrap()
    }

    #[test]
    fn uniform_true_matches_give_identity_line() {
        let fit = construction(false);
        assert!((0.9..=1.1).contains(&fit.a), "{fit:?}");
        assert!((-0.05..=0.1).contains(&fit.b), "{fit:?}");
    }

    #[test]
    fn true_matches_in_intersection_give_constant_one() {
        let fit = construction(true);
        assert!((0.9..=1.0 + 1e-12).contains(&fit.b), "{fit:?}");
        assert!(fit.a.abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn identical_vocabularies_put_all_mass_at_one() {
        let dim = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base: Vec<Vec<f32>> = (0..10)
            .map(|_| (0..8 * dim).map(|_| rng.random::<f32>()).collect())
            .collect();
        // Every image twice.
        let images = base
            .iter()
            .chain(&base)
            .enumerate()
            .map(|(i, d)| ImageRecord::new(i as u32, dim, d.clone()).unwrap())
            .collect();
        let db = Corpus::new(dim, images).unwrap();
        let v = crate::vocab::train_vocabulary(&db, 6, 1, 10).unwrap();
        let h = ratio_histogram(&db, &[v.clone(), v], &[20], &db, 10).unwrap();
        assert_eq!(h[0].counts[9], db.num_features() as u64);
        assert_eq!(h[0].mean, 1.0);
        let csv = write_histogram_csv(&h);
        assert!(csv.starts_with("db_size,bin_low,bin_high,count\n20,0,0.1,0\n"));
    }
}

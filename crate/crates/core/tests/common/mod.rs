//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here goes through the engine's index layout:
//! words come from a brute-force nearest-centroid search, lists are hash
//! sets rebuilt from the raw corpus, and every score is a second pass over
//! explicitly materialized set memberships.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use vocmerge::{Corpus, ImageRecord, MergeConfig, Method, RankedResult, Vocabulary};

type Feature = (u32, u32);

pub fn brute_word(x: &[f32], vocab: &Vocabulary) -> u32 {
    let mut best = (f64::INFINITY, 0u32);
    for (i, c) in vocab.centroids().enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, i as u32);
        }
    }
    best.1
}

pub struct Oracle {
    n_images: u32,
    vocabs: Vec<Vocabulary>,
    lists: Vec<HashMap<u32, HashSet<Feature>>>,
    idf: Vec<HashMap<u32, f64>>,
    norms: Vec<f32>,
}

impl Oracle {
    pub fn new(db: &Corpus, vocabs: &[Vocabulary]) -> Self {
        let n = db.num_images();
        let mut lists: Vec<HashMap<u32, HashSet<Feature>>> = vec![HashMap::new(); vocabs.len()];
        for img in db.images() {
            for (f, x) in img.descriptors().enumerate() {
                for (j, v) in vocabs.iter().enumerate() {
                    lists[j]
                        .entry(brute_word(x, v))
                        .or_default()
                        .insert((img.image_id, f as u32));
                }
            }
        }
        let idf: Vec<HashMap<u32, f64>> = lists
            .iter()
            .map(|file| {
                file.iter()
                    .map(|(&w, set)| {
                        let images: HashSet<u32> = set.iter().map(|f| f.0).collect();
                        (w, (n as f64 / images.len() as f64).ln())
                    })
                    .collect()
            })
            .collect();
        // Per image: mean over vocabularies of the tf-idf histogram length.
        let mut weighted = vec![0.0f64; n];
        let mut raw = vec![0.0f64; n];
        for (file, idf) in lists.iter().zip(&idf) {
            let mut sq_w = vec![0.0f64; n];
            let mut sq_r = vec![0.0f64; n];
            for (w, set) in file {
                let mut tf: HashMap<u32, f64> = HashMap::new();
                for f in set {
                    *tf.entry(f.0).or_default() += 1.0;
                }
                for (img, t) in tf {
                    sq_w[img as usize] += (t * idf[w]).powi(2);
                    sq_r[img as usize] += t * t;
                }
            }
            for i in 0..n {
                weighted[i] += sq_w[i].sqrt();
                raw[i] += sq_r[i].sqrt();
            }
        }
        let k = vocabs.len() as f64;
        let norms = weighted
            .iter()
            .zip(&raw)
            .map(|(&w, &r)| if w > 0.0 { (w / k) as f32 } else { (r / k) as f32 })
            .collect();
        Self {
            n_images: n as u32,
            vocabs: vocabs.to_vec(),
            lists,
            idf,
            norms,
        }
    }

    fn weight(&self, inter: usize, union: usize, cfg: &MergeConfig) -> f64 {
        if cfg.force_unit_weight {
            return 1.0;
        }
        let r = inter as f64 / union as f64;
        let t2 = (cfg.term2_slope * r + cfg.term2_intercept).clamp(1e-9, 1.0);
        let n = cfg.n_override.map(u64::from).unwrap_or(self.n_images as u64) as f64;
        1.0 / (1.0 + r / t2 * (n * cfg.c).ln())
    }

    /// Unsorted `(image, score)` for every image that received a vote.
    pub fn scores(&self, query: &ImageRecord, method: Method, cfg: &MergeConfig) -> Vec<(u32, f64)> {
        let empty = HashSet::new();
        let k = self.vocabs.len();
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for x in query.descriptors() {
            let words: Vec<u32> = self.vocabs.iter().map(|v| brute_word(x, v)).collect();
            let sets: Vec<&HashSet<Feature>> = (0..k).map(|j| self.lists[j].get(&words[j]).unwrap_or(&empty)).collect();
            let idf_sq: Vec<f64> = (0..k)
                .map(|j| self.idf[j].get(&words[j]).copied().unwrap_or(0.0).powi(2))
                .collect();
            // First pass: membership of every feature in the union.
            let mut member: HashMap<Feature, Vec<usize>> = HashMap::new();
            for (j, s) in sets.iter().enumerate() {
                for f in s.iter() {
                    member.entry(*f).or_default().push(j);
                }
            }
            // Second pass: one vote per feature.
            let mut cards: HashMap<Vec<usize>, (usize, usize)> = HashMap::new();
            for (f, subset) in &member {
                let mean_idf = subset.iter().map(|&j| idf_sq[j]).sum::<f64>() / subset.len() as f64;
                let (factor, idf_w) = match method {
                    Method::B0(j) => (subset.contains(&j) as u32 as f64, idf_sq[j]),
                    Method::B1 => (subset.len() as f64, mean_idf),
                    Method::B2 => ((subset.len() == k) as u32 as f64, mean_idf),
                    Method::Bayes if subset.len() >= 2 => {
                        let (inter, union) = *cards.entry(subset.clone()).or_insert_with(|| {
                            let inter = sets[subset[0]]
                                .iter()
                                .filter(|g| subset.iter().all(|&i| sets[i].contains(g)))
                                .count();
                            let mut union: HashSet<Feature> = HashSet::new();
                            for &i in subset {
                                union.extend(sets[i].iter().copied());
                            }
                            (inter, union.len())
                        });
                        (subset.len() as f64 * self.weight(inter, union, cfg), mean_idf)
                    }
                    Method::Bayes => (1.0, mean_idf),
                    Method::RankAggregation => panic!("not a single-pass method"),
                };
                if factor > 0.0 {
                    *acc.entry(f.0).or_default() += factor * idf_w;
                }
            }
        }
        acc.into_iter()
            .map(|(img, s)| (img, s / self.norms[img as usize] as f64))
            .collect()
    }
}

/// Same images, scores within `tol`, and the engine's order consistent with
/// the oracle's scores (positions may only differ among near-ties).
pub fn check_equivalent(engine: &RankedResult, oracle: &[(u32, f64)], tol: f64) -> Result<(), String> {
    if engine.len() != oracle.len() {
        return Err(format!("engine ranks {} images, oracle {}", engine.len(), oracle.len()));
    }
    let expected: HashMap<u32, f64> = oracle.iter().copied().collect();
    let mut prev = f64::INFINITY;
    for (rank, &(id, s)) in engine.entries.iter().enumerate() {
        let want = *expected
            .get(&id)
            .ok_or_else(|| format!("engine ranks image {id} the oracle never scored"))?;
        if (s - want).abs() > tol {
            return Err(format!("image {id}: engine {s}, oracle {want}"));
        }
        if want > prev + tol {
            return Err(format!("rank {rank}: image {id} scored {want} after a score of {prev}"));
        }
        prev = want;
    }
    Ok(())
}

//! Query-time scoring: the three baseline merges, Bayes merging, and rank
//! aggregation.
//!
//! For a query feature with word tuple `q`, an indexed feature `y` lies in
//! list `k` iff its word under vocabulary `k` equals `q[k]`. The set `S` of
//! such `k` decides the match strength:
//!
//! | method | strength                                   |
//! |--------|--------------------------------------------|
//! | B0(j)  | `[j ∈ S]`                                  |
//! | B1     | `|S|`                                      |
//! | B2     | `[|S| = K]`                                |
//! | Bayes  | `|S| * w(S)` if `|S| >= 2`, else `1`       |
//!
//! Each vote is scaled by `mean_{k∈S} idf_k[q_k]^2` (B0 uses `idf_j^2`),
//! and the per-image total is divided by the image norm.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::bayes::{full_mask, MergeConfig, WeightModel, MAX_VOCABULARIES};
use crate::error::{Error, Result};
use crate::hamming::compute_signature;
use crate::index::IndexBundle;
use crate::types::{Corpus, ImageRecord};
use crate::vocab::quantize;

const MASKS: usize = 1 << MAX_VOCABULARIES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Single vocabulary `j`.
    B0(usize),
    B1,
    B2,
    Bayes,
    /// Median-rank fusion of the per-vocabulary B0 rankings.
    RankAggregation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringMethod {
    pub method: Method,
    /// Drop candidates whose signature is not within the Hamming threshold
    /// under at least one of the vocabularies it matched in.
    pub use_hamming: bool,
    /// Divide difference-set votes by the square root of the number of
    /// matches the query feature has in that image and list.
    pub use_burstiness: bool,
}

impl ScoringMethod {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            use_hamming: false,
            use_burstiness: false,
        }
    }

    pub fn with_hamming(mut self, on: bool) -> Self {
        self.use_hamming = on;
        self
    }

    pub fn with_burstiness(mut self, on: bool) -> Self {
        self.use_burstiness = on;
        self
    }

    pub fn validate(&self, num_vocabularies: usize) -> Result<()> {
        if let Method::B0(j) = self.method {
            if j >= num_vocabularies {
                return Err(Error::Invalid(format!(
                    "B0 vocabulary {j} out of range for K = {num_vocabularies}"
                )));
            }
        }
        if self.use_burstiness && !matches!(self.method, Method::B1 | Method::Bayes) {
            return Err(Error::Invalid(
                "burstiness weighting applies to B1 and Bayes only".into(),
            ));
        }
        Ok(())
    }

    /// Short name as used on the command line and in metrics files.
    pub fn name(&self) -> String {
        match self.method {
            Method::B0(j) => format!("b0:{j}"),
            Method::B1 => "b1".into(),
            Method::B2 => "b2".into(),
            Method::Bayes => "bayes".into(),
            Method::RankAggregation => "ra".into(),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// `b0`, `b0:<j>`, `b1`, `b2`, `bayes`, `ra`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "b0" => Method::B0(0),
            "b1" => Method::B1,
            "b2" => Method::B2,
            "bayes" => Method::Bayes,
            "ra" => Method::RankAggregation,
            _ => match s.strip_prefix("b0:") {
                Some(j) => Method::B0(
                    j.parse()
                        .map_err(|_| Error::Invalid(format!("bad vocabulary index in {s:?}")))?,
                ),
                None => return Err(Error::Invalid(format!("unknown method {s:?}"))),
            },
        })
    }
}

/// Images in descending score order, ties broken by ascending id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedResult {
    pub entries: Vec<(u32, f64)>,
}

impl RankedResult {
    /// Sorts arbitrary `(image, score)` pairs into result order.
    pub fn from_scores(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn score_of(&self, image_id: u32) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == image_id).map(|e| e.1)
    }

    pub fn truncated(&self, topk: usize) -> Self {
        Self {
            entries: self.entries[..topk.min(self.entries.len())].to_vec(),
        }
    }
}

pub fn match_b0(x_word: u32, y_word: u32) -> u32 {
    (x_word == y_word) as u32
}

pub fn match_b1(x_words: &[u32], y_words: &[u32]) -> u32 {
    x_words.iter().zip(y_words).map(|(a, b)| match_b0(*a, *b)).sum()
}

pub fn match_b2(x_words: &[u32], y_words: &[u32]) -> u32 {
    (x_words.len() == y_words.len() && x_words == y_words) as u32
}

/// A query quantized (and signed) against an index.
#[derive(Debug, Clone)]
pub struct PreparedQuery {
    pub k: usize,
    /// `K` words per feature.
    pub words: Vec<u32>,
    /// `K` signatures per feature when the index has Hamming parameters.
    pub signatures: Option<Vec<u64>>,
}

impl PreparedQuery {
    pub fn num_features(&self) -> usize {
        self.words.len() / self.k
    }
}

pub fn prepare_query(query: &ImageRecord, index: &IndexBundle) -> Result<PreparedQuery> {
    if query.dim() != index.dim() {
        return Err(Error::DimMismatch {
            expected: index.dim(),
            got: query.dim(),
        });
    }
    let k = index.num_vocabularies();
    let mut words = Vec::with_capacity(query.len() * k);
    let mut sigs = index.hamming.as_ref().map(|_| Vec::with_capacity(query.len() * k));
    for x in query.descriptors() {
        let q = quantize(x, &index.vocabularies)?;
        if let (Some(s), Some(params)) = (&mut sigs, &index.hamming) {
            for (w, p) in q.iter().zip(params) {
                s.push(compute_signature(x, *w, p)?.bits);
            }
        }
        words.extend_from_slice(&q);
    }
    Ok(PreparedQuery {
        k,
        words,
        signatures: sigs,
    })
}

/// Scores one query image against the index.
pub fn score_query(
    query: &ImageRecord,
    index: &IndexBundle,
    method: &ScoringMethod,
    cfg: &MergeConfig,
) -> Result<RankedResult> {
    let prepared = prepare_query(query, index)?;
    score_prepared(&prepared, index, method, cfg)
}

/// Scores every image of `queries`, in parallel across queries.
pub fn score_queries(
    queries: &Corpus,
    index: &IndexBundle,
    method: &ScoringMethod,
    cfg: &MergeConfig,
) -> Result<Vec<RankedResult>> {
    check_request(index, method, cfg)?;
    queries
        .images()
        .par_iter()
        .map(|q| score_query(q, index, method, cfg))
        .collect()
}

fn check_request(index: &IndexBundle, method: &ScoringMethod, cfg: &MergeConfig) -> Result<()> {
    method.validate(index.num_vocabularies())?;
    cfg.validate()?;
    if method.use_hamming && !index.has_signatures() {
        return Err(Error::InvalidIndex(
            "Hamming filtering requested but the index has no signatures".into(),
        ));
    }
    Ok(())
}

pub fn score_prepared(
    q: &PreparedQuery,
    index: &IndexBundle,
    method: &ScoringMethod,
    cfg: &MergeConfig,
) -> Result<RankedResult> {
    check_request(index, method, cfg)?;
    if q.k != index.num_vocabularies() {
        return Err(Error::InvalidIndex(format!(
            "query prepared for K = {} against an index with K = {}",
            q.k,
            index.num_vocabularies()
        )));
    }
    if method.use_hamming && q.signatures.is_none() {
        return Err(Error::Invalid("query has no signatures".into()));
    }
    if method.method == Method::RankAggregation {
        let per: Vec<RankedResult> = (0..q.k)
            .map(|j| {
                let m = ScoringMethod {
                    method: Method::B0(j),
                    ..*method
                };
                score_prepared(q, index, &m, cfg)
            })
            .collect::<Result<_>>()?;
        return rank_aggregate(&per);
    }
    let model = WeightModel::new(cfg, index.n_images as u64)?;
    let mut acc = Accumulator::new(index.n_images as usize);
    for n in 0..q.num_features() {
        accumulate_feature(q, n, index, method, cfg.he_threshold, &model, &mut acc);
    }
    Ok(acc.finish(&index.image_norms))
}

struct Accumulator {
    scores: Vec<f64>,
    touched: Vec<bool>,
    order: Vec<u32>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            scores: vec![0.0; n],
            touched: vec![false; n],
            order: Vec::new(),
        }
    }

    #[inline]
    fn add(&mut self, image: usize, v: f64) {
        self.scores[image] += v;
        if !self.touched[image] {
            self.touched[image] = true;
            self.order.push(image as u32);
        }
    }

    fn finish(self, norms: &[f32]) -> RankedResult {
        let entries = self
            .order
            .iter()
            .map(|&i| (i, self.scores[i as usize] / norms[i as usize] as f64))
            .collect();
        RankedResult::from_scores(entries)
    }
}

/// Vote value per membership mask, plus whether the mask votes at all.
fn mask_values(
    q_idf_sq: &[f64],
    cards: &[(usize, usize)],
    method: Method,
    model: &WeightModel,
    vals: &mut [f64; MASKS],
    votes: &mut [bool; MASKS],
) {
    let k = q_idf_sq.len();
    let full = full_mask(k);
    for mask in 1..=full {
        let order = mask.count_ones();
        let mut sum = 0.0;
        for (j, sq) in q_idf_sq.iter().enumerate() {
            if mask >> j & 1 == 1 {
                sum += sq;
            }
        }
        let mean = sum / order as f64;
        let (f, idf_w) = match method {
            Method::B0(j) => ((mask >> j & 1) as f64, q_idf_sq[j]),
            Method::B1 => (order as f64, mean),
            Method::B2 => ((mask == full) as u32 as f64, mean),
            Method::Bayes => {
                let f = if order >= 2 {
                    let (inter, union) = cards[mask as usize];
                    order as f64 * model.weight(inter, union)
                } else {
                    1.0
                };
                (f, mean)
            }
            Method::RankAggregation => unreachable!("fused from B0 runs"),
        };
        vals[mask as usize] = f * idf_w;
        votes[mask as usize] = f > 0.0;
    }
}

/// One query feature: every feature in the union of its `K` lists votes
/// once. List `k` skips entries that also sit in a lower-numbered list, so
/// the union is traversed exactly once without a merge.
fn accumulate_feature(
    q: &PreparedQuery,
    n: usize,
    index: &IndexBundle,
    method: &ScoringMethod,
    he_threshold: u32,
    model: &WeightModel,
    acc: &mut Accumulator,
) {
    let k = q.k;
    let words = &q.words[n * k..(n + 1) * k];
    let qsig = q.signatures.as_ref().map(|s| &s[n * k..(n + 1) * k]);
    let mut lens = [0usize; MAX_VOCABULARIES];
    let mut idf_sq = [0.0f64; MAX_VOCABULARIES];
    for j in 0..k {
        lens[j] = index.postings(j, words[j]).len();
        let idf = index.inverted_files[j].idf[words[j] as usize];
        idf_sq[j] = idf * idf;
    }
    let cards = if method.method == Method::Bayes {
        index.overlap().cardinalities(words, &lens[..k])
    } else {
        Vec::new()
    };
    let mut vals = [0.0f64; MASKS];
    let mut votes = [false; MASKS];
    mask_values(&idf_sq[..k], &cards, method.method, model, &mut vals, &mut votes);

    let gate = |list_sigs: &[u64], e: usize, mask: u32| -> bool {
        let qs = qsig.expect("checked by caller");
        let ys = &list_sigs[e * k..(e + 1) * k];
        let mut m = mask;
        while m != 0 {
            let j = m.trailing_zeros() as usize;
            if (qs[j] ^ ys[j]).count_ones() < he_threshold {
                return true;
            }
            m &= m - 1;
        }
        false
    };

    for j in 0..k {
        let list = index.postings(j, words[j]);
        let tuples = list.word_tuples();
        let sigs = list.signatures().unwrap_or(&[]);
        let lower = (1u32 << j) - 1;
        let mask_of = |e: usize| -> u32 {
            let t = &tuples[e * k..(e + 1) * k];
            let mut mask = 0u32;
            for i in 0..k {
                mask |= ((t[i] == words[i]) as u32) << i;
            }
            mask
        };
        if !method.use_hamming && !method.use_burstiness {
            match k {
                1 => plain_list::<1>(list.keys(), tuples, words, lower, &vals, &votes, acc),
                2 => plain_list::<2>(list.keys(), tuples, words, lower, &vals, &votes, acc),
                3 => plain_list::<3>(list.keys(), tuples, words, lower, &vals, &votes, acc),
                _ => {
                    for (e, &key) in list.keys().iter().enumerate() {
                        let mask = mask_of(e);
                        if mask & lower != 0 || !votes[mask as usize] {
                            continue;
                        }
                        acc.add((key >> 32) as usize, vals[mask as usize]);
                    }
                }
            }
            continue;
        }
        let keys = list.keys();
        let mut e = 0;
        while e < keys.len() {
            let image = keys[e] >> 32;
            let mut end = e;
            while end < keys.len() && keys[end] >> 32 == image {
                end += 1;
            }
            let passes = |i: usize| !method.use_hamming || gate(sigs, i, mask_of(i));
            let burst = if method.use_burstiness {
                ((e..end).filter(|&i| passes(i)).count() as f64).sqrt()
            } else {
                1.0
            };
            for i in e..end {
                let mask = mask_of(i);
                if mask & lower != 0 || !votes[mask as usize] || !passes(i) {
                    continue;
                }
                let mut v = vals[mask as usize];
                if method.use_burstiness && mask.count_ones() == 1 {
                    v /= burst;
                }
                acc.add(image as usize, v);
            }
            e = end;
        }
    }
}

/// Hot path for one list without Hamming gating or burstiness, with the
/// number of vocabularies fixed at compile time.
#[inline]
fn plain_list<const K: usize>(
    keys: &[u64],
    tuples: &[u32],
    words: &[u32],
    lower: u32,
    vals: &[f64; MASKS],
    votes: &[bool; MASKS],
    acc: &mut Accumulator,
) {
    let words: [u32; K] = words.try_into().expect("K words");
    for (&key, t) in keys.iter().zip(tuples.chunks_exact(K)) {
        let mut mask = 0u32;
        for i in 0..K {
            mask |= ((t[i] == words[i]) as u32) << i;
        }
        if mask & lower != 0 || !votes[mask as usize] {
            continue;
        }
        acc.add((key >> 32) as usize, vals[mask as usize]);
    }
}

/// Fuses rankings by median rank, then mean rank, then image id. Images
/// absent from a ranking take rank `U + 1`, `U` being the number of
/// distinct images over all inputs. The fused score encodes that order
/// exactly: `-(2 * median * (K * (U + 1) + 1) + rank_sum)`.
pub fn rank_aggregate(per_vocab: &[RankedResult]) -> Result<RankedResult> {
    if per_vocab.is_empty() {
        return Err(Error::Invalid("rank aggregation needs at least one ranking".into()));
    }
    let k = per_vocab.len();
    let mut universe: Vec<u32> = per_vocab.iter().flat_map(|r| r.image_ids()).collect();
    universe.sort_unstable();
    universe.dedup();
    let u = universe.len();
    let missing = u as u64 + 1;
    let mut ranks = vec![vec![missing; k]; u];
    for (j, r) in per_vocab.iter().enumerate() {
        for (pos, id) in r.image_ids().enumerate() {
            let slot = universe.binary_search(&id).expect("id from universe");
            ranks[slot][j] = pos as u64 + 1;
        }
    }
    let scale = k as u64 * missing + 1;
    let entries = universe
        .iter()
        .zip(ranks.iter_mut())
        .map(|(&id, r)| {
            r.sort_unstable();
            let twice_median = if k % 2 == 1 {
                2 * r[k / 2]
            } else {
                r[k / 2 - 1] + r[k / 2]
            };
            let sum: u64 = r.iter().sum();
            (id, -((twice_median * scale + sum) as f64))
        })
        .collect();
    Ok(RankedResult::from_scores(entries))
}

// ---------------------------------------------------------------------------
// Results file
// ---------------------------------------------------------------------------

/// `query_id: image_id score image_id score ...`, at most `topk` pairs.
pub fn format_results(results: &[(u32, RankedResult)], topk: usize) -> String {
    let mut s = String::new();
    for (qid, r) in results {
        write!(s, "{qid}:").unwrap();
        for (id, score) in r.entries.iter().take(topk) {
            write!(s, " {id} {score}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_results(text: &str) -> Result<Vec<(u32, RankedResult)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |m: String| Error::Parse {
            line: i + 1,
            message: m,
        };
        let (q, rest) = line.split_once(':').ok_or_else(|| perr("missing ':'".into()))?;
        let qid: u32 = q.trim().parse().map_err(|_| perr(format!("bad query id {q:?}")))?;
        let toks: Vec<&str> = rest.split_whitespace().collect();
        if !toks.len().is_multiple_of(2) {
            return Err(perr("odd number of fields after ':'".into()));
        }
        let mut entries = Vec::with_capacity(toks.len() / 2);
        for p in toks.chunks_exact(2) {
            let id: u32 = p[0].parse().map_err(|_| perr(format!("bad image id {:?}", p[0])))?;
            let score: f64 = p[1].parse().map_err(|_| perr(format!("bad score {:?}", p[1])))?;
            if !score.is_finite() {
                return Err(perr(format!("non-finite score for image {id}")));
            }
            entries.push((id, score));
        }
        out.push((qid, RankedResult { entries }));
    }
    Ok(out)
}

pub fn write_results(path: impl AsRef<Path>, results: &[(u32, RankedResult)], topk: usize) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_results(results, topk)).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<(u32, RankedResult)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results(&text)
}

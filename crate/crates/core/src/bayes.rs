//! The probabilistic match weight for features that several vocabularies
//! agree on.
//!
//! Given the `K` posting lists retrieved for one query feature, an indexed
//! feature present in exactly the subset `S` of lists (`|S| >= 2`) is a
//! candidate match counted `|S|` times by plain histogram concatenation.
//! Here it is instead weighted by the estimated probability that it is a
//! true match:
//!
//! ```text
//! w = (1 + term1 / term2 * term3)^-1
//! term1 = |∩S| / |∪S|           false matches spread uniformly over the union
//! term2 = clamp(a * r + b)      true-match share of the intersection, fitted line
//! term3 = ln(N * c)             prior odds of a false match, grows with the database
//! ```
//!
//! where `r = |∩S| / |∪S|` over the lists in `S`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hamming::DEFAULT_HE_THRESHOLD;
use crate::types::FeatureRef;

/// Most vocabularies a query can merge; subsets are `u32` bit masks and
/// the overlap table packs one word per vocabulary into 128 bits.
pub const MAX_VOCABULARIES: usize = 8;

/// Lower clamp on term 2.
pub const TERM2_FLOOR: f64 = 1e-9;

const EMBEDDED_CONFIG: &str = include_str!("../config/merge.conf");

// ---------------------------------------------------------------------------
// Set algebra
// ---------------------------------------------------------------------------

/// Features present in exactly the lists of `mask`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipClass {
    pub mask: u32,
    pub members: Vec<FeatureRef>,
    /// `|∪_{i∈mask} A_i|`
    pub union_card: usize,
    /// `|∩_{i∈mask} A_i|`
    pub intersection_card: usize,
}

impl MembershipClass {
    pub fn order(&self) -> u32 {
        self.mask.count_ones()
    }

    pub fn ratio(&self) -> f64 {
        self.intersection_card as f64 / self.union_card as f64
    }
}

/// Partition of the union of `K` posting lists by exact membership.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetDecomposition {
    pub num_lists: usize,
    pub list_lens: Vec<usize>,
    /// Occupied classes ordered by mask.
    pub classes: Vec<MembershipClass>,
}

impl SetDecomposition {
    pub fn class(&self, mask: u32) -> Option<&MembershipClass> {
        self.classes.iter().find(|c| c.mask == mask)
    }

    pub fn union_len(&self) -> usize {
        self.classes.iter().map(|c| c.members.len()).sum()
    }

    /// Features present in exactly one list.
    pub fn difference_set(&self) -> impl Iterator<Item = &FeatureRef> {
        self.classes
            .iter()
            .filter(|c| c.order() == 1)
            .flat_map(|c| c.members.iter())
    }

    /// `|∩| / |∪|` over all `K` lists, `None` when the union is empty.
    pub fn full_ratio(&self) -> Option<f64> {
        let full = full_mask(self.num_lists);
        let union = self.union_len();
        (union > 0).then(|| {
            let inter: usize = self
                .classes
                .iter()
                .filter(|c| c.mask == full)
                .map(|c| c.members.len())
                .sum();
            inter as f64 / union as f64
        })
    }
}

pub(crate) fn full_mask(k: usize) -> u32 {
    if k >= 32 {
        u32::MAX
    } else {
        (1u32 << k) - 1
    }
}

/// Simultaneous sweep over `K` ascending key lists.
///
/// Yields each distinct key once along with the mask of lists holding it;
/// `positions()` then gives, per list in the mask, the index of the entry.
pub(crate) struct KWayMerge<'a> {
    lists: &'a [&'a [u64]],
    cursors: [usize; MAX_VOCABULARIES],
    positions: [usize; MAX_VOCABULARIES],
}

impl<'a> KWayMerge<'a> {
    pub(crate) fn new(lists: &'a [&'a [u64]]) -> Self {
        debug_assert!(lists.len() <= MAX_VOCABULARIES);
        Self {
            lists,
            cursors: [0; MAX_VOCABULARIES],
            positions: [0; MAX_VOCABULARIES],
        }
    }

    #[inline]
    pub(crate) fn positions(&self) -> &[usize] {
        &self.positions[..self.lists.len()]
    }
}

impl Iterator for KWayMerge<'_> {
    type Item = (u64, u32);

    #[inline]
    fn next(&mut self) -> Option<(u64, u32)> {
        let mut min = u64::MAX;
        let mut mask = 0u32;
        for (i, list) in self.lists.iter().enumerate() {
            // Image ids are < 2^32 - 1, so u64::MAX never occurs as a key.
            let head = list.get(self.cursors[i]).copied().unwrap_or(u64::MAX);
            if head < min {
                min = head;
                mask = 1 << i;
            } else if head == min && head != u64::MAX {
                mask |= 1 << i;
            }
        }
        if mask == 0 {
            return None;
        }
        let mut m = mask;
        while m != 0 {
            let i = m.trailing_zeros() as usize;
            self.positions[i] = self.cursors[i];
            self.cursors[i] += 1;
            m &= m - 1;
        }
        Some((min, mask))
    }
}

fn check_sorted(lists: &[&[u64]]) -> Result<()> {
    for (l, list) in lists.iter().enumerate() {
        if let Some(p) = list.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::UnsortedPostings {
                list: l,
                position: p + 1,
            });
        }
    }
    Ok(())
}

/// Decomposes the union of `K` sorted, duplicate-free lists into
/// exact-membership classes with one simultaneous sweep.
pub fn decompose(lists: &[&[FeatureRef]]) -> Result<SetDecomposition> {
    let keys: Vec<Vec<u64>> = lists.iter().map(|l| l.iter().map(|f| f.key()).collect()).collect();
    let refs: Vec<&[u64]> = keys.iter().map(Vec::as_slice).collect();
    decompose_keys(&refs)
}

pub(crate) fn decompose_keys(lists: &[&[u64]]) -> Result<SetDecomposition> {
    if lists.is_empty() || lists.len() > MAX_VOCABULARIES {
        return Err(Error::Invalid(format!(
            "decomposition needs 1..={MAX_VOCABULARIES} lists, got {}",
            lists.len()
        )));
    }
    check_sorted(lists)?;
    let mut by_mask: HashMap<u32, Vec<FeatureRef>> = HashMap::new();
    for (key, mask) in KWayMerge::new(lists) {
        by_mask.entry(mask).or_default().push(FeatureRef::from_key(key));
    }
    let exact: Vec<(u32, usize)> = by_mask.iter().map(|(m, v)| (*m, v.len())).collect();
    let mut classes: Vec<MembershipClass> = by_mask
        .into_iter()
        .map(|(mask, members)| {
            let intersection_card = exact.iter().filter(|(m, _)| m & mask == mask).map(|(_, n)| n).sum();
            let union_card = exact.iter().filter(|(m, _)| m & mask != 0).map(|(_, n)| n).sum();
            MembershipClass {
                mask,
                members,
                union_card,
                intersection_card,
            }
        })
        .collect();
    classes.sort_by_key(|c| c.mask);
    Ok(SetDecomposition {
        num_lists: lists.len(),
        list_lens: lists.iter().map(|l| l.len()).collect(),
        classes,
    })
}

// ---------------------------------------------------------------------------
// Offline overlap counts
// ---------------------------------------------------------------------------

/// For every vocabulary subset of size >= 2, the number of indexed features
/// per projected word tuple. `|∩_{i∈S} A_i|` for a query is then a lookup,
/// so the intersection and union cardinalities are known before the
/// posting lists are traversed.
#[derive(Debug, Clone, Default)]
pub struct OverlapTable {
    num_vocabularies: usize,
    shifts: Vec<u32>,
    counts: HashMap<u32, HashMap<u128, u32>>,
}

impl OverlapTable {
    /// `tuples` yields the full word tuple of every indexed feature.
    pub fn build<'a>(vocab_sizes: &[usize], tuples: impl Iterator<Item = &'a [u32]>) -> Result<Self> {
        let k = vocab_sizes.len();
        if k == 0 || k > MAX_VOCABULARIES {
            return Err(Error::Invalid(format!(
                "1..={MAX_VOCABULARIES} vocabularies supported, got {k}"
            )));
        }
        let mut shifts = Vec::with_capacity(k);
        let mut total = 0u32;
        for &s in vocab_sizes {
            shifts.push(total);
            total += bit_width(s);
        }
        if total > 128 {
            return Err(Error::Invalid("vocabulary sizes too large to pack word tuples".into()));
        }
        let masks: Vec<u32> = (1..=full_mask(k)).filter(|m| m.count_ones() >= 2).collect();
        let mut counts: HashMap<u32, HashMap<u128, u32>> = masks.iter().map(|&m| (m, HashMap::new())).collect();
        let table = Self {
            num_vocabularies: k,
            shifts,
            counts: HashMap::new(),
        };
        for words in tuples {
            debug_assert_eq!(words.len(), k);
            for &m in &masks {
                *counts.get_mut(&m).unwrap().entry(table.pack(words, m)).or_insert(0) += 1;
            }
        }
        Ok(Self { counts, ..table })
    }

    fn pack(&self, words: &[u32], mask: u32) -> u128 {
        let mut key = 0u128;
        let mut m = mask;
        while m != 0 {
            let i = m.trailing_zeros() as usize;
            key |= (words[i] as u128) << self.shifts[i];
            m &= m - 1;
        }
        key
    }

    /// `|∩_{i∈mask} A_i|` where `A_i` is the list of `words[i]`.
    pub fn intersection_card(&self, words: &[u32], mask: u32, list_lens: &[usize]) -> usize {
        if mask.count_ones() == 1 {
            return list_lens[mask.trailing_zeros() as usize];
        }
        self.counts
            .get(&mask)
            .and_then(|t| t.get(&self.pack(words, mask)))
            .copied()
            .unwrap_or(0) as usize
    }

    /// Intersection and union cardinalities for every mask in
    /// `1..2^K`, indexed by mask. Unions follow by inclusion-exclusion.
    pub fn cardinalities(&self, words: &[u32], list_lens: &[usize]) -> Vec<(usize, usize)> {
        let n = full_mask(self.num_vocabularies) as usize + 1;
        let mut inter = vec![0usize; n];
        for (m, slot) in inter.iter_mut().enumerate().skip(1) {
            *slot = self.intersection_card(words, m as u32, list_lens);
        }
        let mut out = vec![(0usize, 0usize); n];
        for m in 1..n as u32 {
            let mut union = 0i64;
            // Walk the non-empty submasks of m.
            let mut t = m;
            while t != 0 {
                let sign = if t.count_ones() % 2 == 1 { 1 } else { -1 };
                union += sign * inter[t as usize] as i64;
                t = (t - 1) & m;
            }
            out[m as usize] = (inter[m as usize], union as usize);
        }
        out
    }

    pub fn num_vocabularies(&self) -> usize {
        self.num_vocabularies
    }
}

fn bit_width(size: usize) -> u32 {
    (usize::BITS - size.saturating_sub(1).leading_zeros()).max(1)
}

// ---------------------------------------------------------------------------
// Configuration and the weight itself
// ---------------------------------------------------------------------------

/// Tunables of the weight model.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    /// Multiplier inside the prior-odds logarithm.
    pub c: f64,
    /// Slope of the term-2 line.
    pub term2_slope: f64,
    /// Intercept of the term-2 line.
    pub term2_intercept: f64,
    /// Database size used in term 3; the index's image count when `None`.
    pub n_override: Option<u32>,
    /// Hamming acceptance threshold (strict).
    pub he_threshold: u32,
    /// Pin every weight to 1, which turns Bayes scoring into plain
    /// histogram concatenation.
    pub force_unit_weight: bool,
}

impl Default for MergeConfig {
    /// The shipped configuration in `config/merge.conf`.
    fn default() -> Self {
        Self::parse(EMBEDDED_CONFIG).expect("embedded merge.conf is valid")
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.c.is_finite() && self.c > 0.0) {
            return bad(format!("c must be positive, got {}", self.c));
        }
        if !(self.term2_slope.is_finite() && self.term2_slope >= 0.0) {
            return bad(format!("term-2 slope must be >= 0, got {}", self.term2_slope));
        }
        if !(self.term2_intercept.is_finite() && self.term2_intercept > 0.0) {
            return bad(format!("term-2 intercept must be > 0, got {}", self.term2_intercept));
        }
        if self.term2_slope + self.term2_intercept > 1.0 + 1e-9 {
            return bad(format!(
                "term-2 line exceeds 1 at r = 1: a + b = {}",
                self.term2_slope + self.term2_intercept
            ));
        }
        if self.n_override == Some(0) {
            return bad("N override must be >= 1".into());
        }
        if self.he_threshold > 65 {
            return bad(format!(
                "Hamming threshold {} exceeds signature width",
                self.he_threshold
            ));
        }
        Ok(())
    }

    /// Parses a `key=value` file. Keys: `c`, `a`, `b`, `n`, `he_threshold`,
    /// `force_w1`. `#` starts a comment. Missing keys keep built-in values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self {
            c: 30.0,
            term2_slope: 0.0,
            term2_intercept: 1.0,
            n_override: None,
            he_threshold: DEFAULT_HE_THRESHOLD,
            force_unit_weight: false,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|e| perr(format!("{key}: {e}")));
            match key {
                "c" => cfg.c = num(value)?,
                "a" => cfg.term2_slope = num(value)?,
                "b" => cfg.term2_intercept = num(value)?,
                "n" => {
                    cfg.n_override = match value {
                        "" | "auto" => None,
                        v => Some(v.parse().map_err(|e| perr(format!("n: {e}")))?),
                    }
                }
                "he_threshold" => cfg.he_threshold = value.parse().map_err(|e| perr(format!("he_threshold: {e}")))?,
                "force_w1" => cfg.force_unit_weight = value.parse().map_err(|e| perr(format!("force_w1: {e}")))?,
                other => return Err(perr(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "c={}", self.c).unwrap();
        writeln!(s, "a={}", self.term2_slope).unwrap();
        writeln!(s, "b={}", self.term2_intercept).unwrap();
        match self.n_override {
            Some(n) => writeln!(s, "n={n}").unwrap(),
            None => writeln!(s, "n=auto").unwrap(),
        }
        writeln!(s, "he_threshold={}", self.he_threshold).unwrap();
        if self.force_unit_weight {
            writeln!(s, "force_w1=true").unwrap();
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Probability that a false match falls into the intersection.
pub fn term1(inter_card: usize, union_card: usize) -> Result<f64> {
    if union_card == 0 {
        return Err(Error::Invalid("term 1 undefined for an empty union".into()));
    }
    if inter_card > union_card {
        return Err(Error::Invalid(format!(
            "intersection {inter_card} larger than union {union_card}"
        )));
    }
    Ok(inter_card as f64 / union_card as f64)
}

/// Probability that a true match falls into the intersection, as a line in
/// the cardinality ratio.
pub fn term2(r: f64, cfg: &MergeConfig) -> f64 {
    (cfg.term2_slope * r + cfg.term2_intercept).clamp(TERM2_FLOOR, 1.0)
}

/// Prior odds of a false match.
pub fn term3(n_images: u64, c: f64) -> Result<f64> {
    let prior = n_images as f64 * c;
    if prior.is_nan() || prior < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "N * c = {prior} < 1 gives negative prior odds"
        )));
    }
    Ok(prior.ln())
}

/// `w(x, y)` for a feature in an intersection with the given cardinalities.
pub fn bayes_weight(inter_card: usize, union_card: usize, n_images: u64, cfg: &MergeConfig) -> Result<f64> {
    let t1 = term1(inter_card, union_card)?;
    let t3 = term3(n_images, cfg.c)?;
    if cfg.force_unit_weight {
        return Ok(1.0);
    }
    Ok(1.0 / (1.0 + t1 / term2(t1, cfg) * t3))
}

/// A [`MergeConfig`] resolved against a database size, with term 3
/// evaluated once.
#[derive(Debug, Clone, Copy)]
pub struct WeightModel {
    slope: f64,
    intercept: f64,
    log_prior: f64,
    force_unit: bool,
}

impl WeightModel {
    pub fn new(cfg: &MergeConfig, n_images: u64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_override.map(u64::from).unwrap_or(n_images);
        Ok(Self {
            slope: cfg.term2_slope,
            intercept: cfg.term2_intercept,
            log_prior: term3(n, cfg.c)?,
            force_unit: cfg.force_unit_weight,
        })
    }

    /// Caller guarantees `0 <= inter <= union` and `union >= 1`.
    #[inline]
    pub fn weight(&self, inter_card: usize, union_card: usize) -> f64 {
        if self.force_unit {
            return 1.0;
        }
        let r = inter_card as f64 / union_card as f64;
        let t2 = (self.slope * r + self.intercept).clamp(TERM2_FLOOR, 1.0);
        1.0 / (1.0 + r / t2 * self.log_prior)
    }

    pub fn log_prior(&self) -> f64 {
        self.log_prior
    }
}

//! Evaluation: ground truth, mAP and N-S metrics, synthetic corpora, term-2
//! calibration and cardinality-ratio histograms.

mod calibrate;
mod synth;

pub use calibrate::{
    calibrate_term2, calibration_points, fit_term2, ratio_histogram, write_histogram_csv, CalibrationFit,
    RatioHistogram,
};
pub use synth::{generate_synthetic, SyntheticData, SyntheticSpec, BENCHMARK_VOCAB_SIZE};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::retrieval::RankedResult;

/// Query image id to the set of relevant database image ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub relevant: BTreeMap<u32, BTreeSet<u32>>,
}

impl GroundTruth {
    pub fn insert(&mut self, query: u32, relevant: impl IntoIterator<Item = u32>) {
        self.relevant.entry(query).or_default().extend(relevant);
    }

    pub fn get(&self, query: u32) -> Option<&BTreeSet<u32>> {
        self.relevant.get(&query)
    }

    pub fn len(&self) -> usize {
        self.relevant.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevant.is_empty()
    }

    pub fn validate(&self, n_db_images: u32) -> Result<()> {
        for (q, rel) in &self.relevant {
            if rel.is_empty() {
                return Err(Error::Invalid(format!("query {q} has no relevant images")));
            }
            if let Some(bad) = rel.iter().find(|&&r| r >= n_db_images) {
                return Err(Error::Invalid(format!(
                    "query {q}: relevant image {bad} not in a database of {n_db_images}"
                )));
            }
        }
        Ok(())
    }

    /// `query: relevant relevant ...` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (q, rel) in &self.relevant {
            write!(s, "{q}:").unwrap();
            for r in rel {
                write!(s, " {r}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut gt = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |m: String| Error::Parse {
                line: i + 1,
                message: m,
            };
            let (q, rest) = line.split_once(':').ok_or_else(|| perr("missing ':'".into()))?;
            let q: u32 = q.trim().parse().map_err(|_| perr(format!("bad query id {q:?}")))?;
            let ids = rest
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| perr(format!("bad image id {t:?}"))))
                .collect::<Result<BTreeSet<u32>>>()?;
            if ids.is_empty() {
                return Err(perr(format!("query {q} lists no relevant images")));
            }
            if gt.relevant.insert(q, ids).is_some() {
                return Err(perr(format!("query {q} listed twice")));
            }
        }
        Ok(gt)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Mean over relevant items of the precision at their rank; relevant items
/// missing from the ranking contribute zero. `exclude` (the query itself
/// when it sits in the database) is dropped from both the ranking and the
/// relevant set.
pub fn average_precision(ranked: &RankedResult, relevant: &BTreeSet<u32>, exclude: Option<u32>) -> Result<f64> {
    let n_rel = relevant.iter().filter(|&&r| Some(r) != exclude).count();
    if n_rel == 0 {
        return Err(Error::Invalid(
            "average precision needs a non-empty relevant set".into(),
        ));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut rank = 0usize;
    for id in ranked.image_ids() {
        if Some(id) == exclude {
            continue;
        }
        rank += 1;
        if relevant.contains(&id) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Ok(sum / n_rel as f64)
}

/// Relevant images among the first four results, the query included.
pub fn ns_score(ranked: &RankedResult, relevant: &BTreeSet<u32>) -> Result<u32> {
    if relevant.len() != 4 {
        return Err(Error::Invalid(format!(
            "N-S score expects 4 relevant images, got {}",
            relevant.len()
        )));
    }
    Ok(ranked.image_ids().take(4).filter(|id| relevant.contains(id)).count() as u32)
}

/// Which metric a run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// mAP; `exclude_self` drops the query from its own ranking.
    MeanAveragePrecision { exclude_self: bool },
    /// Mean N-S score.
    NsScore,
}

impl Protocol {
    pub fn column(&self) -> &'static str {
        match self {
            Protocol::MeanAveragePrecision { .. } => "map",
            Protocol::NsScore => "ns",
        }
    }
}

/// Evaluates `results` (query id, ranking) against `gt`. Every ground-truth
/// query must have a result line.
pub fn evaluate(results: &[(u32, RankedResult)], gt: &GroundTruth, protocol: Protocol) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Invalid("ground truth is empty".into()));
    }
    let by_query: BTreeMap<u32, &RankedResult> = results.iter().map(|(q, r)| (*q, r)).collect();
    let mut total = 0.0;
    for (q, rel) in &gt.relevant {
        let r = by_query
            .get(q)
            .ok_or_else(|| Error::Invalid(format!("no results for query {q}")))?;
        total += match protocol {
            Protocol::MeanAveragePrecision { exclude_self } => average_precision(r, rel, exclude_self.then_some(*q))?,
            Protocol::NsScore => ns_score(r, rel)? as f64,
        };
    }
    Ok(total / gt.len() as f64)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub k: usize,
    pub vocab_size: usize,
    pub value: f64,
    pub query_time_ms_mean: f64,
}

pub fn format_metrics_csv(rows: &[MetricsRow], protocol: Protocol) -> String {
    let mut s = format!("method,k,vocab_size,{},query_time_ms_mean\n", protocol.column());
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.6},{:.4}",
            r.method, r.k, r.vocab_size, r.value, r.query_time_ms_mean
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(ids: &[u32]) -> RankedResult {
        RankedResult {
            entries: ids.iter().enumerate().map(|(i, &id)| (id, 100.0 - i as f64)).collect(),
        }
    }

    fn set(ids: &[u32]) -> BTreeSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&ranking(&[7]), &set(&[7]), None).unwrap(), 1.0);
        assert_eq!(average_precision(&ranking(&[3, 7]), &set(&[7]), None).unwrap(), 0.5);
        let ap = average_precision(&ranking(&[1, 9, 2, 8, 3]), &set(&[1, 2, 3]), None).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0).abs() < 1e-12);
        assert!(average_precision(&ranking(&[1]), &set(&[]), None).is_err());
    }

    #[test]
    fn ap_excludes_query_and_counts_missing_as_zero() {
        let ap = average_precision(&ranking(&[5, 1, 2]), &set(&[5, 1, 4]), Some(5)).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_score_scale() {
        let r = ranking(&[4, 2, 8, 1]);
        let scaled = RankedResult {
            entries: r.entries.iter().map(|(i, s)| (*i, s * 3.5)).collect(),
        };
        let rel = set(&[2, 1]);
        assert_eq!(
            average_precision(&r, &rel, None).unwrap(),
            average_precision(&scaled, &rel, None).unwrap()
        );
    }

    #[test]
    fn ns_examples() {
        let rel = set(&[0, 1, 2, 3]);
        assert_eq!(ns_score(&ranking(&[3, 1, 0, 2, 9]), &rel).unwrap(), 4);
        assert_eq!(ns_score(&ranking(&[9, 8, 7, 6, 0]), &rel).unwrap(), 0);
        assert_eq!(ns_score(&ranking(&[0, 8, 1, 6]), &rel).unwrap(), 2);
        assert!(ns_score(&ranking(&[0]), &set(&[0, 1])).is_err());
    }

    #[test]
    fn ground_truth_round_trip() {
        let mut gt = GroundTruth::default();
        gt.insert(0, [4, 2]);
        gt.insert(3, [1]);
        let text = gt.to_text();
        assert_eq!(text, "0: 2 4\n3: 1\n");
        assert_eq!(GroundTruth::parse(&text).unwrap(), gt);
        assert!(GroundTruth::parse("1:\n").is_err());
        assert!(GroundTruth::parse("1: 2\n1: 3\n").is_err());
        assert!(gt.validate(4).is_err());
        gt.validate(5).unwrap();
    }

    #[test]
    fn evaluate_requires_every_query() {
        let mut gt = GroundTruth::default();
        gt.insert(0, [1]);
        gt.insert(1, [0]);
        let results = vec![(0, ranking(&[1, 0]))];
        let err = evaluate(&results, &gt, Protocol::MeanAveragePrecision { exclude_self: false }).unwrap_err();
        assert!(err.to_string().contains("query 1"));
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricsRow {
            method: "bayes".into(),
            k: 2,
            vocab_size: 64,
            value: 0.5,
            query_time_ms_mean: 1.25,
        }];
        let csv = format_metrics_csv(&rows, Protocol::MeanAveragePrecision { exclude_self: true });
        assert_eq!(
            csv,
            "method,k,vocab_size,map,query_time_ms_mean\nbayes,2,64,0.500000,1.2500\n"
        );
    }
}

//! Mean average precision over full Hamming rankings.
//!
//! Queries with no relevant database item score AP = 0 and still count in
//! the mean. Some toolkits drop such queries instead, so numbers from them
//! are only comparable when every query has at least one relevant item.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codes::PackedCodeMatrix;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::retrieval::RetrievalIndex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeMode {
    /// Relevant when the label sets are equal.
    #[default]
    SingleLabel,
    /// Relevant when the label sets share at least one id.
    MultiLabel,
}

impl JudgeMode {
    /// Relevance of two label sets. An empty set is never relevant.
    pub fn relevant(self, a: &LabelSet, b: &LabelSet) -> bool {
        if a.is_empty() || b.is_empty() {
            return false;
        }
        match self {
            JudgeMode::SingleLabel => a == b,
            JudgeMode::MultiLabel => a.intersects(b),
        }
    }
}

impl fmt::Display for JudgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JudgeMode::SingleLabel => "single-label",
            JudgeMode::MultiLabel => "multi-label",
        })
    }
}

impl FromStr for JudgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-label" | "single" => Ok(JudgeMode::SingleLabel),
            "multi-label" | "multi" => Ok(JudgeMode::MultiLabel),
            _ => Err(Error::Config(format!("unknown relevance mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RelevanceJudge<'a> {
    pub mode: JudgeMode,
    pub queries: &'a [LabelSet],
    pub database: &'a [LabelSet],
}

impl<'a> RelevanceJudge<'a> {
    pub fn new(mode: JudgeMode, queries: &'a [LabelSet], database: &'a [LabelSet]) -> Self {
        RelevanceJudge {
            mode,
            queries,
            database,
        }
    }

    pub fn is_relevant(&self, query: usize, item: usize) -> bool {
        self.mode
            .relevant(&self.queries[query], &self.database[item])
    }

    pub fn relevant_count(&self, query: usize) -> usize {
        (0..self.database.len())
            .filter(|&i| self.is_relevant(query, i))
            .count()
    }
}

/// AP of a relevance sequence, normalised by the relevant items it contains.
fn ap_of(relevance: impl Iterator<Item = bool>) -> f64 {
    let mut hits = 0u64;
    let mut sum = 0.0f64;
    for (j, rel) in relevance.enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// AP of `query` for a ranking that must be a permutation of the database.
pub fn average_precision(
    ranking: &[usize],
    judge: &RelevanceJudge<'_>,
    query: usize,
) -> Result<f64> {
    let n = judge.database.len();
    if query >= judge.queries.len() {
        return Err(Error::data(format!("query id {query} out of range")));
    }
    let mut seen = vec![false; n];
    if ranking.len() != n {
        return Err(Error::data(format!(
            "ranking has {} entries for a database of {n}",
            ranking.len()
        )));
    }
    for &id in ranking {
        if id >= n || std::mem::replace(&mut seen[id], true) {
            return Err(Error::data(format!(
                "ranking is not a permutation (id {id})"
            )));
        }
    }
    Ok(ap_of(
        ranking.iter().map(|&id| judge.is_relevant(query, id)),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapOptions {
    /// Query `j` is database item `j`; drop it from its own ranking.
    pub exclude_self: bool,
    /// Score only the first `topn` results; `None` scores the full ranking.
    pub topn: Option<usize>,
}

pub const PRECISION_DEPTH: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub precision_at_500: f64,
    pub queries: usize,
}

/// mAP of `queries` against `database`, both labelled code matrices.
pub fn mean_average_precision(
    database: &PackedCodeMatrix,
    queries: &PackedCodeMatrix,
    mode: JudgeMode,
    options: MapOptions,
) -> Result<MapResult> {
    if queries.is_empty() {
        return Err(Error::data("no queries to evaluate"));
    }
    if options.exclude_self && database.len() != queries.len() {
        return Err(Error::data(
            "excluding self-matches needs the query set to be the database",
        ));
    }
    if options.topn == Some(0) {
        return Err(Error::param("topn must be at least 1"));
    }
    let index = RetrievalIndex::build(database.clone())?;
    if queries.bits() != index.bits() {
        return Err(Error::dim(format!(
            "{}-bit queries against {}-bit database codes",
            queries.bits(),
            index.bits()
        )));
    }
    queries.validate()?;
    let judge = RelevanceJudge::new(mode, queries.labels(), database.labels());
    let per_query: Vec<(f64, f64)> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let ranking = index.rank_all(queries.code(q))?;
            let ids = ranking
                .iter()
                .map(|h| h.id)
                .filter(|&id| !(options.exclude_self && id == q));
            let rel: Vec<bool> = ids.map(|id| judge.is_relevant(q, id)).collect();
            let depth = options.topn.unwrap_or(rel.len()).min(rel.len());
            let ap = ap_of(rel[..depth].iter().copied());
            let p_depth = PRECISION_DEPTH.min(rel.len());
            let p = if p_depth == 0 {
                0.0
            } else {
                rel[..p_depth].iter().filter(|&&r| r).count() as f64 / p_depth as f64
            };
            Ok((ap, p))
        })
        .collect::<Result<_>>()?;
    let n = per_query.len() as f64;
    let (ap_sum, p_sum) = per_query
        .iter()
        .fold((0.0, 0.0), |(a, p), &(x, y)| (a + x, p + y));
    Ok(MapResult {
        map: ap_sum / n,
        precision_at_500: p_sum / n,
        queries: per_query.len(),
    })
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub bits: usize,
    pub method: String,
    pub map: f64,
    pub precision_at_500: f64,
}

pub const REPORT_HEADER: &str = "bits,method,map,precision_at_500";

pub fn write_report<W: Write>(mut w: W, rows: &[EvalRecord]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6}",
            r.bits, r.method, r.map, r.precision_at_500
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(ids: &[u16]) -> Vec<LabelSet> {
        ids.iter().map(|&i| LabelSet::single(i)).collect()
    }

    #[test]
    fn relevance_rules() {
        let a = LabelSet::new(vec![1, 3]);
        let b = LabelSet::new(vec![3, 7]);
        assert!(JudgeMode::MultiLabel.relevant(&a, &b));
        assert!(JudgeMode::MultiLabel.relevant(&b, &a));
        assert!(!JudgeMode::SingleLabel.relevant(&a, &b));
        assert!(!JudgeMode::SingleLabel.relevant(&LabelSet::single(1), &LabelSet::single(2)));
        for m in [JudgeMode::SingleLabel, JudgeMode::MultiLabel] {
            assert!(!m.relevant(&LabelSet::default(), &a));
            assert!(!m.relevant(&LabelSet::default(), &LabelSet::default()));
        }
    }

    #[test]
    fn hand_computed_ap() {
        let q = labels(&[0]);
        let db = labels(&[0, 1, 0]);
        let judge = RelevanceJudge::new(JudgeMode::SingleLabel, &q, &db);
        let ap = average_precision(&[0, 1, 2], &judge, 0).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);

        let all = labels(&[0, 0, 0]);
        let judge = RelevanceJudge::new(JudgeMode::SingleLabel, &q, &all);
        assert_eq!(average_precision(&[2, 0, 1], &judge, 0).unwrap(), 1.0);
        let none = labels(&[4, 5, 6]);
        let judge = RelevanceJudge::new(JudgeMode::SingleLabel, &q, &none);
        assert_eq!(average_precision(&[2, 0, 1], &judge, 0).unwrap(), 0.0);
        assert!(matches!(
            average_precision(&[0, 0, 1], &judge, 0),
            Err(Error::Data(_))
        ));
        assert!(average_precision(&[0, 1], &judge, 0).is_err());
    }

    fn micro_fixture() -> (PackedCodeMatrix, PackedCodeMatrix) {
        let db = PackedCodeMatrix::from_bits(&[
            [false, false, false, false],
            [true, false, false, false],
            [false, true, false, false],
            [true, true, true, false],
            [true, true, true, true],
        ])
        .unwrap()
        .with_labels(labels(&[0, 1, 0, 1, 1]))
        .unwrap();
        let q = PackedCodeMatrix::from_bits(&[[false; 4]])
            .unwrap()
            .with_labels(labels(&[0]))
            .unwrap();
        (db, q)
    }

    #[test]
    fn micro_example_map() {
        // Distances 0,1,1,3,4: ranking A B A B B, AP = (1/1 + 2/3) / 2.
        let (db, q) = micro_fixture();
        let r =
            mean_average_precision(&db, &q, JudgeMode::SingleLabel, MapOptions::default()).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);
        assert!((r.precision_at_500 - 0.4).abs() < 1e-12);
        let top2 = MapOptions {
            topn: Some(2),
            ..Default::default()
        };
        assert_eq!(
            mean_average_precision(&db, &q, JudgeMode::SingleLabel, top2)
                .unwrap()
                .map,
            1.0
        );
    }

    #[test]
    fn separable_codes_score_one() {
        let rows: Vec<[bool; 6]> = (0..30)
            .map(|i| {
                let c = i % 3;
                [c == 0, c == 0, c == 1, c == 1, c == 2, c == 2]
            })
            .collect();
        let lab: Vec<u16> = (0..30).map(|i| (i % 3) as u16).collect();
        let m = PackedCodeMatrix::from_bits(&rows)
            .unwrap()
            .with_labels(labels(&lab))
            .unwrap();
        for exclude_self in [false, true] {
            let opt = MapOptions {
                exclude_self,
                topn: None,
            };
            assert_eq!(
                mean_average_precision(&m, &m, JudgeMode::SingleLabel, opt)
                    .unwrap()
                    .map,
                1.0
            );
        }
    }

    #[test]
    fn random_codes_balanced_two_class_near_half() {
        let mut maps = Vec::new();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut make = |n: usize| {
                let rows: Vec<Vec<bool>> = (0..n)
                    .map(|_| (0..24).map(|_| rng.random()).collect())
                    .collect();
                let lab: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
                PackedCodeMatrix::from_bits(&rows)
                    .unwrap()
                    .with_labels(labels(&lab))
                    .unwrap()
            };
            let db = make(4000);
            let q = make(300);
            let r = mean_average_precision(&db, &q, JudgeMode::SingleLabel, MapOptions::default())
                .unwrap();
            assert!((r.map - 0.5).abs() <= 0.02, "seed {seed}: {}", r.map);
            maps.push(r.map);
        }
        assert!(maps.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn multi_label_fixture_flips_relevance() {
        let db = PackedCodeMatrix::from_bits(&[[false, false], [true, true]])
            .unwrap()
            .with_labels(vec![LabelSet::new(vec![2]), LabelSet::new(vec![1, 3])])
            .unwrap();
        let q = PackedCodeMatrix::from_bits(&[[false, false]])
            .unwrap()
            .with_labels(vec![LabelSet::new(vec![3, 7])])
            .unwrap();
        let single =
            mean_average_precision(&db, &q, JudgeMode::SingleLabel, MapOptions::default()).unwrap();
        let multi =
            mean_average_precision(&db, &q, JudgeMode::MultiLabel, MapOptions::default()).unwrap();
        assert_eq!(single.map, 0.0);
        assert_eq!(multi.map, 0.5);
    }

    #[test]
    fn report_format() {
        let mut out = Vec::new();
        let row = EvalRecord {
            bits: 12,
            method: "abc".into(),
            map: 0.5,
            precision_at_500: 0.25,
        };
        write_report(&mut out, &[row]).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "bits,method,map,precision_at_500\n12,abc,0.500000,0.250000\n"
        );
    }

    proptest! {
        #[test]
        fn moving_relevant_item_earlier_never_hurts(rel in prop::collection::vec(any::<bool>(), 2..40), pick in any::<prop::sample::Index>()) {
            let ap = ap_of(rel.iter().copied());
            prop_assert!((0.0..=1.0).contains(&ap));
            let hits: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
            prop_assume!(!hits.is_empty());
            let j = hits[pick.index(hits.len())];
            if let Some(i) = (0..j).rev().find(|&i| !rel[i]) {
                let mut moved = rel.clone();
                moved.swap(i, j);
                prop_assert!(ap_of(moved.iter().copied()) >= ap);
            }
        }
    }
}

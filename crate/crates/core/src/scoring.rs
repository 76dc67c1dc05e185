//! Raw pairwise listener answers: ingestion, aggregation into a
//! [`SimilarityMatrix`], and score histograms.
//!
//! Answers for `(a, b)` and `(b, a)` pool together. A listener who scores
//! the same pair twice is counted twice; deduplication is the collection
//! protocol's job, not ours.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};
use crate::simcore::SimilarityMatrix;

pub const DEFAULT_MIN_ANSWERS: usize = 10;
pub const DEFAULT_SCORE_BOUND: i64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub listener_id: String,
    pub speaker_a: usize,
    pub speaker_b: usize,
    pub score: i64,
}

impl RawAnswer {
    pub fn pair(&self) -> (usize, usize) {
        if self.speaker_a < self.speaker_b {
            (self.speaker_a, self.speaker_b)
        } else {
            (self.speaker_b, self.speaker_a)
        }
    }
}

/// Counts per integer score with the running cumulative ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreHistogram {
    pub bin_counts: BTreeMap<i64, usize>,
    pub cumulative_ratio: BTreeMap<i64, f64>,
}

impl ScoreHistogram {
    fn from_scores(scores: impl Iterator<Item = i64>) -> Self {
        let mut bin_counts = BTreeMap::new();
        for s in scores {
            *bin_counts.entry(s).or_insert(0usize) += 1;
        }
        let total = bin_counts.values().sum::<usize>() as f64;
        let mut running = 0usize;
        let cumulative_ratio = bin_counts
            .iter()
            .map(|(&k, &c)| {
                running += c;
                (k, running as f64 / total)
            })
            .collect();
        Self {
            bin_counts,
            cumulative_ratio,
        }
    }

    pub fn total(&self) -> usize {
        self.bin_counts.values().sum()
    }

    /// Fraction of answers with score `<= k`, for any `k`.
    pub fn cumulative_at(&self, k: i64) -> f64 {
        let below: usize = self.bin_counts.range(..=k).map(|(_, c)| c).sum();
        below as f64 / self.total() as f64
    }

    /// Fraction of answers strictly below zero.
    pub fn negative_fraction(&self) -> f64 {
        self.cumulative_at(-1)
    }

    /// Most frequent score; ties go to the lowest score.
    pub fn mode(&self) -> Option<i64> {
        self.bin_counts
            .iter()
            .fold(None, |best: Option<(i64, usize)>, (&k, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((k, c)),
            })
            .map(|(k, _)| k)
    }
}

fn validate_answer(a: &RawAnswer, n_speakers: usize, score_bound: f64) -> Result<()> {
    for s in [a.speaker_a, a.speaker_b] {
        if s >= n_speakers {
            return Err(Error::Range {
                index: s,
                size: n_speakers,
            });
        }
    }
    if a.speaker_a == a.speaker_b {
        return Err(Error::Input(format!(
            "listener {} scored speaker {} against itself",
            a.listener_id, a.speaker_a
        )));
    }
    if (a.score as f64).abs() > score_bound {
        return Err(Error::Input(format!(
            "score {} from listener {} outside [-{score_bound}, {score_bound}]",
            a.score, a.listener_id
        )));
    }
    Ok(())
}

/// Averages answers per unordered pair into a raw (unnormalized) matrix
/// with `+score_bound` on the diagonal.
pub fn aggregate(
    answers: &[RawAnswer],
    n_speakers: usize,
    score_bound: f64,
    min_answers: usize,
) -> Result<SimilarityMatrix> {
    if answers.is_empty() {
        return Err(Error::Input("no answers to aggregate".into()));
    }
    let required = min_answers.max(1);
    // Integer sums keep the result independent of answer order.
    let mut sums = Array2::<i64>::zeros((n_speakers, n_speakers));
    let mut counts = Array2::<usize>::zeros((n_speakers, n_speakers));
    for a in answers {
        validate_answer(a, n_speakers, score_bound)?;
        let (i, j) = a.pair();
        sums[[i, j]] += a.score;
        counts[[i, j]] += 1;
    }
    let mut scores = Array2::<f64>::zeros((n_speakers, n_speakers));
    for i in 0..n_speakers {
        scores[[i, i]] = score_bound;
        for j in i + 1..n_speakers {
            let found = counts[[i, j]];
            if found < required {
                return Err(Error::Coverage {
                    a: i,
                    b: j,
                    found,
                    required,
                });
            }
            let mean = sums[[i, j]] as f64 / found as f64;
            scores[[i, j]] = mean;
            scores[[j, i]] = mean;
        }
    }
    SimilarityMatrix::new(scores, score_bound, false)
}

pub fn global_histogram(answers: &[RawAnswer]) -> Result<ScoreHistogram> {
    if answers.is_empty() {
        return Err(Error::Input("no answers for histogram".into()));
    }
    Ok(ScoreHistogram::from_scores(answers.iter().map(|a| a.score)))
}

pub fn pair_histogram(answers: &[RawAnswer], i: usize, j: usize) -> Result<ScoreHistogram> {
    let key = if i < j { (i, j) } else { (j, i) };
    let mut scores = answers
        .iter()
        .filter(|a| a.pair() == key)
        .map(|a| a.score)
        .peekable();
    if scores.peek().is_none() {
        return Err(Error::Coverage {
            a: key.0,
            b: key.1,
            found: 0,
            required: 1,
        });
    }
    Ok(ScoreHistogram::from_scores(scores))
}

/// Answers CSV with header `listener_id,speaker_a,speaker_b,score`.
pub fn answers_csv(answers: &[RawAnswer]) -> String {
    let mut out = String::from("listener_id,speaker_a,speaker_b,score\n");
    for a in answers {
        out.push_str(&format!(
            "{},{},{},{}\n",
            a.listener_id, a.speaker_a, a.speaker_b, a.score
        ));
    }
    out
}

pub fn read_answers_csv(path: &Path) -> Result<Vec<RawAnswer>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["listener_id", "speaker_a", "speaker_b", "score"] {
        return Err(Error::parse(
            path,
            "expected header listener_id,speaker_a,speaker_b,score",
        ));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(line, r)| r.map_err(|e| Error::parse(path, format!("answer {}: {e}", line + 1))))
        .collect()
}

/// Sidecar metadata stored next to a matrix CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSidecar {
    pub n_speakers: usize,
    pub score_bound: f64,
    pub normalized: bool,
    pub labels: Vec<String>,
    pub closed_count: usize,
}

pub fn sidecar_path(matrix_path: &Path) -> std::path::PathBuf {
    matrix_path.with_extension("json")
}

pub fn matrix_csv(m: &SimilarityMatrix) -> String {
    let mut out = String::new();
    for row in m.scores().rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes the matrix CSV and its JSON sidecar (same stem, `.json`).
pub fn write_matrix(
    path: &Path,
    m: &SimilarityMatrix,
    labels: &[String],
    closed_count: usize,
) -> Result<()> {
    if labels.len() != m.len() {
        return Err(Error::Shape(format!(
            "{} labels for a {}-speaker matrix",
            labels.len(),
            m.len()
        )));
    }
    let sidecar = MatrixSidecar {
        n_speakers: m.len(),
        score_bound: m.score_bound(),
        normalized: m.is_normalized(),
        labels: labels.to_vec(),
        closed_count,
    };
    write_atomic(path, matrix_csv(m).as_bytes())?;
    write_json(&sidecar_path(path), &sidecar)
}

pub fn read_matrix(path: &Path) -> Result<(SimilarityMatrix, MatrixSidecar)> {
    let sidecar: MatrixSidecar = read_json(&sidecar_path(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let n = sidecar.n_speakers;
    let mut values = Vec::with_capacity(n * n);
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        if record.len() != n {
            return Err(Error::parse(
                path,
                format!(
                    "row {} has {} columns, expected {n}",
                    line + 1,
                    record.len()
                ),
            ));
        }
        for field in &record {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("row {}: {e}", line + 1)))?,
            );
        }
    }
    let scores = Array2::from_shape_vec((values.len() / n.max(1), n), values)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    if scores.nrows() != n {
        return Err(Error::parse(
            path,
            format!("{} rows, expected {n}", scores.nrows()),
        ));
    }
    let m = SimilarityMatrix::new(scores, sidecar.score_bound, sidecar.normalized)?;
    Ok((m, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(a: usize, b: usize, score: i64) -> RawAnswer {
        RawAnswer {
            listener_id: format!("L{a}{b}{score}"),
            speaker_a: a,
            speaker_b: b,
            score,
        }
    }

    #[test]
    fn aggregate_takes_pair_means() {
        let answers = vec![ans(0, 1, -3), ans(1, 0, -3), ans(0, 1, 1)];
        let m = aggregate(&answers, 2, 3.0, 3).unwrap();
        assert_eq!(m.get(0, 1), -5.0 / 3.0);
        assert_eq!(m.get(1, 0), -5.0 / 3.0);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 1), 3.0);
        assert!(!m.is_normalized());
    }

    #[test]
    fn aggregate_reports_uncovered_pair() {
        let answers = vec![ans(0, 1, 2), ans(1, 2, 0)];
        match aggregate(&answers, 3, 3.0, 1) {
            Err(Error::Coverage {
                a: 0,
                b: 2,
                found: 0,
                ..
            }) => {}
            other => panic!("expected coverage error, got {other:?}"),
        }
        assert!(matches!(aggregate(&[], 3, 3.0, 1), Err(Error::Input(_))));
    }

    #[test]
    fn aggregate_rejects_bad_answers() {
        assert!(matches!(
            aggregate(&[ans(0, 3, 1)], 3, 3.0, 1),
            Err(Error::Range { .. })
        ));
        assert!(aggregate(&[ans(1, 1, 1)], 3, 3.0, 1).is_err());
        assert!(aggregate(&[ans(0, 1, 4)], 2, 3.0, 1).is_err());
    }

    #[test]
    fn global_histogram_counts() {
        let answers: Vec<_> = [-3, -3, 0, 2].iter().map(|&s| ans(0, 1, s)).collect();
        let h = global_histogram(&answers).unwrap();
        assert_eq!(h.bin_counts, BTreeMap::from([(-3, 2), (0, 1), (2, 1)]));
        assert_eq!(h.cumulative_ratio[&-3], 0.5);
        assert_eq!(h.cumulative_ratio[&2], 1.0);
        assert_eq!(h.negative_fraction(), 0.5);

        let uniform: Vec<_> = (-3..=3).map(|s| ans(0, 1, s)).collect();
        let h = global_histogram(&uniform).unwrap();
        assert_eq!(h.cumulative_ratio[&-1], 3.0 / 7.0);
        assert_eq!(h.cumulative_ratio[&3], 1.0);

        let same: Vec<_> = (0..5).map(|_| ans(0, 1, 1)).collect();
        let h = global_histogram(&same).unwrap();
        assert_eq!(h.bin_counts.len(), 1);
        assert_eq!(h.cumulative_ratio[&1], 1.0);
        assert!(global_histogram(&[]).is_err());
    }

    #[test]
    fn pair_histogram_restricts_to_pair() {
        let answers = vec![ans(0, 1, 2), ans(1, 0, 3), ans(0, 1, 3), ans(0, 2, -3)];
        let h = pair_histogram(&answers, 1, 0).unwrap();
        assert_eq!(h.bin_counts, BTreeMap::from([(2, 1), (3, 2)]));
        let single = pair_histogram(&answers, 0, 2).unwrap();
        assert_eq!(single.cumulative_ratio[&-3], 1.0);
        assert!(matches!(
            pair_histogram(&answers, 1, 2),
            Err(Error::Coverage { .. })
        ));

        let dissimilar: Vec<_> = [-3, -3, -3, -2, -1].iter().map(|&s| ans(3, 4, s)).collect();
        assert_eq!(pair_histogram(&dissimilar, 3, 4).unwrap().mode(), Some(-3));
    }

    #[test]
    fn answers_csv_rejects_fractional_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, "listener_id,speaker_a,speaker_b,score\nL1,0,1,0.5\n").unwrap();
        assert!(matches!(read_answers_csv(&path), Err(Error::Parse { .. })));

        let answers = vec![ans(0, 1, -2), ans(2, 1, 3)];
        std::fs::write(&path, answers_csv(&answers)).unwrap();
        assert_eq!(read_answers_csv(&path).unwrap(), answers);
    }

    #[test]
    fn matrix_round_trips_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let answers = vec![ans(0, 1, -3), ans(0, 1, 1), ans(0, 2, 2), ans(1, 2, 0)];
        let m = aggregate(&answers, 3, 3.0, 1).unwrap().normalize().unwrap();
        let labels = vec!["F001".to_string(), "F002".into(), "F003".into()];
        write_matrix(&path, &m, &labels, 2).unwrap();
        let (back, sidecar) = read_matrix(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(sidecar.closed_count, 2);
        assert_eq!(sidecar.labels, labels);
        assert!(sidecar.normalized);
    }
}

//! Domain types shared by every other module.
//!
//! Everything here is immutable after construction. Indexing is always by
//! integer speaker index; labels only travel along for reporting.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Openness {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeakerId {
    pub index: usize,
    pub label: String,
    pub openness: Openness,
}

impl SpeakerId {
    pub fn is_closed(&self) -> bool {
        self.openness == Openness::Closed
    }
}

/// Ordered list of speakers. Closed speakers always occupy the leading
/// indices `0..closed_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roster {
    speakers: Vec<SpeakerId>,
    closed_count: usize,
}

impl Roster {
    pub fn new(speakers: Vec<SpeakerId>) -> Result<Self> {
        let closed_count = speakers.iter().filter(|s| s.is_closed()).count();
        for (pos, s) in speakers.iter().enumerate() {
            if s.index != pos {
                return Err(Error::Input(format!(
                    "speaker indices must be contiguous: position {pos} holds index {}",
                    s.index
                )));
            }
            if s.is_closed() && s.index >= closed_count {
                return Err(Error::Input(format!(
                    "closed speaker {} ({}) must precede every open speaker",
                    s.index, s.label
                )));
            }
        }
        Ok(Self {
            speakers,
            closed_count,
        })
    }

    /// Roster with generated labels `F001`, `F002`, ...
    pub fn with_default_labels(n_speakers: usize, closed_count: usize) -> Result<Self> {
        if closed_count > n_speakers {
            return Err(Error::Config(format!(
                "closed count {closed_count} exceeds speaker count {n_speakers}"
            )));
        }
        let speakers = (0..n_speakers)
            .map(|index| SpeakerId {
                index,
                label: default_label(index),
                openness: if index < closed_count {
                    Openness::Closed
                } else {
                    Openness::Open
                },
            })
            .collect();
        Self::new(speakers)
    }

    pub fn speakers(&self) -> &[SpeakerId] {
        &self.speakers
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn closed_count(&self) -> usize {
        self.closed_count
    }

    pub fn is_closed(&self, index: usize) -> bool {
        index < self.closed_count
    }

    pub fn labels(&self) -> Vec<String> {
        self.speakers.iter().map(|s| s.label.clone()).collect()
    }
}

pub fn default_label(index: usize) -> String {
    format!("F{:03}", index + 1)
}

/// Symmetric matrix of listener-averaged pairwise similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Array2<f64>,
    score_bound: f64,
    diagonal_value: f64,
    normalized: bool,
}

impl SimilarityMatrix {
    /// Validates symmetry, the entry bound and the diagonal.
    ///
    /// The diagonal must equal `score_bound` for a raw matrix and 1 for a
    /// normalized one. `score_bound` is kept as the raw scale `v` in both
    /// cases.
    pub fn new(scores: Array2<f64>, score_bound: f64, normalized: bool) -> Result<Self> {
        if !(score_bound > 0.0 && score_bound.is_finite()) {
            return Err(Error::Input(format!(
                "score bound must be positive, got {score_bound}"
            )));
        }
        let (rows, cols) = scores.dim();
        if rows != cols {
            return Err(Error::Shape(format!(
                "similarity matrix must be square, got {rows}x{cols}"
            )));
        }
        let diagonal_value = if normalized { 1.0 } else { score_bound };
        let limit = diagonal_value;
        for i in 0..rows {
            if scores[[i, i]] != diagonal_value {
                return Err(Error::Input(format!(
                    "diagonal entry ({i}, {i}) is {} but must be {diagonal_value}",
                    scores[[i, i]]
                )));
            }
            for j in 0..i {
                let v = scores[[i, j]];
                if !v.is_finite() || v.abs() > limit {
                    return Err(Error::Input(format!(
                        "entry ({i}, {j}) = {v} outside [-{limit}, {limit}]"
                    )));
                }
                if v != scores[[j, i]] {
                    return Err(Error::Input(format!(
                        "matrix not symmetric at ({i}, {j}): {v} vs {}",
                        scores[[j, i]]
                    )));
                }
            }
        }
        Ok(Self {
            scores,
            score_bound,
            diagonal_value,
            normalized,
        })
    }

    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[[i, j]]
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.scores.row(i)
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score_bound(&self) -> f64 {
        self.score_bound
    }

    pub fn diagonal_value(&self) -> f64 {
        self.diagonal_value
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides every entry by the score bound, mapping scores into [-1, 1].
    pub fn normalize(&self) -> Result<Self> {
        if self.normalized {
            return Err(Error::State(
                "similarity matrix is already normalized".into(),
            ));
        }
        let bound = self.score_bound;
        let scores = self.scores.mapv(|v| v / bound);
        Ok(Self {
            scores,
            score_bound: bound,
            diagonal_value: 1.0,
            normalized: true,
        })
    }

    /// Normalized copy, or a clone when the matrix is already normalized.
    pub fn to_normalized(&self) -> Self {
        if self.normalized {
            self.clone()
        } else {
            self.normalize().expect("unnormalized matrix")
        }
    }

    /// Leading `n x n` block, i.e. the closed-speaker sub-matrix.
    pub fn leading_block(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::Range {
                index: n,
                size: self.len(),
            });
        }
        Ok(Self {
            scores: self.scores.slice(ndarray::s![..n, ..n]).to_owned(),
            ..*self
        })
    }
}

/// One-hot speaker identity over `dim` closed speakers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeakerCode {
    dim: usize,
    hot_index: usize,
}

impl SpeakerCode {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hot_index(&self) -> usize {
        self.hot_index
    }

    pub fn to_vector(&self) -> Array1<f64> {
        let mut v = Array1::zeros(self.dim);
        v[self.hot_index] = 1.0;
        v
    }
}

pub fn make_speaker_code(index: usize, n_s: usize) -> Result<SpeakerCode> {
    if index >= n_s {
        return Err(Error::Range { index, size: n_s });
    }
    Ok(SpeakerCode {
        dim: n_s,
        hot_index: index,
    })
}

/// Acoustic feature frames of one speaker, `T x F`, with voiced flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub speaker: SpeakerId,
    frames: Array2<f64>,
    voiced: Vec<bool>,
}

impl FrameSet {
    pub fn new(speaker: SpeakerId, frames: Array2<f64>, voiced: Vec<bool>) -> Result<Self> {
        if frames.nrows() != voiced.len() {
            return Err(Error::Shape(format!(
                "speaker {}: {} frames but {} voiced flags",
                speaker.label,
                frames.nrows(),
                voiced.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "speaker {}: non-finite feature value",
                speaker.label
            )));
        }
        Ok(Self {
            speaker,
            frames,
            voiced,
        })
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn voiced_indices(&self) -> Vec<usize> {
        self.voiced
            .iter()
            .enumerate()
            .filter_map(|(t, &v)| v.then_some(t))
            .collect()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }
}

/// Per-speaker d-vectors keyed by speaker index.
#[derive(Debug, Clone, PartialEq)]
pub struct DVectorSet {
    vectors: BTreeMap<usize, Array1<f64>>,
    dim: usize,
}

impl DVectorSet {
    pub fn new(dim: usize) -> Self {
        Self {
            vectors: BTreeMap::new(),
            dim,
        }
    }

    pub fn insert(&mut self, speaker: usize, vector: Array1<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "d-vector for speaker {speaker} has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "d-vector for speaker {speaker} is not finite"
            )));
        }
        self.vectors.insert(speaker, vector);
        Ok(())
    }

    /// Builds a set from the rows of `matrix`, speaker `i` taking row `i`.
    pub fn from_rows(matrix: ArrayView2<'_, f64>) -> Result<Self> {
        let mut set = Self::new(matrix.ncols());
        for (i, row) in matrix.rows().into_iter().enumerate() {
            set.insert(i, row.to_owned())?;
        }
        Ok(set)
    }

    pub fn get(&self, speaker: usize) -> Option<&Array1<f64>> {
        self.vectors.get(&speaker)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array1<f64>)> {
        self.vectors.iter().map(|(&k, v)| (k, v))
    }

    /// Stacks speakers `0..n` as rows of an `n x N_d` matrix.
    pub fn to_matrix(&self, n: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((n, self.dim));
        for i in 0..n {
            let v = self.get(i).ok_or(Error::MissingSpeaker(i))?;
            out.row_mut(i).assign(v);
        }
        Ok(out)
    }
}

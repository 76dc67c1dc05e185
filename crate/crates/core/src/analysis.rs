//! Evaluation of learned embeddings against subjective similarity, and
//! the similarity graph (adjacency, degrees, MDS layout).

use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{build_mask, Kernel};
use crate::simcore::{DVectorSet, Roster, SimilarityMatrix};

/// Jacobi stops once the off-diagonal Frobenius norm falls below this
/// (relative to the matrix norm, floored at 1).
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Sample Pearson correlation coefficient.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Degenerate(format!(
            "correlation needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate(
            "zero variance in correlation input".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetKind {
    All,
    ClosedClosed,
    /// Pairs with exactly one open member.
    ClosedOpen,
    OpenOpen,
}

impl SubsetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SubsetKind::All => "all",
            SubsetKind::ClosedClosed => "closed_closed",
            SubsetKind::ClosedOpen => "closed_open",
            SubsetKind::OpenOpen => "open_open",
        }
    }

    /// The kind of a specific pair (never `All`).
    pub fn of_pair(roster: &Roster, i: usize, j: usize) -> Self {
        match (roster.is_closed(i), roster.is_closed(j)) {
            (true, true) => SubsetKind::ClosedClosed,
            (false, false) => SubsetKind::OpenOpen,
            _ => SubsetKind::ClosedOpen,
        }
    }
}

/// Selection of off-diagonal speaker pairs for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSubset {
    pub kind: SubsetKind,
    /// Keep only pairs with `s_ij > 0`.
    pub positive_only: bool,
}

impl PairSubset {
    pub fn new(kind: SubsetKind, positive_only: bool) -> Self {
        Self {
            kind,
            positive_only,
        }
    }

    pub fn contains(&self, roster: &Roster, sim: &SimilarityMatrix, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let kind_ok =
            self.kind == SubsetKind::All || SubsetKind::of_pair(roster, i, j) == self.kind;
        kind_ok && (!self.positive_only || sim.get(i, j) > 0.0)
    }
}

impl fmt::Display for PairSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        if self.positive_only {
            f.write_str("_positive")?;
        }
        Ok(())
    }
}

/// One evaluated pair: similarity score and kernel value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub i: usize,
    pub j: usize,
    pub similarity: f64,
    pub kernel: f64,
}

/// Pairs `i < j` in `subset` with their similarity and kernel values.
pub fn subset_pairs(
    dvecs: &DVectorSet,
    sim: &SimilarityMatrix,
    kernel: Kernel,
    subset: PairSubset,
    roster: &Roster,
) -> Result<Vec<ScoredPair>> {
    if sim.len() != roster.len() {
        return Err(Error::Shape(format!(
            "similarity matrix has {} speakers, roster has {}",
            sim.len(),
            roster.len()
        )));
    }
    let mut out = Vec::new();
    for i in 0..sim.len() {
        for j in i + 1..sim.len() {
            if !subset.contains(roster, sim, i, j) {
                continue;
            }
            let di = dvecs.get(i).ok_or(Error::MissingSpeaker(i))?;
            let dj = dvecs.get(j).ok_or(Error::MissingSpeaker(j))?;
            out.push(ScoredPair {
                i,
                j,
                similarity: sim.get(i, j),
                kernel: kernel.eval(di.view(), dj.view()),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    pub pair_count: usize,
}

/// Pearson correlation between `s_ij` and `k(d_i, d_j)` over a pair subset.
pub fn embedding_correlation(
    dvecs: &DVectorSet,
    sim: &SimilarityMatrix,
    kernel: Kernel,
    subset: PairSubset,
    roster: &Roster,
) -> Result<Correlation> {
    if !sim.is_normalized() {
        return Err(Error::State(
            "correlation needs a normalized similarity matrix".into(),
        ));
    }
    let pairs = subset_pairs(dvecs, sim, kernel, subset, roster)?;
    if pairs.is_empty() {
        return Err(Error::Degenerate(format!("subset {subset} is empty")));
    }
    let xy: Vec<(f64, f64)> = pairs.iter().map(|p| (p.similarity, p.kernel)).collect();
    Ok(Correlation {
        r: pearson(&xy)?,
        pair_count: pairs.len(),
    })
}

/// Similarity graph: edges where `s_ij > 0`, no self loops.
pub fn adjacency_and_degrees(sim: &SimilarityMatrix) -> (Array2<u8>, Vec<usize>) {
    let mask = build_mask(sim);
    let n = sim.len();
    let adjacency = Array2::from_shape_fn((n, n), |(i, j)| u8::from(i != j && mask.get(i, j)));
    let degrees = adjacency
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as usize).sum())
        .collect();
    (adjacency, degrees)
}

/// Edge list `(i, j)` with `i < j`.
pub fn edges(adjacency: &Array2<u8>) -> Vec<(usize, usize)> {
    let n = adjacency.nrows();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| adjacency[[i, j]] != 0)
        .collect()
}

/// Eigenvalues (descending) and matching eigenvectors (as columns) of a
/// symmetric matrix, by cyclic Jacobi rotations.
pub fn symmetric_eigen(matrix: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::Shape(
            "eigendecomposition needs a square matrix".into(),
        ));
    }
    let mut a = matrix.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let off_norm = |a: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[[i, j]] * a[[i, j]];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off_norm(&a) > JACOBI_TOLERANCE * scale {
        if sweeps == JACOBI_MAX_SWEEPS {
            log::warn!("Jacobi eigensolver hit the {JACOBI_MAX_SWEEPS}-sweep cap");
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[[y, y]].total_cmp(&a[[x, x]]));
    let values = Array1::from_iter(order.iter().map(|&k| a[[k, k]]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        vectors.column_mut(col).assign(&v.column(k));
    }
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayout {
    /// `N x dims`
    pub coordinates: Array2<f64>,
    pub eigenvalues_used: Vec<f64>,
    /// Fewer than `dims` positive eigenvalues; missing axes are zero.
    pub rank_deficient: bool,
}

impl GraphLayout {
    pub fn distances(&self) -> Array2<f64> {
        euclidean_distances(&self.coordinates)
    }
}

pub fn euclidean_distances(points: &Array2<f64>) -> Array2<f64> {
    let n = points.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let d = &points.row(i) - &points.row(j);
        d.dot(&d).sqrt()
    })
}

/// Classical (Torgerson) MDS of the dissimilarity `1 - s_ij`.
pub fn mds_layout(sim: &SimilarityMatrix, dims: usize) -> Result<GraphLayout> {
    let n = sim.len();
    if dims == 0 {
        return Err(Error::Config("layout needs at least one dimension".into()));
    }
    // B = -1/2 J D2 J with D2 the squared dissimilarities.
    let d2 = sim.scores().mapv(|s| (1.0 - s) * (1.0 - s));
    let row_means = d2.mean_axis(ndarray::Axis(1)).expect("nonempty");
    let grand = row_means.mean().unwrap_or(0.0);
    let b = Array2::from_shape_fn((n, n), |(i, j)| {
        -0.5 * (d2[[i, j]] - row_means[i] - row_means[j] + grand)
    });
    let (values, vectors) = symmetric_eigen(&b)?;
    let floor = 1e-10 * values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut coordinates = Array2::<f64>::zeros((n, dims));
    let mut eigenvalues_used = Vec::with_capacity(dims);
    let mut rank_deficient = false;
    for k in 0..dims {
        let lambda = values.get(k).copied().unwrap_or(0.0);
        if lambda > floor {
            coordinates
                .column_mut(k)
                .assign(&(&vectors.column(k) * lambda.sqrt()));
            eigenvalues_used.push(lambda);
        } else {
            rank_deficient = true;
            eigenvalues_used.push(0.0);
        }
    }
    if rank_deficient {
        log::warn!("similarity matrix has fewer than {dims} positive MDS eigenvalues");
    }
    if n > 0 {
        let centroid = coordinates.mean_axis(ndarray::Axis(0)).expect("nonempty");
        coordinates -= &centroid;
    }
    Ok(GraphLayout {
        coordinates,
        eigenvalues_used,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pearson_on_lines() {
        let up: Vec<_> = (0..5).map(|x| (x as f64, 2.0 * x as f64 + 1.0)).collect();
        assert!((pearson(&up).unwrap() - 1.0).abs() < 1e-12);
        let down: Vec<_> = (0..5).map(|x| (x as f64, -0.5 * x as f64)).collect();
        assert!((pearson(&down).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]).unwrap(), 0.0);
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        assert!(matches!(pearson(&[(1.0, 2.0)]), Err(Error::Degenerate(_))));
        assert!(matches!(
            pearson(&[(1.0, 2.0), (1.0, 3.0)]),
            Err(Error::Degenerate(_))
        ));
    }

    fn normalized(scores: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix::new(scores, 3.0, true).unwrap()
    }

    #[test]
    fn degrees_count_positive_pairs() {
        let sim = normalized(array![[1.0, 0.5, -0.1], [0.5, 1.0, 0.0], [-0.1, 0.0, 1.0]]);
        let (adj, deg) = adjacency_and_degrees(&sim);
        assert_eq!(deg, vec![1, 1, 0]);
        assert_eq!(edges(&adj), vec![(0, 1)]);
        assert!((0..3).all(|i| adj[[i, i]] == 0));

        let none = normalized(array![[1.0, -0.5], [-0.5, 1.0]]);
        assert_eq!(adjacency_and_degrees(&none).1, vec![0, 0]);
    }

    #[test]
    fn identical_speakers_share_a_point() {
        let sim = normalized(array![
            [1.0, 1.0, -0.5],
            [1.0, 1.0, -0.5],
            [-0.5, -0.5, 1.0]
        ]);
        let layout = mds_layout(&sim, 2).unwrap();
        assert!(layout.distances()[[0, 1]] < 1e-9);
        assert!(layout.rank_deficient);
    }

    #[test]
    fn equilateral_triangle_is_recovered() {
        let side = 0.8;
        let s = 1.0 - side;
        let sim = normalized(array![[1.0, s, s], [s, 1.0, s], [s, s, 1.0]]);
        let layout = mds_layout(&sim, 2).unwrap();
        let d = layout.distances();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!((d[[i, j]] - side).abs() < 1e-6);
        }
        let centroid = layout.coordinates.mean_axis(ndarray::Axis(0)).unwrap();
        assert!(centroid.iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = array![[4.0, 1.0, 2.0], [1.0, 3.0, 0.5], [2.0, 0.5, 1.0]];
        let (values, vectors) = symmetric_eigen(&m).unwrap();
        assert!(values[0] >= values[1] && values[1] >= values[2]);
        let recon = vectors.dot(&Array2::from_diag(&values)).dot(&vectors.t());
        for (a, b) in recon.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((values.sum() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn subset_names() {
        assert_eq!(
            PairSubset::new(SubsetKind::ClosedOpen, true).to_string(),
            "closed_open_positive"
        );
        assert_eq!(PairSubset::new(SubsetKind::All, false).to_string(), "all");
    }

    #[test]
    fn positive_only_with_no_positive_pairs_is_degenerate() {
        let sim = normalized(array![
            [1.0, -0.5, -0.2],
            [-0.5, 1.0, 0.0],
            [-0.2, 0.0, 1.0]
        ]);
        let roster = Roster::with_default_labels(3, 3).unwrap();
        let d = DVectorSet::from_rows(array![[1.0], [0.5], [0.1]].view()).unwrap();
        let subset = PairSubset::new(SubsetKind::All, true);
        assert!(matches!(
            embedding_correlation(&d, &sim, Kernel::Sigmoid, subset, &roster),
            Err(Error::Degenerate(_))
        ));
    }
}

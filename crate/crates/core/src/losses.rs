//! Training objectives and the Gram-matrix machinery behind them.
//!
//! Each loss returns its value together with the gradient with respect to
//! its direct inputs (logits, predicted similarity vectors or d-vectors).
//! Composition with the network happens in the trainer.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simcore::{DVectorSet, SimilarityMatrix, SpeakerCode};

/// Floor applied to the probability at the hot index before taking its log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

/// The four training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTag {
    /// Speaker identification with softmax cross-entropy.
    DvecSce,
    /// Regression of the speaker's similarity vector.
    PropVec,
    /// Frobenius distance between the d-vector Gram matrix and the
    /// similarity matrix.
    PropMat,
    /// As `PropMat`, restricted to perceptually similar pairs.
    PropMatRe,
}

impl LossTag {
    pub const ALL: [LossTag; 4] = [
        LossTag::DvecSce,
        LossTag::PropVec,
        LossTag::PropMat,
        LossTag::PropMatRe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTag::DvecSce => "dvec_sce",
            LossTag::PropVec => "prop_vec",
            LossTag::PropMat => "prop_mat",
            LossTag::PropMatRe => "prop_mat_re",
        }
    }

    pub fn is_matrix_loss(self) -> bool {
        matches!(self, LossTag::PropMat | LossTag::PropMatRe)
    }
}

impl fmt::Display for LossTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

/// Kernel between two d-vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `tanh(a . b)`, bounded in (-1, 1).
    #[default]
    Sigmoid,
    /// `a . b`
    InnerProduct,
}

impl Kernel {
    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Sigmoid => "sigmoid",
            Kernel::InnerProduct => "inner_product",
        }
    }

    pub fn eval(self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        self.of_dot(a.dot(&b))
    }

    pub fn of_dot(self, dot: f64) -> f64 {
        match self {
            Kernel::Sigmoid => dot.tanh(),
            Kernel::InnerProduct => dot,
        }
    }

    /// Derivative with respect to the dot product, given the kernel value.
    fn slope(self, value: f64) -> f64 {
        match self {
            Kernel::Sigmoid => 1.0 - value * value,
            Kernel::InnerProduct => 1.0,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Kernel::Sigmoid),
            "inner_product" => Ok(Kernel::InnerProduct),
            _ => Err(Error::Config(format!("unknown kernel {s:?}"))),
        }
    }
}

/// Binary mask selecting pairs with positive similarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    entries: Array2<bool>,
}

impl MaskMatrix {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[[i, j]]
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> ArrayView2<'_, bool> {
        self.entries.view()
    }

    /// `||W - I||_F^2`: the number of off-diagonal ones.
    pub fn off_diagonal_count(&self) -> usize {
        let n = self.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.entries[[i, j]])
            .count()
    }
}

/// `w_ij = 1` iff `s_ij > 0`. The diagonal is always one.
pub fn build_mask(sim: &SimilarityMatrix) -> MaskMatrix {
    let n = sim.len();
    MaskMatrix {
        entries: Array2::from_shape_fn((n, n), |(i, j)| i == j || sim.get(i, j) > 0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceOutput {
    pub loss: f64,
    /// Gradient with respect to the pre-softmax logits, `c_hat - c`.
    pub logit_gradient: Array1<f64>,
    /// Set when the hot-index probability hit [`PROBABILITY_FLOOR`].
    pub clamped: bool,
}

/// Softmax cross-entropy `-sum c(n) log c_hat(n)` against a one-hot code.
pub fn sce_loss(target: &SpeakerCode, predicted: ArrayView1<'_, f64>) -> Result<SceOutput> {
    if predicted.len() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction has {} entries, speaker code has {}",
            predicted.len(),
            target.dim()
        )));
    }
    let total = predicted.sum();
    if total.is_nan() || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!(
            "predicted probabilities sum to {total}, not 1"
        )));
    }
    let p = predicted[target.hot_index()];
    let clamped = p < PROBABILITY_FLOOR;
    let loss = -p.max(PROBABILITY_FLOOR).ln();
    let mut logit_gradient = predicted.to_owned();
    logit_gradient[target.hot_index()] -= 1.0;
    Ok(SceOutput {
        loss,
        logit_gradient,
        clamped,
    })
}

/// `(1/N) |s_hat - s|^2` and its gradient `(2/N)(s_hat - s)`.
pub fn simvec_loss(
    target: ArrayView1<'_, f64>,
    predicted: ArrayView1<'_, f64>,
) -> Result<(f64, Array1<f64>)> {
    if target.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "target has {} entries, prediction has {}",
            target.len(),
            predicted.len()
        )));
    }
    if target.is_empty() {
        return Err(Error::Shape("empty similarity vector".into()));
    }
    let n = target.len() as f64;
    let residual = &predicted - &target;
    let loss = residual.dot(&residual) / n;
    Ok((loss, residual * (2.0 / n)))
}

/// Gram matrix `K[i][j] = k(d_i, d_j)` over speakers `0..n`.
pub fn gram(dvecs: &DVectorSet, n: usize, kernel: Kernel) -> Result<Array2<f64>> {
    let d = dvecs.to_matrix(n)?;
    Ok(gram_rows(d.view(), kernel))
}

fn gram_rows(d: ArrayView2<'_, f64>, kernel: Kernel) -> Array2<f64> {
    let mut k = d.dot(&d.t());
    k.mapv_inplace(|v| kernel.of_dot(v));
    k
}

/// Normalization coefficient `2 / (N^2 - N)` of the full matrix loss.
pub fn simmat_coefficient(n: usize) -> f64 {
    2.0 / (n * n - n) as f64
}

/// Loss value plus one gradient row per speaker (`N x N_d`).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLossOutput {
    pub loss: f64,
    pub gradients: Array2<f64>,
}

/// Shared path of both matrix losses: `coef * sum_{i != j} w_ij (k_ij - s_ij)^2`.
///
/// Diagonals of both the Gram and the similarity matrix drop out, which is
/// exactly the `K - K (.) I` and `S - s I` subtraction.
fn matrix_objective(
    d: ArrayView2<'_, f64>,
    sim: &SimilarityMatrix,
    mask: Option<&MaskMatrix>,
    kernel: Kernel,
) -> Result<MatrixLossOutput> {
    let n = sim.len();
    if d.nrows() != n {
        return Err(Error::Shape(format!(
            "{} d-vectors for a {n}-speaker similarity matrix",
            d.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::Shape(
            "matrix losses need at least 2 speakers".into(),
        ));
    }
    let weight = |i: usize, j: usize| match mask {
        Some(m) if !m.get(i, j) => 0.0,
        _ => 1.0,
    };
    let coef = match mask {
        Some(m) => {
            let count = m.off_diagonal_count();
            if count == 0 {
                return Err(Error::Degenerate(
                    "mask has no off-diagonal ones; relaxed loss is undefined".into(),
                ));
            }
            2.0 / count as f64
        }
        None => simmat_coefficient(n),
    };
    let k = gram_rows(d, kernel);
    let mut sum = 0.0;
    let mut gradients = Array2::<f64>::zeros(d.raw_dim());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = weight(i, j);
            let r = k[[i, j]] - sim.get(i, j);
            sum += w * r * r;
            // d/d(d_i) and d/d(d_j) of coef * w * r^2 through k(d_i . d_j).
            let g = 2.0 * coef * w * r * kernel.slope(k[[i, j]]);
            if g != 0.0 {
                gradients.row_mut(i).scaled_add(g, &d.row(j));
                gradients.row_mut(j).scaled_add(g, &d.row(i));
            }
        }
    }
    Ok(MatrixLossOutput {
        loss: coef * sum,
        gradients,
    })
}

fn require_normalized(sim: &SimilarityMatrix) -> Result<()> {
    if sim.is_normalized() {
        Ok(())
    } else {
        Err(Error::State(
            "matrix losses need a normalized similarity matrix".into(),
        ))
    }
}

/// Similarity-matrix loss over d-vectors given as rows.
pub fn simmat_loss_rows(
    d: ArrayView2<'_, f64>,
    sim: &SimilarityMatrix,
    kernel: Kernel,
) -> Result<MatrixLossOutput> {
    require_normalized(sim)?;
    matrix_objective(d, sim, None, kernel)
}

/// Relaxed (masked) similarity-matrix loss over d-vectors given as rows.
pub fn simmat_relaxed_loss_rows(
    d: ArrayView2<'_, f64>,
    sim: &SimilarityMatrix,
    mask: &MaskMatrix,
    kernel: Kernel,
) -> Result<MatrixLossOutput> {
    require_normalized(sim)?;
    if mask.len() != sim.len() {
        return Err(Error::Shape(
            "mask and similarity matrix sizes differ".into(),
        ));
    }
    if *mask != build_mask(sim) {
        return Err(Error::Input(
            "mask is inconsistent with the similarity matrix".into(),
        ));
    }
    matrix_objective(d, sim, Some(mask), kernel)
}

pub fn simmat_loss(
    dvecs: &DVectorSet,
    sim: &SimilarityMatrix,
    kernel: Kernel,
) -> Result<MatrixLossOutput> {
    require_normalized(sim)?;
    simmat_loss_rows(dvecs.to_matrix(sim.len())?.view(), sim, kernel)
}

pub fn simmat_relaxed_loss(
    dvecs: &DVectorSet,
    sim: &SimilarityMatrix,
    mask: &MaskMatrix,
    kernel: Kernel,
) -> Result<MatrixLossOutput> {
    require_normalized(sim)?;
    simmat_relaxed_loss_rows(dvecs.to_matrix(sim.len())?.view(), sim, mask, kernel)
}

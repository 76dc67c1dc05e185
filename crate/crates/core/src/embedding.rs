//! Training loops for the four objectives and d-vector extraction.
//!
//! Frame-level objectives (`dvec_sce`, `prop_vec`) iterate shuffled
//! mini-batches over every frame of the closed speakers. Matrix objectives
//! (`prop_mat`, `prop_mat_re`) need every closed speaker's d-vector in each
//! step, so each step draws `frames_per_speaker_per_step` voiced frames per
//! speaker, pools their bottlenecks into per-speaker means and
//! backpropagates the matrix loss through those means.
//!
//! The reported loss for an epoch is the objective evaluated on the full
//! training set after that epoch's updates: all frames for frame-level
//! objectives, d-vectors averaged over all voiced frames for matrix
//! objectives.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    build_mask, sce_loss, simmat_loss_rows, simmat_relaxed_loss_rows, simvec_loss, Kernel, LossTag,
    MaskMatrix,
};
use crate::network::{
    fit_standardizer, Activation, AdaGradState, Architecture, Gradients, Network,
};
use crate::simcore::{make_speaker_code, DVectorSet, FrameSet, SimilarityMatrix};

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_FRAMES_PER_SPEAKER: usize = 8;
pub const DEFAULT_BATCH_SIZE: usize = 256;

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_frames_per_speaker() -> usize {
    DEFAULT_FRAMES_PER_SPEAKER
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossTag,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Voiced frames drawn per speaker for each matrix-loss step.
    #[serde(default = "default_frames_per_speaker")]
    pub frames_per_speaker_per_step: usize,
    /// Mini-batch size for frame-level objectives.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Weight of an additional cross-entropy term on the softmax output of
    /// matrix-loss networks; 0 disables it.
    #[serde(default)]
    pub sce_weight: f64,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(loss: LossTag) -> Self {
        Self {
            loss,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            frames_per_speaker_per_step: DEFAULT_FRAMES_PER_SPEAKER,
            batch_size: DEFAULT_BATCH_SIZE,
            sce_weight: 0.0,
            kernel: Kernel::Sigmoid,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if self.frames_per_speaker_per_step == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "frames per speaker and batch size must be at least 1".into(),
            ));
        }
        if !(self.sce_weight >= 0.0 && self.sce_weight.is_finite()) {
            return Err(Error::Config("sce_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Output layer shape implied by an objective.
pub fn output_activation(loss: LossTag) -> Activation {
    match loss {
        LossTag::PropVec => Activation::Tanh,
        LossTag::DvecSce | LossTag::PropMat | LossTag::PropMatRe => Activation::Softmax,
    }
}

/// Mean bottleneck output over the voiced frames of one speaker.
pub fn extract_dvector(net: &Network, frames: &FrameSet) -> Result<Array1<f64>> {
    let voiced = frames.voiced_indices();
    if voiced.is_empty() {
        return Err(Error::Input(format!(
            "speaker {} has no voiced frames",
            frames.speaker.label
        )));
    }
    let rows = frames.frames().select(Axis(0), &voiced);
    let bottlenecks = net.bottlenecks(rows.view())?;
    let mut sum = Array1::<f64>::zeros(net.bottleneck_dim());
    for row in bottlenecks.rows() {
        sum += &row;
    }
    Ok(sum / voiced.len() as f64)
}

pub fn extract_all(net: &Network, roster: &[FrameSet]) -> Result<DVectorSet> {
    let mut set = DVectorSet::new(net.bottleneck_dim());
    for frames in roster {
        let d = extract_dvector(net, frames).map_err(|e| match e {
            Error::Input(msg) => Error::Input(msg),
            other => Error::Input(format!("speaker {}: {other}", frames.speaker.label)),
        })?;
        set.insert(frames.speaker.index, d)?;
    }
    Ok(set)
}

/// Targets of the frame-level objectives over `n_s` closed speakers.
#[derive(Debug, Clone, Copy)]
pub enum FrameTargets<'a> {
    /// One-hot speaker codes against a softmax output.
    SpeakerCodes { n_s: usize },
    /// Rows of the closed-speaker block of the normalized similarity matrix.
    SimilarityVectors(&'a SimilarityMatrix),
}

/// Mean frame-level loss over `frames` and its mean parameter gradient.
/// `speakers[r]` is the closed-speaker index of row `r`.
pub fn frame_objective(
    net: &Network,
    frames: ArrayView2<'_, f64>,
    speakers: &[usize],
    targets: FrameTargets<'_>,
) -> Result<(f64, Gradients)> {
    if frames.nrows() != speakers.len() || speakers.is_empty() {
        return Err(Error::Shape(format!(
            "{} frames with {} speaker labels",
            frames.nrows(),
            speakers.len()
        )));
    }
    let bn_dim = net.bottleneck_dim();
    let (loss_sum, mut grads) = net.accumulate(frames, |cache, start| {
        let out = cache.output();
        let rows = out.nrows();
        let mut out_grad = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        for r in 0..rows {
            let spk = speakers[start + r];
            match targets {
                FrameTargets::SpeakerCodes { n_s } => {
                    let code = make_speaker_code(spk, n_s)?;
                    let res = sce_loss(&code, out.row(r))?;
                    loss += res.loss;
                    out_grad.row_mut(r).assign(&res.logit_gradient);
                }
                FrameTargets::SimilarityVectors(sim) => {
                    let (l, g) = simvec_loss(sim.row(spk), out.row(r))?;
                    loss += l;
                    out_grad.row_mut(r).assign(&g);
                }
            }
        }
        Ok((loss, out_grad, Array2::zeros((rows, bn_dim))))
    })?;
    let n = speakers.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss_sum / n, grads))
}

/// Matrix objective for one step.
///
/// `frames` holds `per_speaker` consecutive rows for each closed speaker in
/// index order. Each speaker's d-vector is the mean of its rows'
/// bottlenecks, so a frame's bottleneck gradient is the d-vector gradient
/// divided by `per_speaker`. With `sce_weight > 0` the mean softmax
/// cross-entropy of the frames, times `sce_weight`, is added.
pub fn matrix_step_objective(
    net: &Network,
    frames: ArrayView2<'_, f64>,
    per_speaker: usize,
    sim: &SimilarityMatrix,
    mask: Option<&MaskMatrix>,
    kernel: Kernel,
    sce_weight: f64,
) -> Result<(f64, Gradients)> {
    let n_s = sim.len();
    if per_speaker == 0 || frames.nrows() != n_s * per_speaker {
        return Err(Error::Shape(format!(
            "{} frames do not form {n_s} speakers x {per_speaker} frames",
            frames.nrows()
        )));
    }
    let bottlenecks = net.bottlenecks(frames)?;
    let mut means = Array2::<f64>::zeros((n_s, net.bottleneck_dim()));
    for (r, row) in bottlenecks.rows().into_iter().enumerate() {
        let mut m = means.row_mut(r / per_speaker);
        m += &row;
    }
    means /= per_speaker as f64;
    let matrix = match mask {
        Some(mask) => simmat_relaxed_loss_rows(means.view(), sim, mask, kernel)?,
        None => simmat_loss_rows(means.view(), sim, kernel)?,
    };
    // Per-speaker gradient shared by each of that speaker's frames.
    let frame_grads = matrix.gradients / per_speaker as f64;
    let n_rows = frames.nrows() as f64;
    let with_sce = sce_weight > 0.0;
    if with_sce && net.output_activation() != Activation::Softmax {
        return Err(Error::State(
            "cross-entropy term needs a softmax output layer".into(),
        ));
    }
    let (sce_sum, grads) = net.accumulate(frames, |cache, start| {
        let out = cache.output();
        let rows = out.nrows();
        let mut out_grad = Array2::zeros(out.raw_dim());
        let mut loss = 0.0;
        if with_sce {
            for r in 0..rows {
                let code = make_speaker_code((start + r) / per_speaker, n_s)?;
                let res = sce_loss(&code, out.row(r))?;
                loss += res.loss;
                out_grad
                    .row_mut(r)
                    .assign(&(res.logit_gradient * (sce_weight / n_rows)));
            }
        }
        let mut bn_grad = Array2::zeros((rows, frame_grads.ncols()));
        for (r, mut g) in bn_grad.rows_mut().into_iter().enumerate() {
            g.assign(&frame_grads.row((start + r) / per_speaker));
        }
        Ok((loss, out_grad, bn_grad))
    })?;
    Ok((matrix.loss + sce_weight * sce_sum / n_rows, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub loss_trace: Vec<f64>,
}

/// Training data of the closed speakers, stacked.
struct TrainingSet {
    n_s: usize,
    frames: Array2<f64>,
    speakers: Vec<usize>,
    /// Voiced row indices into `frames`, per closed speaker.
    voiced: Vec<Vec<usize>>,
}

impl TrainingSet {
    fn new(roster: &[FrameSet]) -> Result<Self> {
        let closed: Vec<&FrameSet> = roster.iter().filter(|f| f.speaker.is_closed()).collect();
        let n_s = closed.len();
        if n_s == 0 {
            return Err(Error::Input("roster has no closed speakers".into()));
        }
        let feature_dim = closed[0].feature_dim();
        let mut views = Vec::with_capacity(n_s);
        let mut speakers = Vec::new();
        let mut voiced = Vec::with_capacity(n_s);
        for (pos, fs) in closed.iter().enumerate() {
            if fs.speaker.index != pos {
                return Err(Error::Input(format!(
                    "closed speakers must be indexed 0..{n_s}; found {} at position {pos}",
                    fs.speaker.index
                )));
            }
            if fs.feature_dim() != feature_dim {
                return Err(Error::Shape(format!(
                    "speaker {} has feature dimension {}, expected {feature_dim}",
                    fs.speaker.label,
                    fs.feature_dim()
                )));
            }
            let offset = speakers.len();
            voiced.push(
                fs.voiced_indices()
                    .into_iter()
                    .map(|t| t + offset)
                    .collect(),
            );
            speakers.extend(std::iter::repeat_n(pos, fs.len()));
            views.push(fs.frames());
        }
        let frames = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            n_s,
            frames,
            speakers,
            voiced,
        })
    }

    fn voiced_frames(&self) -> (Array2<f64>, Vec<usize>) {
        let rows: Vec<usize> = self.voiced.iter().flatten().copied().collect();
        let frames = self.frames.select(Axis(0), &rows);
        let speakers = rows.iter().map(|&r| self.speakers[r]).collect();
        (frames, speakers)
    }
}

/// Closed-speaker block of `sim`, checked against the objective.
fn closed_similarity(
    sim: &SimilarityMatrix,
    n_s: usize,
    loss: LossTag,
) -> Result<SimilarityMatrix> {
    if loss != LossTag::DvecSce && !sim.is_normalized() {
        return Err(Error::State(format!(
            "{loss} needs a normalized similarity matrix"
        )));
    }
    if sim.len() < n_s {
        return Err(Error::Shape(format!(
            "similarity matrix covers {} speakers but there are {n_s} closed speakers",
            sim.len()
        )));
    }
    sim.leading_block(n_s)
}

/// Full-data objective used for the per-epoch loss trace.
fn evaluate(
    net: &Network,
    data: &TrainingSet,
    sim: &SimilarityMatrix,
    mask: Option<&MaskMatrix>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let n_s = data.n_s;
    match cfg.loss {
        LossTag::DvecSce => Ok(frame_objective(
            net,
            data.frames.view(),
            &data.speakers,
            FrameTargets::SpeakerCodes { n_s },
        )?
        .0),
        LossTag::PropVec => Ok(frame_objective(
            net,
            data.frames.view(),
            &data.speakers,
            FrameTargets::SimilarityVectors(sim),
        )?
        .0),
        LossTag::PropMat | LossTag::PropMatRe => {
            let (frames, speakers) = data.voiced_frames();
            let bottlenecks = net.bottlenecks(frames.view())?;
            let mut means = Array2::<f64>::zeros((n_s, net.bottleneck_dim()));
            for (row, &spk) in bottlenecks.rows().into_iter().zip(&speakers) {
                let mut m = means.row_mut(spk);
                m += &row;
            }
            for (i, idx) in data.voiced.iter().enumerate() {
                let mut m = means.row_mut(i);
                m /= idx.len() as f64;
            }
            let matrix = match mask {
                Some(mask) => simmat_relaxed_loss_rows(means.view(), sim, mask, cfg.kernel)?,
                None => simmat_loss_rows(means.view(), sim, cfg.kernel)?,
            };
            let mut loss = matrix.loss;
            if cfg.sce_weight > 0.0 {
                let (sce, _) = frame_objective(
                    net,
                    frames.view(),
                    &speakers,
                    FrameTargets::SpeakerCodes { n_s },
                )?;
                loss += cfg.sce_weight * sce;
            }
            Ok(loss)
        }
    }
}

/// Trains a network on the closed speakers of `roster`.
pub fn train(
    roster: &[FrameSet],
    sim: &SimilarityMatrix,
    cfg: &TrainConfig,
    arch: &Architecture,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    let data = TrainingSet::new(roster)?;
    let n_s = data.n_s;
    let sim = closed_similarity(sim, n_s, cfg.loss)?;
    let mask = (cfg.loss == LossTag::PropMatRe).then(|| build_mask(&sim));
    if cfg.loss.is_matrix_loss() {
        if n_s < 2 {
            return Err(Error::Input(
                "matrix losses need at least 2 closed speakers".into(),
            ));
        }
        for (i, idx) in data.voiced.iter().enumerate() {
            if idx.len() < cfg.frames_per_speaker_per_step {
                return Err(Error::Input(format!(
                    "speaker {} has {} voiced frames, fewer than {} per step",
                    roster[i].speaker.label,
                    idx.len(),
                    cfg.frames_per_speaker_per_step
                )));
            }
        }
    } else if cfg.sce_weight > 0.0 {
        log::warn!(
            "sce_weight only applies to matrix losses; ignoring it for {}",
            cfg.loss
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::init(
        data.frames.ncols(),
        arch,
        n_s,
        output_activation(cfg.loss),
        &mut rng,
    )?;
    net.set_standardizer(fit_standardizer(data.frames.view())?)?;
    let mut optimizer = AdaGradState::new(&net, cfg.learning_rate);
    let total_frames = data.frames.nrows();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.loss.is_matrix_loss() {
            let per = cfg.frames_per_speaker_per_step;
            let steps = total_frames.div_ceil(n_s * per);
            for _ in 0..steps {
                let mut rows = Vec::with_capacity(n_s * per);
                for idx in &data.voiced {
                    let picks = index::sample(&mut rng, idx.len(), per);
                    rows.extend(picks.into_iter().map(|p| idx[p]));
                }
                let batch = data.frames.select(Axis(0), &rows);
                let (_, grads) = matrix_step_objective(
                    &net,
                    batch.view(),
                    per,
                    &sim,
                    mask.as_ref(),
                    cfg.kernel,
                    cfg.sce_weight,
                )?;
                optimizer.step(&mut net, &grads)?;
            }
        } else {
            let mut order: Vec<usize> = (0..total_frames).collect();
            order.shuffle(&mut rng);
            let targets = match cfg.loss {
                LossTag::DvecSce => FrameTargets::SpeakerCodes { n_s },
                _ => FrameTargets::SimilarityVectors(&sim),
            };
            for batch_rows in order.chunks(cfg.batch_size) {
                let batch = data.frames.select(Axis(0), batch_rows);
                let speakers: Vec<usize> = batch_rows.iter().map(|&r| data.speakers[r]).collect();
                let (_, grads) = frame_objective(&net, batch.view(), &speakers, targets)?;
                optimizer.step(&mut net, &grads)?;
            }
        }
        let loss = evaluate(&net, &data, &sim, mask.as_ref(), cfg)?;
        log::debug!("epoch {} {}: loss {loss}", epoch + 1, cfg.loss);
        loss_trace.push(loss);
    }
    Ok(TrainOutcome {
        network: net,
        loss_trace,
    })
}

/// Training-log CSV with header `epoch,loss`.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{}\n", e + 1, l));
    }
    out
}

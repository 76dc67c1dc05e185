//! Synthetic planted worlds for end-to-end testing without a speech corpus.
//!
//! Each speaker has a latent identity `z_i`. Its ground-truth similarity to
//! another speaker is `tanh(z_i . z_j)`, and its acoustic frames are a noisy
//! linear image `P z_i + noise`. Latent vectors are drawn around the vertices
//! of a regular simplex (one vertex per cluster), which makes most
//! cross-cluster similarities negative and so skews the score distribution
//! towards dissimilarity.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::RawAnswer;
use crate::simcore::{FrameSet, Openness, Roster, SimilarityMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_speakers: usize,
    pub n_closed: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Per-dimension std of the Gaussian frame noise.
    pub noise_std: f64,
    /// Number of simplex-vertex clusters; 1 disables clustering.
    pub clusters: usize,
    /// Squared norm of each cluster centre.
    pub cluster_strength: f64,
    /// Per-dimension std of a speaker's offset from its cluster centre.
    pub spread: f64,
    /// Global multiplier on every latent vector.
    pub latent_scale: f64,
    /// Raw score scale `v` recorded on the ground-truth matrix.
    pub score_bound: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(
        n_speakers: usize,
        n_closed: usize,
        latent_dim: usize,
        feature_dim: usize,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        Self {
            n_speakers,
            n_closed,
            latent_dim,
            feature_dim,
            noise_std,
            clusters: 3,
            cluster_strength: 1.5,
            spread: 0.4,
            latent_scale: 1.0,
            score_bound: 3.0,
            seed,
        }
    }

    /// Tighter, farther-apart clusters: roughly 70% of the off-diagonal
    /// similarities come out negative.
    pub fn skewed(mut self) -> Self {
        self.clusters = 3;
        self.cluster_strength = 2.0;
        self.spread = 0.25;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_closed == 0 || self.n_closed > self.n_speakers {
            return Err(Error::Config(format!(
                "need 0 < closed ({}) <= speakers ({})",
                self.n_closed, self.n_speakers
            )));
        }
        if self.latent_dim == 0 || self.feature_dim < self.latent_dim {
            return Err(Error::Config(format!(
                "need latent_dim >= 1 and feature_dim ({}) >= latent_dim ({})",
                self.feature_dim, self.latent_dim
            )));
        }
        if self.clusters == 0 || self.clusters > self.latent_dim + 1 {
            return Err(Error::Config(format!(
                "{} clusters do not fit a simplex in {} dimensions",
                self.clusters, self.latent_dim
            )));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("cluster_strength", self.cluster_strength),
            ("spread", self.spread),
            ("latent_scale", self.latent_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.score_bound.is_nan() || self.score_bound <= 0.0 {
            return Err(Error::Config("score bound must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedWorld {
    /// `N x N_d` latent speaker identities.
    pub true_vectors: Array2<f64>,
    /// `F x N_d`
    pub projection: Array2<f64>,
    pub noise_std: f64,
    pub ground_truth_sim: SimilarityMatrix,
    pub roster: Roster,
}

impl PlantedWorld {
    /// World from explicit latent vectors and projection.
    pub fn from_vectors(
        true_vectors: Array2<f64>,
        projection: Array2<f64>,
        noise_std: f64,
        n_closed: usize,
        score_bound: f64,
    ) -> Result<Self> {
        if projection.ncols() != true_vectors.ncols() {
            return Err(Error::Shape(
                "projection and latent dimensions differ".into(),
            ));
        }
        let n = true_vectors.nrows();
        let mut sim = Array2::<f64>::ones((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let s = true_vectors.row(i).dot(&true_vectors.row(j)).tanh();
                sim[[i, j]] = s;
                sim[[j, i]] = s;
            }
        }
        Ok(Self {
            true_vectors,
            projection,
            noise_std,
            ground_truth_sim: SimilarityMatrix::new(sim, score_bound, true)?,
            roster: Roster::with_default_labels(n, n_closed)?,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.true_vectors.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// `P z_i`, the noiseless frame of speaker `i`.
    pub fn clean_frame(&self, speaker: usize) -> Array1<f64> {
        self.projection.dot(&self.true_vectors.row(speaker))
    }

    /// Fraction of off-diagonal ground-truth entries below zero.
    pub fn negative_fraction(&self) -> f64 {
        let n = self.n_speakers();
        if n < 2 {
            return 0.0;
        }
        let negative = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && self.ground_truth_sim.get(i, j) < 0.0)
            .count();
        negative as f64 / (n * n - n) as f64
    }
}

/// Seed for per-speaker streams, so generation order does not matter.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Unit-norm vertices of a regular simplex with `k` vertices in `dim`
/// dimensions (`k <= dim + 1`), as rows. A single vertex is the origin.
fn simplex_vertices(k: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((k, dim));
    if k < 2 {
        return out;
    }
    // Centred standard basis of R^k lives in a (k-1)-dim subspace; express it
    // in an orthonormal basis of that subspace by Gram-Schmidt.
    let centred = Array2::from_shape_fn((k, k), |(i, j)| {
        f64::from(u8::from(i == j)) - 1.0 / k as f64
    });
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for row in centred.rows() {
        let mut v = row.to_owned();
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 && basis.len() < k - 1 {
            basis.push(v / norm);
        }
    }
    for i in 0..k {
        for (c, b) in basis.iter().enumerate() {
            out[[i, c]] = centred.row(i).dot(b);
        }
        let norm = out.row(i).dot(&out.row(i)).sqrt();
        out.row_mut(i).mapv_inplace(|v| v / norm);
    }
    out
}

pub fn generate_world(cfg: &WorldConfig) -> Result<PlantedWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres = simplex_vertices(cfg.clusters, cfg.latent_dim) * cfg.cluster_strength.sqrt();
    let mut z = Array2::<f64>::zeros((cfg.n_speakers, cfg.latent_dim));
    for i in 0..cfg.n_speakers {
        let centre = centres.row(i % cfg.clusters);
        for k in 0..cfg.latent_dim {
            let g: f64 = StandardNormal.sample(&mut rng);
            z[[i, k]] = cfg.latent_scale * (centre[k] + cfg.spread * g);
        }
    }
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let projection = Array2::from_shape_simple_fn((cfg.feature_dim, cfg.latent_dim), || {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * scale
    });
    PlantedWorld::from_vectors(z, projection, cfg.noise_std, cfg.n_closed, cfg.score_bound)
}

/// `n_frames` noisy frames of one speaker with Bernoulli voiced flags.
pub fn generate_frames(
    world: &PlantedWorld,
    speaker: usize,
    n_frames: usize,
    voiced_rate: f64,
    seed: u64,
) -> Result<FrameSet> {
    if speaker >= world.n_speakers() {
        return Err(Error::Range {
            index: speaker,
            size: world.n_speakers(),
        });
    }
    if n_frames == 0 || !(voiced_rate > 0.0 && voiced_rate <= 1.0) {
        return Err(Error::Config(format!(
            "need n_frames >= 1 and voiced_rate in (0, 1], got {n_frames} and {voiced_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, speaker as u64));
    let clean = world.clean_frame(speaker);
    let mut frames = Array2::<f64>::zeros((n_frames, world.feature_dim()));
    let mut voiced = Vec::with_capacity(n_frames);
    for mut row in frames.rows_mut() {
        for (v, &c) in row.iter_mut().zip(&clean) {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v = c + world.noise_std * g;
        }
        voiced.push(rng.random_bool(voiced_rate));
    }
    if !voiced.contains(&true) {
        let t = rng.random_range(0..n_frames);
        voiced[t] = true;
    }
    let id = world.roster.speakers()[speaker].clone();
    FrameSet::new(id, frames, voiced)
}

/// Frames for every speaker in the world.
pub fn generate_roster_frames(
    world: &PlantedWorld,
    n_frames: usize,
    voiced_rate: f64,
    seed: u64,
) -> Result<Vec<FrameSet>> {
    (0..world.n_speakers())
        .map(|i| generate_frames(world, i, n_frames, voiced_rate, seed))
        .collect()
}

/// Listener answers for every unordered pair:
/// `round(clamp(v * s_true + noise, -v, v))`, rounding half away from zero.
pub fn generate_answers(
    world: &PlantedWorld,
    listeners_per_pair: usize,
    score_bound: i64,
    answer_noise_std: f64,
    seed: u64,
) -> Result<Vec<RawAnswer>> {
    if listeners_per_pair == 0 || score_bound <= 0 {
        return Err(Error::Config(
            "need listeners_per_pair >= 1 and a positive score bound".into(),
        ));
    }
    let noise = Normal::new(0.0, answer_noise_std)
        .map_err(|e| Error::Config(format!("answer noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let n = world.n_speakers();
    let bound = score_bound as f64;
    let mut answers = Vec::with_capacity(n * (n - 1) / 2 * listeners_per_pair);
    for i in 0..n {
        for j in i + 1..n {
            let target = bound * world.ground_truth_sim.get(i, j);
            for l in 0..listeners_per_pair {
                let raw = (target + noise.sample(&mut rng)).clamp(-bound, bound);
                answers.push(RawAnswer {
                    listener_id: format!("L{l:03}"),
                    speaker_a: i,
                    speaker_b: j,
                    score: raw.round() as i64,
                });
            }
        }
    }
    Ok(answers)
}

/// Closed/open flag helper for manifests.
pub fn openness(world: &PlantedWorld, speaker: usize) -> Openness {
    world.roster.speakers()[speaker].openness
}

//! Context-sensitive similarity model.
//!
//! An embedding `x` passes through the context-insensitive transform (CIT)
//! `x̃ = (Wx + b) / ‖Wx + b‖`. The context embedding is mapped by a single
//! linear layer to a rank-`r` matrix `B_c` (row-major `r × d`), and pairs are
//! scored by `s(i, j | c) = (B_c x̃_i) · (B_c x̃_j)`, i.e. the bilinear form
//! with the PSD matrix `B_cᵀ B_c`, which is never materialized.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DEFAULT_NORM_EPS;
use crate::dataset::ContextTriplet;
use crate::embedding::{l2_normalize, EmbeddingStore};
use crate::error::{Error, Result};
use crate::linalg;

/// Pairs scored for each oddball position: oddball `k` leaves pair `PAIRS[k]`.
pub const PAIRS: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// CIT plus the context-conditioned low-rank kernel.
    ContextSensitive,
    /// CIT only; pairs are scored by the dot product of transformed embeddings.
    ContextInsensitive,
}

/// What the context mapper sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextInput {
    /// `x_c / ‖x_c‖`
    #[default]
    Normalized,
    /// `x_c` unchanged.
    Raw,
    /// The CIT output for `x_c`, sharing `W` and `b` with the triplet images.
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOptions {
    pub context_input: ContextInput,
    /// Whether the mapper has a trainable bias `m0`.
    pub mapper_bias: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            context_input: ContextInput::Normalized,
            mapper_bias: true,
        }
    }
}

/// Trainable state plus the fixed rank and temperature.
///
/// `m` is the `(r·d) × d` mapper weight and `m0` its bias; both are empty for
/// a context-insensitive model, which has `rank == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub rank: usize,
    pub tau: f64,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub m: Vec<f64>,
    pub m0: Vec<f64>,
    pub kind: ModelKind,
    pub options: ModelOptions,
}

/// Default initialization scale for the mapper, `1e-2 / √d`.
pub fn default_init_sigma(dim: usize) -> f64 {
    1e-2 / (dim as f64).sqrt()
}

/// `W = I`, `b = 0`, mapper entries i.i.d. `N(0, σ²)` with the default σ.
pub fn init_params(dim: usize, rank: usize, tau: f64, seed: u64) -> Result<ModelParams> {
    init_params_with(
        dim,
        rank,
        tau,
        seed,
        default_init_sigma(dim),
        ModelOptions::default(),
    )
}

pub fn init_params_with(
    dim: usize,
    rank: usize,
    tau: f64,
    seed: u64,
    sigma: f64,
    options: ModelOptions,
) -> Result<ModelParams> {
    if dim == 0 || rank == 0 {
        return Err(Error::validation("dimension and rank must be positive"));
    }
    if rank > dim {
        return Err(Error::validation(format!(
            "rank {rank} exceeds dimension {dim}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation("init sigma must be finite and nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        if sigma == 0.0 {
            return vec![0.0; n];
        }
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    };
    let m = draw(rank * dim * dim);
    let m0 = if options.mapper_bias {
        draw(rank * dim)
    } else {
        vec![0.0; rank * dim]
    };
    let params = ModelParams {
        dim,
        rank,
        tau,
        w: linalg::identity(dim),
        b: vec![0.0; dim],
        m,
        m0,
        kind: ModelKind::ContextSensitive,
        options,
    };
    params.validate()?;
    Ok(params)
}

impl ModelParams {
    /// A CIT-only model initialized at `W = I`, `b = 0`.
    pub fn context_insensitive(dim: usize, tau: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dimension must be positive"));
        }
        let p = Self {
            dim,
            rank: 0,
            tau,
            w: linalg::identity(dim),
            b: vec![0.0; dim],
            m: Vec::new(),
            m0: Vec::new(),
            kind: ModelKind::ContextInsensitive,
            options: ModelOptions::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::validation("dimension must be positive"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        match self.kind {
            ModelKind::ContextSensitive if self.rank == 0 || self.rank > d => {
                return Err(Error::validation(format!(
                    "rank {} must be in 1..={d}",
                    self.rank
                )))
            }
            ModelKind::ContextInsensitive if self.rank != 0 => {
                return Err(Error::validation("context-insensitive model must have rank 0"))
            }
            _ => {}
        }
        let r = self.rank;
        let shapes = [
            ("W", self.w.len(), d * d),
            ("b", self.b.len(), d),
            ("M", self.m.len(), r * d * d),
            ("m0", self.m0.len(), r * d),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::validation(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        if !self.all_finite() {
            return Err(Error::validation("parameters contain non-finite entries"));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        [&self.w, &self.b, &self.m, &self.m0]
            .iter()
            .all(|v| linalg::all_finite(v))
    }

    pub fn is_context_sensitive(&self) -> bool {
        self.kind == ModelKind::ContextSensitive
    }

    /// Total number of trainable scalars.
    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len() + self.m.len() + self.m0.len()
    }

    /// `Wx + b` and its norm.
    pub(crate) fn affine(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut z = self.b.clone();
        for (zi, row) in z.iter_mut().zip(self.w.chunks_exact(self.dim)) {
            *zi += linalg::dot(row, x);
        }
        let n = linalg::norm(&z);
        (z, n)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::validation(format!(
                "embedding has length {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// The CIT output `(Wx + b) / ‖Wx + b‖` together with `‖Wx + b‖`.
    pub(crate) fn cit_with_norm(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let (mut z, n) = self.affine(x);
        if !(n > DEFAULT_NORM_EPS) {
            return Err(Error::DegenerateVector {
                norm: n,
                eps: DEFAULT_NORM_EPS,
            });
        }
        z.iter_mut().for_each(|v| *v /= n);
        Ok((z, n))
    }

    pub fn cit_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.cit_with_norm(x).map(|(v, _)| v)
    }

    /// The vector fed to the context mapper, with `‖Wx_c + b‖` when the
    /// context goes through the CIT.
    pub(crate) fn context_features(&self, x_c: &[f64]) -> Result<(Vec<f64>, Option<f64>)> {
        self.check_dim(x_c)?;
        if !linalg::all_finite(x_c) {
            return Err(Error::validation("context embedding is not finite"));
        }
        match self.options.context_input {
            ContextInput::Normalized => Ok((l2_normalize(x_c)?, None)),
            ContextInput::Raw => Ok((x_c.to_vec(), None)),
            ContextInput::Transformed => self.cit_with_norm(x_c).map(|(v, n)| (v, Some(n))),
        }
    }

    /// `B_c = reshape(M x̂_c + m0)`, row-major `r × d`.
    pub fn context_matrix(&self, x_c: &[f64]) -> Result<ContextMatrix> {
        if !self.is_context_sensitive() {
            return Err(Error::validation(
                "context-insensitive model has no context matrix",
            ));
        }
        let (features, _) = self.context_features(x_c)?;
        Ok(self.context_matrix_from_features(&features))
    }

    pub(crate) fn context_matrix_from_features(&self, features: &[f64]) -> ContextMatrix {
        let (r, d) = (self.rank, self.dim);
        let mut data = self.m0.clone();
        for (o, row) in data.iter_mut().zip(self.m.chunks_exact(d)) {
            *o += linalg::dot(row, features);
        }
        ContextMatrix {
            rows: r,
            cols: d,
            data,
        }
    }

    /// Forward pass for one triplet, caching intermediates for backprop.
    pub(crate) fn forward(&self, xs: [&[f64]; 3], x_c: &[f64]) -> Result<TripletForward> {
        let mut unit = Vec::with_capacity(3);
        let mut norms = [0.0; 3];
        for (k, x) in xs.iter().enumerate() {
            let (u, n) = self.cit_with_norm(x)?;
            unit.push(u);
            norms[k] = n;
        }
        let unit: [Vec<f64>; 3] = unit.try_into().unwrap();
        let (context, projected, context_norm) = match self.kind {
            ModelKind::ContextSensitive => {
                let (features, cn) = self.context_features(x_c)?;
                let bc = self.context_matrix_from_features(&features);
                let projected = [0, 1, 2].map(|k| bc.project(&unit[k]));
                (Some((features, bc)), projected, cn)
            }
            ModelKind::ContextInsensitive => {
                self.check_dim(x_c)?;
                (None, unit.clone(), None)
            }
        };
        let sims = PAIRS.map(|(i, j)| linalg::dot(&projected[i], &projected[j]));
        let logits = sims.map(|s| s / self.tau);
        let (probs, log_probs) = softmax3(logits);
        Ok(TripletForward {
            unit,
            norms,
            context,
            context_norm,
            projected,
            probs: TripletProbabilities {
                probs,
                pair_similarities: sims,
            },
            log_probs,
        })
    }

    /// Odd-one-out probabilities for `(p, q, r)` in context `c`.
    pub fn triplet_probs(
        &self,
        x_p: &[f64],
        x_q: &[f64],
        x_r: &[f64],
        x_c: &[f64],
    ) -> Result<TripletProbabilities> {
        self.forward([x_p, x_q, x_r], x_c).map(|f| f.probs)
    }

    /// Probabilities for a stored triplet.
    pub fn probs_for(
        &self,
        store: &EmbeddingStore,
        t: &ContextTriplet,
    ) -> Result<TripletProbabilities> {
        let [p, q, r] = t.image_ids.map(|id| store.lookup(id));
        self.triplet_probs(p?, q?, r?, store.lookup(t.context_id)?)
    }

    pub fn predict(&self, store: &EmbeddingStore, t: &ContextTriplet) -> Result<usize> {
        self.probs_for(store, t).map(|p| predict_oddball(&p))
    }
}

pub(crate) struct TripletForward {
    pub unit: [Vec<f64>; 3],
    pub norms: [f64; 3],
    /// Mapper input and the resulting `B_c`; absent for CIT-only models.
    pub context: Option<(Vec<f64>, ContextMatrix)>,
    pub context_norm: Option<f64>,
    /// `B_c x̃` per image, or `x̃` itself for CIT-only models.
    pub projected: [Vec<f64>; 3],
    pub probs: TripletProbabilities,
    pub log_probs: [f64; 3],
}

/// Max-shifted softmax returning probabilities and log-probabilities.
pub(crate) fn softmax3(logits: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits.map(|u| u - max);
    let exps = shifted.map(f64::exp);
    let z: f64 = exps.iter().sum();
    let log_z = z.ln();
    (exps.map(|e| e / z), shifted.map(|s| s - log_z))
}

/// Row-major `r × d` matrix produced by the context mapper.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ContextMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix data has {} entries, expected {rows}×{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `B x`
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        linalg::matvec(&self.data, self.rows, self.cols, x, &mut out);
        out
    }

    /// `‖BᵀB − I_d‖_F² = ‖BBᵀ‖_F² − 2‖B‖_F² + d`, using only the `r × r` Gram matrix.
    pub fn identity_deviation_sq(&self) -> f64 {
        let gram = self.gram();
        let gram_sq: f64 = gram.iter().map(|g| g * g).sum();
        let trace: f64 = (0..self.rows).map(|i| gram[i * self.rows + i]).sum();
        gram_sq - 2.0 * trace + self.cols as f64
    }

    /// `B Bᵀ`, row-major `r × r`.
    pub fn gram(&self) -> Vec<f64> {
        let (r, d) = (self.rows, self.cols);
        let mut g = vec![0.0; r * r];
        for i in 0..r {
            let bi = &self.data[i * d..(i + 1) * d];
            for j in i..r {
                let v = linalg::dot(bi, &self.data[j * d..(j + 1) * d]);
                g[i * r + j] = v;
                g[j * r + i] = v;
            }
        }
        g
    }
}

/// `(B x̃_i) · (B x̃_j)`.
pub fn similarity(bc: &ContextMatrix, xt_i: &[f64], xt_j: &[f64]) -> f64 {
    linalg::dot(&bc.project(xt_i), &bc.project(xt_j))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletProbabilities {
    /// `probs[k]` is the probability that image `k` is the oddball.
    pub probs: [f64; 3],
    /// `(s_qr, s_pr, s_pq)`, aligned with `probs`.
    pub pair_similarities: [f64; 3],
}

/// Argmax with ties resolved toward the lowest index.
pub fn predict_oddball(p: &TripletProbabilities) -> usize {
    argmax3(&p.probs)
}

pub(crate) fn argmax3(v: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if v[k] > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
pub enum Baseline<'a> {
    /// Cosine similarity of the raw embeddings; ignores the context.
    FmCosine,
    /// Dot products of CIT outputs under the given parameters.
    CitOnly(&'a ModelParams),
}

/// Oddball = image left out of the most similar pair.
pub fn baseline_predict(
    store: &EmbeddingStore,
    triplet: &ContextTriplet,
    mode: Baseline<'_>,
) -> Result<usize> {
    let [p, q, r] = triplet.image_ids.map(|id| store.lookup(id));
    let raw = [p?, q?, r?];
    let units: [Vec<f64>; 3] = match mode {
        Baseline::FmCosine => [
            l2_normalize(raw[0])?,
            l2_normalize(raw[1])?,
            l2_normalize(raw[2])?,
        ],
        Baseline::CitOnly(params) => [
            params.cit_forward(raw[0])?,
            params.cit_forward(raw[1])?,
            params.cit_forward(raw[2])?,
        ],
    };
    let sims = PAIRS.map(|(i, j)| linalg::dot(&units[i], &units[j]));
    Ok(argmax3(&sims))
}

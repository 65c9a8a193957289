//! Loss and analytic gradients of the regularized odd-one-out NLL.
//!
//! For a batch of `n` triplets the objective is
//!
//! ```text
//! L = (w_nll / n) Σ −log Pr(k*) + λ₁‖W − I‖_F² + (λ₂ / n) Σ ‖B_cᵀB_c − I‖_F²
//! ```
//!
//! Backward pass per triplet, with `S_k` the similarity of the pair left when
//! `k` is the oddball and `y_a = B_c x̃_a`:
//!
//! 1. `∂(−log p_k*)/∂S_k = (p_k − [k = k*]) / τ`
//! 2. `∂S/∂y_i = y_j`, `∂S/∂y_j = y_i` for the pair `(i, j)`
//! 3. `∂/∂B_c = Σ_a ∂y_a ⊗ x̃_a`, which is `B_c(x̃_i x̃_jᵀ + x̃_j x̃_iᵀ)` per pair;
//!    the regularizer adds `4(B_cB_cᵀB_c − B_c)`
//! 4. `∂/∂x̃_a = B_cᵀ ∂y_a`
//! 5. through the normalization, `∂/∂z = (I − x̃x̃ᵀ) ∂x̃ / ‖z‖` with `z = Wx + b`
//! 6. `∂W += ∂z ⊗ x`, `∂b += ∂z`; the mapper gets `∂M += vec(∂B_c) ⊗ x̂_c`,
//!    `∂m0 += vec(∂B_c)`
//!
//! When the context goes through the CIT, `Mᵀ vec(∂B_c)` is pushed back
//! through step 5 into `W` and `b` as well.

use rayon::prelude::*;

use crate::dataset::ContextTriplet;
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ContextInput, ContextMatrix, ModelKind, ModelParams, PAIRS};

/// Gradient of the objective, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub dm: Vec<f64>,
    pub dm0: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            dw: vec![0.0; params.w.len()],
            db: vec![0.0; params.b.len()],
            dm: vec![0.0; params.m.len()],
            dm0: vec![0.0; params.m0.len()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.dw, &self.db, &self.dm, &self.dm0]
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| linalg::all_finite(b))
    }

    pub fn norm(&self) -> f64 {
        self.blocks()
            .iter()
            .map(|b| linalg::dot(b, b))
            .sum::<f64>()
            .sqrt()
    }

    fn add(&mut self, other: &GradientSet) {
        linalg::axpy(1.0, &other.dw, &mut self.dw);
        linalg::axpy(1.0, &other.db, &mut self.db);
        linalg::axpy(1.0, &other.dm, &mut self.dm);
        linalg::axpy(1.0, &other.dm0, &mut self.dm0);
    }
}

impl ModelParams {
    /// Parameter blocks in the order `W, b, M, m0`.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.w, &self.b, &self.m, &self.m0]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w, &mut self.b, &mut self.m, &mut self.m0]
    }
}

/// Loss value split into its three terms (already weighted).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub reg_w: f64,
    pub reg_a: f64,
}

/// How per-triplet work is scheduled and reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Serial,
    /// Parallel map, then a sum in triplet order. Bit-identical to `Serial`.
    ParallelOrdered,
    /// Parallel map and tree reduction. Faster; last bits depend on scheduling.
    ParallelUnordered,
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub nll_weight: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Objective {
    pub fn new(lambda1: f64, lambda2: f64) -> Self {
        Self {
            nll_weight: 1.0,
            lambda1,
            lambda2,
        }
    }

    fn reg_w(&self, params: &ModelParams) -> f64 {
        if self.lambda1 == 0.0 {
            return 0.0;
        }
        let d = params.dim;
        let dev: f64 = params
            .w
            .iter()
            .enumerate()
            .map(|(idx, &w)| {
                let e = if idx / d == idx % d { w - 1.0 } else { w };
                e * e
            })
            .sum();
        self.lambda1 * dev
    }

    pub fn loss(
        &self,
        params: &ModelParams,
        batch: &[ContextTriplet],
        store: &EmbeddingStore,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let mut nll = 0.0;
        let mut reg_a = 0.0;
        for t in batch {
            let (x, xc) = fetch(store, t)?;
            let fwd = params.forward(x, xc)?;
            nll -= fwd.log_probs[t.oddball_index];
            if let Some((_, bc)) = &fwd.context {
                reg_a += bc.identity_deviation_sq();
            }
        }
        let n = batch.len() as f64;
        let nll = self.nll_weight * nll / n;
        let reg_a = if params.kind == ModelKind::ContextSensitive {
            self.lambda2 * reg_a / n
        } else {
            0.0
        };
        let reg_w = self.reg_w(params);
        Ok(LossBreakdown {
            total: nll + reg_w + reg_a,
            nll,
            reg_w,
            reg_a,
        })
    }

    pub fn gradients(
        &self,
        params: &ModelParams,
        batch: &[ContextTriplet],
        store: &EmbeddingStore,
    ) -> Result<GradientSet> {
        self.loss_and_gradients(params, batch, store, Exec::Serial)
            .map(|(_, g)| g)
    }

    pub fn loss_and_gradients(
        &self,
        params: &ModelParams,
        batch: &[ContextTriplet],
        store: &EmbeddingStore,
        exec: Exec,
    ) -> Result<(LossBreakdown, GradientSet)> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let one = |t: &ContextTriplet| self.triplet_contribution(params, t, store);
        let (mut nll, mut reg_a, mut grads) = match exec {
            Exec::Serial => {
                let mut acc = Accumulator::new(params);
                for t in batch {
                    acc.push(params, store, one(t)?)?;
                }
                acc.finish()
            }
            Exec::ParallelOrdered => {
                let parts: Vec<TripletContribution> =
                    batch.par_iter().map(one).collect::<Result<_>>()?;
                let mut acc = Accumulator::new(params);
                for part in parts {
                    acc.push(params, store, part)?;
                }
                acc.finish()
            }
            Exec::ParallelUnordered => {
                let acc = batch
                    .par_iter()
                    .try_fold(
                        || Accumulator::new(params),
                        |mut acc, t| {
                            acc.push(params, store, one(t)?)?;
                            Ok::<_, Error>(acc)
                        },
                    )
                    .try_reduce(
                        || Accumulator::new(params),
                        |mut a, b| {
                            a.merge(b);
                            Ok(a)
                        },
                    )?;
                acc.finish()
            }
        };
        let scale = 1.0 / batch.len() as f64;
        nll *= self.nll_weight * scale;
        reg_a *= self.lambda2 * scale;
        for block in [&mut grads.dw, &mut grads.db, &mut grads.dm, &mut grads.dm0] {
            block.iter_mut().for_each(|g| *g *= scale);
        }
        if self.lambda1 != 0.0 {
            let d = params.dim;
            for (idx, (g, &w)) in grads.dw.iter_mut().zip(&params.w).enumerate() {
                let target = if idx / d == idx % d { 1.0 } else { 0.0 };
                *g += 2.0 * self.lambda1 * (w - target);
            }
        }
        if !params.options.mapper_bias {
            grads.dm0.iter_mut().for_each(|g| *g = 0.0);
        }
        let reg_w = self.reg_w(params);
        let loss = LossBreakdown {
            total: nll + reg_w + reg_a,
            nll,
            reg_w,
            reg_a,
        };
        Ok((loss, grads))
    }

    /// Unscaled per-triplet terms: NLL, `‖A_c − I‖²`, and the upstream
    /// gradients needed to assemble parameter gradients.
    fn triplet_contribution(
        &self,
        params: &ModelParams,
        t: &ContextTriplet,
        store: &EmbeddingStore,
    ) -> Result<TripletContribution> {
        let (x, xc) = fetch(store, t)?;
        let fwd = params.forward(x, xc)?;
        let nll = -fwd.log_probs[t.oddball_index];
        let r_out = fwd.projected[0].len();

        // dL/dS_k, weighted by the NLL weight
        let mut g_pair = [0.0; 3];
        for (k, g) in g_pair.iter_mut().enumerate() {
            let target = if k == t.oddball_index { 1.0 } else { 0.0 };
            *g = self.nll_weight * (fwd.probs.probs[k] - target) / params.tau;
        }
        let mut dy = [vec![0.0; r_out], vec![0.0; r_out], vec![0.0; r_out]];
        for (k, &(i, j)) in PAIRS.iter().enumerate() {
            linalg::axpy(g_pair[k], &fwd.projected[j], &mut dy[i]);
            linalg::axpy(g_pair[k], &fwd.projected[i], &mut dy[j]);
        }

        let d = params.dim;
        let (dunit, mapper, reg_a) = match &fwd.context {
            Some((features, bc)) => {
                let mut db_c = vec![0.0; bc.rows * d];
                for a in 0..3 {
                    linalg::add_outer(1.0, &dy[a], &fwd.unit[a], &mut db_c);
                }
                let reg_a = bc.identity_deviation_sq();
                if self.lambda2 != 0.0 {
                    add_identity_reg_grad(4.0 * self.lambda2, bc, &mut db_c);
                }
                let dunit = [0, 1, 2].map(|a| {
                    let mut out = vec![0.0; d];
                    linalg::matvec_t(&bc.data, bc.rows, d, &dy[a], &mut out);
                    out
                });
                (dunit, Some((db_c, features.clone())), reg_a)
            }
            None => (dy, None, 0.0),
        };

        let dz = [0, 1, 2].map(|a| normalization_backward(&fwd.unit[a], &dunit[a], fwd.norms[a]));

        let dz_context = match (&mapper, params.options.context_input, fwd.context_norm) {
            (Some((db_c, features)), ContextInput::Transformed, Some(norm)) => {
                let mut dfeat = vec![0.0; d];
                linalg::matvec_t(&params.m, params.rank * d, d, db_c, &mut dfeat);
                Some(normalization_backward(features, &dfeat, norm))
            }
            _ => None,
        };

        Ok(TripletContribution {
            nll,
            reg_a,
            dz,
            mapper,
            dz_context,
            triplet: t.clone(),
        })
    }
}

/// `∂z = (∂x̃ − x̃ (x̃·∂x̃)) / ‖z‖`
fn normalization_backward(unit: &[f64], dunit: &[f64], norm: f64) -> Vec<f64> {
    let proj = linalg::dot(unit, dunit);
    unit.iter()
        .zip(dunit)
        .map(|(u, g)| (g - u * proj) / norm)
        .collect()
}

/// `out += scale · (B Bᵀ B − B)`
fn add_identity_reg_grad(scale: f64, bc: &ContextMatrix, out: &mut [f64]) {
    let (r, d) = (bc.rows, bc.cols);
    let gram = bc.gram();
    for i in 0..r {
        let row = &mut out[i * d..(i + 1) * d];
        linalg::axpy(-scale, &bc.data[i * d..(i + 1) * d], row);
        for k in 0..r {
            linalg::axpy(scale * gram[i * r + k], &bc.data[k * d..(k + 1) * d], row);
        }
    }
}

fn fetch<'s>(store: &'s EmbeddingStore, t: &ContextTriplet) -> Result<([&'s [f64]; 3], &'s [f64])> {
    let [p, q, r] = t.image_ids.map(|id| store.lookup(id));
    Ok(([p?, q?, r?], store.lookup(t.context_id)?))
}

struct TripletContribution {
    nll: f64,
    reg_a: f64,
    dz: [Vec<f64>; 3],
    /// `vec(∂B_c)` and the mapper input.
    mapper: Option<(Vec<f64>, Vec<f64>)>,
    dz_context: Option<Vec<f64>>,
    triplet: ContextTriplet,
}

struct Accumulator {
    nll: f64,
    reg_a: f64,
    grads: GradientSet,
}

impl Accumulator {
    fn new(params: &ModelParams) -> Self {
        Self {
            nll: 0.0,
            reg_a: 0.0,
            grads: GradientSet::zeros_like(params),
        }
    }

    fn push(
        &mut self,
        params: &ModelParams,
        store: &EmbeddingStore,
        c: TripletContribution,
    ) -> Result<()> {
        let (x, xc) = fetch(store, &c.triplet)?;
        self.nll += c.nll;
        self.reg_a += c.reg_a;
        let g = &mut self.grads;
        for a in 0..3 {
            linalg::add_outer(1.0, &c.dz[a], x[a], &mut g.dw);
            linalg::axpy(1.0, &c.dz[a], &mut g.db);
        }
        if let Some((dvec, features)) = &c.mapper {
            linalg::add_outer(1.0, dvec, features, &mut g.dm);
            if params.options.mapper_bias {
                linalg::axpy(1.0, dvec, &mut g.dm0);
            }
        }
        if let Some(dzc) = &c.dz_context {
            linalg::add_outer(1.0, dzc, xc, &mut g.dw);
            linalg::axpy(1.0, dzc, &mut g.db);
        }
        Ok(())
    }

    fn merge(&mut self, other: Accumulator) {
        self.nll += other.nll;
        self.reg_a += other.reg_a;
        self.grads.add(&other.grads);
    }

    fn finish(self) -> (f64, f64, GradientSet) {
        (self.nll, self.reg_a, self.grads)
    }
}

/// Regularized NLL of `batch`; see [`Objective`].
pub fn batch_loss(
    params: &ModelParams,
    batch: &[ContextTriplet],
    store: &EmbeddingStore,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    Objective::new(lambda1, lambda2)
        .loss(params, batch, store)
        .map(|l| l.total)
}

/// Exact gradient of [`batch_loss`].
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[ContextTriplet],
    store: &EmbeddingStore,
    lambda1: f64,
    lambda2: f64,
) -> Result<GradientSet> {
    Objective::new(lambda1, lambda2).gradients(params, batch, store)
}

/// Plain SGD: `θ ← θ − lr·∇θ`.
pub fn sgd_step(params: &ModelParams, grads: &GradientSet, learning_rate: f64) -> Result<ModelParams> {
    let shapes_match = params
        .blocks()
        .iter()
        .zip(grads.blocks())
        .all(|(p, g)| p.len() == g.len());
    if !shapes_match {
        return Err(Error::validation("gradient shapes do not match parameters"));
    }
    if !grads.all_finite() {
        return Err(Error::Divergence(format!(
            "non-finite gradient (norm {})",
            grads.norm()
        )));
    }
    let mut next = params.clone();
    for (p, g) in next.blocks_mut().into_iter().zip(grads.blocks()) {
        linalg::axpy(-learning_rate, g, p);
    }
    if !next.all_finite() {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    Ok(next)
}

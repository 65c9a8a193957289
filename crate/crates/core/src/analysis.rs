//! Representational similarity matrices and 2-D PCA coordinates for
//! inspecting how a context reshapes the embedding space.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::embedding::{EmbeddingStore, ImageId};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsmMode {
    /// `s(i, j | c)` under the context kernel.
    ContextSensitive,
    /// `x̃_i · x̃_j` of CIT outputs.
    CitOnly,
}

impl RsmMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RsmMode::ContextSensitive => "context_sensitive",
            RsmMode::CitOnly => "cit_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rsm {
    pub image_ids: Vec<ImageId>,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
}

impl Rsm {
    pub fn n(&self) -> usize {
        self.image_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }

    /// Header row of IDs, then one row of values per image.
    pub fn to_csv(&self) -> String {
        let mut out = self
            .image_ids
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in self.values.chunks_exact(self.n().max(1)) {
            let line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Vectors whose dot products form the RSM: `B_c x̃` or `x̃`.
pub fn representation(
    params: &ModelParams,
    context_id: ImageId,
    ids: &[ImageId],
    store: &EmbeddingStore,
    mode: RsmMode,
) -> Result<Vec<Vec<f64>>> {
    let bc = match mode {
        RsmMode::ContextSensitive => Some(params.context_matrix(store.lookup(context_id)?)?),
        RsmMode::CitOnly => None,
    };
    ids.iter()
        .map(|&id| {
            let u = params.cit_forward(store.lookup(id)?)?;
            Ok(match &bc {
                Some(bc) => bc.project(&u),
                None => u,
            })
        })
        .collect()
}

pub fn compute_rsm(
    params: &ModelParams,
    context_id: ImageId,
    reference_ids: &[ImageId],
    store: &EmbeddingStore,
    mode: RsmMode,
) -> Result<Rsm> {
    let reps = representation(params, context_id, reference_ids, store, mode)?;
    let n = reps.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = linalg::dot(&reps[i], &reps[j]);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(Rsm {
        image_ids: reference_ids.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Row-major `n × k` scores.
    pub coords: Vec<f64>,
    pub k: usize,
    /// Fraction of total variance per component, nonincreasing.
    pub explained_variance: Vec<f64>,
    /// Row-major `k × m` unit principal directions.
    pub components: Vec<f64>,
    pub mean: Vec<f64>,
}

impl Projection {
    pub fn score(&self, i: usize, c: usize) -> f64 {
        self.coords[i * self.k + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCoords {
    pub image_ids: Vec<ImageId>,
    pub projection: Projection,
}

impl ProjectionCoords {
    /// `id,pc1,pc2,...`
    pub fn to_csv(&self) -> String {
        let k = self.projection.k;
        let mut out = String::from("id");
        for c in 1..=k {
            let _ = write!(out, ",pc{c}");
        }
        out.push('\n');
        for (i, id) in self.image_ids.iter().enumerate() {
            let _ = write!(out, "{id}");
            for c in 0..k {
                let _ = write!(out, ",{}", self.projection.score(i, c));
            }
            out.push('\n');
        }
        out
    }
}

/// Top-`k` principal components of the rows of `vectors`.
///
/// Components come from the eigendecomposition of the sample covariance;
/// each is signed so its largest-magnitude loading is positive.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Projection> {
    let n = vectors.len();
    if k == 0 {
        return Err(Error::validation("need at least one component"));
    }
    if n < k {
        return Err(Error::validation(format!(
            "{n} points cannot give {k} components"
        )));
    }
    let m = vectors[0].len();
    if m < k {
        return Err(Error::validation(format!(
            "{m}-dimensional points cannot give {k} components"
        )));
    }
    if vectors.iter().any(|v| v.len() != m) {
        return Err(Error::validation("vectors have differing lengths"));
    }
    let mut mean = vec![0.0; m];
    for v in vectors {
        linalg::axpy(1.0 / n as f64, v, &mut mean);
    }
    let centered = DMatrix::from_fn(n, m, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let total: f64 = cov.diagonal().sum();
    if !(total > 1e-300) {
        return Err(Error::DegenerateVector {
            norm: total.sqrt(),
            eps: 0.0,
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(k * m);
    let mut explained = Vec::with_capacity(k);
    for &c in order.iter().take(k) {
        let mut dir: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let pivot = dir
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend_from_slice(&dir);
        explained.push((eig.eigenvalues[c] / total).clamp(0.0, 1.0));
    }
    let mut coords = Vec::with_capacity(n * k);
    for i in 0..n {
        let row: Vec<f64> = centered.row(i).iter().copied().collect();
        for c in 0..k {
            coords.push(linalg::dot(&row, &components[c * m..(c + 1) * m]));
        }
    }
    Ok(Projection {
        coords,
        k,
        explained_variance: explained,
        components,
        mean,
    })
}

/// PCA of the context-projected (or CIT-only) representations of `ids`.
pub fn project_images(
    params: &ModelParams,
    context_id: ImageId,
    ids: &[ImageId],
    store: &EmbeddingStore,
    mode: RsmMode,
    k: usize,
) -> Result<ProjectionCoords> {
    let reps = representation(params, context_id, ids, store, mode)?;
    Ok(ProjectionCoords {
        image_ids: ids.to_vec(),
        projection: pca_project(&reps, k)?,
    })
}

//! Ground-truth context-sensitive models and datasets sampled from them.
//!
//! Images are grouped in clusters (their class labels). Each cluster `k` owns a
//! random subset `S_k` of `r_true` coordinates, and the truth mapper blends
//! the selectors `α·E_{S_k}` according to how closely the context resembles
//! each cluster centroid:
//!
//! ```text
//! B_c = α Σ_k (ĉ_k · x̂_c) E_{S_k}
//! ```
//!
//! so a context drawn from cluster `k` mostly compares images on `S_k`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{ClassMap, ContextTriplet};
use crate::embedding::{l2_normalize, EmbeddingStore, ImageId};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModelKind, ModelOptions, ModelParams, TripletProbabilities};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub d: usize,
    pub r_true: usize,
    pub n_images: usize,
    pub n_clusters: usize,
    /// Standard deviation of the isotropic noise around each centroid
    /// (centroid coordinates are standard normal).
    pub cluster_spread: f64,
    pub n_trials: usize,
    pub n_participants: usize,
    pub seed: u64,
    /// Scale `α` of the truth kernel rows.
    pub kernel_scale: f64,
    /// Standard deviation of the perturbation in `W = I + noise`.
    pub transform_noise: f64,
    /// Use one constant `B = α·E_S` for every context, with the truth
    /// transform's image restricted to the coordinates in `S`.
    pub context_free: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d: 16,
            r_true: 4,
            n_images: 200,
            n_clusters: 8,
            cluster_spread: 0.6,
            n_trials: 25_000,
            n_participants: 50,
            seed: 0,
            kernel_scale: 4.0,
            transform_noise: 0.05,
            context_free: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("r_true", self.r_true),
            ("n_images", self.n_images),
            ("n_clusters", self.n_clusters),
            ("n_trials", self.n_trials),
            ("n_participants", self.n_participants),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        if self.r_true > self.d {
            return Err(Error::validation("r_true cannot exceed d"));
        }
        if self.n_clusters > self.n_images {
            return Err(Error::validation("more clusters than images"));
        }
        if self.n_clusters < 3 {
            return Err(Error::validation(
                "need at least three clusters for class-distinct triplets",
            ));
        }
        if self.n_images < 4 {
            return Err(Error::validation("need at least four images"));
        }
        if !(self.cluster_spread >= 0.0 && self.kernel_scale > 0.0 && self.transform_noise >= 0.0)
        {
            return Err(Error::validation("scales must be nonnegative"));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Cluster centroids, deterministic in the seed.
pub fn centroids(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = spec.rng(10);
    (0..spec.n_clusters)
        .map(|_| gaussian_vec(&mut rng, spec.d, 1.0))
        .collect()
}

/// Row-major `r × d` selector `α·E_S`.
fn selector(subset: &[usize], d: usize, alpha: f64) -> Vec<f64> {
    let mut b = vec![0.0; subset.len() * d];
    for (row, &col) in subset.iter().enumerate() {
        b[row * d + col] = alpha;
    }
    b
}

fn random_subset(rng: &mut impl Rng, d: usize, r: usize) -> Vec<usize> {
    let mut coords: Vec<usize> = (0..d).collect();
    coords.shuffle(rng);
    coords.truncate(r);
    coords.sort_unstable();
    coords
}

pub fn gen_ground_truth(spec: &SyntheticSpec) -> Result<ModelParams> {
    spec.validate()?;
    let (d, r) = (spec.d, spec.r_true);
    let mut rng = spec.rng(20);
    let mut w = linalg::identity(d);
    linalg::axpy(1.0, &gaussian_vec(&mut rng, d * d, spec.transform_noise), &mut w);

    let mut m = vec![0.0; r * d * d];
    let mut m0 = vec![0.0; r * d];
    if spec.context_free {
        // W maps into span(E_S), so x̃ already has unit norm on S and the
        // truth is reachable by a context-free transform alone.
        let subset = random_subset(&mut rng, d, r);
        for row in (0..d).filter(|i| !subset.contains(i)) {
            w[row * d..(row + 1) * d].fill(0.0);
        }
        m0 = selector(&subset, d, spec.kernel_scale);
    } else {
        for c in centroids(spec) {
            let c_hat = l2_normalize(&c)?;
            let target = selector(&random_subset(&mut rng, d, r), d, spec.kernel_scale);
            linalg::add_outer(1.0, &target, &c_hat, &mut m);
        }
    }
    let params = ModelParams {
        dim: d,
        rank: r,
        tau: 1.0,
        w,
        b: vec![0.0; d],
        m,
        m0,
        kind: ModelKind::ContextSensitive,
        options: ModelOptions::default(),
    };
    params.validate()?;
    Ok(params)
}

/// Draw an index from a 3-outcome distribution.
pub fn sample_oddball(probs: &TripletProbabilities, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    2
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub store: EmbeddingStore,
    pub triplets: Vec<ContextTriplet>,
    pub classes: ClassMap,
}

/// Embeddings around the centroids, class = cluster, and triplets drawn from
/// three distinct clusters with a random context; oddballs are sampled from
/// `truth`. Image `i` belongs to cluster `i mod n_clusters`. Components are
/// rounded to `f32` so the store survives a trip through the file format.
pub fn sample_dataset(spec: &SyntheticSpec, truth: &ModelParams) -> Result<SyntheticData> {
    spec.validate()?;
    if truth.dim != spec.d {
        return Err(Error::validation("truth dimension does not match spec"));
    }
    let cents = centroids(spec);
    let mut rng = spec.rng(30);
    let k = spec.n_clusters;
    let mut ids = Vec::with_capacity(spec.n_images);
    let mut vectors = Vec::with_capacity(spec.n_images * spec.d);
    let mut members: Vec<Vec<ImageId>> = vec![Vec::new(); k];
    for i in 0..spec.n_images {
        let cluster = i % k;
        let noise = gaussian_vec(&mut rng, spec.d, spec.cluster_spread);
        vectors.extend(
            cents[cluster]
                .iter()
                .zip(&noise)
                .map(|(c, n)| (c + n) as f32 as f64),
        );
        ids.push(i as ImageId);
        members[cluster].push(i as ImageId);
    }
    let classes: ClassMap = ids.iter().map(|&id| (id, (id as usize % k) as i64)).collect();
    let store = EmbeddingStore::new(spec.d, ids.clone(), vectors)?;

    let cluster_ids: Vec<usize> = (0..k).collect();
    let mut triplets = Vec::with_capacity(spec.n_trials);
    for t in 0..spec.n_trials {
        let chosen: Vec<usize> = cluster_ids.choose_multiple(&mut rng, 3).copied().collect();
        let image_ids = [0, 1, 2].map(|j| *members[chosen[j]].choose(&mut rng).unwrap());
        let context_id = loop {
            let c = *ids.choose(&mut rng).unwrap();
            if !image_ids.contains(&c) {
                break c;
            }
        };
        let mut triplet = ContextTriplet {
            context_id,
            image_ids,
            oddball_index: 0,
            source_trial_id: t as u64,
            participant_id: (t % spec.n_participants) as u64,
            split: None,
        };
        let probs = truth.probs_for(&store, &triplet)?;
        triplet.oddball_index = sample_oddball(&probs, &mut rng);
        triplets.push(triplet);
    }
    Ok(SyntheticData {
        store,
        triplets,
        classes,
    })
}

/// Mean over trials of `max_k Pr_truth(k)`.
pub fn bayes_accuracy(
    truth: &ModelParams,
    triplets: &[ContextTriplet],
    store: &EmbeddingStore,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::validation("no triplets"));
    }
    let mut sum = 0.0;
    for t in triplets {
        let p = truth.probs_for(store, t)?;
        sum += p.probs.iter().copied().fold(0.0, f64::max);
    }
    Ok(sum / triplets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::filter_class_collisions;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_images: 40,
            n_trials: 300,
            n_participants: 7,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = small();
        assert_eq!(gen_ground_truth(&spec).unwrap(), gen_ground_truth(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..small() };
        assert_ne!(gen_ground_truth(&spec).unwrap(), gen_ground_truth(&other).unwrap());
        let truth = gen_ground_truth(&spec).unwrap();
        let a = sample_dataset(&spec, &truth).unwrap();
        let b = sample_dataset(&spec, &truth).unwrap();
        assert_eq!(a.triplets, b.triplets);
        assert_eq!(a.store, b.store);
    }

    #[test]
    fn contexts_from_different_clusters_differ() {
        let spec = small();
        let truth = gen_ground_truth(&spec).unwrap();
        let cents = centroids(&spec);
        let b0 = truth.context_matrix(&cents[0]).unwrap();
        let b1 = truth.context_matrix(&cents[1]).unwrap();
        let dist: f64 = b0
            .data
            .iter()
            .zip(&b1.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.0);
    }

    #[test]
    fn zero_spread_collapses_clusters() {
        let spec = SyntheticSpec {
            cluster_spread: 0.0,
            ..small()
        };
        let truth = gen_ground_truth(&spec).unwrap();
        let data = sample_dataset(&spec, &truth).unwrap();
        let k = spec.n_clusters as u64;
        for id in 0..spec.n_images as u64 {
            assert_eq!(data.store.lookup(id).unwrap(), data.store.lookup(id % k).unwrap());
        }
    }

    #[test]
    fn triplets_pass_dataset_validation() {
        let spec = small();
        let truth = gen_ground_truth(&spec).unwrap();
        let data = sample_dataset(&spec, &truth).unwrap();
        for t in &data.triplets {
            t.validate().unwrap();
            assert!(!t.image_ids.contains(&t.context_id));
        }
        let kept = filter_class_collisions(&data.triplets, &data.classes).unwrap();
        assert_eq!(kept.len(), data.triplets.len());
    }

    #[test]
    fn bayes_accuracy_extremes() {
        let spec = small();
        let data = sample_dataset(&spec, &gen_ground_truth(&spec).unwrap()).unwrap();
        // zero kernel: every pair scores 0, so the truth is uniform
        let mut uniform = gen_ground_truth(&spec).unwrap();
        uniform.m.iter_mut().for_each(|v| *v = 0.0);
        uniform.m0.iter_mut().for_each(|v| *v = 0.0);
        let acc = bayes_accuracy(&uniform, &data.triplets, &data.store).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 1e-12);
        // a huge kernel makes every decision effectively certain
        let mut sharp = gen_ground_truth(&spec).unwrap();
        sharp.tau = 1e-9;
        let acc = bayes_accuracy(&sharp, &data.triplets, &data.store).unwrap();
        assert!((acc - 1.0).abs() < 1e-6, "{acc}");
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec { n_clusters: 500, ..small() }.validate().is_err());
        assert!(SyntheticSpec { r_true: 17, ..small() }.validate().is_err());
        assert!(SyntheticSpec { n_trials: 0, ..small() }.validate().is_err());
    }
}

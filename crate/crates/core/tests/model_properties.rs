mod support;

use ctxsim::dataset::ContextTriplet;
use ctxsim::linalg;
use ctxsim::model::{
    baseline_predict, init_params_with, predict_oddball, similarity, Baseline, ModelOptions,
    ModelParams, TripletProbabilities, PAIRS,
};
use ctxsim::EmbeddingStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{direct_softmax, explicit_similarity, random_instance};

fn vec_in(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn probabilities_agree_with_direct_softmax() {
    for seed in 0..200 {
        let inst = random_instance(seed, 6, 3, 1, [1.0, 5.0, 7.5][seed as usize % 3], ModelOptions::default());
        let t = &inst.batch[0];
        let p = inst.params.probs_for(&inst.store, t).unwrap();
        let xc = inst.store.lookup(t.context_id).unwrap();
        let bc = inst.params.context_matrix(xc).unwrap();
        let units: Vec<Vec<f64>> = t
            .image_ids
            .iter()
            .map(|&id| inst.params.cit_forward(inst.store.lookup(id).unwrap()).unwrap())
            .collect();
        let sims = PAIRS.map(|(i, j)| explicit_similarity(&bc, &units[i], &units[j]));
        let expect = direct_softmax(sims, inst.params.tau);
        for k in 0..3 {
            assert!((p.probs[k] - expect[k]).abs() < 1e-12);
            assert!((p.pair_similarities[k] - sims[k]).abs() < 1e-10);
        }
    }
}

#[test]
fn identity_transform_cit_matches_cosine_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 5;
    let params = init_params_with(d, 2, 1.0, 0, 0.1, ModelOptions::default()).unwrap();
    let rows: Vec<(u64, Vec<f64>)> = (0..40).map(|i| (i, vec_in(&mut rng, d))).collect();
    let store = EmbeddingStore::from_rows(d, rows).unwrap();
    for i in 0..10u64 {
        let t = ContextTriplet {
            context_id: 4 * i + 3,
            image_ids: [4 * i, 4 * i + 1, 4 * i + 2],
            oddball_index: 0,
            source_trial_id: i,
            participant_id: 0,
            split: None,
        };
        assert_eq!(
            baseline_predict(&store, &t, Baseline::FmCosine).unwrap(),
            baseline_predict(&store, &t, Baseline::CitOnly(&params)).unwrap()
        );
    }
}

#[test]
fn context_insensitive_model_ignores_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ModelParams::context_insensitive(4, 1.0).unwrap();
    p.w.iter_mut().for_each(|w| *w += rng.random_range(-0.2..0.2));
    let xs: Vec<Vec<f64>> = (0..3).map(|_| vec_in(&mut rng, 4)).collect();
    let a = p.triplet_probs(&xs[0], &xs[1], &xs[2], &vec_in(&mut rng, 4)).unwrap();
    let b = p.triplet_probs(&xs[0], &xs[1], &xs[2], &vec_in(&mut rng, 4)).unwrap();
    assert_eq!(a, b);
    assert!(p.context_matrix(&xs[0]).is_err());
}

#[test]
fn prediction_is_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let probs = [rng.random::<f64>(), rng.random(), rng.random()];
        let z: f64 = probs.iter().sum();
        let p = TripletProbabilities {
            probs: probs.map(|v| v / z),
            pair_similarities: [0.0; 3],
        };
        let q = TripletProbabilities {
            probs: p.probs.map(|v| (3.0 * v).exp() - 7.0),
            pair_similarities: [0.0; 3],
        };
        assert_eq!(predict_oddball(&p), predict_oddball(&q));
    }
}

proptest! {
    #[test]
    fn permuting_images_permutes_probabilities(seed in 0u64..5000, perm_ix in 0usize..6) {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = PERMS[perm_ix];
        let inst = random_instance(seed, 5, 2, 1, 1.0, ModelOptions::default());
        let t = &inst.batch[0];
        let base = inst.params.probs_for(&inst.store, t).unwrap();
        let permuted = inst.params.probs_for(&inst.store, &t.permuted(perm)).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            prop_assert!((permuted.probs[k] - base.probs[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_is_psd_and_symmetric(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(seed, 7, 3, 1, 1.0, ModelOptions::default());
        let bc = inst.params.context_matrix(inst.store.lookup(3).unwrap()).unwrap();
        let u = vec_in(&mut rng, 7);
        let v = vec_in(&mut rng, 7);
        prop_assert!(similarity(&bc, &u, &u) >= 0.0);
        prop_assert!((similarity(&bc, &u, &v) - similarity(&bc, &v, &u)).abs() <= 1e-12);
        let explicit = explicit_similarity(&bc, &u, &v);
        prop_assert!((similarity(&bc, &u, &v) - explicit).abs() <= 1e-8 * explicit.abs().max(1.0));
        let norm = linalg::norm(&bc.project(&u));
        prop_assert!((similarity(&bc, &u, &u) - norm * norm).abs() < 1e-12);
    }
}

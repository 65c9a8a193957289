use ctxsim::dataset::{select_split, stratified_split_keys, ContextTriplet, Split, SplitRatios};
use ctxsim::model::ModelKind;
use ctxsim::synthetic::{gen_ground_truth, sample_dataset, SyntheticData, SyntheticSpec};
use ctxsim::training::{grid_search, model_accuracy, train, Exec, Grid, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data(n_trials: usize, seed: u64) -> (SyntheticData, Vec<ContextTriplet>, Vec<ContextTriplet>) {
    let spec = SyntheticSpec {
        d: 8,
        r_true: 2,
        n_images: 60,
        n_clusters: 6,
        n_trials,
        n_participants: 10,
        seed,
        ..Default::default()
    };
    let truth = gen_ground_truth(&spec).unwrap();
    let mut data = sample_dataset(&spec, &truth).unwrap();
    let keys: Vec<_> = data
        .triplets
        .iter()
        .map(|t| (t.source_trial_id, t.participant_id))
        .collect();
    let split = stratified_split_keys(&keys, SplitRatios::default(), seed).unwrap();
    split.tag(&mut data.triplets).unwrap();
    let tr = select_split(&data.triplets, Split::Train);
    let va = select_split(&data.triplets, Split::Val);
    (data, tr, va)
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        learning_rate: 0.2,
        batch_size: 32,
        rank: 2,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_in_seed() {
    let (data, tr, va) = small_data(1500, 1);
    let a = train(&config(), &tr, &va, &data.store).unwrap();
    let b = train(&config(), &tr, &va, &data.store).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    let c = train(
        &TrainConfig {
            exec: Exec::ParallelOrdered,
            ..config()
        },
        &tr,
        &va,
        &data.store,
    )
    .unwrap();
    assert_eq!(a.final_params, c.final_params);
    let other = train(&TrainConfig { seed: 5, ..config() }, &tr, &va, &data.store).unwrap();
    assert_ne!(a.final_params, other.final_params);
}

#[test]
fn training_reduces_loss_and_beats_chance() {
    let (data, tr, va) = small_data(3000, 2);
    let out = train(&TrainConfig { epochs: 15, ..config() }, &tr, &va, &data.store).unwrap();
    let h = &out.history;
    assert_eq!(h.epochs.len(), 16);
    assert!(h.last().unwrap().loss < h.epochs[0].loss);
    assert!((h.epochs[0].nll - 3f64.ln()).abs() < 0.05);
    assert!(h.best().unwrap().val_accuracy > 0.45);
    let best = h.epochs.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(h.best().unwrap().val_accuracy, best);
    let acc = model_accuracy(&out.params, &va, &data.store, Exec::Serial).unwrap();
    assert_eq!(acc, best);
    let csv = h.to_csv();
    assert!(csv.starts_with("epoch,loss,nll,reg_w,reg_a,val_acc\n"));
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let (data, mut tr, mut va) = small_data(3000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in tr.iter_mut().chain(va.iter_mut()) {
        t.oddball_index = rng.random_range(0..3);
    }
    let out = train(&config(), &tr, &va, &data.store).unwrap();
    let acc = model_accuracy(&out.final_params, &va, &data.store, Exec::Serial).unwrap();
    let sd = (2.0 / 9.0 / va.len() as f64).sqrt();
    assert!((acc - 1.0 / 3.0).abs() < 4.0 * sd, "accuracy {acc} on {} labels", va.len());
}

#[test]
fn empty_sets_and_bad_configs_are_rejected() {
    let (data, tr, va) = small_data(200, 4);
    assert!(train(&config(), &[], &va, &data.store).is_err());
    assert!(train(&TrainConfig { tau: 0.0, ..config() }, &tr, &va, &data.store).is_err());
    assert!(train(&TrainConfig { batch_size: 0, ..config() }, &tr, &va, &data.store).is_err());
    let no_val = train(&config(), &tr, &[], &data.store).unwrap();
    assert_eq!(no_val.params, no_val.final_params);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let (data, tr, va) = small_data(400, 5);
    let err = train(&TrainConfig { learning_rate: 1e12, ..config() }, &tr, &va, &data.store);
    assert!(matches!(err, Err(ctxsim::training::TrainError::Diverged { .. })));
}

#[test]
fn grid_search_covers_grid_and_picks_argmax() {
    assert_eq!(Grid::default().len(), 36);
    assert_eq!(Grid::default().configs(&config()).len(), 36);
    let (data, tr, va) = small_data(800, 6);
    let base = TrainConfig { epochs: 3, ..config() };
    let single = grid_search(&base, &Grid::singleton(&base), &tr, &va, &data.store, false).unwrap();
    let direct = train(&base, &tr, &va, &data.store).unwrap();
    assert_eq!(single.results.len(), 1);
    assert_eq!(single.best_result().unwrap().outcome.as_ref().unwrap().params, direct.params);

    let grid = Grid {
        ranks: vec![1, 2],
        lambda1: vec![1e-4],
        lambda2: vec![1e-5, 1e-3],
        tau: vec![1.0, 5.0],
    };
    let serial = grid_search(&base, &grid, &tr, &va, &data.store, false).unwrap();
    let parallel = grid_search(&base, &grid, &tr, &va, &data.store, true).unwrap();
    assert_eq!(serial.results.len(), 8);
    let accs: Vec<f64> = serial.results.iter().map(|r| r.val_accuracy.unwrap()).collect();
    let max = accs.iter().copied().fold(f64::MIN, f64::max);
    let first_max = accs.iter().position(|&a| a == max).unwrap();
    assert_eq!(serial.best, Some(first_max));
    assert_eq!(serial.best, parallel.best);
    assert_eq!(serial.to_csv(), parallel.to_csv());
    assert_eq!(serial.to_csv().lines().count(), 9);
}

#[test]
fn context_insensitive_training_runs() {
    let (data, tr, va) = small_data(600, 7);
    let out = train(
        &TrainConfig {
            kind: ModelKind::ContextInsensitive,
            ..config()
        },
        &tr,
        &va,
        &data.store,
    )
    .unwrap();
    assert_eq!(out.params.rank, 0);
    assert!(out.params.m.is_empty());
}

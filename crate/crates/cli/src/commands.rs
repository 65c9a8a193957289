use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ctxsim::analysis::{compute_rsm, project_images};
use ctxsim::dataset::{
    expand_to_triplets, filter_class_collisions, parse_trials, read_triplets, select_split,
    shuffle_image_order, stratified_split, stratified_split_keys, write_split_assignment,
    write_triplets,
};
use ctxsim::evaluation::{
    accuracy, paired_bootstrap, predict_all, upper_bound, Prediction, Predictor, UpperBound,
};
use ctxsim::model::checkpoint::encode_checkpoint;
use ctxsim::model::{Baseline, ModelOptions};
use ctxsim::synthetic::{bayes_accuracy, gen_ground_truth, sample_dataset};
use ctxsim::training::{grid_search, Exec, Grid, TrainError, TrainOutcome};
use ctxsim::{
    load_checkpoint, load_embeddings, CheckpointMeta, ClassMap, ContextTriplet, EmbeddingStore,
    Error, ModelParams, PredictionVector, Result, Split, SplitRatios, SyntheticSpec, TrainConfig,
    TrainHistory,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::{io_err, manifest_path_for, write_atomic, Recorder};
use crate::{
    BaselineArg, BootstrapArgs, ConvertArgs, DataArgs, EvalArgs, GridArgs, OptimArgs, PcaArgs,
    RatioArgs, RsmArgs, SplitArgs, SynthArgs, TrainArgs, UpperBoundArgs, ViewArgs,
};

pub struct Context {
    pub seed: u64,
    pub threads: usize,
}

impl Context {
    fn exec(&self) -> Exec {
        if self.threads > 1 {
            Exec::ParallelOrdered
        } else {
            Exec::Serial
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn ratios(a: &RatioArgs) -> Result<SplitRatios> {
    SplitRatios::new(a.train_ratio, a.val_ratio, a.test_ratio)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_output(rec: &mut Recorder, path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)?;
    rec.output(path);
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("plain rows serialize");
    }
    w.into_inner().expect("in-memory writer")
}

fn json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("plain values serialize");
    text.push('\n');
    text.into_bytes()
}

pub fn convert(ctx: &Context, a: &ConvertArgs) -> Result<()> {
    let mut rec = Recorder::new("convert", ctx.seed, ctx.threads, a);
    rec.input(&a.trials)?;
    rec.input(&a.classes)?;
    let ratios = ratios(&a.ratios)?;
    let trials = parse_trials(&a.trials)?;
    if trials.is_empty() {
        return Err(invalid("no trials"));
    }
    let classes = ClassMap::load(&a.classes)?;
    let expanded: Vec<ContextTriplet> = trials.iter().flat_map(expand_to_triplets).collect();
    let mut kept = filter_class_collisions(&expanded, &classes)?;
    let filtered = expanded.len() - kept.len();
    if kept.is_empty() {
        return Err(invalid("every triplet was removed by the class filter"));
    }
    // split over the trials that still contribute a triplet
    let retained: std::collections::HashSet<u64> =
        kept.iter().map(|t| t.source_trial_id).collect();
    let retained_trials: Vec<_> = trials
        .iter()
        .filter(|t| retained.contains(&t.trial_id))
        .cloned()
        .collect();
    let assignment = stratified_split(&retained_trials, ratios, ctx.seed)?;
    assignment.tag(&mut kept)?;
    if a.shuffle_order {
        kept = shuffle_image_order(&kept, ctx.seed);
    }
    write_triplets(&a.out, &kept)?;
    rec.output(&a.out);
    if let Some(path) = &a.assignment {
        write_split_assignment(path, &assignment)?;
        rec.output(path);
    }
    println!("trials in: {}", trials.len());
    println!("triplets out: {}", kept.len());
    println!("filtered: {filtered}");
    for s in Split::ALL {
        println!("{s} trials: {}", assignment.count(s));
    }
    rec.finish(&manifest_path_for(&a.out))
}

pub fn split(ctx: &Context, a: &SplitArgs) -> Result<()> {
    let mut rec = Recorder::new("split", ctx.seed, ctx.threads, a);
    let ratios = ratios(&a.ratios)?;
    let manifest_at;
    if let Some(path) = &a.triplets {
        rec.input(path)?;
        let out = a.out.as_ref().ok_or_else(|| invalid("--out is required with --triplets"))?;
        let mut triplets = read_triplets(path)?;
        let mut owner: BTreeMap<u64, u64> = BTreeMap::new();
        for t in &triplets {
            let p = *owner.entry(t.source_trial_id).or_insert(t.participant_id);
            if p != t.participant_id {
                return Err(invalid(format!(
                    "trial {} appears under participants {p} and {}",
                    t.source_trial_id, t.participant_id
                )));
            }
        }
        let keys: Vec<(u64, u64)> = owner.into_iter().collect();
        let assignment = stratified_split_keys(&keys, ratios, ctx.seed)?;
        assignment.tag(&mut triplets)?;
        write_triplets(out, &triplets)?;
        rec.output(out);
        if let Some(p) = &a.assignment {
            write_split_assignment(p, &assignment)?;
            rec.output(p);
        }
        for s in Split::ALL {
            println!("{s}: {} trials, {} triplets", assignment.count(s), select_split(&triplets, s).len());
        }
        manifest_at = manifest_path_for(out);
    } else {
        let path = a.trials.as_ref().expect("clap requires --trials or --triplets");
        rec.input(path)?;
        let out = a
            .assignment
            .as_ref()
            .ok_or_else(|| invalid("--assignment is required with --trials"))?;
        let trials = parse_trials(path)?;
        let assignment = stratified_split(&trials, ratios, ctx.seed)?;
        write_split_assignment(out, &assignment)?;
        rec.output(out);
        for s in Split::ALL {
            println!("{s}: {} trials", assignment.count(s));
        }
        manifest_at = manifest_path_for(out);
    }
    rec.finish(&manifest_at)
}

struct TrainingData {
    store: EmbeddingStore,
    train: Vec<ContextTriplet>,
    val: Vec<ContextTriplet>,
    data_hash: String,
}

fn load_training_data(rec: &mut Recorder, a: &DataArgs) -> Result<TrainingData> {
    let emb_hash = rec.input(&a.embeddings)?;
    let trip_hash = rec.input(&a.triplets)?;
    let store = load_embeddings(&a.embeddings)?;
    let triplets = read_triplets(&a.triplets)?;
    let train = select_split(&triplets, Split::Train);
    if train.is_empty() {
        return Err(invalid(
            "no triplets are tagged train; assign splits with `ctxsim split` first",
        ));
    }
    let val = select_split(&triplets, Split::Val);
    let data_hash = hex::encode(Sha256::digest(format!("{emb_hash}{trip_hash}")));
    Ok(TrainingData {
        store,
        train,
        val,
        data_hash,
    })
}

fn base_config(ctx: &Context, o: &OptimArgs) -> TrainConfig {
    TrainConfig {
        epochs: o.epochs,
        learning_rate: o.learning_rate,
        batch_size: o.batch_size,
        seed: ctx.seed,
        shuffle: !o.no_shuffle,
        kind: o.model.into(),
        options: ModelOptions {
            context_input: o.context_input.into(),
            mapper_bias: !o.no_mapper_bias,
        },
        init_sigma: o.init_sigma,
        exec: ctx.exec(),
        ..TrainConfig::default()
    }
}

fn checkpoint_meta(config: &TrainConfig, history: &TrainHistory, data_hash: &str) -> CheckpointMeta {
    CheckpointMeta {
        seed: Some(config.seed),
        lambda1: Some(config.lambda1),
        lambda2: Some(config.lambda2),
        epochs: Some(config.epochs),
        learning_rate: Some(config.learning_rate),
        batch_size: Some(config.batch_size),
        best_epoch: Some(history.best_epoch),
        data_hash: Some(data_hash.to_string()),
    }
}

fn print_history(history: &TrainHistory) {
    for e in &history.epochs {
        println!(
            "epoch {:>3}  loss {:.5}  nll {:.5}  val_acc {:.4}",
            e.epoch, e.loss, e.nll, e.val_accuracy
        );
    }
}

fn write_outcome(
    rec: &mut Recorder,
    dir: &Path,
    stem: &str,
    config: &TrainConfig,
    outcome: &TrainOutcome,
    data_hash: &str,
) -> Result<()> {
    let meta = checkpoint_meta(config, &outcome.history, data_hash);
    let ckpt = dir.join(format!("{stem}.ckpt"));
    write_output(rec, &ckpt, &encode_checkpoint(&outcome.params, &meta)?)?;
    let history_name = if stem == "model" {
        "history.csv".to_string()
    } else {
        format!("{stem}_history.csv")
    };
    write_output(rec, &dir.join(history_name), outcome.history.to_csv().as_bytes())
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let mut rec = Recorder::new("train", ctx.seed, ctx.threads, a);
    let data = load_training_data(&mut rec, &a.data)?;
    let config = TrainConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        rank: a.rank,
        tau: a.tau,
        ..base_config(ctx, &a.optim)
    };
    create_dir(&a.out_dir)?;
    match ctxsim::training::train(&config, &data.train, &data.val, &data.store) {
        Ok(outcome) => {
            print_history(&outcome.history);
            println!("best epoch: {}", outcome.history.best_epoch);
            write_outcome(&mut rec, &a.out_dir, "model", &config, &outcome, &data.data_hash)?;
            rec.finish(&a.out_dir.join("manifest.json"))
        }
        Err(TrainError::Diverged {
            epoch,
            batch,
            reason,
            last_finite,
            history,
        }) => {
            print_history(&history);
            let meta = checkpoint_meta(&config, &history, &data.data_hash);
            let ckpt = a.out_dir.join("last_finite.ckpt");
            write_output(&mut rec, &ckpt, &encode_checkpoint(&last_finite, &meta)?)?;
            write_output(&mut rec, &a.out_dir.join("history.csv"), history.to_csv().as_bytes())?;
            rec.finish(&a.out_dir.join("manifest.json"))?;
            Err(Error::Divergence(format!(
                "epoch {epoch}, batch {batch}: {reason}; last finite parameters in {}",
                ckpt.display()
            )))
        }
        Err(TrainError::Other(e)) => Err(e),
    }
}

pub fn gridsearch(ctx: &Context, a: &GridArgs) -> Result<()> {
    let mut rec = Recorder::new("gridsearch", ctx.seed, ctx.threads, a);
    let data = load_training_data(&mut rec, &a.data)?;
    let base = base_config(ctx, &a.optim);
    let grid = Grid {
        ranks: a.grid_rank.clone(),
        lambda1: a.grid_lambda1.clone(),
        lambda2: a.grid_lambda2.clone(),
        tau: a.grid_tau.clone(),
    };
    create_dir(&a.out_dir)?;
    let search = grid_search(&base, &grid, &data.train, &data.val, &data.store, ctx.threads > 1)?;
    write_output(&mut rec, &a.out_dir.join("grid.csv"), search.to_csv().as_bytes())?;
    for r in &search.results {
        let acc = r.val_accuracy.map_or("failed".to_string(), |v| format!("{v:.4}"));
        println!(
            "r={} lambda1={} lambda2={} tau={}  val_acc {acc}",
            r.config.rank, r.config.lambda1, r.config.lambda2, r.config.tau
        );
    }
    let best = search.best_result().ok_or_else(|| {
        let first = search.results.iter().find_map(|r| match &r.status {
            ctxsim::training::RunStatus::Failed(m) => Some(m.clone()),
            ctxsim::training::RunStatus::Ok => None,
        });
        invalid(format!(
            "no grid run succeeded ({})",
            first.unwrap_or_default()
        ))
    })?;
    let outcome = best.outcome.as_ref().expect("successful runs keep their outcome");
    println!(
        "best: r={} lambda1={} lambda2={} tau={}",
        best.config.rank, best.config.lambda1, best.config.lambda2, best.config.tau
    );
    write_outcome(&mut rec, &a.out_dir, "best", &best.config, outcome, &data.data_hash)?;
    rec.finish(&a.out_dir.join("manifest.json"))
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    triplet_id: usize,
    source_trial_id: u64,
    context_id: u64,
    predicted: usize,
    oddball_index: usize,
    correct: u8,
}

#[derive(Serialize)]
struct ReportRow<'a> {
    model: &'a str,
    split: &'a str,
    n_trials: usize,
    accuracy: f64,
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval", ctx.seed, ctx.threads, a);
    rec.input(&a.data.embeddings)?;
    rec.input(&a.data.triplets)?;
    let params: Option<ModelParams> = match &a.checkpoint {
        Some(path) => {
            rec.input(path)?;
            Some(load_checkpoint(path)?.0)
        }
        None => None,
    };
    let store = load_embeddings(&a.data.embeddings)?;
    let all = read_triplets(&a.data.triplets)?;
    let mut triplets = match a.split.split() {
        Some(s) => select_split(&all, s),
        None => all,
    };
    if triplets.is_empty() {
        return Err(invalid(format!("no triplets in split {}", a.split.as_str())));
    }
    if a.permute_order {
        triplets = shuffle_image_order(&triplets, ctx.seed);
    }
    let (predictor, default_name) = match (a.baseline, &params) {
        (Some(BaselineArg::FmCosine), _) => (Predictor::Baseline(Baseline::FmCosine), "fm_cosine".to_string()),
        (Some(BaselineArg::CitOnly), Some(p)) => (Predictor::Baseline(Baseline::CitOnly(p)), "cit_only".to_string()),
        (Some(BaselineArg::CitOnly), None) => {
            return Err(invalid("--baseline cit-only needs --checkpoint"))
        }
        (None, Some(p)) => (
            Predictor::Model(p),
            file_stem(a.checkpoint.as_deref().expect("params came from a checkpoint")),
        ),
        (None, None) => return Err(invalid("give --checkpoint, --baseline, or both")),
    };
    let name = a.name.clone().unwrap_or(default_name);
    let preds = predict_all(predictor, &triplets, &store)?;
    let acc = accuracy(&preds)?;

    let report = [ReportRow {
        model: &name,
        split: a.split.as_str(),
        n_trials: preds.len(),
        accuracy: acc,
    }];
    write_output(&mut rec, &a.report, &csv_bytes(&report))?;
    let rows: Vec<PredictionRow> = preds
        .iter()
        .zip(&triplets)
        .map(|(p, t)| PredictionRow {
            triplet_id: p.triplet_id,
            source_trial_id: t.source_trial_id,
            context_id: t.context_id,
            predicted: p.predicted,
            oddball_index: t.oddball_index,
            correct: u8::from(p.correct),
        })
        .collect();
    write_output(&mut rec, &a.predictions, &csv_bytes(&rows))?;
    println!("{name} on {}: accuracy {acc:.4} ({} triplets)", a.split.as_str(), preds.len());
    rec.finish(&manifest_path_for(&a.report))
}

fn read_predictions(path: &Path) -> Result<PredictionVector> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => invalid(format!("{}: {other:?}", path.display())),
    })?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: i + 2,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(Prediction {
            triplet_id: row.triplet_id,
            predicted: row.predicted,
            correct: row.correct != 0,
        });
    }
    Ok(PredictionVector(out))
}

#[derive(Serialize)]
struct BootstrapRow<'a> {
    model_a: &'a str,
    model_b: &'a str,
    delta: f64,
    ci_low: f64,
    ci_high: f64,
    n_boot: usize,
    seed: u64,
}

pub fn bootstrap(ctx: &Context, a: &BootstrapArgs) -> Result<()> {
    let mut rec = Recorder::new("bootstrap", ctx.seed, ctx.threads, a);
    rec.input(&a.a)?;
    rec.input(&a.b)?;
    let preds_a = read_predictions(&a.a)?;
    let preds_b = read_predictions(&a.b)?;
    let r = paired_bootstrap(&preds_a, &preds_b, a.n_boot, a.alpha, ctx.seed)?;
    let name_a = a.name_a.clone().unwrap_or_else(|| file_stem(&a.a));
    let name_b = a.name_b.clone().unwrap_or_else(|| file_stem(&a.b));
    let row = [BootstrapRow {
        model_a: &name_a,
        model_b: &name_b,
        delta: r.delta_mean,
        ci_low: r.ci_low,
        ci_high: r.ci_high,
        n_boot: r.n_boot,
        seed: r.seed,
    }];
    write_output(&mut rec, &a.out, &csv_bytes(&row))?;
    println!("{name_b} − {name_a}: {r}");
    rec.finish(&manifest_path_for(&a.out))
}

pub fn upperbound(ctx: &Context, a: &UpperBoundArgs) -> Result<()> {
    let mut rec = Recorder::new("upperbound", ctx.seed, ctx.threads, a);
    rec.input(&a.triplets)?;
    rec.input(&a.classes)?;
    let all = read_triplets(&a.triplets)?;
    let triplets = match a.split.split() {
        Some(s) => select_split(&all, s),
        None => all,
    };
    let classes = ClassMap::load(&a.classes)?;
    let value = match upper_bound(&triplets, &classes)? {
        UpperBound::Estimate(e) => {
            println!(
                "upper bound {:.4} over {} of {} class-level groups (response-weighted {:.4})",
                e.group_mean, e.groups_retained, e.groups_total, e.response_weighted_mean
            );
            serde_json::json!({
                "status": "estimate",
                "split": a.split.as_str(),
                "upper_bound": e.group_mean,
                "response_weighted": e.response_weighted_mean,
                "groups_total": e.groups_total,
                "groups_retained": e.groups_retained,
                "responses_retained": e.responses_retained,
            })
        }
        UpperBound::InsufficientData { groups_total } => {
            println!("insufficient data: none of {groups_total} class-level groups has two responses");
            serde_json::json!({
                "status": "insufficient_data",
                "split": a.split.as_str(),
                "groups_total": groups_total,
            })
        }
    };
    write_output(&mut rec, &a.out, &json_bytes(&value))?;
    rec.finish(&manifest_path_for(&a.out))
}

struct View {
    params: ModelParams,
    store: EmbeddingStore,
    checkpoint_hash: String,
}

fn load_view(rec: &mut Recorder, v: &ViewArgs) -> Result<View> {
    let checkpoint_hash = rec.input(&v.checkpoint)?;
    rec.input(&v.embeddings)?;
    Ok(View {
        params: load_checkpoint(&v.checkpoint)?.0,
        store: load_embeddings(&v.embeddings)?,
        checkpoint_hash,
    })
}

pub fn rsm(ctx: &Context, a: &RsmArgs) -> Result<()> {
    let v = &a.view;
    let mut rec = Recorder::new("rsm", ctx.seed, ctx.threads, a);
    let view = load_view(&mut rec, v)?;
    let mode = v.mode.into();
    let rsm = compute_rsm(&view.params, v.context, &v.ids, &view.store, mode)?;
    write_output(&mut rec, &v.out, rsm.to_csv().as_bytes())?;
    let meta = serde_json::json!({
        "context_id": v.context,
        "mode": mode.as_str(),
        "checkpoint_sha256": view.checkpoint_hash,
        "n_images": v.ids.len(),
    });
    write_output(&mut rec, &v.out.with_extension("json"), &json_bytes(&meta))?;
    println!("{}×{} similarity matrix written to {}", v.ids.len(), v.ids.len(), v.out.display());
    rec.finish(&manifest_path_for(&v.out))
}

pub fn pca(ctx: &Context, a: &PcaArgs) -> Result<()> {
    let v = &a.view;
    let mut rec = Recorder::new("pca", ctx.seed, ctx.threads, a);
    let view = load_view(&mut rec, v)?;
    let mode = v.mode.into();
    let coords = project_images(&view.params, v.context, &v.ids, &view.store, mode, a.components)?;
    write_output(&mut rec, &v.out, coords.to_csv().as_bytes())?;
    let meta = serde_json::json!({
        "context_id": v.context,
        "mode": mode.as_str(),
        "checkpoint_sha256": view.checkpoint_hash,
        "components": a.components,
        "explained_variance": coords.projection.explained_variance,
    });
    write_output(&mut rec, &v.out.with_extension("json"), &json_bytes(&meta))?;
    let ev: Vec<String> = coords
        .projection
        .explained_variance
        .iter()
        .map(|e| format!("{e:.3}"))
        .collect();
    println!("explained variance: {}", ev.join(", "));
    rec.finish(&manifest_path_for(&v.out))
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let mut rec = Recorder::new("synth", ctx.seed, ctx.threads, a);
    let spec = SyntheticSpec {
        d: a.d,
        r_true: a.r_true,
        n_images: a.n_images,
        n_clusters: a.n_clusters,
        cluster_spread: a.cluster_spread,
        n_trials: a.n_trials,
        n_participants: a.n_participants,
        seed: ctx.seed,
        kernel_scale: a.kernel_scale,
        transform_noise: a.transform_noise,
        context_free: a.context_free,
    };
    let truth = gen_ground_truth(&spec)?;
    let data = sample_dataset(&spec, &truth)?;
    create_dir(&a.out_dir)?;
    write_output(&mut rec, &a.out_dir.join("embeddings.csem"), &data.store.to_bytes()?)?;
    let triplets_path = a.out_dir.join("triplets.jsonl");
    write_triplets(&triplets_path, &data.triplets)?;
    rec.output(&triplets_path);
    write_output(&mut rec, &a.out_dir.join("classes.json"), data.classes.to_json().as_bytes())?;
    let meta = CheckpointMeta {
        seed: Some(ctx.seed),
        ..CheckpointMeta::default()
    };
    write_output(&mut rec, &a.out_dir.join("truth.ckpt"), &encode_checkpoint(&truth, &meta)?)?;
    let bayes = bayes_accuracy(&truth, &data.triplets, &data.store)?;
    println!(
        "{} images, {} triplets; bayes accuracy {bayes:.4}",
        data.store.len(),
        data.triplets.len()
    );
    rec.finish(&a.out_dir.join("manifest.json"))
}

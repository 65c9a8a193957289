use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ctxsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_trials(dir: &Path, lines: &[String]) -> PathBuf {
    let p = dir.join("trials.jsonl");
    fs::write(&p, lines.join("\n")).unwrap();
    p
}

fn trial(id: u64, participant: u64, query: u64, refs: [u64; 8], selected: [u64; 2]) -> String {
    serde_json::json!({
        "trial_id": id,
        "participant_id": participant,
        "query_id": query,
        "reference_ids": refs,
        "selected_ids": selected,
    })
    .to_string()
}

fn write_classes(dir: &Path, map: &[(u64, i64)]) -> PathBuf {
    let p = dir.join("classes.json");
    let obj: serde_json::Map<String, serde_json::Value> = map
        .iter()
        .map(|(id, c)| (id.to_string(), (*c).into()))
        .collect();
    fs::write(&p, serde_json::Value::Object(obj).to_string()).unwrap();
    p
}

fn count_after(text: &str, label: &str) -> usize {
    text.lines()
        .find_map(|l| l.strip_prefix(label))
        .unwrap_or_else(|| panic!("no `{label}` line in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn convert_one_trial_gives_six_triplets() {
    let dir = TempDir::new().unwrap();
    let trials = write_trials(dir.path(), &[trial(7, 1, 0, [1, 2, 3, 4, 5, 6, 7, 8], [1, 2])]);
    let classes = write_classes(dir.path(), &(0..9).map(|i| (i, i as i64)).collect::<Vec<_>>());
    let out = dir.path().join("triplets.jsonl");
    let o = ctxsim(&["convert", "--trials", s(&trials), "--classes", s(&classes), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(count_after(&text, "trials in:"), 1);
    assert_eq!(count_after(&text, "triplets out:"), 6);
    assert_eq!(count_after(&text, "filtered:"), 0);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 6);
    for l in &lines {
        assert_eq!(l["context_id"], 0);
        assert_eq!(l["oddball_index"], 2);
        assert!(l["split"].is_string());
    }
    assert!(out.with_extension("jsonl.manifest.json").exists());
}

#[test]
fn convert_counts_reconcile_with_collisions() {
    let dir = TempDir::new().unwrap();
    let lines: Vec<String> = (0..12)
        .map(|t| trial(t, t % 3, 0, [1, 2, 3, 4, 5, 6, 7, 8], [1, 2]))
        .collect();
    let trials = write_trials(dir.path(), &lines);
    // images 3 and 1 share a class, as do 5 and 6
    let classes = write_classes(
        dir.path(),
        &[(0, 0), (1, 1), (2, 2), (3, 1), (4, 4), (5, 5), (6, 5), (7, 7), (8, 8)],
    );
    let out = dir.path().join("t.jsonl");
    let o = ctxsim(&["convert", "--trials", s(&trials), "--classes", s(&classes), "--out", s(&out)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let (n_in, n_out, n_filt) = (
        count_after(&text, "trials in:"),
        count_after(&text, "triplets out:"),
        count_after(&text, "filtered:"),
    );
    assert_eq!(n_out + n_filt, 6 * n_in);
    assert_eq!(n_filt, 12);
}

#[test]
fn convert_rejects_empty_input() {
    let dir = TempDir::new().unwrap();
    let trials = write_trials(dir.path(), &[]);
    let classes = write_classes(dir.path(), &[(1, 1)]);
    let out = dir.path().join("t.jsonl");
    let o = ctxsim(&["convert", "--trials", s(&trials), "--classes", s(&classes), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no trials"));
}

#[test]
fn exit_codes_distinguish_io_and_validation() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let classes = write_classes(dir.path(), &[(1, 1)]);
    let out = dir.path().join("t.jsonl");
    let o = ctxsim(&["convert", "--trials", s(&missing), "--classes", s(&classes), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    let bad = write_trials(dir.path(), &[trial(1, 1, 0, [1, 2, 3, 4, 5, 6, 7, 8], [1, 9])]);
    let o = ctxsim(&["convert", "--trials", s(&bad), "--classes", s(&classes), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));

    let junk = dir.path().join("junk.csem");
    fs::write(&junk, b"XXXXnot an embedding file").unwrap();
    let o = ctxsim(&[
        "train", "--embeddings", s(&junk), "--triplets", s(&out), "--out-dir", s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

fn synth_and_split(dir: &Path, n_trials: &str) -> (PathBuf, PathBuf) {
    let syn = dir.join("syn");
    let o = ctxsim(&[
        "synth", "--out-dir", s(&syn), "--n-trials", n_trials, "--n-participants", "5",
        "--n-images", "60", "--d", "8", "--r-true", "2", "--seed", "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tagged = dir.join("tagged.jsonl");
    let o = ctxsim(&["split", "--triplets", s(&syn.join("triplets.jsonl")), "--out", s(&tagged)]);
    assert!(o.status.success());
    (syn.join("embeddings.csem"), tagged)
}

#[test]
fn divergent_training_exits_three_and_keeps_last_finite() {
    let dir = TempDir::new().unwrap();
    let (emb, tagged) = synth_and_split(dir.path(), "300");
    let run = dir.path().join("run");
    let o = ctxsim(&[
        "train", "--embeddings", s(&emb), "--triplets", s(&tagged), "--rank", "2",
        "--epochs", "3", "--learning-rate", "1e12", "--out-dir", s(&run),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("last_finite.ckpt").exists());
    assert!(run.join("manifest.json").exists());
}

#[test]
fn eval_is_byte_identical_across_runs_and_inputs_untouched() {
    let dir = TempDir::new().unwrap();
    let (emb, tagged) = synth_and_split(dir.path(), "600");
    let before = fs::read(&tagged).unwrap();
    let run = dir.path().join("run");
    let o = ctxsim(&[
        "train", "--embeddings", s(&emb), "--triplets", s(&tagged), "--rank", "2",
        "--epochs", "2", "--learning-rate", "0.2", "--out-dir", s(&run),
    ]);
    assert!(o.status.success());
    let mut outputs = Vec::new();
    for i in 0..2 {
        let report = dir.path().join(format!("report{i}.csv"));
        let preds = dir.path().join(format!("preds{i}.csv"));
        let o = ctxsim(&[
            "eval", "--embeddings", s(&emb), "--triplets", s(&tagged), "--checkpoint",
            s(&run.join("model.ckpt")), "--name", "cs", "--report", s(&report),
            "--predictions", s(&preds),
        ]);
        assert!(o.status.success());
        outputs.push((fs::read(&report).unwrap(), fs::read(&preds).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let report = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(report.starts_with("model,split,n_trials,accuracy\ncs,test,"));
    assert_eq!(fs::read(&tagged).unwrap(), before);
}

#[test]
fn bootstrap_reports_delta_and_interval() {
    let dir = TempDir::new().unwrap();
    let header = "triplet_id,source_trial_id,context_id,predicted,oddball_index,correct\n";
    let rows = |correct: &dyn Fn(usize) -> bool| -> String {
        let mut t = header.to_string();
        for i in 0..400 {
            t.push_str(&format!("{i},{i},0,0,0,{}\n", u8::from(correct(i))));
        }
        t
    };
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, rows(&|i| i % 2 == 0)).unwrap();
    fs::write(&b, rows(&|i| i % 4 != 3)).unwrap();
    let out = dir.path().join("boot.csv");
    let o = ctxsim(&["bootstrap", "--a", s(&a), "--b", s(&b), "--n-boot", "1000", "--out", s(&out)]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "model_a,model_b,delta,ci_low,ci_high,n_boot,seed");
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&fields[..2], &["a", "b"]);
    let (delta, lo, hi): (f64, f64, f64) =
        (fields[2].parse().unwrap(), fields[3].parse().unwrap(), fields[4].parse().unwrap());
    assert!(lo <= delta && delta <= hi);
    assert!((delta - 0.25).abs() < 0.02);
    assert!(stdout(&o).contains("Δ = 0.2"));

    let short = dir.path().join("short.csv");
    fs::write(&short, format!("{header}0,0,0,0,0,1\n")).unwrap();
    let o = ctxsim(&["bootstrap", "--a", s(&a), "--b", s(&short), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_documents_flags() {
    let o = ctxsim(&["train", "--help"]);
    let text = stdout(&o);
    for flag in ["--learning-rate", "--batch-size", "--lambda1", "--lambda2", "--rank", "--tau", "--seed", "--threads"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    assert!(text.contains("0.001"));
}

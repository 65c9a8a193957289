//! 8-choose-2 trial records and their expansion into triplet-with-context trials.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::ImageId;
use crate::error::{Error, Result};

pub const N_REFERENCES: usize = 8;
pub const N_SELECTED: usize = 2;
pub const TRIPLETS_PER_TRIAL: usize = N_REFERENCES - N_SELECTED;

/// Default train/val/test ratios.
pub const DEFAULT_SPLIT_RATIOS: SplitRatios = SplitRatios {
    train: 0.8,
    val: 0.1,
    test: 0.1,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub participant_id: u64,
    pub query_id: ImageId,
    pub reference_ids: Vec<ImageId>,
    pub selected_ids: Vec<ImageId>,
}

impl TrialRecord {
    pub fn validate(&self) -> Result<()> {
        if self.reference_ids.len() != N_REFERENCES {
            return Err(Error::validation(format!(
                "trial {}: expected {N_REFERENCES} reference ids, got {}",
                self.trial_id,
                self.reference_ids.len()
            )));
        }
        if self.selected_ids.len() != N_SELECTED {
            return Err(Error::validation(format!(
                "trial {}: expected {N_SELECTED} selected ids, got {}",
                self.trial_id,
                self.selected_ids.len()
            )));
        }
        let refs: HashSet<_> = self.reference_ids.iter().collect();
        if refs.len() != N_REFERENCES {
            return Err(Error::validation(format!(
                "trial {}: reference ids are not distinct",
                self.trial_id
            )));
        }
        if refs.contains(&self.query_id) {
            return Err(Error::validation(format!(
                "trial {}: query id {} appears among the references",
                self.trial_id, self.query_id
            )));
        }
        if self.selected_ids[0] == self.selected_ids[1] {
            return Err(Error::validation(format!(
                "trial {}: selected ids are not distinct",
                self.trial_id
            )));
        }
        if let Some(s) = self.selected_ids.iter().find(|s| !refs.contains(s)) {
            return Err(Error::validation(format!(
                "trial {}: selected id {s} is not a reference",
                self.trial_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split {other:?}"))),
        }
    }
}

/// One odd-one-out trial: three images judged in the context of a fourth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTriplet {
    pub context_id: ImageId,
    pub image_ids: [ImageId; 3],
    pub oddball_index: usize,
    pub source_trial_id: u64,
    pub participant_id: u64,
    #[serde(default)]
    pub split: Option<Split>,
}

impl ContextTriplet {
    pub fn validate(&self) -> Result<()> {
        let [p, q, r] = self.image_ids;
        if p == q || p == r || q == r {
            return Err(Error::validation(format!(
                "triplet from trial {}: image ids are not distinct",
                self.source_trial_id
            )));
        }
        if self.oddball_index > 2 {
            return Err(Error::validation(format!(
                "triplet from trial {}: oddball index {} out of range",
                self.source_trial_id, self.oddball_index
            )));
        }
        Ok(())
    }

    pub fn oddball_id(&self) -> ImageId {
        self.image_ids[self.oddball_index]
    }

    /// Reorder images so that position `i` holds the old image at `perm[i]`.
    /// The oddball index follows its image.
    pub fn permuted(&self, perm: [usize; 3]) -> ContextTriplet {
        debug_assert!({
            let mut p = perm;
            p.sort_unstable();
            p == [0, 1, 2]
        });
        let image_ids = perm.map(|i| self.image_ids[i]);
        let oddball_index = perm.iter().position(|&i| i == self.oddball_index).unwrap();
        ContextTriplet {
            image_ids,
            oddball_index,
            ..self.clone()
        }
    }
}

/// Expand one trial into six triplets: the selected pair in input order, then
/// one unselected reference, which is the oddball.
pub fn expand_to_triplets(trial: &TrialRecord) -> Vec<ContextTriplet> {
    let (a, b) = (trial.selected_ids[0], trial.selected_ids[1]);
    trial
        .reference_ids
        .iter()
        .filter(|id| !trial.selected_ids.contains(id))
        .map(|&u| ContextTriplet {
            context_id: trial.query_id,
            image_ids: [a, b, u],
            oddball_index: 2,
            source_trial_id: trial.trial_id,
            participant_id: trial.participant_id,
            split: None,
        })
        .collect()
}

/// Apply a seeded random permutation to each triplet's image order.
pub fn shuffle_image_order(triplets: &[ContextTriplet], seed: u64) -> Vec<ContextTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    triplets
        .iter()
        .map(|t| {
            let mut perm = [0, 1, 2];
            perm.shuffle(&mut rng);
            t.permuted(perm)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassMap(HashMap<ImageId, i64>);

impl ClassMap {
    pub fn new(map: HashMap<ImageId, i64>) -> Self {
        Self(map)
    }

    pub fn get(&self, id: ImageId) -> Option<i64> {
        self.0.get(&id).copied()
    }

    pub fn class_of(&self, id: ImageId) -> Result<i64> {
        self.get(id)
            .ok_or_else(|| Error::validation(format!("image id {id} has no class label")))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Parse a JSON object mapping ID strings to integer labels.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, i64> = serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("class map: {e}")))?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<ImageId>()
                    .map(|id| (id, v))
                    .map_err(|_| Error::validation(format!("class map key {k:?} is not an id")))
            })
            .collect::<Result<_>>()
            .map(Self)
    }

    /// Serialize with keys in ascending ID order.
    pub fn to_json(&self) -> String {
        let sorted: BTreeMap<ImageId, i64> = self.0.iter().map(|(&k, &v)| (k, v)).collect();
        let obj: serde_json::Map<String, serde_json::Value> = sorted
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.into()))
            .collect();
        serde_json::to_string_pretty(&obj).expect("map of integers serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

impl FromIterator<(ImageId, i64)> for ClassMap {
    fn from_iter<T: IntoIterator<Item = (ImageId, i64)>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Keep the triplets whose three images carry pairwise distinct class labels.
/// The context image is not checked.
pub fn filter_class_collisions(
    triplets: &[ContextTriplet],
    classes: &ClassMap,
) -> Result<Vec<ContextTriplet>> {
    let mut kept = Vec::with_capacity(triplets.len());
    for t in triplets {
        let [a, b, c] = t.image_ids.map(|id| classes.class_of(id));
        let (a, b, c) = (a?, b?, c?);
        if a != b && a != c && b != c {
            kept.push(t.clone());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::validation("split ratios must be positive"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Per-split counts for `n` items: floors first, remainder to train, val, test.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let ratios = [self.train, self.val, self.test];
        let mut counts = ratios.map(|r| ((n as f64) * r + 1e-9).floor() as usize);
        let mut assigned: usize = counts.iter().sum();
        // the floors can only undershoot, and by at most two
        let mut slot = 0;
        while assigned < n {
            counts[slot % 3] += 1;
            assigned += 1;
            slot += 1;
        }
        while assigned > n {
            let i = (0..3).rev().find(|&i| counts[i] > 0).unwrap();
            counts[i] -= 1;
            assigned -= 1;
        }
        counts
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        DEFAULT_SPLIT_RATIOS
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment(BTreeMap<u64, Split>);

impl SplitAssignment {
    pub fn get(&self, trial_id: u64) -> Option<Split> {
        self.0.get(&trial_id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, Split)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    pub fn count(&self, split: Split) -> usize {
        self.0.values().filter(|&&s| s == split).count()
    }

    /// Tag each triplet with the split of its source trial.
    pub fn tag(&self, triplets: &mut [ContextTriplet]) -> Result<()> {
        for t in triplets {
            t.split = Some(self.get(t.source_trial_id).ok_or_else(|| {
                Error::validation(format!("trial {} has no split", t.source_trial_id))
            })?);
        }
        Ok(())
    }
}

/// Participant-stratified split at the trial level.
///
/// Each participant's trials are shuffled with a generator keyed by
/// `(seed, participant_id)` and cut according to [`SplitRatios::counts`].
pub fn stratified_split(
    trials: &[TrialRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    let keys: Vec<(u64, u64)> = trials
        .iter()
        .map(|t| (t.trial_id, t.participant_id))
        .collect();
    stratified_split_keys(&keys, ratios, seed)
}

/// [`stratified_split`] over bare `(trial_id, participant_id)` pairs.
pub fn stratified_split_keys(
    keys: &[(u64, u64)],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment> {
    ratios.validate()?;
    if keys.is_empty() {
        return Err(Error::validation("no trials to split"));
    }
    let mut by_participant: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let mut seen = HashSet::with_capacity(keys.len());
    for &(trial, participant) in keys {
        if !seen.insert(trial) {
            return Err(Error::validation(format!("duplicate trial id {trial}")));
        }
        by_participant.entry(participant).or_default().push(trial);
    }
    let mut out = BTreeMap::new();
    for (participant, mut ids) in by_participant {
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(participant);
        ids.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.counts(ids.len());
        for (i, id) in ids.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            out.insert(id, split);
        }
    }
    Ok(SplitAssignment(out))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("plain records serialize");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a line-delimited JSON trials file, validating every record.
pub fn parse_trials(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    read_jsonl::<TrialRecord>(path.as_ref())?
        .into_iter()
        .map(|(line, t)| {
            t.validate().map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            Ok(t)
        })
        .collect()
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[TrialRecord]) -> Result<()> {
    write_jsonl(path.as_ref(), trials)
}

pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<ContextTriplet>> {
    read_jsonl::<ContextTriplet>(path.as_ref())?
        .into_iter()
        .map(|(line, t)| {
            t.validate().map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            Ok(t)
        })
        .collect()
}

pub fn write_triplets(path: impl AsRef<Path>, triplets: &[ContextTriplet]) -> Result<()> {
    write_jsonl(path.as_ref(), triplets)
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    trial_id: u64,
    split: Split,
}

pub fn write_split_assignment(path: impl AsRef<Path>, split: &SplitAssignment) -> Result<()> {
    let rows: Vec<SplitRow> = split
        .iter()
        .map(|(trial_id, split)| SplitRow { trial_id, split })
        .collect();
    write_jsonl(path.as_ref(), &rows)
}

pub fn read_split_assignment(path: impl AsRef<Path>) -> Result<SplitAssignment> {
    Ok(SplitAssignment(
        read_jsonl::<SplitRow>(path.as_ref())?
            .into_iter()
            .map(|(_, r)| (r.trial_id, r.split))
            .collect(),
    ))
}

/// Select the triplets tagged with `split`.
pub fn select_split(triplets: &[ContextTriplet], split: Split) -> Vec<ContextTriplet> {
    triplets
        .iter()
        .filter(|t| t.split == Some(split))
        .cloned()
        .collect()
}

//! Interaction ingestion, k-core filtering, per-user splitting, content
//! feature files, and the synthetic generator.
//!
//! Interactions travel as UTF-8 TSV (`user<TAB>item[<TAB>epoch-seconds]`,
//! `#` lines ignored). Internal indices are dense and assigned in first-seen
//! order, so loading the same file twice gives identical index maps.

mod features;
mod synth;

pub use features::{
    load_features, peek_feature_dim, save_features_binary, save_features_csv, FeatureMatrix,
};
pub use synth::{synth_generate, SyntheticSpec};

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::numkit::SeededRng;
use crate::{Error, Result};

/// Shared user/item index space: dense internal indices plus the external id
/// maps they came from.
#[derive(Debug, Clone, Default)]
pub struct IndexSpace {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    user_index: HashMap<String, u32>,
    item_index: HashMap<String, u32>,
}

impl IndexSpace {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn user_id(&self, u: u32) -> &str {
        &self.user_ids[u as usize]
    }

    pub fn item_id(&self, i: u32) -> &str {
        &self.item_ids[i as usize]
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn user_of(&self, external: &str) -> Option<u32> {
        self.user_index.get(external).copied()
    }

    pub fn item_of(&self, external: &str) -> Option<u32> {
        self.item_index.get(external).copied()
    }

    fn intern_user(&mut self, external: &str) -> u32 {
        if let Some(&u) = self.user_index.get(external) {
            return u;
        }
        let u = self.user_ids.len() as u32;
        self.user_ids.push(external.to_string());
        self.user_index.insert(external.to_string(), u);
        u
    }

    fn intern_item(&mut self, external: &str) -> u32 {
        if let Some(&i) = self.item_index.get(external) {
            return i;
        }
        let i = self.item_ids.len() as u32;
        self.item_ids.push(external.to_string());
        self.item_index.insert(external.to_string(), i);
        i
    }
}

/// Bag of deduplicated (user, item) implicit-feedback records over a dense
/// index space. Every user and item referenced by the space appears in at
/// least one record.
#[derive(Debug, Clone)]
pub struct InteractionSet {
    space: IndexSpace,
    records: Vec<(u32, u32)>,
}

impl InteractionSet {
    /// Build from external-id pairs, deduplicating and assigning dense
    /// indices in first-seen order.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "interaction set needs at least one record".into(),
            ));
        }
        let mut space = IndexSpace::default();
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(pairs.len());
        for (user, item) in pairs {
            let u = space.intern_user(user.as_ref());
            let i = space.intern_item(item.as_ref());
            if seen.insert((u, i)) {
                records.push((u, i));
            }
        }
        Ok(Self { space, records })
    }

    pub fn space(&self) -> &IndexSpace {
        &self.space
    }

    pub fn n_users(&self) -> usize {
        self.space.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.space.n_items()
    }

    pub fn records(&self) -> &[(u32, u32)] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Items per user, in record order.
    pub fn by_user(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for &(u, i) in &self.records {
            out[u as usize].push(i);
        }
        out
    }

    /// (user degrees, item degrees).
    pub fn degrees(&self) -> (Vec<usize>, Vec<usize>) {
        let mut du = vec![0usize; self.n_users()];
        let mut di = vec![0usize; self.n_items()];
        for &(u, i) in &self.records {
            du[u as usize] += 1;
            di[i as usize] += 1;
        }
        (du, di)
    }
}

/// Read interactions from TSV. Rows are `user<TAB>item[<TAB>epoch-seconds]`;
/// `#` lines and blank lines are skipped; duplicates collapse to one record.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let user = fields.next().unwrap_or("");
        let item = fields.next().unwrap_or("");
        let ts = fields.next();
        let parse_err = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: msg.to_string(),
        };
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("expected `user<TAB>item[<TAB>epoch-seconds]`"));
        }
        if let Some(ts) = ts {
            if ts.parse::<i64>().is_err() {
                return Err(parse_err("timestamp is not an integer"));
            }
        }
        if fields.next().is_some() {
            return Err(parse_err("too many fields"));
        }
        pairs.push((user.to_string(), item.to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::format(
            path.display().to_string(),
            "no interaction records",
        ));
    }
    InteractionSet::from_pairs(&pairs)
}

/// Write interactions as TSV in record order.
pub fn save_interactions(set: &InteractionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for &(u, i) in set.records() {
        out.push_str(set.space.user_id(u));
        out.push('\t');
        out.push_str(set.space.item_id(i));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Maximal subset in which every remaining user and item has degree >= k,
/// found by pruning to a fixpoint. Surviving records keep their order and
/// indices are re-densified.
pub fn kcore_filter(set: &InteractionSet, k: usize) -> Result<InteractionSet> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-core needs k >= 1".into()));
    }
    let mut alive: Vec<bool> = vec![true; set.records.len()];
    loop {
        let mut du = vec![0usize; set.n_users()];
        let mut di = vec![0usize; set.n_items()];
        for (idx, &(u, i)) in set.records.iter().enumerate() {
            if alive[idx] {
                du[u as usize] += 1;
                di[i as usize] += 1;
            }
        }
        let mut changed = false;
        for (idx, &(u, i)) in set.records.iter().enumerate() {
            if alive[idx] && (du[u as usize] < k || di[i as usize] < k) {
                alive[idx] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let survivors: Vec<(&str, &str)> = set
        .records
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(&(u, i), _)| (set.space.user_id(u), set.space.item_id(i)))
        .collect();
    if survivors.is_empty() {
        return Err(Error::EmptyAfterFiltering { k });
    }
    InteractionSet::from_pairs(&survivors)
}

/// How records are assigned to folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Shuffle and split each user's records independently.
    PerUser,
    /// Shuffle and split the whole record list; users left without a train
    /// record get one moved back from their held-out records.
    Global,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-user" => Ok(SplitMode::PerUser),
            "global" => Ok(SplitMode::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown split mode `{other}` (expected per-user or global)"
            ))),
        }
    }
}

/// One of the three folds of a [`DataSplit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fold {
    Train,
    Validation,
    Test,
}

/// Train/validation/test record views over one shared index space.
#[derive(Debug, Clone)]
pub struct DataSplit {
    space: IndexSpace,
    train: Vec<(u32, u32)>,
    validation: Vec<(u32, u32)>,
    test: Vec<(u32, u32)>,
    seed: u64,
}

/// A user's records in each fold.
#[derive(Debug, Clone, Default)]
pub struct UserFolds {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
}

impl DataSplit {
    pub fn space(&self) -> &IndexSpace {
        &self.space
    }

    pub fn n_users(&self) -> usize {
        self.space.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.space.n_items()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold(&self, fold: Fold) -> &[(u32, u32)] {
        match fold {
            Fold::Train => &self.train,
            Fold::Validation => &self.validation,
            Fold::Test => &self.test,
        }
    }

    /// Per-user item lists for all three folds.
    pub fn user_folds(&self) -> Vec<UserFolds> {
        let mut out = vec![UserFolds::default(); self.n_users()];
        for &(u, i) in &self.train {
            out[u as usize].train.push(i);
        }
        for &(u, i) in &self.validation {
            out[u as usize].validation.push(i);
        }
        for &(u, i) in &self.test {
            out[u as usize].test.push(i);
        }
        out
    }
}

/// Split with one tenth of each user's records to test, one tenth to
/// validation (floored), remainder to train. Users with fewer than three
/// records keep everything in train.
/// Stream tag separating split shuffles from other consumers of a seed.
const SPLIT_STREAM: u64 = 0x53504c4954;

pub fn split_811(set: &InteractionSet, seed: u64, mode: SplitMode) -> DataSplit {
    let mut rng = SeededRng::new(seed).fork(SPLIT_STREAM);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();

    match mode {
        SplitMode::PerUser => {
            let mut per_user = set.by_user();
            for (u, items) in per_user.iter_mut().enumerate() {
                let u = u as u32;
                let n = items.len();
                if n < 3 {
                    train.extend(items.iter().map(|&i| (u, i)));
                    continue;
                }
                rng.shuffle(items);
                let hold = n / 10;
                test.extend(items[..hold].iter().map(|&i| (u, i)));
                validation.extend(items[hold..2 * hold].iter().map(|&i| (u, i)));
                train.extend(items[2 * hold..].iter().map(|&i| (u, i)));
            }
        }
        SplitMode::Global => {
            let mut records = set.records().to_vec();
            rng.shuffle(&mut records);
            let hold = records.len() / 10;
            test = records[..hold].to_vec();
            validation = records[hold..2 * hold].to_vec();
            train = records[2 * hold..].to_vec();

            let mut has_train = vec![false; set.n_users()];
            for &(u, _) in &train {
                has_train[u as usize] = true;
            }
            for fold in [&mut validation, &mut test] {
                let mut idx = 0;
                while idx < fold.len() {
                    let (u, _) = fold[idx];
                    if !has_train[u as usize] {
                        has_train[u as usize] = true;
                        train.push(fold.remove(idx));
                    } else {
                        idx += 1;
                    }
                }
            }
        }
    }

    DataSplit {
        space: set.space().clone(),
        train,
        validation,
        test,
        seed,
    }
}

/// Persist a split as `train.tsv`, `valid.tsv`, `test.tsv` under `dir`.
pub fn save_split(split: &DataSplit, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (name, records) in [
        ("train.tsv", &split.train),
        ("valid.tsv", &split.validation),
        ("test.tsv", &split.test),
    ] {
        let path = dir.join(name);
        let mut file =
            fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = String::new();
        for &(u, i) in records {
            buf.push_str(split.space.user_id(u));
            buf.push('\t');
            buf.push_str(split.space.item_id(i));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Load a split previously written by [`save_split`]. The three files share
/// one index space, interned train-first so indices match training-time use.
pub fn load_split(dir: impl AsRef<Path>, seed: u64) -> Result<DataSplit> {
    let dir = dir.as_ref();
    let mut space = IndexSpace::default();
    let mut folds: [Vec<(u32, u32)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut seen = HashSet::new();
    for (slot, name) in ["train.tsv", "valid.tsv", "test.tsv"].iter().enumerate() {
        let path = dir.join(name);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut fields = line.split('\t');
            let (user, item) = match (fields.next(), fields.next()) {
                (Some(u), Some(i)) if !u.is_empty() && !i.is_empty() => (u, i),
                _ => {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: "expected `user<TAB>item`".into(),
                    })
                }
            };
            let u = space.intern_user(user);
            let i = space.intern_item(item);
            if !seen.insert((u, i)) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("record ({user}, {item}) appears in more than one fold"),
                });
            }
            folds[slot].push((u, i));
        }
    }
    let [train, validation, test] = folds;
    if train.is_empty() {
        return Err(Error::format(
            dir.join("train.tsv").display().to_string(),
            "empty train fold",
        ));
    }
    let mut has_train = vec![false; space.n_users()];
    for &(u, _) in &train {
        has_train[u as usize] = true;
    }
    if let Some(u) = has_train.iter().position(|&h| !h) {
        return Err(Error::InvalidArgument(format!(
            "user {} has no train records",
            space.user_id(u as u32)
        )));
    }
    Ok(DataSplit {
        space,
        train,
        validation,
        test,
        seed,
    })
}

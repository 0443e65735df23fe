//! Positive-only interaction logs.
//!
//! Ids are kept exactly as they appear in the input files, so `num_users`
//! and `num_items` are `max id + 1` and gaps are allowed. Every split is a
//! per-user sorted, deduplicated item list.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type UserId = u32;
pub type ItemId = u32;

/// On-disk layout of an interaction file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user item item ...`, one line per user.
    AdjacencyText,
    /// `user,item` rows with an optional header.
    TripleCsv,
}

impl InputFormat {
    fn extension(self) -> &'static str {
        match self {
            InputFormat::AdjacencyText => "txt",
            InputFormat::TripleCsv => "csv",
        }
    }
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacency-text" | "adjacency" | "txt" => Ok(InputFormat::AdjacencyText),
            "triple-csv" | "csv" => Ok(InputFormat::TripleCsv),
            other => Err(Error::Config(format!("unknown input format `{other}`"))),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputFormat::AdjacencyText => "adjacency-text",
            InputFormat::TripleCsv => "triple-csv",
        })
    }
}

/// Which held-out split to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "val" | "valid" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Users, items and their positive-only train/validation/test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    train: Vec<Vec<ItemId>>,
    validation: Vec<Vec<ItemId>>,
    test: Vec<Vec<ItemId>>,
    item_popularity: Vec<u32>,
    user_prior: Vec<f64>,
}

fn normalise(lists: &mut [Vec<ItemId>]) {
    for l in lists.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
}

/// Removes from `target` every item already present in `reference` (both sorted).
fn subtract_sorted(target: &mut Vec<ItemId>, reference: &[ItemId]) {
    if reference.is_empty() {
        return;
    }
    target.retain(|i| reference.binary_search(i).is_err());
}

fn pad(lists: &mut Vec<Vec<ItemId>>, n: usize) {
    if lists.len() < n {
        lists.resize_with(n, Vec::new);
    }
}

impl InteractionDataset {
    /// Builds a dataset from per-user item lists.
    ///
    /// Lists are sorted and deduplicated. An item present in train is dropped
    /// from validation and test; an item present in validation is dropped from
    /// test. `num_users`/`num_items` grow to cover every id seen.
    pub fn from_splits(
        num_users: usize,
        num_items: usize,
        mut train: Vec<Vec<ItemId>>,
        mut validation: Vec<Vec<ItemId>>,
        mut test: Vec<Vec<ItemId>>,
    ) -> Result<Self> {
        let num_users = num_users.max(train.len()).max(validation.len()).max(test.len());
        let max_item = train
            .iter()
            .chain(validation.iter())
            .chain(test.iter())
            .flat_map(|l| l.iter())
            .map(|&i| i as usize + 1)
            .max()
            .unwrap_or(0);
        let num_items = num_items.max(max_item);
        if num_users > u32::MAX as usize || num_items > u32::MAX as usize {
            return Err(Error::InvalidInput("id space exceeds u32".into()));
        }

        for lists in [&mut train, &mut validation, &mut test] {
            pad(lists, num_users);
            normalise(lists);
        }
        for u in 0..num_users {
            let (tr, va) = (&train[u], &mut validation[u]);
            subtract_sorted(va, tr);
            let te = &mut test[u];
            subtract_sorted(te, &train[u]);
            subtract_sorted(te, &validation[u]);
        }

        let mut ds = InteractionDataset {
            num_users,
            num_items,
            train,
            validation,
            test,
            item_popularity: Vec::new(),
            user_prior: Vec::new(),
        };
        ds.refresh_statistics();
        Ok(ds)
    }

    /// Builds a train-only dataset from `(user, item)` pairs.
    pub fn from_pairs(pairs: &[(UserId, ItemId)]) -> Result<Self> {
        let mut train: Vec<Vec<ItemId>> = Vec::new();
        for &(u, i) in pairs {
            pad(&mut train, u as usize + 1);
            train[u as usize].push(i);
        }
        Self::from_splits(0, 0, train, Vec::new(), Vec::new())
    }

    fn refresh_statistics(&mut self) {
        let mut pop = vec![0u32; self.num_items];
        for items in &self.train {
            for &i in items {
                pop[i as usize] += 1;
            }
        }
        self.item_popularity = pop;
        self.user_prior = crate::trainer::estimate_priors(self);
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Train positives `I_u^+` of a user, sorted ascending.
    pub fn train_items(&self, user: UserId) -> &[ItemId] {
        &self.train[user as usize]
    }

    pub fn validation_items(&self, user: UserId) -> &[ItemId] {
        &self.validation[user as usize]
    }

    pub fn test_items(&self, user: UserId) -> &[ItemId] {
        &self.test[user as usize]
    }

    pub fn split_items(&self, split: Split, user: UserId) -> &[ItemId] {
        match split {
            Split::Validation => self.validation_items(user),
            Split::Test => self.test_items(user),
        }
    }

    pub fn train(&self) -> &[Vec<ItemId>] {
        &self.train
    }

    /// Number of train users holding each item, `|U_i^+|`.
    pub fn item_popularity(&self) -> &[u32] {
        &self.item_popularity
    }

    /// Per-user class prior `|I_u^+| / |I|` over train positives.
    pub fn user_prior(&self) -> &[f64] {
        &self.user_prior
    }

    pub fn train_interactions(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }

    pub fn total_interactions(&self) -> usize {
        self.train_interactions()
            + self.validation.iter().map(Vec::len).sum::<usize>()
            + self.test.iter().map(Vec::len).sum::<usize>()
    }

    /// True for users without any train positive. They stay in the dataset
    /// but are never sampled for training.
    pub fn is_cold(&self, user: UserId) -> bool {
        self.train[user as usize].is_empty()
    }

    /// Users with at least one train positive, ascending.
    pub fn eligible_users(&self) -> Vec<UserId> {
        (0..self.num_users as UserId).filter(|&u| !self.is_cold(u)).collect()
    }

    pub fn has_split(&self, split: Split) -> bool {
        let lists = match split {
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        };
        lists.iter().any(|l| !l.is_empty())
    }

    /// Replaces the test split.
    pub fn with_test(self, test: Vec<Vec<ItemId>>) -> Result<Self> {
        Self::from_splits(self.num_users, self.num_items, self.train, self.validation, test)
    }

    /// Moves `⌈val_fraction·|I_u^+|⌉` train positives of every user into the
    /// validation split. Users with a single positive keep it, and at least
    /// one positive always stays in train.
    pub fn split_holdout(&self, val_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = self.train.clone();
        let mut validation = self.validation.clone();
        for (items, val) in train.iter_mut().zip(validation.iter_mut()) {
            let n = items.len();
            if n <= 1 || val_fraction == 0.0 {
                continue;
            }
            // Guard against products such as 0.1 * 30 = 3.0000000000000004.
            let k = ((val_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let k = k.min(n - 1);
            if k == 0 {
                continue;
            }
            let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            for &p in picked.iter().rev() {
                val.push(items.remove(p));
            }
        }
        Self::from_splits(self.num_users, self.num_items, train, validation, self.test.clone())
    }

    pub fn stats(&self) -> DatasetStats {
        let cells = self.num_users as f64 * self.num_items as f64;
        let interactions = self.total_interactions();
        DatasetStats {
            users: self.num_users,
            items: self.num_items,
            interactions,
            train_interactions: self.train_interactions(),
            density: if cells > 0.0 { interactions as f64 / cells } else { 0.0 },
        }
    }

    /// Remaps users and items that occur in any split to dense ids.
    pub fn compact(&self) -> (Self, IdMap) {
        let mut item_seen = vec![false; self.num_items];
        let mut users = Vec::new();
        for u in 0..self.num_users {
            let any = [&self.train[u], &self.validation[u], &self.test[u]];
            if any.iter().any(|l| !l.is_empty()) {
                users.push(u as UserId);
            }
            for l in any {
                for &i in l {
                    item_seen[i as usize] = true;
                }
            }
        }
        let items: Vec<ItemId> = (0..self.num_items as ItemId)
            .filter(|&i| item_seen[i as usize])
            .collect();
        let mut item_index = vec![u32::MAX; self.num_items];
        for (new, &old) in items.iter().enumerate() {
            item_index[old as usize] = new as ItemId;
        }
        let remap = |lists: &[Vec<ItemId>]| -> Vec<Vec<ItemId>> {
            users
                .iter()
                .map(|&u| lists[u as usize].iter().map(|&i| item_index[i as usize]).collect())
                .collect()
        };
        let ds = Self::from_splits(
            users.len(),
            items.len(),
            remap(&self.train),
            remap(&self.validation),
            remap(&self.test),
        )
        .expect("remapped ids are dense and in range");
        (ds, IdMap { users, items })
    }

    /// Counts plus a SHA-256 over the canonical content of every split.
    pub fn fingerprint(&self) -> DatasetFingerprint {
        let mut hasher = Sha256::new();
        hasher.update((self.num_users as u64).to_le_bytes());
        hasher.update((self.num_items as u64).to_le_bytes());
        for lists in [&self.train, &self.validation, &self.test] {
            for items in lists {
                hasher.update((items.len() as u64).to_le_bytes());
                for &i in items {
                    hasher.update(i.to_le_bytes());
                }
            }
        }
        DatasetFingerprint {
            users: self.num_users,
            items: self.num_items,
            train_interactions: self.train_interactions(),
            validation_interactions: self.validation.iter().map(Vec::len).sum(),
            test_interactions: self.test.iter().map(Vec::len).sum(),
            content_sha256: hex::encode(hasher.finalize()),
        }
    }

    /// Writes one split in adjacency-text form, one line per user including
    /// users without items.
    pub fn write_adjacency(&self, path: &Path, split: Option<Split>) -> Result<()> {
        let lists = match split {
            None => &self.train,
            Some(Split::Validation) => &self.validation,
            Some(Split::Test) => &self.test,
        };
        write_adjacency_lists(path, lists)
    }
}

pub(crate) fn write_adjacency_lists(path: &Path, lists: &[Vec<ItemId>]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for (u, items) in lists.iter().enumerate() {
            write!(w, "{u}")?;
            for i in items {
                write!(w, " {i}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Dense-to-original id tables produced by [`InteractionDataset::compact`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMap {
    pub users: Vec<UserId>,
    pub items: Vec<ItemId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train_interactions: usize,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub users: usize,
    pub items: usize,
    pub train_interactions: usize,
    pub validation_interactions: usize,
    pub test_interactions: usize,
    pub content_sha256: String,
}

fn parse_id(token: &str, line: usize, what: &str) -> Result<u32> {
    token.parse::<u32>().map_err(|_| Error::Parse {
        line,
        message: format!("expected non-negative integer {what}, found `{token}`"),
    })
}

/// Reads per-user item lists. Users listed without items are kept.
pub fn read_lists<R: BufRead>(reader: R, format: InputFormat) -> Result<Vec<Vec<ItemId>>> {
    let mut lists: Vec<Vec<ItemId>> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match format {
            InputFormat::AdjacencyText => {
                let mut tokens = line.split_whitespace();
                let user = parse_id(tokens.next().unwrap_or_default(), lineno, "user id")?;
                pad(&mut lists, user as usize + 1);
                for t in tokens {
                    let item = parse_id(t, lineno, "item id")?;
                    lists[user as usize].push(item);
                }
            }
            InputFormat::TripleCsv => {
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                if fields.len() < 2 {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("expected `user,item`, found `{line}`"),
                    });
                }
                if lineno == 1 && fields[0].parse::<u32>().is_err() {
                    // header row
                    continue;
                }
                let user = parse_id(fields[0], lineno, "user id")?;
                let item = parse_id(fields[1], lineno, "item id")?;
                pad(&mut lists, user as usize + 1);
                lists[user as usize].push(item);
            }
        }
    }
    Ok(lists)
}

fn read_lists_from(path: &Path, format: InputFormat) -> Result<Vec<Vec<ItemId>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_lists(BufReader::new(file), format)
}

/// Loads a single interaction file as the train split.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<InteractionDataset> {
    let train = read_lists_from(path, format)?;
    InteractionDataset::from_splits(0, 0, train, Vec::new(), Vec::new())
}

/// Loads `train.<ext>` plus optional `val.<ext>` and `test.<ext>` from a
/// directory, where `<ext>` is `txt` for adjacency text and `csv` for
/// triples. A plain file path is loaded as train only.
pub fn load_dataset(path: &Path, format: InputFormat) -> Result<InteractionDataset> {
    if path.is_file() {
        return load_interactions(path, format);
    }
    if !path.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset path not found"),
        ));
    }
    let ext = format.extension();
    let optional = |stem: &str| -> Result<Vec<Vec<ItemId>>> {
        let p = path.join(format!("{stem}.{ext}"));
        if p.is_file() {
            read_lists_from(&p, format)
        } else {
            Ok(Vec::new())
        }
    };
    let train = read_lists_from(&path.join(format!("train.{ext}")), format)?;
    let validation = optional("val")?;
    let test = optional("test")?;
    InteractionDataset::from_splits(0, 0, train, validation, test)
}

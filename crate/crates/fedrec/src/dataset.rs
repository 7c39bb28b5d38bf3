//! Bipartite user-item interaction data: loading, synthesis, degree queries.
//!
//! The on-disk format is one user per line, `uid iid1 iid2 ...`, ASCII
//! decimal, space separated, LF line endings. The item universe is
//! `1 + max(item id)` observed across the train and test files; the format
//! carries no header. Users must have at least one training interaction
//! because the propagation rule divides by the user degree.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use std::fs;
use std::path::Path;

/// Immutable bipartite adjacency with per-node degrees.
///
/// Safe to share read-only across client workers once constructed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionGraph {
    pub num_users: usize,
    pub num_items: usize,
    /// Per-user strictly ascending item ids.
    pub user_items: Vec<Vec<usize>>,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
}

impl InteractionGraph {
    /// Validates adjacency lists and computes both degree tables.
    ///
    /// Rejects empty user lists, out-of-range ids, and lists that are not
    /// strictly ascending (a repeated id is a duplicate edge).
    pub fn new(num_items: usize, user_items: Vec<Vec<usize>>) -> Result<Self> {
        if user_items.is_empty() {
            return Err(Error::Validation("graph has no users".into()));
        }
        let mut item_degree = vec![0usize; num_items];
        for (u, items) in user_items.iter().enumerate() {
            if items.is_empty() {
                return Err(Error::Validation(format!(
                    "user {u} has no training interactions"
                )));
            }
            for (pos, &t) in items.iter().enumerate() {
                if t >= num_items {
                    return Err(Error::Validation(format!(
                        "user {u}: item id {t} out of range (num_items {num_items})"
                    )));
                }
                if pos > 0 && items[pos - 1] >= t {
                    return Err(Error::Validation(format!(
                        "user {u}: item list not strictly ascending at item {t}"
                    )));
                }
                item_degree[t] += 1;
            }
        }
        let user_degree = user_items.iter().map(Vec::len).collect();
        Ok(Self {
            num_users: user_items.len(),
            num_items,
            user_items,
            user_degree,
            item_degree,
        })
    }

    /// Symmetric degree normalization `1 / sqrt(|N_t| * |N_u|)`.
    pub fn norm_coeff(&self, u: usize, t: usize) -> Result<f64> {
        if u >= self.num_users || t >= self.num_items {
            return Err(Error::Validation(format!(
                "norm_coeff out of range: user {u}, item {t}"
            )));
        }
        let du = self.user_degree[u];
        let dt = self.item_degree[t];
        if du == 0 || dt == 0 {
            return Err(Error::DegenerateNode(format!(
                "user {u} (degree {du}) / item {t} (degree {dt})"
            )));
        }
        Ok(coeff_from_degrees(du, dt))
    }

    /// Transposed adjacency: for each item, the ascending list of its users.
    pub fn item_users(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_items];
        for (u, items) in self.user_items.iter().enumerate() {
            for &t in items {
                out[t].push(u);
            }
        }
        out
    }

    /// Binary membership row for one user over the full item universe.
    pub fn user_row(&self, u: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_items];
        for &t in &self.user_items[u] {
            row[t] = 1.0;
        }
        row
    }
}

/// Degree normalization shared by every propagation site, so the federated
/// and centralized paths use the identical floating-point expression.
pub(crate) fn coeff_from_degrees(user_degree: usize, item_degree: usize) -> f64 {
    1.0 / ((item_degree as f64) * (user_degree as f64)).sqrt()
}

/// A training graph plus per-user held-out test items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: InteractionGraph,
    /// Per-user strictly ascending held-out item ids; may be empty.
    pub test_items: Vec<Vec<usize>>,
}

impl DatasetSplit {
    /// Validates that test lists are ascending, in range, and disjoint from
    /// the corresponding training lists.
    pub fn new(train: InteractionGraph, test_items: Vec<Vec<usize>>) -> Result<Self> {
        let split = Self { train, test_items };
        split.validate()?;
        Ok(split)
    }

    /// Re-checks the construction invariants; useful for splits assembled
    /// field-by-field.
    pub fn validate(&self) -> Result<()> {
        if self.test_items.len() != self.train.num_users {
            return Err(Error::Validation(format!(
                "test table covers {} users, train graph has {}",
                self.test_items.len(),
                self.train.num_users
            )));
        }
        for (u, items) in self.test_items.iter().enumerate() {
            for (pos, &t) in items.iter().enumerate() {
                if t >= self.train.num_items {
                    return Err(Error::Validation(format!(
                        "user {u}: test item id {t} out of range"
                    )));
                }
                if pos > 0 && items[pos - 1] >= t {
                    return Err(Error::Validation(format!(
                        "user {u}: test list not strictly ascending at item {t}"
                    )));
                }
                if self.train.user_items[u].binary_search(&t).is_ok() {
                    return Err(Error::Validation(format!(
                        "user {u}: item {t} appears in both train and test"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serializes back to the text format as (train, test) file contents.
    ///
    /// Users with no test items are omitted from the test file.
    pub fn to_text(&self) -> (String, String) {
        let train = serialize_lists(&self.train.user_items);
        let test = serialize_lists(&self.test_items);
        (train, test)
    }

    /// Writes both text files.
    pub fn save(&self, train_path: &Path, test_path: &Path) -> Result<()> {
        let (train, test) = self.to_text();
        fs::write(train_path, train)?;
        fs::write(test_path, test)?;
        Ok(())
    }
}

fn serialize_lists(lists: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for (u, items) in lists.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        out.push_str(&u.to_string());
        for &t in items {
            out.push(' ');
            out.push_str(&t.to_string());
        }
        out.push('\n');
    }
    out
}

/// Loads a train/test split from two text files.
pub fn load_split(train_path: &Path, test_path: &Path) -> Result<DatasetSplit> {
    let train_text = fs::read_to_string(train_path)?;
    let test_text = fs::read_to_string(test_path)?;
    load_split_text(
        &train_text,
        &test_text,
        &train_path.display().to_string(),
        &test_path.display().to_string(),
    )
}

/// Parses a split from in-memory text; origins label parse errors.
pub fn load_split_text(
    train_text: &str,
    test_text: &str,
    train_origin: &str,
    test_origin: &str,
) -> Result<DatasetSplit> {
    let train_lines = parse_lines(train_text, train_origin)?;
    let test_lines = parse_lines(test_text, test_origin)?;

    let num_users = train_lines.len();
    let mut train_lists = vec![Vec::new(); num_users];
    let mut seen = vec![false; num_users];
    for (uid, items) in train_lines {
        if uid >= num_users || seen[uid] {
            return Err(Error::Validation(format!(
                "train user ids must form the contiguous range 0..{num_users}, got {uid}"
            )));
        }
        seen[uid] = true;
        train_lists[uid] = sorted_unique(uid, items)?;
    }

    let mut test_lists = vec![Vec::new(); num_users];
    let mut seen_test = vec![false; num_users];
    for (uid, items) in test_lines {
        if uid >= num_users {
            return Err(Error::Validation(format!(
                "user {uid} present in test but absent in train"
            )));
        }
        if seen_test[uid] {
            return Err(Error::Validation(format!("duplicate test line for user {uid}")));
        }
        seen_test[uid] = true;
        test_lists[uid] = sorted_unique(uid, items)?;
    }

    let max_item = train_lists
        .iter()
        .chain(test_lists.iter())
        .filter_map(|l| l.last())
        .max();
    let num_items = max_item.map_or(0, |&m| m + 1);

    let train = InteractionGraph::new(num_items, train_lists)?;
    DatasetSplit::new(train, test_lists)
}

fn parse_lines(text: &str, origin: &str) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace().map(|tok| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                path: origin.to_string(),
                line: idx + 1,
                msg: format!("invalid integer {tok:?}"),
            })
        });
        let uid = fields.next().expect("non-empty line has a first token")?;
        let items = fields.collect::<Result<Vec<_>>>()?;
        out.push((uid, items));
    }
    Ok(out)
}

fn sorted_unique(uid: usize, mut items: Vec<usize>) -> Result<Vec<usize>> {
    items.sort_unstable();
    for w in items.windows(2) {
        if w[0] == w[1] {
            return Err(Error::Validation(format!(
                "user {uid}: duplicate edge to item {}",
                w[0]
            )));
        }
    }
    Ok(items)
}

/// Generates a planted-community bipartite split.
///
/// Users and items are partitioned into `communities` equal blocks; a user
/// interacts with items of its own block with probability `p_in` and with
/// other items with probability `p_out`. Per user, `ceil(holdout * degree)`
/// edges move to the test set, capped so at least one training edge remains.
/// A user drawn with no edges is redrawn a bounded number of times.
/// Deterministic for a fixed seed.
pub fn synth_blocks(
    users: usize,
    items: usize,
    communities: usize,
    p_in: f64,
    p_out: f64,
    holdout: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if users == 0 || items == 0 || communities == 0 {
        return Err(Error::Validation("users, items, communities must be positive".into()));
    }
    if users % communities != 0 || items % communities != 0 {
        return Err(Error::Validation(format!(
            "communities ({communities}) must divide users ({users}) and items ({items}) evenly"
        )));
    }
    if !(p_in > p_out && p_out >= 0.0 && p_in <= 1.0) {
        return Err(Error::Validation(format!(
            "need 0 <= p_out < p_in <= 1, got p_in {p_in}, p_out {p_out}"
        )));
    }
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::Validation(format!("holdout must be in [0, 1), got {holdout}")));
    }

    const MAX_RETRIES: usize = 1000;
    let users_per_comm = users / communities;
    let items_per_comm = items / communities;
    let mut rng = rng::stream(seed, "synth");

    let mut train_lists = Vec::with_capacity(users);
    let mut test_lists = Vec::with_capacity(users);
    for u in 0..users {
        let comm = u / users_per_comm;
        let mut row = Vec::new();
        let mut attempts = 0;
        while row.is_empty() {
            if attempts >= MAX_RETRIES {
                return Err(Error::Generation(format!(
                    "user {u} drew no edges after {MAX_RETRIES} attempts"
                )));
            }
            attempts += 1;
            for t in 0..items {
                let p = if t / items_per_comm == comm { p_in } else { p_out };
                if rng.random::<f64>() < p {
                    row.push(t);
                }
            }
        }

        let degree = row.len();
        let mut n_test = (holdout * degree as f64).ceil() as usize;
        if n_test >= degree {
            n_test = degree - 1;
        }
        let mut picked = rand::seq::index::sample(&mut rng, degree, n_test).into_vec();
        picked.sort_unstable();
        let mut test_row = Vec::with_capacity(n_test);
        for &pos in picked.iter().rev() {
            test_row.push(row.remove(pos));
        }
        test_row.reverse();
        train_lists.push(row);
        test_lists.push(test_row);
    }

    let train = InteractionGraph::new(items, train_lists)?;
    DatasetSplit::new(train, test_lists)
}

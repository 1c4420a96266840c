//! Interaction ingestion, filtering, binarization, train/test split and
//! negative sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawInteractions {
    pub records: Vec<Interaction>,
}

impl RawInteractions {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    MovielensDat,
    Csv,
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::MovielensDat => "movielens_dat",
            Format::Csv => "csv",
        })
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens_dat" | "dat" => Ok(Format::MovielensDat),
            "csv" => Ok(Format::Csv),
            other => Err(Error::config(format!("unknown dataset format `{other}`"))),
        }
    }
}

pub fn load_interactions(path: impl AsRef<Path>, format: Format) -> Result<RawInteractions> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, format)
}

pub fn parse_interactions(text: &str, format: Format) -> Result<RawInteractions> {
    let mut records = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match format {
        Format::MovielensDat => {
            for (no, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split("::").collect();
                if fields.len() != 4 {
                    return Err(parse_err(no, format!("expected 4 `::`-separated fields, found {}", fields.len())));
                }
                let ts = parse_timestamp(no, fields[3])?;
                records.push(record(no, fields[0], fields[1], fields[2], Some(ts))?);
            }
        }
        Format::Csv => {
            let Some((no, header)) = lines.next() else {
                return Ok(RawInteractions::default());
            };
            let cols: Vec<&str> = header.split(',').map(str::trim).collect();
            let with_ts = match cols.as_slice() {
                ["user", "item", "rating"] => false,
                ["user", "item", "rating", "timestamp"] => true,
                _ => {
                    return Err(parse_err(
                        no,
                        "expected header `user,item,rating[,timestamp]`".to_string(),
                    ))
                }
            };
            for (no, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').map(str::trim).collect();
                let ts = match (with_ts, fields.len()) {
                    (false, 3) | (true, 3) => None,
                    (true, 4) if fields[3].is_empty() => None,
                    (true, 4) => Some(parse_timestamp(no, fields[3])?),
                    (_, n) => return Err(parse_err(no, format!("unexpected field count {n}"))),
                };
                records.push(record(no, fields[0], fields[1], fields[2], ts)?);
            }
        }
    }
    Ok(RawInteractions { records })
}

fn parse_err(line: usize, message: String) -> Error {
    Error::Parse { line, message }
}

fn parse_timestamp(line: usize, s: &str) -> Result<i64> {
    s.trim()
        .parse::<i64>()
        .map_err(|_| parse_err(line, format!("timestamp `{s}` is not an integer")))
}

fn record(line: usize, user: &str, item: &str, rating: &str, timestamp: Option<i64>) -> Result<Interaction> {
    let user = user.trim();
    let item = item.trim();
    if user.is_empty() || item.is_empty() {
        return Err(parse_err(line, "empty user or item id".to_string()));
    }
    let rating: f64 = rating
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("rating `{rating}` is not numeric")))?;
    if !rating.is_finite() {
        return Err(parse_err(line, "rating is not finite".to_string()));
    }
    Ok(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        rating,
        timestamp,
    })
}

/// Filtered, binarized and densely indexed interactions.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Per user, sorted distinct item indices.
    pub positives: Vec<Vec<u32>>,
}

impl Preprocessed {
    pub fn num_interactions(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }
}

/// Binarizes and filters to a fixpoint where every user and item has at
/// least `min_count` distinct interactions. Indices follow first appearance
/// in `raw`.
pub fn preprocess(raw: &RawInteractions, min_count: usize) -> Result<Preprocessed> {
    if min_count == 0 {
        return Err(Error::contract("min_count must be >= 1"));
    }
    let mut pairs: Vec<(&str, &str)> = Vec::with_capacity(raw.len());
    let mut seen: HashSet<(&str, &str)> = HashSet::with_capacity(raw.len());
    for r in &raw.records {
        if seen.insert((&r.user, &r.item)) {
            pairs.push((&r.user, &r.item));
        }
    }
    filter_fixpoint(pairs, min_count)
}

fn filter_fixpoint(mut pairs: Vec<(&str, &str)>, min_count: usize) -> Result<Preprocessed> {
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for &(u, i) in &pairs {
            *users.entry(u).or_default() += 1;
            *items.entry(i).or_default() += 1;
        }
        let before = pairs.len();
        pairs.retain(|(u, i)| users[u] >= min_count && items[i] >= min_count);
        if pairs.len() == before {
            break;
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut positives: Vec<Vec<u32>> = Vec::new();
    for &(u, i) in &pairs {
        let ui = *user_index.entry(u).or_insert_with(|| {
            user_ids.push(u.to_string());
            positives.push(Vec::new());
            (user_ids.len() - 1) as u32
        });
        let ii = *item_index.entry(i).or_insert_with(|| {
            item_ids.push(i.to_string());
            (item_ids.len() - 1) as u32
        });
        positives[ui as usize].push(ii);
    }
    for p in &mut positives {
        p.sort_unstable();
    }
    Ok(Preprocessed {
        user_ids,
        item_ids,
        positives,
    })
}

/// Keeps the `n` users with the most interactions (ties by index) and reruns
/// the filtering fixpoint. Original first-appearance order is preserved.
pub fn subsample_most_active(pre: &Preprocessed, n: usize, min_count: usize) -> Result<Preprocessed> {
    if n >= pre.user_ids.len() {
        return Ok(pre.clone());
    }
    let mut order: Vec<usize> = (0..pre.user_ids.len()).collect();
    order.sort_by(|&a, &b| pre.positives[b].len().cmp(&pre.positives[a].len()).then(a.cmp(&b)));
    let mut keep = vec![false; pre.user_ids.len()];
    for &u in &order[..n] {
        keep[u] = true;
    }
    // Pairs ordered by original item index so that re-indexing preserves the
    // original relative item order; users are restored afterwards.
    let mut pairs = Vec::new();
    for (u, items) in pre.positives.iter().enumerate() {
        if keep[u] {
            for &i in items {
                pairs.push((i, u));
            }
        }
    }
    pairs.sort_unstable();
    let pairs: Vec<(&str, &str)> = pairs
        .into_iter()
        .map(|(i, u)| (pre.user_ids[u].as_str(), pre.item_ids[i as usize].as_str()))
        .collect();
    let mut out = filter_fixpoint(pairs, min_count)?;
    reorder_users(&mut out, pre);
    Ok(out)
}

fn reorder_users(out: &mut Preprocessed, pre: &Preprocessed) {
    let rank: HashMap<&str, usize> = pre.user_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let mut idx: Vec<usize> = (0..out.user_ids.len()).collect();
    idx.sort_by_key(|&i| rank[out.user_ids[i].as_str()]);
    out.user_ids = idx.iter().map(|&i| out.user_ids[i].clone()).collect();
    out.positives = idx.iter().map(|&i| std::mem::take(&mut out.positives[i])).collect();
}

/// Per-user train/test positives and sampled negatives, densely indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Sorted train positives per user.
    pub train: Vec<Vec<u32>>,
    /// Sorted held-out positives per user.
    pub test: Vec<Vec<u32>>,
    /// Sampled negatives per user; the `k`-th train positive (in sampling
    /// order) owns the slice `negatives[k * ratio..(k + 1) * ratio]`.
    pub negatives: Vec<Vec<u32>>,
    /// Train positives in the order negatives were drawn for them.
    pub train_order: Vec<Vec<u32>>,
    pub neg_ratio: usize,
}

impl Dataset {
    /// (positive, negative) training pairs of user `u`.
    pub fn pairs(&self, u: usize) -> Vec<(u32, u32)> {
        pairs_for(&self.train_order[u], &self.negatives[u], self.neg_ratio)
    }

    /// Number of users whose train set contains each item.
    pub fn train_popularity(&self) -> Vec<usize> {
        let mut pop = vec![0usize; self.num_items];
        for items in &self.train {
            for &i in items {
                pop[i as usize] += 1;
            }
        }
        pop
    }

    pub fn item_index(&self, id: &str) -> Option<u32> {
        self.item_ids.iter().position(|x| x == id).map(|i| i as u32)
    }

    pub fn interacted(&self, u: usize, item: u32) -> bool {
        self.train[u].binary_search(&item).is_ok() || self.test[u].binary_search(&item).is_ok()
    }
}

/// Pairs each positive with its block of `ratio` negatives. When fewer
/// negatives exist than requested, blocks wrap around the available ones.
pub fn pairs_for(positives: &[u32], negatives: &[u32], ratio: usize) -> Vec<(u32, u32)> {
    if negatives.is_empty() || ratio == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(positives.len() * ratio);
    for (k, &p) in positives.iter().enumerate() {
        for r in 0..ratio {
            out.push((p, negatives[(k * ratio + r) % negatives.len()]));
        }
    }
    out
}

/// Number of train positives for a user with `n` positives.
pub fn train_count(n: usize, train_ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    (((n as f64) * train_ratio + 1e-9).floor() as usize).clamp(1, n)
}

/// Draws `count` distinct items uniformly from `0..num_items` minus `exclude`
/// (sorted). Returns every allowed item, shuffled, when `count` exceeds them.
pub fn sample_excluding<R: Rng>(rng: &mut R, num_items: usize, exclude: &[u32], count: usize) -> Vec<u32> {
    let available = num_items - exclude.len();
    if count == 0 || available == 0 {
        return Vec::new();
    }
    if count * 3 >= available {
        let mut pool: Vec<u32> = (0..num_items as u32)
            .filter(|i| exclude.binary_search(i).is_err())
            .collect();
        pool.shuffle(rng);
        pool.truncate(count);
        return pool;
    }
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = rng.random_range(0..num_items as u32);
        if exclude.binary_search(&c).is_err() && chosen.insert(c) {
            out.push(c);
        }
    }
    out
}

pub fn split_and_sample(pre: &Preprocessed, train_ratio: f64, neg_ratio: usize, seed: u64) -> Result<Dataset> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::contract(format!("train_ratio {train_ratio} not in (0, 1)")));
    }
    let num_items = pre.item_ids.len();
    let mut train = Vec::with_capacity(pre.positives.len());
    let mut test = Vec::with_capacity(pre.positives.len());
    let mut negatives = Vec::with_capacity(pre.positives.len());
    let mut train_order = Vec::with_capacity(pre.positives.len());
    for (u, positives) in pre.positives.iter().enumerate() {
        let mut rng = rng::stream(seed, &[domain::SPLIT, u as u64]);
        let mut shuffled = positives.clone();
        shuffled.shuffle(&mut rng);
        let k = train_count(shuffled.len(), train_ratio);
        let order: Vec<u32> = shuffled[..k].to_vec();
        let mut tr = order.clone();
        tr.sort_unstable();
        let mut te = shuffled[k..].to_vec();
        te.sort_unstable();
        // `positives` is sorted, so it doubles as the exclusion list.
        let negs = sample_excluding(&mut rng, num_items, positives, k * neg_ratio);
        train.push(tr);
        test.push(te);
        negatives.push(negs);
        train_order.push(order);
    }
    Ok(Dataset {
        num_users: pre.user_ids.len(),
        num_items,
        user_ids: pre.user_ids.clone(),
        item_ids: pre.item_ids.clone(),
        train,
        test,
        negatives,
        train_order,
        neg_ratio,
    })
}

/// Full pipeline: load, filter, optionally keep the most active users, split.
pub fn build_dataset(
    path: impl AsRef<Path>,
    format: Format,
    min_count: usize,
    subsample_users: Option<usize>,
    train_ratio: f64,
    neg_ratio: usize,
    seed: u64,
) -> Result<Dataset> {
    let raw = load_interactions(path, format)?;
    let mut pre = preprocess(&raw, min_count)?;
    if let Some(n) = subsample_users {
        pre = subsample_most_active(&pre, n, min_count)?;
    }
    split_and_sample(&pre, train_ratio, neg_ratio, seed)
}

/// Writes a synthetic MovieLens-format interaction log: users draw items
/// from a popularity-skewed latent-factor model.
pub fn synthetic_movielens(num_users: usize, num_items: usize, per_user: (usize, usize), seed: u64) -> String {
    use std::fmt::Write;
    let dim = 4;
    let mut rng = rng::stream(seed, &[domain::SYNTHETIC]);
    let gauss = |rng: &mut rng::SimRng| -> f64 {
        // Irwin-Hall approximation is plenty for a fixture.
        (0..12).map(|_| rng.random::<f64>()).sum::<f64>() - 6.0
    };
    let items: Vec<Vec<f64>> = (0..num_items).map(|_| (0..dim).map(|_| gauss(&mut rng)).collect()).collect();
    let popularity: Vec<f64> = (0..num_items).map(|i| -1.2 * ((i + 1) as f64).ln()).collect();
    let mut out = String::new();
    for u in 0..num_users {
        let pref: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
        let count = rng.random_range(per_user.0..=per_user.1).min(num_items);
        let logits: Vec<f64> = items
            .iter()
            .zip(&popularity)
            .map(|(v, p)| p + v.iter().zip(&pref).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        // Gumbel top-k = sampling without replacement proportional to exp(logit).
        let mut keyed: Vec<(f64, usize)> = logits
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let g = -(-rng.random::<f64>().max(1e-300).ln()).ln();
                (l + g, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(count) {
            let rating = rng.random_range(1..=5);
            let ts = 978_300_000 + rng.random_range(0..1_000_000);
            let _ = writeln!(out, "{}::{}::{}::{}", u + 1, i + 1, rating, ts);
        }
    }
    out
}

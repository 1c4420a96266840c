//! Benign-side aggregation of received item-embedding gradients.
//!
//! Every defense maps the packets a client received this round to one
//! update row per item. Network-parameter gradients bypass the defenses and
//! are averaged plainly by the caller.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, norm_p};
use crate::model::{mean_item_rows, GradientPacket, RowAccumulator, SparseRows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    None,
    Median,
    Trimmed,
    Krum,
    L2clip,
    Ucsu,
}

impl Defense {
    pub const ALL: [Defense; 6] = [
        Defense::None,
        Defense::Median,
        Defense::Trimmed,
        Defense::Krum,
        Defense::L2clip,
        Defense::Ucsu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Median => "median",
            Defense::Trimmed => "trimmed",
            Defense::Krum => "krum",
            Defense::L2clip => "l2clip",
            Defense::Ucsu => "ucsu",
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Defense {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Defense::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::config(format!("unknown defense `{s}`")))
    }
}

/// How many values to drop from each end in the trimmed mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimK {
    /// 10% of the count, floored, but at least 1 once there are 3 values.
    Auto,
    Fixed(usize),
}

impl TrimK {
    pub fn for_count(self, count: usize) -> usize {
        match self {
            TrimK::Fixed(k) => k,
            TrimK::Auto => {
                let k = count / 10;
                if count >= 3 {
                    k.max(1)
                } else {
                    k
                }
            }
        }
    }
}

impl fmt::Display for TrimK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrimK::Auto => f.write_str("auto"),
            TrimK::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TrimK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(TrimK::Auto);
        }
        s.parse()
            .map(TrimK::Fixed)
            .map_err(|_| Error::config(format!("trim_k must be `auto` or a count, got `{s}`")))
    }
}

/// `row · min(1, mu / ‖row‖_p)`.
pub fn clip_row(row: &[f64], mu: f64, p: f64) -> Vec<f64> {
    let scale = clip_factor(norm_p(row, p), mu);
    row.iter().map(|v| v * scale).collect()
}

fn clip_factor(norm: f64, bound: f64) -> f64 {
    if norm > bound && norm > 0.0 {
        bound / norm
    } else {
        1.0
    }
}

/// Rescales every row whose norm exceeds the mean norm down to it.
pub fn adaptive_clip(rows: &[Vec<f64>], p: f64) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() {
        return Err(Error::contract("adaptive clip of an empty row list"));
    }
    let norms: Vec<f64> = rows.iter().map(|r| norm_p(r, p)).collect();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    Ok(rows
        .iter()
        .zip(&norms)
        .map(|(r, &n)| {
            let s = clip_factor(n, mean);
            r.iter().map(|v| v * s).collect()
        })
        .collect())
}

/// Received rows per item, in ascending sender order.
fn rows_by_item<'a>(packets: &[&'a GradientPacket]) -> BTreeMap<u32, Vec<&'a [f64]>> {
    let mut sorted = packets.to_vec();
    sorted.sort_by_key(|p| p.sender);
    let mut out: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for p in sorted {
        for (item, row) in p.item_grad.iter() {
            out.entry(item).or_default().push(row);
        }
    }
    out
}

fn packet_dim(packets: &[&GradientPacket]) -> usize {
    packets.first().map(|p| p.item_grad.dim()).unwrap_or(0)
}

fn per_coordinate(packets: &[&GradientPacket], reduce: impl Fn(&mut Vec<f64>) -> f64) -> SparseRows {
    let dim = packet_dim(packets);
    let by_item = rows_by_item(packets);
    let mut keys = Vec::with_capacity(by_item.len());
    let mut data = Vec::with_capacity(by_item.len() * dim);
    let mut column = Vec::new();
    for (item, rows) in by_item {
        keys.push(item);
        for c in 0..dim {
            column.clear();
            column.extend(rows.iter().map(|r| r[c]));
            data.push(reduce(&mut column));
        }
    }
    SparseRows::from_parts(dim, keys, data).expect("keys come from a BTreeMap")
}

/// Coordinate-wise median; even counts take the mean of the middle two.
pub fn median_aggregate(packets: &[&GradientPacket]) -> SparseRows {
    per_coordinate(packets, |v| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    })
}

/// Coordinate-wise mean after dropping the `k` smallest and `k` largest
/// values; falls back to the plain mean when fewer than `2k + 1` remain.
pub fn trimmed_mean_aggregate(packets: &[&GradientPacket], trim: TrimK) -> SparseRows {
    per_coordinate(packets, |v| {
        let k = trim.for_count(v.len());
        if v.len() > 2 * k {
            v.sort_by(f64::total_cmp);
            let kept = &v[k..v.len() - k];
            kept.iter().sum::<f64>() / kept.len() as f64
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    })
}

/// Per item, the received row closest (ℓ2) to the mean of received rows;
/// ties go to the lowest sender id.
pub fn item_krum_aggregate(packets: &[&GradientPacket]) -> SparseRows {
    let dim = packet_dim(packets);
    let mut keys = Vec::new();
    let mut data = Vec::new();
    let mut sum = vec![0.0; dim];
    for (item, rows) in rows_by_item(packets) {
        sum.iter_mut().for_each(|m| *m = 0.0);
        for r in &rows {
            axpy(1.0, r, &mut sum);
        }
        // Distances to the mean scaled by the count: ‖n·r − Σ‖ orders rows
        // like ‖r − mean‖ without rounding the mean.
        let n = rows.len() as f64;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, r) in rows.iter().enumerate() {
            let d: f64 = r.iter().zip(&sum).map(|(a, s)| (n * a - s) * (n * a - s)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        keys.push(item);
        data.extend_from_slice(rows[best]);
    }
    SparseRows::from_parts(dim, keys, data).expect("keys come from a BTreeMap")
}

/// Clip every received row to `mu`, then average per item.
pub fn l2_clip_aggregate(packets: &[&GradientPacket], mu: f64, p: f64) -> SparseRows {
    let dim = packet_dim(packets);
    let mut keys = Vec::new();
    let mut data = Vec::new();
    for (item, rows) in rows_by_item(packets) {
        let mut acc = vec![0.0; dim];
        for r in &rows {
            axpy(clip_factor(norm_p(r, p), mu), r, &mut acc);
        }
        let n = rows.len() as f64;
        keys.push(item);
        data.extend(acc.iter().map(|v| v / n));
    }
    SparseRows::from_parts(dim, keys, data).expect("keys come from a BTreeMap")
}

/// One banked row: a pointer into the packet it arrived in plus its
/// (clipped) norm. The clipped row itself is rebuilt on demand.
#[derive(Debug, Clone)]
struct BankEntry {
    packet: Arc<GradientPacket>,
    slot: u32,
    norm: f64,
}

impl BankEntry {
    fn round(&self) -> u64 {
        self.packet.round
    }

    fn sender(&self) -> usize {
        self.packet.sender
    }

    fn item(&self) -> u32 {
        self.packet.item_grad.keys()[self.slot as usize]
    }

    fn raw_row(&self) -> &[f64] {
        self.packet.item_grad.row(self.slot as usize)
    }

    /// Larger norm first, then older round, lower sender, lower item.
    fn priority(a: &BankEntry, b: &BankEntry) -> std::cmp::Ordering {
        b.norm
            .total_cmp(&a.norm)
            .then(a.round().cmp(&b.round()))
            .then(a.sender().cmp(&b.sender()))
            .then(a.item().cmp(&b.item()))
    }
}

/// One banked row as seen from outside.
#[derive(Debug, Clone, PartialEq)]
pub struct BankRow {
    pub round: u64,
    pub sender: usize,
    pub item: u32,
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcsuParams {
    pub mu: f64,
    pub nu: f64,
    pub p: f64,
    /// Clip each received row to `mu` before banking.
    pub clip: bool,
    /// Rescale the selected rows to their mean norm.
    pub adaptive: bool,
}

/// Per-client store of received, clipped item-row gradients.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub capacity_rounds: u64,
    /// Keep unselected rows for later rounds instead of clearing them.
    pub retain: bool,
    entries: Vec<BankEntry>,
    evicted: u64,
    applied: u64,
    received: u64,
}

impl MemoryBank {
    pub fn new(capacity_rounds: u64, retain: bool) -> Self {
        MemoryBank {
            capacity_rounds,
            retain,
            entries: Vec::new(),
            evicted: 0,
            applied: 0,
            received: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Counts of rows received, applied and dropped (by age or cleaning).
    pub fn counters(&self) -> (u64, u64, u64) {
        (self.received, self.applied, self.evicted)
    }

    pub fn rows(&self, params: &UcsuParams) -> Vec<BankRow> {
        self.entries.iter().map(|e| materialize(e, params)).collect()
    }
}

fn materialize(e: &BankEntry, params: &UcsuParams) -> BankRow {
    let raw = e.raw_row();
    let scale = if params.clip {
        clip_factor(norm_p(raw, params.p), params.mu)
    } else {
        1.0
    };
    BankRow {
        round: e.round(),
        sender: e.sender(),
        item: e.item(),
        row: raw.iter().map(|v| v * scale).collect(),
    }
}

/// Number of rows to pop from a bank of `len`: `⌈nu·len⌉`, at least one.
pub fn selection_count(nu: f64, len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    // Guard against products like 0.1·30 landing a hair above an integer.
    let k = (nu * len as f64 - 1e-9).ceil() as usize;
    k.clamp(1, len)
}

/// One round of clip → bank → evict → pop top-ν → adaptive clip → per-item
/// mean. Returns the item-row update (empty when the bank is empty).
pub fn ucsu_aggregate(
    bank: &mut MemoryBank,
    incoming: &[Arc<GradientPacket>],
    params: &UcsuParams,
    current_round: u64,
) -> Result<SparseRows> {
    if !(params.nu > 0.0 && params.nu <= 1.0) {
        return Err(Error::contract(format!("nu must be in (0, 1], got {}", params.nu)));
    }
    if params.clip && !(params.mu > 0.0) {
        return Err(Error::contract("mu must be positive"));
    }
    let dim = incoming.first().map(|p| p.item_grad.dim()).unwrap_or(0);
    let mut sorted: Vec<&Arc<GradientPacket>> = incoming.iter().collect();
    sorted.sort_by_key(|p| p.sender);
    for p in sorted {
        for slot in 0..p.item_grad.len() {
            let raw = norm_p(p.item_grad.row(slot), params.p);
            let norm = if params.clip { raw.min(params.mu) } else { raw };
            bank.entries.push(BankEntry {
                packet: Arc::clone(p),
                slot: slot as u32,
                norm,
            });
            bank.received += 1;
        }
    }

    let before = bank.entries.len();
    let cap = bank.capacity_rounds;
    bank.entries.retain(|e| e.round() + cap >= current_round);
    bank.evicted += (before - bank.entries.len()) as u64;

    let k = selection_count(params.nu, bank.entries.len());
    if k == 0 {
        return Ok(SparseRows::new(dim));
    }
    if k < bank.entries.len() {
        bank.entries.select_nth_unstable_by(k - 1, BankEntry::priority);
    }
    let rest = bank.entries.split_off(k);
    let selected = std::mem::replace(&mut bank.entries, rest);
    bank.applied += selected.len() as u64;
    if !bank.retain {
        bank.evicted += bank.entries.len() as u64;
        bank.entries.clear();
    }

    let dim = selected[0].packet.item_grad.dim();
    let mean_norm = selected.iter().map(|e| e.norm).sum::<f64>() / selected.len() as f64;
    let mut acc = RowAccumulator::new(dim);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut ordered = selected;
    ordered.sort_by(|a, b| {
        a.sender()
            .cmp(&b.sender())
            .then(a.round().cmp(&b.round()))
            .then(a.item().cmp(&b.item()))
    });
    for e in &ordered {
        let raw = e.raw_row();
        let raw_norm = norm_p(raw, params.p);
        let mut scale = if params.clip { clip_factor(raw_norm, params.mu) } else { 1.0 };
        if params.adaptive {
            scale *= clip_factor(e.norm, mean_norm);
        }
        acc.add(e.item(), scale, raw);
        *counts.entry(e.item()).or_default() += 1;
    }
    let mut rows = acc.finish();
    for (slot, (_, &c)) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        rows.row_mut(slot).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(rows)
}

/// Parameters shared by all defenses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: Defense,
    pub ucsu: UcsuParams,
    pub trim: TrimK,
}

/// Item-row update for one benign client this round. `bank` must be
/// present for UCSU.
pub fn aggregate_item_grads(
    cfg: &DefenseConfig,
    bank: Option<&mut MemoryBank>,
    packets: &[Arc<GradientPacket>],
    current_round: u64,
) -> Result<SparseRows> {
    let refs: Vec<&GradientPacket> = packets.iter().map(|p| p.as_ref()).collect();
    Ok(match cfg.kind {
        Defense::None => {
            let mut sorted = refs;
            sorted.sort_by_key(|p| p.sender);
            mean_item_rows(&sorted)
        }
        Defense::Median => median_aggregate(&refs),
        Defense::Trimmed => trimmed_mean_aggregate(&refs, cfg.trim),
        Defense::Krum => item_krum_aggregate(&refs),
        Defense::L2clip => l2_clip_aggregate(&refs, cfg.ucsu.mu, cfg.ucsu.p),
        Defense::Ucsu => {
            let bank = bank.ok_or_else(|| Error::contract("UCSU needs a memory bank"))?;
            ucsu_aggregate(bank, packets, &cfg.ucsu, current_round)?
        }
    })
}

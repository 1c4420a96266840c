//! Adversary strategies. Every attack ends in an ordinary
//! [`GradientPacket`], so receivers cannot tell poisoned packets apart by
//! shape.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{pairs_for, sample_excluding};
use crate::error::{Error, Result};
use crate::linalg::{self, norm_p, sigmoid, softplus};
use crate::metrics::top_k_from_scores;
use crate::model::{
    apply_neighbor_aggregate, bpr_objective, dedup_items, objective_gradients, score_all, AdamState,
    ClientState, GradientPacket, Gradients, NetParams, SparseRows,
};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    None,
    Ra,
    Eb,
    Psmu,
    Pamn,
}

impl Attack {
    pub const ALL: [Attack; 5] = [Attack::None, Attack::Ra, Attack::Eb, Attack::Psmu, Attack::Pamn];

    pub fn name(self) -> &'static str {
        match self {
            Attack::None => "none",
            Attack::Ra => "ra",
            Attack::Eb => "eb",
            Attack::Psmu => "psmu",
            Attack::Pamn => "pamn",
        }
    }

    /// Strategies that fine-tune on the rating loss and send the delta.
    pub fn is_model_poisoning(self) -> bool {
        matches!(self, Attack::Psmu | Attack::Pamn)
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attack::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attack `{s}`")))
    }
}

/// Knobs shared by all adversaries of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    /// Diversity weight on the user-embedding step.
    pub lambda: f64,
    /// Norm order of the diversity term.
    pub p: f64,
    /// Number of substitute items.
    pub substitutes: usize,
    /// Fine-tuning steps per round.
    pub finetune_steps: usize,
    /// Step size of the user-embedding step and of fine-tuning.
    pub lr: f64,
    /// Step size receivers apply to packets; the fine-tuning delta is
    /// divided by its negation.
    pub receiver_lr: f64,
    /// Length of the adversary's own recommendation list.
    pub top_k: usize,
    /// Weight of the boosting term for the EB baseline.
    pub boost_weight: f64,
}

/// An adversary's constructed data and private model.
#[derive(Debug, Clone)]
pub struct AdversaryState {
    pub id: usize,
    pub base: ClientState,
    pub optimizer: AdamState,
    /// Sorted constructed positives.
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
    /// Positives in the order negatives were drawn for them.
    pub positive_order: Vec<u32>,
    pub neg_ratio: usize,
    pub substitutes: Vec<u32>,
    pub strategy: Attack,
}

impl AdversaryState {
    pub fn pairs(&self) -> Vec<(u32, u32)> {
        pairs_for(&self.positive_order, &self.negatives, self.neg_ratio)
    }
}

/// Constructed training data of one adversary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversaryData {
    /// In sampling order.
    pub positives: Vec<u32>,
    pub negatives: Vec<u32>,
}

/// `alpha` distinct non-target items as positives, plus `neg_ratio`
/// negatives per positive drawn from items that are neither positives nor
/// targets.
pub fn build_adversary_dataset(
    num_items: usize,
    targets: &[u32],
    alpha: usize,
    neg_ratio: usize,
    seed: u64,
) -> Result<AdversaryData> {
    let mut sorted_targets = targets.to_vec();
    sorted_targets.sort_unstable();
    sorted_targets.dedup();
    if alpha > num_items - sorted_targets.len() {
        return Err(Error::contract(format!(
            "alpha {alpha} exceeds the {} non-target items",
            num_items - sorted_targets.len()
        )));
    }
    let mut r = rng::stream(seed, &[domain::ADVERSARY_DATA]);
    let positives = sample_excluding(&mut r, num_items, &sorted_targets, alpha);
    let mut exclude: Vec<u32> = positives.iter().chain(&sorted_targets).copied().collect();
    exclude.sort_unstable();
    let negatives = sample_excluding(&mut r, num_items, &exclude, alpha * neg_ratio);
    Ok(AdversaryData { positives, negatives })
}

/// Snapshot of every adversary's user embedding, taken once per round.
#[derive(Debug, Clone)]
pub struct AttackCoordinator {
    pub embeddings: Vec<Vec<f64>>,
    pub lambda: f64,
    pub p: f64,
}

impl AttackCoordinator {
    pub fn snapshot<'a>(users: impl IntoIterator<Item = &'a [f64]>, lambda: f64, p: f64) -> Self {
        AttackCoordinator {
            embeddings: users.into_iter().map(<[f64]>::to_vec).collect(),
            lambda,
            p,
        }
    }
}

/// Absorbs neighbor packets exactly as a benign client would without a
/// defense.
pub fn adversary_collab_update(adv: &mut AdversaryState, packets: &[&GradientPacket], lr: f64) -> Result<()> {
    apply_neighbor_aggregate(&mut adv.base, packets, lr)
}

/// Gradient of `‖x‖_p`, zero at `x = 0`.
fn norm_gradient(x: &[f64], p: f64) -> Vec<f64> {
    let n = norm_p(x, p);
    if n == 0.0 {
        return vec![0.0; x.len()];
    }
    if p == 2.0 {
        return x.iter().map(|v| v / n).collect();
    }
    x.iter()
        .map(|v| v.signum() * (v.abs() / n).powf(p - 1.0))
        .collect()
}

/// `L_loc(u) − λ Σ_k ‖u − u_k‖_p` and its gradient in `u`, with network and
/// item table held fixed.
pub fn user_objective(adv: &AdversaryState, user: &[f64], coord: &AttackCoordinator) -> (f64, Vec<f64>) {
    let pairs = adv.pairs();
    let (mut loss, mut grad) = if pairs.is_empty() {
        (0.0, vec![0.0; user.len()])
    } else {
        let (items, pos) = dedup_items(pairs.iter().flat_map(|&(a, b)| [a, b]));
        let (l, g) = objective_gradients(&adv.base, user, &items, |logits| bpr_objective(&pairs, &pos, logits));
        (l, g.user)
    };
    if coord.lambda != 0.0 {
        let mut diff = vec![0.0; user.len()];
        for other in &coord.embeddings {
            for ((d, a), b) in diff.iter_mut().zip(user).zip(other) {
                *d = a - b;
            }
            loss -= coord.lambda * norm_p(&diff, coord.p);
            linalg::axpy(-coord.lambda, &norm_gradient(&diff, coord.p), &mut grad);
        }
    }
    (loss, grad)
}

/// One gradient-descent step on [`user_objective`], touching only `u`.
pub fn update_adversary_user_embedding(adv: &mut AdversaryState, coord: &AttackCoordinator, lr: f64) {
    let (_, grad) = user_objective(adv, &adv.base.user.clone(), coord);
    linalg::axpy(-lr, &grad, &mut adv.base.user);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = (linalg::dot(a, a) * linalg::dot(b, b)).sqrt();
    if d > 0.0 {
        linalg::dot(a, b) / d
    } else {
        0.0
    }
}

/// Up to `s` non-target items scored by their best cosine similarity to a
/// target, among items the adversary rates above its median.
pub fn select_substitute_items(state: &ClientState, targets: &[u32], s: usize) -> Vec<u32> {
    if s == 0 || targets.is_empty() {
        return Vec::new();
    }
    let scores = score_all(state);
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mut cand: Vec<(f64, u32)> = (0..n as u32)
        .filter(|j| scores[*j as usize] > median && !targets.contains(j))
        .map(|j| {
            let v = state.items.row(j as usize);
            let best = targets
                .iter()
                .map(|&t| cosine(v, state.items.row(t as usize)))
                .fold(f64::NEG_INFINITY, f64::max);
            (best, j)
        })
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cand.truncate(s);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// The adversary's own top list with targets removed, and the items to
/// promote: `(targets ∪ substitutes) \ positives`.
pub fn rate_terms(adv: &AdversaryState, targets: &[u32], top_k: usize) -> (Vec<u32>, Vec<u32>) {
    let scores = score_all(&adv.base);
    let mut top = top_k_from_scores(&scores, top_k, &adv.positives);
    top.retain(|j| !targets.contains(j));
    let mut promoted: Vec<u32> = targets
        .iter()
        .chain(&adv.substitutes)
        .copied()
        .filter(|t| adv.positives.binary_search(t).is_err())
        .collect();
    promoted.sort_unstable();
    promoted.dedup();
    (top, promoted)
}

/// `Σ_j Σ_t σ(r̂_j − r̂_t)` over competitors `top` and promoted items, with
/// its gradient. `None` when there is nothing to compare.
pub fn rate_loss(state: &ClientState, top: &[u32], promoted: &[u32]) -> Option<(f64, Gradients)> {
    let top: Vec<u32> = top.iter().copied().filter(|j| !promoted.contains(j)).collect();
    if top.is_empty() || promoted.is_empty() {
        return None;
    }
    let (items, pos) = dedup_items(top.iter().chain(promoted).copied());
    Some(objective_gradients(state, &state.user, &items, |logits| {
        let mut loss = 0.0;
        let mut d = vec![0.0; logits.len()];
        for &j in &top {
            for &t in promoted {
                let (a, b) = (pos[&j], pos[&t]);
                let s = sigmoid(logits[a] - logits[b]);
                loss += s;
                let g = s * (1.0 - s);
                d[a] += g;
                d[b] -= g;
            }
        }
        (loss, d)
    }))
}

/// Fine-tunes items and network on the rating loss with `u` frozen and
/// returns the total change expressed as a gradient
/// (`delta / −receiver_lr`).
pub fn pamn_poison(adv: &mut AdversaryState, targets: &[u32], params: &AttackParams, round: u64) -> GradientPacket {
    let before_net = adv.base.net.clone();
    let mut touched: Vec<u32> = Vec::new();
    let mut before_rows: Vec<(u32, Vec<f64>)> = Vec::new();
    for _ in 0..params.finetune_steps {
        let (top, promoted) = rate_terms(adv, targets, params.top_k);
        let Some((_, g)) = rate_loss(&adv.base, &top, &promoted) else {
            break;
        };
        for (item, row) in g.items.iter() {
            if touched.binary_search(&item).is_err() {
                let at = touched.partition_point(|&x| x < item);
                touched.insert(at, item);
                before_rows.push((item, adv.base.items.row(item as usize).to_vec()));
            }
            linalg::axpy(-params.lr, row, adv.base.items.row_mut(item as usize));
        }
        linalg::axpy(-params.lr, &g.net.data, &mut adv.base.net.data);
    }
    before_rows.sort_by_key(|r| r.0);
    let inv = -1.0 / params.receiver_lr;
    let dim = adv.base.embed_dim();
    let mut data = Vec::with_capacity(touched.len() * dim);
    for (item, old) in &before_rows {
        let now = adv.base.items.row(*item as usize);
        data.extend(now.iter().zip(old).map(|(a, b)| (a - b) * inv));
    }
    let mut net = NetParams::zeros(&before_net.shape);
    for ((g, a), b) in net.data.iter_mut().zip(&adv.base.net.data).zip(&before_net.data) {
        *g = (a - b) * inv;
    }
    GradientPacket {
        sender: adv.id,
        round,
        item_grad: SparseRows::from_parts(dim, touched, data).expect("touched is sorted and distinct"),
        net_grad: net,
    }
}

/// The EB boosting term `mean_t −ln σ(r̂_t)`, on logits.
pub fn boost_loss(logits: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len().max(1) as f64;
    let loss = logits.iter().map(|&l| softplus(-l)).sum::<f64>() / n;
    let grad = logits.iter().map(|&l| (sigmoid(l) - 1.0) / n).collect();
    (loss, grad)
}

/// BPR on `pairs` plus `weight` times the boosting term on `targets`.
pub fn boosted_gradients(
    state: &ClientState,
    pairs: &[(u32, u32)],
    targets: &[u32],
    weight: f64,
) -> (f64, Gradients) {
    let (items, pos) = dedup_items(pairs.iter().flat_map(|&(a, b)| [a, b]).chain(targets.iter().copied()));
    objective_gradients(state, &state.user, &items, |logits| {
        let (mut loss, mut d) = if pairs.is_empty() {
            (0.0, vec![0.0; logits.len()])
        } else {
            bpr_objective(pairs, &pos, logits)
        };
        let t_logits: Vec<f64> = targets.iter().map(|t| logits[pos[t]]).collect();
        let (bl, bg) = boost_loss(&t_logits);
        loss += weight * bl;
        for (t, g) in targets.iter().zip(bg) {
            d[pos[t]] += weight * g;
        }
        (loss, d)
    })
}

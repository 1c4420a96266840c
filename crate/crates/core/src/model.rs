//! Per-client recommender: embedding lookup, a relu feedforward scorer over
//! `[user, item]`, pairwise BPR loss and its analytic gradients.
//!
//! Scores are handled as pre-sigmoid logits everywhere except
//! [`predict_rating`]; the BPR loss applies the sigmoid once, to the logit
//! difference.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, gemm, sigmoid, softplus, View, ViewMut};

/// Layout of the scoring network: dense relu layers over the concatenated
/// `[user, item]` input, then a bias-free projection to one logit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub embed_dim: usize,
    pub widths: Vec<usize>,
}

impl NetShape {
    pub fn new(embed_dim: usize, widths: Vec<usize>) -> Result<Self> {
        if embed_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::contract("embed_dim and all layer widths must be positive"));
        }
        Ok(NetShape { embed_dim, widths })
    }

    pub fn input_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    /// (inputs, outputs) of dense layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let inputs = if l == 0 { self.input_dim() } else { self.widths[l - 1] };
        (inputs, self.widths[l])
    }

    pub fn weight_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|k| {
                let (i, o) = self.layer_dims(k);
                i * o + o
            })
            .sum()
    }

    pub fn bias_offset(&self, l: usize) -> usize {
        let (i, o) = self.layer_dims(l);
        self.weight_offset(l) + i * o
    }

    pub fn projection_offset(&self) -> usize {
        self.weight_offset(self.num_layers())
    }

    pub fn last_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn len(&self) -> usize {
        self.projection_offset() + self.last_width()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All scoring-network parameters in one flat buffer laid out as
/// `[W0, b0, W1, b1, ..., w]`, weights row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub shape: NetShape,
    pub data: Vec<f64>,
}

impl NetParams {
    pub fn zeros(shape: &NetShape) -> Self {
        NetParams {
            data: vec![0.0; shape.len()],
            shape: shape.clone(),
        }
    }

    pub fn random<R: Rng>(shape: &NetShape, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        for l in 0..shape.num_layers() {
            let (i, o) = shape.layer_dims(l);
            let off = shape.weight_offset(l);
            for w in &mut p.data[off..off + i * o] {
                *w = rng.random_range(-scale..scale);
            }
        }
        let off = shape.projection_offset();
        for w in &mut p.data[off..] {
            *w = rng.random_range(-scale..scale);
        }
        p
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let (i, o) = self.shape.layer_dims(l);
        let off = self.shape.weight_offset(l);
        &self.data[off..off + i * o]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, o) = self.shape.layer_dims(l);
        let off = self.shape.bias_offset(l);
        &self.data[off..off + o]
    }

    pub fn projection(&self) -> &[f64] {
        &self.data[self.shape.projection_offset()..]
    }

    pub fn check_same_shape(&self, other: &NetParams) -> Result<()> {
        if self.shape != other.shape || self.data.len() != other.data.len() {
            return Err(Error::contract("network parameter shapes differ"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense `rows × dim` item-embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemTable {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ItemTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        ItemTable {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Sparse set of item rows: sorted distinct keys, one `dim`-vector each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRows {
    dim: usize,
    keys: Vec<u32>,
    data: Vec<f64>,
}

impl SparseRows {
    pub fn new(dim: usize) -> Self {
        SparseRows {
            dim,
            keys: Vec::new(),
            data: Vec::new(),
        }
    }

    /// `keys` must be strictly increasing and `data.len() == keys.len() * dim`.
    pub fn from_parts(dim: usize, keys: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        if data.len() != keys.len() * dim {
            return Err(Error::contract("sparse row data length mismatch"));
        }
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("sparse row keys must be strictly increasing"));
        }
        Ok(SparseRows { dim, keys, data })
    }

    /// Builds from unordered `(item, row)` pairs; duplicate items are summed.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (u32, Vec<f64>)>) -> Self {
        let mut map: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
        for (k, row) in pairs {
            assert_eq!(row.len(), dim, "row length must equal dim");
            match map.get_mut(&k) {
                Some(acc) => linalg::axpy(1.0, &row, acc),
                None => {
                    map.insert(k, row);
                }
            }
        }
        let mut out = SparseRows::new(dim);
        for (k, row) in map {
            out.keys.push(k);
            out.data.extend_from_slice(&row);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[u32] {
        &self.keys
    }

    pub fn row(&self, slot: usize) -> &[f64] {
        &self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn row_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.data[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn get(&self, item: u32) -> Option<&[f64]> {
        self.keys.binary_search(&item).ok().map(|s| self.row(s))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> + '_ {
        self.keys.iter().copied().zip(self.data.chunks_exact(self.dim.max(1)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// One simulated client's private parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub user: Vec<f64>,
    pub items: ItemTable,
    pub net: NetParams,
}

impl ClientState {
    /// Embeddings and weights ~ U(-scale, scale), biases zero.
    pub fn random<R: Rng>(shape: &NetShape, num_items: usize, scale: f64, rng: &mut R) -> Self {
        let d = shape.embed_dim;
        let user = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let mut items = ItemTable::zeros(num_items, d);
        for v in &mut items.data {
            *v = rng.random_range(-scale..scale);
        }
        let net = NetParams::random(shape, scale, rng);
        ClientState { user, items, net }
    }

    pub fn zeros(shape: &NetShape, num_items: usize) -> Self {
        ClientState {
            user: vec![0.0; shape.embed_dim],
            items: ItemTable::zeros(num_items, shape.embed_dim),
            net: NetParams::zeros(shape),
        }
    }

    pub fn num_items(&self) -> usize {
        self.items.rows
    }

    pub fn embed_dim(&self) -> usize {
        self.user.len()
    }

    pub fn is_finite(&self) -> bool {
        self.user.iter().chain(&self.items.data).all(|v| v.is_finite()) && self.net.is_finite()
    }

    fn check_item(&self, item: u32) -> Result<()> {
        if (item as usize) < self.items.rows {
            Ok(())
        } else {
            Err(Error::Index {
                index: item as usize,
                len: self.items.rows,
            })
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch {
    pub pairs: Vec<(u32, u32)>,
}

impl TrainingBatch {
    pub fn new(pairs: Vec<(u32, u32)>) -> Self {
        TrainingBatch { pairs }
    }

    fn validate(&self, state: &ClientState) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        for &(p, n) in &self.pairs {
            if p == n {
                return Err(Error::contract(format!("pair ({p}, {n}) repeats the item")));
            }
            state.check_item(p)?;
            state.check_item(n)?;
        }
        Ok(())
    }
}

/// Gradients of some loss with respect to every parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub user: Vec<f64>,
    pub items: SparseRows,
    pub net: NetParams,
}

/// What a client sends to its neighbors in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPacket {
    pub sender: usize,
    pub round: u64,
    pub item_grad: SparseRows,
    pub net_grad: NetParams,
}

impl GradientPacket {
    pub fn zeros_like(&self) -> GradientPacket {
        let mut out = self.clone();
        out.item_grad.scale(0.0);
        out.net_grad.data.iter_mut().for_each(|v| *v = 0.0);
        out
    }
}

/// Activations for a set of distinct items scored for one user.
pub(crate) struct Forward {
    n: usize,
    /// Item embeddings, `n × d`.
    x: Vec<f64>,
    /// Post-relu activations per layer, `n × width`.
    acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Scores `items` (need not be distinct) for the state's own user.
pub(crate) fn forward(state: &ClientState, items: &[u32]) -> Forward {
    forward_with_user(state, &state.user, items)
}

pub(crate) fn forward_with_user(state: &ClientState, user: &[f64], items: &[u32]) -> Forward {
    let shape = &state.net.shape;
    let d = shape.embed_dim;
    let n = items.len();
    let mut x = Vec::with_capacity(n * d);
    for &i in items {
        x.extend_from_slice(state.items.row(i as usize));
    }
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shape.num_layers());
    for l in 0..shape.num_layers() {
        let (inputs, outputs) = shape.layer_dims(l);
        let w = state.net.weights(l);
        let b = state.net.bias(l);
        let mut pre = vec![0.0; n * outputs];
        if l == 0 {
            // User half of the first layer is shared by every row.
            let mut shared = b.to_vec();
            for (o, s) in shared.iter_mut().enumerate() {
                *s += linalg::dot(&w[o * inputs..o * inputs + d], user);
            }
            for row in pre.chunks_exact_mut(outputs) {
                row.copy_from_slice(&shared);
            }
            gemm(
                n,
                d,
                outputs,
                1.0,
                View::row_major(&x, d),
                View {
                    data: w,
                    offset: d,
                    rs: 1,
                    cs: inputs,
                },
                1.0,
                ViewMut::row_major(&mut pre, outputs),
            );
        } else {
            for row in pre.chunks_exact_mut(outputs) {
                row.copy_from_slice(b);
            }
            gemm(
                n,
                inputs,
                outputs,
                1.0,
                View::row_major(&acts[l - 1], inputs),
                View {
                    data: w,
                    offset: 0,
                    rs: 1,
                    cs: inputs,
                },
                1.0,
                ViewMut::row_major(&mut pre, outputs),
            );
        }
        for v in &mut pre {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        acts.push(pre);
    }
    let proj = state.net.projection();
    let last = shape.last_width();
    let logits = acts
        .last()
        .expect("at least one layer")
        .chunks_exact(last)
        .map(|h| linalg::dot(h, proj))
        .collect();
    Forward { n, x, acts, logits }
}

/// Raw backward pass output before item rows are keyed.
pub(crate) struct Backward {
    pub user: Vec<f64>,
    /// `n × d`, aligned with the forward item list.
    pub x: Vec<f64>,
    pub net: NetParams,
}

/// Backpropagates `dlogits` (one per forward row) through the network.
pub(crate) fn backward(state: &ClientState, user: &[f64], fwd: &Forward, dlogits: &[f64]) -> Backward {
    let shape = &state.net.shape;
    let d = shape.embed_dim;
    let n = fwd.n;
    let layers = shape.num_layers();
    let mut net = NetParams::zeros(shape);
    let last = shape.last_width();

    // Projection.
    let proj_off = shape.projection_offset();
    {
        let h = &fwd.acts[layers - 1];
        let gproj = &mut net.data[proj_off..proj_off + last];
        for (row, &g) in h.chunks_exact(last).zip(dlogits) {
            if g != 0.0 {
                linalg::axpy(g, row, gproj);
            }
        }
    }
    let proj = state.net.projection();
    let mut delta = vec![0.0; n * last];
    for (r, &g) in dlogits.iter().enumerate() {
        for (o, dv) in delta[r * last..(r + 1) * last].iter_mut().enumerate() {
            *dv = g * proj[o];
        }
    }

    let mut dx = vec![0.0; n * d];
    let mut duser = vec![0.0; d];
    for l in (0..layers).rev() {
        let (inputs, outputs) = shape.layer_dims(l);
        // relu mask
        for (dv, a) in delta.iter_mut().zip(&fwd.acts[l]) {
            if *a <= 0.0 {
                *dv = 0.0;
            }
        }
        let w_off = shape.weight_offset(l);
        let b_off = shape.bias_offset(l);
        {
            let gb = &mut net.data[b_off..b_off + outputs];
            for row in delta.chunks_exact(outputs) {
                linalg::axpy(1.0, row, gb);
            }
        }
        let w = state.net.weights(l);
        if l == 0 {
            // item half: dW[:, d..] += delta^T x
            gemm(
                outputs,
                n,
                d,
                1.0,
                View {
                    data: &delta,
                    offset: 0,
                    rs: 1,
                    cs: outputs,
                },
                View::row_major(&fwd.x, d),
                1.0,
                ViewMut {
                    data: &mut net.data,
                    offset: w_off + d,
                    rs: inputs,
                    cs: 1,
                },
            );
            // user half: dW[:, ..d] += colsum(delta) ⊗ user
            let colsum: Vec<f64> = net.data[b_off..b_off + outputs].to_vec();
            for o in 0..outputs {
                let row = &mut net.data[w_off + o * inputs..w_off + o * inputs + d];
                linalg::axpy(colsum[o], user, row);
                linalg::axpy(colsum[o], &w[o * inputs..o * inputs + d], &mut duser);
            }
            // dx = delta · W[:, d..]
            gemm(
                n,
                outputs,
                d,
                1.0,
                View::row_major(&delta, outputs),
                View {
                    data: w,
                    offset: d,
                    rs: inputs,
                    cs: 1,
                },
                0.0,
                ViewMut::row_major(&mut dx, d),
            );
        } else {
            let prev = &fwd.acts[l - 1];
            gemm(
                outputs,
                n,
                inputs,
                1.0,
                View {
                    data: &delta,
                    offset: 0,
                    rs: 1,
                    cs: outputs,
                },
                View::row_major(prev, inputs),
                1.0,
                ViewMut {
                    data: &mut net.data,
                    offset: w_off,
                    rs: inputs,
                    cs: 1,
                },
            );
            let mut next = vec![0.0; n * inputs];
            gemm(
                n,
                outputs,
                inputs,
                1.0,
                View::row_major(&delta, outputs),
                View::row_major(w, inputs),
                0.0,
                ViewMut::row_major(&mut next, inputs),
            );
            delta = next;
        }
    }
    Backward { user: duser, x: dx, net }
}

/// Distinct items of `items`, sorted, and each input's position among them.
pub(crate) fn dedup_items(items: impl IntoIterator<Item = u32>) -> (Vec<u32>, HashMap<u32, usize>) {
    let mut unique: Vec<u32> = items.into_iter().collect();
    unique.sort_unstable();
    unique.dedup();
    let pos = unique.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    (unique, pos)
}

/// Evaluates an objective defined on the logits of `items` (distinct,
/// sorted) and returns its value and gradients for all parameter groups.
pub(crate) fn objective_gradients(
    state: &ClientState,
    user: &[f64],
    items: &[u32],
    objective: impl FnOnce(&[f64]) -> (f64, Vec<f64>),
) -> (f64, Gradients) {
    let fwd = forward_with_user(state, user, items);
    let (loss, dlogits) = objective(&fwd.logits);
    let bwd = backward(state, user, &fwd, &dlogits);
    let d = state.embed_dim();
    let item_grads = SparseRows {
        dim: d,
        keys: items.to_vec(),
        data: bwd.x,
    };
    (
        loss,
        Gradients {
            user: bwd.user,
            items: item_grads,
            net: bwd.net,
        },
    )
}

/// Mean BPR loss and its derivative with respect to each distinct item's logit.
pub(crate) fn bpr_objective(pairs: &[(u32, u32)], pos: &HashMap<u32, usize>, logits: &[f64]) -> (f64, Vec<f64>) {
    let scale = 1.0 / pairs.len() as f64;
    let mut dlogits = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for &(p, n) in pairs {
        let (a, b) = (pos[&p], pos[&n]);
        let diff = logits[a] - logits[b];
        loss += softplus(-diff);
        // d/d diff of -ln σ(diff) = σ(diff) - 1
        let g = (sigmoid(diff) - 1.0) * scale;
        dlogits[a] += g;
        dlogits[b] -= g;
    }
    (loss * scale, dlogits)
}

/// Relu on/off pattern of every hidden unit for each scored item, layer by
/// layer. Finite-difference checks use it to skip perturbations that cross a
/// kink.
pub fn active_units(state: &ClientState, items: &[u32]) -> Vec<bool> {
    forward(state, items)
        .acts
        .iter()
        .flat_map(|a| a.iter().map(|&v| v > 0.0))
        .collect()
}

/// `σ(wᵀ FFN([u, v]))`.
pub fn predict_rating(state: &ClientState, item: u32) -> Result<f64> {
    state.check_item(item)?;
    Ok(sigmoid(forward(state, &[item]).logits[0]))
}

/// Pre-sigmoid score of every item, in item order.
pub fn score_all(state: &ClientState) -> Vec<f64> {
    score_all_with_user(state, &state.user)
}

pub fn score_all_with_user(state: &ClientState, user: &[f64]) -> Vec<f64> {
    const CHUNK: u32 = 512;
    let n = state.num_items() as u32;
    let mut out = Vec::with_capacity(n as usize);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let items: Vec<u32> = (start..end).collect();
        out.extend(forward_with_user(state, user, &items).logits);
        start = end;
    }
    out
}

pub fn bpr_loss(state: &ClientState, batch: &TrainingBatch) -> Result<f64> {
    batch.validate(state)?;
    let (items, pos) = dedup_items(batch.pairs.iter().flat_map(|&(p, n)| [p, n]));
    let fwd = forward(state, &items);
    Ok(bpr_objective(&batch.pairs, &pos, &fwd.logits).0)
}

/// Analytic gradients of [`bpr_loss`]; item rows outside the batch are absent.
pub fn compute_gradients(state: &ClientState, batch: &TrainingBatch) -> Result<(f64, Gradients)> {
    batch.validate(state)?;
    let (items, pos) = dedup_items(batch.pairs.iter().flat_map(|&(p, n)| [p, n]));
    Ok(objective_gradients(state, &state.user, &items, |logits| {
        bpr_objective(&batch.pairs, &pos, logits)
    }))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one client. Item-row moments are kept only for rows
/// that have received a gradient and are updated lazily.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    user: Vec<f64>,
    net: Vec<f64>,
    items: HashMap<u32, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one Adam step. `update_user = false` freezes the user embedding.
    pub fn apply(&mut self, state: &mut ClientState, grads: &Gradients, lr: f64, update_user: bool) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let step = |param: &mut [f64], grad: &[f64], moments: &mut [f64]| {
            let n = param.len();
            let (m, v) = moments.split_at_mut(n);
            for k in 0..n {
                let g = grad[k];
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                param[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        };
        if update_user {
            if self.user.is_empty() {
                self.user = vec![0.0; 2 * state.user.len()];
            }
            step(&mut state.user, &grads.user, &mut self.user);
        }
        if self.net.is_empty() {
            self.net = vec![0.0; 2 * state.net.data.len()];
        }
        step(&mut state.net.data, &grads.net.data, &mut self.net);
        let d = state.embed_dim();
        for (item, g) in grads.items.iter() {
            let moments = self.items.entry(item).or_insert_with(|| vec![0.0; 2 * d]);
            step(state.items.row_mut(item as usize), g, moments);
        }
    }
}

/// One Adam step on the batch's BPR loss. Returns the loss and gradients
/// evaluated before the step.
pub fn local_train_step(
    state: &mut ClientState,
    batch: &TrainingBatch,
    optimizer: &mut AdamState,
    lr: f64,
) -> Result<(f64, Gradients)> {
    if !(lr >= 0.0) {
        return Err(Error::contract("learning rate must be non-negative"));
    }
    let (loss, grads) = compute_gradients(state, batch)?;
    optimizer.apply(state, &grads, lr, true);
    Ok((loss, grads))
}

/// Sums item rows across packets (in the given order) and divides by the
/// packet count, so rows missing from a packet count as zeros.
pub fn mean_item_rows(packets: &[&GradientPacket]) -> SparseRows {
    let dim = packets.first().map(|p| p.item_grad.dim()).unwrap_or(0);
    let mut acc = RowAccumulator::new(dim);
    for p in packets {
        for (item, row) in p.item_grad.iter() {
            acc.add(item, 1.0, row);
        }
    }
    let mut rows = acc.finish();
    rows.scale(1.0 / packets.len().max(1) as f64);
    rows
}

pub fn mean_net_grad(packets: &[&GradientPacket]) -> Result<NetParams> {
    let first = packets.first().ok_or_else(|| Error::contract("no packets"))?;
    let mut acc = NetParams::zeros(&first.net_grad.shape);
    for p in packets {
        acc.check_same_shape(&p.net_grad)?;
        linalg::axpy(1.0, &p.net_grad.data, &mut acc.data);
    }
    let inv = 1.0 / packets.len() as f64;
    acc.data.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Sorts packets by sender so sums are order independent.
pub fn sorted_by_sender<'a>(packets: &[&'a GradientPacket]) -> Vec<&'a GradientPacket> {
    let mut v = packets.to_vec();
    v.sort_by_key(|p| p.sender);
    v
}

fn check_packets(state: &ClientState, packets: &[&GradientPacket]) -> Result<()> {
    if packets.is_empty() {
        return Err(Error::contract("no packets to aggregate"));
    }
    for p in packets {
        state.net.check_same_shape(&p.net_grad)?;
        if p.item_grad.dim() != state.embed_dim() {
            return Err(Error::contract("item gradient dimension mismatch"));
        }
        if let Some(&k) = p.item_grad.keys().last() {
            state.check_item(k)?;
        }
    }
    Ok(())
}

/// `V ← V − lr·rows`.
pub fn apply_item_update(state: &mut ClientState, rows: &SparseRows, lr: f64) {
    for (item, g) in rows.iter() {
        linalg::axpy(-lr, g, state.items.row_mut(item as usize));
    }
}

/// FedAvg neighbor step: `V ← V − lr·mean(∇V)`, `Θ ← Θ − lr·mean(∇Θ)`.
pub fn apply_neighbor_aggregate(state: &mut ClientState, packets: &[&GradientPacket], lr: f64) -> Result<()> {
    check_packets(state, packets)?;
    let packets = sorted_by_sender(packets);
    let rows = mean_item_rows(&packets);
    let net = mean_net_grad(&packets)?;
    apply_item_update(state, &rows, lr);
    linalg::axpy(-lr, &net.data, &mut state.net.data);
    Ok(())
}

/// Accumulates weighted rows keyed by item into a [`SparseRows`].
pub(crate) struct RowAccumulator {
    dim: usize,
    slots: HashMap<u32, usize>,
    keys: Vec<u32>,
    data: Vec<f64>,
}

impl RowAccumulator {
    pub fn new(dim: usize) -> Self {
        RowAccumulator {
            dim,
            slots: HashMap::new(),
            keys: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn add(&mut self, item: u32, weight: f64, row: &[f64]) {
        let slot = match self.slots.get(&item) {
            Some(&s) => s,
            None => {
                let s = self.keys.len();
                self.slots.insert(item, s);
                self.keys.push(item);
                self.data.resize(self.data.len() + self.dim, 0.0);
                s
            }
        };
        linalg::axpy(weight, row, &mut self.data[slot * self.dim..(slot + 1) * self.dim]);
    }

    pub fn finish(self) -> SparseRows {
        let mut order: Vec<usize> = (0..self.keys.len()).collect();
        order.sort_unstable_by_key(|&s| self.keys[s]);
        let mut keys = Vec::with_capacity(order.len());
        let mut data = Vec::with_capacity(self.data.len());
        for s in order {
            keys.push(self.keys[s]);
            data.extend_from_slice(&self.data[s * self.dim..(s + 1) * self.dim]);
        }
        SparseRows {
            dim: self.dim,
            keys,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn toy_shape() -> NetShape {
        NetShape::new(4, vec![8, 6, 4]).unwrap()
    }

    fn toy_state(seed: u64) -> ClientState {
        ClientState::random(&toy_shape(), 20, 0.5, &mut rng::stream(seed, &[]))
    }

    #[test]
    fn shape_offsets_chain() {
        let s = NetShape::new(32, vec![64, 32, 16]).unwrap();
        assert_eq!(s.layer_dims(0), (64, 64));
        assert_eq!(s.layer_dims(1), (64, 32));
        assert_eq!(s.layer_dims(2), (32, 16));
        assert_eq!(s.len(), 64 * 64 + 64 + 64 * 32 + 32 + 32 * 16 + 16 + 16);
    }

    #[test]
    fn zero_network_predicts_half() {
        let mut st = toy_state(1);
        st.net.data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..20 {
            assert_eq!(predict_rating(&st, i).unwrap(), 0.5);
        }
    }

    #[test]
    fn single_path_network_gives_sigmoid_of_dot() {
        // embed_dim 1, one hidden unit computing relu(u + v), projection 1.
        let shape = NetShape::new(1, vec![1]).unwrap();
        let mut st = ClientState::zeros(&shape, 1);
        st.user[0] = 1.0;
        st.items.data[0] = 1.0;
        // W0 = [0.5, 0.5] so the hidden unit is (u + v) / 2 = u·v = 1 here.
        st.net.data[0] = 0.5;
        st.net.data[1] = 0.5;
        let proj = shape.projection_offset();
        st.net.data[proj] = 1.0;
        let p = predict_rating(&st, 0).unwrap();
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn predict_out_of_range_is_index_error() {
        let st = toy_state(2);
        assert!(matches!(predict_rating(&st, 20), Err(Error::Index { index: 20, len: 20 })));
    }

    #[test]
    fn equal_logits_give_ln2() {
        let mut st = toy_state(3);
        st.net.data.iter_mut().for_each(|v| *v = 0.0);
        let loss = bpr_loss(&st, &TrainingBatch::new(vec![(0, 1)])).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_and_degenerate_batches_rejected() {
        let st = toy_state(4);
        assert!(bpr_loss(&st, &TrainingBatch::default()).is_err());
        assert!(bpr_loss(&st, &TrainingBatch::new(vec![(3, 3)])).is_err());
        assert!(compute_gradients(&st, &TrainingBatch::new(vec![(0, 99)])).is_err());
    }

    #[test]
    fn duplicated_batch_has_same_loss_and_gradients() {
        let st = toy_state(5);
        let b = TrainingBatch::new(vec![(0, 1), (2, 5), (7, 3)]);
        let mut d = b.clone();
        d.pairs.extend(b.pairs.clone());
        let (l1, g1) = compute_gradients(&st, &b).unwrap();
        let (l2, g2) = compute_gradients(&st, &d).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.net.data.iter().zip(&g2.net.data) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(g1.items.keys(), g2.items.keys());
    }

    #[test]
    fn gradients_are_sparse_in_items() {
        let st = toy_state(6);
        let (_, g) = compute_gradients(&st, &TrainingBatch::new(vec![(3, 7), (7, 3)])).unwrap();
        assert_eq!(g.items.keys(), &[3, 7]);
    }

    #[test]
    fn lr_zero_and_zero_gradient_leave_state_unchanged() {
        let mut st = toy_state(7);
        let before = st.clone();
        let mut opt = AdamState::new();
        local_train_step(&mut st, &TrainingBatch::new(vec![(0, 1)]), &mut opt, 0.0).unwrap();
        assert_eq!(st, before);

        // Zero network => logits constant => zero gradient everywhere.
        let mut z = toy_state(8);
        z.net.data.iter_mut().for_each(|v| *v = 0.0);
        let before = z.clone();
        let mut opt = AdamState::new();
        local_train_step(&mut z, &TrainingBatch::new(vec![(0, 1), (4, 2)]), &mut opt, 0.01).unwrap();
        assert_eq!(z, before);
    }

    fn packet(sender: usize, shape: &NetShape, rows: Vec<(u32, Vec<f64>)>) -> GradientPacket {
        GradientPacket {
            sender,
            round: 1,
            item_grad: SparseRows::from_pairs(shape.embed_dim, rows),
            net_grad: NetParams::zeros(shape),
        }
    }

    #[test]
    fn neighbor_aggregate_is_mean() {
        let shape = NetShape::new(2, vec![2]).unwrap();
        let mut st = ClientState::zeros(&shape, 3);
        let a = packet(0, &shape, vec![(0, vec![1.0, 1.0])]);
        let b = packet(1, &shape, vec![(0, vec![3.0, 3.0])]);
        apply_neighbor_aggregate(&mut st, &[&a, &b], 1.0).unwrap();
        assert_eq!(st.items.row(0), &[-2.0, -2.0]);
        assert_eq!(st.items.row(1), &[0.0, 0.0]);

        let mut st2 = ClientState::zeros(&shape, 3);
        let z = packet(0, &shape, vec![(1, vec![0.0, 0.0])]);
        apply_neighbor_aggregate(&mut st2, &[&z], 1.0).unwrap();
        assert_eq!(st2, ClientState::zeros(&shape, 3));
    }

    #[test]
    fn neighbor_aggregate_rejects_shape_mismatch() {
        let shape = NetShape::new(2, vec![2]).unwrap();
        let other = NetShape::new(2, vec![3]).unwrap();
        let mut st = ClientState::zeros(&shape, 3);
        let p = packet(0, &other, vec![]);
        assert!(apply_neighbor_aggregate(&mut st, &[&p], 1.0).is_err());
        assert!(apply_neighbor_aggregate(&mut st, &[], 1.0).is_err());
    }

    #[test]
    fn neighbor_aggregate_is_order_independent() {
        let shape = toy_shape();
        let mut r = rng::stream(9, &[]);
        let packets: Vec<GradientPacket> = (0..5)
            .map(|s| {
                let rows = (0..4).map(|i| (i * 3 + s as u32 % 2, (0..4).map(|_| r.random::<f64>()).collect())).collect();
                let mut p = packet(s, &shape, rows);
                p.net_grad.data.iter_mut().for_each(|v| *v = r.random());
                p
            })
            .collect();
        let base = toy_state(10);
        let mut a = base.clone();
        let mut b = base.clone();
        let fwd: Vec<&GradientPacket> = packets.iter().collect();
        let rev: Vec<&GradientPacket> = packets.iter().rev().collect();
        apply_neighbor_aggregate(&mut a, &fwd, 0.3).unwrap();
        apply_neighbor_aggregate(&mut b, &rev, 0.3).unwrap();
        assert_eq!(a, b);
    }

    /// Relative error with a small absolute floor so exact zeros compare sanely.
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn check_fd(st: &ClientState, batch: &TrainingBatch) {
        let (_, g) = compute_gradients(st, batch).unwrap();
        let h = 1e-5;
        let loss = |s: &ClientState| bpr_loss(s, batch).unwrap();
        let items: Vec<u32> = (0..st.num_items() as u32).collect();
        // None when the perturbation flips a relu.
        let fd = |mutate: &dyn Fn(&mut ClientState, f64)| {
            let mut a = st.clone();
            let mut b = st.clone();
            mutate(&mut a, h);
            mutate(&mut b, -h);
            (active_units(&a, &items) == active_units(&b, &items)).then(|| (loss(&a) - loss(&b)) / (2.0 * h))
        };
        for k in 0..st.user.len() {
            let Some(n) = fd(&|s, e| s.user[k] += e) else { continue };
            assert!(rel_err(g.user[k], n) < 1e-4, "user[{k}]: {} vs {n}", g.user[k]);
        }
        for (item, row) in g.items.iter() {
            for k in 0..row.len() {
                let Some(n) = fd(&|s, e| s.items.row_mut(item as usize)[k] += e) else { continue };
                assert!(rel_err(row[k], n) < 1e-4, "item {item}[{k}]: {} vs {n}", row[k]);
            }
        }
        for k in 0..st.net.data.len() {
            let Some(n) = fd(&|s, e| s.net.data[k] += e) else { continue };
            assert!(rel_err(g.net.data[k], n) < 1e-4, "net[{k}]: {} vs {n}", g.net.data[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let st = toy_state(100 + seed);
            let batch = TrainingBatch::new(vec![(0, 1), (2, 3), (0, 5), (7, 2)]);
            check_fd(&st, &batch);
        }
    }

    #[test]
    fn one_adam_step_usually_descends() {
        let mut ok = 0;
        for seed in 0..100 {
            let shape = NetShape::new(32, vec![64, 32, 16]).unwrap();
            let mut st = ClientState::random(&shape, 20, 0.05, &mut rng::stream(seed, &[]));
            let batch = TrainingBatch::new(vec![(0, 1), (2, 3), (4, 5), (6, 7)]);
            let before = bpr_loss(&st, &batch).unwrap();
            local_train_step(&mut st, &batch, &mut AdamState::new(), 1e-3).unwrap();
            if bpr_loss(&st, &batch).unwrap() <= before {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }
}

//! The round engine.
//!
//! One round runs in barrier-separated phases:
//!
//! 1. on refresh rounds the server sketches every client (adversaries
//!    included) and reassigns neighbors;
//! 2. every client that behaves honestly this round trains one local pass
//!    and emits a packet;
//! 3. adversaries that are attacking absorb their neighbors' packets, adapt
//!    and emit a poisoned packet instead;
//! 4. every client applies its neighbors' final packets, benign clients
//!    through the configured defense;
//! 5. the round counter advances.
//!
//! All cross-client reads happen between phases, every client draws from
//! its own seeded stream and every reduction runs in sender order, so the
//! result does not depend on thread scheduling.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::attacks::{
    adversary_collab_update, boosted_gradients, build_adversary_dataset, pamn_poison, select_substitute_items,
    update_adversary_user_embedding, AdversaryState, Attack, AttackCoordinator, AttackParams,
};
use crate::config::{ExperimentConfig, Similarity};
use crate::dataset::{sample_excluding, Dataset};
use crate::defenses::{aggregate_item_grads, DefenseConfig, MemoryBank, UcsuParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::{exposure_rate, hit_rate, top_k_from_scores, MetricsRecord, UserView};
use crate::model::{
    apply_item_update, bpr_objective, dedup_items, mean_net_grad, objective_gradients, score_all, AdamState,
    ClientState, GradientPacket, NetParams, NetShape, RowAccumulator,
};
use crate::neighbors::{
    assign_from_matrix, cosine_similarity, raw_cosine_similarity, similarity_matrix, sketch_item_table,
    Hyperplanes, NeighborMap, Sketch,
};
use crate::rng::{self, derive_seed, domain};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundStats {
    pub round: u64,
    pub refreshed: bool,
    /// Mean local BPR loss over benign clients' batches this round.
    pub mean_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsTimeline {
    pub records: Vec<MetricsRecord>,
    pub rounds: Vec<RoundStats>,
}

pub struct World {
    pub config: ExperimentConfig,
    pub dataset: Arc<Dataset>,
    /// Benign clients, indexed by user.
    pub clients: Vec<ClientState>,
    optimizers: Vec<AdamState>,
    banks: Vec<MemoryBank>,
    /// Adversaries; adversary `k` has client id `num_users + k`.
    pub adversaries: Vec<AdversaryState>,
    pub neighbor_map: NeighborMap,
    pub hyperplanes: Hyperplanes,
    pub targets: Vec<u32>,
    /// Rounds completed so far.
    pub round: u64,
    pub rng_root: u64,
}

/// Picks `count` targets among the coldest tenth of items by train
/// popularity.
pub fn cold_targets(dataset: &Dataset, count: usize, seed: u64) -> Vec<u32> {
    let pop = dataset.train_popularity();
    let mut items: Vec<u32> = (0..dataset.num_items as u32).collect();
    items.sort_by_key(|&i| (pop[i as usize], i));
    let pool = count.max(dataset.num_items.div_ceil(10)).min(items.len());
    let mut pool: Vec<u32> = items[..pool].to_vec();
    pool.shuffle(&mut rng::stream(seed, &[domain::TARGETS]));
    pool.truncate(count);
    pool.sort_unstable();
    pool
}

fn resolve_targets(config: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<u32>> {
    if config.target_ids.is_empty() {
        if config.num_targets > dataset.num_items {
            return Err(Error::config("num_targets exceeds the number of items"));
        }
        return Ok(cold_targets(dataset, config.num_targets, config.seed));
    }
    let mut out = Vec::new();
    for id in &config.target_ids {
        let idx = dataset
            .item_index(id)
            .ok_or_else(|| Error::config(format!("target item `{id}` is not in the dataset")))?;
        out.push(idx);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl World {
    pub fn num_users(&self) -> usize {
        self.clients.len()
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len() + self.adversaries.len()
    }

    pub fn adversary_ids(&self) -> Vec<usize> {
        (self.num_users()..self.num_clients()).collect()
    }

    pub fn state(&self, id: usize) -> &ClientState {
        if id < self.clients.len() {
            &self.clients[id]
        } else {
            &self.adversaries[id - self.clients.len()].base
        }
    }

    /// Memory bank of benign client `u`.
    pub fn bank(&self, u: usize) -> &MemoryBank {
        &self.banks[u]
    }

    fn attack_params(&self) -> AttackParams {
        AttackParams {
            lambda: self.config.lambda,
            p: self.config.p,
            substitutes: self.config.substitutes,
            finetune_steps: self.config.finetune_steps,
            lr: self.config.attack_lr,
            receiver_lr: self.config.collab_lr,
            top_k: self.config.top_k,
            boost_weight: self.config.boost_weight,
        }
    }

    fn defense_config(&self) -> DefenseConfig {
        DefenseConfig {
            kind: self.config.defense,
            ucsu: UcsuParams {
                mu: self.config.mu,
                nu: self.config.nu,
                p: self.config.p,
                clip: self.config.ucsu_clip,
                adaptive: self.config.ucsu_adaptive,
            },
            trim: self.config.trim_k,
        }
    }

    /// Whether adversaries send poisoned packets in (1-based) round `t`.
    fn attacking(&self, t: u64) -> bool {
        t >= 2 && self.config.attack != Attack::None
    }

    fn refresh_neighbors(&mut self, t: u64) -> Result<()> {
        let n = self.num_clients();
        let sim = match self.config.similarity {
            Similarity::Sketch => {
                let sketches: Vec<Sketch> = (0..n)
                    .into_par_iter()
                    .map(|id| sketch_item_table(&self.state(id).items, &self.hyperplanes))
                    .collect::<Result<_>>()?;
                similarity_matrix(n, |i, j| cosine_similarity(&sketches[i], &sketches[j]))?
            }
            Similarity::Raw => {
                similarity_matrix(n, |i, j| raw_cosine_similarity(&self.state(i).items, &self.state(j).items))?
            }
        };
        self.neighbor_map = assign_from_matrix(&sim, n, self.config.neighbors, t)?;
        Ok(())
    }

    /// Runs one round.
    pub fn run_round(&mut self) -> Result<RoundStats> {
        self.run_round_with(|_, _| {})
    }

    /// Runs one round, letting `tamper` rewrite each client's outgoing
    /// packet before anyone receives it.
    pub fn run_round_with(&mut self, tamper: impl Fn(usize, &mut GradientPacket) + Sync) -> Result<RoundStats> {
        let t = self.round + 1;
        let refreshed = (t - 1) % self.config.refresh == 0;
        if refreshed && self.num_clients() >= 2 {
            self.refresh_neighbors(t)?;
        }

        let cfg = &self.config;
        let root = self.rng_root;
        let attacking = self.attacking(t);
        let dataset = Arc::clone(&self.dataset);
        let targets = self.targets.clone();
        let num_users = self.clients.len();

        // Phase 2: honest local training.
        let benign: Vec<(GradientPacket, f64)> = self
            .clients
            .par_iter_mut()
            .zip(self.optimizers.par_iter_mut())
            .enumerate()
            .map(|(u, (state, opt))| {
                let pairs = dataset.pairs(u);
                local_epoch(state, opt, &pairs, dataset.neg_ratio, cfg, LocalRun::plain(u, t, root))
            })
            .collect();
        let mut packets: Vec<Option<GradientPacket>> = Vec::with_capacity(self.num_clients());
        let mut loss_sum = 0.0;
        for (p, l) in benign {
            loss_sum += l;
            packets.push(Some(p));
        }
        let mean_train_loss = if num_users > 0 { loss_sum / num_users as f64 } else { 0.0 };

        let adv_packets: Vec<Option<GradientPacket>> = self
            .adversaries
            .par_iter_mut()
            .map(|adv| {
                let honest_turn = !attacking || !adv.strategy.is_model_poisoning();
                if !honest_turn {
                    return None;
                }
                let pairs = adv.pairs();
                let boost = (attacking && adv.strategy == Attack::Eb).then_some(targets.as_slice());
                let run = LocalRun {
                    sender: adv.id,
                    round: t,
                    root,
                    boost,
                    update_user: adv.strategy != Attack::Psmu,
                };
                Some(local_epoch(&mut adv.base, &mut adv.optimizer, &pairs, adv.neg_ratio, cfg, run).0)
            })
            .collect();
        packets.extend(adv_packets);

        // Phase 3: adaptive adversaries.
        if attacking && self.config.attack.is_model_poisoning() {
            let coord = AttackCoordinator::snapshot(
                self.adversaries.iter().map(|a| a.base.user.as_slice()),
                self.config.lambda,
                self.config.p,
            );
            let params = self.attack_params();
            let collab_lr = self.config.collab_lr;
            let map = &self.neighbor_map;
            let honest = &packets;
            let poisoned: Vec<Result<GradientPacket>> = self
                .adversaries
                .par_iter_mut()
                .map(|adv| {
                    let received: Vec<&GradientPacket> = map
                        .neighbors(adv.id)
                        .iter()
                        .filter_map(|&k| honest[k].as_ref())
                        .collect();
                    if !received.is_empty() {
                        adversary_collab_update(adv, &received, collab_lr)?;
                    }
                    if adv.strategy == Attack::Pamn {
                        update_adversary_user_embedding(adv, &coord, params.lr);
                    }
                    adv.substitutes = select_substitute_items(&adv.base, &targets, params.substitutes);
                    Ok(pamn_poison(adv, &targets, &params, t))
                })
                .collect();
            for (k, p) in poisoned.into_iter().enumerate() {
                packets[num_users + k] = Some(p?);
            }
        }

        let packets: Vec<Option<Arc<GradientPacket>>> = packets
            .into_par_iter()
            .enumerate()
            .map(|(id, p)| {
                p.map(|mut p| {
                    tamper(id, &mut p);
                    Arc::new(p)
                })
            })
            .collect();

        // Phase 4: aggregation.
        let defense = self.defense_config();
        let collab_lr = self.config.collab_lr;
        let map = &self.neighbor_map;
        let gather = |id: usize| -> Vec<Arc<GradientPacket>> {
            let mut v: Vec<Arc<GradientPacket>> = map
                .neighbors(id)
                .iter()
                .filter_map(|&k| packets[k].clone())
                .collect();
            v.sort_by_key(|p| p.sender);
            v
        };
        self.clients
            .par_iter_mut()
            .zip(self.banks.par_iter_mut())
            .enumerate()
            .try_for_each(|(u, (state, bank))| -> Result<()> {
                let received = gather(u);
                let rows = aggregate_item_grads(&defense, Some(bank), &received, t)?;
                apply_item_update(state, &rows, collab_lr);
                if !received.is_empty() {
                    let refs: Vec<&GradientPacket> = received.iter().map(|p| p.as_ref()).collect();
                    let net = mean_net_grad(&refs)?;
                    linalg::axpy(-collab_lr, &net.data, &mut state.net.data);
                }
                Ok(())
            })?;
        let plain = DefenseConfig {
            kind: crate::defenses::Defense::None,
            ..defense
        };
        let poisoning = attacking && self.config.attack.is_model_poisoning();
        self.adversaries.par_iter_mut().try_for_each(|adv| -> Result<()> {
            if poisoning {
                return Ok(());
            }
            let received = gather(adv.id);
            if received.is_empty() {
                return Ok(());
            }
            let rows = aggregate_item_grads(&plain, None, &received, t)?;
            apply_item_update(&mut adv.base, &rows, collab_lr);
            let refs: Vec<&GradientPacket> = received.iter().map(|p| p.as_ref()).collect();
            linalg::axpy(-collab_lr, &mean_net_grad(&refs)?.data, &mut adv.base.net.data);
            Ok(())
        })?;

        let bad = self
            .clients
            .par_iter()
            .chain(self.adversaries.par_iter().map(|a| &a.base))
            .position_first(|s| !s.is_finite());
        if let Some(client) = bad {
            return Err(Error::Diverged { client, round: t });
        }

        self.round = t;
        Ok(RoundStats {
            round: t,
            refreshed,
            mean_train_loss,
        })
    }

    /// Each benign user's top-K list over non-train items.
    pub fn recommendation_lists(&self) -> Vec<Vec<u32>> {
        let k = self.config.top_k;
        self.clients
            .par_iter()
            .enumerate()
            .map(|(u, s)| top_k_from_scores(&score_all(s), k, &self.dataset.train[u]))
            .collect()
    }

    /// (HR@K, ER@K) over benign users.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let lists = self.recommendation_lists();
        let views: Vec<UserView> = lists
            .iter()
            .enumerate()
            .map(|(u, top)| UserView {
                top,
                train: &self.dataset.train[u],
                test: &self.dataset.test[u],
            })
            .collect();
        let hr = hit_rate(&views, self.config.hit_mode)?;
        let er = exposure_rate(&views, &self.targets)?;
        Ok((hr, er))
    }

    fn record(&self) -> Result<MetricsRecord> {
        let (hr, er) = self.evaluate()?;
        Ok(MetricsRecord {
            round: self.round,
            hr_at_k: hr,
            er_at_k: er,
            attack: self.config.attack.to_string(),
            defense: self.config.defense.to_string(),
            seed: self.config.seed,
        })
    }
}

/// Per-run context for one local pass.
struct LocalRun<'a> {
    sender: usize,
    round: u64,
    root: u64,
    /// Targets for the boosting term, if any.
    boost: Option<&'a [u32]>,
    update_user: bool,
}

impl LocalRun<'_> {
    fn plain(sender: usize, round: u64, root: u64) -> Self {
        LocalRun {
            sender,
            round,
            root,
            boost: None,
            update_user: true,
        }
    }
}

/// One shuffled pass over `pairs` (grouped in blocks of `ratio` per
/// positive) in Adam steps. The packet carries the mean of the per-batch
/// gradients. Returns the packet and the mean batch loss.
fn local_epoch(
    state: &mut ClientState,
    opt: &mut AdamState,
    pairs: &[(u32, u32)],
    ratio: usize,
    cfg: &ExperimentConfig,
    run: LocalRun<'_>,
) -> (GradientPacket, f64) {
    let dim = state.embed_dim();
    let mut rows = RowAccumulator::new(dim);
    let mut net = NetParams::zeros(&state.net.shape);
    let ratio = ratio.max(1);
    let mut blocks: Vec<usize> = (0..pairs.len().div_ceil(ratio)).collect();
    blocks.shuffle(&mut rng::stream(
        run.root,
        &[domain::LOCAL_TRAIN, run.sender as u64, run.round],
    ));
    let order: Vec<(u32, u32)> = blocks
        .iter()
        .flat_map(|&b| pairs[b * ratio..((b + 1) * ratio).min(pairs.len())].iter().copied())
        .collect();
    let batches: Vec<&[(u32, u32)]> = order.chunks(cfg.batch_size).collect();
    let weight = 1.0 / batches.len().max(1) as f64;
    let mut loss_sum = 0.0;
    for batch in &batches {
        let (loss, grads) = match run.boost {
            Some(targets) => boosted_gradients(state, batch, targets, cfg.boost_weight),
            None => {
                let (items, pos) = dedup_items(batch.iter().flat_map(|&(a, b)| [a, b]));
                let user = state.user.clone();
                objective_gradients(state, &user, &items, |logits| bpr_objective(batch, &pos, logits))
            }
        };
        loss_sum += loss;
        for (item, row) in grads.items.iter() {
            rows.add(item, weight, row);
        }
        linalg::axpy(weight, &grads.net.data, &mut net.data);
        opt.apply(state, &grads, cfg.lr, run.update_user);
    }
    let packet = GradientPacket {
        sender: run.sender,
        round: run.round,
        item_grad: rows.finish(),
        net_grad: net,
    };
    (packet, loss_sum * weight)
}

/// Builds the initial world: client models, targets, adversaries and
/// hyperplanes. No neighbors are assigned until the first round.
pub fn init_world(config: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<World> {
    let shape = NetShape::new(config.embed_dim, config.layer_widths.clone())?;
    let root = config.seed;
    let targets = resolve_targets(config, &dataset)?;
    if targets.is_empty() {
        return Err(Error::config("no target items"));
    }
    let num_items = dataset.num_items;
    let num_users = dataset.num_users;
    let shared = config.shared_init.then(|| {
        let mut r = rng::stream(root, &[domain::SHARED_INIT]);
        ClientState::random(&shape, num_items, config.init_scale, &mut r)
    });
    let initial = |id: usize| -> ClientState {
        let mut r = rng::stream(root, &[domain::CLIENT_INIT, id as u64]);
        match &shared {
            Some(s) => ClientState {
                user: ClientState::random(&shape, 0, config.init_scale, &mut r).user,
                ..s.clone()
            },
            None => ClientState::random(&shape, num_items, config.init_scale, &mut r),
        }
    };
    let clients: Vec<ClientState> = (0..num_users).into_par_iter().map(initial).collect();

    let attack = config.attack;
    let num_adv = if attack == Attack::None {
        0
    } else {
        config.adversary_count(num_users)
    };
    let shared_user: Vec<f64> = {
        let mut r = rng::stream(root, &[domain::SHARED_USER]);
        ClientState::random(&shape, 0, config.init_scale, &mut r).user
    };
    let mut adversaries = Vec::with_capacity(num_adv);
    for k in 0..num_adv {
        let id = num_users + k;
        let data = build_adversary_dataset(
            num_items,
            &targets,
            config.alpha,
            config.neg_ratio,
            derive_seed(root, &[domain::ADVERSARY_DATA, id as u64]),
        )?;
        let mut order = data.positives;
        let mut negatives = data.negatives;
        if attack == Attack::Ra {
            let mut exclude: Vec<u32> = order.iter().chain(&targets).chain(&negatives).copied().collect();
            exclude.sort_unstable();
            exclude.dedup();
            let mut r = rng::stream(root, &[domain::ADVERSARY_DATA, id as u64, 1]);
            let extra = sample_excluding(&mut r, num_items, &exclude, targets.len() * config.neg_ratio);
            order.extend(&targets);
            negatives.extend(extra);
        }
        let mut positives = order.clone();
        positives.sort_unstable();
        let mut base = initial(id);
        if attack == Attack::Psmu {
            base.user = shared_user.clone();
        }
        adversaries.push(AdversaryState {
            id,
            base,
            optimizer: AdamState::new(),
            positives,
            negatives,
            positive_order: order,
            neg_ratio: config.neg_ratio,
            substitutes: Vec::new(),
            strategy: attack,
        });
    }
    debug_assert!(adversaries
        .iter()
        .all(|a| attack == Attack::Ra || a.positives.iter().all(|p| !targets.contains(p))));

    let hyperplanes = Hyperplanes::gaussian(
        config.sketch_dim,
        config.embed_dim,
        &mut rng::stream(root, &[domain::HYPERPLANES]),
    );
    let num_clients = num_users + adversaries.len();
    Ok(World {
        config: config.clone(),
        optimizers: vec![AdamState::new(); num_users],
        banks: (0..num_users)
            .map(|_| MemoryBank::new(config.capacity_rounds, config.bank_retain))
            .collect(),
        clients,
        adversaries,
        neighbor_map: NeighborMap::empty(num_clients),
        hyperplanes,
        targets,
        round: 0,
        rng_root: root,
        dataset,
    })
}

/// Runs `config.rounds` rounds, evaluating at round 0, every `eval_every`
/// rounds and at the last round.
pub fn run_experiment(config: &ExperimentConfig, dataset: Arc<Dataset>) -> Result<MetricsTimeline> {
    run_experiment_with(config, dataset, |_| {})
}

/// [`run_experiment`] with a callback after each recorded evaluation.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    dataset: Arc<Dataset>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<MetricsTimeline> {
    let mut world = init_world(config, dataset)?;
    let mut timeline = MetricsTimeline::default();
    let first = world.record()?;
    on_record(&first);
    timeline.records.push(first);
    for _ in 0..config.rounds {
        let stats = world.run_round()?;
        timeline.rounds.push(stats);
        if world.round % config.eval_every == 0 || world.round == config.rounds {
            let rec = world.record()?;
            on_record(&rec);
            timeline.records.push(rec);
        }
    }
    Ok(timeline)
}

mod common;

use std::sync::{Arc, Mutex};

use common::{tiny_config, tiny_dataset, with};
use decrec::dataset::{split_and_sample, Preprocessed};
use decrec::simulation::{init_world, run_experiment};
use decrec::Error;

fn two_user_dataset() -> Arc<decrec::dataset::Dataset> {
    let pre = Preprocessed {
        user_ids: vec!["a".into(), "b".into()],
        item_ids: (0..12).map(|i| i.to_string()).collect(),
        positives: vec![vec![0, 1, 2, 3, 4], vec![3, 4, 5, 6, 7]],
    };
    Arc::new(split_and_sample(&pre, 0.8, 2, 1).unwrap())
}

#[test]
fn two_clients_each_apply_one_neighbor_packet() {
    let c = with(tiny_config(), &[("neighbors", "1"), ("defense", "ucsu"), ("num_targets", "1")]);
    let mut w = init_world(&c, two_user_dataset()).unwrap();
    let sent = Mutex::new(vec![0usize; 2]);
    w.run_round_with(|id, p| sent.lock().unwrap()[id] = p.item_grad.len())
        .unwrap();
    let sent = sent.into_inner().unwrap();
    assert_eq!(w.neighbor_map.neighbors(0), &[1]);
    assert_eq!(w.neighbor_map.neighbors(1), &[0]);
    assert_eq!(w.bank(0).counters().0, sent[1] as u64);
    assert_eq!(w.bank(1).counters().0, sent[0] as u64);
}

#[test]
fn refresh_fires_at_one_based_period_starts() {
    let c = with(tiny_config(), &[("refresh", "10"), ("rounds", "25")]);
    let mut w = init_world(&c, tiny_dataset(20, 30, 1)).unwrap();
    let mut fired = Vec::new();
    for _ in 0..25 {
        let s = w.run_round().unwrap();
        if s.refreshed {
            fired.push(s.round);
        }
    }
    assert_eq!(fired, vec![1, 11, 21]);
}

#[test]
fn clean_training_loss_decreases() {
    let c = with(tiny_config(), &[("rounds", "50")]);
    let mut w = init_world(&c, tiny_dataset(100, 80, 2)).unwrap();
    let stats: Vec<_> = (0..50).map(|_| w.run_round().unwrap()).collect();
    assert!(
        stats[49].mean_train_loss < stats[0].mean_train_loss,
        "{} vs {}",
        stats[49].mean_train_loss,
        stats[0].mean_train_loss
    );
}

#[test]
fn evaluation_schedule_and_empty_run() {
    let ds = tiny_dataset(20, 30, 3);
    let c = with(tiny_config(), &[("rounds", "25"), ("eval_every", "5")]);
    let t = run_experiment(&c, Arc::clone(&ds)).unwrap();
    let rounds: Vec<u64> = t.records.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![0, 5, 10, 15, 20, 25]);

    let c = with(tiny_config(), &[("rounds", "7"), ("eval_every", "5")]);
    let rounds: Vec<u64> = run_experiment(&c, Arc::clone(&ds)).unwrap().records.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![0, 5, 7]);

    let c = with(tiny_config(), &[("rounds", "0")]);
    let t = run_experiment(&c, ds).unwrap();
    assert_eq!(t.records.len(), 1);
    assert_eq!(t.records[0].round, 0);
    assert!(t.rounds.is_empty());
}

#[test]
fn adversaries_are_appended_and_never_hold_targets() {
    let ds = tiny_dataset(40, 60, 4);
    let n = ds.num_users;
    let c = with(tiny_config(), &[("attack", "pamn"), ("xi", "0.05")]);
    let mut w = init_world(&c, Arc::clone(&ds)).unwrap();
    let expected = (0.05 * n as f64).ceil() as usize;
    assert_eq!(w.adversary_ids(), (n..n + expected).collect::<Vec<_>>());
    for _ in 0..4 {
        w.run_round().unwrap();
        assert_eq!(w.adversaries.len(), expected);
        for a in &w.adversaries {
            assert!(a.positives.iter().all(|p| !w.targets.contains(p)));
            assert_eq!(a.positives.len(), 8);
        }
    }

    let none = with(tiny_config(), &[("attack", "pamn"), ("xi", "0")]);
    assert!(init_world(&none, Arc::clone(&ds)).unwrap().adversaries.is_empty());
    let clean = with(tiny_config(), &[("attack", "none")]);
    assert!(init_world(&clean, ds).unwrap().adversaries.is_empty());
}

#[test]
fn cold_targets_come_from_the_coldest_decile() {
    let ds = tiny_dataset(60, 100, 5);
    let c = with(tiny_config(), &[("num_targets", "5")]);
    let w = init_world(&c, Arc::clone(&ds)).unwrap();
    let pop = ds.train_popularity();
    let mut sorted: Vec<usize> = pop.clone();
    sorted.sort_unstable();
    let decile = ds.num_items.div_ceil(10);
    let threshold = sorted[decile - 1];
    assert_eq!(w.targets.len(), 5);
    assert!(w.targets.iter().all(|&t| pop[t as usize] <= threshold));
}

#[test]
fn explicit_targets_must_exist() {
    let ds = tiny_dataset(20, 30, 6);
    let known = ds.item_ids[3].clone();
    let mut c = tiny_config();
    c.set("target_ids", &known).unwrap();
    assert_eq!(init_world(&c, Arc::clone(&ds)).unwrap().targets, vec![3]);
    c.set("target_ids", "no-such-item").unwrap();
    assert!(matches!(init_world(&c, ds), Err(Error::Config(_))));
}

#[test]
fn same_seed_same_world() {
    let ds = tiny_dataset(20, 30, 7);
    let c = with(tiny_config(), &[("attack", "pamn"), ("xi", "0.1")]);
    let a = init_world(&c, Arc::clone(&ds)).unwrap();
    let b = init_world(&c, Arc::clone(&ds)).unwrap();
    assert_eq!(a.clients, b.clients);
    assert_eq!(a.targets, b.targets);
    assert_eq!(a.adversaries.len(), b.adversaries.len());
    for (x, y) in a.adversaries.iter().zip(&b.adversaries) {
        assert_eq!(x.base, y.base);
        assert_eq!(x.positives, y.positives);
    }
    let other = with(c, &[("seed", "8")]);
    assert_ne!(init_world(&other, ds).unwrap().clients, a.clients);
}

#[test]
fn benign_state_depends_only_on_neighbor_packets() {
    let ds = tiny_dataset(30, 40, 8);
    let c = with(tiny_config(), &[("attack", "pamn"), ("xi", "0.1"), ("neighbors", "4")]);
    let mut reference = init_world(&c, Arc::clone(&ds)).unwrap();
    reference.run_round().unwrap();
    let victim = 0usize;
    let nbrs = reference.neighbor_map.neighbors(victim).to_vec();
    let outsider = (1..reference.num_clients()).find(|k| !nbrs.contains(k)).unwrap();

    let zero_from = |k: usize| {
        let mut w = init_world(&c, Arc::clone(&ds)).unwrap();
        w.run_round_with(|id, p| {
            if id == k {
                p.item_grad.scale(0.0);
                p.net_grad.data.iter_mut().for_each(|v| *v = 0.0);
            }
        })
        .unwrap();
        w
    };
    assert_eq!(zero_from(outsider).clients[victim], reference.clients[victim]);
    assert_ne!(zero_from(nbrs[0]).clients[victim], reference.clients[victim]);
}

#[test]
fn parallel_and_serial_runs_match() {
    let ds = tiny_dataset(30, 40, 9);
    for (attack, defense) in [("pamn", "ucsu"), ("eb", "krum"), ("psmu", "median")] {
        let c = with(tiny_config(), &[("attack", attack), ("defense", defense), ("xi", "0.1")]);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run_experiment(&c, Arc::clone(&ds)).unwrap())
        };
        let serial = run(1);
        assert_eq!(serial, run(4), "{attack}/{defense}");
        assert_eq!(serial, run(3), "{attack}/{defense}");
    }
}

#[test]
fn ucsu_bank_conserves_rows_in_a_world() {
    let ds = tiny_dataset(25, 40, 10);
    let c = with(tiny_config(), &[("attack", "pamn"), ("defense", "ucsu"), ("xi", "0.1"), ("capacity_rounds", "2")]);
    let mut w = init_world(&c, ds).unwrap();
    for _ in 0..6 {
        w.run_round().unwrap();
        for u in 0..w.num_users() {
            let (received, applied, evicted) = w.bank(u).counters();
            assert_eq!(received, w.bank(u).len() as u64 + applied + evicted);
        }
    }
}

#[test]
fn psmu_adversaries_share_a_fixed_user_embedding() {
    let ds = tiny_dataset(40, 50, 11);
    let c = with(tiny_config(), &[("attack", "psmu"), ("xi", "0.1")]);
    let mut w = init_world(&c, ds).unwrap();
    let initial = w.adversaries[0].base.user.clone();
    for _ in 0..4 {
        w.run_round().unwrap();
    }
    assert!(w.adversaries.len() >= 2);
    assert!(w.adversaries.iter().all(|a| a.base.user == initial));
}

fn mean_pairwise_distance(users: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..users.len() {
        for j in i + 1..users.len() {
            sum += users[i].iter().zip(&users[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn diversity_term_spreads_adversary_embeddings() {
    let mut wins = 0;
    let seeds = 10;
    for seed in 0..seeds {
        let ds = tiny_dataset(40, 50, 100 + seed);
        let spread = |lambda: &str| {
            let c = with(
                tiny_config(),
                &[("attack", "pamn"), ("xi", "0.1"), ("lambda", lambda), ("seed", &seed.to_string())],
            );
            let mut w = init_world(&c, Arc::clone(&ds)).unwrap();
            for _ in 0..5 {
                w.run_round().unwrap();
            }
            let users: Vec<Vec<f64>> = w.adversaries.iter().map(|a| a.base.user.clone()).collect();
            mean_pairwise_distance(&users)
        };
        if spread("0.1") >= spread("0") {
            wins += 1;
        }
    }
    assert!(wins * 10 >= seeds * 9, "{wins}/{seeds}");
}

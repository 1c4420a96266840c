//! Top-K ranking, hit rate and target exposure rate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{score_all, ClientState};

/// The `k` highest-scoring items not in `exclude` (sorted ascending),
/// descending by score, ties by ascending item id.
pub fn top_k_from_scores(scores: &[f64], k: usize, exclude: &[u32]) -> Vec<u32> {
    let mut cand: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let order = |a: &u32, b: &u32| scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b));
    if k < cand.len() {
        if k == 0 {
            return Vec::new();
        }
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    cand
}

pub fn top_k_list(state: &ClientState, k: usize, exclude: &[u32]) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::contract("top_k must be at least 1"));
    }
    Ok(top_k_from_scores(&score_all(state), k, exclude))
}

/// What the metrics need to know about one benign user.
#[derive(Debug, Clone, Copy)]
pub struct UserView<'a> {
    /// Recommendation list, computed excluding `train`.
    pub top: &'a [u32],
    /// Sorted train positives.
    pub train: &'a [u32],
    /// Sorted held-out positives.
    pub test: &'a [u32],
}

impl UserView<'_> {
    fn interacted(&self, item: u32) -> bool {
        self.train.binary_search(&item).is_ok() || self.test.binary_search(&item).is_ok()
    }
}

/// Mean over targets of the share of non-interacting users whose list holds
/// the target. A target every user interacted with contributes 0.
pub fn exposure_rate(users: &[UserView], targets: &[u32]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::contract("exposure rate needs at least one target"));
    }
    let mut total = 0.0;
    for &t in targets {
        let mut eligible = 0usize;
        let mut exposed = 0usize;
        for u in users.iter().filter(|u| !u.interacted(t)) {
            eligible += 1;
            if u.top.contains(&t) {
                exposed += 1;
            }
        }
        if eligible > 0 {
            total += exposed as f64 / eligible as f64;
        }
    }
    Ok(total / targets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitMode {
    /// 1 if any test item is in the list.
    #[default]
    Indicator,
    /// Share of the list that is test items.
    Fraction,
}

impl fmt::Display for HitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HitMode::Indicator => "indicator",
            HitMode::Fraction => "fraction",
        })
    }
}

impl FromStr for HitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indicator" => Ok(HitMode::Indicator),
            "fraction" => Ok(HitMode::Fraction),
            _ => Err(Error::config(format!("unknown hit mode `{s}`"))),
        }
    }
}

/// Mean over users with test items of the per-user hit score.
pub fn hit_rate(users: &[UserView], mode: HitMode) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for u in users.iter().filter(|u| !u.test.is_empty()) {
        n += 1;
        let hits = u.top.iter().filter(|i| u.test.binary_search(i).is_ok()).count();
        sum += match mode {
            HitMode::Indicator => (hits > 0) as u8 as f64,
            HitMode::Fraction if u.top.is_empty() => 0.0,
            HitMode::Fraction => hits as f64 / u.top.len() as f64,
        };
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no user has test items".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub hr_at_k: f64,
    pub er_at_k: f64,
    pub attack: String,
    pub defense: String,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn top_k_examples() {
        let scores = [0.9, 0.5, 0.1];
        assert_eq!(top_k_from_scores(&scores, 2, &[0]), vec![1, 2]);
        assert_eq!(top_k_from_scores(&scores, 10, &[]), vec![0, 1, 2]);
        assert_eq!(top_k_from_scores(&[0.3; 5], 3, &[1]), vec![0, 2, 3]);
    }

    #[test]
    fn exposure_examples() {
        let none: [u32; 0] = [];
        let hit = [7u32];
        let users = [
            UserView { top: &hit, train: &none, test: &none },
            UserView { top: &none, train: &none, test: &none },
        ];
        assert_eq!(exposure_rate(&users, &[7]).unwrap(), 0.5);
        assert_eq!(exposure_rate(&users, &[3]).unwrap(), 0.0);
        let both = [UserView { top: &hit, ..users[0] }, UserView { top: &hit, ..users[1] }];
        assert_eq!(exposure_rate(&both, &[7]).unwrap(), 1.0);
        // Everybody interacted with the target: 0/0 counts as 0.
        let trained = [UserView { top: &none, train: &hit, test: &none }];
        assert_eq!(exposure_rate(&trained, &[7]).unwrap(), 0.0);
        assert!(exposure_rate(&users, &[]).is_err());
    }

    #[test]
    fn hit_rate_examples() {
        let none: [u32; 0] = [];
        let (a, b) = ([4u32], [9u32]);
        let one = [UserView { top: &a, train: &none, test: &a }];
        assert_eq!(hit_rate(&one, HitMode::Indicator).unwrap(), 1.0);
        let two = [one[0], UserView { top: &a, train: &none, test: &b }];
        assert_eq!(hit_rate(&two, HitMode::Indicator).unwrap(), 0.5);
        let empty = [UserView { top: &a, train: &none, test: &none }];
        assert!(matches!(hit_rate(&empty, HitMode::Indicator), Err(Error::UndefinedMetric(_))));
        let top = [4u32, 5, 6, 9];
        let frac = [UserView { top: &top, train: &none, test: &[4, 9] }];
        assert_eq!(hit_rate(&frac, HitMode::Fraction).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn metrics_are_monotone_in_k(seed in 0u64..10_000) {
            let mut r = rng::stream(seed, &[]);
            let items = 12;
            let mut lists = Vec::new();
            let mut trains = Vec::new();
            let mut tests = Vec::new();
            let mut scores = Vec::new();
            for _ in 0..5 {
                let s: Vec<f64> = (0..items).map(|_| r.random_range(0..4) as f64).collect();
                let train: Vec<u32> = (0..items as u32).filter(|_| r.random::<f64>() < 0.2).collect();
                let test: Vec<u32> = (0..items as u32).filter(|i| train.binary_search(i).is_err() && r.random::<f64>() < 0.2).collect();
                scores.push(s);
                trains.push(train);
                tests.push(test);
            }
            let targets = [0u32, 5];
            let mut prev = (0.0, 0.0);
            for k in 1..=items {
                lists.clear();
                for u in 0..5 {
                    lists.push(top_k_from_scores(&scores[u], k, &trains[u]));
                }
                let views: Vec<UserView> = (0..5).map(|u| UserView { top: &lists[u], train: &trains[u], test: &tests[u] }).collect();
                let er = exposure_rate(&views, &targets).unwrap();
                prop_assert!(er >= prev.0);
                if let Ok(hr) = hit_rate(&views, HitMode::Indicator) {
                    prop_assert!(hr >= prev.1);
                    prev.1 = hr;
                }
                prev.0 = er;
            }
        }
    }
}

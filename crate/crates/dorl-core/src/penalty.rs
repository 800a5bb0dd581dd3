//! Reward penalties: the behavior-entropy bonus `P_E` and its combination
//! with the uncertainty penalty `P_U` into the modified reward
//! `r~ = r^ - lambda1 * P_U + lambda2 * P_E`.
//!
//! `P_E` sums, over each order `k`, the normalized entropy of the next-item
//! distribution the logs exhibit after the trajectory's last `k` items
//! (order-insensitive: windows are keyed by their sorted item multiset).
//! A pattern the logs never produced contributes 0 — the strongest
//! effective penalty, since nothing is known about user preferences there.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::LogTable;
use crate::error::{Error, Result};

/// Sorted k-item window pattern.
pub type PatternKey = Vec<u32>;

/// Counts of "which item followed this window" over all logged user
/// sequences, per window order `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyIndex {
    orders: Vec<usize>,
    n_items: usize,
    maps: HashMap<usize, HashMap<PatternKey, HashMap<u32, u32>>>,
}

impl EntropyIndex {
    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Next-item counts for a sorted pattern of length `k`, if seen.
    pub fn counts(&self, k: usize, pattern: &[u32]) -> Option<&HashMap<u32, u32>> {
        debug_assert!(pattern.windows(2).all(|w| w[0] <= w[1]));
        self.maps.get(&k).and_then(|m| m.get(pattern))
    }

    pub fn n_patterns(&self, k: usize) -> usize {
        self.maps.get(&k).map_or(0, |m| m.len())
    }
}

pub fn default_orders() -> Vec<usize> {
    vec![1, 2, 3]
}

/// Weights of the modified-reward formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Uncertainty weight (lambda1 >= 0).
    pub lambda1: f64,
    /// Entropy weight (lambda2 >= 0).
    pub lambda2: f64,
    /// Window orders of the entropy index.
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if self.orders.is_empty() || self.orders.iter().any(|&k| k == 0) {
            return Err(Error::Config("orders must be non-empty, each >= 1".into()));
        }
        Ok(())
    }
}

/// Scans every user sequence: each window of `k` consecutive items followed
/// by a next item adds one count under the sorted window key. Windows never
/// cross user boundaries.
pub fn build_entropy_index(logs: &LogTable, orders: &[usize]) -> EntropyIndex {
    let mut maps: HashMap<usize, HashMap<PatternKey, HashMap<u32, u32>>> = HashMap::new();
    for &k in orders {
        maps.entry(k).or_default();
    }
    for (_, seq) in logs.user_sequences() {
        let items: Vec<u32> = seq.iter().map(|r| r.item_id).collect();
        for &k in orders {
            if items.len() <= k {
                continue;
            }
            let map = maps.get_mut(&k).expect("order map pre-inserted");
            for start in 0..items.len() - k {
                let mut key: PatternKey = items[start..start + k].to_vec();
                key.sort_unstable();
                let next = items[start + k];
                *map.entry(key).or_default().entry(next).or_insert(0) += 1;
            }
        }
    }
    EntropyIndex {
        orders: orders.to_vec(),
        n_items: logs.n_items,
        maps,
    }
}

/// Entropy of a count map normalized into `[0, 1]`: `H / ln(c)` over the
/// `c` distinct next items, 0 when a single next item was ever observed.
pub fn normalized_entropy(counts: &HashMap<u32, u32>) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Validation("entropy of an empty count map".into()));
    }
    let c = counts.len();
    if c == 1 {
        return Ok(0.0);
    }
    let total: u64 = counts.values().map(|&v| v as u64).sum();
    let total = total as f64;
    let h: f64 = counts
        .values()
        .map(|&v| {
            let p = v as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (c as f64).ln()).min(1.0))
}

/// `P_E` for a trajectory whose most recent items (most recent last,
/// current action included) are `recent_items`: the sum over orders of the
/// normalized entropy at the sorted last-k window. Unseen patterns and
/// windows longer than the trajectory contribute 0.
pub fn entropy_penalty(index: &EntropyIndex, recent_items: &[u32]) -> f64 {
    let mut total = 0.0;
    for &k in &index.orders {
        if recent_items.len() < k {
            continue;
        }
        let mut key: PatternKey = recent_items[recent_items.len() - k..].to_vec();
        key.sort_unstable();
        if let Some(counts) = index.counts(k, &key) {
            total += normalized_entropy(counts).expect("stored count maps are non-empty");
        }
    }
    total
}

/// The modified reward `r~ = r^ - lambda1 * p_u + lambda2 * p_e`.
pub fn modified_reward(r_hat: f64, p_u: f64, p_e: f64, cfg: &PenaltyConfig) -> f64 {
    debug_assert!(p_u >= 0.0 && p_e >= 0.0);
    r_hat - cfg.lambda1 * p_u + cfg.lambda2 * p_e
}

/// KL divergence from a distribution over `|A|` actions to the uniform one:
/// `D = sum_a p_a ln(p_a |A|) = ln|A| - H(p)`, with `0 ln 0 = 0`.
pub fn kl_to_uniform(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::Validation("empty distribution".into()));
    }
    let sum: f64 = dist.iter().sum();
    if dist.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "input is not a probability vector (sum = {sum})"
        )));
    }
    let n = dist.len() as f64;
    let d: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * n).ln())
        .sum();
    let h: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    debug_assert!((d - (n.ln() - h)).abs() < 1e-9);
    Ok(d)
}

/// Serialized form of the index: `"k/i,j,.../next" -> count`, keys sorted.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyIndexDump {
    pub version: u32,
    pub n_items: usize,
    pub orders: Vec<usize>,
    pub counts: BTreeMap<String, u32>,
}

pub const ENTROPY_INDEX_VERSION: u32 = 1;

impl EntropyIndex {
    pub fn to_dump(&self) -> EntropyIndexDump {
        let mut counts = BTreeMap::new();
        for (&k, patterns) in &self.maps {
            for (pattern, nexts) in patterns {
                let key_items: Vec<String> = pattern.iter().map(|i| i.to_string()).collect();
                for (&next, &count) in nexts {
                    counts.insert(format!("{k}/{}/{next}", key_items.join(",")), count);
                }
            }
        }
        EntropyIndexDump {
            version: ENTROPY_INDEX_VERSION,
            n_items: self.n_items,
            orders: self.orders.clone(),
            counts,
        }
    }

    pub fn from_dump(dump: &EntropyIndexDump) -> Result<Self> {
        if dump.version != ENTROPY_INDEX_VERSION {
            return Err(Error::Validation(format!(
                "unsupported entropy index version {}",
                dump.version
            )));
        }
        let mut maps: HashMap<usize, HashMap<PatternKey, HashMap<u32, u32>>> = HashMap::new();
        for &k in &dump.orders {
            maps.entry(k).or_default();
        }
        for (key, &count) in &dump.counts {
            let parts: Vec<&str> = key.split('/').collect();
            let bad_key = || Error::Validation(format!("bad entropy index key {key:?}"));
            if parts.len() != 3 {
                return Err(bad_key());
            }
            let k: usize = parts[0].parse().map_err(|_| bad_key())?;
            let pattern: PatternKey = parts[1]
                .split(',')
                .map(|s| s.parse::<u32>().map_err(|_| bad_key()))
                .collect::<Result<_>>()?;
            let next: u32 = parts[2].parse().map_err(|_| bad_key())?;
            if pattern.len() != k || pattern.windows(2).any(|w| w[0] > w[1]) {
                return Err(bad_key());
            }
            *maps
                .entry(k)
                .or_default()
                .entry(pattern)
                .or_default()
                .entry(next)
                .or_insert(0) += count;
        }
        Ok(EntropyIndex {
            orders: dump.orders.clone(),
            n_items: dump.n_items,
            maps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InteractionRecord, LogTable};

    fn logs_from_sequences(seqs: &[&[u32]], n_items: usize) -> LogTable {
        let mut records = Vec::new();
        for (u, seq) in seqs.iter().enumerate() {
            for (t, &item) in seq.iter().enumerate() {
                records.push(InteractionRecord {
                    user_id: u as u32,
                    item_id: item,
                    timestamp: t as i64,
                    reward: 0.5,
                    category_id: 0,
                });
            }
        }
        LogTable::new(records, seqs.len(), n_items, 1).unwrap()
    }

    fn counts(entries: &[(u32, u32)]) -> HashMap<u32, u32> {
        entries.iter().cloned().collect()
    }

    #[test]
    fn index_matches_paper_worked_example() {
        // [8,3,7,5] and [7,3,8,9] both contain the sorted window {3,7,8}.
        let logs = logs_from_sequences(&[&[8, 3, 7, 5], &[7, 3, 8, 9]], 10);
        let index = build_entropy_index(&logs, &[3]);
        let m = index.counts(3, &[3, 7, 8]).unwrap();
        assert_eq!(m, &counts(&[(5, 1), (9, 1)]));
    }

    #[test]
    fn sequence_of_window_length_contributes_nothing() {
        let logs = logs_from_sequences(&[&[1, 2, 3]], 10);
        let index = build_entropy_index(&logs, &[3]);
        assert_eq!(index.n_patterns(3), 0);
    }

    #[test]
    fn order_one_sliding_window() {
        let logs = logs_from_sequences(&[&[4, 6, 4, 6]], 10);
        let index = build_entropy_index(&logs, &[1]);
        assert_eq!(index.counts(1, &[4]).unwrap(), &counts(&[(6, 2)]));
        assert_eq!(index.counts(1, &[6]).unwrap(), &counts(&[(4, 1)]));
    }

    #[test]
    fn windows_do_not_cross_users() {
        let logs = logs_from_sequences(&[&[1, 2], &[3, 4]], 10);
        let index = build_entropy_index(&logs, &[1]);
        assert!(index.counts(1, &[2]).is_none());
        assert_eq!(index.counts(1, &[1]).unwrap(), &counts(&[(2, 1)]));
    }

    #[test]
    fn normalized_entropy_examples() {
        assert_eq!(normalized_entropy(&counts(&[(5, 2), (9, 2)])).unwrap(), 1.0);
        assert_eq!(normalized_entropy(&counts(&[(5, 4)])).unwrap(), 0.0);
        let e = normalized_entropy(&counts(&[(0, 3), (1, 1)])).unwrap();
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2.0f64.ln();
        assert!((e - expected).abs() < 1e-12);
        assert!((e - 0.8113).abs() < 1e-4);
        assert!(normalized_entropy(&HashMap::new()).is_err());
    }

    #[test]
    fn normalized_entropy_scale_invariant() {
        let base = counts(&[(1, 3), (2, 5), (7, 2)]);
        let scaled: HashMap<u32, u32> = base.iter().map(|(&k, &v)| (k, v * 7)).collect();
        let a = normalized_entropy(&base).unwrap();
        let b = normalized_entropy(&scaled).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn entropy_penalty_cases() {
        let logs = logs_from_sequences(&[&[8, 3, 7, 5], &[7, 3, 8, 9]], 10);
        let index = build_entropy_index(&logs, &[3]);
        // Recent trajectory ends with the items 3,7,8 in any order.
        assert_eq!(entropy_penalty(&index, &[1, 8, 7, 3]), 1.0);
        // Unseen pattern -> 0.
        assert_eq!(entropy_penalty(&index, &[1, 2, 3]), 0.0);
        // Trajectory shorter than every order -> 0.
        assert_eq!(entropy_penalty(&index, &[7]), 0.0);

        // Deterministic next items at every order -> 0.
        let logs = logs_from_sequences(&[&[1, 2, 3, 4], &[1, 2, 3, 4]], 10);
        let index = build_entropy_index(&logs, &[1, 2]);
        assert_eq!(entropy_penalty(&index, &[2, 3]), 0.0);
    }

    #[test]
    fn entropy_penalty_bounded_by_order_count() {
        let logs = logs_from_sequences(&[&[0, 1, 2, 3, 0, 2, 1, 3, 2, 0, 3, 1]], 10);
        let orders = vec![1, 2, 3];
        let index = build_entropy_index(&logs, &orders);
        for window in [&[0u32, 1, 2][..], &[2, 0, 3], &[3, 2, 1], &[9, 9, 9]] {
            let p = entropy_penalty(&index, window);
            assert!((0.0..=orders.len() as f64).contains(&p));
        }
    }

    #[test]
    fn kl_to_uniform_examples() {
        assert!(kl_to_uniform(&[0.25; 4]).unwrap().abs() < 1e-12);
        let d = kl_to_uniform(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((d - 4.0f64.ln()).abs() < 1e-12);
        assert!(kl_to_uniform(&[0.5, 0.5]).unwrap().abs() < 1e-12);
        assert!(kl_to_uniform(&[0.5, 0.6]).is_err());
        assert!(kl_to_uniform(&[1.1, -0.1]).is_err());
    }

    #[test]
    fn modified_reward_examples() {
        let cfg = |l1: f64, l2: f64| PenaltyConfig {
            lambda1: l1,
            lambda2: l2,
            orders: default_orders(),
        };
        assert_eq!(modified_reward(0.7, 0.3, 0.9, &cfg(0.0, 0.0)), 0.7);
        // The published KuaiRec weights: 0.5 - 0.05*0.2 + 5*0.4 = 2.49.
        let r = modified_reward(0.5, 0.2, 0.4, &cfg(0.05, 5.0));
        assert!((r - 2.49).abs() < 1e-12);
        assert_eq!(modified_reward(0.4, 0.4, 0.0, &cfg(1.0, 0.0)), 0.0);
    }

    #[test]
    fn modified_reward_monotonicity() {
        let cfg = PenaltyConfig {
            lambda1: 0.5,
            lambda2: 0.5,
            orders: default_orders(),
        };
        let base = modified_reward(0.5, 0.2, 0.2, &cfg);
        assert!(modified_reward(0.5, 0.3, 0.2, &cfg) < base);
        assert!(modified_reward(0.5, 0.2, 0.3, &cfg) > base);
    }

    #[test]
    fn dump_round_trip() {
        let logs = logs_from_sequences(&[&[8, 3, 7, 5, 3, 7], &[7, 3, 8, 9, 7, 1]], 10);
        let index = build_entropy_index(&logs, &[1, 2, 3]);
        let dump = index.to_dump();
        let back = EntropyIndex::from_dump(&dump).unwrap();
        assert_eq!(back, index);

        let json = serde_json::to_string(&dump).unwrap();
        let dump2: EntropyIndexDump = serde_json::from_str(&json).unwrap();
        assert_eq!(EntropyIndex::from_dump(&dump2).unwrap(), index);
    }
}

//! Evaluation against the ground-truth environment: trajectory metrics
//! (cumulative reward, per-step reward, length, majority category
//! domination) and the log-level Matthew-effect diagnostics (repeat rates,
//! day-1 retention).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    act, encode_state, epsilon_greedy_act, ucb_act, ActMode, ActorCritic, UCBState,
};
use crate::data::{LogTable, WorldSpec};
use crate::env::{reset, step, TerminationReason};
use crate::error::{Error, Result};
use crate::user_model::GPMEnsemble;

/// A policy that can drive evaluation episodes. Implementations track their
/// own per-episode state (history, no-repeat mask).
pub trait Agent {
    fn begin_episode(&mut self, user: usize);
    fn select(&mut self, rng: &mut dyn RngCore) -> Result<usize>;
    fn observe(&mut self, item: usize, reward: f64);
}

/// Actor-critic policy during evaluation: the state tracker consumes the
/// environment's rewards through the frozen training-time normalizer.
pub struct PolicyAgent<'a> {
    ac: &'a ActorCritic,
    mode: ActMode,
    history: Vec<(usize, f64)>,
    mask: Vec<bool>,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(ac: &'a ActorCritic, mode: ActMode) -> Self {
        let n = ac.n_items();
        PolicyAgent {
            ac,
            mode,
            history: Vec::new(),
            mask: vec![true; n],
        }
    }
}

impl Agent for PolicyAgent<'_> {
    fn begin_episode(&mut self, _user: usize) {
        self.history.clear();
        self.mask.iter_mut().for_each(|m| *m = true);
    }

    fn select(&mut self, rng: &mut dyn RngCore) -> Result<usize> {
        let state = encode_state(&self.history, &self.ac.tracker, &self.ac.item_embeddings);
        act(self.ac, &state, &self.mask, self.mode, rng)
    }

    fn observe(&mut self, item: usize, reward: f64) {
        self.mask[item] = false;
        self.history.push((item, reward));
    }
}

/// Epsilon-greedy over the fitted reward model.
pub struct EpsilonGreedyAgent<'a> {
    ensemble: &'a GPMEnsemble,
    epsilon: f64,
    user: usize,
    mask: Vec<bool>,
}

impl<'a> EpsilonGreedyAgent<'a> {
    pub fn new(ensemble: &'a GPMEnsemble, epsilon: f64) -> Self {
        let n = ensemble.n_items();
        EpsilonGreedyAgent {
            ensemble,
            epsilon,
            user: 0,
            mask: vec![true; n],
        }
    }
}

impl Agent for EpsilonGreedyAgent<'_> {
    fn begin_episode(&mut self, user: usize) {
        self.user = user;
        self.mask.iter_mut().for_each(|m| *m = true);
    }

    fn select(&mut self, rng: &mut dyn RngCore) -> Result<usize> {
        epsilon_greedy_act(self.ensemble, self.user, &self.mask, self.epsilon, rng)
    }

    fn observe(&mut self, item: usize, _reward: f64) {
        self.mask[item] = false;
    }
}

/// Online UCB; pull statistics persist across the episodes of an
/// evaluation run (that is the bandit's learning signal).
pub struct UcbAgent {
    state: UCBState,
    mask: Vec<bool>,
}

impl UcbAgent {
    pub fn new(n_items: usize) -> Self {
        UcbAgent {
            state: UCBState::new(n_items),
            mask: vec![true; n_items],
        }
    }
}

impl Agent for UcbAgent {
    fn begin_episode(&mut self, _user: usize) {
        self.mask.iter_mut().for_each(|m| *m = true);
    }

    fn select(&mut self, _rng: &mut dyn RngCore) -> Result<usize> {
        ucb_act(&self.state, &self.mask)
    }

    fn observe(&mut self, item: usize, reward: f64) {
        self.mask[item] = false;
        self.state.update(item, reward);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub item_id: usize,
    pub reward: f64,
    pub category_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub user_id: usize,
    pub steps: Vec<TrajectoryStep>,
    pub termination: Option<TerminationReason>,
}

impl Trajectory {
    pub fn r_tra(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn length(&self) -> usize {
        self.steps.len()
    }
}

/// Runs one reset/select/step loop until the environment terminates.
pub fn run_episode(
    world: &WorldSpec,
    agent: &mut dyn Agent,
    user: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = reset(world, user)?;
    agent.begin_episode(user);
    let mut steps = Vec::new();
    loop {
        let item = agent.select(&mut rng)?;
        let out = step(world, &mut state, item)?;
        agent.observe(item, out.reward);
        steps.push(TrajectoryStep {
            item_id: item,
            reward: out.reward,
            category_id: world.item_category[item],
        });
        if out.done {
            return Ok(Trajectory {
                user_id: user,
                steps,
                termination: out.reason,
            });
        }
    }
}

/// Per-trajectory metrics; `mcd` is the fraction of this trajectory's items
/// in the dominated categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub r_tra: f64,
    pub r_each: f64,
    pub length: usize,
    pub mcd: f64,
}

pub fn trajectory_metrics(traj: &Trajectory, dominated: &BTreeSet<u32>) -> TrajectoryMetrics {
    let length = traj.length();
    let r_tra = traj.r_tra();
    let in_dominated = traj
        .steps
        .iter()
        .filter(|s| dominated.contains(&s.category_id))
        .count();
    TrajectoryMetrics {
        r_tra,
        r_each: r_tra / length as f64,
        length,
        mcd: in_dominated as f64 / length as f64,
    }
}

/// Pooled majority category domination: the fraction of all recommended
/// items (across trajectories) whose category is dominated in the training
/// logs.
pub fn mcd(trajectories: &[Trajectory], dominated: &BTreeSet<u32>) -> Result<f64> {
    let total: usize = trajectories.iter().map(|t| t.length()).sum();
    if total == 0 {
        return Err(Error::Validation("no recommendations to pool".into()));
    }
    let hits: usize = trajectories
        .iter()
        .flat_map(|t| &t.steps)
        .filter(|s| dominated.contains(&s.category_id))
        .count();
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_episodes: usize,
    pub r_tra: MeanStd,
    pub r_each: MeanStd,
    pub length: MeanStd,
    /// Pooled over all recommended items.
    pub mcd: f64,
    pub per_episode: Vec<TrajectoryMetrics>,
}

/// Runs `n_episodes` episodes with users drawn uniformly from the run seed
/// and aggregates the metrics (population std, so one episode gives 0).
pub fn evaluate(
    world: &WorldSpec,
    agent: &mut dyn Agent,
    dominated: &BTreeSet<u32>,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    let mut user_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let user = user_rng.random_range(0..world.n_users);
        let traj = run_episode(world, agent, user, seed.wrapping_add(1 + i as u64))?;
        trajectories.push(traj);
    }
    let per_episode: Vec<TrajectoryMetrics> = trajectories
        .iter()
        .map(|t| trajectory_metrics(t, dominated))
        .collect();
    let collect = |f: &dyn Fn(&TrajectoryMetrics) -> f64| -> Vec<f64> {
        per_episode.iter().map(f).collect()
    };
    Ok(EvalSummary {
        n_episodes,
        r_tra: mean_std(&collect(&|m| m.r_tra)),
        r_each: mean_std(&collect(&|m| m.r_each)),
        length: mean_std(&collect(&|m| m.length as f64)),
        mcd: mcd(&trajectories, dominated)?,
        per_episode,
    })
}

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Repeat rates for one user-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRate {
    pub user_id: u32,
    pub day: i64,
    pub events: u64,
    /// events / unique items.
    pub item_level: f64,
    /// events / unique categories.
    pub category_level: f64,
}

/// Per (user, day) repeat rates; days are UTC `floor(timestamp / 86400)`
/// buckets.
pub fn repeat_rates(logs: &LogTable) -> Vec<RepeatRate> {
    let mut groups: BTreeMap<(u32, i64), (u64, HashSet<u32>, HashSet<u32>)> = BTreeMap::new();
    for r in &logs.records {
        let day = r.timestamp.div_euclid(SECONDS_PER_DAY);
        let entry = groups.entry((r.user_id, day)).or_default();
        entry.0 += 1;
        entry.1.insert(r.item_id);
        entry.2.insert(r.category_id);
    }
    groups
        .into_iter()
        .map(|((user_id, day), (events, items, cats))| RepeatRate {
            user_id,
            day,
            events,
            item_level: events as f64 / items.len() as f64,
            category_level: events as f64 / cats.len() as f64,
        })
        .collect()
}

/// Day-1 retention for one activity bucket `[min_events, max_events)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionBucket {
    pub min_events: u64,
    /// Exclusive upper edge; `None` for the open last bucket.
    pub max_events: Option<u64>,
    pub eligible: u64,
    pub retained: u64,
    pub probability: f64,
}

/// Day-1 retention by activity bucket: a user-day counts as retained if the
/// user has at least one event the next day. User-days on the final
/// observed day are excluded (their next day is unobservable).
/// `bucket_edges` are ascending exclusive upper edges starting the buckets
/// `[1, e0), [e0, e1), ..., [e_last, inf)`.
pub fn day1_retention(logs: &LogTable, bucket_edges: &[u64]) -> Result<Vec<RetentionBucket>> {
    if bucket_edges.windows(2).any(|w| w[0] >= w[1]) || bucket_edges.iter().any(|&e| e < 2) {
        return Err(Error::Config(
            "bucket edges must be ascending and >= 2".into(),
        ));
    }
    let mut day_events: BTreeMap<(u32, i64), u64> = BTreeMap::new();
    for r in &logs.records {
        *day_events
            .entry((r.user_id, r.timestamp.div_euclid(SECONDS_PER_DAY)))
            .or_insert(0) += 1;
    }
    let days: BTreeSet<i64> = day_events.keys().map(|&(_, d)| d).collect();
    if days.len() < 2 {
        return Err(Error::Validation(
            "day-1 retention needs at least 2 distinct days".into(),
        ));
    }
    let last_day = *days.iter().next_back().unwrap();

    let n_buckets = bucket_edges.len() + 1;
    let mut eligible = vec![0u64; n_buckets];
    let mut retained = vec![0u64; n_buckets];
    for (&(user, day), &events) in &day_events {
        if day == last_day {
            continue;
        }
        let bucket = bucket_edges
            .iter()
            .position(|&e| events < e)
            .unwrap_or(bucket_edges.len());
        eligible[bucket] += 1;
        if day_events.contains_key(&(user, day + 1)) {
            retained[bucket] += 1;
        }
    }

    let mut out = Vec::with_capacity(n_buckets);
    for b in 0..n_buckets {
        let min_events = if b == 0 { 1 } else { bucket_edges[b - 1] };
        let max_events = bucket_edges.get(b).copied();
        let probability = if eligible[b] > 0 {
            retained[b] as f64 / eligible[b] as f64
        } else {
            f64::NAN
        };
        out.push(RetentionBucket {
            min_events,
            max_events,
            eligible: eligible[b],
            retained: retained[b],
            probability,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_world, InteractionRecord, WorldGenConfig};
    use crate::env::QuitRule;

    /// Always picks the lowest unserved item id.
    struct LowestIdAgent {
        mask: Vec<bool>,
    }

    impl LowestIdAgent {
        fn new(n_items: usize) -> Self {
            LowestIdAgent {
                mask: vec![true; n_items],
            }
        }
    }

    impl Agent for LowestIdAgent {
        fn begin_episode(&mut self, _user: usize) {
            self.mask.iter_mut().for_each(|m| *m = true);
        }

        fn select(&mut self, _rng: &mut dyn RngCore) -> Result<usize> {
            self.mask
                .iter()
                .position(|&m| m)
                .ok_or_else(|| Error::Validation("all items masked".into()))
        }

        fn observe(&mut self, item: usize, _reward: f64) {
            self.mask[item] = false;
        }
    }

    fn block_world(quit: QuitRule, max_rounds: u32) -> WorldSpec {
        generate_world(
            &WorldGenConfig {
                n_users: 3,
                n_items: 12,
                n_categories: 4,
                latent_dim: 2,
                noise_scale: 0.0,
                zero_latent: false,
                quit_rule: quit,
                max_rounds,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn lowest_id_agent_quits_on_step_two_in_block_world() {
        // Items 0 and 1 share the first category block; M=0, N=4 fires at
        // the second step.
        let world = block_world(QuitRule::new(4, 0), 30);
        let mut agent = LowestIdAgent::new(world.n_items);
        let traj = run_episode(&world, &mut agent, 0, 1).unwrap();
        assert_eq!(traj.length(), 2);
        assert_eq!(traj.termination, Some(TerminationReason::QuitRule));
    }

    #[test]
    fn disabled_quit_runs_to_max_rounds() {
        let world = block_world(QuitRule::disabled(), 5);
        let mut agent = LowestIdAgent::new(world.n_items);
        let traj = run_episode(&world, &mut agent, 1, 1).unwrap();
        assert_eq!(traj.length(), 5);
        assert_eq!(traj.termination, Some(TerminationReason::MaxRounds));
    }

    #[test]
    fn deterministic_agent_and_world_reproduce_trajectories() {
        let world = block_world(QuitRule::new(4, 1), 10);
        let mut agent = LowestIdAgent::new(world.n_items);
        let a = run_episode(&world, &mut agent, 2, 7).unwrap();
        let b = run_episode(&world, &mut agent, 2, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_metrics_identity() {
        let world = block_world(QuitRule::disabled(), 6);
        let mut agent = LowestIdAgent::new(world.n_items);
        let traj = run_episode(&world, &mut agent, 0, 1).unwrap();
        let dominated = BTreeSet::from([0u32]);
        let m = trajectory_metrics(&traj, &dominated);
        assert!((m.r_tra - m.r_each * m.length as f64).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&m.mcd));
        // Items 0,1,2 are category 0 of 6 served.
        assert!((m.mcd - 0.5).abs() < 1e-12);
    }

    #[test]
    fn evaluate_aggregates() {
        let world = block_world(QuitRule::disabled(), 4);
        let mut agent = LowestIdAgent::new(world.n_items);
        let dominated = BTreeSet::from([0u32, 1]);
        let summary = evaluate(&world, &mut agent, &dominated, 1, 3).unwrap();
        assert_eq!(summary.length.std, 0.0); // single deterministic episode
        let summary = evaluate(&world, &mut agent, &dominated, 10, 3).unwrap();
        assert_eq!(summary.length.mean, 4.0);
        assert!((summary.mcd - 1.0).abs() < 1e-12); // items 0..4 all dominated
    }

    #[test]
    fn mcd_pooled_counts() {
        let traj = |cats: &[u32]| Trajectory {
            user_id: 0,
            steps: cats
                .iter()
                .enumerate()
                .map(|(i, &c)| TrajectoryStep {
                    item_id: i,
                    reward: 0.5,
                    category_id: c,
                })
                .collect(),
            termination: None,
        };
        let dominated = BTreeSet::from([7u32]);
        // 1/2 and 3/4 dominated pool to 4/6.
        let ts = vec![traj(&[7, 0]), traj(&[7, 7, 7, 1])];
        let v = mcd(&ts, &dominated).unwrap();
        assert!((v - 4.0 / 6.0).abs() < 1e-12);
        assert!((mcd(&[traj(&[0, 1])], &dominated).unwrap() - 0.0).abs() < 1e-12);
        assert!(mcd(&[], &dominated).is_err());
    }

    fn record(user: u32, item: u32, ts: i64, cat: u32) -> InteractionRecord {
        InteractionRecord {
            user_id: user,
            item_id: item,
            timestamp: ts,
            reward: 0.5,
            category_id: cat,
        }
    }

    #[test]
    fn repeat_rates_paper_example() {
        // 20 events over 5 unique videos in 3 unique categories:
        // item-level 20/5 = 4.0, category-level 20/3 = 6.67.
        let mut records = Vec::new();
        for e in 0..20u32 {
            let item = e % 5;
            let cat = item % 3;
            records.push(record(0, item, e as i64, cat));
        }
        let logs = LogTable::from_records(records).unwrap();
        let rates = repeat_rates(&logs);
        assert_eq!(rates.len(), 1);
        assert_eq!(rates[0].item_level, 4.0);
        assert!((rates[0].category_level - 20.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", rates[0].category_level), "6.67");
    }

    #[test]
    fn repeat_rates_edge_cases() {
        // All-distinct items and categories: both rates 1.
        let logs = LogTable::from_records(vec![
            record(0, 0, 0, 0),
            record(0, 1, 1, 1),
            record(0, 2, 2, 2),
        ])
        .unwrap();
        let rates = repeat_rates(&logs);
        assert_eq!(rates[0].item_level, 1.0);
        assert_eq!(rates[0].category_level, 1.0);

        // One item viewed 7 times.
        let logs =
            LogTable::from_records((0..7).map(|t| record(0, 3, t, 1)).collect()).unwrap();
        assert_eq!(repeat_rates(&logs)[0].item_level, 7.0);

        // Separate days split the groups.
        let logs = LogTable::from_records(vec![
            record(0, 0, 0, 0),
            record(0, 0, SECONDS_PER_DAY + 5, 0),
        ])
        .unwrap();
        assert_eq!(repeat_rates(&logs).len(), 2);
    }

    #[test]
    fn day1_retention_cases() {
        let day = SECONDS_PER_DAY;
        // User 0 active on days 0..4 (every day); user 1 active only day 0.
        let mut records = Vec::new();
        for d in 0..4i64 {
            records.push(record(0, 0, d * day, 0));
        }
        records.push(record(1, 1, 10, 0));
        let logs = LogTable::from_records(records).unwrap();
        let buckets = day1_retention(&logs, &[]).unwrap();
        assert_eq!(buckets.len(), 1);
        // Eligible user-days: user0 days 0,1,2 (day 3 is the last observed
        // day) and user1 day 0. Retained: user0's three days.
        assert_eq!(buckets[0].eligible, 4);
        assert_eq!(buckets[0].retained, 3);
        assert!((buckets[0].probability - 0.75).abs() < 1e-12);

        // A user active one day only is never retained.
        let logs = LogTable::from_records(vec![
            record(0, 0, 0, 0),
            record(1, 0, day * 3, 0),
        ])
        .unwrap();
        let buckets = day1_retention(&logs, &[]).unwrap();
        assert_eq!(buckets[0].eligible, 1);
        assert_eq!(buckets[0].retained, 0);

        // Buckets split by activity.
        let mut records = Vec::new();
        for e in 0..10i64 {
            records.push(record(0, 0, e, 0)); // busy user, day 0
        }
        records.push(record(0, 0, day, 0)); // returns day 1
        records.push(record(1, 0, 5, 0)); // light user, not retained
        let logs = LogTable::from_records(records).unwrap();
        let buckets = day1_retention(&logs, &[5]).unwrap();
        assert_eq!(buckets.len(), 2);
        assert_eq!(buckets[0].eligible, 1); // light
        assert_eq!(buckets[0].retained, 0);
        assert_eq!(buckets[1].eligible, 1); // busy
        assert_eq!(buckets[1].retained, 1);

        // Fewer than two distinct days is an error.
        let logs = LogTable::from_records(vec![record(0, 0, 0, 0)]).unwrap();
        assert!(day1_retention(&logs, &[]).is_err());
    }
}

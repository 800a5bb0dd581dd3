//! Recommendation policies: the average-layer state tracker, an advantage
//! actor-critic trained on simulated rollouts against the modified reward,
//! and the epsilon-greedy / UCB bandit baselines.
//!
//! Training rollouts deliberately skip the category quit rule: the rule
//! models users' hidden tolerance and is not observable by the learner, so
//! any diversity pressure must come from the entropy bonus alone. Rollouts
//! do enforce the no-repeat mask, like evaluation episodes.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::{entropy_penalty, modified_reward, EntropyIndex, PenaltyConfig};
use crate::user_model::{ensemble_reward, uncertainty, GPMEnsemble};

/// Floor of the reward normalization range `(0, 1]`.
pub const NORM_FLOOR: f64 = 1e-6;

/// Running min/max map of modified rewards into `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub min: f64,
    pub max: f64,
}

impl Default for RewardNormalizer {
    fn default() -> Self {
        RewardNormalizer {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl RewardNormalizer {
    pub fn update(&mut self, reward: f64) {
        self.min = self.min.min(reward);
        self.max = self.max.max(reward);
    }

    /// Affine map of the running bounds onto `[NORM_FLOOR, 1]`; degenerate
    /// bounds map to 1.
    pub fn normalize(&self, reward: f64) -> f64 {
        if !(self.max > self.min) {
            return 1.0;
        }
        let t = (reward - self.min) / (self.max - self.min);
        (NORM_FLOOR + (1.0 - NORM_FLOOR) * t).clamp(NORM_FLOOR, 1.0)
    }
}

/// Average-layer state tracker configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrackerConfig {
    /// How many recent item-reward pairs the state averages.
    pub window: usize,
    pub emb_dim: usize,
    pub reward_norm: RewardNormalizer,
}

impl StateTrackerConfig {
    pub fn new(window: usize, emb_dim: usize) -> Self {
        StateTrackerConfig {
            window,
            emb_dim,
            reward_norm: RewardNormalizer::default(),
        }
    }
}

/// State vector of length `emb_dim + 1`: the element-wise mean of
/// `[embedding(item) ++ normalized reward]` over the last `window` pairs;
/// the zero vector for an empty history.
pub fn encode_state(
    history: &[(usize, f64)],
    tracker: &StateTrackerConfig,
    embeddings: &[Vec<f64>],
) -> Vec<f64> {
    let d = tracker.emb_dim;
    let mut state = vec![0.0; d + 1];
    if history.is_empty() {
        return state;
    }
    let start = history.len().saturating_sub(tracker.window);
    let tail = &history[start..];
    for &(item, reward) in tail {
        for j in 0..d {
            state[j] += embeddings[item][j];
        }
        state[d] += tracker.reward_norm.normalize(reward);
    }
    let n = tail.len() as f64;
    for v in state.iter_mut() {
        *v /= n;
    }
    state
}

/// Actor-critic hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcHyper {
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Discount in `[0, 1)`.
    pub gamma: f64,
    pub entropy_coef: f64,
    pub rollout_len: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AcHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.lr_actor <= 0.0 || self.lr_critic <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.rollout_len == 0 || self.episodes_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "rollout_len, episodes_per_epoch, epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Policy network: frozen item embeddings feed the state tracker; affine
/// actor and critic heads over the state are the trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub item_embeddings: Vec<Vec<f64>>,
    /// `actor_w[item]` has length `emb_dim + 1`.
    pub actor_w: Vec<Vec<f64>>,
    pub actor_b: Vec<f64>,
    pub critic_w: Vec<f64>,
    pub critic_b: f64,
    pub tracker: StateTrackerConfig,
    pub hyper: AcHyper,
}

impl ActorCritic {
    /// Zero heads over randomly initialized (then frozen) item embeddings:
    /// the initial policy is uniform over unmasked items.
    pub fn new(n_items: usize, emb_dim: usize, window: usize, hyper: AcHyper) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        let scale = 1.0 / (emb_dim as f64).sqrt();
        let item_embeddings = (0..n_items)
            .map(|_| {
                (0..emb_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect()
            })
            .collect();
        ActorCritic {
            item_embeddings,
            actor_w: vec![vec![0.0; emb_dim + 1]; n_items],
            actor_b: vec![0.0; n_items],
            critic_w: vec![0.0; emb_dim + 1],
            critic_b: 0.0,
            tracker: StateTrackerConfig::new(window, emb_dim),
            hyper,
        }
    }

    pub fn n_items(&self) -> usize {
        self.actor_b.len()
    }

    pub fn state_dim(&self) -> usize {
        self.tracker.emb_dim + 1
    }

    pub fn critic_value(&self, state: &[f64]) -> f64 {
        self.critic_b
            + self
                .critic_w
                .iter()
                .zip(state)
                .map(|(w, s)| w * s)
                .sum::<f64>()
    }

    fn logits(&self, state: &[f64]) -> Vec<f64> {
        self.actor_w
            .iter()
            .zip(&self.actor_b)
            .map(|(w, b)| b + w.iter().zip(state).map(|(wj, sj)| wj * sj).sum::<f64>())
            .collect()
    }
}

/// Masked softmax over actor logits; masked items get probability exactly 0.
pub fn actor_forward(ac: &ActorCritic, state: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if mask.len() != ac.n_items() {
        return Err(Error::Dimension("mask length mismatch".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Validation("all items are masked".into()));
    }
    let logits = ac.logits(state);
    let max = logits
        .iter()
        .zip(mask)
        .filter(|&(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Greedy,
    Sample,
}

/// Picks an item: greedy takes the argmax probability (ties to the lowest
/// id), sample draws from the masked softmax.
pub fn act(
    ac: &ActorCritic,
    state: &[f64],
    mask: &[bool],
    mode: ActMode,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    let probs = actor_forward(ac, state, mask)?;
    Ok(match mode {
        ActMode::Greedy => argmax_lowest(&probs),
        ActMode::Sample => sample_from(&probs, rng),
    })
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn sample_from(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last
}

/// Per-step actor objective with a fixed advantage:
/// `-A log pi(a|s) - entropy_coef H(pi(.|s))`.
pub fn actor_loss(
    ac: &ActorCritic,
    state: &[f64],
    action: usize,
    mask: &[bool],
    advantage: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let probs = actor_forward(ac, state, mask)?;
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(-advantage * probs[action].ln() - entropy_coef * h)
}

/// Analytic gradients of [`actor_loss`] with respect to the actor head.
pub fn actor_gradients(
    ac: &ActorCritic,
    state: &[f64],
    action: usize,
    mask: &[bool],
    advantage: f64,
    entropy_coef: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let probs = actor_forward(ac, state, mask)?;
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let dim = ac.state_dim();
    let mut grad_w = vec![vec![0.0; dim]; ac.n_items()];
    let mut grad_b = vec![0.0; ac.n_items()];
    for j in 0..ac.n_items() {
        if !mask[j] || probs[j] <= 0.0 {
            continue;
        }
        let indicator = if j == action { 1.0 } else { 0.0 };
        // d(-A log pi_a)/dz_j = -A (1{j=a} - pi_j)
        // d(-c H)/dz_j = c pi_j (ln pi_j + H)
        let dz = -advantage * (indicator - probs[j])
            + entropy_coef * probs[j] * (probs[j].ln() + h);
        grad_b[j] = dz;
        for (g, s) in grad_w[j].iter_mut().zip(state) {
            *g = dz * s;
        }
    }
    Ok((grad_w, grad_b))
}

/// Per-step critic objective against a fixed TD target: `(target - V(s))^2`.
pub fn critic_loss(ac: &ActorCritic, state: &[f64], target: f64) -> f64 {
    let e = target - ac.critic_value(state);
    e * e
}

/// Analytic gradients of [`critic_loss`] with respect to the critic head.
pub fn critic_gradients(ac: &ActorCritic, state: &[f64], target: f64) -> (Vec<f64>, f64) {
    let e = target - ac.critic_value(state);
    let grad_w = state.iter().map(|&s| -2.0 * e * s).collect();
    (grad_w, -2.0 * e)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPolicyStats {
    pub episodes: usize,
    pub mean_modified_reward: f64,
    pub mean_entropy_bonus: f64,
    pub mean_uncertainty: f64,
}

/// Advantage actor-critic on the simulated environment. Per episode a user
/// is drawn uniformly; each of `rollout_len` steps samples an action from
/// the masked policy, receives `r~ = r^ - lambda1 P_U + lambda2 P_E` (the
/// entropy window ends at the action just taken), and applies TD(0) updates
/// with the rollout end treated as terminal. Deterministic in
/// `hyper.seed`.
pub fn train_policy(
    ensemble: &GPMEnsemble,
    index: &EntropyIndex,
    penalty: &PenaltyConfig,
    ac: &mut ActorCritic,
) -> Result<TrainPolicyStats> {
    penalty.validate()?;
    ac.hyper.validate()?;
    let n_items = ensemble.n_items();
    let n_users = ensemble.n_users();
    if ac.n_items() != n_items {
        return Err(Error::Dimension(format!(
            "policy covers {} items, ensemble {}",
            ac.n_items(),
            n_items
        )));
    }
    if index.n_items() != n_items {
        return Err(Error::Dimension(format!(
            "entropy index covers {} items, ensemble {}",
            index.n_items(),
            n_items
        )));
    }
    if penalty.orders != index.orders() {
        return Err(Error::Config(
            "penalty orders differ from the entropy index orders".into(),
        ));
    }
    if ac.hyper.rollout_len > n_items {
        return Err(Error::Config(
            "rollout_len exceeds n_items: the no-repeat mask would empty".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(ac.hyper.seed);
    let hyper = ac.hyper.clone();
    let mut episodes = 0usize;
    let mut sum_r = 0.0;
    let mut sum_pe = 0.0;
    let mut sum_pu = 0.0;
    let mut n_steps = 0usize;

    let mut recent_items: Vec<u32> = Vec::new();
    let mut history: Vec<(usize, f64)> = Vec::new();

    for _ in 0..hyper.epochs {
        for _ in 0..hyper.episodes_per_epoch {
            let user = rng.random_range(0..n_users);
            history.clear();
            recent_items.clear();
            let mut mask = vec![true; n_items];

            for t in 0..hyper.rollout_len {
                let state = encode_state(&history, &ac.tracker, &ac.item_embeddings);
                let probs = actor_forward(ac, &state, &mask)?;
                let action = sample_from(&probs, &mut rng);

                let r_hat = ensemble_reward(ensemble, user, action);
                let p_u = uncertainty(ensemble, user, action);
                recent_items.push(action as u32);
                let p_e = entropy_penalty(index, &recent_items);
                let r_tilde = modified_reward(r_hat, p_u, p_e, penalty);
                if !r_tilde.is_finite() {
                    return Err(Error::Diverged);
                }
                ac.tracker.reward_norm.update(r_tilde);

                mask[action] = false;
                history.push((action, r_tilde));
                let next_state = encode_state(&history, &ac.tracker, &ac.item_embeddings);

                let v_s = ac.critic_value(&state);
                let v_next = if t + 1 == hyper.rollout_len {
                    0.0
                } else {
                    ac.critic_value(&next_state)
                };
                let target = r_tilde + hyper.gamma * v_next;
                let advantage = target - v_s;
                if !advantage.is_finite() {
                    return Err(Error::Diverged);
                }

                // Actor update in place, reusing the sampling-time probs.
                let h: f64 = probs
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| -p * p.ln())
                    .sum();
                for j in 0..n_items {
                    if probs[j] <= 0.0 {
                        continue;
                    }
                    let indicator = if j == action { 1.0 } else { 0.0 };
                    let dz = -advantage * (indicator - probs[j])
                        + hyper.entropy_coef * probs[j] * (probs[j].ln() + h);
                    ac.actor_b[j] -= hyper.lr_actor * dz;
                    for (w, s) in ac.actor_w[j].iter_mut().zip(&state) {
                        *w -= hyper.lr_actor * dz * s;
                    }
                }

                // Critic update against the fixed TD target.
                let (gw, gb) = critic_gradients(ac, &state, target);
                for (w, g) in ac.critic_w.iter_mut().zip(&gw) {
                    *w -= hyper.lr_critic * g;
                }
                ac.critic_b -= hyper.lr_critic * gb;

                sum_r += r_tilde;
                sum_pe += p_e;
                sum_pu += p_u;
                n_steps += 1;
            }
            episodes += 1;
        }
        if !ac.actor_b.iter().all(|v| v.is_finite()) || !ac.critic_b.is_finite() {
            return Err(Error::Diverged);
        }
    }

    Ok(TrainPolicyStats {
        episodes,
        mean_modified_reward: sum_r / n_steps as f64,
        mean_entropy_bonus: sum_pe / n_steps as f64,
        mean_uncertainty: sum_pu / n_steps as f64,
    })
}

/// Epsilon-greedy over the fitted reward: uniform over unmasked items with
/// probability `epsilon`, otherwise the unmasked argmax of
/// [`ensemble_reward`] (ties to the lowest id).
pub fn epsilon_greedy_act(
    ensemble: &GPMEnsemble,
    user: usize,
    mask: &[bool],
    epsilon: f64,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let unmasked: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if unmasked.is_empty() {
        return Err(Error::Validation("all items are masked".into()));
    }
    let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
    if explore {
        return Ok(unmasked[rng.random_range(0..unmasked.len())]);
    }
    let mut best = unmasked[0];
    let mut best_r = f64::NEG_INFINITY;
    for &i in &unmasked {
        let r = ensemble_reward(ensemble, user, i);
        if r > best_r {
            best_r = r;
            best = i;
        }
    }
    Ok(best)
}

/// Per-item pull statistics for the UCB baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UCBState {
    pub counts: Vec<u64>,
    pub means: Vec<f64>,
    pub total: u64,
}

impl UCBState {
    pub fn new(n_items: usize) -> Self {
        UCBState {
            counts: vec![0; n_items],
            means: vec![0.0; n_items],
            total: 0,
        }
    }

    pub fn update(&mut self, item: usize, reward: f64) {
        self.counts[item] += 1;
        self.total += 1;
        let n = self.counts[item] as f64;
        self.means[item] += (reward - self.means[item]) / n;
    }
}

/// Optimism in the face of uncertainty: unpulled unmasked items first
/// (lowest id), otherwise the unmasked argmax of
/// `mean_i + sqrt(2 ln T / n_i)`.
pub fn ucb_act(ucb: &UCBState, mask: &[bool]) -> Result<usize> {
    let unmasked: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if unmasked.is_empty() {
        return Err(Error::Validation("all items are masked".into()));
    }
    if let Some(&i) = unmasked.iter().find(|&&i| ucb.counts[i] == 0) {
        return Ok(i);
    }
    let ln_t = (ucb.total as f64).ln();
    let mut best = unmasked[0];
    let mut best_score = f64::NEG_INFINITY;
    for &i in &unmasked {
        let bonus = (2.0 * ln_t / ucb.counts[i] as f64).sqrt();
        let score = ucb.means[i] + bonus;
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(best)
}

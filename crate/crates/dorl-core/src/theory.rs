//! Exact computations on small finite MDPs.
//!
//! Verifies, numerically rather than symbolically, the three guarantees the
//! reward-penalty scheme rests on:
//!
//! 1. the telescoping identity `E_{rho_hat}[G] = eta(M_hat) - eta(M)` for
//!    the mismatch function `G`,
//! 2. the decomposition `|G| <= gamma d_V + d_1` on reward-factored MDPs
//!    whose transitions are driven solely by the reward outcome,
//! 3. the pessimism lower bound `eta_M(pi_hat) >= max_pi {eta_M(pi) -
//!    2 lambda eps_p(pi)}` whenever `lambda E_rho[p] >= |eta(M_hat) -
//!    eta(M)|` holds for every policy.
//!
//! Occupancies use the `(1 - gamma)`-normalized convention throughout, so
//! `eta` is the occupancy-weighted expected reward and equals
//! `(1 - gamma) * initial_dist . V`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite reward distribution: a list of `(value, probability)` pairs, so
/// every expectation in this module is an exact sum.
pub type RewardDist = Vec<(f64, f64)>;

/// A finite MDP with exact tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`, each row summing to 1.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`: finite distribution over reward values.
    pub rewards: Vec<Vec<RewardDist>>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
}

impl FiniteMdp {
    /// Point-mass rewards from a dense `[s][a]` matrix.
    pub fn with_reward_matrix(
        n_states: usize,
        n_actions: usize,
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let rewards = reward
            .into_iter()
            .map(|row| row.into_iter().map(|r| vec![(r, 1.0)]).collect())
            .collect();
        let mdp = FiniteMdp {
            n_states,
            n_actions,
            transition,
            rewards,
            gamma,
            initial_dist,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Validation(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.transition.len() != self.n_states || self.rewards.len() != self.n_states {
            return Err(Error::Dimension("transition/reward tensors mis-sized".into()));
        }
        for s in 0..self.n_states {
            if self.transition[s].len() != self.n_actions || self.rewards[s].len() != self.n_actions
            {
                return Err(Error::Dimension("transition/reward tensors mis-sized".into()));
            }
            for a in 0..self.n_actions {
                let row = &self.transition[s][a];
                if row.len() != self.n_states {
                    return Err(Error::Dimension("transition row mis-sized".into()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Validation(format!(
                        "transition[{s}][{a}] is not a distribution (sum = {sum})"
                    )));
                }
                let dist = &self.rewards[s][a];
                if dist.is_empty() {
                    return Err(Error::Validation(format!("rewards[{s}][{a}] empty")));
                }
                let psum: f64 = dist.iter().map(|&(_, p)| p).sum();
                if (psum - 1.0).abs() > 1e-12 || dist.iter().any(|&(_, p)| p < 0.0) {
                    return Err(Error::Validation(format!(
                        "rewards[{s}][{a}] is not a distribution (sum = {psum})"
                    )));
                }
            }
        }
        let isum: f64 = self.initial_dist.iter().sum();
        if self.initial_dist.len() != self.n_states
            || (isum - 1.0).abs() > 1e-12
            || self.initial_dist.iter().any(|&p| p < 0.0)
        {
            return Err(Error::Validation("initial_dist is not a distribution".into()));
        }
        Ok(())
    }

    pub fn mean_reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a].iter().map(|&(v, p)| v * p).sum()
    }

    fn same_shape(&self, other: &FiniteMdp) -> Result<()> {
        if self.n_states != other.n_states
            || self.n_actions != other.n_actions
            || (self.gamma - other.gamma).abs() > 0.0
        {
            return Err(Error::Dimension(
                "MDP pair must share (S, A, gamma)".into(),
            ));
        }
        Ok(())
    }
}

/// Row-stochastic policy over a finite MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        TabularPolicy { probs }
    }

    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.probs.len() != n_states {
            return Err(Error::Dimension("policy has wrong state count".into()));
        }
        for row in &self.probs {
            if row.len() != n_actions {
                return Err(Error::Dimension("policy row has wrong action count".into()));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Validation("policy row is not a distribution".into()));
            }
        }
        Ok(())
    }
}

fn policy_transition(mdp: &FiniteMdp, pi: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.n_states;
    DMatrix::from_fn(n, n, |s, sp| {
        (0..mdp.n_actions)
            .map(|a| pi.probs[s][a] * mdp.transition[s][a][sp])
            .sum()
    })
}

/// Exact policy value: solves `(I - gamma P_pi) V = r_pi` densely and
/// verifies the residual is below `1e-10`.
pub fn value_function(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.validate()?;
    pi.validate(mdp.n_states, mdp.n_actions)?;
    let n = mdp.n_states;
    let p = policy_transition(mdp, pi);
    let r_pi = DVector::from_fn(n, |s, _| {
        (0..mdp.n_actions)
            .map(|a| pi.probs[s][a] * mdp.mean_reward(s, a))
            .sum()
    });
    let system = DMatrix::identity(n, n) - &p * mdp.gamma;
    let v = system
        .clone()
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::Internal("singular value-function system".into()))?;
    // Tolerance scales with the solution so large penalized rewards do not
    // trip the check on float noise alone.
    let scale = 1.0f64.max(v.amax());
    let residual = (&system * &v - &r_pi).amax();
    if residual > 1e-10 * scale {
        return Err(Error::Internal(format!(
            "value-function residual {residual} above 1e-10 (scale {scale})"
        )));
    }
    Ok(v.iter().cloned().collect())
}

/// Normalized discounted occupancy `rho(s, a) = (1 - gamma) pi(a|s)
/// sum_t gamma^t P_t(s)`; entries sum to 1.
pub fn occupancy(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    pi.validate(mdp.n_states, mdp.n_actions)?;
    let n = mdp.n_states;
    let p = policy_transition(mdp, pi);
    // d = (1 - gamma) mu0 + gamma P^T d
    let rhs = DVector::from_fn(n, |s, _| (1.0 - mdp.gamma) * mdp.initial_dist[s]);
    let system = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
    let d = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Internal("singular occupancy system".into()))?;
    let rho: Vec<Vec<f64>> = (0..n)
        .map(|s| (0..mdp.n_actions).map(|a| d[s] * pi.probs[s][a]).collect())
        .collect();
    let total: f64 = rho.iter().flatten().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Internal(format!(
            "occupancy sums to {total}, expected 1"
        )));
    }
    Ok(rho)
}

/// Normalized return `eta(pi) = E_rho[r]`, cross-checked against
/// `(1 - gamma) initial_dist . V` to `1e-8`.
pub fn eta(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<f64> {
    let v = value_function(mdp, pi)?;
    let via_value: f64 = (1.0 - mdp.gamma)
        * mdp
            .initial_dist
            .iter()
            .zip(&v)
            .map(|(&mu, &vs)| mu * vs)
            .sum::<f64>();
    let rho = occupancy(mdp, pi)?;
    let via_occupancy: f64 = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| rho[s][a] * mdp.mean_reward(s, a))
                .sum::<f64>()
        })
        .sum();
    let scale = 1.0f64.max(via_value.abs()).max(via_occupancy.abs());
    if (via_value - via_occupancy).abs() > 1e-8 * scale {
        return Err(Error::Internal(format!(
            "eta routes disagree: {via_value} vs {via_occupancy}"
        )));
    }
    Ok(via_occupancy)
}

/// Mismatch `G(s, a) = E_{s'~T_hat, r~R_hat}[gamma V_M(s') + r] -
/// E_{s'~T, r~R}[gamma V_M(s') + r]` where `V_M` is the true-MDP value of
/// `pi`. `values` must come from [`value_function`] on the TRUE MDP.
pub fn mismatch_g_with_values(
    mdp: &FiniteMdp,
    mdp_hat: &FiniteMdp,
    values: &[f64],
    s: usize,
    a: usize,
) -> f64 {
    let expect = |m: &FiniteMdp| -> f64 {
        let ev: f64 = (0..m.n_states)
            .map(|sp| m.transition[s][a][sp] * values[sp])
            .sum();
        m.gamma * ev + m.mean_reward(s, a)
    };
    expect(mdp_hat) - expect(mdp)
}

pub fn mismatch_g(
    mdp: &FiniteMdp,
    mdp_hat: &FiniteMdp,
    pi: &TabularPolicy,
    s: usize,
    a: usize,
) -> Result<f64> {
    mdp.same_shape(mdp_hat)?;
    let values = value_function(mdp, pi)?;
    Ok(mismatch_g_with_values(mdp, mdp_hat, &values, s, a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Report {
    /// `sum_(s,a) rho_hat(s,a) G(s,a)` — occupancy on the estimated dynamics.
    pub lhs: f64,
    /// `eta(M_hat, pi) - eta(M, pi)`.
    pub rhs: f64,
    pub abs_diff: f64,
}

/// Checks the telescoping identity for one MDP pair and policy.
pub fn verify_lemma1(
    mdp: &FiniteMdp,
    mdp_hat: &FiniteMdp,
    pi: &TabularPolicy,
) -> Result<Lemma1Report> {
    mdp.same_shape(mdp_hat)?;
    let values = value_function(mdp, pi)?;
    let rho_hat = occupancy(mdp_hat, pi)?;
    let lhs: f64 = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| rho_hat[s][a] * mismatch_g_with_values(mdp, mdp_hat, &values, s, a))
                .sum::<f64>()
        })
        .sum();
    let rhs = eta(mdp_hat, pi)? - eta(mdp, pi)?;
    Ok(Lemma1Report {
        lhs,
        rhs,
        abs_diff: (lhs - rhs).abs(),
    })
}

/// An MDP whose transition randomness comes solely from the reward outcome:
/// `s' = f(s, a, r)` with a finite reward support. The support (values and
/// successor states) is shared between a true/estimated pair; only the
/// probabilities differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFactoredMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `support[s][a]`: list of `(reward value, next state)` outcomes.
    pub support: Vec<Vec<Vec<(f64, usize)>>>,
    /// `probs[s][a][j]`: probability of outcome `j`.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
}

impl RewardFactoredMdp {
    /// Expands into a general [`FiniteMdp`] (transitions marginalize the
    /// reward outcome).
    pub fn to_mdp(&self) -> Result<FiniteMdp> {
        let mut transition = vec![vec![vec![0.0; self.n_states]; self.n_actions]; self.n_states];
        let mut rewards = vec![vec![RewardDist::new(); self.n_actions]; self.n_states];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                for (j, &(r, sp)) in self.support[s][a].iter().enumerate() {
                    let p = self.probs[s][a][j];
                    transition[s][a][sp] += p;
                    rewards[s][a].push((r, p));
                }
            }
        }
        let mdp = FiniteMdp {
            n_states: self.n_states,
            n_actions: self.n_actions,
            transition,
            rewards,
            gamma: self.gamma,
            initial_dist: self.initial_dist.clone(),
        };
        mdp.validate()?;
        Ok(mdp)
    }

    fn shares_support(&self, other: &RewardFactoredMdp) -> bool {
        self.n_states == other.n_states
            && self.n_actions == other.n_actions
            && self.gamma == other.gamma
            && self.support == other.support
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub abs_g: f64,
    /// `gamma * d_V` where `d_V = |E_hat V(f(s,a,r)) - E V(f(s,a,r))|`.
    pub gamma_d_v: f64,
    /// `d_1 = |E_hat r - E r|`.
    pub d_1: f64,
    pub holds: bool,
}

/// Checks `|G| <= gamma d_V + d_1` at `(s, a)` for a reward-factored pair.
pub fn bound_decomposition(
    m: &RewardFactoredMdp,
    m_hat: &RewardFactoredMdp,
    pi: &TabularPolicy,
    s: usize,
    a: usize,
) -> Result<BoundReport> {
    if !m.shares_support(m_hat) {
        return Err(Error::Validation(
            "MDP pair is not reward-factored over a shared support".into(),
        ));
    }
    let true_mdp = m.to_mdp();
    let true_mdp = true_mdp?;
    let hat_mdp = m_hat.to_mdp()?;
    let values = value_function(&true_mdp, pi)?;

    let expect = |probs: &[f64], f: &dyn Fn(usize) -> f64| -> f64 {
        m.support[s][a]
            .iter()
            .enumerate()
            .map(|(j, _)| probs[j] * f(j))
            .sum()
    };
    let p = &m.probs[s][a];
    let p_hat = &m_hat.probs[s][a];
    let reward_of = |j: usize| m.support[s][a][j].0;
    let value_of = |j: usize| values[m.support[s][a][j].1];

    let d_1 = (expect(p_hat, &reward_of) - expect(p, &reward_of)).abs();
    let d_v = (expect(p_hat, &value_of) - expect(p, &value_of)).abs();
    let g = mismatch_g_with_values(&true_mdp, &hat_mdp, &values, s, a);
    let abs_g = g.abs();
    let gamma_d_v = m.gamma * d_v;
    Ok(BoundReport {
        abs_g,
        gamma_d_v,
        d_1,
        holds: abs_g <= gamma_d_v + d_1 + 1e-12,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    /// True for the instance only if `lambda E_rho[p] >= |eta_hat - eta|`
    /// held for every enumerated deterministic policy.
    pub hypothesis_ok: bool,
    /// First policy (as an action vector) violating the hypothesis, if any.
    pub violating_policy: Option<Vec<usize>>,
    /// `eta_M(pi_hat)` for the penalized-MDP optimum `pi_hat`.
    pub eta_true_of_pi_hat: f64,
    /// `max_pi { eta_M(pi) - 2 lambda eps_p(pi) }` over enumerated policies.
    pub bound_rhs: f64,
    /// Bound verdict; meaningless when the hypothesis failed.
    pub holds: bool,
}

fn enumerate_deterministic_policies(n_states: usize, n_actions: usize) -> Vec<Vec<usize>> {
    let total = (n_actions as u64).pow(n_states as u32);
    let mut out = Vec::with_capacity(total as usize);
    for idx in 0..total {
        let mut actions = Vec::with_capacity(n_states);
        let mut rem = idx;
        for _ in 0..n_states {
            actions.push((rem % n_actions as u64) as usize);
            rem /= n_actions as u64;
        }
        out.push(actions);
    }
    out
}

/// Verifies the pessimism lower bound on one enumerable instance. The
/// penalized MDP uses the estimated dynamics with reward
/// `E[r_hat](s,a) - lambda p(s,a)`; its optimum over deterministic policies
/// is exact because a single MDP always has a deterministic optimum.
pub fn verify_theorem1(
    mdp: &FiniteMdp,
    mdp_hat: &FiniteMdp,
    penalty: &[Vec<f64>],
    lambda: f64,
) -> Result<Theorem1Report> {
    mdp.same_shape(mdp_hat)?;
    if penalty.len() != mdp.n_states || penalty.iter().any(|row| row.len() != mdp.n_actions) {
        return Err(Error::Dimension("penalty must be an S x A table".into()));
    }
    let n_policies = (mdp.n_actions as f64).powi(mdp.n_states as i32);
    if n_policies > 100_000.0 {
        return Err(Error::Validation(
            "instance too large to enumerate deterministic policies".into(),
        ));
    }

    // Penalized MDP: estimated dynamics, reward E[r_hat] - lambda p.
    let penalized_rewards: Vec<Vec<f64>> = (0..mdp.n_states)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| mdp_hat.mean_reward(s, a) - lambda * penalty[s][a])
                .collect()
        })
        .collect();
    let penalized = FiniteMdp::with_reward_matrix(
        mdp.n_states,
        mdp.n_actions,
        mdp_hat.transition.clone(),
        penalized_rewards,
        mdp.gamma,
        mdp.initial_dist.clone(),
    )?;

    let mut hypothesis_ok = true;
    let mut violating_policy = None;
    let mut best_penalized = f64::NEG_INFINITY;
    let mut pi_hat_actions = None;
    let mut bound_rhs = f64::NEG_INFINITY;

    for actions in enumerate_deterministic_policies(mdp.n_states, mdp.n_actions) {
        let pi = TabularPolicy::deterministic(&actions, mdp.n_actions);
        let eta_true = eta(mdp, &pi)?;
        let eta_hat = eta(mdp_hat, &pi)?;
        let rho_hat = occupancy(mdp_hat, &pi)?;
        let eps_p: f64 = (0..mdp.n_states)
            .map(|s| {
                (0..mdp.n_actions)
                    .map(|a| rho_hat[s][a] * penalty[s][a])
                    .sum::<f64>()
            })
            .sum();

        if lambda * eps_p + 1e-12 < (eta_hat - eta_true).abs() {
            hypothesis_ok = false;
            if violating_policy.is_none() {
                violating_policy = Some(actions.clone());
            }
        }

        let eta_penalized = eta(&penalized, &pi)?;
        if eta_penalized > best_penalized {
            best_penalized = eta_penalized;
            pi_hat_actions = Some(actions.clone());
        }
        bound_rhs = bound_rhs.max(eta_true - 2.0 * lambda * eps_p);
    }

    let pi_hat = TabularPolicy::deterministic(
        &pi_hat_actions.expect("at least one deterministic policy"),
        mdp.n_actions,
    );
    let eta_true_of_pi_hat = eta(mdp, &pi_hat)?;
    let holds = hypothesis_ok && eta_true_of_pi_hat + 1e-9 >= bound_rhs;
    Ok(Theorem1Report {
        hypothesis_ok,
        violating_policy,
        eta_true_of_pi_hat,
        bound_rhs,
        holds,
    })
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// Random dense MDP with point-mass rewards in `[0, 1]`.
pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> FiniteMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transition = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| random_distribution(&mut rng, n_states))
                .collect()
        })
        .collect();
    let reward = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let initial_dist = random_distribution(&mut rng, n_states);
    FiniteMdp::with_reward_matrix(n_states, n_actions, transition, reward, gamma, initial_dist)
        .expect("random MDP is valid by construction")
}

/// Random stochastic policy.
pub fn random_policy(seed: u64, n_states: usize, n_actions: usize) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TabularPolicy {
        probs: (0..n_states)
            .map(|_| random_distribution(&mut rng, n_actions))
            .collect(),
    }
}

/// A true/estimated pair: the estimated MDP perturbs both transitions and
/// rewards of the true one.
pub fn random_mdp_pair(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
) -> (FiniteMdp, FiniteMdp) {
    let mdp = random_mdp(seed, n_states, n_actions, gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut hat = mdp.clone();
    for s in 0..n_states {
        for a in 0..n_actions {
            hat.transition[s][a] = random_distribution(&mut rng, n_states);
            let delta: f64 = rng.random_range(-0.3..0.3);
            for (v, _) in hat.rewards[s][a].iter_mut() {
                *v += delta;
            }
        }
    }
    (mdp, hat)
}

/// A reward-factored true/estimated pair sharing support and successor
/// structure, differing only in outcome probabilities.
pub fn random_factored_pair(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    n_outcomes: usize,
    gamma: f64,
) -> (RewardFactoredMdp, RewardFactoredMdp) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(n_states);
    let mut probs_true = Vec::with_capacity(n_states);
    let mut probs_hat = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut srow = Vec::with_capacity(n_actions);
        let mut ptrow = Vec::with_capacity(n_actions);
        let mut phrow = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            let outcomes: Vec<(f64, usize)> = (0..n_outcomes)
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0..n_states),
                    )
                })
                .collect();
            srow.push(outcomes);
            ptrow.push(random_distribution(&mut rng, n_outcomes));
            phrow.push(random_distribution(&mut rng, n_outcomes));
        }
        support.push(srow);
        probs_true.push(ptrow);
        probs_hat.push(phrow);
    }
    let initial_dist = random_distribution(&mut rng, n_states);
    let m = RewardFactoredMdp {
        n_states,
        n_actions,
        support: support.clone(),
        probs: probs_true,
        gamma,
        initial_dist: initial_dist.clone(),
    };
    let m_hat = RewardFactoredMdp {
        n_states,
        n_actions,
        support,
        probs: probs_hat,
        gamma,
        initial_dist,
    };
    (m, m_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_state_mdp(r: f64, gamma: f64) -> FiniteMdp {
        FiniteMdp::with_reward_matrix(
            1,
            1,
            vec![vec![vec![1.0]]],
            vec![vec![r]],
            gamma,
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn value_function_geometric_series() {
        let mdp = single_state_mdp(1.0, 0.9);
        let pi = TabularPolicy::uniform(1, 1);
        let v = value_function(&mdp, &pi).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn value_function_myopic_and_zero() {
        let mdp = random_mdp(3, 4, 2, 0.0);
        let pi = random_policy(5, 4, 2);
        let v = value_function(&mdp, &pi).unwrap();
        for s in 0..4 {
            let r_pi: f64 = (0..2).map(|a| pi.probs[s][a] * mdp.mean_reward(s, a)).sum();
            assert!((v[s] - r_pi).abs() < 1e-12);
        }

        let mut zero = random_mdp(7, 3, 2, 0.9);
        for row in zero.rewards.iter_mut().flatten() {
            for (v, _) in row.iter_mut() {
                *v = 0.0;
            }
        }
        let pi = random_policy(8, 3, 2);
        let v = value_function(&zero, &pi).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn occupancy_gamma_zero_and_symmetry() {
        let mdp = random_mdp(11, 3, 2, 0.0);
        let pi = random_policy(12, 3, 2);
        let rho = occupancy(&mdp, &pi).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert!((rho[s][a] - mdp.initial_dist[s] * pi.probs[s][a]).abs() < 1e-12);
            }
        }

        // Uniform everything on 2 states x 2 actions: all entries 1/4.
        let uniform = FiniteMdp::with_reward_matrix(
            2,
            2,
            vec![vec![vec![0.5, 0.5]; 2]; 2],
            vec![vec![0.0; 2]; 2],
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap();
        let pi = TabularPolicy::uniform(2, 2);
        let rho = occupancy(&uniform, &pi).unwrap();
        for row in &rho {
            for &x in row {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occupancy_marginal_matches_visitation() {
        let mdp = random_mdp(21, 4, 3, 0.9);
        let pi = random_policy(22, 4, 3);
        let rho = occupancy(&mdp, &pi).unwrap();
        // State marginals must themselves be the discounted visitation:
        // d = (1-gamma) mu0 + gamma P^T d.
        let d: Vec<f64> = rho.iter().map(|row| row.iter().sum()).collect();
        for sp in 0..4 {
            let flow: f64 = (0..4)
                .map(|s| {
                    (0..3)
                        .map(|a| d[s] * pi.probs[s][a] * mdp.transition[s][a][sp])
                        .sum::<f64>()
                })
                .sum();
            let expected = (1.0 - mdp.gamma) * mdp.initial_dist[sp] + mdp.gamma * flow;
            assert!((d[sp] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn eta_conventions() {
        let mdp = single_state_mdp(1.0, 0.9);
        let pi = TabularPolicy::uniform(1, 1);
        // Constant reward 1 with normalized occupancy: eta = 1.
        assert!((eta(&mdp, &pi).unwrap() - 1.0).abs() < 1e-12);

        let mut zero = random_mdp(31, 5, 3, 0.5);
        for row in zero.rewards.iter_mut().flatten() {
            for (v, _) in row.iter_mut() {
                *v = 0.0;
            }
        }
        let pi = random_policy(32, 5, 3);
        assert!(eta(&zero, &pi).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mismatch_g_identical_mdps_is_zero() {
        let mdp = random_mdp(41, 3, 2, 0.9);
        let pi = random_policy(42, 3, 2);
        for s in 0..3 {
            for a in 0..2 {
                let g = mismatch_g(&mdp, &mdp, &pi, s, a).unwrap();
                assert!(g.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatch_g_gamma_zero_reduces_to_reward_gap() {
        let mdp = random_mdp(51, 3, 2, 0.0);
        let mut hat = mdp.clone();
        let delta = 0.37;
        for (v, _) in hat.rewards[1][0].iter_mut() {
            *v += delta;
        }
        let pi = random_policy(52, 3, 2);
        let g = mismatch_g(&mdp, &hat, &pi, 1, 0).unwrap();
        assert!((g - delta).abs() < 1e-12);
        let g_other = mismatch_g(&mdp, &hat, &pi, 0, 0).unwrap();
        assert!(g_other.abs() < 1e-12);
    }

    #[test]
    fn mismatch_g_monte_carlo_oracle() {
        let (mdp, hat) = random_mdp_pair(61, 3, 2, 0.9);
        let pi = random_policy(62, 3, 2);
        let (s, a) = (1, 1);
        let g = mismatch_g(&mdp, &hat, &pi, s, a).unwrap();
        let values = value_function(&mdp, &pi).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let n = 1_000_000usize;
        let mut sample_term = |m: &FiniteMdp, rng: &mut ChaCha8Rng| -> f64 {
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut sp = m.n_states - 1;
            for (j, &p) in m.transition[s][a].iter().enumerate() {
                cum += p;
                if u < cum {
                    sp = j;
                    break;
                }
            }
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let mut r = m.rewards[s][a].last().unwrap().0;
            for &(v, p) in &m.rewards[s][a] {
                cum += p;
                if u < cum {
                    r = v;
                    break;
                }
            }
            m.gamma * values[sp] + r
        };
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = sample_term(&hat, &mut rng) - sample_term(&mdp, &mut rng);
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let sigma = (var / n as f64).sqrt();
        assert!(
            (g - mean).abs() < 3.0 * sigma + 1e-9,
            "G = {g}, MC = {mean} +- {sigma}"
        );
    }

    #[test]
    fn lemma1_identical_pair_gives_zeros() {
        let mdp = random_mdp(71, 4, 2, 0.9);
        let pi = random_policy(72, 4, 2);
        let report = verify_lemma1(&mdp, &mdp, &pi).unwrap();
        assert!(report.lhs.abs() < 1e-12);
        assert!(report.rhs.abs() < 1e-10);
        assert!(report.abs_diff < 1e-10);
    }

    #[test]
    fn lemma1_on_random_pairs() {
        for seed in 0..20 {
            let gamma = [0.5, 0.9, 0.99][seed as usize % 3];
            let (mdp, hat) = random_mdp_pair(seed, 4, 3, gamma);
            let pi = random_policy(seed + 1000, 4, 3);
            let report = verify_lemma1(&mdp, &hat, &pi).unwrap();
            assert!(
                report.abs_diff < 1e-8,
                "seed {seed}: diff {}",
                report.abs_diff
            );
        }
    }

    #[test]
    fn lemma1_reward_only_perturbation() {
        let mdp = random_mdp(81, 3, 2, 0.9);
        let mut hat = mdp.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        for s in 0..3 {
            for a in 0..2 {
                let delta: f64 = rng.random_range(-0.2..0.2);
                for (v, _) in hat.rewards[s][a].iter_mut() {
                    *v += delta;
                }
            }
        }
        let pi = random_policy(83, 3, 2);
        let report = verify_lemma1(&mdp, &hat, &pi).unwrap();
        assert!(report.abs_diff < 1e-10);

        // With identical transitions the lhs is the occupancy-weighted
        // reward gap.
        let rho = occupancy(&hat, &pi).unwrap();
        let gap: f64 = (0..3)
            .map(|s| {
                (0..2)
                    .map(|a| rho[s][a] * (hat.mean_reward(s, a) - mdp.mean_reward(s, a)))
                    .sum::<f64>()
            })
            .sum();
        assert!((report.lhs - gap).abs() < 1e-10);
    }

    #[test]
    fn bound_decomposition_cases() {
        // Identical distributions: everything zero.
        let (m, _) = random_factored_pair(91, 3, 2, 4, 0.9);
        let pi = random_policy(92, 3, 2);
        let report = bound_decomposition(&m, &m, &pi, 0, 0).unwrap();
        assert!(report.abs_g < 1e-12 && report.gamma_d_v < 1e-12 && report.d_1 < 1e-12);
        assert!(report.holds);

        // gamma = 0: |G| = d_1 exactly.
        let (m, m_hat) = random_factored_pair(93, 3, 2, 4, 0.0);
        let report = bound_decomposition(&m, &m_hat, &pi, 1, 0).unwrap();
        assert!((report.abs_g - report.d_1).abs() < 1e-12);
        assert!(report.holds);

        // Incompatible supports are rejected.
        let (m, _) = random_factored_pair(94, 3, 2, 4, 0.9);
        let (_, other) = random_factored_pair(95, 3, 2, 4, 0.9);
        assert!(bound_decomposition(&m, &other, &pi, 0, 0).is_err());
    }

    #[test]
    fn bound_decomposition_random_instances() {
        for seed in 0..50 {
            let (m, m_hat) = random_factored_pair(seed, 3, 2, 4, 0.9);
            let pi = random_policy(seed + 2000, 3, 2);
            for s in 0..3 {
                for a in 0..2 {
                    let report = bound_decomposition(&m, &m_hat, &pi, s, a).unwrap();
                    assert!(report.holds, "seed {seed} ({s},{a}): {report:?}");
                }
            }
        }
    }

    /// Penalty construction guaranteeing the theorem's hypothesis: p(s,a) =
    /// max over enumerated policies of |G(s,a)| plus a margin, with lambda 1.
    fn hypothesis_penalty(mdp: &FiniteMdp, hat: &FiniteMdp, margin: f64) -> Vec<Vec<f64>> {
        let mut p = vec![vec![margin; mdp.n_actions]; mdp.n_states];
        for actions in enumerate_deterministic_policies(mdp.n_states, mdp.n_actions) {
            let pi = TabularPolicy::deterministic(&actions, mdp.n_actions);
            let values = value_function(mdp, &pi).unwrap();
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let g = mismatch_g_with_values(mdp, hat, &values, s, a).abs();
                    p[s][a] = p[s][a].max(g + margin);
                }
            }
        }
        p
    }

    #[test]
    fn theorem1_identical_pair_zero_penalty() {
        let mdp = random_mdp(101, 2, 2, 0.9);
        let p = vec![vec![0.0; 2]; 2];
        let report = verify_theorem1(&mdp, &mdp, &p, 1.0).unwrap();
        assert!(report.hypothesis_ok);
        assert!(report.holds);
        // With no penalty and no mismatch, pi_hat is optimal in M: the bound
        // is tight.
        assert!((report.eta_true_of_pi_hat - report.bound_rhs).abs() < 1e-9);
    }

    #[test]
    fn theorem1_random_instances() {
        for seed in 0..10 {
            let (mdp, hat) = random_mdp_pair(seed + 300, 2, 2, 0.9);
            let p = hypothesis_penalty(&mdp, &hat, 1e-6);
            let report = verify_theorem1(&mdp, &hat, &p, 1.0).unwrap();
            assert!(report.hypothesis_ok, "seed {seed}: hypothesis violated");
            assert!(report.holds, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn theorem1_huge_penalty_is_trivial() {
        let (mdp, hat) = random_mdp_pair(401, 2, 2, 0.9);
        let p = vec![vec![1e6; 2]; 2];
        let report = verify_theorem1(&mdp, &hat, &p, 1.0).unwrap();
        assert!(report.hypothesis_ok);
        assert!(report.holds);
    }

    #[test]
    fn theorem1_reports_hypothesis_violation() {
        // A mismatching pair with zero penalty cannot satisfy the hypothesis.
        let (mdp, hat) = random_mdp_pair(402, 2, 2, 0.9);
        let p = vec![vec![0.0; 2]; 2];
        let report = verify_theorem1(&mdp, &hat, &p, 1.0).unwrap();
        assert!(!report.hypothesis_ok);
        assert!(report.violating_policy.is_some());
    }
}

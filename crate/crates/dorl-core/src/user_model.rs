//! Offline reward model: an ensemble of Gaussian probabilistic
//! factorization models.
//!
//! Each member is a biased matrix-factorization model,
//! `mu = b + b_u + b_i + x_u . y_i`, with a variance head over the
//! concatenated embeddings and their squares:
//! `log var = clamp(w_var . z + w_var_sq . z^2 + b_var, -10, 4)` where
//! `z = x_u ++ y_i`. The squared features let the head express embedding
//! magnitude, which is what separates barely-trained (rare, uncertain)
//! items from well-trained ones; a purely linear head cannot represent
//! that and collapses to one global variance. Members are trained on the
//! Gaussian negative log likelihood, so the predicted variance tracks
//! per-sample noise; the ensemble's fitted reward is the mean of member
//! means and its uncertainty penalty `P_U` is the maximum member variance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LogTable;
use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

/// One Gaussian probabilistic factorization model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPMMember {
    pub user_embeddings: Vec<Vec<f64>>,
    pub item_embeddings: Vec<Vec<f64>>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_bias: f64,
    /// Variance head weights over `z = x_u ++ y_i` (length `2d`).
    pub w_var: Vec<f64>,
    /// Variance head weights over the squared features `z^2` (length `2d`).
    pub w_var_sq: Vec<f64>,
    pub b_var: f64,
}

impl GPMMember {
    pub fn zeroed(n_users: usize, n_items: usize, d: usize) -> Self {
        GPMMember {
            user_embeddings: vec![vec![0.0; d]; n_users],
            item_embeddings: vec![vec![0.0; d]; n_items],
            user_bias: vec![0.0; n_users],
            item_bias: vec![0.0; n_items],
            global_bias: 0.0,
            w_var: vec![0.0; 2 * d],
            w_var_sq: vec![0.0; 2 * d],
            b_var: 0.0,
        }
    }

    /// Random init: embeddings `N(0, 1) * 0.1 / sqrt(d)`, weights zero so the
    /// initial predictive variance is 1 everywhere.
    pub fn init_random(n_users: usize, n_items: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 0.1 / (d as f64).sqrt();
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            z * scale
                        })
                        .collect()
                })
                .collect()
        };
        GPMMember {
            user_embeddings: draw(n_users),
            item_embeddings: draw(n_items),
            user_bias: vec![0.0; n_users],
            item_bias: vec![0.0; n_items],
            global_bias: 0.0,
            w_var: vec![0.0; 2 * d],
            w_var_sq: vec![0.0; 2 * d],
            b_var: 0.0,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_embeddings.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.user_embeddings.first().map_or(0, |e| e.len())
    }

    /// Unchecked forward pass; ids must be in range.
    fn forward(&self, user: usize, item: usize) -> (f64, f64) {
        let xu = &self.user_embeddings[user];
        let yi = &self.item_embeddings[item];
        let dot: f64 = xu.iter().zip(yi).map(|(a, b)| a * b).sum();
        let mu = self.global_bias + self.user_bias[user] + self.item_bias[item] + dot;
        let d = xu.len();
        let mut g = self.b_var;
        for j in 0..d {
            g += self.w_var[j] * xu[j] + self.w_var_sq[j] * xu[j] * xu[j];
            g += self.w_var[d + j] * yi[j] + self.w_var_sq[d + j] * yi[j] * yi[j];
        }
        (mu, g.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
    }

    /// Predicted mean and clamped log-variance for `(user, item)`.
    pub fn predict(&self, user: usize, item: usize) -> Result<(f64, f64)> {
        if user >= self.n_users() {
            return Err(Error::Validation(format!(
                "user {user} out of range (n_users = {})",
                self.n_users()
            )));
        }
        if item >= self.n_items() {
            return Err(Error::Validation(format!(
                "item {item} out of range (n_items = {})",
                self.n_items()
            )));
        }
        Ok(self.forward(user, item))
    }
}

/// `K` independently initialized members sharing `(n_users, n_items, d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPMEnsemble {
    pub members: Vec<GPMMember>,
}

impl GPMEnsemble {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.members.first() else {
            return Err(Error::Validation("ensemble must have K >= 1 members".into()));
        };
        let dims = (first.n_users(), first.n_items(), first.dim());
        for m in &self.members {
            if (m.n_users(), m.n_items(), m.dim()) != dims {
                return Err(Error::Dimension(
                    "ensemble members disagree on (n_users, n_items, d)".into(),
                ));
            }
            if m.w_var.len() != 2 * m.dim() || m.w_var_sq.len() != 2 * m.dim() {
                return Err(Error::Dimension("variance head must have length 2d".into()));
            }
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        self.members[0].n_users()
    }

    pub fn n_items(&self) -> usize {
        self.members[0].n_items()
    }
}

/// Fitted reward: mean of member means.
pub fn ensemble_reward(ensemble: &GPMEnsemble, user: usize, item: usize) -> f64 {
    let sum: f64 = ensemble
        .members
        .iter()
        .map(|m| m.forward(user, item).0)
        .sum();
    sum / ensemble.members.len() as f64
}

/// Uncertainty penalty `P_U`: maximum member variance.
pub fn uncertainty(ensemble: &GPMEnsemble, user: usize, item: usize) -> f64 {
    ensemble
        .members
        .iter()
        .map(|m| m.forward(user, item).1.exp())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// A training sample `(user, item, target)`.
pub type Sample = (u32, u32, f64);

/// Training hyperparameters for [`train_ensemble`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Ensemble size.
    pub k: usize,
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Re-weight samples by inverse empirical item exposure.
    pub ips: bool,
    /// `(low, high)` clip bounds for IPS weights.
    pub ips_clip: (f64, f64),
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "d, k, epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.l2_reg < 0.0 {
            return Err(Error::Config("l2_reg must be >= 0".into()));
        }
        let (lo, hi) = self.ips_clip;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "ips_clip must satisfy 0 < low <= high, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Gaussian NLL over a batch: the mean of
/// `w_j [ (y_j - mu_j)^2 / (2 var_j) + log(var_j) / 2 ]
///  + l2_reg (|x_u|^2 + |y_i|^2)`.
pub fn gpm_loss(member: &GPMMember, batch: &[Sample], weights: &[f64], l2_reg: f64) -> f64 {
    assert_eq!(batch.len(), weights.len());
    let mut total = 0.0;
    for (&(u, i, y), &w) in batch.iter().zip(weights) {
        let (u, i) = (u as usize, i as usize);
        let (mu, log_var) = member.forward(u, i);
        let var = log_var.exp();
        let e = y - mu;
        total += w * (e * e / (2.0 * var) + 0.5 * log_var);
        let xu_norm: f64 = member.user_embeddings[u].iter().map(|v| v * v).sum();
        let yi_norm: f64 = member.item_embeddings[i].iter().map(|v| v * v).sum();
        total += l2_reg * (xu_norm + yi_norm);
    }
    total / batch.len() as f64
}

/// Dense gradients of [`gpm_loss`] with respect to every member parameter.
#[derive(Debug, Clone)]
pub struct GpmGradients {
    pub user_embeddings: Vec<Vec<f64>>,
    pub item_embeddings: Vec<Vec<f64>>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_bias: f64,
    pub w_var: Vec<f64>,
    pub w_var_sq: Vec<f64>,
    pub b_var: f64,
}

/// Analytic gradients of [`gpm_loss`]. Clamped variance outputs receive no
/// gradient through the variance head, matching the loss exactly.
pub fn gpm_gradients(
    member: &GPMMember,
    batch: &[Sample],
    weights: &[f64],
    l2_reg: f64,
) -> GpmGradients {
    assert_eq!(batch.len(), weights.len());
    let d = member.dim();
    let inv_n = 1.0 / batch.len() as f64;
    let mut g = GpmGradients {
        user_embeddings: vec![vec![0.0; d]; member.n_users()],
        item_embeddings: vec![vec![0.0; d]; member.n_items()],
        user_bias: vec![0.0; member.n_users()],
        item_bias: vec![0.0; member.n_items()],
        global_bias: 0.0,
        w_var: vec![0.0; 2 * d],
        b_var: 0.0,
    };
    for (&(u, i, y), &w) in batch.iter().zip(weights) {
        let (u, i) = (u as usize, i as usize);
        let xu = &member.user_embeddings[u];
        let yi = &member.item_embeddings[i];
        let dot: f64 = xu.iter().zip(yi).map(|(a, b)| a * b).sum();
        let mu = member.global_bias + member.user_bias[u] + member.item_bias[i] + dot;
        let mut g_raw = member.b_var;
        for j in 0..d {
            g_raw += member.w_var[j] * xu[j] + member.w_var[d + j] * yi[j];
        }
        let clamped = !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&g_raw);
        let log_var = g_raw.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        let var = log_var.exp();
        let e = mu - y;

        // d loss / d mu, scaled by the batch mean and sample weight.
        let dmu = w * inv_n * e / var;
        // d loss / d log_var, vanishing where the clamp is active.
        let dg = if clamped {
            0.0
        } else {
            w * inv_n * (0.5 - e * e / (2.0 * var))
        };

        g.global_bias += dmu;
        g.user_bias[u] += dmu;
        g.item_bias[i] += dmu;
        for j in 0..d {
            g.user_embeddings[u][j] +=
                dmu * yi[j] + dg * member.w_var[j] + inv_n * 2.0 * l2_reg * xu[j];
            g.item_embeddings[i][j] +=
                dmu * xu[j] + dg * member.w_var[d + j] + inv_n * 2.0 * l2_reg * yi[j];
            g.w_var[j] += dg * xu[j];
            g.w_var[d + j] += dg * yi[j];
        }
        g.b_var += dg;
    }
    g
}

fn apply_gradients(member: &mut GPMMember, g: &GpmGradients, lr: f64) {
    for (row, grow) in member.user_embeddings.iter_mut().zip(&g.user_embeddings) {
        for (v, gv) in row.iter_mut().zip(grow) {
            *v -= lr * gv;
        }
    }
    for (row, grow) in member.item_embeddings.iter_mut().zip(&g.item_embeddings) {
        for (v, gv) in row.iter_mut().zip(grow) {
            *v -= lr * gv;
        }
    }
    for (v, gv) in member.user_bias.iter_mut().zip(&g.user_bias) {
        *v -= lr * gv;
    }
    for (v, gv) in member.item_bias.iter_mut().zip(&g.item_bias) {
        *v -= lr * gv;
    }
    member.global_bias -= lr * g.global_bias;
    for (v, gv) in member.w_var.iter_mut().zip(&g.w_var) {
        *v -= lr * gv;
    }
    member.b_var -= lr * g.b_var;
}

/// Inverse-propensity weights from empirical item exposure:
/// `w = clamp(mean_count / count(item), low, high)` per record, so uniformly
/// exposed data gets weight 1 before clipping.
pub fn ips_weights(logs: &LogTable, clip: (f64, f64)) -> Vec<f64> {
    let mut counts = vec![0u64; logs.n_items];
    for r in &logs.records {
        counts[r.item_id as usize] += 1;
    }
    let distinct = counts.iter().filter(|&&c| c > 0).count().max(1);
    let mean_count = logs.len() as f64 / distinct as f64;
    logs.records
        .iter()
        .map(|r| (mean_count / counts[r.item_id as usize] as f64).clamp(clip.0, clip.1))
        .collect()
}

fn train_member(
    samples: &[Sample],
    weights: &[f64],
    cfg: &TrainConfig,
    n_users: usize,
    n_items: usize,
    member_seed: u64,
) -> Result<(GPMMember, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(member_seed);
    let mut member = GPMMember::init_random(n_users, n_items, cfg.d, &mut rng);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut final_loss = f64::NAN;

    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut batch_weights = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        // Fisher-Yates with the member's own stream: members differ only by
        // initialization and shuffle order.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch_weights.clear();
            for &idx in chunk {
                batch.push(samples[idx]);
                batch_weights.push(weights[idx]);
            }
            let loss = gpm_loss(&member, &batch, &batch_weights, cfg.l2_reg);
            if !loss.is_finite() {
                return Err(Error::Diverged);
            }
            let grads = gpm_gradients(&member, &batch, &batch_weights, cfg.l2_reg);
            apply_gradients(&mut member, &grads, cfg.learning_rate);
            epoch_loss += loss;
            n_batches += 1;
        }
        final_loss = epoch_loss / n_batches as f64;
    }
    Ok((member, final_loss))
}

/// Trains `K` members by mini-batch SGD on the Gaussian NLL, member `k`
/// seeded with `cfg.seed + k`. Returns the ensemble and each member's mean
/// loss over the final epoch.
pub fn train_ensemble(logs: &LogTable, cfg: &TrainConfig) -> Result<(GPMEnsemble, Vec<f64>)> {
    cfg.validate()?;
    if logs.is_empty() {
        return Err(Error::Validation("cannot train on empty logs".into()));
    }
    let samples: Vec<Sample> = logs
        .records
        .iter()
        .map(|r| (r.user_id, r.item_id, r.reward))
        .collect();
    let weights = if cfg.ips {
        ips_weights(logs, cfg.ips_clip)
    } else {
        vec![1.0; samples.len()]
    };

    let results: Vec<Result<(GPMMember, f64)>> = (0..cfg.k)
        .into_par_iter()
        .map(|k| {
            train_member(
                &samples,
                &weights,
                cfg,
                logs.n_users,
                logs.n_items,
                cfg.seed + k as u64,
            )
        })
        .collect();

    let mut members = Vec::with_capacity(cfg.k);
    let mut losses = Vec::with_capacity(cfg.k);
    for r in results {
        let (m, loss) = r?;
        members.push(m);
        losses.push(loss);
    }
    let ensemble = GPMEnsemble { members };
    ensemble.validate()?;
    Ok((ensemble, losses))
}

//! Offline log schema, CSV ingestion, synthetic world generation, and
//! training-set statistics.
//!
//! A [`LogTable`] is the offline dataset a behavior policy left behind; a
//! [`WorldSpec`] is the fully-observed ground-truth preference matrix that
//! plays the role of online users during evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::QuitRule;
use crate::error::{Error, Result};

/// Expected header of a log CSV file.
pub const LOG_CSV_HEADER: &str = "user_id,item_id,timestamp,reward,category_id";

/// One logged user-item interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: u32,
    pub item_id: u32,
    /// Seconds since epoch.
    pub timestamp: i64,
    /// Feedback signal in `[0, 1]`.
    pub reward: f64,
    pub category_id: u32,
}

/// The offline dataset: records sorted by `(user_id, timestamp)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogTable {
    pub records: Vec<InteractionRecord>,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
}

impl LogTable {
    /// Builds a table with explicit universe sizes, validating ids and
    /// rewards and sorting records by `(user_id, timestamp)` (stable).
    pub fn new(
        mut records: Vec<InteractionRecord>,
        n_users: usize,
        n_items: usize,
        n_categories: usize,
    ) -> Result<Self> {
        for r in &records {
            if (r.user_id as usize) >= n_users {
                return Err(Error::Validation(format!(
                    "user_id {} out of range (n_users = {n_users})",
                    r.user_id
                )));
            }
            if (r.item_id as usize) >= n_items {
                return Err(Error::Validation(format!(
                    "item_id {} out of range (n_items = {n_items})",
                    r.item_id
                )));
            }
            if (r.category_id as usize) >= n_categories {
                return Err(Error::Validation(format!(
                    "category_id {} out of range (n_categories = {n_categories})",
                    r.category_id
                )));
            }
            if !(0.0..=1.0).contains(&r.reward) {
                return Err(Error::Validation(format!(
                    "reward {} outside [0, 1]",
                    r.reward
                )));
            }
        }
        records.sort_by_key(|r| (r.user_id, r.timestamp));
        Ok(LogTable {
            records,
            n_users,
            n_items,
            n_categories,
        })
    }

    /// Builds a table inferring universe sizes as `max id + 1` (0 if empty).
    pub fn from_records(records: Vec<InteractionRecord>) -> Result<Self> {
        let n_users = records.iter().map(|r| r.user_id as usize + 1).max().unwrap_or(0);
        let n_items = records.iter().map(|r| r.item_id as usize + 1).max().unwrap_or(0);
        let n_categories = records
            .iter()
            .map(|r| r.category_id as usize + 1)
            .max()
            .unwrap_or(0);
        Self::new(records, n_users, n_items, n_categories)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Iterates over per-user slices in `user_id` order. Records within a
    /// slice keep their timestamp order.
    pub fn user_sequences(&self) -> impl Iterator<Item = (u32, &[InteractionRecord])> {
        UserSequences {
            records: &self.records,
            pos: 0,
        }
    }
}

struct UserSequences<'a> {
    records: &'a [InteractionRecord],
    pos: usize,
}

impl<'a> Iterator for UserSequences<'a> {
    type Item = (u32, &'a [InteractionRecord]);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.records.len() {
            return None;
        }
        let user = self.records[self.pos].user_id;
        let start = self.pos;
        while self.pos < self.records.len() && self.records[self.pos].user_id == user {
            self.pos += 1;
        }
        Some((user, &self.records[start..self.pos]))
    }
}

/// Reads a log CSV with header [`LOG_CSV_HEADER`]; universe sizes are
/// inferred as `max id + 1`.
pub fn load_logs(path: impl AsRef<Path>) -> Result<LogTable> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, Ok(line))) => line,
        Some((_, Err(e))) => return Err(Error::io(path.display().to_string(), e)),
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file, expected header".into(),
            })
        }
    };
    if header.trim_end_matches('\r') != LOG_CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("bad header {header:?}, expected {LOG_CSV_HEADER:?}"),
        });
    }

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let record = InteractionRecord {
            user_id: fields[0].parse().map_err(|_| parse_err("user_id"))?,
            item_id: fields[1].parse().map_err(|_| parse_err("item_id"))?,
            timestamp: fields[2].parse().map_err(|_| parse_err("timestamp"))?,
            reward: fields[3].parse().map_err(|_| parse_err("reward"))?,
            category_id: fields[4].parse().map_err(|_| parse_err("category_id"))?,
        };
        if !(0.0..=1.0).contains(&record.reward) {
            return Err(Error::Validation(format!(
                "line {line_no}: reward {} outside [0, 1]",
                record.reward
            )));
        }
        records.push(record);
    }
    LogTable::from_records(records)
}

/// Writes a log CSV readable by [`load_logs`]. LF line endings, UTF-8.
pub fn write_logs(table: &LogTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = String::new();
    buf.push_str(LOG_CSV_HEADER);
    buf.push('\n');
    for r in &table.records {
        buf.push_str(&format!(
            "{},{},{},{},{}\n",
            r.user_id, r.item_id, r.timestamp, r.reward, r.category_id
        ));
    }
    file.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Ground-truth world: a fully-observed preference matrix plus the quit rule
/// governing evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// `preference[u][i]` in `[0, 1]` is the reward user `u` gives item `i`.
    pub preference: Vec<Vec<f64>>,
    /// Single category label per item, each in `[0, n_categories)`.
    pub item_category: Vec<u32>,
    pub quit_rule: QuitRule,
    pub max_rounds: u32,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.preference.len() != self.n_users {
            return Err(Error::Dimension(format!(
                "preference has {} rows, expected {}",
                self.preference.len(),
                self.n_users
            )));
        }
        for row in &self.preference {
            if row.len() != self.n_items {
                return Err(Error::Dimension(format!(
                    "preference row has {} columns, expected {}",
                    row.len(),
                    self.n_items
                )));
            }
            for &p in row {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Validation(format!("preference {p} outside [0, 1]")));
                }
            }
        }
        if self.item_category.len() != self.n_items {
            return Err(Error::Dimension(format!(
                "item_category has {} entries, expected {}",
                self.item_category.len(),
                self.n_items
            )));
        }
        for &c in &self.item_category {
            if (c as usize) >= self.n_categories {
                return Err(Error::Validation(format!(
                    "category {c} out of range (n_categories = {})",
                    self.n_categories
                )));
            }
        }
        Ok(())
    }
}

/// Parameters for [`generate_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldGenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
    /// Uniform noise half-width added to each preference entry, in `[0, 0.5)`.
    pub noise_scale: f64,
    /// Debug switch: forces all latent factors to zero so every preference
    /// entry is `sigmoid(0) = 0.5` (before noise).
    #[serde(default)]
    pub zero_latent: bool,
    pub quit_rule: QuitRule,
    pub max_rounds: u32,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Generates a synthetic world: `preference[u][i] =
/// clamp(sigmoid(x_u . y_i) + eps, 0, 1)` with latent factors drawn i.i.d.
/// standard normal scaled by `1/sqrt(latent_dim)` and `eps` uniform in
/// `[-noise_scale, +noise_scale]`. Item categories are assigned in
/// contiguous blocks of near-equal size. Deterministic in `seed`.
pub fn generate_world(cfg: &WorldGenConfig, seed: u64) -> Result<WorldSpec> {
    if cfg.n_users == 0 || cfg.n_items == 0 || cfg.n_categories == 0 {
        return Err(Error::Config("world counts must be >= 1".into()));
    }
    if cfg.latent_dim == 0 {
        return Err(Error::Config("latent_dim must be >= 1".into()));
    }
    if !(0.0..0.5).contains(&cfg.noise_scale) {
        return Err(Error::Config(format!(
            "noise_scale {} outside [0, 0.5)",
            cfg.noise_scale
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let mut draw_factors = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..cfg.latent_dim)
                    .map(|_| {
                        if cfg.zero_latent {
                            // Keep the stream in sync so the flag only zeroes factors.
                            let _: f64 = StandardNormal.sample(&mut rng);
                            0.0
                        } else {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * scale
                        }
                    })
                    .collect()
            })
            .collect()
    };
    let user_factors = draw_factors(cfg.n_users);
    let item_factors = draw_factors(cfg.n_items);

    let mut preference = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut row = Vec::with_capacity(cfg.n_items);
        for i in 0..cfg.n_items {
            let dot: f64 = user_factors[u]
                .iter()
                .zip(&item_factors[i])
                .map(|(a, b)| a * b)
                .sum();
            let eps = if cfg.noise_scale > 0.0 {
                rng.random_range(-cfg.noise_scale..=cfg.noise_scale)
            } else {
                0.0
            };
            row.push((sigmoid(dot) + eps).clamp(0.0, 1.0));
        }
        preference.push(row);
    }

    let item_category = (0..cfg.n_items)
        .map(|i| ((i * cfg.n_categories) / cfg.n_items) as u32)
        .collect();

    let world = WorldSpec {
        n_users: cfg.n_users,
        n_items: cfg.n_items,
        n_categories: cfg.n_categories,
        preference,
        item_category,
        quit_rule: cfg.quit_rule.clone(),
        max_rounds: cfg.max_rounds,
    };
    world.validate()?;
    Ok(world)
}

/// How the logging policy chose items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Uniform,
    PopularitySoftmax,
}

/// Logging-policy parameters. `popularity_softmax` samples from
/// `softmax((preference[u][i] + bump_i) / temperature)` where `bump_i =
/// exp(-(i - popularity_center)^2 / (2 popularity_width^2))` is a shared
/// popularity bump over the item index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorPolicyConfig {
    pub kind: BehaviorKind,
    pub temperature: f64,
    pub popularity_center: f64,
    pub popularity_width: f64,
}

impl BehaviorPolicyConfig {
    pub fn uniform() -> Self {
        BehaviorPolicyConfig {
            kind: BehaviorKind::Uniform,
            temperature: 1.0,
            popularity_center: 0.0,
            popularity_width: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.popularity_width <= 0.0 {
            return Err(Error::Config("popularity_width must be > 0".into()));
        }
        Ok(())
    }

    /// Per-user item distribution under this behavior policy.
    pub fn item_distribution(&self, world: &WorldSpec, user: usize) -> Vec<f64> {
        match self.kind {
            BehaviorKind::Uniform => vec![1.0 / world.n_items as f64; world.n_items],
            BehaviorKind::PopularitySoftmax => {
                let logits: Vec<f64> = (0..world.n_items)
                    .map(|i| {
                        let d = i as f64 - self.popularity_center;
                        let bump = (-d * d / (2.0 * self.popularity_width * self.popularity_width))
                            .exp();
                        (world.preference[user][i] + bump) / self.temperature
                    })
                    .collect();
                softmax(&logits)
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples `events_per_user` items i.i.d. per user from the behavior
/// distribution; the logged reward is the ground-truth preference and
/// timestamps count up from 0 per user.
pub fn generate_logs(
    world: &WorldSpec,
    behavior: &BehaviorPolicyConfig,
    events_per_user: usize,
    seed: u64,
) -> Result<LogTable> {
    behavior.validate()?;
    if events_per_user == 0 {
        return Err(Error::Config("events_per_user must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(world.n_users * events_per_user);
    for u in 0..world.n_users {
        let probs = behavior.item_distribution(world, u);
        for t in 0..events_per_user {
            let i = sample_index(&probs, &mut rng);
            records.push(InteractionRecord {
                user_id: u as u32,
                item_id: i as u32,
                timestamp: t as i64,
                reward: world.preference[u][i],
                category_id: world.item_category[i],
            });
        }
    }
    LogTable::new(records, world.n_users, world.n_items, world.n_categories)
}

/// Returns the smallest set of categories, ranked by descending interaction
/// count (ties broken by ascending id), whose cumulative count covers at
/// least `coverage` of all interactions.
pub fn dominated_categories(logs: &LogTable, coverage: f64) -> Result<BTreeSet<u32>> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage {coverage} outside (0, 1]")));
    }
    if logs.is_empty() {
        return Err(Error::Validation("cannot rank categories of empty logs".into()));
    }
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for r in &logs.records {
        *counts.entry(r.category_id).or_insert(0) += 1;
    }
    let mut ranked: Vec<(u32, u64)> = counts.into_iter().collect();
    // Descending count, ascending id on ties (BTreeMap already gave ascending ids).
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let total = logs.len() as f64;
    let mut out = BTreeSet::new();
    let mut cum = 0u64;
    for (cat, count) in ranked {
        out.insert(cat);
        cum += count;
        if cum as f64 / total + 1e-12 >= coverage {
            break;
        }
    }
    Ok(out)
}

//! End-to-end experiment pipeline: one JSON config drives
//! `gen-world -> gen-logs -> {train-user-model, build-entropy-index} ->
//! train-policy -> evaluate / sweep`.
//!
//! Every artifact embeds a format `version`, the driving config's hash and
//! the stage seed. All randomness derives from the single global seed via
//! fixed stage offsets (see [`stage`]). Stages are deterministic; sweeps
//! and ensemble training parallelize only across self-seeded units, so
//! results do not depend on the thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AcHyper, ActMode, ActorCritic, train_policy};
use crate::data::{
    dominated_categories, generate_logs, generate_world, load_logs, write_logs,
    BehaviorPolicyConfig, LogTable, WorldGenConfig, WorldSpec,
};
use crate::env::QuitRule;
use crate::error::{Error, Result};
use crate::eval::{
    day1_retention, evaluate, repeat_rates, EpsilonGreedyAgent, EvalSummary, MeanStd,
    PolicyAgent, RetentionBucket, UcbAgent,
};
use crate::penalty::{build_entropy_index, EntropyIndex, EntropyIndexDump, PenaltyConfig};
use crate::user_model::{train_ensemble, GPMEnsemble, GPMMember, TrainConfig};

/// Per-stage seed offsets added to the global seed.
pub mod stage {
    pub const WORLD: u64 = 1;
    pub const LOGS: u64 = 2;
    pub const USER_MODEL: u64 = 3;
    pub const POLICY: u64 = 4;
    pub const EVAL: u64 = 5;
}

pub fn stage_seed(global_seed: u64, offset: u64) -> u64 {
    global_seed.wrapping_add(offset)
}

/// Policy-head hyperparameters as they appear in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// State-tracker window.
    pub window: usize,
    pub emb_dim: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub rollout_len: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
}

impl PolicySection {
    pub fn to_hyper(&self, seed: u64) -> AcHyper {
        AcHyper {
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
            gamma: self.gamma,
            entropy_coef: self.entropy_coef,
            rollout_len: self.rollout_len,
            episodes_per_epoch: self.episodes_per_epoch,
            epochs: self.epochs,
            seed,
        }
    }
}

fn default_coverage() -> f64 {
    0.8
}

fn default_retention_buckets() -> Vec<u64> {
    vec![5, 20]
}

fn default_epsilon() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub mode: ActMode,
    /// Exploration rate of the epsilon-greedy baseline.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Interaction coverage defining the dominated categories.
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    /// Events-per-day bucket edges for day-1 retention.
    #[serde(default = "default_retention_buckets")]
    pub retention_buckets: Vec<u64>,
}

/// The whole experiment in one hand-editable JSON file. Unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldGenConfig,
    pub behavior: BehaviorPolicyConfig,
    pub events_per_user: usize,
    pub user_model: TrainConfig,
    pub penalty: PenaltyConfig,
    pub agent: PolicySection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.behavior.validate()?;
        self.user_model.validate()?;
        self.penalty.validate()?;
        if self.events_per_user == 0 {
            return Err(Error::Config("events_per_user must be >= 1".into()));
        }
        if self.eval.n_episodes == 0 {
            return Err(Error::Config("eval.n_episodes must be >= 1".into()));
        }
        if !(self.eval.coverage > 0.0 && self.eval.coverage <= 1.0) {
            return Err(Error::Config("eval.coverage outside (0, 1]".into()));
        }
        Ok(())
    }

    /// Truncated SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The six runnable methods. The model-based four share the actor-critic
/// machinery and differ only in configuration:
/// MBPO is DORL with `lambda1 = lambda2 = 0`, MOPO keeps `lambda1` but zeroes
/// `lambda2`, IPS is MBPO on the IPS-reweighted user model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Dorl,
    Mopo,
    Mbpo,
    Ips,
    Egreedy,
    Ucb,
}

impl Baseline {
    pub const ALL: [Baseline; 6] = [
        Baseline::Dorl,
        Baseline::Mopo,
        Baseline::Mbpo,
        Baseline::Ips,
        Baseline::Egreedy,
        Baseline::Ucb,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Dorl => "dorl",
            Baseline::Mopo => "mopo",
            Baseline::Mbpo => "mbpo",
            Baseline::Ips => "ips",
            Baseline::Egreedy => "egreedy",
            Baseline::Ucb => "ucb",
        }
    }

    /// Whether this baseline trains an actor-critic policy.
    pub fn trains_policy(&self) -> bool {
        matches!(
            self,
            Baseline::Dorl | Baseline::Mopo | Baseline::Mbpo | Baseline::Ips
        )
    }

    /// Whether the user model must be trained with IPS reweighting.
    pub fn wants_ips_user_model(&self) -> bool {
        matches!(self, Baseline::Ips)
    }

    /// The penalty weights this baseline actually uses.
    pub fn effective_penalty(&self, base: &PenaltyConfig) -> PenaltyConfig {
        let mut p = base.clone();
        match self {
            Baseline::Dorl => {}
            Baseline::Mopo => p.lambda2 = 0.0,
            Baseline::Mbpo | Baseline::Ips => {
                p.lambda1 = 0.0;
                p.lambda2 = 0.0;
            }
            Baseline::Egreedy | Baseline::Ucb => {
                p.lambda1 = 0.0;
                p.lambda2 = 0.0;
            }
        }
        p
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .iter()
            .find(|b| b.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown baseline {s:?}")))
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Artifact file paths inside one output directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub dir: PathBuf,
}

impl Workdir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Workdir { dir: dir.into() }
    }

    pub fn world(&self) -> PathBuf {
        self.dir.join("world.json")
    }

    pub fn logs(&self) -> PathBuf {
        self.dir.join("logs.csv")
    }

    pub fn logs_meta(&self) -> PathBuf {
        self.dir.join("logs.meta.json")
    }

    pub fn user_model(&self, ips: bool) -> PathBuf {
        self.dir
            .join(if ips { "user_model_ips.json" } else { "user_model.json" })
    }

    pub fn entropy_index(&self) -> PathBuf {
        self.dir.join("entropy_index.json")
    }

    pub fn policy(&self, baseline: Baseline) -> PathBuf {
        self.dir.join(format!("policy_{}.json", baseline.name()))
    }

    pub fn results(&self, baseline: Baseline) -> PathBuf {
        self.dir.join(format!("results_{}.csv", baseline.name()))
    }

    pub fn results_meta(&self, baseline: Baseline) -> PathBuf {
        self.dir
            .join(format!("results_{}.meta.json", baseline.name()))
    }

    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }

    pub fn sweep_meta(&self) -> PathBuf {
        self.dir.join("sweep.meta.json")
    }

    pub fn analysis(&self) -> PathBuf {
        self.dir.join("analysis.json")
    }

    fn ensure_exists(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)
            .map_err(|e| Error::io(self.dir.display().to_string(), e))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Internal(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: DeserializeOwned>(path: &Path, run_first: &str) -> Result<T> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                run_first: run_first.to_string(),
            })
        }
        Err(e) => return Err(Error::io(path.display().to_string(), e)),
    };
    serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn warn_on_hash_mismatch(expected: &str, found: &str, what: &Path) {
    if expected != found {
        eprintln!(
            "warning: {} was produced by a different config (hash {found}, current {expected})",
            what.display()
        );
    }
}

pub const WORLD_ARTIFACT_VERSION: u32 = 1;
pub const LOGS_META_VERSION: u32 = 1;
pub const USER_MODEL_VERSION: u32 = 1;
pub const POLICY_VERSION: u32 = 1;
pub const ANALYSIS_VERSION: u32 = 1;
pub const RESULTS_META_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldArtifact {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub item_category: Vec<u32>,
    pub preference: Vec<Vec<f64>>,
    pub quit_rule: QuitRule,
    pub max_rounds: u32,
}

impl WorldArtifact {
    fn from_world(world: &WorldSpec, config_hash: String, seed: u64) -> Self {
        WorldArtifact {
            version: WORLD_ARTIFACT_VERSION,
            config_hash,
            seed,
            n_users: world.n_users,
            n_items: world.n_items,
            n_categories: world.n_categories,
            item_category: world.item_category.clone(),
            preference: world.preference.clone(),
            quit_rule: world.quit_rule.clone(),
            max_rounds: world.max_rounds,
        }
    }

    fn into_world(self) -> Result<WorldSpec> {
        let world = WorldSpec {
            n_users: self.n_users,
            n_items: self.n_items,
            n_categories: self.n_categories,
            preference: self.preference,
            item_category: self.item_category,
            quit_rule: self.quit_rule,
            max_rounds: self.max_rounds,
        };
        world.validate()?;
        Ok(world)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogsMeta {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserModelArtifact {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub members: Vec<GPMMember>,
    pub final_losses: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyIndexArtifact {
    pub version: u32,
    pub config_hash: String,
    pub n_items: usize,
    pub orders: Vec<usize>,
    pub counts: BTreeMap<String, u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArtifact {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub baseline: Baseline,
    /// Effective penalty weights the policy was trained with.
    pub penalty: PenaltyConfig,
    pub actor_critic: ActorCritic,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisArtifact {
    pub version: u32,
    pub config_hash: String,
    pub coverage: f64,
    pub dominated_categories: Vec<u32>,
    pub mean_item_repeat_rate: f64,
    pub mean_category_repeat_rate: f64,
    /// Present only when the logs span at least two days.
    pub day1_retention: Option<Vec<RetentionBucket>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsMeta {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub baseline: Option<Baseline>,
    pub n_episodes: usize,
}

/// gen-world: synthesizes the ground-truth world.
pub fn run_gen_world(cfg: &ExperimentConfig, out: &Workdir) -> Result<WorldSpec> {
    cfg.validate()?;
    out.ensure_exists()?;
    let seed = stage_seed(cfg.seed, stage::WORLD);
    let world = generate_world(&cfg.world, seed)?;
    write_json(
        &out.world(),
        &WorldArtifact::from_world(&world, cfg.hash(), seed),
    )?;
    Ok(world)
}

pub fn load_world(cfg: &ExperimentConfig, out: &Workdir) -> Result<WorldSpec> {
    let artifact: WorldArtifact = read_json(&out.world(), "gen-world")?;
    warn_on_hash_mismatch(&cfg.hash(), &artifact.config_hash, &out.world());
    artifact.into_world()
}

/// gen-logs: samples the behavior-policy dataset from the world.
pub fn run_gen_logs(cfg: &ExperimentConfig, out: &Workdir) -> Result<LogTable> {
    let world = load_world(cfg, out)?;
    let seed = stage_seed(cfg.seed, stage::LOGS);
    let logs = generate_logs(&world, &cfg.behavior, cfg.events_per_user, seed)?;
    write_logs(&logs, out.logs())?;
    write_json(
        &out.logs_meta(),
        &LogsMeta {
            version: LOGS_META_VERSION,
            config_hash: cfg.hash(),
            seed,
            n_users: logs.n_users,
            n_items: logs.n_items,
            n_categories: logs.n_categories,
            n_records: logs.len(),
        },
    )?;
    Ok(logs)
}

pub fn load_logs_artifact(cfg: &ExperimentConfig, out: &Workdir) -> Result<LogTable> {
    let meta: LogsMeta = read_json(&out.logs_meta(), "gen-logs")?;
    warn_on_hash_mismatch(&cfg.hash(), &meta.config_hash, &out.logs_meta());
    let table = load_logs(out.logs()).map_err(|e| match e {
        Error::Io { .. } => Error::MissingArtifact {
            artifact: out.logs().display().to_string(),
            run_first: "gen-logs".to_string(),
        },
        other => other,
    })?;
    // The CSV intentionally lacks universe sizes; restore them from the meta
    // sidecar so unseen trailing items keep their slots.
    LogTable::new(table.records, meta.n_users, meta.n_items, meta.n_categories)
}

/// train-user-model: fits the GPM ensemble (IPS-reweighted for the `ips`
/// baseline) on the logged data.
pub fn run_train_user_model(
    cfg: &ExperimentConfig,
    out: &Workdir,
    ips: bool,
) -> Result<(GPMEnsemble, Vec<f64>)> {
    let logs = load_logs_artifact(cfg, out)?;
    let seed = stage_seed(cfg.seed, stage::USER_MODEL);
    let mut train_config = cfg.user_model.clone();
    train_config.seed = seed;
    train_config.ips = ips;
    let (ensemble, losses) = train_ensemble(&logs, &train_config)?;
    write_json(
        &out.user_model(ips),
        &UserModelArtifact {
            version: USER_MODEL_VERSION,
            config_hash: cfg.hash(),
            seed,
            train_config,
            members: ensemble.members.clone(),
            final_losses: losses.clone(),
        },
    )?;
    Ok((ensemble, losses))
}

pub fn load_user_model(cfg: &ExperimentConfig, out: &Workdir, ips: bool) -> Result<GPMEnsemble> {
    let run_first = if ips {
        "train-user-model --baseline ips"
    } else {
        "train-user-model"
    };
    let artifact: UserModelArtifact = read_json(&out.user_model(ips), run_first)?;
    warn_on_hash_mismatch(&cfg.hash(), &artifact.config_hash, &out.user_model(ips));
    let ensemble = GPMEnsemble {
        members: artifact.members,
    };
    ensemble.validate()?;
    if ensemble.n_users() != cfg.world.n_users || ensemble.n_items() != cfg.world.n_items {
        return Err(Error::Dimension(format!(
            "user model covers {}x{}, config expects {}x{}",
            ensemble.n_users(),
            ensemble.n_items(),
            cfg.world.n_users,
            cfg.world.n_items
        )));
    }
    Ok(ensemble)
}

/// build-entropy-index: scans the logs into the k-order pattern index.
pub fn run_build_entropy_index(cfg: &ExperimentConfig, out: &Workdir) -> Result<EntropyIndex> {
    let logs = load_logs_artifact(cfg, out)?;
    let index = build_entropy_index(&logs, &cfg.penalty.orders);
    let dump = index.to_dump();
    write_json(
        &out.entropy_index(),
        &EntropyIndexArtifact {
            version: dump.version,
            config_hash: cfg.hash(),
            n_items: dump.n_items,
            orders: dump.orders,
            counts: dump.counts,
        },
    )?;
    Ok(index)
}

pub fn load_entropy_index(cfg: &ExperimentConfig, out: &Workdir) -> Result<EntropyIndex> {
    let artifact: EntropyIndexArtifact =
        read_json(&out.entropy_index(), "build-entropy-index")?;
    warn_on_hash_mismatch(&cfg.hash(), &artifact.config_hash, &out.entropy_index());
    EntropyIndex::from_dump(&EntropyIndexDump {
        version: artifact.version,
        n_items: artifact.n_items,
        orders: artifact.orders,
        counts: artifact.counts,
    })
}

/// Trains one actor-critic against the given artifacts; shared by the
/// train-policy stage and the sweep.
pub fn train_policy_with(
    cfg: &ExperimentConfig,
    ensemble: &GPMEnsemble,
    index: &EntropyIndex,
    penalty: &PenaltyConfig,
    seed: u64,
) -> Result<ActorCritic> {
    let mut ac = ActorCritic::new(
        cfg.world.n_items,
        cfg.agent.emb_dim,
        cfg.agent.window,
        cfg.agent.to_hyper(seed),
    );
    train_policy(ensemble, index, penalty, &mut ac)?;
    Ok(ac)
}

/// train-policy: trains the baseline's policy on the simulated environment.
pub fn run_train_policy(
    cfg: &ExperimentConfig,
    out: &Workdir,
    baseline: Baseline,
) -> Result<ActorCritic> {
    if !baseline.trains_policy() {
        return Err(Error::Config(format!(
            "baseline {baseline} needs no policy training; run evaluate directly"
        )));
    }
    let ensemble = load_user_model(cfg, out, baseline.wants_ips_user_model())?;
    let index = load_entropy_index(cfg, out)?;
    let penalty = baseline.effective_penalty(&cfg.penalty);
    let seed = stage_seed(cfg.seed, stage::POLICY);
    let ac = train_policy_with(cfg, &ensemble, &index, &penalty, seed)?;
    write_json(
        &out.policy(baseline),
        &PolicyArtifact {
            version: POLICY_VERSION,
            config_hash: cfg.hash(),
            seed,
            baseline,
            penalty,
            actor_critic: ac.clone(),
        },
    )?;
    Ok(ac)
}

pub fn load_policy(
    cfg: &ExperimentConfig,
    out: &Workdir,
    baseline: Baseline,
) -> Result<ActorCritic> {
    let run_first = format!("train-policy --baseline {baseline}");
    let artifact: PolicyArtifact = read_json(&out.policy(baseline), &run_first)?;
    warn_on_hash_mismatch(&cfg.hash(), &artifact.config_hash, &out.policy(baseline));
    let ac = artifact.actor_critic;
    if ac.n_items() != cfg.world.n_items {
        return Err(Error::Dimension(format!(
            "policy covers {} items, config expects {}",
            ac.n_items(),
            cfg.world.n_items
        )));
    }
    Ok(ac)
}

/// evaluate: runs the baseline against the ground-truth environment.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    out: &Workdir,
    baseline: Baseline,
) -> Result<EvalSummary> {
    let world = load_world(cfg, out)?;
    let logs = load_logs_artifact(cfg, out)?;
    let dominated = dominated_categories(&logs, cfg.eval.coverage)?;
    let eval_seed = stage_seed(cfg.seed, stage::EVAL);

    let summary = match baseline {
        Baseline::Egreedy => {
            let ensemble = load_user_model(cfg, out, false)?;
            let mut agent = EpsilonGreedyAgent::new(&ensemble, cfg.eval.epsilon);
            evaluate(&world, &mut agent, &dominated, cfg.eval.n_episodes, eval_seed)?
        }
        Baseline::Ucb => {
            let mut agent = UcbAgent::new(world.n_items);
            evaluate(&world, &mut agent, &dominated, cfg.eval.n_episodes, eval_seed)?
        }
        _ => {
            let ac = load_policy(cfg, out, baseline)?;
            let mut agent = PolicyAgent::new(&ac, cfg.eval.mode);
            evaluate(&world, &mut agent, &dominated, cfg.eval.n_episodes, eval_seed)?
        }
    };

    let penalty = baseline.effective_penalty(&cfg.penalty);
    let row = SweepRow {
        params: vec![
            ("lambda1".to_string(), penalty.lambda1),
            ("lambda2".to_string(), penalty.lambda2),
        ],
        r_tra: summary.r_tra,
        r_each: summary.r_each,
        length: summary.length,
        mcd: summary.mcd,
    };
    std::fs::write(&out.results(baseline), rows_to_csv(&[row]))
        .map_err(|e| Error::io(out.results(baseline).display().to_string(), e))?;
    write_json(
        &out.results_meta(baseline),
        &ResultsMeta {
            version: RESULTS_META_VERSION,
            config_hash: cfg.hash(),
            seed: eval_seed,
            baseline: Some(baseline),
            n_episodes: cfg.eval.n_episodes,
        },
    )?;
    Ok(summary)
}

/// analyze-logs: dominated categories plus the Matthew-effect log metrics.
pub fn run_analyze_logs(cfg: &ExperimentConfig, out: &Workdir) -> Result<AnalysisArtifact> {
    let logs = load_logs_artifact(cfg, out)?;
    let dominated = dominated_categories(&logs, cfg.eval.coverage)?;
    let rates = repeat_rates(&logs);
    let mean_item = rates.iter().map(|r| r.item_level).sum::<f64>() / rates.len() as f64;
    let mean_cat = rates.iter().map(|r| r.category_level).sum::<f64>() / rates.len() as f64;
    let retention = day1_retention(&logs, &cfg.eval.retention_buckets).ok();
    let artifact = AnalysisArtifact {
        version: ANALYSIS_VERSION,
        config_hash: cfg.hash(),
        coverage: cfg.eval.coverage,
        dominated_categories: dominated.iter().copied().collect(),
        mean_item_repeat_rate: mean_item,
        mean_category_repeat_rate: mean_cat,
        day1_retention: retention,
    };
    write_json(&out.analysis(), &artifact)?;
    Ok(artifact)
}

/// One grid to sweep: either the penalty weights or the quit-rule window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    Lambda {
        lambda1: Vec<f64>,
        lambda2: Vec<f64>,
    },
    QuitWindow {
        n_values: Vec<u32>,
    },
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub params: Vec<(String, f64)>,
    pub r_tra: MeanStd,
    pub r_each: MeanStd,
    pub length: MeanStd,
    pub mcd: f64,
}

/// Renders rows as the pinned results CSV:
/// `param_*,r_tra_mean,r_tra_std,r_each_mean,r_each_std,length_mean,length_std,mcd`.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    let header: Vec<String> = rows[0]
        .params
        .iter()
        .map(|(name, _)| format!("param_{name}"))
        .chain(
            [
                "r_tra_mean",
                "r_tra_std",
                "r_each_mean",
                "r_each_std",
                "length_mean",
                "length_std",
                "mcd",
            ]
            .iter()
            .map(|s| s.to_string()),
        )
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let fields: Vec<String> = row
            .params
            .iter()
            .map(|(_, v)| format!("{v}"))
            .chain([
                format!("{}", row.r_tra.mean),
                format!("{}", row.r_tra.std),
                format!("{}", row.r_each.mean),
                format!("{}", row.r_each.std),
                format!("{}", row.length.mean),
                format!("{}", row.length.std),
                format!("{}", row.mcd),
            ])
            .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// sweep: one policy per grid point against shared artifacts. Lambda points
/// retrain the policy; quit-window points reuse one trained policy because
/// training never applies the quit rule, so every point would train the
/// identical policy anyway.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Workdir, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;

    let world = load_world(cfg, out)?;
    let logs = load_logs_artifact(cfg, out)?;
    let dominated = dominated_categories(&logs, cfg.eval.coverage)?;
    let ensemble = load_user_model(cfg, out, false)?;
    let index = load_entropy_index(cfg, out)?;
    let policy_seed = stage_seed(cfg.seed, stage::POLICY);
    let eval_seed = stage_seed(cfg.seed, stage::EVAL);

    let rows: Vec<Result<SweepRow>> = match grid {
        SweepGrid::Lambda { lambda1, lambda2 } => {
            if lambda1.is_empty() || lambda2.is_empty() {
                return Err(Error::Config("sweep grid must be non-empty".into()));
            }
            let points: Vec<(f64, f64)> = lambda1
                .iter()
                .flat_map(|&l1| lambda2.iter().map(move |&l2| (l1, l2)))
                .collect();
            points
                .par_iter()
                .map(|&(l1, l2)| {
                    let penalty = PenaltyConfig {
                        lambda1: l1,
                        lambda2: l2,
                        orders: cfg.penalty.orders.clone(),
                    };
                    let ac = train_policy_with(cfg, &ensemble, &index, &penalty, policy_seed)?;
                    let mut agent = PolicyAgent::new(&ac, cfg.eval.mode);
                    let summary = evaluate(
                        &world,
                        &mut agent,
                        &dominated,
                        cfg.eval.n_episodes,
                        eval_seed,
                    )?;
                    Ok(SweepRow {
                        params: vec![
                            ("lambda1".to_string(), l1),
                            ("lambda2".to_string(), l2),
                        ],
                        r_tra: summary.r_tra,
                        r_each: summary.r_each,
                        length: summary.length,
                        mcd: summary.mcd,
                    })
                })
                .collect()
        }
        SweepGrid::QuitWindow { n_values } => {
            if n_values.is_empty() {
                return Err(Error::Config("sweep grid must be non-empty".into()));
            }
            let ac = train_policy_with(cfg, &ensemble, &index, &cfg.penalty, policy_seed)?;
            n_values
                .par_iter()
                .map(|&n| {
                    let mut point_world = world.clone();
                    point_world.quit_rule.window_size = n;
                    let mut agent = PolicyAgent::new(&ac, cfg.eval.mode);
                    let summary = evaluate(
                        &point_world,
                        &mut agent,
                        &dominated,
                        cfg.eval.n_episodes,
                        eval_seed,
                    )?;
                    Ok(SweepRow {
                        params: vec![("quit_n".to_string(), n as f64)],
                        r_tra: summary.r_tra,
                        r_each: summary.r_each,
                        length: summary.length,
                        mcd: summary.mcd,
                    })
                })
                .collect()
        }
    };

    let rows: Vec<SweepRow> = rows.into_iter().collect::<Result<_>>()?;
    std::fs::write(out.sweep(), rows_to_csv(&rows))
        .map_err(|e| Error::io(out.sweep().display().to_string(), e))?;
    write_json(
        &out.sweep_meta(),
        &ResultsMeta {
            version: RESULTS_META_VERSION,
            config_hash: cfg.hash(),
            seed: eval_seed,
            baseline: None,
            n_episodes: cfg.eval.n_episodes,
        },
    )?;
    Ok(rows)
}

/// Averages rows over the named parameter, grouping by the remaining ones
/// (the paper-style "average the results along lambda1" view). Standard
/// deviations are averaged too, as a dispersion summary.
pub fn marginalize(rows: &[SweepRow], over: &str) -> Vec<SweepRow> {
    let mut groups: BTreeMap<String, (Vec<(String, f64)>, Vec<&SweepRow>)> = BTreeMap::new();
    for row in rows {
        let kept: Vec<(String, f64)> = row
            .params
            .iter()
            .filter(|(name, _)| name != over)
            .cloned()
            .collect();
        let key = kept
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(",");
        groups.entry(key).or_insert_with(|| (kept, Vec::new())).1.push(row);
    }
    groups
        .into_values()
        .map(|(params, members)| {
            let n = members.len() as f64;
            let avg = |f: &dyn Fn(&SweepRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
            SweepRow {
                params,
                r_tra: MeanStd {
                    mean: avg(&|r| r.r_tra.mean),
                    std: avg(&|r| r.r_tra.std),
                },
                r_each: MeanStd {
                    mean: avg(&|r| r.r_each.mean),
                    std: avg(&|r| r.r_each.std),
                },
                length: MeanStd {
                    mean: avg(&|r| r.length.mean),
                    std: avg(&|r| r.length.std),
                },
                mcd: avg(&|r| r.mcd),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BehaviorKind;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 17,
            world: WorldGenConfig {
                n_users: 6,
                n_items: 20,
                n_categories: 4,
                latent_dim: 2,
                noise_scale: 0.05,
                zero_latent: false,
                quit_rule: QuitRule::new(4, 0),
                max_rounds: 10,
            },
            behavior: BehaviorPolicyConfig {
                kind: BehaviorKind::PopularitySoftmax,
                temperature: 0.3,
                popularity_center: 3.0,
                popularity_width: 3.0,
            },
            events_per_user: 60,
            user_model: TrainConfig {
                d: 3,
                k: 2,
                learning_rate: 0.01,
                l2_reg: 1e-4,
                epochs: 10,
                batch_size: 32,
                ips: false,
                ips_clip: (0.2, 5.0),
                seed: 0,
            },
            penalty: PenaltyConfig {
                lambda1: 0.1,
                lambda2: 1.0,
                orders: vec![1],
            },
            agent: PolicySection {
                window: 4,
                emb_dim: 4,
                lr_actor: 0.01,
                lr_critic: 0.01,
                gamma: 0.9,
                entropy_coef: 0.01,
                rollout_len: 5,
                episodes_per_epoch: 5,
                epochs: 4,
            },
            eval: EvalSection {
                n_episodes: 8,
                mode: ActMode::Greedy,
                epsilon: 0.1,
                coverage: 0.8,
                retention_buckets: vec![5, 20],
            },
        }
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = tiny_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["unknown_knob"] = serde_json::json!(1);
        let err = serde_json::from_value::<ExperimentConfig>(value).unwrap_err();
        assert!(err.to_string().contains("unknown_knob"));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = tiny_config();
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = tiny_config();
        other.seed += 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn baseline_parsing_and_specialization() {
        for b in Baseline::ALL {
            assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
        }
        assert!("nope".parse::<Baseline>().is_err());

        let base = PenaltyConfig {
            lambda1: 0.3,
            lambda2: 0.7,
            orders: vec![1, 2],
        };
        let mopo = Baseline::Mopo.effective_penalty(&base);
        assert_eq!((mopo.lambda1, mopo.lambda2), (0.3, 0.0));
        let mbpo = Baseline::Mbpo.effective_penalty(&base);
        assert_eq!((mbpo.lambda1, mbpo.lambda2), (0.0, 0.0));
        let ips = Baseline::Ips.effective_penalty(&base);
        assert_eq!((ips.lambda1, ips.lambda2), (0.0, 0.0));
        assert!(Baseline::Ips.wants_ips_user_model());
        assert!(!Baseline::Mbpo.wants_ips_user_model());
        let dorl = Baseline::Dorl.effective_penalty(&base);
        assert_eq!(dorl, base);
    }

    #[test]
    fn pipeline_end_to_end_and_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = Workdir::new(dir.path());
        let cfg = tiny_config();

        // Missing upstream artifacts name the producing subcommand.
        let err = run_gen_logs(&cfg, &out).unwrap_err();
        assert!(err.to_string().contains("gen-world"), "{err}");
        let err = run_evaluate(&cfg, &out, Baseline::Dorl).unwrap_err();
        assert!(err.to_string().contains("gen-world"), "{err}");

        run_gen_world(&cfg, &out).unwrap();
        let err = run_train_user_model(&cfg, &out, false).unwrap_err();
        assert!(err.to_string().contains("gen-logs"), "{err}");

        run_gen_logs(&cfg, &out).unwrap();
        run_train_user_model(&cfg, &out, false).unwrap();
        run_build_entropy_index(&cfg, &out).unwrap();

        let err = run_evaluate(&cfg, &out, Baseline::Dorl).unwrap_err();
        assert!(err.to_string().contains("train-policy"), "{err}");

        run_train_policy(&cfg, &out, Baseline::Dorl).unwrap();
        let summary = run_evaluate(&cfg, &out, Baseline::Dorl).unwrap();
        assert_eq!(summary.n_episodes, cfg.eval.n_episodes);

        // Bandit baselines evaluate without a policy artifact.
        run_evaluate(&cfg, &out, Baseline::Ucb).unwrap();
        run_evaluate(&cfg, &out, Baseline::Egreedy).unwrap();

        // The analysis stage runs off the logs alone.
        let analysis = run_analyze_logs(&cfg, &out).unwrap();
        assert!(!analysis.dominated_categories.is_empty());

        assert!(out.results(Baseline::Dorl).exists());
        assert!(out.results_meta(Baseline::Dorl).exists());
    }

    #[test]
    fn deterministic_results_csv() {
        let cfg = tiny_config();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let out = Workdir::new(dir.path());
            run_gen_world(&cfg, &out).unwrap();
            run_gen_logs(&cfg, &out).unwrap();
            run_train_user_model(&cfg, &out, false).unwrap();
            run_build_entropy_index(&cfg, &out).unwrap();
            run_train_policy(&cfg, &out, Baseline::Mopo).unwrap();
            run_evaluate(&cfg, &out, Baseline::Mopo).unwrap();
            std::fs::read(out.results(Baseline::Mopo)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn baselines_are_exact_specializations() {
        let dir = tempfile::tempdir().unwrap();
        let out = Workdir::new(dir.path());
        let mut cfg = tiny_config();
        cfg.penalty.lambda1 = 0.0;
        cfg.penalty.lambda2 = 0.0;
        run_gen_world(&cfg, &out).unwrap();
        run_gen_logs(&cfg, &out).unwrap();
        run_train_user_model(&cfg, &out, false).unwrap();
        run_build_entropy_index(&cfg, &out).unwrap();

        // With both weights zero, DORL and MBPO train bitwise-equal policies
        // under the same seed.
        let dorl = run_train_policy(&cfg, &out, Baseline::Dorl).unwrap();
        let mbpo = run_train_policy(&cfg, &out, Baseline::Mbpo).unwrap();
        let mopo = run_train_policy(&cfg, &out, Baseline::Mopo).unwrap();
        assert_eq!(dorl, mbpo);
        assert_eq!(dorl, mopo);
    }

    #[test]
    fn sweep_rows_and_marginalization() {
        let dir = tempfile::tempdir().unwrap();
        let out = Workdir::new(dir.path());
        let cfg = tiny_config();
        run_gen_world(&cfg, &out).unwrap();
        run_gen_logs(&cfg, &out).unwrap();
        run_train_user_model(&cfg, &out, false).unwrap();
        run_build_entropy_index(&cfg, &out).unwrap();

        let rows = run_sweep(
            &cfg,
            &out,
            &SweepGrid::Lambda {
                lambda1: vec![0.0, 0.1],
                lambda2: vec![0.0, 0.5, 1.0],
            },
        )
        .unwrap();
        assert_eq!(rows.len(), 6);
        let marginal = marginalize(&rows, "lambda1");
        assert_eq!(marginal.len(), 3);

        let single = run_sweep(
            &cfg,
            &out,
            &SweepGrid::QuitWindow { n_values: vec![4] },
        )
        .unwrap();
        assert_eq!(single.len(), 1);

        let csv = rows_to_csv(&rows);
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "param_lambda1,param_lambda2,r_tra_mean,r_tra_std,r_each_mean,r_each_std,length_mean,length_std,mcd"
        );
        assert_eq!(csv.lines().count(), 7);
    }
}

//! Experiment orchestration: a versioned TOML config drives simulation,
//! per-environment expert training, VAE and flow-matching training, zero-shot
//! evaluation, ablations, robustness sweeps and latent-path export. Every
//! stage writes content-hashed artifacts so stale inputs are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;

use crate::cfm::{
    generate_latent, init_cfm, train_cfm_snapshots, CfmConfig, LatentCorpus, LatentStats,
};
use crate::container::Checkpoint;
use crate::dataset::{load_dataset, simulate_dataset, Dataset};
use crate::dynamics::{CoeffGrid, DatasetSpec, DynamicsKind, Environment, Split};
use crate::error::{Error, Result};
use crate::forecaster::{
    eval_window_starts, evaluate_rmse, init_forecaster, train_expert, ForecasterConfig,
};
use crate::graph::{generate_ba, generate_regular, load_edge_list, Graph};
use crate::nn::layers::ParamStore;
use crate::nn::Tensor;
use crate::tokenizer::{derive_schema, TokenKind, TokenLayer, WeightSchema};
use crate::util::{format_f64, randn, seeded_rng, sha256_file, sha256_hex};
use crate::vae::{decode_latent, encode_payload, init_vae, train_vae, TokenStats, VaeConfig};

pub const CONFIG_VERSION: u32 = 1;

// ---- experiment configuration ----

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// "ba", "regular" or "file".
    pub kind: String,
    pub nodes: usize,
    /// Attachment count for BA graphs.
    pub m: usize,
    /// Degree for regular graphs.
    pub k: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { kind: "ba".into(), nodes: 60, m: 2, k: 4, seed: 1, path: None }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoeffSection {
    pub name: String,
    /// A single shared value (no grid).
    pub fixed: Option<f64>,
    pub train: Option<(f64, f64)>,
    pub train_count: usize,
    pub ood: Option<(f64, f64)>,
    pub ood_count: usize,
}

impl Default for CoeffSection {
    fn default() -> Self {
        CoeffSection { name: String::new(), fixed: None, train: None, train_count: 1, ood: None, ood_count: 0 }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub name: String,
    /// "sis" or "hill".
    pub kind: String,
    pub graph: GraphSection,
    pub steps: usize,
    pub dt: f64,
    pub x0_range: Option<(f64, f64)>,
    pub hill_damping: f64,
    pub train_time_frac: f64,
    pub split_fractions: (f64, f64, f64),
    pub coeff: Vec<CoeffSection>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        // epidemic analog of the collaboration setting: fixed infection rate,
        // a recovery-rate grid with a disjoint extrapolation band
        DatasetSection {
            name: "collab-analog".into(),
            kind: "sis".into(),
            graph: GraphSection::default(),
            steps: 400,
            dt: 0.01,
            x0_range: None,
            hill_damping: 1.0,
            train_time_frac: 0.7,
            split_fractions: (0.7, 0.15, 0.15),
            coeff: vec![
                CoeffSection { name: "beta".into(), fixed: Some(0.02), ..Default::default() },
                CoeffSection {
                    name: "gamma".into(),
                    train: Some((0.2, 0.4264)),
                    train_count: 28,
                    ood: Some((0.4728, 0.9302)),
                    ood_count: 12,
                    ..Default::default()
                },
            ],
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Token width for the flat-tokenizer ablation.
    pub flat_token_dim: usize,
    /// Fractions of the CFM epoch budget checkpointed as validation
    /// candidates; the one with the lowest generated RMSE on the val split
    /// wins, ties broken by the earlier epoch.
    pub cfm_val_fracs: Vec<f64>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection { flat_token_dim: 16, cfm_val_fracs: vec![0.5, 0.75, 1.0] }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub out_dir: PathBuf,
    /// Base seed for simulation and all training stages.
    pub seed: u64,
    /// Evaluation seeds; each produces an independent generation run.
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub forecaster: ForecasterConfig,
    pub vae: VaeConfig,
    pub cfm: CfmConfig,
    pub pipeline: PipelineSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            name: "fnfm".into(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            dataset: DatasetSection::default(),
            forecaster: ForecasterConfig::default(),
            vae: VaeConfig::default(),
            cfm: CfmConfig::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.pipeline.flat_token_dim == 0 {
            return Err(Error::Config("flat_token_dim must be positive".into()));
        }
        if self.pipeline.cfm_val_fracs.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("cfm_val_fracs must lie in (0, 1]".into()));
        }
        self.forecaster.validate()?;
        self.vae.validate()?;
        self.cfm.validate()?;
        self.to_dataset_spec()?;
        Ok(())
    }

    pub fn build_graph(&self) -> Result<Graph> {
        let g = &self.dataset.graph;
        match g.kind.as_str() {
            "ba" => generate_ba(g.nodes, g.m, g.seed),
            "regular" => generate_regular(g.nodes, g.k, g.seed),
            "file" => {
                let path = g
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("graph kind 'file' needs a path".into()))?;
                if !path.exists() {
                    return Err(Error::Config(format!("graph file {} not found", path.display())));
                }
                load_edge_list(path)
            }
            other => Err(Error::Config(format!("unknown graph kind '{other}'"))),
        }
    }

    pub fn to_dataset_spec(&self) -> Result<DatasetSpec> {
        let d = &self.dataset;
        let kind = DynamicsKind::parse(&d.kind)?;
        let graph = self.build_graph()?;
        let mut coeffs = Vec::new();
        for c in &d.coeff {
            if c.name.is_empty() {
                return Err(Error::Config("coefficient entry missing a name".into()));
            }
            match (c.fixed, c.train) {
                (Some(v), None) => coeffs.push(CoeffGrid::fixed(&c.name, v)),
                (None, Some(train)) => {
                    coeffs.push(CoeffGrid::ranges(&c.name, train, c.train_count, c.ood, c.ood_count)?)
                }
                _ => {
                    return Err(Error::Config(format!(
                        "coefficient {}: set exactly one of `fixed` or `train`",
                        c.name
                    )))
                }
            }
        }
        let spec = DatasetSpec {
            name: d.name.clone(),
            graph,
            kind,
            coeffs,
            steps: d.steps,
            dt: d.dt,
            x0_range: d.x0_range.unwrap_or_else(|| DatasetSpec::default_x0_range(kind)),
            hill_damping: d.hill_damping,
            train_time_frac: d.train_time_frac,
            split_fractions: d.split_fractions,
        };
        spec.validate()?;
        Ok(spec)
    }

    // artifact layout under out_dir
    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }
    pub fn experts_dir(&self) -> PathBuf {
        self.out_dir.join("experts")
    }
    pub fn expert_path(&self, env_id: &str) -> PathBuf {
        self.experts_dir().join(format!("{env_id}.ckpt"))
    }
    pub fn vae_path(&self) -> PathBuf {
        self.out_dir.join("vae.ckpt")
    }
    pub fn cfm_path(&self) -> PathBuf {
        self.out_dir.join("cfm.ckpt")
    }
    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }
}

// ---- metrics table ----

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    /// "in_domain" or "out_domain".
    pub split: String,
    pub env_id: String,
    pub seed: u64,
    pub rmse: f64,
}

pub fn split_label(split: Split) -> Result<&'static str> {
    match split {
        Split::TestIn => Ok("in_domain"),
        Split::TestOut => Ok("out_domain"),
        other => Err(Error::Config(format!(
            "metrics only cover test splits, got {}",
            other.as_str()
        ))),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if !(row.rmse.is_finite() && row.rmse >= 0.0) {
            return Err(Error::Numeric(format!(
                "rmse {} for {}/{}/{}",
                row.rmse, row.method, row.env_id, row.seed
            )));
        }
        if row.split != "in_domain" && row.split != "out_domain" {
            return Err(Error::Config(format!("bad split label '{}'", row.split)));
        }
        if self.rows.iter().any(|r| {
            r.method == row.method && r.split == row.split && r.env_id == row.env_id && r.seed == row.seed
        }) {
            return Err(Error::Config(format!(
                "duplicate metrics row ({}, {}, {}, {})",
                row.method, row.split, row.env_id, row.seed
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,split,env_id,seed,rmse\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method,
                r.split,
                r.env_id,
                r.seed,
                format_f64(r.rmse)
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut table = MetricsTable::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Parse { line: i + 1, msg: format!("expected 5 fields, got {}", parts.len()) });
            }
            table.push(MetricsRow {
                method: parts[0].into(),
                split: parts[1].into(),
                env_id: parts[2].into(),
                seed: parts[3].parse().map_err(|e| Error::Parse { line: i + 1, msg: format!("{e}") })?,
                rmse: parts[4].parse().map_err(|e| Error::Parse { line: i + 1, msg: format!("{e}") })?,
            })?;
        }
        Ok(table)
    }

    /// (mean, population std) over rows matching method and split.
    pub fn mean_std(&self, method: &str, split: &str) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.split == split)
            .map(|r| r.rmse)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---- provenance ----

fn dataset_hash(cfg: &ExperimentConfig) -> Result<String> {
    sha256_file(&cfg.dataset_dir().join("manifest"))
}

/// Combined hash of all expert checkpoints, sorted by file name.
fn experts_hash(cfg: &ExperimentConfig) -> Result<String> {
    let dir = cfg.experts_dir();
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|r| r.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Artifact(format!("no expert checkpoints in {}", dir.display())));
    }
    let mut acc = String::new();
    for n in &names {
        acc.push_str(&format!("{n}:{}\n", sha256_file(&dir.join(n))?));
    }
    Ok(sha256_hex(acc.as_bytes()))
}

// ---- simulate ----

pub fn cmd_simulate(cfg: &ExperimentConfig, force: bool) -> Result<Dataset> {
    let spec = cfg.to_dataset_spec()?;
    simulate_dataset(&spec, cfg.seed, &cfg.dataset_dir(), force)
}

// ---- expert training ----

#[derive(Debug, Clone)]
pub struct ExpertSummaryRow {
    pub env_id: String,
    pub train_windows: usize,
    pub first_epoch_loss: f64,
    pub best_epoch_loss: f64,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone)]
pub struct ExpertTrainOutcome {
    pub rows: Vec<ExpertSummaryRow>,
    pub failures: Vec<(String, String)>,
}

/// The weight-init seed shared by every expert so their weights vary smoothly
/// with the dynamics coefficients.
pub fn expert_init_seed(cfg: &ExperimentConfig) -> u64 {
    seeded_rng(cfg.seed, "expert-init").next_u64()
}

/// A forecaster parameter store with the canonical layer layout; payloads
/// from checkpoints or generation are loaded into a fresh template.
pub fn forecaster_template(fcfg: &ForecasterConfig) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(0, "forecaster-template");
    init_forecaster(&mut store, fcfg, &mut rng)?;
    Ok(store)
}

pub fn cmd_train_experts(
    cfg: &ExperimentConfig,
    parallelism: usize,
    allow_failures: bool,
) -> Result<ExpertTrainOutcome> {
    let ds = load_dataset(&cfg.dataset_dir())?;
    let ds_hash = dataset_hash(cfg)?;
    let init_seed = expert_init_seed(cfg);
    let train_envs: Vec<Environment> =
        ds.envs_in_split(Split::Train).into_iter().cloned().collect();
    if train_envs.is_empty() {
        return Err(Error::Config("dataset has no train environments".into()));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    // per-environment work is seeded independently, so results are identical
    // for any parallelism level
    let results: Vec<(String, Result<(ParamStore, usize, f64, f64)>)> = pool.install(|| {
        train_envs
            .par_iter()
            .map(|env| {
                let out = ds.load_trajectory(&env.id).and_then(|traj| {
                    let (store, rep) = train_expert(
                        &cfg.forecaster,
                        &ds.graph,
                        &traj,
                        ds.train_time_frac,
                        init_seed,
                        cfg.seed,
                    )?;
                    Ok((store, rep.train_windows, rep.first_epoch_loss, rep.best_epoch_loss))
                });
                (env.id.clone(), out)
            })
            .collect()
    });

    fs::create_dir_all(cfg.experts_dir()).map_err(|e| Error::io(cfg.experts_dir(), e))?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut sorted = results;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (env_id, out) in sorted {
        match out {
            Ok((store, windows, first, best)) => {
                let env = ds.env(&env_id)?;
                let mut ckpt = Checkpoint::from_store("forecaster", &store);
                ckpt.set_meta("env_id", &env_id);
                ckpt.set_meta("dataset_hash", &ds_hash);
                ckpt.set_meta("init_seed", init_seed.to_string());
                let coeffs: Vec<String> =
                    env.coeff_vector().iter().map(|v| format_f64(*v)).collect();
                ckpt.set_meta("coeffs", coeffs.join(";"));
                let path = cfg.expert_path(&env_id);
                ckpt.save(&path)?;
                rows.push(ExpertSummaryRow {
                    env_id,
                    train_windows: windows,
                    first_epoch_loss: first,
                    best_epoch_loss: best,
                    checkpoint_hash: sha256_file(&path)?,
                });
            }
            Err(e) => failures.push((env_id, e.to_string())),
        }
    }

    let mut csv = String::from("env_id,train_windows,first_epoch_loss,best_epoch_loss,sha256\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.env_id,
            r.train_windows,
            format_f64(r.first_epoch_loss),
            format_f64(r.best_epoch_loss),
            r.checkpoint_hash
        ));
    }
    write_text(&cfg.experts_dir().join("summary.csv"), &csv)?;

    if !failures.is_empty() && !allow_failures {
        let msgs: Vec<String> =
            failures.iter().map(|(id, m)| format!("{id}: {m}")).collect();
        return Err(Error::Numeric(format!(
            "{} expert(s) diverged: {}",
            failures.len(),
            msgs.join("; ")
        )));
    }
    Ok(ExpertTrainOutcome { rows, failures })
}

/// Load the flat payloads of all persisted experts, sorted by environment id,
/// verifying each was trained against the current dataset.
fn load_expert_payloads(cfg: &ExperimentConfig, ds_hash: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let dir = cfg.experts_dir();
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|r| r.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    names.sort();
    let template = forecaster_template(&cfg.forecaster)?;
    let mut out = Vec::new();
    for n in &names {
        let ckpt = Checkpoint::load_kind(&dir.join(n), "forecaster")?;
        if ckpt.meta("dataset_hash")? != ds_hash {
            return Err(Error::Artifact(format!(
                "expert {n} was trained on a different dataset (stale artifact)"
            )));
        }
        let mut store = template.clone();
        ckpt.into_store(&mut store)?;
        out.push((ckpt.meta("env_id")?.to_string(), store.flat_payload()));
    }
    if out.len() < 2 {
        return Err(Error::Artifact(format!(
            "need at least 2 expert checkpoints in {}, found {}",
            dir.display(),
            out.len()
        )));
    }
    Ok(out)
}

// ---- generative stack (VAE + CFM) ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionMode {
    /// Condition on the environment's coefficient vector.
    Coefficients,
    /// Ablation: a constant vector, making generation coefficient-blind.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerMode {
    /// Per-output-unit tokens derived from the forecaster layer structure.
    Structured,
    /// Ablation: flatten all weights into fixed-width chunks.
    Flat(usize),
}

/// A trained VAE + CFM pair ready to generate forecaster weights.
#[derive(Debug)]
pub struct Generative {
    pub fcfg: ForecasterConfig,
    pub schema: WeightSchema,
    pub vae_cfg: VaeConfig,
    pub vae_store: ParamStore,
    pub token_stats: TokenStats,
    pub cfm_cfg: CfmConfig,
    pub cfm_store: ParamStore,
    pub latent_stats: LatentStats,
    /// Per-coefficient (min, max) over the dataset, in name order.
    pub ranges: Vec<(f64, f64)>,
    pub condition_mode: ConditionMode,
    /// Original (unpadded) payload length under the flat-tokenizer ablation.
    pub flat_orig_len: Option<usize>,
}

impl Generative {
    fn condition(&self, e: &[f64]) -> Vec<f64> {
        match self.condition_mode {
            ConditionMode::Coefficients => e.to_vec(),
            // midpoint of every range normalizes to the same constant
            ConditionMode::Constant => {
                self.ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
            }
        }
    }

    /// Generate forecaster weights for an unseen coefficient vector; returns
    /// the flat payload and the latent flow path (prior to endpoint).
    pub fn generate_payload(&self, e_new: &[f64], seed: u64) -> Result<(Vec<f64>, Vec<Tensor>)> {
        let e = self.condition(e_new);
        let (z, path) = generate_latent(
            &self.cfm_cfg,
            &self.cfm_store,
            &self.latent_stats,
            &self.ranges,
            &e,
            seed,
        )?;
        let mut payload =
            decode_latent(&self.vae_cfg, &self.schema, &self.vae_store, &self.token_stats, &z)?;
        if let Some(orig) = self.flat_orig_len {
            payload.truncate(orig);
        }
        Ok((payload, path))
    }

    /// Generated weights packaged as a checkpoint tagged with the condition.
    pub fn generate_checkpoint(&self, e_new: &[f64], seed: u64) -> Result<Checkpoint> {
        let (payload, _) = self.generate_payload(e_new, seed)?;
        let mut store = forecaster_template(&self.fcfg)?;
        store.load_flat_payload(&payload)?;
        let mut ckpt = Checkpoint::from_store("forecaster", &store);
        let e_txt: Vec<String> = e_new.iter().map(|v| format_f64(*v)).collect();
        ckpt.set_meta("generated_for", e_txt.join(";"));
        ckpt.set_meta("generation_seed", seed.to_string());
        Ok(ckpt)
    }

    /// Raw-scale RMSE of a generated forecaster on one environment's
    /// held-out windows.
    pub fn generated_rmse(
        &self,
        ds: &Dataset,
        env: &Environment,
        e_used: &[f64],
        seed: u64,
    ) -> Result<f64> {
        let (payload, _) = self.generate_payload(e_used, seed)?;
        let mut store = forecaster_template(&self.fcfg)?;
        store.load_flat_payload(&payload)?;
        let traj = ds.load_trajectory(&env.id)?;
        let starts = eval_window_starts(&self.fcfg, &traj, ds.train_time_frac);
        if starts.is_empty() {
            return Err(Error::Config(format!(
                "environment {} has no evaluation windows",
                env.id
            )));
        }
        evaluate_rmse(&self.fcfg, &store, &ds.graph, &traj, &starts)
    }
}

/// Pad-and-flatten schema for the tokenizer ablation: one matrix layer of
/// fixed-width chunks covering the padded payload.
fn flat_schema(orig_len: usize, dim: usize) -> WeightSchema {
    let tokens = orig_len.div_ceil(dim);
    WeightSchema {
        layers: vec![TokenLayer {
            name: "flat".into(),
            kind: TokenKind::Matrix,
            tokens,
            token_dim: dim,
            payload_offset: 0,
        }],
        total_values: tokens * dim,
    }
}

fn coeff_range_vec(ds: &Dataset) -> Vec<(f64, f64)> {
    ds.coeff_ranges().values().cloned().collect()
}

/// Candidate CFM epochs derived from the configured fractions.
fn cfm_candidates(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut out: Vec<usize> = cfg
        .pipeline
        .cfm_val_fracs
        .iter()
        .map(|f| ((f * cfg.cfm.epochs as f64).round() as usize).clamp(1, cfg.cfm.epochs))
        .collect();
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        out.push(cfg.cfm.epochs);
    }
    out
}

fn generation_seed(seed: u64, env_id: &str) -> u64 {
    seeded_rng(seed, &format!("generate/{env_id}")).next_u64()
}

/// Pick the CFM snapshot with the lowest mean generated RMSE on the val
/// split (ties -> earlier epoch). Falls back to the last snapshot when the
/// dataset has no val environments.
fn select_cfm_snapshot(
    ds: &Dataset,
    gen: &mut Generative,
    snapshots: &[(usize, Vec<f64>)],
    seed: u64,
) -> Result<usize> {
    let val_envs: Vec<Environment> = ds.envs_in_split(Split::Val).into_iter().cloned().collect();
    if snapshots.len() <= 1 || val_envs.is_empty() {
        let (epoch, payload) = snapshots.last().ok_or_else(|| {
            Error::Config("no CFM snapshots captured".into())
        })?;
        gen.cfm_store.load_flat_payload(payload)?;
        return Ok(*epoch);
    }
    let mut best: Option<(f64, usize, &Vec<f64>)> = None;
    for (epoch, payload) in snapshots {
        gen.cfm_store.load_flat_payload(payload)?;
        let mut total = 0.0;
        for env in &val_envs {
            let e = env.coeff_vector();
            total += gen.generated_rmse(ds, env, &e, generation_seed(seed, &env.id))?;
        }
        let mean = total / val_envs.len() as f64;
        // strict < keeps the earlier epoch on ties
        if best.map_or(true, |(b, _, _)| mean < b) {
            best = Some((mean, *epoch, payload));
        }
    }
    let (_, epoch, payload) = best.unwrap();
    gen.cfm_store.load_flat_payload(payload)?;
    Ok(epoch)
}

/// Train the VAE and CFM in memory on the given expert payloads; used by the
/// ablations and robustness sweeps. The persisted-checkpoint path through
/// `cmd_train_vae`/`cmd_train_cfm` produces the same parameters for the same
/// inputs and seed.
pub fn fit_generative(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    experts: &[(String, Vec<f64>)],
    tokenizer: TokenizerMode,
    condition: ConditionMode,
    seed: u64,
) -> Result<Generative> {
    let template = forecaster_template(&cfg.forecaster)?;
    let (schema, flat_orig_len, payloads): (WeightSchema, Option<usize>, Vec<Vec<f64>>) =
        match tokenizer {
            TokenizerMode::Structured => (
                derive_schema(&template)?,
                None,
                experts.iter().map(|(_, p)| p.clone()).collect(),
            ),
            TokenizerMode::Flat(dim) => {
                let orig = template.total_values();
                let schema = flat_schema(orig, dim);
                let padded = experts
                    .iter()
                    .map(|(_, p)| {
                        let mut v = p.clone();
                        v.resize(schema.total_values, 0.0);
                        v
                    })
                    .collect();
                (schema, Some(orig), padded)
            }
        };

    let (vae_store, token_stats, _) = train_vae(&cfg.vae, &schema, &payloads, seed)?;

    let ranges = coeff_range_vec(ds);
    let mut cfm_cfg = cfg.cfm.clone();
    cfm_cfg.condition_dim = ranges.len();

    let mut corpus: LatentCorpus = Vec::new();
    for ((env_id, _), payload) in experts.iter().zip(&payloads) {
        let env = ds.env(env_id)?;
        let z = encode_payload(&cfg.vae, &schema, &vae_store, &token_stats, payload)?;
        let e = match condition {
            ConditionMode::Coefficients => env.coeff_vector(),
            ConditionMode::Constant => ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
        };
        corpus.push((z, e));
    }

    let candidates = cfm_candidates(cfg);
    let (snapshots, cfm_store, latent_stats, _) =
        train_cfm_snapshots(&cfm_cfg, &corpus, &ranges, seed, &candidates)?;

    let mut gen = Generative {
        fcfg: cfg.forecaster.clone(),
        schema,
        vae_cfg: cfg.vae.clone(),
        vae_store,
        token_stats,
        cfm_cfg,
        cfm_store,
        latent_stats,
        ranges,
        condition_mode: condition,
        flat_orig_len,
    };
    select_cfm_snapshot(ds, &mut gen, &snapshots, seed)?;
    Ok(gen)
}

// ---- persisted VAE / CFM training ----

pub fn cmd_train_vae(cfg: &ExperimentConfig) -> Result<()> {
    let ds_hash = dataset_hash(cfg)?;
    let experts = load_expert_payloads(cfg, &ds_hash)?;
    let e_hash = experts_hash(cfg)?;
    let template = forecaster_template(&cfg.forecaster)?;
    let schema = derive_schema(&template)?;
    let payloads: Vec<Vec<f64>> = experts.iter().map(|(_, p)| p.clone()).collect();
    let (store, stats, report) = train_vae(&cfg.vae, &schema, &payloads, cfg.seed)?;

    let mut ckpt = Checkpoint::from_store("vae", &store);
    ckpt.set_meta("experts_hash", &e_hash);
    ckpt.set_meta("dataset_hash", &ds_hash);
    ckpt.set_meta("token_stats", stats.to_metadata());
    ckpt.set_meta("d_model", cfg.vae.d_model.to_string());
    ckpt.set_meta("d_z", cfg.vae.d_z.to_string());
    ckpt.set_meta("layers", cfg.vae.layers.to_string());
    ckpt.set_meta("heads", cfg.vae.heads.to_string());
    ckpt.set_meta("beta", format_f64(cfg.vae.beta));
    ckpt.set_meta("seed", cfg.seed.to_string());
    ckpt.set_meta("final_loss", format_f64(report.last_epoch_loss));
    ckpt.save(&cfg.vae_path())
}

/// Reconstruct the persisted VAE, checking configuration and provenance.
fn load_vae(
    cfg: &ExperimentConfig,
    schema: &WeightSchema,
) -> Result<(ParamStore, TokenStats, Checkpoint)> {
    let ckpt = Checkpoint::load_kind(&cfg.vae_path(), "vae")?;
    for (key, expect) in [
        ("d_model", cfg.vae.d_model),
        ("d_z", cfg.vae.d_z),
        ("layers", cfg.vae.layers),
        ("heads", cfg.vae.heads),
    ] {
        if ckpt.meta(key)? != expect.to_string() {
            return Err(Error::Artifact(format!(
                "VAE checkpoint {key} = {} does not match configured {expect}",
                ckpt.meta(key)?
            )));
        }
    }
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(0, "vae-template");
    init_vae(&mut store, &cfg.vae, schema, &mut rng)?;
    ckpt.into_store(&mut store)?;
    let stats = TokenStats::from_metadata(ckpt.meta("token_stats")?)?;
    Ok((store, stats, ckpt))
}

pub fn cmd_train_cfm(cfg: &ExperimentConfig) -> Result<()> {
    let ds = load_dataset(&cfg.dataset_dir())?;
    let ds_hash = dataset_hash(cfg)?;
    let e_hash = experts_hash(cfg)?;
    let template = forecaster_template(&cfg.forecaster)?;
    let schema = derive_schema(&template)?;
    let (vae_store, token_stats, vae_ckpt) = load_vae(cfg, &schema)?;
    if vae_ckpt.meta("experts_hash")? != e_hash {
        return Err(Error::Artifact(
            "expert checkpoints changed since the VAE was trained (stale artifact)".into(),
        ));
    }
    if vae_ckpt.meta("dataset_hash")? != ds_hash {
        return Err(Error::Artifact(
            "dataset changed since the VAE was trained (stale artifact)".into(),
        ));
    }
    let experts = load_expert_payloads(cfg, &ds_hash)?;

    let ranges = coeff_range_vec(&ds);
    let mut cfm_cfg = cfg.cfm.clone();
    cfm_cfg.condition_dim = ranges.len();
    let mut corpus: LatentCorpus = Vec::new();
    for (env_id, payload) in &experts {
        let env = ds.env(env_id)?;
        let z = encode_payload(&cfg.vae, &schema, &vae_store, &token_stats, payload)?;
        corpus.push((z, env.coeff_vector()));
    }

    let candidates = cfm_candidates(cfg);
    let (snapshots, cfm_store, latent_stats, report) =
        train_cfm_snapshots(&cfm_cfg, &corpus, &ranges, cfg.seed, &candidates)?;
    let mut gen = Generative {
        fcfg: cfg.forecaster.clone(),
        schema,
        vae_cfg: cfg.vae.clone(),
        vae_store,
        token_stats,
        cfm_cfg: cfm_cfg.clone(),
        cfm_store,
        latent_stats,
        ranges: ranges.clone(),
        condition_mode: ConditionMode::Coefficients,
        flat_orig_len: None,
    };
    let selected = select_cfm_snapshot(&ds, &mut gen, &snapshots, cfg.seed)?;

    let mut ckpt = Checkpoint::from_store("cfm", &gen.cfm_store);
    ckpt.set_meta("vae_hash", sha256_file(&cfg.vae_path())?);
    ckpt.set_meta("experts_hash", &e_hash);
    ckpt.set_meta("dataset_hash", &ds_hash);
    ckpt.set_meta("latent_stats", gen.latent_stats.to_metadata());
    ckpt.set_meta("condition_dim", cfm_cfg.condition_dim.to_string());
    ckpt.set_meta("d_model", cfm_cfg.d_model.to_string());
    ckpt.set_meta("layers", cfm_cfg.layers.to_string());
    ckpt.set_meta("heads", cfm_cfg.heads.to_string());
    ckpt.set_meta("selected_epoch", selected.to_string());
    ckpt.set_meta("seed", cfg.seed.to_string());
    ckpt.set_meta("final_loss", format_f64(report.last_epoch_loss));
    ckpt.save(&cfg.cfm_path())
}

/// Load the full persisted generative stack, verifying the provenance chain
/// dataset -> experts -> VAE -> CFM.
pub fn load_generative(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Generative> {
    let ds_hash = dataset_hash(cfg)?;
    let e_hash = experts_hash(cfg)?;
    let template = forecaster_template(&cfg.forecaster)?;
    let schema = derive_schema(&template)?;
    let (vae_store, token_stats, vae_ckpt) = load_vae(cfg, &schema)?;
    if vae_ckpt.meta("experts_hash")? != e_hash || vae_ckpt.meta("dataset_hash")? != ds_hash {
        return Err(Error::Artifact(
            "VAE checkpoint is stale: upstream experts or dataset changed".into(),
        ));
    }
    let cfm_ckpt = Checkpoint::load_kind(&cfg.cfm_path(), "cfm")?;
    if cfm_ckpt.meta("vae_hash")? != sha256_file(&cfg.vae_path())? {
        return Err(Error::Artifact(
            "CFM checkpoint is stale: the VAE checkpoint changed".into(),
        ));
    }
    if cfm_ckpt.meta("experts_hash")? != e_hash {
        return Err(Error::Artifact(
            "CFM checkpoint is stale: expert checkpoints changed".into(),
        ));
    }
    let ranges = coeff_range_vec(ds);
    let mut cfm_cfg = cfg.cfm.clone();
    cfm_cfg.condition_dim = ranges.len();
    if cfm_ckpt.meta("condition_dim")? != cfm_cfg.condition_dim.to_string() {
        return Err(Error::Artifact("CFM condition dimension mismatch".into()));
    }
    for (key, expect) in [
        ("d_model", cfm_cfg.d_model),
        ("layers", cfm_cfg.layers),
        ("heads", cfm_cfg.heads),
    ] {
        if cfm_ckpt.meta(key)? != expect.to_string() {
            return Err(Error::Artifact(format!(
                "CFM checkpoint {key} = {} does not match configured {expect}",
                cfm_ckpt.meta(key)?
            )));
        }
    }
    let latent_stats = LatentStats::from_metadata(cfm_ckpt.meta("latent_stats")?)?;
    let mut cfm_store = ParamStore::new();
    let mut rng = seeded_rng(0, "cfm-template");
    init_cfm(&mut cfm_store, &cfm_cfg, cfg.vae.d_z, &mut rng)?;
    cfm_ckpt.into_store(&mut cfm_store)?;
    Ok(Generative {
        fcfg: cfg.forecaster.clone(),
        schema,
        vae_cfg: cfg.vae.clone(),
        vae_store,
        token_stats,
        cfm_cfg,
        cfm_store,
        latent_stats,
        ranges,
        condition_mode: ConditionMode::Coefficients,
        flat_orig_len: None,
    })
}

// ---- evaluation ----

fn test_envs(ds: &Dataset) -> Vec<(Environment, &'static str)> {
    let mut out = Vec::new();
    for env in ds.envs_in_split(Split::TestIn) {
        out.push((env.clone(), "in_domain"));
    }
    for env in ds.envs_in_split(Split::TestOut) {
        out.push((env.clone(), "out_domain"));
    }
    out
}

/// Generated-forecaster rows for every test environment and seed.
fn generated_metrics(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    gen: &Generative,
    method: &str,
    table: &mut MetricsTable,
) -> Result<()> {
    for (env, split) in test_envs(ds) {
        let e = env.coeff_vector();
        for &s in &cfg.seeds {
            let rmse = gen.generated_rmse(ds, &env, &e, generation_seed(s, &env.id))?;
            table.push(MetricsRow {
                method: method.into(),
                split: split.into(),
                env_id: env.id.clone(),
                seed: s,
                rmse,
            })?;
        }
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<MetricsTable> {
    let ds = load_dataset(&cfg.dataset_dir())?;
    let gen = load_generative(cfg, &ds)?;
    let mut table = MetricsTable::default();
    generated_metrics(cfg, &ds, &gen, "fnfm", &mut table)?;

    // oracle: an expert trained directly on each test environment
    let init_seed = expert_init_seed(cfg);
    for (env, split) in test_envs(&ds) {
        let traj = ds.load_trajectory(&env.id)?;
        let starts = eval_window_starts(&cfg.forecaster, &traj, ds.train_time_frac);
        if starts.is_empty() {
            return Err(Error::Config(format!(
                "environment {} has no evaluation windows",
                env.id
            )));
        }
        for &s in &cfg.seeds {
            let train_seed = seeded_rng(s, &format!("oracle/{}", env.id)).next_u64();
            let (store, _) = train_expert(
                &cfg.forecaster,
                &ds.graph,
                &traj,
                ds.train_time_frac,
                init_seed,
                train_seed,
            )?;
            let rmse = evaluate_rmse(&cfg.forecaster, &store, &ds.graph, &traj, &starts)?;
            table.push(MetricsRow {
                method: "one_per_env".into(),
                split: split.into(),
                env_id: env.id.clone(),
                seed: s,
                rmse,
            })?;
        }
    }

    write_text(&cfg.metrics_path(), &table.to_csv())?;
    let mut summary = String::from("method,split,mean_rmse,std_rmse\n");
    for method in ["fnfm", "one_per_env"] {
        for split in ["in_domain", "out_domain"] {
            if let Some((m, s)) = table.mean_std(method, split) {
                summary.push_str(&format!(
                    "{method},{split},{},{}\n",
                    format_f64(m),
                    format_f64(s)
                ));
            }
        }
    }
    write_text(&cfg.out_dir.join("metrics_summary.csv"), &summary)?;
    Ok(table)
}

// ---- ablations ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Tokenizer,
    Condition,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tokenizer" => Ok(Ablation::Tokenizer),
            "condition" => Ok(Ablation::Condition),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected tokenizer|condition)"
            ))),
        }
    }
}

pub fn cmd_ablate(cfg: &ExperimentConfig, which: Ablation) -> Result<MetricsTable> {
    let ds = load_dataset(&cfg.dataset_dir())?;
    let ds_hash = dataset_hash(cfg)?;
    let train_ids: Vec<String> =
        ds.envs_in_split(Split::Train).iter().map(|e| e.id.clone()).collect();
    let experts: Vec<(String, Vec<f64>)> = load_expert_payloads(cfg, &ds_hash)?
        .into_iter()
        .filter(|(id, _)| train_ids.contains(id))
        .collect();
    let (method, tokenizer, condition) = match which {
        Ablation::Tokenizer => (
            "flat_tokenizer",
            TokenizerMode::Flat(cfg.pipeline.flat_token_dim),
            ConditionMode::Coefficients,
        ),
        Ablation::Condition => ("unconditional", TokenizerMode::Structured, ConditionMode::Constant),
    };
    let gen = fit_generative(cfg, &ds, &experts, tokenizer, condition, cfg.seed)?;
    let mut table = MetricsTable::default();
    generated_metrics(cfg, &ds, &gen, method, &mut table)?;
    write_text(&cfg.out_dir.join(format!("ablate_{method}.csv")), &table.to_csv())?;
    Ok(table)
}

// ---- robustness ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustnessMode {
    DataRatio,
    CoeffNoise,
}

impl RobustnessMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "data_ratio" => Ok(RobustnessMode::DataRatio),
            "coeff_noise" => Ok(RobustnessMode::CoeffNoise),
            other => Err(Error::Config(format!(
                "unknown robustness mode '{other}' (expected data_ratio|coeff_noise)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RobustnessMode::DataRatio => "data_ratio",
            RobustnessMode::CoeffNoise => "coeff_noise",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub level: f64,
    pub split: String,
    pub env_id: String,
    pub seed: u64,
    pub rmse: f64,
}

pub fn robustness_csv(mode: RobustnessMode, rows: &[RobustnessRow]) -> String {
    let mut s = String::from("mode,level,split,env_id,seed,rmse\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            mode.as_str(),
            format_f64(r.level),
            r.split,
            r.env_id,
            r.seed,
            format_f64(r.rmse)
        ));
    }
    s
}

pub fn cmd_robustness(
    cfg: &ExperimentConfig,
    mode: RobustnessMode,
    levels: &[f64],
) -> Result<Vec<RobustnessRow>> {
    if levels.is_empty() {
        return Err(Error::Config("robustness needs at least one level".into()));
    }
    let ds = load_dataset(&cfg.dataset_dir())?;
    let mut rows = Vec::new();
    match mode {
        RobustnessMode::DataRatio => {
            for &l in levels {
                if !(l > 0.0 && l <= 1.0) {
                    return Err(Error::Config(format!(
                        "data_ratio level {l} outside (0, 1]"
                    )));
                }
            }
            let ds_hash = dataset_hash(cfg)?;
            let experts = load_expert_payloads(cfg, &ds_hash)?;
            // one seeded permutation; prefixes give nested subsets, and the
            // level-1.0 subset reproduces the full corpus in canonical order
            let mut order: Vec<usize> = (0..experts.len()).collect();
            {
                use rand::seq::SliceRandom;
                order.shuffle(&mut seeded_rng(cfg.seed, "robustness-subsample"));
            }
            for &level in levels {
                let take = ((level * experts.len() as f64).ceil() as usize)
                    .clamp(2, experts.len());
                let mut idx: Vec<usize> = order[..take].to_vec();
                idx.sort_unstable();
                let subset: Vec<(String, Vec<f64>)> =
                    idx.iter().map(|&i| experts[i].clone()).collect();
                let gen = fit_generative(
                    cfg,
                    &ds,
                    &subset,
                    TokenizerMode::Structured,
                    ConditionMode::Coefficients,
                    cfg.seed,
                )?;
                for (env, split) in test_envs(&ds) {
                    let e = env.coeff_vector();
                    for &s in &cfg.seeds {
                        let rmse =
                            gen.generated_rmse(&ds, &env, &e, generation_seed(s, &env.id))?;
                        rows.push(RobustnessRow {
                            level,
                            split: split.into(),
                            env_id: env.id.clone(),
                            seed: s,
                            rmse,
                        });
                    }
                }
            }
        }
        RobustnessMode::CoeffNoise => {
            for &l in levels {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(Error::Config(format!("coeff_noise level {l} invalid")));
                }
            }
            let gen = load_generative(cfg, &ds)?;
            let widths: Vec<f64> = gen.ranges.iter().map(|(lo, hi)| hi - lo).collect();
            for &level in levels {
                for (env, split) in test_envs(&ds) {
                    let e = env.coeff_vector();
                    for &s in &cfg.seeds {
                        // common random numbers: the draw is independent of
                        // the level, so level 0 reproduces noiseless metrics
                        let noisy: Vec<f64> = e
                            .iter()
                            .enumerate()
                            .map(|(j, v)| {
                                let mut rng =
                                    seeded_rng(s, &format!("coeff-noise/{}/{j}", env.id));
                                v + level * widths[j] * randn(&mut rng)
                            })
                            .collect();
                        let rmse =
                            gen.generated_rmse(&ds, &env, &noisy, generation_seed(s, &env.id))?;
                        rows.push(RobustnessRow {
                            level,
                            split: split.into(),
                            env_id: env.id.clone(),
                            seed: s,
                            rmse,
                        });
                    }
                }
            }
        }
    }
    write_text(
        &cfg.out_dir.join(format!("robustness_{}.csv", mode.as_str())),
        &robustness_csv(mode, &rows),
    )?;
    Ok(rows)
}

// ---- PCA and latent export ----

/// Two-component PCA fit on rows of `x` (count x dim), exact via the Gram
/// matrix eigendecomposition (equivalent to SVD of the centered matrix).
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two orthonormal principal axes.
    pub axes: [Vec<f64>; 2],
    pub explained: [f64; 2],
}

/// Jacobi eigendecomposition of a small symmetric matrix; returns
/// (eigenvalues, row-major eigenvector columns).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

impl Pca2 {
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let c = points.len();
        if c < 3 {
            return Err(Error::Config(format!(
                "PCA needs at least 3 points, got {c}"
            )));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::Shape("PCA points have mixed dimensions".into()));
        }
        let mut mean = vec![0.0; d];
        for p in points {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x / c as f64;
            }
        }
        let centered: Vec<Vec<f64>> = points
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();
        // Gram matrix G = X X^T (c x c), same nonzero spectrum as X^T X
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in i..c {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                g[i * c + j] = dot;
                g[j * c + i] = dot;
            }
        }
        let (eig, vecs) = jacobi_eigen(g, c);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&i, &j| eig[j].partial_cmp(&eig[i]).unwrap());
        let total: f64 = eig.iter().map(|l| l.max(0.0)).sum();
        let mut axes: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
        let mut explained = [0.0; 2];
        for comp in 0..2 {
            let k = order[comp];
            let lambda = eig[k].max(0.0);
            explained[comp] = if total > 0.0 { lambda / total } else { 0.0 };
            // axis = X^T u / sqrt(lambda)
            let scale = lambda.sqrt().max(1e-12);
            for (i, row) in centered.iter().enumerate() {
                let u = vecs[i * c + k];
                for (ax, x) in axes[comp].iter_mut().zip(row) {
                    *ax += u * x / scale;
                }
            }
            // deterministic sign: the largest-magnitude entry is positive
            let lead = axes[comp]
                .iter()
                .cloned()
                .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                axes[comp].iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Pca2 { mean, axes, explained })
    }

    pub fn project(&self, p: &[f64]) -> (f64, f64) {
        let mut out = [0.0; 2];
        for (comp, o) in out.iter_mut().enumerate() {
            *o = p
                .iter()
                .zip(&self.mean)
                .zip(&self.axes[comp])
                .map(|((x, m), a)| (x - m) * a)
                .sum();
        }
        (out[0], out[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPathRow {
    pub env_id: String,
    pub condition: Vec<f64>,
    pub step: usize,
    pub pc1: f64,
    pub pc2: f64,
    /// "start", "path" or "end".
    pub role: String,
}

pub fn cmd_export_latents(cfg: &ExperimentConfig) -> Result<(Vec<LatentPathRow>, Pca2)> {
    let ds = load_dataset(&cfg.dataset_dir())?;
    let gen = load_generative(cfg, &ds)?;
    let ds_hash = dataset_hash(cfg)?;
    let experts = load_expert_payloads(cfg, &ds_hash)?;

    // PCA basis: encoded expert latents (the corpus end points)
    let mut points = Vec::new();
    for (_, payload) in &experts {
        let z = encode_payload(&cfg.vae, &gen.schema, &gen.vae_store, &gen.token_stats, payload)?;
        points.push(z.data);
    }
    let pca = Pca2::fit(&points)?;

    let seed0 = cfg.seeds[0];
    let n = gen.cfm_cfg.n_steps;
    let mut rows = Vec::new();
    for env in &ds.envs {
        let e = env.coeff_vector();
        let (_, path) = gen.generate_payload(&e, generation_seed(seed0, &env.id))?;
        for (step, z) in path.iter().enumerate() {
            let (pc1, pc2) = pca.project(&z.data);
            let role = if step == 0 {
                "start"
            } else if step == n {
                "end"
            } else {
                "path"
            };
            rows.push(LatentPathRow {
                env_id: env.id.clone(),
                condition: e.clone(),
                step,
                pc1,
                pc2,
                role: role.into(),
            });
        }
    }

    let mut csv = String::from("env,condition,step,pc1,pc2,role\n");
    for r in &rows {
        let cond: Vec<String> = r.condition.iter().map(|v| format_f64(*v)).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.env_id,
            cond.join(";"),
            r.step,
            format_f64(r.pc1),
            format_f64(r.pc2),
            r.role
        ));
    }
    write_text(&cfg.out_dir.join("latents.csv"), &csv)?;
    let var = format!(
        "component,explained_variance_ratio\npc1,{}\npc2,{}\n",
        format_f64(pca.explained[0]),
        format_f64(pca.explained[1])
    );
    write_text(&cfg.out_dir.join("latents_variance.csv"), &var)?;
    Ok((rows, pca))
}

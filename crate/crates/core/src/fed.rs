//! Round orchestration: local training at every site, the method's
//! aggregation step, evaluation, and run artifacts.
//!
//! A run executes T communication rounds. Each round every site trains
//! E local epochs (Adam, seeded shuffles), the server aggregates per the
//! configured method (nothing for local training; weighted means for the
//! averaging baselines; the hyper-aggregation pipeline otherwise), and
//! every site is scored on its held-out split. Sequential mode replays
//! byte-identically for a fixed config and seed; parallel mode runs the
//! site loop on a thread pool with the same math and a fixed reduction
//! order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::config::{ExperimentConfig, MethodConfig, MethodName, TrainConfig};
use crate::data::{self, LoadedDataset};
use crate::error::{Error, Result};
use crate::lha::{
    AggregationUnit, AttentionRecord, GateNet, PsiTable, ServerRoundInput,
};
use crate::metrics::{self, MetricSet};
use crate::model::{
    build_model, forward_on_tape, loss_on_tape, ModelConfig, ParamGroup, ParamVars, ParameterSet,
    TaskSpec,
};
use crate::rng::{mix_seeds, Xoshiro256StarStar};
use crate::tape::Tape;
use crate::tdf;
use crate::tensor::Tensor;
use crate::text::{make_indicator, TextIndicator};

const INIT_SEED_TAG: u64 = 0x494e4954;
const STREAM_SEED_TAG: u64 = 0x53545245414d;
const INDICATOR_SEED_TAG: u64 = 0x494e44;

/// Thread-pool size override for parallel mode.
pub const THREADS_ENV: &str = "FEDSURG_THREADS";

/// One federated participant.
pub struct SiteRuntime {
    pub index: usize,
    pub name: String,
    pub task: TaskSpec,
    pub dataset: LoadedDataset,
    pub indicator: TextIndicator,
    pub params: ParameterSet,
    /// Per-parameter optimizer state; never leaves the site.
    pub adam: IndexMap<String, AdamState>,
    /// Training stream, keyed by the site's data seed so identically
    /// configured sites train identically.
    pub stream: Xoshiro256StarStar,
}

impl SiteRuntime {
    pub fn train_sample_count(&self) -> usize {
        self.dataset.train_indices().len()
    }
}

fn is_trainable(name: &str, method: &MethodConfig) -> bool {
    if method.freeze_groups.iter().any(|p| name.starts_with(p.as_str())) {
        return false;
    }
    if !method.trainable_groups.is_empty()
        && !method
            .trainable_groups
            .iter()
            .any(|p| name.starts_with(p.as_str()))
    {
        return false;
    }
    true
}

/// E local epochs of per-sample Adam on the site's training split.
///
/// Updates `site.params` in place and returns the mean loss per epoch.
/// With `method.fedprox_mu > 0` and a reference parameter set, the
/// proximal gradient `mu * (w - w_ref)` is added on shared layers.
/// Frozen groups receive zero updates exactly.
pub fn local_train_site(
    site: &mut SiteRuntime,
    model: &ModelConfig,
    method: &MethodConfig,
    train: &TrainConfig,
    global_ref: Option<&ParameterSet>,
) -> Result<Vec<f64>> {
    let train_indices = site.dataset.train_indices();
    let mut epoch_losses = Vec::with_capacity(train.local_epochs);
    let apply_prox = method.name == MethodName::Fedprox && method.fedprox_mu != 0.0;
    for _ in 0..train.local_epochs {
        let mut order = train_indices.clone();
        site.stream.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let sample = &site.dataset.samples[idx];
            let mut tape = Tape::new();
            let mut vars = IndexMap::new();
            for (name, tensor) in site.params.iter() {
                let var = if is_trainable(name, method) {
                    tape.leaf(tensor.clone())
                } else {
                    tape.constant(tensor.clone())
                };
                vars.insert(name.to_string(), var);
            }
            let param_vars = ParamVars { vars };
            let x = tape.constant(sample.image.reshape(vec![
                1,
                sample.image.shape()[0],
                sample.image.shape()[1],
                3,
            ])?);
            let ind = tape.constant(site.indicator.vector.clone());
            let pred = forward_on_tape(&mut tape, &param_vars, x, ind, model, &site.task)?;
            let loss = loss_on_tape(&mut tape, pred, &sample.label, &site.task)?;
            loss_sum += tape.value(loss).scalar_value()?;
            let grads = tape.backward(loss)?;

            for (name, var) in &param_vars.vars {
                if !is_trainable(name, method) {
                    continue;
                }
                let mut grad = grads.wrt(&tape, *var);
                if apply_prox && site.params.group_of(name) == Some(ParamGroup::Shared) {
                    if let Some(reference) = global_ref.and_then(|r| r.get(name)) {
                        let current = site.params.get(name).expect("own layer");
                        for i in 0..grad.len() {
                            grad.data_mut()[i] +=
                                method.fedprox_mu * (current.data()[i] - reference.data()[i]);
                        }
                    }
                }
                let param = site.params.get_mut(name).expect("own layer");
                let state = site.adam.get_mut(name).expect("own state");
                adam_step(param, &grad, state)?;
            }
        }
        let denom = order.len().max(1) as f64;
        epoch_losses.push(loss_sum / denom);
    }
    Ok(epoch_losses)
}

fn argmax_classes(logits: &Tensor) -> Tensor {
    let classes = logits.shape()[3];
    let pixels = logits.len() / classes;
    let mut out = vec![0.0; pixels];
    for p in 0..pixels {
        let row = &logits.data()[p * classes..(p + 1) * classes];
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        out[p] = best as f64;
    }
    Tensor::new(logits.shape()[..3].to_vec(), out).expect("shape matches")
}

/// Scores a site on its held-out split: per-image Dice/IoU-percent
/// (segmentation) or RMSE (depth), averaged over eval images.
pub fn evaluate_site(site: &SiteRuntime, model: &ModelConfig) -> Result<MetricSet> {
    let eval_indices = site.dataset.eval_indices();
    let mut set = MetricSet::default();
    if eval_indices.is_empty() {
        return Ok(set);
    }
    match site.task {
        TaskSpec::Segmentation { class_count } => {
            let mut dices = Vec::new();
            let mut ious = Vec::new();
            for &idx in &eval_indices {
                let sample = &site.dataset.samples[idx];
                let pred = infer(site, model, &sample.image)?;
                let pred_map = argmax_classes(&pred);
                if let Some((dice, iou)) = metrics::dice_iou(&pred_map, &sample.label, class_count)?
                {
                    dices.push(dice);
                    ious.push(iou);
                }
            }
            if !dices.is_empty() {
                set.push("dice", mean(&dices), 1);
                set.push("iou", mean(&ious), 1);
            }
        }
        TaskSpec::Depth { .. } => {
            let mut rmses = Vec::new();
            for &idx in &eval_indices {
                let sample = &site.dataset.samples[idx];
                let pred = infer(site, model, &sample.image)?;
                let flat = pred.reshape(sample.label.shape().to_vec())?;
                rmses.push(metrics::rmse(&flat, &sample.label)?);
            }
            set.push("rmse", mean(&rmses), -1);
        }
    }
    Ok(set)
}

fn infer(site: &SiteRuntime, model: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::constants(&mut tape, &site.params);
    let x = tape.constant(image.reshape(vec![1, image.shape()[0], image.shape()[1], 3])?);
    let ind = tape.constant(site.indicator.vector.clone());
    let out = forward_on_tape(&mut tape, &vars, x, ind, model, &site.task)?;
    Ok(tape.value(out).clone())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Aggregation flavor of the non-hypernetwork baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Weighted mean of everything except personalized layers,
    /// broadcast to all sites.
    FedAvg,
    /// The same mean computed within task-kind groups.
    Cluster,
    /// Weighted mean of shared layers only; heads stay local.
    FedRep,
}

/// Weighted-mean aggregation.
///
/// Within each group, a layer is averaged only when every member holds
/// it with the same shape (heterogeneous heads stay local). Layers whose
/// values are bitwise identical across the group pass through untouched,
/// which makes aggregation exact on identical sites and idempotent on
/// already-aggregated inputs.
pub fn baseline_aggregate(
    mode: BaselineMode,
    results: &[ParameterSet],
    weights: &[f64],
    tasks: &[TaskSpec],
) -> Result<Vec<ParameterSet>> {
    if results.is_empty() || results.len() != weights.len() || results.len() != tasks.len() {
        return Err(Error::Contract(format!(
            "aggregation over {} results, {} weights, {} tasks",
            results.len(),
            weights.len(),
            tasks.len()
        )));
    }
    let groups: Vec<Vec<usize>> = match mode {
        BaselineMode::FedAvg | BaselineMode::FedRep => vec![(0..results.len()).collect()],
        BaselineMode::Cluster => {
            let seg: Vec<usize> = (0..results.len())
                .filter(|&k| tasks[k].is_segmentation())
                .collect();
            let depth: Vec<usize> = (0..results.len())
                .filter(|&k| !tasks[k].is_segmentation())
                .collect();
            [seg, depth].into_iter().filter(|g| !g.is_empty()).collect()
        }
    };
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Contract("aggregation group is empty".into()));
    }

    let eligible = |group: Option<ParamGroup>| match mode {
        BaselineMode::FedAvg | BaselineMode::Cluster => {
            group.is_some() && group != Some(ParamGroup::Personalized)
        }
        BaselineMode::FedRep => group == Some(ParamGroup::Shared),
    };

    let mut out: Vec<ParameterSet> = results.to_vec();
    for members in &groups {
        let first = members[0];
        let total: f64 = members.iter().map(|&k| weights[k]).sum();
        if total <= 0.0 {
            return Err(Error::Contract("aggregation weights must be positive".into()));
        }
        let layer_names: Vec<String> = results[first].names().map(str::to_string).collect();
        for layer in &layer_names {
            if !eligible(results[first].group_of(layer)) {
                continue;
            }
            let shape = results[first].get(layer).expect("listed layer").shape().to_vec();
            let compatible = members.iter().all(|&k| {
                results[k]
                    .get(layer)
                    .is_some_and(|t| t.shape() == shape.as_slice())
            });
            if !compatible {
                continue;
            }
            let identical = members.iter().all(|&k| {
                results[k]
                    .get(layer)
                    .expect("checked")
                    .bitwise_eq(results[first].get(layer).expect("checked"))
            });
            let merged = if identical {
                results[first].get(layer).expect("checked").clone()
            } else {
                let mut acc = Tensor::zeros(&shape);
                for &k in members {
                    acc.add_scaled(results[k].get(layer).expect("checked"), weights[k] / total)?;
                }
                acc
            };
            for &k in members {
                *out[k].get_mut(layer).expect("checked") = merged.clone();
            }
        }
    }
    Ok(out)
}

/// ψ snapshot entry in a round log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiSnapshotEntry {
    pub site: usize,
    pub layer: String,
    pub value: f64,
}

/// Per-round record: losses, metrics, and server diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub config_hash: String,
    /// Mean training loss per epoch, per site.
    pub site_losses: Vec<Vec<f64>>,
    pub site_metrics: Vec<MetricSet>,
    pub psi: Vec<PsiSnapshotEntry>,
    pub attention: Vec<AttentionRecord>,
    pub gate_chunk_means: Vec<f64>,
    pub gate_surrogate_loss: Option<f64>,
    pub psi_clamp_events: u64,
    /// Wall-clock time of the round; kept out of the serialized record
    /// so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_ms: u128,
}

/// A fully initialized experiment ready to run rounds.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub sites: Vec<SiteRuntime>,
    pub psi: PsiTable,
    pub gate: GateNet,
    pub config_hash: String,
    pub round_index: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Experiment {
    /// Builds the experiment from pre-loaded datasets (one per site, in
    /// site order).
    pub fn new(
        config: &ExperimentConfig,
        datasets: Vec<LoadedDataset>,
        seed_override: Option<u64>,
        sequential: bool,
    ) -> Result<Self> {
        let mut config = config.clone();
        if let Some(seed) = seed_override {
            config.train.seed = seed;
        }
        config.validate()?;
        if datasets.len() != config.sites.len() {
            return Err(Error::Contract(format!(
                "{} datasets for {} sites",
                datasets.len(),
                config.sites.len()
            )));
        }
        let model = config.effective_model();
        let seed = config.train.seed;
        let init_seed = mix_seeds(seed, INIT_SEED_TAG);
        let mut sites = Vec::with_capacity(config.sites.len());
        for (k, (site_cfg, dataset)) in config.sites.iter().zip(datasets).enumerate() {
            let indicator = make_indicator(
                config.method.indicator,
                k,
                &site_cfg.prompt(),
                config.sites.len(),
                config.train.indicator_dim,
                mix_seeds(site_cfg.seed, INDICATOR_SEED_TAG),
            )?;
            let params = build_model(&model, &site_cfg.task, &indicator, init_seed)?;
            let mut adam = IndexMap::new();
            for (name, tensor) in params.iter() {
                adam.insert(
                    name.to_string(),
                    AdamState::new(tensor.shape(), config.train.local_lr),
                );
            }
            sites.push(SiteRuntime {
                index: k,
                name: site_cfg.name.clone(),
                task: site_cfg.task,
                dataset,
                indicator,
                params,
                adam,
                stream: Xoshiro256StarStar::seed_from_u64(mix_seeds(
                    mix_seeds(seed, STREAM_SEED_TAG),
                    site_cfg.seed,
                )),
            });
        }
        let psi = PsiTable::new(config.train.psi_lr, config.method.psi_update);
        let gate = GateNet::new(
            config.train.indicator_dim,
            config.train.gate_chunks,
            config.train.gate_lr,
        );
        let pool = if sequential {
            None
        } else {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Ok(text) = std::env::var(THREADS_ENV) {
                let n: usize = text
                    .parse()
                    .map_err(|_| Error::Config(format!("{} must be an integer", THREADS_ENV)))?;
                builder = builder.num_threads(n);
            }
            Some(
                builder
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {}", e)))?,
            )
        };
        let config_hash = config.hash();
        Ok(Self {
            config,
            model,
            sites,
            psi,
            gate,
            config_hash,
            round_index: 0,
            pool,
        })
    }

    /// Builds the experiment with freshly generated in-memory datasets.
    pub fn from_config_in_memory(
        config: &ExperimentConfig,
        seed_override: Option<u64>,
        sequential: bool,
    ) -> Result<Self> {
        config.validate()?;
        let size = [config.model.input[0], config.model.input[1]];
        let mut datasets = Vec::with_capacity(config.sites.len());
        for site in &config.sites {
            let spec = site.site_spec(size)?;
            datasets.push(data::build_dataset_in_memory(&spec, site.samples)?);
        }
        Self::new(config, datasets, seed_override, sequential)
    }

    /// Pre-training evaluation record (round 0).
    pub fn round_zero_log(&self) -> Result<RoundLog> {
        let start = Instant::now();
        let mut site_metrics = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            site_metrics.push(evaluate_site(site, &self.model)?);
        }
        Ok(RoundLog {
            round: 0,
            config_hash: self.config_hash.clone(),
            site_losses: vec![Vec::new(); self.sites.len()],
            site_metrics,
            psi: Vec::new(),
            attention: Vec::new(),
            gate_chunk_means: Vec::new(),
            gate_surrogate_loss: None,
            psi_clamp_events: 0,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    /// Executes one communication round.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        let start = Instant::now();
        self.round_index += 1;
        let method = self.config.method.clone();
        let train = self.config.train.clone();
        let model = self.model.clone();

        let start_params: Vec<ParameterSet> =
            self.sites.iter().map(|s| s.params.clone()).collect();

        // Local phase.
        let site_losses: Vec<Vec<f64>> = match &self.pool {
            Some(pool) => {
                use rayon::prelude::*;
                let refs: Vec<(usize, &mut SiteRuntime)> =
                    self.sites.iter_mut().enumerate().collect();
                let results: Vec<(usize, Result<Vec<f64>>)> = pool.install(|| {
                    refs.into_par_iter()
                        .map(|(k, site)| {
                            let losses = local_train_site(
                                site,
                                &model,
                                &method,
                                &train,
                                Some(&start_params[k]),
                            );
                            (k, losses)
                        })
                        .collect()
                });
                let mut ordered: Vec<Vec<f64>> = vec![Vec::new(); results.len()];
                for (k, r) in results {
                    ordered[k] = r?;
                }
                ordered
            }
            None => {
                let mut ordered = Vec::with_capacity(self.sites.len());
                for (k, site) in self.sites.iter_mut().enumerate() {
                    ordered.push(local_train_site(
                        site,
                        &model,
                        &method,
                        &train,
                        Some(&start_params[k]),
                    )?);
                }
                ordered
            }
        };

        // Server phase.
        let mut attention = Vec::new();
        let mut gate_chunk_means = Vec::new();
        let mut gate_surrogate_loss = None;
        match method.name {
            MethodName::Local => {}
            MethodName::Fedavg | MethodName::Fedprox => {
                self.apply_baseline(BaselineMode::FedAvg)?;
            }
            MethodName::FedavgCluster => {
                self.apply_baseline(BaselineMode::Cluster)?;
            }
            MethodName::Fedrep => {
                self.apply_baseline(BaselineMode::FedRep)?;
            }
            MethodName::Surgfed => {
                let deltas: Vec<ParameterSet> = self
                    .sites
                    .iter()
                    .zip(start_params.iter())
                    .map(|(site, start)| site.params.sub(start))
                    .collect::<Result<_>>()?;
                let local_results: Vec<ParameterSet> =
                    self.sites.iter().map(|s| s.params.clone()).collect();
                let indicators: Vec<TextIndicator> =
                    self.sites.iter().map(|s| s.indicator.clone()).collect();
                let units = self.build_units()?;
                let out = crate::lha::run_server_round(
                    &ServerRoundInput {
                        local_results: &local_results,
                        deltas: &deltas,
                        indicators: &indicators,
                        units: &units,
                        text_gate: method.lha_text_gate_active(),
                    },
                    &mut self.psi,
                    &mut self.gate,
                )?;
                for (site, params) in self.sites.iter_mut().zip(out.new_params) {
                    site.params = params;
                }
                attention = out.attention;
                gate_chunk_means = out.gate_chunk_means;
                if method.lha_text_gate_active() {
                    gate_surrogate_loss = Some(out.surrogate_loss);
                }
            }
        }

        // Evaluation.
        let mut site_metrics = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            site_metrics.push(evaluate_site(site, &self.model)?);
        }

        let psi_snapshot: Vec<PsiSnapshotEntry> = self
            .psi
            .snapshot()
            .into_iter()
            .map(|(site, layer, value)| PsiSnapshotEntry { site, layer, value })
            .collect();

        Ok(RoundLog {
            round: self.round_index,
            config_hash: self.config_hash.clone(),
            site_losses,
            site_metrics,
            psi: psi_snapshot,
            attention,
            gate_chunk_means,
            gate_surrogate_loss,
            psi_clamp_events: self.psi.clamp_events,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    fn apply_baseline(&mut self, mode: BaselineMode) -> Result<()> {
        let results: Vec<ParameterSet> = self.sites.iter().map(|s| s.params.clone()).collect();
        let weights: Vec<f64> = self
            .sites
            .iter()
            .map(|s| s.train_sample_count() as f64)
            .collect();
        let tasks: Vec<TaskSpec> = self.sites.iter().map(|s| s.task).collect();
        let merged = baseline_aggregate(mode, &results, &weights, &tasks)?;
        for (site, params) in self.sites.iter_mut().zip(merged) {
            site.params = params;
        }
        Ok(())
    }

    /// Aggregation units: all sites over shared layers, plus same-task
    /// head units when enabled.
    fn build_units(&self) -> Result<Vec<AggregationUnit>> {
        let shared = self.sites[0].params.names_in_group(ParamGroup::Shared);
        for site in &self.sites[1..] {
            if site.params.names_in_group(ParamGroup::Shared) != shared {
                return Err(Error::Contract(
                    "sites disagree on shared layer names".into(),
                ));
            }
        }
        let mut units = vec![AggregationUnit {
            member_sites: (0..self.sites.len()).collect(),
            layers: shared,
        }];
        if self.config.method.include_heads_same_task {
            for seg in [true, false] {
                let members: Vec<usize> = self
                    .sites
                    .iter()
                    .filter(|s| s.task.is_segmentation() == seg)
                    .map(|s| s.index)
                    .collect();
                if members.len() < 2 {
                    continue;
                }
                let head_layers = self.sites[members[0]].params.names_in_group(ParamGroup::Head);
                let compatible = head_layers.iter().all(|layer| {
                    let shape = self.sites[members[0]].params.get(layer).map(|t| t.shape().to_vec());
                    members.iter().all(|&k| {
                        self.sites[k].params.get(layer).map(|t| t.shape().to_vec()) == shape
                    })
                });
                if compatible {
                    units.push(AggregationUnit {
                        member_sites: members,
                        layers: head_layers,
                    });
                }
            }
        }
        Ok(units)
    }

    /// Runs round 0 evaluation plus T training rounds.
    pub fn run_all(&mut self) -> Result<Vec<RoundLog>> {
        let mut logs = vec![self.round_zero_log()?];
        for _ in 0..self.config.train.rounds {
            logs.push(self.run_round()?);
        }
        Ok(logs)
    }
}

/// Per-site block of the run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: usize,
    pub name: String,
    pub final_metrics: MetricSet,
}

/// Δm of one site against the baseline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteDelta {
    pub site: usize,
    pub name: String,
    pub delta_m: f64,
}

/// Δm block of the run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaMReport {
    pub baseline_run: String,
    pub per_site: Vec<SiteDelta>,
    /// Mean of the per-site Δm values.
    pub average: f64,
}

/// Final run summary written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub rounds: usize,
    pub sites: Vec<SiteSummary>,
    pub delta_m: Option<DeltaMReport>,
    pub warnings: Vec<String>,
}

/// File inventory entry of the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Top-level record of a run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_name: String,
    pub config_hash: String,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub files: Vec<FileRecord>,
}

/// Everything `run_experiment` produces, for callers that want the
/// in-memory views as well as the files.
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub logs: Vec<RoundLog>,
    pub summary: RunSummary,
}

/// Loads the per-site datasets referenced by a config.
pub fn load_datasets(config: &ExperimentConfig, data_root: &Path) -> Result<Vec<LoadedDataset>> {
    let mut datasets = Vec::with_capacity(config.sites.len());
    for (k, site) in config.sites.iter().enumerate() {
        let dir = data::site_dir(data_root, k);
        if !dir.join("manifest.json").exists() {
            return Err(Error::MissingInput(format!(
                "dataset for site {} ({}) not found at {}; run gen-data first",
                k,
                site.name,
                dir.display()
            )));
        }
        let loaded = data::load_site_dataset(&dir)?;
        if loaded.manifest.sample_count != site.samples {
            return Err(Error::MissingInput(format!(
                "dataset at {} has {} samples, config wants {}",
                dir.display(),
                loaded.manifest.sample_count,
                site.samples
            )));
        }
        datasets.push(loaded);
    }
    Ok(datasets)
}

/// Runs a full experiment and writes all artifacts into `out_dir`:
/// `rounds.jsonl`, `metrics.csv`, per-site checkpoints, `summary.json`,
/// `config.json`, and a `manifest.json` inventory with checksums.
pub fn run_experiment(
    config: &ExperimentConfig,
    data_root: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    sequential: bool,
) -> Result<ExperimentReport> {
    let datasets = load_datasets(config, data_root)?;
    let started = chrono::Utc::now().to_rfc3339();
    let mut experiment = Experiment::new(config, datasets, seed_override, sequential)?;
    let logs = experiment.run_all()?;
    write_run_artifacts(&mut experiment, &logs, out_dir, &started)
}

/// Writes run artifacts for an already-executed experiment.
pub fn write_run_artifacts(
    experiment: &mut Experiment,
    logs: &[RoundLog],
    out_dir: &Path,
    started: &str,
) -> Result<ExperimentReport> {
    fs::create_dir_all(out_dir)?;
    let mut inventory: Vec<(String, PathBuf)> = Vec::new();

    // rounds.jsonl
    let rounds_path = out_dir.join("rounds.jsonl");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&rounds_path)?);
        for log in logs {
            serde_json::to_writer(&mut w, log)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    inventory.push(("rounds.jsonl".into(), rounds_path));

    // metrics.csv
    let metrics_path = out_dir.join("metrics.csv");
    {
        let mut w = std::io::BufWriter::new(fs::File::create(&metrics_path)?);
        w.write_all(b"round,site,metric,value\n")?;
        for log in logs {
            for (site, set) in log.site_metrics.iter().enumerate() {
                for entry in &set.entries {
                    writeln!(w, "{},{},{},{}", log.round, site, entry.name, entry.value)?;
                }
            }
        }
        w.flush()?;
    }
    inventory.push(("metrics.csv".into(), metrics_path));

    // config.json (effective configuration)
    let config_path = out_dir.join("config.json");
    fs::write(
        &config_path,
        serde_json::to_string_pretty(&experiment.config)?,
    )?;
    inventory.push(("config.json".into(), config_path));

    // checkpoints
    for site in &experiment.sites {
        let dir = out_dir.join("checkpoints").join(format!("site{}", site.index));
        fs::create_dir_all(&dir)?;
        let mut layers = Vec::new();
        for (name, tensor) in site.params.iter() {
            let file = format!("{}.tdf", name);
            tdf::write_tensor(&dir.join(&file), tensor)?;
            layers.push(serde_json::json!({
                "name": name,
                "file": file,
                "shape": tensor.shape(),
                "group": experiment_group_name(site.params.group_of(name)),
            }));
            inventory.push((
                format!("checkpoints/site{}/{}", site.index, file),
                dir.join(&file),
            ));
        }
        let manifest = serde_json::json!({
            "site": site.index,
            "name": site.name,
            "task": site.task,
            "model": experiment.model,
            "layers": layers,
        });
        let manifest_path = dir.join("manifest.json");
        fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        inventory.push((
            format!("checkpoints/site{}/manifest.json", site.index),
            manifest_path,
        ));
    }

    // summary.json
    let mut warnings = Vec::new();
    let final_log = logs.last().expect("at least round 0");
    let sites: Vec<SiteSummary> = experiment
        .sites
        .iter()
        .map(|s| SiteSummary {
            site: s.index,
            name: s.name.clone(),
            final_metrics: final_log.site_metrics[s.index].clone(),
        })
        .collect();
    let delta_m = match &experiment.config.data.baseline_run {
        Some(baseline) => {
            let baseline_dir = PathBuf::from(baseline);
            match compare_runs_delta_m(&collect_final_metrics(logs), &baseline_dir, experiment) {
                Ok(report) => Some(report),
                Err(e) => {
                    warnings.push(format!(
                        "delta_m omitted: baseline run {} unusable: {}",
                        baseline, e
                    ));
                    None
                }
            }
        }
        None => None,
    };
    let summary = RunSummary {
        config_hash: experiment.config_hash.clone(),
        seed: experiment.config.train.seed,
        rounds: experiment.config.train.rounds,
        sites,
        delta_m,
        warnings,
    };
    let summary_path = out_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    inventory.push(("summary.json".into(), summary_path));

    // manifest.json
    let mut files = Vec::with_capacity(inventory.len());
    for (rel, path) in &inventory {
        files.push(FileRecord {
            path: rel.clone(),
            sha256: data::sha256_hex(&fs::read(path)?),
        });
    }
    let manifest = RunManifest {
        run_name: out_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
        config_hash: experiment.config_hash.clone(),
        version: format!("fedsurg-{}", env!("CARGO_PKG_VERSION")),
        started: started.to_string(),
        finished: chrono::Utc::now().to_rfc3339(),
        files,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    Ok(ExperimentReport {
        out_dir: out_dir.to_path_buf(),
        logs: logs.to_vec(),
        summary,
    })
}

fn experiment_group_name(group: Option<ParamGroup>) -> &'static str {
    match group {
        Some(ParamGroup::Shared) => "shared",
        Some(ParamGroup::Personalized) => "personalized",
        Some(ParamGroup::Head) => "head",
        None => "unknown",
    }
}

/// Final (site, metric) -> value map of an executed run.
pub fn collect_final_metrics(logs: &[RoundLog]) -> Vec<(usize, String, f64)> {
    let mut out = Vec::new();
    if let Some(last) = logs.last() {
        for (site, set) in last.site_metrics.iter().enumerate() {
            for entry in &set.entries {
                out.push((site, entry.name.clone(), entry.value));
            }
        }
    }
    out
}

/// One parsed `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub round: usize,
    pub site: usize,
    pub metric: String,
    pub value: f64,
}

/// Reads every row of a run directory's `metrics.csv`.
pub fn read_metric_rows(run_dir: &Path) -> Result<Vec<MetricRow>> {
    let path = run_dir.join("metrics.csv");
    if !path.exists() {
        return Err(Error::MissingInput(format!(
            "{} has no metrics.csv",
            run_dir.display()
        )));
    }
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("round,site,metric,value") => {}
        other => {
            return Err(Error::Format(format!(
                "metrics.csv header mismatch: {:?}",
                other
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!(
                "metrics.csv line {}: expected 4 fields",
                lineno + 2
            )));
        }
        rows.push(MetricRow {
            round: parts[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad round on line {}", lineno + 2)))?,
            site: parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad site on line {}", lineno + 2)))?,
            metric: parts[2].to_string(),
            value: parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad value on line {}", lineno + 2)))?,
        });
    }
    Ok(rows)
}

/// Reads the final-round (site, metric) -> value map from a run
/// directory's `metrics.csv`.
pub fn read_final_metrics(run_dir: &Path) -> Result<Vec<(usize, String, f64)>> {
    let mut best: IndexMap<(usize, String), (usize, f64)> = IndexMap::new();
    for row in read_metric_rows(run_dir)? {
        let key = (row.site, row.metric);
        match best.get(&key) {
            Some(&(existing, _)) if existing > row.round => {}
            _ => {
                best.insert(key, (row.round, row.value));
            }
        }
    }
    Ok(best
        .into_iter()
        .map(|((site, metric), (_, value))| (site, metric, value))
        .collect())
}

/// Per-site Δm of `run` metrics against the metrics of a baseline run
/// directory, plus the cross-site average.
pub fn delta_m_between(
    run: &[(usize, String, f64)],
    baseline: &[(usize, String, f64)],
    site_names: &[String],
) -> Result<DeltaMReport> {
    use std::collections::BTreeMap;
    let mut run_by_site: BTreeMap<usize, MetricSet> = BTreeMap::new();
    for (site, metric, value) in run {
        let direction = metrics::direction_for(metric).ok_or_else(|| {
            Error::Input(format!("unknown metric {} has no direction", metric))
        })?;
        run_by_site
            .entry(*site)
            .or_default()
            .push(metric, *value, direction);
    }
    let mut base_by_site: BTreeMap<usize, MetricSet> = BTreeMap::new();
    for (site, metric, value) in baseline {
        let direction = metrics::direction_for(metric).ok_or_else(|| {
            Error::Input(format!("unknown metric {} has no direction", metric))
        })?;
        base_by_site
            .entry(*site)
            .or_default()
            .push(metric, *value, direction);
    }
    if run_by_site.keys().collect::<Vec<_>>() != base_by_site.keys().collect::<Vec<_>>() {
        return Err(Error::Input(format!(
            "run and baseline cover different sites: {:?} vs {:?}",
            run_by_site.keys().collect::<Vec<_>>(),
            base_by_site.keys().collect::<Vec<_>>()
        )));
    }
    let mut per_site = Vec::new();
    for (site, run_set) in &run_by_site {
        let base_set = &base_by_site[site];
        let dm = metrics::delta_m(run_set, base_set)?;
        per_site.push(SiteDelta {
            site: *site,
            name: site_names
                .get(*site)
                .cloned()
                .unwrap_or_else(|| format!("site{}", site)),
            delta_m: dm,
        });
    }
    if per_site.is_empty() {
        return Err(Error::Input("no metrics to compare".into()));
    }
    let average = per_site.iter().map(|d| d.delta_m).sum::<f64>() / per_site.len() as f64;
    Ok(DeltaMReport {
        baseline_run: String::new(),
        per_site,
        average,
    })
}

fn compare_runs_delta_m(
    run_metrics: &[(usize, String, f64)],
    baseline_dir: &Path,
    experiment: &Experiment,
) -> Result<DeltaMReport> {
    let baseline = read_final_metrics(baseline_dir)?;
    let names: Vec<String> = experiment.sites.iter().map(|s| s.name.clone()).collect();
    let mut report = delta_m_between(run_metrics, &baseline, &names)?;
    report.baseline_run = baseline_dir.display().to_string();
    Ok(report)
}

//! Scenario execution: train-once parameter sharing, a bounded worker
//! pool, per-scenario evaluation plus resource measurement, and report
//! assembly with Pareto flags.
//!
//! Determinism contract: scenarios are keyed by their position in the spec
//! list and every per-scenario computation is seed-deterministic, so the
//! assembled report (minus wall-clock timings, which never reach the JSON
//! form) is identical for any worker count.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use malloc_core::backbone::{train, ModelConfig, Parameters, TrainConfig};
use malloc_core::data::{split_temporal, training_prefix, Dataset, TemporalSplit};
use malloc_core::eval::evaluate;
use malloc_core::policy::CachePolicyConfig;
use malloc_core::resources::{measure, MeasureScenario};
use malloc_core::{Error, MacMeter};

use crate::config::BenchConfig;
use crate::pareto::{pareto_flags, ParetoPoint};
use crate::report::{BenchReport, MeanRow, ScenarioRow};

/// Upper bound (bytes) on any single scenario's projected cache
/// allocation; scenarios above it fail with a ceiling error.
pub const MEM_CEILING_ENV: &str = "MALLOC_BENCH_MEM_CEILING_BYTES";

pub fn mem_ceiling_from_env() -> Result<Option<u64>> {
    match std::env::var(MEM_CEILING_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(Some)
            .with_context(|| format!("parsing {MEM_CEILING_ENV}={v}")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(MEM_CEILING_ENV),
    }
}

/// One trainable/evaluable unit: a model shape, a cache policy, and the
/// seed that drives initialization, shuffling, frozen policy weights, and
/// measurement inputs.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub model: ModelConfig,
    pub policy: CachePolicyConfig,
    pub epochs: usize,
    pub seed: u64,
    pub batch: usize,
    pub lr: f64,
    pub batch_users: usize,
}

impl ScenarioSpec {
    pub fn id(&self) -> String {
        format!("{}_blocks{}_seed{}", self.policy.label(), self.model.n_blocks, self.seed)
    }
}

/// Training is policy-independent (always full-causal), so scenarios that
/// differ only in policy share one trained parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct TrainKey {
    d_model: usize,
    n_heads: usize,
    n_blocks: usize,
    max_seq_len: usize,
    n_items: usize,
    epochs: usize,
    lr_bits: u64,
    seed: u64,
    batch_users: usize,
}

impl TrainKey {
    fn of(spec: &ScenarioSpec) -> Self {
        Self {
            d_model: spec.model.d_model,
            n_heads: spec.model.n_heads,
            n_blocks: spec.model.n_blocks,
            max_seq_len: spec.model.max_seq_len,
            n_items: spec.model.n_items,
            epochs: spec.epochs,
            lr_bits: spec.lr.to_bits(),
            seed: spec.seed,
            batch_users: spec.batch_users,
        }
    }
}

/// Fills the model's item vocabulary from the dataset when the config
/// leaves it unset.
pub fn resolve_model(config_model: ModelConfig, dataset: &Dataset) -> Result<ModelConfig> {
    let mut model = config_model;
    if model.n_items == 0 {
        model.n_items = dataset.n_items().max(1);
    }
    if dataset.n_items() > model.n_items {
        bail!(
            "dataset has {} items but the model vocabulary is capped at {}",
            dataset.n_items(),
            model.n_items
        );
    }
    model.validate().map_err(|e| anyhow::anyhow!("model config: {e}"))?;
    Ok(model)
}

/// Expands a config into scenario specs: policy-major, then seed, matching
/// the config file's declaration order.
pub fn build_specs(config: &BenchConfig, model: ModelConfig) -> Vec<ScenarioSpec> {
    let mut specs = Vec::with_capacity(config.policies.len() * config.seeds.len());
    for policy in &config.policies {
        for &seed in &config.seeds {
            specs.push(ScenarioSpec {
                model,
                policy: policy.clone(),
                epochs: config.epochs,
                seed,
                batch: config.batch,
                lr: config.lr,
                batch_users: config.batch_users,
            });
        }
    }
    specs
}

/// Trains, evaluates, and measures every scenario over a bounded worker
/// pool, then attaches Pareto flags and per-(policy, depth) means.
pub fn run_benchmark(
    dataset: &Dataset,
    test_fraction: f64,
    specs: &[ScenarioSpec],
    workers: usize,
    ceiling_bytes: Option<u64>,
) -> Result<BenchReport> {
    if specs.is_empty() {
        bail!("no scenarios to run");
    }
    let split = split_temporal(dataset, test_fraction)
        .map_err(|e| anyhow::anyhow!("temporal split: {e}"))?;
    // Fitting sees only the training side; the held-out tail exists solely
    // for evaluation.
    let train_data = training_prefix(dataset, &split)
        .map_err(|e| anyhow::anyhow!("training view: {e}"))?;

    // Deduplicate training work in spec order.
    let mut keys: Vec<usize> = Vec::with_capacity(specs.len());
    let mut reps: Vec<usize> = Vec::new();
    let mut seen: HashMap<TrainKey, usize> = HashMap::new();
    for (i, spec) in specs.iter().enumerate() {
        let key = TrainKey::of(spec);
        let idx = *seen.entry(key).or_insert_with(|| {
            reps.push(i);
            reps.len() - 1
        });
        keys.push(idx);
    }

    let trained: Vec<std::result::Result<Parameters, Error>> =
        parallel_map(workers, reps.len(), |k| {
            let spec = &specs[reps[k]];
            let tc = TrainConfig {
                epochs: spec.epochs,
                lr: spec.lr,
                batch_users: spec.batch_users,
                seed: spec.seed,
            };
            train(&train_data, &spec.model, &tc)
        });

    let mut rows: Vec<ScenarioRow> = parallel_map(workers, specs.len(), |i| {
        run_scenario(dataset, &split, &specs[i], &trained[keys[i]], ceiling_bytes)
    });

    attach_pareto_flags(&mut rows);
    let means = mean_rows(&rows);
    Ok(BenchReport::new(rows, means))
}

/// One scenario per (policy, depth) at the first configured seed. Depth
/// failures (including training divergence) become rows, never aborts.
pub fn depth_sweep(
    dataset: &Dataset,
    config: &BenchConfig,
    depths: &[usize],
    workers: usize,
    ceiling_bytes: Option<u64>,
) -> Result<BenchReport> {
    if depths.is_empty() {
        bail!("no depths to sweep");
    }
    if depths.windows(2).any(|w| w[0] >= w[1]) {
        bail!("depths must be strictly ascending, got {depths:?}");
    }
    let base = resolve_model(config.model, dataset)?;
    let seed = config.seeds[0];
    let mut specs = Vec::new();
    for policy in &config.policies {
        for &depth in depths {
            specs.push(ScenarioSpec {
                model: ModelConfig { n_blocks: depth, ..base },
                policy: policy.clone(),
                epochs: config.epochs,
                seed,
                batch: config.batch,
                lr: config.lr,
                batch_users: config.batch_users,
            });
        }
    }
    run_benchmark(dataset, config.test_fraction, &specs, workers, ceiling_bytes)
}

/// Evaluates a single scenario against already-trained parameters (for
/// checkpoint-driven evaluation, where training happened in a prior run).
pub fn run_pretrained(
    dataset: &Dataset,
    test_fraction: f64,
    spec: &ScenarioSpec,
    params: &Parameters,
    ceiling_bytes: Option<u64>,
) -> Result<BenchReport> {
    let split = split_temporal(dataset, test_fraction)
        .map_err(|e| anyhow::anyhow!("temporal split: {e}"))?;
    let trained: std::result::Result<Parameters, Error> = Ok(params.clone());
    let mut rows = vec![run_scenario(dataset, &split, spec, &trained, ceiling_bytes)];
    attach_pareto_flags(&mut rows);
    let means = mean_rows(&rows);
    Ok(BenchReport::new(rows, means))
}

fn run_scenario(
    dataset: &Dataset,
    split: &TemporalSplit,
    spec: &ScenarioSpec,
    trained: &std::result::Result<Parameters, Error>,
    ceiling_bytes: Option<u64>,
) -> ScenarioRow {
    let started = Instant::now();
    let mut row = ScenarioRow {
        id: spec.id(),
        policy: spec.policy.label(),
        n_blocks: spec.model.n_blocks,
        seed: spec.seed,
        auc: None,
        gauc: None,
        logloss: None,
        resources: None,
        diverged: false,
        failure: None,
        pareto: false,
        wall_seconds: 0.0,
    };
    fill_scenario(dataset, split, spec, trained, ceiling_bytes, &mut row);
    row.wall_seconds = started.elapsed().as_secs_f64();
    row
}

fn fill_scenario(
    dataset: &Dataset,
    split: &TemporalSplit,
    spec: &ScenarioSpec,
    trained: &std::result::Result<Parameters, Error>,
    ceiling_bytes: Option<u64>,
    row: &mut ScenarioRow,
) {
    // Resource measurement is parameter-free; run it even when training
    // failed so diverged rows still carry the resource half of the story.
    match measure(&MeasureScenario {
        model: spec.model,
        policy: spec.policy.clone(),
        cached_len: spec.model.max_seq_len - 1,
        batch: spec.batch,
        seed: spec.seed,
        ceiling_bytes,
    }) {
        Ok(r) => row.resources = Some(r),
        Err(e) => {
            row.failure = Some(format!("resource measurement: {e}"));
            return;
        }
    }

    let params = match trained {
        Ok(p) => p,
        Err(Error::Diverged { epoch, step }) => {
            row.diverged = true;
            row.failure = Some(format!("training diverged at epoch {epoch}, step {step}"));
            return;
        }
        Err(e) => {
            row.failure = Some(format!("training: {e}"));
            return;
        }
    };

    let mut meter = MacMeter::new();
    match evaluate(dataset, split, params, &spec.model, &spec.policy, spec.seed, &mut meter) {
        Ok(report) => {
            row.auc = Some(report.auc);
            row.gauc = Some(report.gauc);
            row.logloss = Some(report.logloss);
        }
        Err(e) => row.failure = Some(format!("evaluation: {e}")),
    }
}

fn attach_pareto_flags(rows: &mut [ScenarioRow]) {
    let scored: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.gauc.is_some() && r.resources.is_some())
        .map(|(i, _)| i)
        .collect();
    let points: Vec<ParetoPoint> = scored
        .iter()
        .map(|&i| {
            let res = rows[i].resources.as_ref().unwrap();
            ParetoPoint {
                gauc: rows[i].gauc.unwrap(),
                macs: res.macs_measured,
                bytes: res.kv_peak_bytes,
            }
        })
        .collect();
    for (&i, flag) in scored.iter().zip(pareto_flags(&points)) {
        rows[i].pareto = flag;
    }
}

fn mean_rows(rows: &[ScenarioRow]) -> Vec<MeanRow> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: HashMap<(String, usize), Vec<&ScenarioRow>> = HashMap::new();
    for row in rows {
        let key = (row.policy.clone(), row.n_blocks);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key.clone());
                Vec::new()
            })
            .push(row);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let complete: Vec<&&ScenarioRow> = members
                .iter()
                .filter(|r| r.auc.is_some() && r.gauc.is_some() && r.logloss.is_some())
                .collect();
            let mean = |sel: fn(&ScenarioRow) -> Option<f64>| {
                if complete.is_empty() {
                    None
                } else {
                    Some(
                        complete.iter().map(|r| sel(r).unwrap()).sum::<f64>()
                            / complete.len() as f64,
                    )
                }
            };
            MeanRow {
                id: format!("{}_blocks{}_mean", key.0, key.1),
                policy: key.0.clone(),
                n_blocks: key.1,
                seeds_aggregated: complete.len(),
                auc: mean(|r| r.auc),
                gauc: mean(|r| r.gauc),
                logloss: mean(|r| r.logloss),
            }
        })
        .collect()
}

/// Runs `f(0..n)` over at most `workers` threads; results land in index
/// order, so the output is independent of scheduling.
fn parallel_map<T, F>(workers: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                *slots[i].lock().expect("result slot poisoned") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot poisoned").expect("worker skipped a slot"))
        .collect()
}

//! Evaluation: token-level F1, the per-task evaluation loop with
//! retrieval/latency accounting, error taxonomy, and the experiment
//! protocols (ablations, noise sweep, depth breakdown) with
//! machine-readable reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ModelParams;
use crate::reasoner::{answer_question, BeamConfig, InferenceFlags, SourceSet};
use crate::seed::subseed;
use crate::training::{train, TrainConfig, TrainError};
use crate::world::{
    self, generate_task_split, generate_world, inject_noise, NameTables, PerturbationLedger, Task,
    TaskId, WorldConfig, WorldSpec,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("world/corpus mismatch: {0}")]
    Configuration(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    World(#[from] world::WorldError),
    #[error(transparent)]
    Reasoner(#[from] crate::reasoner::ReasonerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Token-level F1
// ---------------------------------------------------------------------------

/// Lowercase, strip ASCII punctuation, drop tokens that end up empty.
pub fn normalize_tokens(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .flat_map(|t| {
            let cleaned: String = t
                .to_lowercase()
                .chars()
                .filter(|c| !c.is_ascii_punctuation())
                .collect();
            cleaned
                .split_whitespace()
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Multiset precision/recall F1 over tokens; 0 when either side is
/// empty or nothing overlaps.
pub fn token_f1(predicted: &[String], gold: &[String]) -> f64 {
    if predicted.is_empty() || gold.is_empty() {
        return 0.0;
    }
    fn count(toks: &[String]) -> BTreeMap<&str, usize> {
        let mut c: BTreeMap<&str, usize> = BTreeMap::new();
        for t in toks {
            *c.entry(t.as_str()).or_default() += 1;
        }
        c
    }
    let pc = count(predicted);
    let gc = count(gold);
    let overlap: usize = pc
        .iter()
        .map(|(t, n)| n.min(gc.get(t).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / predicted.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

// ---------------------------------------------------------------------------
// Evaluation loop
// ---------------------------------------------------------------------------

/// Table 2-style ablation switches; all false is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub disable_fusion: bool,
    pub greedy_only: bool,
    pub global_loss_only: bool,
}

impl AblationConfig {
    pub fn setting_name(&self) -> &'static str {
        match (self.disable_fusion, self.greedy_only, self.global_loss_only) {
            (false, false, false) => "full",
            (true, false, false) => "disable_fusion",
            (false, true, false) => "greedy_only",
            (false, false, true) => "global_loss_only",
            _ => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub hops: u8,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
    pub f1: f64,
    pub retrieval_calls: u64,
    pub snippets_fetched: u64,
    /// Independent recount of source invocations (audit trail length).
    pub audit_events: u64,
    pub abstained: bool,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_f1: Option<f64>,
    pub mean_f1_per_hop: BTreeMap<u8, f64>,
    pub mean_retrievals: Option<f64>,
    pub mean_latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub seed: u64,
    pub records: Vec<TaskRecord>,
    pub aggregates: Aggregates,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn recompute_aggregates(records: &[TaskRecord]) -> Aggregates {
    let mean_f1 = mean(records.iter().map(|r| r.f1));
    let mut per_hop: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for r in records {
        per_hop.entry(r.hops).or_default().push(r.f1);
    }
    let mean_f1_per_hop = per_hop
        .into_iter()
        .map(|(h, v)| (h, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Aggregates {
        mean_f1,
        mean_f1_per_hop,
        mean_retrievals: mean(records.iter().map(|r| r.retrieval_calls as f64)),
        mean_latency_ms: mean(records.iter().map(|r| r.latency_ms)),
    }
}

pub fn entity_tokens(world: &WorldSpec, id: world::EntityId) -> Vec<String> {
    world::text::tokenize(&world::text::render_name(world.entity_name(id)))
}

fn evaluate_one(
    world: &WorldSpec,
    tables: &NameTables,
    model: &ModelParams,
    sources: &SourceSet,
    task: &Task,
    beam: &BeamConfig,
    flags: InferenceFlags,
) -> Result<(TaskRecord, Vec<crate::reasoner::Trajectory>), EvalError> {
    let start = Instant::now();
    let run = answer_question(
        world,
        tables,
        model,
        sources,
        &task.question,
        Some(task.hops),
        beam.clone(),
        flags,
    )?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let (predicted, abstained) = match &run.answer {
        Some(dist) => (
            normalize_tokens(&entity_tokens(world, dist.argmax)),
            false,
        ),
        None => (Vec::new(), true),
    };
    let gold = normalize_tokens(&entity_tokens(world, task.gold_answer));
    let f1 = token_f1(&predicted, &gold);
    Ok((
        TaskRecord {
            task_id: task.id,
            hops: task.hops,
            predicted,
            gold,
            f1,
            retrieval_calls: run.budget.retrieval_calls,
            snippets_fetched: run.budget.snippets_fetched,
            audit_events: run.audit.len() as u64,
            abstained,
            latency_ms,
        },
        run.trajectories,
    ))
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub jobs: usize,
    pub dump_trajectories: Option<std::path::PathBuf>,
}

/// Evaluate a model over a task set. Predictions are deterministic in
/// (model, corpora, tasks); latency fields are not.
pub fn evaluate(
    world: &WorldSpec,
    model: &ModelParams,
    tasks: &[Task],
    sources: &SourceSet,
    beam: &BeamConfig,
    ablation: &AblationConfig,
    seed: u64,
    options: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if sources.corpora.len() != world.n_sources {
        return Err(EvalError::Configuration(format!(
            "world declares {} sources but {} corpora were supplied",
            world.n_sources,
            sources.corpora.len()
        )));
    }
    if model.vocab != crate::world::Vocab::build(world) {
        return Err(EvalError::Configuration(
            "model vocabulary does not match this world".into(),
        ));
    }
    let tables = NameTables::new(world);
    let mut beam = beam.clone();
    let mut flags = InferenceFlags {
        disable_fusion: ablation.disable_fusion,
        answer_from_best_only: false,
    };
    if ablation.greedy_only {
        beam.width = 1;
        flags.answer_from_best_only = true;
    }

    let mut outputs: Vec<(TaskRecord, Vec<crate::reasoner::Trajectory>)> =
        if options.jobs > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(options.jobs)
                .build()
                .map_err(|e| EvalError::Configuration(e.to_string()))?;
            pool.install(|| {
                tasks
                    .par_iter()
                    .map(|t| evaluate_one(world, &tables, model, sources, t, &beam, flags))
                    .collect::<Result<Vec<_>, _>>()
            })?
        } else {
            tasks
                .iter()
                .map(|t| evaluate_one(world, &tables, model, sources, t, &beam, flags))
                .collect::<Result<Vec<_>, _>>()?
        };
    outputs.sort_by_key(|(r, _)| r.task_id);

    if let Some(path) = &options.dump_trajectories {
        write_trajectory_dump(world, &outputs, path)?;
    }

    let records: Vec<TaskRecord> = outputs.into_iter().map(|(r, _)| r).collect();
    let aggregates = recompute_aggregates(&records);
    Ok(EvalReport {
        config: serde_json::json!({
            "beam": {
                "width": beam.width,
                "max_steps": beam.max_steps,
                "candidate_cap": beam.candidate_cap,
                "top_s": beam.top_s,
                "top_p": beam.top_p,
            },
            "ablation": ablation,
        }),
        seed,
        records,
        aggregates,
    })
}

fn write_trajectory_dump(
    world: &WorldSpec,
    outputs: &[(TaskRecord, Vec<crate::reasoner::Trajectory>)],
    path: &Path,
) -> Result<(), EvalError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (record, trajectories) in outputs {
        let dump = serde_json::json!({
            "task_id": record.task_id,
            "trajectories": trajectories.iter().map(|t| {
                serde_json::json!({
                    "log_joint": t.log_joint,
                    "complete": t.complete,
                    "steps": t.steps.iter().map(|s| serde_json::json!({
                        "head": world.entity_name(s.fact.head),
                        "relation": world.relation_name(s.fact.relation),
                        "tail": world.entity_name(s.fact.tail),
                        "probability": s.probability,
                        "origins": s.origins.iter().map(|o| o.tag()).collect::<Vec<_>>(),
                        "attention": s.fused.attention_weights,
                    })).collect::<Vec<_>>(),
                })
            }).collect::<Vec<_>>(),
        });
        serde_json::to_writer(&mut out, &dump)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Error taxonomy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub knowledge_omission: usize,
    pub knowledge_conflict: usize,
    pub reasoning_inaccuracy: usize,
    pub pct_omission: f64,
    pub pct_conflict: f64,
    pub pct_reasoning: f64,
}

/// Classify every incorrect task (f1 < 1) by priority: omission if any
/// gold fact lost its evidence everywhere, else conflict if a
/// contradicting snippet shares (head, relation) with a gold step, else
/// reasoning inaccuracy.
pub fn classify_errors(
    report: &EvalReport,
    tasks: &[Task],
    world: &WorldSpec,
    ledger: &PerturbationLedger,
) -> ErrorBreakdown {
    let by_id: BTreeMap<TaskId, &Task> = tasks.iter().map(|t| (t.id, t)).collect();
    let conflict_pairs: std::collections::BTreeSet<(world::EntityId, world::RelationId)> = ledger
        .conflicted_facts
        .iter()
        .map(|fid| {
            let f = world.fact(*fid);
            (f.head, f.relation)
        })
        .collect();
    let mut omission = 0;
    let mut conflict = 0;
    let mut reasoning = 0;
    for record in &report.records {
        if record.f1 >= 1.0 {
            continue;
        }
        let Some(task) = by_id.get(&record.task_id) else {
            continue;
        };
        let gold_omitted = task
            .gold_trajectory
            .iter()
            .any(|fid| ledger.omitted_facts.contains(fid));
        if gold_omitted {
            omission += 1;
            continue;
        }
        let gold_conflicted = task.gold_trajectory.iter().any(|fid| {
            let f = world.fact(*fid);
            conflict_pairs.contains(&(f.head, f.relation))
        });
        if gold_conflicted {
            conflict += 1;
        } else {
            reasoning += 1;
        }
    }
    let incorrect = omission + conflict + reasoning;
    let pct = |n: usize| {
        if incorrect == 0 {
            0.0
        } else {
            100.0 * n as f64 / incorrect as f64
        }
    };
    ErrorBreakdown {
        knowledge_omission: omission,
        knowledge_conflict: conflict,
        reasoning_inaccuracy: reasoning,
        pct_omission: pct(omission),
        pct_conflict: pct(conflict),
        pct_reasoning: pct(reasoning),
    }
}

/// Mean F1 per hop depth.
pub fn complexity_breakdown(report: &EvalReport) -> BTreeMap<u8, f64> {
    recompute_aggregates(&report.records).mean_f1_per_hop
}

// ---------------------------------------------------------------------------
// Experiment protocols
// ---------------------------------------------------------------------------

/// Shared setup for the trend protocols: one world per seed, task split
/// over disjoint chain halves, train on one half, evaluate on the other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub world: WorldConfig,
    pub train_mix: BTreeMap<u8, usize>,
    pub eval_mix: BTreeMap<u8, usize>,
    pub train: TrainConfig,
    pub beam: BeamConfigSerde,
    pub jobs: usize,
}

/// Serializable mirror of BeamConfig for config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfigSerde {
    pub width: usize,
    pub max_steps: usize,
    pub candidate_cap: usize,
    pub top_s: usize,
    pub top_p: usize,
}

impl Default for BeamConfigSerde {
    fn default() -> Self {
        let b = BeamConfig::default();
        Self {
            width: b.width,
            max_steps: b.max_steps,
            candidate_cap: b.candidate_cap,
            top_s: b.top_s,
            top_p: b.top_p,
        }
    }
}

impl From<&BeamConfigSerde> for BeamConfig {
    fn from(b: &BeamConfigSerde) -> Self {
        BeamConfig {
            width: b.width,
            max_steps: b.max_steps,
            candidate_cap: b.candidate_cap,
            top_s: b.top_s,
            top_p: b.top_p,
        }
    }
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train_mix: BTreeMap::from([(2u8, 50usize), (3, 30), (4, 20)]),
            eval_mix: BTreeMap::from([(2u8, 50usize), (3, 30), (4, 20)]),
            train: TrainConfig::default(),
            beam: BeamConfigSerde::default(),
            jobs: 1,
        }
    }
}

pub struct SeedEnvironment {
    pub world: WorldSpec,
    pub corpora: Vec<world::Corpus>,
    pub train_tasks: Vec<Task>,
    pub eval_tasks: Vec<Task>,
}

pub fn build_environment(cfg: &ProtocolConfig, seed: u64) -> Result<SeedEnvironment, EvalError> {
    let world = generate_world(&cfg.world, subseed(seed, "world"))?;
    let corpora = world::emit_all_corpora(&world)?;
    let (train_tasks, eval_tasks) =
        generate_task_split(&world, &cfg.train_mix, &cfg.eval_mix, subseed(seed, "tasks"))?;
    Ok(SeedEnvironment {
        world,
        corpora,
        train_tasks,
        eval_tasks,
    })
}

pub const ABLATION_SETTINGS: [AblationConfig; 4] = [
    AblationConfig {
        disable_fusion: false,
        greedy_only: false,
        global_loss_only: false,
    },
    AblationConfig {
        disable_fusion: true,
        greedy_only: false,
        global_loss_only: false,
    },
    AblationConfig {
        disable_fusion: false,
        greedy_only: true,
        global_loss_only: false,
    },
    AblationConfig {
        disable_fusion: false,
        greedy_only: false,
        global_loss_only: true,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub mean_f1: f64,
    pub per_hop: BTreeMap<u8, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub mean_by_setting: BTreeMap<String, f64>,
    /// Per-seed F1 deltas of each ablation against the full model.
    pub deltas_vs_full: Vec<(String, u64, f64)>,
}

/// Train and evaluate the full model plus each single-flag ablation on
/// an identical world/task split per seed.
pub fn run_ablation(cfg: &ProtocolConfig, seeds: &[u64]) -> Result<AblationReport, EvalError> {
    if seeds.is_empty() {
        return Err(EvalError::Configuration("at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let env = build_environment(cfg, seed)?;
        let sources = SourceSet::build(env.corpora.clone());
        for ablation in ABLATION_SETTINGS {
            let mut train_cfg = cfg.train.clone();
            train_cfg.disable_fusion = ablation.disable_fusion;
            train_cfg.global_loss_only = ablation.global_loss_only;
            let beam: BeamConfig = (&cfg.beam).into();
            let (model, _) = train(
                &env.world,
                &env.corpora,
                &env.train_tasks,
                &beam,
                &train_cfg,
                subseed(seed, "train"),
            )?;
            let report = evaluate(
                &env.world,
                &model,
                &env.eval_tasks,
                &sources,
                &beam,
                &ablation,
                seed,
                &EvalOptions {
                    jobs: cfg.jobs,
                    dump_trajectories: None,
                },
            )?;
            rows.push(AblationRow {
                setting: ablation.setting_name().to_string(),
                seed,
                mean_f1: report.aggregates.mean_f1.unwrap_or(0.0),
                per_hop: report.aggregates.mean_f1_per_hop.clone(),
            });
        }
    }
    let mut by_setting: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_setting.entry(r.setting.clone()).or_default().push(r.mean_f1);
    }
    let mean_by_setting: BTreeMap<String, f64> = by_setting
        .into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let mut deltas = Vec::new();
    for &seed in seeds {
        let full = rows
            .iter()
            .find(|r| r.seed == seed && r.setting == "full")
            .map(|r| r.mean_f1)
            .unwrap_or(0.0);
        for r in rows.iter().filter(|r| r.seed == seed && r.setting != "full") {
            deltas.push((r.setting.clone(), seed, full - r.mean_f1));
        }
    }
    Ok(AblationReport {
        rows,
        mean_by_setting,
        deltas_vs_full: deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub level: f64,
    pub seed: u64,
    pub mode: String,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub levels: Vec<f64>,
    pub rows: Vec<NoiseRow>,
}

/// Train the full model once per seed, then evaluate it against
/// noise-perturbed corpora at each level, in full and greedy-only
/// inference modes.
pub fn noise_sweep(
    cfg: &ProtocolConfig,
    levels: &[f64],
    seeds: &[u64],
) -> Result<NoiseReport, EvalError> {
    if seeds.is_empty() || levels.is_empty() {
        return Err(EvalError::Configuration("seeds and levels required".into()));
    }
    if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(EvalError::Configuration("noise level outside [0,1]".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let env = build_environment(cfg, seed)?;
        let beam: BeamConfig = (&cfg.beam).into();
        let (model, _) = train(
            &env.world,
            &env.corpora,
            &env.train_tasks,
            &beam,
            &cfg.train,
            subseed(seed, "train"),
        )?;
        for &level in levels {
            let perturbed: Vec<world::Corpus> = env
                .corpora
                .iter()
                .map(|c| inject_noise(c, level, subseed(seed, "noise")).0)
                .collect();
            let sources = SourceSet::build(perturbed);
            for mode in [
                AblationConfig::default(),
                AblationConfig {
                    greedy_only: true,
                    ..AblationConfig::default()
                },
            ] {
                let report = evaluate(
                    &env.world,
                    &model,
                    &env.eval_tasks,
                    &sources,
                    &beam,
                    &mode,
                    seed,
                    &EvalOptions {
                        jobs: cfg.jobs,
                        dump_trajectories: None,
                    },
                )?;
                rows.push(NoiseRow {
                    level,
                    seed,
                    mode: mode.setting_name().to_string(),
                    mean_f1: report.aggregates.mean_f1.unwrap_or(0.0),
                });
            }
        }
    }
    Ok(NoiseReport {
        levels: levels.to_vec(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Trend checks
// ---------------------------------------------------------------------------

fn majority(ok: usize, total: usize) -> bool {
    3 * ok >= 2 * total
}

/// Full model beats every ablation in at least 2/3 of seeds, and greedy
/// has the lowest cross-seed mean.
pub fn check_ablation_trends(report: &AblationReport, seeds: &[u64]) -> Result<(), Vec<String>> {
    let mut failures = Vec::new();
    let f1 = |setting: &str, seed: u64| {
        report
            .rows
            .iter()
            .find(|r| r.setting == setting && r.seed == seed)
            .map(|r| r.mean_f1)
            .unwrap_or(0.0)
    };
    for setting in ["disable_fusion", "greedy_only", "global_loss_only"] {
        let wins = seeds
            .iter()
            .filter(|&&s| f1("full", s) > f1(setting, s))
            .count();
        if !majority(wins, seeds.len()) {
            failures.push(format!(
                "full > {setting} in only {wins}/{} seeds",
                seeds.len()
            ));
        }
    }
    let greedy = report.mean_by_setting.get("greedy_only").copied().unwrap_or(0.0);
    for (setting, mean) in &report.mean_by_setting {
        if setting != "greedy_only" && *mean <= greedy {
            failures.push(format!(
                "greedy_only mean {greedy:.4} is not the lowest ({setting} = {mean:.4})"
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures)
    }
}

/// F1 non-increasing in noise level, and the full model degrades less
/// than greedy-only from the lowest to the highest level, each in at
/// least 2/3 of seeds.
pub fn check_noise_trends(report: &NoiseReport, seeds: &[u64]) -> Result<(), Vec<String>> {
    let mut failures = Vec::new();
    let f1 = |mode: &str, seed: u64, level: f64| {
        report
            .rows
            .iter()
            .find(|r| r.mode == mode && r.seed == seed && r.level == level)
            .map(|r| r.mean_f1)
            .unwrap_or(0.0)
    };
    let mut levels = report.levels.clone();
    levels.sort_by(f64::total_cmp);
    let lo = *levels.first().expect("non-empty levels");
    let hi = *levels.last().expect("non-empty levels");

    let monotone_ok = seeds
        .iter()
        .filter(|&&s| {
            levels
                .windows(2)
                .all(|w| f1("full", s, w[0]) >= f1("full", s, w[1]))
        })
        .count();
    if !majority(monotone_ok, seeds.len()) {
        failures.push(format!(
            "full-model F1 non-increasing in noise in only {monotone_ok}/{} seeds",
            seeds.len()
        ));
    }

    let degradation_ok = seeds
        .iter()
        .filter(|&&s| {
            let full_drop = f1("full", s, lo) - f1("full", s, hi);
            let greedy_drop = f1("greedy_only", s, lo) - f1("greedy_only", s, hi);
            full_drop < greedy_drop
        })
        .count();
    if !majority(degradation_ok, seeds.len()) {
        failures.push(format!(
            "full-model degradation smaller than greedy in only {degradation_ok}/{} seeds",
            seeds.len()
        ));
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures)
    }
}

/// Mean F1 falls (weakly) with depth, and the full-vs-greedy gap at
/// 4 hops is at least the 2-hop gap in 2/3 of seeds.
pub fn check_depth_trends(report: &AblationReport, seeds: &[u64]) -> Result<(), Vec<String>> {
    let mut failures = Vec::new();
    let hop_mean = |setting: &str, hop: u8| {
        let vals: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.setting == setting)
            .filter_map(|r| r.per_hop.get(&hop).copied())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let f2 = hop_mean("full", 2);
    let f3 = hop_mean("full", 3);
    let f4 = hop_mean("full", 4);
    if !(f2 >= f3 && f3 >= f4) {
        failures.push(format!(
            "mean F1 not monotone in depth: 2-hop {f2:.4}, 3-hop {f3:.4}, 4-hop {f4:.4}"
        ));
    }
    let gap_ok = seeds
        .iter()
        .filter(|&&s| {
            let gap = |hop: u8| {
                let get = |setting: &str| {
                    report
                        .rows
                        .iter()
                        .find(|r| r.setting == setting && r.seed == s)
                        .and_then(|r| r.per_hop.get(&hop).copied())
                        .unwrap_or(0.0)
                };
                get("full") - get("greedy_only")
            };
            gap(4) >= gap(2)
        })
        .count();
    if !majority(gap_ok, seeds.len()) {
        failures.push(format!(
            "full-greedy gap widens with depth in only {gap_ok}/{} seeds",
            seeds.len()
        ));
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures)
    }
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

/// Short stable hash of a config value, embedded in report file names.
pub fn config_hash(value: &serde_json::Value) -> String {
    let canonical = serde_json::to_vec(value).unwrap_or_default();
    let digest = Sha256::digest(&canonical);
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_report_json<T: Serialize>(report: &T, path: &Path) -> Result<(), EvalError> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Flat aggregate CSV next to the JSON report.
pub fn write_aggregates_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])
        ?;
    let agg = &report.aggregates;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "null".into());
    w.write_record(["mean_f1", &fmt(agg.mean_f1)])
        ?;
    for (hop, f1) in &agg.mean_f1_per_hop {
        w.write_record([format!("mean_f1_{hop}hop"), f1.to_string()])
            ?;
    }
    w.write_record(["mean_retrievals", &fmt(agg.mean_retrievals)])
        ?;
    w.write_record(["mean_latency_ms", &fmt(agg.mean_latency_ms)])
        ?;
    w.flush()?;
    Ok(())
}

/// Latency-free per-task predictions, byte-comparable across runs.
pub fn write_predictions_jsonl(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &report.records {
        let line = serde_json::json!({
            "task_id": r.task_id,
            "hops": r.hops,
            "predicted": r.predicted,
            "gold": r.gold,
            "f1": r.f1,
            "retrieval_calls": r.retrieval_calls,
            "abstained": r.abstained,
        });
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

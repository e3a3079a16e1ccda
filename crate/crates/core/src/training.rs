//! Multi-granular training: per-step and final-answer negative
//! log-likelihoods, hand-derived analytic gradients over every tensor,
//! plain SGD, and the teacher-forced training loop.
//!
//! Gradients are computed on a frozen forward trace: the discrete
//! candidate structure (which facts, which evidence) is fixed while
//! parameters vary, so the loss is smooth in the parameters and central
//! finite differences agree with the analytic gradients. There is no
//! gradient through beam pruning; the global loss is evaluated on the
//! gold trajectory's terminal state during training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{softmax_slice, Matrix, Vector};
use crate::model::ModelParams;
use crate::reasoner::{
    answer_question, BeamConfig, FactKey, InferenceFlags, QuestionContext, SourceSet,
};
use crate::seed::{subseed, subseed_indexed};
use crate::sources::SnippetRef;
use crate::world::{Corpus, NameTables, Source, Task, WorldSpec};

pub const GLOBAL_PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("gold step missing from candidate set at step {step}")]
    GoldCoverage { step: usize },
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid training setup: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Reasoner(#[from] crate::reasoner::ReasonerError),
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
}

/// Weights of the two loss granularities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_local: f64,
    pub lambda_global: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_local: 1.0,
            lambda_global: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda_local < 0.0 || self.lambda_global < 0.0 {
            return Err(TrainError::InvalidConfig("negative loss weight".into()));
        }
        if self.lambda_local == 0.0 && self.lambda_global == 0.0 {
            return Err(TrainError::InvalidConfig(
                "lambda_local and lambda_global cannot both be zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub local: f64,
    pub global: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// total is exactly the weighted sum, computed once here so the
    /// identity holds bit-for-bit on every logged value.
    pub fn compose(local: f64, global: f64, cfg: &LossConfig) -> Self {
        Self {
            local,
            global,
            total: cfg.lambda_local * local + cfg.lambda_global * global,
        }
    }
}

/// Mean negative log probability of the gold candidate at each step.
/// `step_distributions` holds (fact, probability) pairs per step.
pub fn local_loss(
    step_distributions: &[Vec<(FactKey, f64)>],
    gold_steps: &[FactKey],
) -> Result<f64, TrainError> {
    assert!(!gold_steps.is_empty(), "local loss needs at least one step");
    let mut sum = 0.0;
    for (i, (dist, gold)) in step_distributions.iter().zip(gold_steps).enumerate() {
        let p = dist
            .iter()
            .find(|(k, _)| k == gold)
            .map(|(_, p)| *p)
            .ok_or(TrainError::GoldCoverage { step: i })?;
        sum -= p.ln();
    }
    Ok(sum / gold_steps.len() as f64)
}

/// Negative log probability of the gold answer, floored at 1e-12.
/// The bool reports whether the floor fired.
pub fn global_loss(probabilities: &[f64], gold: usize) -> (f64, bool) {
    let p = probabilities[gold];
    if p < GLOBAL_PROBABILITY_FLOOR {
        (-GLOBAL_PROBABILITY_FLOOR.ln(), true)
    } else {
        (-p.ln(), false)
    }
}

pub fn total_loss(local: f64, global: f64, cfg: &LossConfig) -> LossBreakdown {
    LossBreakdown::compose(local, global, cfg)
}

// ---------------------------------------------------------------------------
// Teacher-forced traces
// ---------------------------------------------------------------------------

/// Symbolic evidence reference, resolvable against any parameter values.
#[derive(Debug, Clone, PartialEq)]
pub enum SupportSym {
    TokenMean(Vec<usize>),
    Bilinear { relation: usize, entity: usize },
}

#[derive(Debug, Clone)]
pub struct TraceCandidate {
    pub fact: FactKey,
    pub supports: Vec<SupportSym>,
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub frontier: usize,
    pub candidates: Vec<TraceCandidate>,
    pub gold: usize,
}

/// Frozen forward structure for one task: everything discrete is
/// pinned, everything numeric is recomputed from parameters.
#[derive(Debug, Clone)]
pub struct TeacherTrace {
    pub question_rows: Vec<usize>,
    pub steps: Vec<TraceStep>,
    pub terminal_frontier: usize,
    pub gold_answer: usize,
    pub injected_gold_steps: usize,
    pub disable_fusion: bool,
}

fn support_sym(snippet: &SnippetRef, sources: &SourceSet, model: &ModelParams) -> SupportSym {
    match snippet {
        SnippetRef::Corpus { source, snippet } => {
            let tokens = &sources.corpora[*source as usize].snippet(*snippet).tokens;
            SupportSym::TokenMean(model.vocab.rows(tokens))
        }
        SnippetRef::Parametric { relation, entity } => SupportSym::Bilinear {
            relation: relation.index(),
            entity: entity.index(),
        },
    }
}

/// Synthesized evidence for a gold fact that retrieval missed.
fn gold_support(fact_id: crate::world::FactId, world: &WorldSpec, model: &ModelParams) -> SupportSym {
    let fact = world.fact(fact_id);
    match fact.source_tag {
        Source::Parametric => SupportSym::Bilinear {
            relation: fact.relation.index(),
            entity: fact.tail.index(),
        },
        Source::Corpus(_) => {
            let tokens = crate::world::text::fact_tokens(
                world.relation_name(fact.relation),
                world.entity_name(fact.head),
                world.entity_name(fact.tail),
            );
            SupportSym::TokenMean(model.vocab.rows(&tokens))
        }
    }
}

/// Run candidate generation along the gold trajectory and freeze the
/// result. Gold steps missing from the organic candidate set are
/// injected (and counted).
pub fn build_trace(
    world: &WorldSpec,
    tables: &NameTables,
    model: &ModelParams,
    sources: &SourceSet,
    task: &Task,
    beam: &BeamConfig,
    disable_fusion: bool,
) -> Result<TeacherTrace, TrainError> {
    let flags = InferenceFlags {
        disable_fusion,
        answer_from_best_only: false,
    };
    let mut ctx = QuestionContext::new(
        world,
        tables,
        model,
        sources,
        &task.question,
        beam.clone(),
        flags,
    )?;
    let mut steps = Vec::with_capacity(task.gold_trajectory.len());
    let mut injected = 0;
    for (depth, &fact_id) in task.gold_trajectory.iter().enumerate() {
        let fact = world.fact(fact_id);
        let gold_key = FactKey {
            head: fact.head,
            relation: fact.relation,
            tail: fact.tail,
        };
        let organic = ctx.propose_candidates(depth, fact.head)?;
        let mut candidates: Vec<TraceCandidate> = organic
            .into_iter()
            .map(|c| TraceCandidate {
                fact: c.fact,
                supports: c
                    .supports
                    .iter()
                    .map(|(r, _)| support_sym(r, sources, model))
                    .collect(),
            })
            .collect();
        let gold = match candidates.iter().position(|c| c.fact == gold_key) {
            Some(i) => i,
            None => {
                candidates.push(TraceCandidate {
                    fact: gold_key,
                    supports: vec![gold_support(fact_id, world, model)],
                });
                injected += 1;
                candidates.len() - 1
            }
        };
        steps.push(TraceStep {
            frontier: fact.head.index(),
            candidates,
            gold,
        });
    }
    let last = world.fact(*task.gold_trajectory.last().expect("non-empty trajectory"));
    Ok(TeacherTrace {
        question_rows: model.vocab.rows(&task.question),
        steps,
        terminal_frontier: last.tail.index(),
        gold_answer: task.gold_answer.index(),
        injected_gold_steps: injected,
        disable_fusion,
    })
}

// ---------------------------------------------------------------------------
// Forward / backward over a trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Gradients {
    pub token_embeddings: Matrix,
    pub entity_embeddings: Matrix,
    pub relation_maps: Vec<Matrix>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub scorer_weight: Matrix,
    pub scorer_bias: Vector,
    pub answer_projection: Matrix,
}

impl Gradients {
    pub fn zeros_like(model: &ModelParams) -> Self {
        let d = model.d;
        Self {
            token_embeddings: Matrix::zeros(model.token_embeddings.rows(), d),
            entity_embeddings: Matrix::zeros(model.parametric.entity_embeddings.rows(), d),
            relation_maps: model
                .parametric
                .relation_maps
                .iter()
                .map(|_| Matrix::zeros(d, d))
                .collect(),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            scorer_weight: Matrix::zeros(d, d),
            scorer_bias: Vector::zeros(d),
            answer_projection: Matrix::zeros(d, d),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> =
            vec![("token_embeddings".into(), self.token_embeddings.data())];
        out.push(("entity_embeddings".into(), self.entity_embeddings.data()));
        for (i, m) in self.relation_maps.iter().enumerate() {
            out.push((format!("relation_map_{i}"), m.data()));
        }
        out.push(("w_q".into(), self.w_q.data()));
        out.push(("w_k".into(), self.w_k.data()));
        out.push(("w_v".into(), self.w_v.data()));
        out.push(("scorer_weight".into(), self.scorer_weight.data()));
        out.push(("scorer_bias".into(), self.scorer_bias.data()));
        out.push(("answer_projection".into(), self.answer_projection.data()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![(
            "token_embeddings".into(),
            self.token_embeddings.as_mut_slice(),
        )];
        out.push((
            "entity_embeddings".into(),
            self.entity_embeddings.as_mut_slice(),
        ));
        for (i, m) in self.relation_maps.iter_mut().enumerate() {
            out.push((format!("relation_map_{i}"), m.as_mut_slice()));
        }
        out.push(("w_q".into(), self.w_q.as_mut_slice()));
        out.push(("w_k".into(), self.w_k.as_mut_slice()));
        out.push(("w_v".into(), self.w_v.as_mut_slice()));
        out.push(("scorer_weight".into(), self.scorer_weight.as_mut_slice()));
        out.push(("scorer_bias".into(), self.scorer_bias.as_mut_slice()));
        out.push((
            "answer_projection".into(),
            self.answer_projection.as_mut_slice(),
        ));
        out
    }

    pub fn add(&mut self, other: &Gradients) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, dst) in self.tensors_mut() {
            for d in dst {
                *d *= c;
            }
        }
    }

    pub fn check_finite(&self) -> Result<(), TrainError> {
        for (name, data) in self.tensors() {
            if data.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient { tensor: name });
            }
        }
        Ok(())
    }
}

/// θ ← θ − lr · g for every tensor.
pub fn sgd_step(model: &mut ModelParams, grads: &Gradients, lr: f64) {
    for ((_, dst), (_, g)) in model.tensors_mut().into_iter().zip(grads.tensors()) {
        for (d, gv) in dst.iter_mut().zip(g) {
            *d -= lr * gv;
        }
    }
}

fn eval_support(model: &ModelParams, sym: &SupportSym) -> Vector {
    match sym {
        SupportSym::TokenMean(rows) => model.mean_token_rows(rows),
        SupportSym::Bilinear { relation, entity } => model.parametric.support_embedding(
            crate::world::RelationId(*relation as u32),
            crate::world::EntityId(*entity as u32),
        ),
    }
}

fn support_backward(model: &ModelParams, sym: &SupportSym, dx: &Vector, grads: &mut Gradients) {
    match sym {
        SupportSym::TokenMean(rows) => {
            if rows.is_empty() {
                grads.token_embeddings.add_row(0, 1.0, dx.data());
            } else {
                let scale = 1.0 / rows.len() as f64;
                for &r in rows {
                    grads.token_embeddings.add_row(r, scale, dx.data());
                }
            }
        }
        SupportSym::Bilinear { relation, entity } => {
            // u = c·v/‖v‖ with v = M_r E_e.
            let e = model.parametric.entity_embeddings.row_vector(*entity);
            let map = &model.parametric.relation_maps[*relation];
            let v = map.matvec(&e).expect("square relation map");
            let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return;
            }
            let c = crate::sources::PARAMETRIC_SUPPORT_NORM;
            let vdx = v.dot(dx).expect("dims");
            let mut dv = Vector::zeros(dx.dim());
            for i in 0..dx.dim() {
                dv.as_mut_slice()[i] = c
                    * (dx.data()[i] / norm - v.data()[i] * vdx / (norm * norm * norm));
            }
            grads.relation_maps[*relation].add_outer(1.0, dv.data(), e.data());
            let back = map.matvec_transposed(&dv).expect("square relation map");
            grads.entity_embeddings.add_row(*entity, 1.0, back.data());
        }
    }
}

struct AttnForward {
    rows: Vec<Vector>,
    q: Vector,
    keys: Vec<Vector>,
    values: Vec<Vector>,
    alpha: Vec<f64>,
    h: Vector,
    disabled: bool,
}

fn attn_forward(model: &ModelParams, h_param: &Vector, supports: &[Vector], disabled: bool) -> AttnForward {
    let f = &model.fusion;
    if disabled {
        let h = f.w_v.matvec(h_param).expect("square w_v");
        return AttnForward {
            rows: vec![h_param.clone()],
            q: Vector::zeros(model.d),
            keys: Vec::new(),
            values: Vec::new(),
            alpha: vec![1.0],
            h,
            disabled,
        };
    }
    let mut rows = Vec::with_capacity(1 + supports.len());
    rows.push(h_param.clone());
    rows.extend(supports.iter().cloned());
    let q = f.w_q.matvec(h_param).expect("square w_q");
    let keys: Vec<Vector> = rows.iter().map(|r| f.w_k.matvec(r).unwrap()).collect();
    let values: Vec<Vector> = rows.iter().map(|r| f.w_v.matvec(r).unwrap()).collect();
    let scale = 1.0 / (model.d as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.dot(k).expect("dims") * scale)
        .collect();
    let alpha = softmax_slice(&scores);
    let mut h = vec![0.0; model.d];
    for (a, v) in alpha.iter().zip(&values) {
        for (acc, x) in h.iter_mut().zip(v.data()) {
            *acc += a * x;
        }
    }
    AttnForward {
        rows,
        q,
        keys,
        values,
        alpha,
        h: Vector::new(h).expect("finite"),
        disabled,
    }
}

/// Backpropagate dL/dh through the attention block; returns dL/d(row_i)
/// for every input row (row 0 is the state).
fn attn_backward(
    model: &ModelParams,
    fwd: &AttnForward,
    dh: &Vector,
    grads: &mut Gradients,
) -> Vec<Vector> {
    let f = &model.fusion;
    if fwd.disabled {
        grads.w_v.add_outer(1.0, dh.data(), fwd.rows[0].data());
        let dx0 = f.w_v.matvec_transposed(dh).expect("square w_v");
        return vec![dx0];
    }
    let n = fwd.rows.len();
    let scale = 1.0 / (model.d as f64).sqrt();
    let mut dx: Vec<Vector> = (0..n).map(|_| Vector::zeros(model.d)).collect();

    // h = Σ α_i V_i
    let dalpha: Vec<f64> = fwd.values.iter().map(|v| dh.dot(v).unwrap()).collect();
    let adot: f64 = fwd.alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
    let dscores: Vec<f64> = fwd
        .alpha
        .iter()
        .zip(&dalpha)
        .map(|(a, da)| a * (da - adot))
        .collect();

    let mut dq = Vector::zeros(model.d);
    for i in 0..n {
        // Value path.
        let dv = dh.scaled(fwd.alpha[i]);
        grads.w_v.add_outer(1.0, dv.data(), fwd.rows[i].data());
        let back_v = f.w_v.matvec_transposed(&dv).unwrap();
        dx[i] = dx[i].add(&back_v).unwrap();
        // Key path.
        let dk = fwd.q.scaled(dscores[i] * scale);
        grads.w_k.add_outer(1.0, dk.data(), fwd.rows[i].data());
        let back_k = f.w_k.matvec_transposed(&dk).unwrap();
        dx[i] = dx[i].add(&back_k).unwrap();
        // Query accumulation.
        for (acc, kx) in dq.as_mut_slice().iter_mut().zip(fwd.keys[i].data()) {
            *acc += dscores[i] * scale * kx;
        }
    }
    grads.w_q.add_outer(1.0, dq.data(), fwd.rows[0].data());
    let back_q = f.w_q.matvec_transposed(&dq).unwrap();
    dx[0] = dx[0].add(&back_q).unwrap();
    dx
}

/// dL/dlogits of -ln softmax(logits)[gold]: softmax(logits) - onehot.
pub(crate) fn softmax_ce_grad(logits: &[f64], gold: usize) -> Vec<f64> {
    let mut g = softmax_slice(logits);
    g[gold] -= 1.0;
    g
}

pub struct ForwardOutcome {
    pub loss: LossBreakdown,
    pub step_distributions: Vec<Vec<(FactKey, f64)>>,
    pub answer_probabilities: Vec<f64>,
    pub global_floored: bool,
}

fn state_embedding(model: &ModelParams, question_rows: &[usize], frontier: usize) -> Vector {
    let q = model.mean_token_rows(question_rows);
    let e = model.parametric.entity_embeddings.row_vector(frontier);
    q.add(&e).expect("dims").scaled(0.5)
}

/// Loss of a frozen trace under the given parameters. Smooth in the
/// parameters; this is what the finite-difference check perturbs.
pub fn loss_forward(
    model: &ModelParams,
    trace: &TeacherTrace,
    cfg: &LossConfig,
) -> Result<ForwardOutcome, TrainError> {
    let mut step_distributions = Vec::with_capacity(trace.steps.len());
    let mut local_sum = 0.0;
    for step in &trace.steps {
        let h_param = state_embedding(model, &trace.question_rows, step.frontier);
        let logits: Vec<f64> = step
            .candidates
            .iter()
            .map(|c| {
                let supports: Vec<Vector> =
                    c.supports.iter().map(|s| eval_support(model, s)).collect();
                let fwd = attn_forward(model, &h_param, &supports, trace.disable_fusion);
                model.scorer.logit(&fwd.h).expect("dims")
            })
            .collect();
        let probs = softmax_slice(&logits);
        local_sum -= probs[step.gold].ln();
        step_distributions.push(
            step.candidates
                .iter()
                .zip(&probs)
                .map(|(c, p)| (c.fact, *p))
                .collect(),
        );
    }
    let local = local_sum / trace.steps.len().max(1) as f64;

    // Terminal state: the endpoint's own representation through the
    // empty-context fusion case.
    let h_param = model
        .parametric
        .entity_embeddings
        .row_vector(trace.terminal_frontier);
    let terminal = attn_forward(model, &h_param, &[], true);
    let projected = model.answer_projection.matvec(&terminal.h).expect("dims");
    let logits = model
        .parametric
        .entity_embeddings
        .matvec(&projected)
        .expect("dims");
    let answer_probabilities = softmax_slice(logits.data());
    let (global, global_floored) = global_loss(&answer_probabilities, trace.gold_answer);

    Ok(ForwardOutcome {
        loss: LossBreakdown::compose(local, global, cfg),
        step_distributions,
        answer_probabilities,
        global_floored,
    })
}

/// Forward plus hand-derived analytic gradients of the total loss with
/// respect to every tensor.
pub fn backward(
    model: &ModelParams,
    trace: &TeacherTrace,
    cfg: &LossConfig,
) -> Result<(ForwardOutcome, Gradients), TrainError> {
    let mut grads = Gradients::zeros_like(model);
    let q_mean = model.mean_token_rows(&trace.question_rows);
    let q_scale = if trace.question_rows.is_empty() {
        0.0
    } else {
        1.0 / trace.question_rows.len() as f64
    };
    // Gradient flowing into the mean question embedding, distributed to
    // its token rows at the end.
    let mut dq_mean = Vector::zeros(model.d);

    let mut step_distributions = Vec::with_capacity(trace.steps.len());
    let mut local_sum = 0.0;
    let m = trace.steps.len().max(1) as f64;
    let local_scale = cfg.lambda_local / m;

    for step in &trace.steps {
        let h_param = state_embedding(model, &trace.question_rows, step.frontier);
        let forwards: Vec<(AttnForward, Vec<Vector>)> = step
            .candidates
            .iter()
            .map(|c| {
                let supports: Vec<Vector> =
                    c.supports.iter().map(|s| eval_support(model, s)).collect();
                let fwd = attn_forward(model, &h_param, &supports, trace.disable_fusion);
                (fwd, supports)
            })
            .collect();
        let logits: Vec<f64> = forwards
            .iter()
            .map(|(fwd, _)| model.scorer.logit(&fwd.h).expect("dims"))
            .collect();
        let probs = softmax_slice(&logits);
        local_sum -= probs[step.gold].ln();
        step_distributions.push(
            step.candidates
                .iter()
                .zip(&probs)
                .map(|(c, p)| (c.fact, *p))
                .collect(),
        );

        let dlogits = softmax_ce_grad(&logits, step.gold);
        let mut dh_param = Vector::zeros(model.d);
        for ((fwd, _), (candidate, dlogit_raw)) in forwards
            .iter()
            .zip(step.candidates.iter().zip(&dlogits))
        {
            let dlogit = local_scale * dlogit_raw;
            if dlogit == 0.0 {
                continue;
            }
            // logit = (W h + b) · h
            let h = &fwd.h;
            grads
                .scorer_weight
                .add_outer(dlogit, h.data(), h.data());
            grads.scorer_bias = grads.scorer_bias.add(&h.scaled(dlogit)).unwrap();
            let wh = model.scorer.weight.matvec(h).unwrap();
            let wth = model.scorer.weight.matvec_transposed(h).unwrap();
            let mut dh = Vector::zeros(model.d);
            for i in 0..model.d {
                dh.as_mut_slice()[i] = dlogit
                    * (wh.data()[i] + wth.data()[i] + model.scorer.bias.data()[i]);
            }
            let dx = attn_backward(model, fwd, &dh, &mut grads);
            dh_param = dh_param.add(&dx[0]).unwrap();
            for (sym, dxs) in candidate.supports.iter().zip(&dx[1..]) {
                support_backward(model, sym, dxs, &mut grads);
            }
        }
        // h_param = 0.5 (q_mean + E_frontier)
        let half = dh_param.scaled(0.5);
        dq_mean = dq_mean.add(&half).unwrap();
        grads
            .entity_embeddings
            .add_row(step.frontier, 1.0, half.data());
    }
    let local = local_sum / m;

    // Terminal state and answer head.
    let h_param = model
        .parametric
        .entity_embeddings
        .row_vector(trace.terminal_frontier);
    let terminal = attn_forward(model, &h_param, &[], true);
    let projected = model.answer_projection.matvec(&terminal.h).unwrap();
    let logits = model
        .parametric
        .entity_embeddings
        .matvec(&projected)
        .unwrap();
    let answer_probabilities = softmax_slice(logits.data());
    let (global, global_floored) = global_loss(&answer_probabilities, trace.gold_answer);

    if cfg.lambda_global != 0.0 && !global_floored {
        let mut dz = softmax_ce_grad(logits.data(), trace.gold_answer);
        for v in &mut dz {
            *v *= cfg.lambda_global;
        }
        let dz = Vector::new(dz).expect("finite");
        // z = E · (A h): dE_e += dz_e * projected; dproj = Eᵀ dz
        for (e, dze) in dz.data().iter().enumerate() {
            if *dze != 0.0 {
                grads
                    .entity_embeddings
                    .add_row(e, *dze, projected.data());
            }
        }
        let dproj = model
            .parametric
            .entity_embeddings
            .matvec_transposed(&dz)
            .unwrap();
        grads
            .answer_projection
            .add_outer(1.0, dproj.data(), terminal.h.data());
        let dh = model.answer_projection.matvec_transposed(&dproj).unwrap();
        let dx = attn_backward(model, &terminal, &dh, &mut grads);
        grads
            .entity_embeddings
            .add_row(trace.terminal_frontier, 1.0, dx[0].data());
    }

    // Question tokens appear in every h_param.
    if q_scale > 0.0 {
        for &row in &trace.question_rows {
            grads
                .token_embeddings
                .add_row(row, q_scale, dq_mean.data());
        }
    } else if dq_mean.data().iter().any(|x| *x != 0.0) {
        grads.token_embeddings.add_row(0, 1.0, dq_mean.data());
    }

    grads.check_finite()?;
    let _ = q_mean;
    Ok((
        ForwardOutcome {
            loss: LossBreakdown::compose(local, global, cfg),
            step_distributions,
            answer_probabilities,
            global_floored,
        },
        grads,
    ))
}

// ---------------------------------------------------------------------------
// Parametric memorization
// ---------------------------------------------------------------------------

/// Fit the bilinear store on the parametric-tagged facts: full-batch
/// gradient steps on -ln softmax_e(E_hᵀ M_r E_e)[tail]. Returns the
/// per-epoch mean loss.
pub fn memorize_parametric(
    model: &mut ModelParams,
    world: &WorldSpec,
    epochs: usize,
    lr: f64,
) -> Vec<f64> {
    let facts: Vec<&crate::world::Fact> = world
        .facts
        .iter()
        .filter(|f| f.source_tag == Source::Parametric)
        .collect();
    if facts.is_empty() {
        return Vec::new();
    }
    let n = facts.len() as f64;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut d_entity = Matrix::zeros(model.parametric.entity_embeddings.rows(), model.d);
        let mut d_maps: Vec<Matrix> = model
            .parametric
            .relation_maps
            .iter()
            .map(|_| Matrix::zeros(model.d, model.d))
            .collect();
        let mut loss = 0.0;
        for fact in &facts {
            let h = model.parametric.entity(fact.head);
            let map = &model.parametric.relation_maps[fact.relation.index()];
            let v = map.matvec_transposed(&h).unwrap();
            let scores = model.parametric.entity_embeddings.matvec(&v).unwrap();
            let probs = softmax_slice(scores.data());
            loss -= probs[fact.tail.index()].ln();
            let ds = {
                let mut ds = probs;
                ds[fact.tail.index()] -= 1.0;
                Vector::new(ds).expect("finite")
            };
            // score_e = E_hᵀ M_r E_e
            for (e, dse) in ds.data().iter().enumerate() {
                if *dse != 0.0 {
                    d_entity.add_row(e, *dse, v.data());
                }
            }
            let w = model
                .parametric
                .entity_embeddings
                .matvec_transposed(&ds)
                .unwrap();
            d_maps[fact.relation.index()].add_outer(1.0, h.data(), w.data());
            let dh = model.parametric.relation_maps[fact.relation.index()]
                .matvec(&w)
                .unwrap();
            d_entity.add_row(fact.head.index(), 1.0, dh.data());
        }
        let scale = lr / n;
        let dst = model.parametric.entity_embeddings.as_mut_slice();
        for (d, g) in dst.iter_mut().zip(d_entity.data()) {
            *d -= scale * g;
        }
        for (map, g) in model.parametric.relation_maps.iter_mut().zip(&d_maps) {
            for (d, gv) in map.as_mut_slice().iter_mut().zip(g.data()) {
                *d -= scale * gv;
            }
        }
        losses.push(loss / n);
    }
    losses
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub memorization_epochs: usize,
    pub memorization_lr: f64,
    /// Fraction of the task list held out for the per-epoch val_f1
    /// column; 0 validates on the training tasks themselves.
    pub val_fraction: f64,
    pub disable_fusion: bool,
    pub global_loss_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            epochs: 30,
            lr: 0.2,
            batch_size: 1,
            loss: LossConfig::default(),
            memorization_epochs: 150,
            memorization_lr: 2.0,
            val_fraction: 0.0,
            disable_fusion: false,
            global_loss_only: false,
        }
    }
}

impl TrainConfig {
    pub fn effective_loss(&self) -> LossConfig {
        if self.global_loss_only {
            LossConfig {
                lambda_local: 0.0,
                lambda_global: self.loss.lambda_global,
            }
        } else {
            self.loss
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss_local: f64,
    pub loss_global: f64,
    pub loss_total: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub injected_gold_steps: u64,
    pub floored_global_losses: u64,
    pub skipped_tasks: u64,
}

impl TrainLog {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), std::io::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss_local", "loss_global", "loss_total", "val_f1"])
            .map_err(std::io::Error::other)?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.loss_local.to_string(),
                r.loss_global.to_string(),
                r.loss_total.to_string(),
                r.val_f1.to_string(),
            ])
            .map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn quick_f1(
    world: &WorldSpec,
    tables: &NameTables,
    model: &ModelParams,
    sources: &SourceSet,
    tasks: &[Task],
    beam: &BeamConfig,
    flags: InferenceFlags,
) -> f64 {
    if tasks.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for task in tasks {
        let run = answer_question(
            world,
            tables,
            model,
            sources,
            &task.question,
            Some(task.hops),
            beam.clone(),
            flags,
        );
        let predicted: Vec<String> = match run {
            Ok(r) => r
                .answer
                .map(|a| {
                    crate::world::text::tokenize(&crate::world::text::render_name(
                        world.entity_name(a.argmax),
                    ))
                })
                .unwrap_or_default(),
            Err(_) => Vec::new(),
        };
        let gold = crate::world::text::tokenize(&crate::world::text::render_name(
            world.entity_name(task.gold_answer),
        ));
        sum += crate::eval::token_f1(&predicted, &gold);
    }
    sum / tasks.len() as f64
}

/// Teacher-forced SGD over the task set. Deterministic in (inputs,
/// seed); returns the trained parameters and the per-epoch log.
pub fn train(
    world: &WorldSpec,
    corpora: &[Corpus],
    tasks: &[Task],
    beam: &BeamConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainLog), TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::InvalidConfig("no training tasks".into()));
    }
    cfg.effective_loss().validate()?;
    let mut model = ModelParams::init(world, cfg.d, seed);
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok((model, log));
    }

    let tables = NameTables::new(world);
    let sources = SourceSet::build(corpora.to_vec());
    memorize_parametric(
        &mut model,
        world,
        cfg.memorization_epochs,
        cfg.memorization_lr,
    );

    // Validation carve-out.
    let mut indices: Vec<usize> = (0..tasks.len()).collect();
    let n_val = crate::world::round_half_up(cfg.val_fraction * tasks.len() as f64);
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if n_val > 0 && n_val < tasks.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "val-split"));
        indices.shuffle(&mut rng);
        let val = indices[..n_val].to_vec();
        let mut tr = indices[n_val..].to_vec();
        tr.sort_unstable();
        (tr, val)
    } else {
        (indices.clone(), indices)
    };
    let val_tasks: Vec<Task> = val_idx.iter().map(|&i| tasks[i].clone()).collect();

    let loss_cfg = cfg.effective_loss();
    let flags = InferenceFlags {
        disable_fusion: cfg.disable_fusion,
        answer_from_best_only: false,
    };

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(subseed_indexed(seed, "epoch-order", epoch as u64));
        order.shuffle(&mut rng);

        let mut local_sum = 0.0;
        let mut global_sum = 0.0;
        let mut counted = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut batch_grads = Gradients::zeros_like(&model);
            let mut used = 0usize;
            for &ti in batch {
                let task = &tasks[ti];
                let trace = match build_trace(
                    world,
                    &tables,
                    &model,
                    &sources,
                    task,
                    beam,
                    cfg.disable_fusion,
                ) {
                    Ok(t) => t,
                    Err(_) => {
                        log.skipped_tasks += 1;
                        continue;
                    }
                };
                log.injected_gold_steps += trace.injected_gold_steps as u64;
                let (outcome, grads) = backward(&model, &trace, &loss_cfg)?;
                if outcome.global_floored {
                    log.floored_global_losses += 1;
                }
                if !outcome.loss.total.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: batch_no,
                    });
                }
                local_sum += outcome.loss.local;
                global_sum += outcome.loss.global;
                counted += 1;
                used += 1;
                batch_grads.add(&grads);
            }
            if used > 0 {
                batch_grads.scale(1.0 / used as f64);
                sgd_step(&mut model, &batch_grads, cfg.lr);
            }
        }

        let denom = counted.max(1) as f64;
        let local_mean = local_sum / denom;
        let global_mean = global_sum / denom;
        let breakdown = LossBreakdown::compose(local_mean, global_mean, &loss_cfg);
        let val_f1 = quick_f1(world, &tables, &model, &sources, &val_tasks, beam, flags);
        log.rows.push(TrainLogRow {
            epoch,
            loss_local: breakdown.local,
            loss_global: breakdown.global,
            loss_total: breakdown.total,
            val_f1,
        });
    }
    Ok((model, log))
}

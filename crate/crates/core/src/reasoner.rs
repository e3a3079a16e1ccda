//! Stepwise reasoning over the knowledge sources: candidate generation,
//! candidate scoring, beam search over trajectories in log domain, the
//! answer head, and probabilistic aggregation across the final beam.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fusion::{fuse, project_only, FusedState};
use crate::linalg::{softmax_slice, LinalgError, Matrix, Vector};
use crate::model::ModelParams;
use crate::sources::{
    parametric_propose, retrieve, CorpusIndex, RetrievalBudget, SnippetRef, SourceError,
};
use crate::world::{EntityId, NameTables, RelationId, Source, WorldSpec};

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("question does not parse against this world")]
    BadQuestion,
    #[error("score_candidates called with no candidates")]
    EmptyCandidates,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Source(#[from] SourceError),
}

/// Scorer projection and bias applied to each candidate's fused state.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScorerParams {
    pub weight: Matrix,
    pub bias: Vector,
}

impl StepScorerParams {
    /// Scalar logit for one fused candidate state: (W·h + b) · h.
    pub fn logit(&self, h: &Vector) -> Result<f64, LinalgError> {
        let wh = self.weight.matvec(h)?;
        let mut acc = 0.0;
        for ((w, b), x) in wh.data().iter().zip(self.bias.data()).zip(h.data()) {
            acc += (w + b) * x;
        }
        Ok(acc)
    }
}

/// A proposed fact, totally ordered for deterministic tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FactKey {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// One candidate next step with its evidence context. The fused
/// embedding and probability are attached by the scoring pass.
#[derive(Debug, Clone)]
pub struct CandidateStep {
    pub fact: FactKey,
    pub origins: Vec<Source>,
    pub supports: Vec<(SnippetRef, Vector)>,
    pub relevance: f64,
    pub step_embedding: Option<Vector>,
    pub fused: Option<FusedState>,
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_steps: usize,
    pub candidate_cap: usize,
    pub top_s: usize,
    pub top_p: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            max_steps: 8,
            candidate_cap: 8,
            top_s: 3,
            top_p: 3,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width < 1 {
            return Err("beam width must be >= 1".into());
        }
        if !(1..=8).contains(&self.max_steps) {
            return Err("max_steps must be in 1..=8".into());
        }
        if self.candidate_cap < 1 || self.top_s < 1 || self.top_p < 1 {
            return Err("candidate_cap, top_s, top_p must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InferenceFlags {
    pub disable_fusion: bool,
    pub answer_from_best_only: bool,
}

/// Distribution over all entities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub probabilities: Vec<f64>,
    pub argmax: EntityId,
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Entity logits from the final fused state: E · (A · h), softmaxed.
pub fn answer_head(
    final_fused: &FusedState,
    model: &ModelParams,
) -> Result<AnswerDistribution, ReasonerError> {
    let projected = model.answer_projection.matvec(&final_fused.h)?;
    let logits = model
        .parametric
        .entity_embeddings
        .matvec(&projected)?;
    let probabilities = softmax_slice(logits.data());
    let argmax = EntityId(first_argmax(&probabilities) as u32);
    Ok(AnswerDistribution {
        probabilities,
        argmax,
    })
}

// ---------------------------------------------------------------------------
// Generic beam engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PartialPath<P> {
    pub keys: Vec<FactKey>,
    pub payloads: Vec<P>,
    pub log_joint: f64,
}

impl<P> PartialPath<P> {
    fn empty() -> Self {
        Self {
            keys: Vec::new(),
            payloads: Vec::new(),
            log_joint: 0.0,
        }
    }
}

#[derive(Debug)]
pub struct BeamOutcome<P> {
    pub complete: bool,
    pub paths: Vec<PartialPath<P>>,
}

/// Expands partial paths one depth at a time. `prepare_depth` sees the
/// whole surviving beam before per-path expansion, which is where the
/// production driver does its shared per-depth retrieval.
pub trait BeamDriver {
    type Payload: Clone;

    fn prepare_depth(
        &mut self,
        _depth: usize,
        _beam: &[PartialPath<Self::Payload>],
    ) -> Result<(), ReasonerError> {
        Ok(())
    }

    /// Scored extensions of one path; probabilities over the returned
    /// candidates must sum to 1.
    fn expand(
        &mut self,
        depth: usize,
        path: &PartialPath<Self::Payload>,
    ) -> Result<Vec<(FactKey, f64, Self::Payload)>, ReasonerError>;
}

fn order_paths<P>(paths: &mut Vec<PartialPath<P>>) {
    paths.sort_by(|a, b| {
        b.log_joint
            .total_cmp(&a.log_joint)
            .then_with(|| a.keys.cmp(&b.keys))
    });
}

/// Standard beam search in log domain: expand every surviving partial
/// path, keep the top `width` by accumulated log probability, ties
/// broken lexicographically on the step fact keys. If every path dies
/// at some depth the longest survivors are returned flagged incomplete.
pub fn beam_search_core<D: BeamDriver>(
    driver: &mut D,
    width: usize,
    target_steps: usize,
) -> Result<BeamOutcome<D::Payload>, ReasonerError> {
    let mut beam = vec![PartialPath::empty()];
    for depth in 0..target_steps {
        driver.prepare_depth(depth, &beam)?;
        let mut pool: Vec<PartialPath<D::Payload>> = Vec::new();
        for path in &beam {
            for (key, prob, payload) in driver.expand(depth, path)? {
                let mut keys = path.keys.clone();
                keys.push(key);
                let mut payloads = path.payloads.clone();
                payloads.push(payload);
                pool.push(PartialPath {
                    keys,
                    payloads,
                    log_joint: path.log_joint + prob.ln(),
                });
            }
        }
        if pool.is_empty() {
            order_paths(&mut beam);
            return Ok(BeamOutcome {
                complete: false,
                paths: beam,
            });
        }
        order_paths(&mut pool);
        pool.truncate(width);
        beam = pool;
    }
    order_paths(&mut beam);
    Ok(BeamOutcome {
        complete: true,
        paths: beam,
    })
}

// ---------------------------------------------------------------------------
// Production driver over world + sources + model
// ---------------------------------------------------------------------------

/// External corpora with their indexes, in source order.
#[derive(Debug, Clone)]
pub struct SourceSet {
    pub corpora: Vec<CorpusIndex>,
}

impl SourceSet {
    pub fn build(corpora: Vec<crate::world::Corpus>) -> Self {
        Self {
            corpora: corpora.into_iter().map(CorpusIndex::build).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditEvent {
    CorpusRetrieval { source: u32, depth: usize },
    ParametricProposal { depth: usize },
}

#[derive(Debug, Clone)]
pub struct StepPayload {
    pub probability: f64,
    pub origins: Vec<Source>,
    pub fused: FusedState,
    pub supports: Vec<(SnippetRef, Vector)>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub fact: FactKey,
    pub probability: f64,
    pub origins: Vec<Source>,
    pub fused: FusedState,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub log_joint: f64,
    pub complete: bool,
    /// Fused state after absorbing the last step; what the answer head
    /// reads. Present only on complete trajectories.
    pub terminal: Option<FusedState>,
}

/// Per-question retrieval and scoring context. Corpus retrieval happens
/// once per (source, depth) over the union of beam frontiers, and
/// parametric proposals are memoized per (frontier, relation), so the
/// budget stays within the per-question call bound.
pub struct QuestionContext<'a> {
    pub world: &'a WorldSpec,
    pub tables: &'a NameTables,
    pub model: &'a ModelParams,
    pub sources: &'a SourceSet,
    pub cfg: BeamConfig,
    pub flags: InferenceFlags,
    pub question: Vec<String>,
    pub relation_order: Vec<RelationId>,
    pub anchor: EntityId,
    question_embedding: Vector,
    pub budget: RetrievalBudget,
    pub audit: Vec<AuditEvent>,
    corpus_cache: BTreeMap<(u32, usize), Vec<(FactKey, SnippetRef, f64, Vector)>>,
    parametric_cache: BTreeMap<(EntityId, RelationId), Vec<(FactKey, SnippetRef, f64, Vector)>>,
    scored_cache: BTreeMap<(usize, EntityId), Vec<CandidateStep>>,
}

impl<'a> QuestionContext<'a> {
    pub fn new(
        world: &'a WorldSpec,
        tables: &'a NameTables,
        model: &'a ModelParams,
        sources: &'a SourceSet,
        question: &[String],
        cfg: BeamConfig,
        flags: InferenceFlags,
    ) -> Result<Self, ReasonerError> {
        let (relation_order, anchor) = tables
            .parse_question(question)
            .ok_or(ReasonerError::BadQuestion)?;
        let rows = model.vocab.rows(question);
        let question_embedding = model.mean_token_rows(&rows);
        Ok(Self {
            world,
            tables,
            model,
            sources,
            cfg,
            flags,
            question: question.to_vec(),
            relation_order,
            anchor,
            question_embedding,
            budget: RetrievalBudget::new(),
            audit: Vec::new(),
            corpus_cache: BTreeMap::new(),
            parametric_cache: BTreeMap::new(),
            scored_cache: BTreeMap::new(),
        })
    }

    /// State embedding for a frontier: the question embedding and the
    /// frontier's entity embedding, averaged.
    pub fn state_embedding(&self, frontier: EntityId) -> Vector {
        self.question_embedding
            .add(&self.model.parametric.entity(frontier))
            .expect("dimensions match")
            .scaled(0.5)
    }

    /// Relation the question asks for at `depth`.
    pub fn relation_at(&self, depth: usize) -> Option<RelationId> {
        self.relation_order.get(depth).copied()
    }

    pub fn target_steps(&self, hops: Option<u8>) -> usize {
        match hops {
            Some(h) => h as usize,
            None => self.relation_order.len().min(self.cfg.max_steps),
        }
    }

    /// One retrieval per corpus for this depth, querying the question
    /// tokens plus every current frontier's name.
    fn retrieve_depth(&mut self, depth: usize, frontiers: &BTreeSet<EntityId>) {
        if frontiers.is_empty() {
            return;
        }
        let mut query = self.question.clone();
        for f in frontiers {
            query.extend(crate::world::text::tokenize(&crate::world::text::render_name(
                self.world.entity_name(*f),
            )));
        }
        // Snippets mentioning a frontier as a *tail* compete with the
        // ones we actually want (frontier as head), so request extra
        // headroom; the per-frontier fact budget is applied after
        // parsing.
        let window = self.cfg.top_s * frontiers.len() * 4;
        for (idx, corpus) in self.sources.corpora.iter().enumerate() {
            let key = (idx as u32, depth);
            if self.corpus_cache.contains_key(&key) {
                continue;
            }
            let result = retrieve(corpus, &query, window, self.model, &mut self.budget);
            self.audit.push(AuditEvent::CorpusRetrieval {
                source: idx as u32,
                depth,
            });
            let parsed: Vec<(FactKey, SnippetRef, f64, Vector)> = result
                .snippets
                .into_iter()
                .filter_map(|s| {
                    let snippet_id = match s.snippet {
                        SnippetRef::Corpus { snippet, .. } => snippet,
                        _ => return None,
                    };
                    let tokens = &corpus.snippet(snippet_id).tokens;
                    self.tables.parse_fact(tokens).map(|(head, relation, tail)| {
                        (
                            FactKey {
                                head,
                                relation,
                                tail,
                            },
                            s.snippet,
                            s.score,
                            s.embedding,
                        )
                    })
                })
                .collect();
            self.corpus_cache.insert(key, parsed);
        }
    }

    fn parametric_for(
        &mut self,
        frontier: EntityId,
        relation: RelationId,
        depth: usize,
    ) -> Result<&Vec<(FactKey, SnippetRef, f64, Vector)>, ReasonerError> {
        if !self.parametric_cache.contains_key(&(frontier, relation)) {
            let state = self.model.parametric.entity(frontier);
            let result = parametric_propose(
                &state,
                relation,
                &self.model.parametric,
                self.cfg.top_p,
                &mut self.budget,
            )?;
            self.audit.push(AuditEvent::ParametricProposal { depth });
            let parsed = result
                .snippets
                .into_iter()
                .filter_map(|s| match s.snippet {
                    SnippetRef::Parametric { relation, entity } => {
                        // Self-loops cannot be facts.
                        (entity != frontier).then(|| {
                            (
                                FactKey {
                                    head: frontier,
                                    relation,
                                    tail: entity,
                                },
                                s.snippet,
                                s.score,
                                s.embedding,
                            )
                        })
                    }
                    _ => None,
                })
                .collect();
            self.parametric_cache.insert((frontier, relation), parsed);
        }
        Ok(&self.parametric_cache[&(frontier, relation)])
    }

    /// Candidate steps for one frontier at one depth: retrieved facts
    /// whose head matches the frontier plus parametric proposals for
    /// the relation the question asks for here, deduplicated by
    /// (head, relation, tail) and capped by retrieval score.
    pub fn propose_candidates(
        &mut self,
        depth: usize,
        frontier: EntityId,
    ) -> Result<Vec<CandidateStep>, ReasonerError> {
        self.retrieve_depth(depth, &BTreeSet::from([frontier]));
        let mut by_fact: BTreeMap<FactKey, CandidateStep> = BTreeMap::new();
        let mut insert =
            |fact: FactKey, origin: Source, snippet: SnippetRef, score: f64, emb: Vector| {
                let entry = by_fact.entry(fact).or_insert_with(|| CandidateStep {
                    fact,
                    origins: Vec::new(),
                    supports: Vec::new(),
                    relevance: f64::NEG_INFINITY,
                    step_embedding: None,
                    fused: None,
                    probability: None,
                });
                if !entry.origins.contains(&origin) {
                    entry.origins.push(origin);
                }
                entry.supports.push((snippet, emb));
                entry.relevance = entry.relevance.max(score);
            };

        for (idx, _) in self.sources.corpora.iter().enumerate() {
            let key = (idx as u32, depth);
            if let Some(parsed) = self.corpus_cache.get(&key) {
                // Top retrieved facts for this frontier from this
                // corpus, at most top_s of them.
                let mut matching: Vec<&(FactKey, SnippetRef, f64, Vector)> = parsed
                    .iter()
                    .filter(|(fact, _, _, _)| fact.head == frontier)
                    .collect();
                matching.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
                for (fact, snippet, score, emb) in matching.into_iter().take(self.cfg.top_s) {
                    insert(
                        *fact,
                        Source::Corpus(idx as u32),
                        *snippet,
                        *score,
                        emb.clone(),
                    );
                }
            }
        }

        if let Some(relation) = self.relation_at(depth) {
            let proposals = self.parametric_for(frontier, relation, depth)?.clone();
            for (fact, snippet, score, emb) in proposals {
                insert(fact, Source::Parametric, snippet, score, emb);
            }
        }

        let mut candidates: Vec<CandidateStep> = by_fact.into_values().collect();
        candidates.sort_by(|a, b| {
            b.relevance
                .total_cmp(&a.relevance)
                .then_with(|| a.fact.cmp(&b.fact))
        });
        candidates.truncate(self.cfg.candidate_cap);
        Ok(candidates)
    }

    /// Fuse each candidate's evidence with the frontier state.
    pub fn embed_candidates(
        &self,
        frontier: EntityId,
        candidates: &mut [CandidateStep],
    ) -> Result<(), ReasonerError> {
        let h_param = self.state_embedding(frontier);
        for c in candidates.iter_mut() {
            let fused = if self.flags.disable_fusion {
                project_only(&h_param, &self.model.fusion)?
            } else {
                let embeddings: Vec<Vector> =
                    c.supports.iter().map(|(_, e)| e.clone()).collect();
                fuse(&h_param, &embeddings, &self.model.fusion)?
            };
            c.step_embedding = Some(fused.h.clone());
            c.fused = Some(fused);
        }
        Ok(())
    }

    /// Scored candidates for (depth, frontier), memoized because beam
    /// branches frequently converge on the same frontier.
    fn scored_candidates(
        &mut self,
        depth: usize,
        frontier: EntityId,
    ) -> Result<Vec<CandidateStep>, ReasonerError> {
        if let Some(hit) = self.scored_cache.get(&(depth, frontier)) {
            return Ok(hit.clone());
        }
        let mut candidates = self.propose_candidates(depth, frontier)?;
        if !candidates.is_empty() {
            self.embed_candidates(frontier, &mut candidates)?;
            score_candidates(&mut candidates, &self.model.scorer)?;
        }
        self.scored_cache
            .insert((depth, frontier), candidates.clone());
        Ok(candidates)
    }

    /// Fused state read by the answer head once a trajectory is
    /// complete: the frontier has moved to the endpoint and there is no
    /// further retrieval context, so this is the endpoint's own
    /// representation pushed through the fusion block's degenerate
    /// (empty-context) case.
    pub fn terminal_state(&self, endpoint: EntityId) -> Result<FusedState, ReasonerError> {
        let h_param = self.model.parametric.entity(endpoint);
        Ok(project_only(&h_param, &self.model.fusion)?)
    }
}

/// Attach probabilities: softmax over the scalar logits of the
/// candidates' fused states, order preserved.
pub fn score_candidates(
    candidates: &mut [CandidateStep],
    scorer: &StepScorerParams,
) -> Result<(), ReasonerError> {
    if candidates.is_empty() {
        return Err(ReasonerError::EmptyCandidates);
    }
    let logits: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let h = c
                .step_embedding
                .as_ref()
                .expect("candidates embedded before scoring");
            scorer.logit(h)
        })
        .collect::<Result<_, _>>()?;
    let probs = softmax_slice(&logits);
    for (c, p) in candidates.iter_mut().zip(probs) {
        c.probability = Some(p);
    }
    Ok(())
}

struct WorldDriver<'a, 'b> {
    ctx: &'b mut QuestionContext<'a>,
}

impl BeamDriver for WorldDriver<'_, '_> {
    type Payload = StepPayload;

    fn prepare_depth(
        &mut self,
        depth: usize,
        beam: &[PartialPath<StepPayload>],
    ) -> Result<(), ReasonerError> {
        let frontiers: BTreeSet<EntityId> = beam
            .iter()
            .map(|p| p.keys.last().map(|k| k.tail).unwrap_or(self.ctx.anchor))
            .collect();
        self.ctx.retrieve_depth(depth, &frontiers);
        Ok(())
    }

    fn expand(
        &mut self,
        depth: usize,
        path: &PartialPath<StepPayload>,
    ) -> Result<Vec<(FactKey, f64, StepPayload)>, ReasonerError> {
        let frontier = path.keys.last().map(|k| k.tail).unwrap_or(self.ctx.anchor);
        let candidates = self.ctx.scored_candidates(depth, frontier)?;
        Ok(candidates
            .into_iter()
            .map(|c| {
                let probability = c.probability.expect("scored");
                (
                    c.fact,
                    probability,
                    StepPayload {
                        probability,
                        origins: c.origins,
                        fused: c.fused.expect("embedded"),
                        supports: c.supports,
                    },
                )
            })
            .collect())
    }
}

/// Run beam search for a question. `hops` fixes the exact number of
/// steps when known (training and evaluation); otherwise the search
/// runs to the parsed question depth capped at `max_steps`.
pub fn beam_search(
    ctx: &mut QuestionContext,
    hops: Option<u8>,
) -> Result<Vec<Trajectory>, ReasonerError> {
    let width = ctx.cfg.width;
    let target = ctx.target_steps(hops);
    let outcome = {
        let mut driver = WorldDriver { ctx };
        beam_search_core(&mut driver, width, target)?
    };
    let mut trajectories = Vec::with_capacity(outcome.paths.len());
    for path in outcome.paths {
        let steps: Vec<TrajectoryStep> = path
            .keys
            .iter()
            .zip(&path.payloads)
            .map(|(k, p)| TrajectoryStep {
                fact: *k,
                probability: p.probability,
                origins: p.origins.clone(),
                fused: p.fused.clone(),
            })
            .collect();
        let terminal = if outcome.complete && !steps.is_empty() {
            let endpoint = path.keys.last().expect("non-empty complete path").tail;
            Some(ctx.terminal_state(endpoint)?)
        } else {
            None
        };
        trajectories.push(Trajectory {
            steps,
            log_joint: path.log_joint,
            complete: outcome.complete,
            terminal,
        });
    }
    Ok(trajectories)
}

/// Probability-weighted mixture of the per-trajectory answer
/// distributions. Returns the mixture weights alongside; None when no
/// complete trajectory exists (abstention).
pub fn aggregate_answers(
    trajectories: &[Trajectory],
    model: &ModelParams,
) -> Result<Option<(AnswerDistribution, Vec<f64>)>, ReasonerError> {
    let complete: Vec<&Trajectory> = trajectories
        .iter()
        .filter(|t| t.complete && t.terminal.is_some())
        .collect();
    if complete.is_empty() {
        return Ok(None);
    }
    let log_joints: Vec<f64> = complete.iter().map(|t| t.log_joint).collect();
    let weights = softmax_slice(&log_joints);
    let n_entities = model.parametric.entity_embeddings.rows();
    let mut mixture = vec![0.0; n_entities];
    for (t, w) in complete.iter().zip(&weights) {
        let dist = answer_head(t.terminal.as_ref().expect("complete"), model)?;
        for (m, p) in mixture.iter_mut().zip(&dist.probabilities) {
            *m += w * p;
        }
    }
    let argmax = EntityId(first_argmax(&mixture) as u32);
    Ok(Some((
        AnswerDistribution {
            probabilities: mixture,
            argmax,
        },
        weights,
    )))
}

/// Everything produced while answering one question.
#[derive(Debug)]
pub struct QuestionRun {
    pub trajectories: Vec<Trajectory>,
    pub answer: Option<AnswerDistribution>,
    pub budget: RetrievalBudget,
    pub audit: Vec<AuditEvent>,
}

/// End-to-end inference for one question: beam search plus the
/// configured answer mode.
pub fn answer_question(
    world: &WorldSpec,
    tables: &NameTables,
    model: &ModelParams,
    sources: &SourceSet,
    question: &[String],
    hops: Option<u8>,
    cfg: BeamConfig,
    flags: InferenceFlags,
) -> Result<QuestionRun, ReasonerError> {
    let mut ctx = QuestionContext::new(world, tables, model, sources, question, cfg, flags)?;
    let trajectories = beam_search(&mut ctx, hops)?;
    let answer = answer_from_beam(&trajectories, model, flags.answer_from_best_only)?;
    Ok(QuestionRun {
        trajectories,
        answer,
        budget: ctx.budget,
        audit: ctx.audit,
    })
}

/// Final answer for a finished beam under the configured mode.
pub fn answer_from_beam(
    trajectories: &[Trajectory],
    model: &ModelParams,
    best_only: bool,
) -> Result<Option<AnswerDistribution>, ReasonerError> {
    if best_only {
        let best = trajectories
            .iter()
            .find(|t| t.complete && t.terminal.is_some());
        return match best {
            Some(t) => Ok(Some(answer_head(t.terminal.as_ref().unwrap(), model)?)),
            None => Ok(None),
        };
    }
    Ok(aggregate_answers(trajectories, model)?.map(|(dist, _)| dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn hand_candidate(d: usize, h: Vec<f64>) -> CandidateStep {
        CandidateStep {
            fact: FactKey {
                head: EntityId(0),
                relation: RelationId(0),
                tail: EntityId(1),
            },
            origins: vec![Source::Corpus(0)],
            supports: Vec::new(),
            relevance: 1.0,
            step_embedding: Some(Vector::new(h).unwrap()),
            fused: Some(FusedState {
                h: Vector::zeros(d),
                attention_weights: vec![1.0],
            }),
            probability: None,
        }
    }

    #[test]
    fn singleton_candidate_gets_probability_one() {
        let scorer = StepScorerParams {
            weight: Matrix::identity(2),
            bias: Vector::zeros(2),
        };
        let mut cands = vec![hand_candidate(2, vec![0.3, 0.4])];
        score_candidates(&mut cands, &scorer).unwrap();
        assert_eq!(cands[0].probability, Some(1.0));
    }

    #[test]
    fn identical_embeddings_are_uniform() {
        let scorer = StepScorerParams {
            weight: Matrix::identity(2),
            bias: Vector::new(vec![0.5, -0.25]).unwrap(),
        };
        let mut cands: Vec<CandidateStep> = (0..4)
            .map(|_| hand_candidate(2, vec![0.7, -0.2]))
            .collect();
        score_candidates(&mut cands, &scorer).unwrap();
        for c in &cands {
            assert_abs_diff_eq!(c.probability.unwrap(), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn hand_built_logits_match_softmax_oracle() {
        // W = 0 and b = [1] make the logit equal the embedding value, so
        // embeddings [1],[2],[3] produce logits [1,2,3].
        let scorer = StepScorerParams {
            weight: Matrix::zeros(1, 1),
            bias: Vector::new(vec![1.0]).unwrap(),
        };
        let mut cands = vec![
            hand_candidate(1, vec![1.0]),
            hand_candidate(1, vec![2.0]),
            hand_candidate(1, vec![3.0]),
        ];
        score_candidates(&mut cands, &scorer).unwrap();
        assert_abs_diff_eq!(
            cands[0].probability.unwrap(),
            0.09003057317038046,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            cands[1].probability.unwrap(),
            0.24472847105479767,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            cands[2].probability.unwrap(),
            0.6652409557748219,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_candidates_error() {
        let scorer = StepScorerParams {
            weight: Matrix::identity(1),
            bias: Vector::zeros(1),
        };
        let mut empty: Vec<CandidateStep> = Vec::new();
        assert!(matches!(
            score_candidates(&mut empty, &scorer),
            Err(ReasonerError::EmptyCandidates)
        ));
    }

    // Answer head tests use a hand-assembled model.
    fn hand_model(entity_rows: Vec<Vec<f64>>, answer_projection: Matrix) -> ModelParams {
        use crate::world::{Entity, Fact, Relation, WorldConfig, WorldSpec};
        let names = ["aa", "bb", "cc", "dd", "ee", "ff"];
        let entities: Vec<Entity> = entity_rows
            .iter()
            .enumerate()
            .map(|(i, _)| Entity {
                id: EntityId(i as u32),
                name: names[i].into(),
            })
            .collect();
        let relations = vec![Relation {
            id: RelationId(0),
            name: "rr".into(),
        }];
        let facts = vec![Fact {
            head: EntityId(0),
            relation: RelationId(0),
            tail: EntityId(1),
            source_tag: Source::Corpus(0),
        }];
        let mut config = WorldConfig::default();
        config.min_chains = 0;
        let world = WorldSpec::assemble(config, 0, entities, relations, facts).unwrap();
        let d = entity_rows[0].len();
        let mut model = ModelParams::init(&world, d, 1);
        let flat: Vec<f64> = entity_rows.iter().flatten().copied().collect();
        model.parametric.entity_embeddings =
            Matrix::new(entity_rows.len(), d, flat).unwrap();
        model.answer_projection = answer_projection;
        model
    }

    fn fused(h: Vec<f64>) -> FusedState {
        FusedState {
            h: Vector::new(h).unwrap(),
            attention_weights: vec![1.0],
        }
    }

    #[test]
    fn zero_projection_gives_uniform_answers() {
        let model = hand_model(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.5, 0.5]],
            Matrix::zeros(2, 2),
        );
        let dist = answer_head(&fused(vec![0.4, -0.9]), &model).unwrap();
        for p in &dist.probabilities {
            assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-12);
        }
        // Uniform ties resolve to the lowest entity id.
        assert_eq!(dist.argmax, EntityId(0));
    }

    #[test]
    fn aligned_entity_wins_under_identity_projection() {
        let model = hand_model(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Matrix::identity(2),
        );
        let dist = answer_head(&fused(vec![0.0, 5.0]), &model).unwrap();
        assert_eq!(dist.argmax, EntityId(1));
    }

    #[test]
    fn four_entity_hand_instance_matches_softmax() {
        // Entity rows form the identity, so logits equal the projected
        // state [0.1, 0.2, 0.3, 0.4] directly.
        let model = hand_model(
            vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            Matrix::identity(4),
        );
        let dist = answer_head(&fused(vec![0.1, 0.2, 0.3, 0.4]), &model).unwrap();
        let exps: Vec<f64> = [0.1f64, 0.2, 0.3, 0.4].iter().map(|x| x.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (p, e) in dist.probabilities.iter().zip(&exps) {
            assert_abs_diff_eq!(*p, e / sum, epsilon = 1e-12);
        }
        assert_eq!(dist.argmax, EntityId(3));
    }

    fn lattice_trajectory(log_joint: f64, dist_seed: usize, complete: bool) -> Trajectory {
        Trajectory {
            steps: vec![],
            log_joint,
            complete,
            terminal: complete.then(|| fused(vec![dist_seed as f64, 0.0])),
        }
    }

    #[test]
    fn aggregation_single_trajectory_is_its_answer_head() {
        let model = hand_model(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Matrix::identity(2),
        );
        let t = lattice_trajectory(-0.5, 3, true);
        let (agg, weights) = aggregate_answers(&[t.clone()], &model).unwrap().unwrap();
        let direct = answer_head(t.terminal.as_ref().unwrap(), &model).unwrap();
        assert_eq!(agg.probabilities, direct.probabilities);
        assert_eq!(weights, vec![1.0]);
    }

    #[test]
    fn aggregation_weights_are_softmax_of_log_joints() {
        let model = hand_model(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Matrix::identity(2),
        );
        let a = lattice_trajectory((0.25f64).ln(), 1, true);
        let b = lattice_trajectory((0.75f64).ln(), 1, true);
        let (_, weights) = aggregate_answers(&[a, b], &model).unwrap().unwrap();
        assert_abs_diff_eq!(weights[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn aggregation_hand_mixture() {
        // Two trajectories with weights 0.75/0.25 and answer
        // distributions concentrated on different entities.
        let model = hand_model(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Matrix::identity(2).scaled(40.0),
        );
        let t0 = lattice_trajectory((0.75f64).ln(), 0, true);
        let t1 = lattice_trajectory((0.25f64).ln(), 0, true);
        // t0 points hard at entity 0, t1 hard at entity 1.
        let mut t0 = t0;
        t0.terminal = Some(fused(vec![1.0, 0.0]));
        let mut t1 = t1;
        t1.terminal = Some(fused(vec![0.0, 1.0]));
        let (agg, _) = aggregate_answers(&[t0, t1], &model).unwrap().unwrap();
        assert_abs_diff_eq!(agg.probabilities[0], 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(agg.probabilities[1], 0.25, epsilon = 1e-6);
        assert_eq!(agg.argmax, EntityId(0));
    }

    #[test]
    fn only_incomplete_trajectories_abstain() {
        let model = hand_model(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Matrix::identity(2),
        );
        let t = lattice_trajectory(-0.5, 1, false);
        assert!(aggregate_answers(&[t], &model).unwrap().is_none());
    }

    // ------------------------------------------------------------------
    // Beam engine on synthetic lattices
    // ------------------------------------------------------------------

    /// Fixed random lattice: candidate probabilities per (depth, path
    /// prefix), generated once and replayed deterministically.
    struct LatticeDriver {
        depth_branching: Vec<usize>,
        seed: u64,
    }

    impl LatticeDriver {
        fn probs(&self, depth: usize, path: &[FactKey]) -> Vec<f64> {
            use rand::{Rng, SeedableRng};
            let mut key = self.seed ^ (depth as u64).wrapping_mul(0x9e37);
            for k in path {
                key = key
                    .wrapping_mul(31)
                    .wrapping_add(k.tail.0 as u64 + 1);
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
            let n = self.depth_branching[depth];
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            softmax_slice(&logits)
        }
    }

    impl BeamDriver for LatticeDriver {
        type Payload = ();

        fn expand(
            &mut self,
            depth: usize,
            path: &PartialPath<()>,
        ) -> Result<Vec<(FactKey, f64, ())>, ReasonerError> {
            Ok(self
                .probs(depth, &path.keys)
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    (
                        FactKey {
                            head: EntityId(depth as u32),
                            relation: RelationId(0),
                            tail: EntityId(i as u32),
                        },
                        p,
                        (),
                    )
                })
                .collect())
        }
    }

    /// Exhaustive enumeration oracle, independent of the beam engine.
    fn brute_force_best(driver: &LatticeDriver, target: usize) -> (Vec<FactKey>, f64) {
        fn recurse(
            driver: &LatticeDriver,
            depth: usize,
            target: usize,
            path: &mut Vec<FactKey>,
            log_joint: f64,
            best: &mut Option<(Vec<FactKey>, f64)>,
        ) {
            if depth == target {
                let better = match best {
                    None => true,
                    Some((bk, bl)) => {
                        log_joint > *bl || (log_joint == *bl && path.as_slice() < bk.as_slice())
                    }
                };
                if better {
                    *best = Some((path.clone(), log_joint));
                }
                return;
            }
            for (i, p) in driver.probs(depth, path).iter().enumerate() {
                path.push(FactKey {
                    head: EntityId(depth as u32),
                    relation: RelationId(0),
                    tail: EntityId(i as u32),
                });
                recurse(driver, depth + 1, target, path, log_joint + p.ln(), best);
                path.pop();
            }
        }
        let mut best = None;
        recurse(driver, 0, target, &mut Vec::new(), 0.0, &mut best);
        best.unwrap()
    }

    #[test]
    fn full_width_beam_equals_brute_force() {
        for seed in 0..25u64 {
            let depth = 2 + (seed % 3) as usize;
            let branching = vec![3; depth];
            let lattice_size: usize = branching.iter().product();
            let mut driver = LatticeDriver {
                depth_branching: branching,
                seed,
            };
            let outcome = beam_search_core(&mut driver, lattice_size, depth).unwrap();
            assert!(outcome.complete);
            let (oracle_path, oracle_lj) = brute_force_best(&driver, depth);
            assert_eq!(outcome.paths[0].keys, oracle_path, "seed {seed}");
            assert_abs_diff_eq!(outcome.paths[0].log_joint, oracle_lj, epsilon = 1e-12);
        }
    }

    #[test]
    fn width_one_is_greedy_argmax_chain() {
        let mut driver = LatticeDriver {
            depth_branching: vec![4, 4, 4],
            seed: 11,
        };
        let outcome = beam_search_core(&mut driver, 1, 3).unwrap();
        // Greedy chain built independently.
        let mut path = Vec::new();
        for depth in 0..3 {
            let probs = driver.probs(depth, &path);
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            path.push(FactKey {
                head: EntityId(depth as u32),
                relation: RelationId(0),
                tail: EntityId(best as u32),
            });
        }
        assert_eq!(outcome.paths[0].keys, path);
    }

    #[test]
    fn best_log_joint_is_monotone_in_width() {
        for seed in 100..120u64 {
            let branching = vec![4, 4, 4];
            let lattice_size = 64;
            let mut last = f64::NEG_INFINITY;
            for width in 1..=lattice_size {
                let mut driver = LatticeDriver {
                    depth_branching: branching.clone(),
                    seed,
                };
                let outcome = beam_search_core(&mut driver, width, 3).unwrap();
                let best = outcome.paths[0].log_joint;
                assert!(
                    best >= last - 1e-12,
                    "width {width} regressed at seed {seed}"
                );
                last = best;
            }
        }
    }

    #[test]
    fn log_joint_equals_sum_of_step_logs() {
        let mut driver = LatticeDriver {
            depth_branching: vec![3, 3, 3],
            seed: 5,
        };
        let outcome = beam_search_core(&mut driver, 4, 3).unwrap();
        for path in &outcome.paths {
            // Recompute each step's probability from the lattice.
            let mut acc = 0.0;
            for (depth, key) in path.keys.iter().enumerate() {
                let probs = driver.probs(depth, &path.keys[..depth]);
                let p = probs[key.tail.index()];
                assert!(p > 0.0 && p <= 1.0);
                acc += p.ln();
            }
            assert_abs_diff_eq!(acc, path.log_joint, epsilon = 1e-9);
        }
    }

    /// Driver that dead-ends every path whose first step was candidate 1.
    struct DeadEndDriver;

    impl BeamDriver for DeadEndDriver {
        type Payload = ();

        fn expand(
            &mut self,
            depth: usize,
            path: &PartialPath<()>,
        ) -> Result<Vec<(FactKey, f64, ())>, ReasonerError> {
            if depth > 0 && path.keys[0].tail == EntityId(1) {
                return Ok(vec![]);
            }
            if depth > 0 && path.keys[0].tail == EntityId(2) {
                return Ok(vec![]);
            }
            Ok(vec![
                (
                    FactKey {
                        head: EntityId(depth as u32),
                        relation: RelationId(0),
                        tail: EntityId(0),
                    },
                    0.3,
                    (),
                ),
                (
                    FactKey {
                        head: EntityId(depth as u32),
                        relation: RelationId(0),
                        tail: EntityId(1),
                    },
                    0.5,
                    (),
                ),
                (
                    FactKey {
                        head: EntityId(depth as u32),
                        relation: RelationId(0),
                        tail: EntityId(2),
                    },
                    0.2,
                    (),
                ),
            ])
        }
    }

    #[test]
    fn dead_branches_are_pruned_and_survivors_continue() {
        let outcome = beam_search_core(&mut DeadEndDriver, 2, 3).unwrap();
        assert!(outcome.complete);
        // Only the 0-rooted branch can reach depth 3.
        for path in &outcome.paths {
            assert_eq!(path.keys[0].tail, EntityId(0));
            assert_eq!(path.keys.len(), 3);
        }
    }

    /// Driver where nothing extends past depth 1.
    struct StarveDriver;

    impl BeamDriver for StarveDriver {
        type Payload = ();

        fn expand(
            &mut self,
            depth: usize,
            _path: &PartialPath<()>,
        ) -> Result<Vec<(FactKey, f64, ())>, ReasonerError> {
            if depth >= 1 {
                return Ok(vec![]);
            }
            Ok(vec![(
                FactKey {
                    head: EntityId(0),
                    relation: RelationId(0),
                    tail: EntityId(0),
                },
                1.0,
                (),
            )])
        }
    }

    #[test]
    fn empty_beam_returns_longest_partials_incomplete() {
        let outcome = beam_search_core(&mut StarveDriver, 2, 3).unwrap();
        assert!(!outcome.complete);
        assert_eq!(outcome.paths.len(), 1);
        assert_eq!(outcome.paths[0].keys.len(), 1);
    }
}

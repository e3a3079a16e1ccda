//! Uniform knowledge-source layer: TF-IDF retrieval over external
//! corpora, mean-pooled snippet embeddings, and a trainable bilinear
//! store standing in for knowledge kept in model parameters. All
//! retrieval paths charge a per-question budget so efficiency counters
//! can be recounted exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{softmax_slice, Matrix, Vector};
use crate::model::ModelParams;
use crate::world::{Corpus, EntityId, RelationId, SnippetId, Source};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("unknown relation id {0}")]
    UnknownRelation(RelationId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("index file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Retrieval accounting for one question evaluation.
#[derive(Debug, Default, Clone)]
pub struct RetrievalBudget {
    pub retrieval_calls: u64,
    pub snippets_fetched: u64,
    pub wall_time: Duration,
}

impl RetrievalBudget {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, fetched: usize, elapsed: Duration) {
        self.retrieval_calls += 1;
        self.snippets_fetched += fetched as u64;
        self.wall_time += elapsed;
    }
}

/// Norm given to parametric evidence embeddings. Memorization drives
/// the relation maps to large norms (that is what makes the proposal
/// softmax sharp), so the direction M_r·E_e is rescaled to stay
/// commensurate with mean-pooled snippet embeddings.
pub const PARAMETRIC_SUPPORT_NORM: f64 = 0.25;

/// Trainable parametric knowledge: entity table plus one map per
/// relation. A fact (h, r, t) is "stored" to the extent that
/// E_hᵀ · M_r · E_t dominates the other tails.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricParams {
    pub entity_embeddings: Matrix,
    pub relation_maps: Vec<Matrix>,
}

impl ParametricParams {
    pub fn entity(&self, id: EntityId) -> Vector {
        self.entity_embeddings.row_vector(id.index())
    }

    /// Evidence embedding for a proposed (relation, entity) pair:
    /// M_r · E_e rescaled to PARAMETRIC_SUPPORT_NORM (zero if the
    /// product vanishes).
    pub fn support_embedding(&self, relation: RelationId, entity: EntityId) -> Vector {
        let v = self.relation_maps[relation.index()]
            .matvec(&self.entity(entity))
            .expect("square relation map");
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            Vector::zeros(v.dim())
        } else {
            v.scaled(PARAMETRIC_SUPPORT_NORM / norm)
        }
    }
}

/// Reference to a retrieved piece of evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SnippetRef {
    Corpus {
        source: u32,
        snippet: SnippetId,
    },
    Parametric {
        relation: RelationId,
        entity: EntityId,
    },
}

#[derive(Debug, Clone)]
pub struct RetrievedSnippet {
    pub snippet: SnippetRef,
    pub score: f64,
    pub embedding: Vector,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub source_id: Source,
    pub snippets: Vec<RetrievedSnippet>,
}

impl RetrievalResult {
    pub fn s(&self) -> usize {
        self.snippets.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    n_docs: usize,
    df: BTreeMap<String, usize>,
}

/// TF-IDF index over one corpus. idf = ln(1 + N/(1+df)); document and
/// query vectors use raw term counts scaled by idf; similarity is the
/// cosine between them.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    n_docs: usize,
    df: BTreeMap<String, usize>,
    doc_weights: Vec<BTreeMap<String, f64>>,
    doc_norms: Vec<f64>,
}

fn term_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    counts
}

impl TfIdfIndex {
    pub fn build(corpus: &Corpus) -> Self {
        let n_docs = corpus.len();
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for s in &corpus.snippets {
            for term in term_counts(&s.tokens).keys() {
                *df.entry(term.to_string()).or_default() += 1;
            }
        }
        let mut index = Self {
            n_docs,
            df,
            doc_weights: Vec::with_capacity(n_docs),
            doc_norms: Vec::with_capacity(n_docs),
        };
        for s in &corpus.snippets {
            let w = index.weigh(&s.tokens);
            let norm = l2(&w);
            index.doc_weights.push(w);
            index.doc_norms.push(norm);
        }
        index
    }

    fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0);
        (1.0 + self.n_docs as f64 / (1.0 + df as f64)).ln()
    }

    fn weigh(&self, tokens: &[String]) -> BTreeMap<String, f64> {
        term_counts(tokens)
            .into_iter()
            .map(|(t, c)| (t.to_string(), c as f64 * self.idf(t)))
            .collect()
    }

    fn cosine(&self, query: &BTreeMap<String, f64>, query_norm: f64, doc: usize) -> f64 {
        if query_norm == 0.0 || self.doc_norms[doc] == 0.0 {
            return 0.0;
        }
        let weights = &self.doc_weights[doc];
        let mut dot = 0.0;
        for (t, wq) in query {
            if let Some(wd) = weights.get(t) {
                dot += wq * wd;
            }
        }
        dot / (query_norm * self.doc_norms[doc])
    }
}

fn l2(w: &BTreeMap<String, f64>) -> f64 {
    w.values().map(|x| x * x).sum::<f64>().sqrt()
}

/// Corpus plus its derived index.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    pub corpus: Corpus,
    pub index: TfIdfIndex,
}

impl CorpusIndex {
    pub fn build(corpus: Corpus) -> Self {
        let index = TfIdfIndex::build(&corpus);
        Self { corpus, index }
    }

    pub fn snippet(&self, id: SnippetId) -> &crate::world::Snippet {
        &self.corpus.snippets[id.index()]
    }

    /// Load the persisted index next to a corpus file if it matches,
    /// otherwise rebuild from scratch.
    pub fn load_or_build(corpus: Corpus, index_path: &Path) -> Self {
        if let Ok(bytes) = fs::read(index_path) {
            if let Ok(file) = serde_json::from_slice::<IndexFile>(&bytes) {
                if file.format_version == 1 && file.n_docs == corpus.len() {
                    let mut index = TfIdfIndex {
                        n_docs: file.n_docs,
                        df: file.df,
                        doc_weights: Vec::new(),
                        doc_norms: Vec::new(),
                    };
                    for s in &corpus.snippets {
                        let w = index.weigh(&s.tokens);
                        let norm = l2(&w);
                        index.doc_weights.push(w);
                        index.doc_norms.push(norm);
                    }
                    return Self { corpus, index };
                }
            }
        }
        Self::build(corpus)
    }

    pub fn save_index(&self, index_path: &Path) -> Result<(), SourceError> {
        let file = IndexFile {
            format_version: 1,
            n_docs: self.index.n_docs,
            df: self.index.df.clone(),
        };
        fs::write(index_path, serde_json::to_vec(&file)?)?;
        Ok(())
    }
}

pub fn index_file_name(source: Source) -> String {
    format!("{}.index.json", source.tag())
}

/// Mean of the token embedding rows; unknown tokens hit the UNK row,
/// and an empty snippet is just the UNK embedding.
pub fn embed_snippet(tokens: &[String], model: &ModelParams) -> Vector {
    let rows = model.vocab.rows(tokens);
    model.mean_token_rows(&rows)
}

/// Rank corpus snippets by TF-IDF cosine against the query, ties broken
/// by ascending snippet id. Charges one retrieval call.
pub fn retrieve(
    source: &CorpusIndex,
    query_tokens: &[String],
    top_s: usize,
    model: &ModelParams,
    budget: &mut RetrievalBudget,
) -> RetrievalResult {
    let start = Instant::now();
    let query = source.index.weigh(query_tokens);
    let query_norm = l2(&query);
    let mut scored: Vec<(usize, f64)> = (0..source.corpus.len())
        .map(|i| (i, source.index.cosine(&query, query_norm, i)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let snippets: Vec<RetrievedSnippet> = scored
        .into_iter()
        .take(top_s)
        .map(|(i, score)| {
            let s = &source.corpus.snippets[i];
            RetrievedSnippet {
                snippet: SnippetRef::Corpus {
                    source: match source.corpus.source_id {
                        Source::Corpus(k) => k,
                        Source::Parametric => unreachable!("corpora are external"),
                    },
                    snippet: s.snippet_id,
                },
                score,
                embedding: embed_snippet(&s.tokens, model),
            }
        })
        .collect();
    budget.record(snippets.len(), start.elapsed());
    RetrievalResult {
        source_id: source.corpus.source_id,
        snippets,
    }
}

/// Query the parametric store: score every entity e by
/// stateᵀ · M_relation · E_e, normalize the scores with a softmax, and
/// return the top entities as synthetic evidence. Counts as one
/// retrieval call.
pub fn parametric_propose(
    state: &Vector,
    relation: RelationId,
    params: &ParametricParams,
    top_p: usize,
    budget: &mut RetrievalBudget,
) -> Result<RetrievalResult, SourceError> {
    let start = Instant::now();
    let map = params
        .relation_maps
        .get(relation.index())
        .ok_or(SourceError::UnknownRelation(relation))?;
    let projected = map
        .matvec_transposed(state)
        .expect("state dimension matches relation map");
    let n = params.entity_embeddings.rows();
    let scores: Vec<f64> = (0..n)
        .map(|e| {
            let mut acc = 0.0;
            for (a, b) in projected.data().iter().zip(params.entity_embeddings.row(e)) {
                acc += a * b;
            }
            acc
        })
        .collect();
    let probs = softmax_slice(&scores);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let snippets: Vec<RetrievedSnippet> = order
        .into_iter()
        .take(top_p)
        .map(|e| {
            let entity = EntityId(e as u32);
            RetrievedSnippet {
                snippet: SnippetRef::Parametric { relation, entity },
                score: probs[e],
                embedding: params.support_embedding(relation, entity),
            }
        })
        .collect();
    budget.record(snippets.len(), start.elapsed());
    Ok(RetrievalResult {
        source_id: Source::Parametric,
        snippets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::world::{
        self, Entity, Fact, Provenance, Relation, Snippet, WorldConfig, WorldSpec,
    };
    use approx::assert_abs_diff_eq;

    fn hand_corpus(docs: &[&[&str]]) -> Corpus {
        Corpus {
            source_id: Source::Corpus(0),
            snippets: docs
                .iter()
                .enumerate()
                .map(|(i, toks)| Snippet {
                    snippet_id: SnippetId(i as u32),
                    tokens: toks.iter().map(|t| t.to_string()).collect(),
                    provenance: Provenance::Fact(world::FactId(i as u32)),
                })
                .collect(),
        }
    }

    fn toy_world() -> WorldSpec {
        let entities = vec![
            Entity {
                id: EntityId(0),
                name: "apple".into(),
            },
            Entity {
                id: EntityId(1),
                name: "banana".into(),
            },
        ];
        let relations = vec![Relation {
            id: RelationId(0),
            name: "cherry".into(),
        }];
        let facts = vec![Fact {
            head: EntityId(0),
            relation: RelationId(0),
            tail: EntityId(1),
            source_tag: Source::Corpus(0),
        }];
        let mut config = WorldConfig::default();
        config.min_chains = 0;
        WorldSpec::assemble(config, 0, entities, relations, facts).unwrap()
    }

    fn toy_model(d: usize) -> ModelParams {
        ModelParams::init(&toy_world(), d, 42)
    }

    #[test]
    fn self_similar_query_ranks_first() {
        let corpus = hand_corpus(&[
            &["apple", "banana"],
            &["banana", "cherry", "cherry"],
            &["apple", "apple", "durian"],
        ]);
        let source = CorpusIndex::build(corpus);
        let model = toy_model(4);
        let mut budget = RetrievalBudget::new();
        let query: Vec<String> = ["banana", "cherry", "cherry"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let result = retrieve(&source, &query, 3, &model, &mut budget);
        assert_eq!(
            result.snippets[0].snippet,
            SnippetRef::Corpus {
                source: 0,
                snippet: SnippetId(1)
            }
        );
        assert_abs_diff_eq!(result.snippets[0].score, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_overlap_query_orders_by_snippet_id() {
        let corpus = hand_corpus(&[&["apple"], &["banana"], &["cherry"]]);
        let source = CorpusIndex::build(corpus);
        let model = toy_model(4);
        let mut budget = RetrievalBudget::new();
        let query = vec!["zebra".to_string()];
        let result = retrieve(&source, &query, 3, &model, &mut budget);
        let ids: Vec<SnippetId> = result
            .snippets
            .iter()
            .map(|s| match s.snippet {
                SnippetRef::Corpus { snippet, .. } => snippet,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(ids, vec![SnippetId(0), SnippetId(1), SnippetId(2)]);
        assert!(result.snippets.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn hand_tfidf_oracle_three_docs() {
        // Hand computation, idf = ln(1 + N/(1+df)), N = 3:
        //   df: apple 2, banana 2, cherry 1, durian 1
        //   idf: apple = banana = ln(2), cherry = durian = ln(2.5)
        // query [apple, cherry]:
        //   d0 [apple, banana]          cos = ln2^2 / (|q| * ln2*sqrt(2))
        //   d1 [apple, apple, durian]   cos = 2*ln2^2 / (|q| * sqrt(4ln2^2+ln2.5^2))
        //   d2 [banana, cherry, cherry] cos = 2*ln2.5^2 / (|q| * sqrt(ln2^2+4ln2.5^2))
        let ln2 = 2f64.ln();
        let ln25 = 2.5f64.ln();
        let qn = (ln2 * ln2 + ln25 * ln25).sqrt();
        let expect = [
            ln2 * ln2 / (qn * ln2 * 2f64.sqrt()),
            2.0 * ln2 * ln2 / (qn * (4.0 * ln2 * ln2 + ln25 * ln25).sqrt()),
            2.0 * ln25 * ln25 / (qn * (ln2 * ln2 + 4.0 * ln25 * ln25).sqrt()),
        ];
        // d2 > d1 > d0 under these weights.
        assert!(expect[2] > expect[1] && expect[1] > expect[0]);

        let corpus = hand_corpus(&[
            &["apple", "banana"],
            &["apple", "apple", "durian"],
            &["banana", "cherry", "cherry"],
        ]);
        let source = CorpusIndex::build(corpus);
        let model = toy_model(4);
        let mut budget = RetrievalBudget::new();
        let query: Vec<String> = ["apple", "cherry"].iter().map(|s| s.to_string()).collect();
        let result = retrieve(&source, &query, 3, &model, &mut budget);

        let got: Vec<(SnippetId, f64)> = result
            .snippets
            .iter()
            .map(|s| match s.snippet {
                SnippetRef::Corpus { snippet, .. } => (snippet, s.score),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(got[0].0, SnippetId(2));
        assert_eq!(got[1].0, SnippetId(1));
        assert_eq!(got[2].0, SnippetId(0));
        assert_abs_diff_eq!(got[0].1, expect[2], epsilon = 1e-12);
        assert_abs_diff_eq!(got[1].1, expect[1], epsilon = 1e-12);
        assert_abs_diff_eq!(got[2].1, expect[0], epsilon = 1e-12);
    }

    #[test]
    fn empty_corpus_returns_empty_result() {
        let source = CorpusIndex::build(hand_corpus(&[]));
        let model = toy_model(4);
        let mut budget = RetrievalBudget::new();
        let result = retrieve(&source, &["apple".to_string()], 3, &model, &mut budget);
        assert_eq!(result.s(), 0);
        assert_eq!(budget.retrieval_calls, 1);
        assert_eq!(budget.snippets_fetched, 0);
    }

    #[test]
    fn budget_counts_calls_and_snippets() {
        let source = CorpusIndex::build(hand_corpus(&[&["apple"], &["banana"]]));
        let model = toy_model(4);
        let mut budget = RetrievalBudget::new();
        retrieve(&source, &["apple".to_string()], 2, &model, &mut budget);
        retrieve(&source, &["banana".to_string()], 1, &model, &mut budget);
        assert_eq!(budget.retrieval_calls, 2);
        assert_eq!(budget.snippets_fetched, 3);
    }

    #[test]
    fn embed_mean_and_unk() {
        let model = toy_model(4);
        let apple = embed_snippet(&["apple".to_string()], &model);
        let row = model.vocab.row("apple");
        assert_eq!(apple.data(), model.token_embeddings.row(row));

        let banana = embed_snippet(&["banana".to_string()], &model);
        let pair = embed_snippet(&["apple".to_string(), "banana".to_string()], &model);
        for i in 0..4 {
            assert_abs_diff_eq!(
                pair.data()[i],
                (apple.data()[i] + banana.data()[i]) / 2.0,
                epsilon = 1e-15
            );
        }

        // [a, b, a] -> (2a + b) / 3, against direct summation.
        let aba = embed_snippet(
            &["apple".to_string(), "banana".to_string(), "apple".to_string()],
            &model,
        );
        for i in 0..4 {
            assert_abs_diff_eq!(
                aba.data()[i],
                (2.0 * apple.data()[i] + banana.data()[i]) / 3.0,
                epsilon = 1e-15
            );
        }

        let unk = embed_snippet(&[], &model);
        assert_eq!(unk.data(), model.token_embeddings.row(0));
        let junk = embed_snippet(&["qqzz".to_string()], &model);
        assert_eq!(junk.data(), model.token_embeddings.row(0));
    }

    #[test]
    fn embed_is_multiset_invariant() {
        let model = toy_model(4);
        let a = embed_snippet(
            &["apple".into(), "banana".into(), "cherry".into()],
            &model,
        );
        let b = embed_snippet(
            &["cherry".into(), "apple".into(), "banana".into()],
            &model,
        );
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    fn hand_parametric(entity_rows: Vec<Vec<f64>>, maps: Vec<Matrix>) -> ParametricParams {
        let d = entity_rows[0].len();
        let flat: Vec<f64> = entity_rows.iter().flatten().copied().collect();
        ParametricParams {
            entity_embeddings: Matrix::new(entity_rows.len(), d, flat).unwrap(),
            relation_maps: maps,
        }
    }

    #[test]
    fn parametric_zero_map_falls_back_to_entity_order() {
        let params = hand_parametric(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![Matrix::zeros(2, 2)],
        );
        let state = Vector::new(vec![0.3, 0.7]).unwrap();
        let mut budget = RetrievalBudget::new();
        let result =
            parametric_propose(&state, RelationId(0), &params, 3, &mut budget).unwrap();
        let ids: Vec<EntityId> = result
            .snippets
            .iter()
            .map(|s| match s.snippet {
                SnippetRef::Parametric { entity, .. } => entity,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(ids, vec![EntityId(0), EntityId(1), EntityId(2)]);
    }

    #[test]
    fn parametric_identity_map_maximizes_aligned_entity() {
        let params = hand_parametric(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![Matrix::identity(2)],
        );
        let state = Vector::new(vec![0.0, 1.0]).unwrap();
        let mut budget = RetrievalBudget::new();
        let result =
            parametric_propose(&state, RelationId(0), &params, 1, &mut budget).unwrap();
        assert_eq!(
            result.snippets[0].snippet,
            SnippetRef::Parametric {
                relation: RelationId(0),
                entity: EntityId(1)
            }
        );
    }

    #[test]
    fn parametric_matches_brute_force_on_random_instance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let entities: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let map = Matrix::new(
            d,
            d,
            (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let state = Vector::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        // Brute force: score every entity directly as stateᵀ M E_e.
        let mut brute: Vec<(usize, f64)> = entities
            .iter()
            .enumerate()
            .map(|(e, row)| {
                let me = map.matvec(&Vector::new(row.clone()).unwrap()).unwrap();
                (e, state.dot(&me).unwrap())
            })
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let params = hand_parametric(entities, vec![map]);
        let mut budget = RetrievalBudget::new();
        let result =
            parametric_propose(&state, RelationId(0), &params, 5, &mut budget).unwrap();
        let got: Vec<usize> = result
            .snippets
            .iter()
            .map(|s| match s.snippet {
                SnippetRef::Parametric { entity, .. } => entity.index(),
                _ => unreachable!(),
            })
            .collect();
        let expect: Vec<usize> = brute.iter().map(|(e, _)| *e).collect();
        assert_eq!(got, expect);
        // Scores are softmax-normalized and non-increasing.
        let scores: Vec<f64> = result.snippets.iter().map(|s| s.score).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        let total: f64 = scores.iter().sum();
        assert!(total <= 1.0 + 1e-12);
    }

    #[test]
    fn parametric_unknown_relation_errors() {
        let params = hand_parametric(vec![vec![1.0]], vec![]);
        let state = Vector::new(vec![1.0]).unwrap();
        let mut budget = RetrievalBudget::new();
        assert!(matches!(
            parametric_propose(&state, RelationId(9), &params, 1, &mut budget),
            Err(SourceError::UnknownRelation(RelationId(9)))
        ));
    }

    #[test]
    fn index_round_trip_and_regeneration() {
        let corpus = hand_corpus(&[&["apple", "banana"], &["cherry"]]);
        let built = CorpusIndex::build(corpus.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus_0.index.json");
        built.save_index(&path).unwrap();

        let loaded = CorpusIndex::load_or_build(corpus.clone(), &path);
        assert_eq!(loaded.index.df, built.index.df);

        // Missing or stale index files fall back to a rebuild.
        let rebuilt = CorpusIndex::load_or_build(corpus, dir.path().join("missing.json").as_path());
        assert_eq!(rebuilt.index.df, built.index.df);
    }
}

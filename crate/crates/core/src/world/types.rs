//! Core identifiers and data shapes for the synthetic knowledge world.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("not enough chains for {hops}-hop tasks: requested {requested}, available {available}")]
    InsufficientChains {
        hops: u8,
        requested: usize,
        available: usize,
    },
    #[error("source {0} is not a text corpus")]
    ParametricCorpus(String),
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }
    };
}

id_type!(EntityId);
id_type!(RelationId);
id_type!(FactId);
id_type!(SnippetId);
id_type!(TaskId);

/// A knowledge source: the parametric store or one external corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Parametric,
    Corpus(u32),
}

impl Source {
    pub fn tag(&self) -> String {
        match self {
            Source::Parametric => "parametric".to_string(),
            Source::Corpus(k) => format!("corpus_{k}"),
        }
    }

    pub fn parse(tag: &str) -> Option<Source> {
        if tag == "parametric" {
            return Some(Source::Parametric);
        }
        tag.strip_prefix("corpus_")
            .and_then(|k| k.parse().ok())
            .map(Source::Corpus)
    }
}

impl Serialize for Source {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.tag())
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tag = String::deserialize(d)?;
        Source::parse(&tag).ok_or_else(|| serde::de::Error::custom(format!("bad source tag {tag}")))
    }
}

/// One (head, relation, tail) edge assigned to exactly one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub source_tag: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub name: String,
}

/// Generator knobs. Serialized into the header record of every artifact
/// so worlds can be regenerated and validated from files alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Total entity pool (chain nodes, decoy sinks, and spare fillers).
    pub entity_count: usize,
    /// Number of primary relations; synonym relations are derived.
    pub relation_count: usize,
    /// Number of external text corpora.
    pub n_sources: usize,
    /// Guaranteed number of 4-edge backbone chains.
    pub min_chains: usize,
    /// Upper bound on outgoing facts per entity.
    pub max_facts_per_entity: usize,
    /// Fraction of backbone edges stored only in the parametric source.
    pub parametric_share: f64,
    /// Corpus-tagged synonym copies of each backbone edge.
    pub synonyms_per_edge: usize,
    /// Probability of emitting each eligible decoy edge.
    pub decoy_density: f64,
    /// Render entity surface names as two tokens.
    pub two_token_entities: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            entity_count: 300,
            relation_count: 8,
            n_sources: 2,
            min_chains: 44,
            max_facts_per_entity: 8,
            parametric_share: 0.3,
            synonyms_per_edge: 2,
            decoy_density: 1.0,
            two_token_entities: false,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entity_count < 20 {
            return Err(WorldError::Infeasible(format!(
                "entity_count {} < 20",
                self.entity_count
            )));
        }
        if self.relation_count < 4 {
            return Err(WorldError::Infeasible(format!(
                "relation_count {} < 4",
                self.relation_count
            )));
        }
        if self.n_sources < 2 {
            return Err(WorldError::Infeasible(format!(
                "n_sources {} < 2",
                self.n_sources
            )));
        }
        if !(0.0..=1.0).contains(&self.parametric_share) {
            return Err(WorldError::Infeasible(
                "parametric_share outside [0,1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.decoy_density) {
            return Err(WorldError::Infeasible("decoy_density outside [0,1]".into()));
        }
        // Each chain consumes 5 node entities plus one decoy sink.
        let needed = self.min_chains * 6;
        if self.entity_count < needed {
            return Err(WorldError::Infeasible(format!(
                "cannot place {} chains in {} entities ({needed} needed)",
                self.min_chains, self.entity_count
            )));
        }
        if self.max_facts_per_entity < 1 + self.synonyms_per_edge {
            return Err(WorldError::Infeasible(
                "max_facts_per_entity too small for synonym edges".into(),
            ));
        }
        Ok(())
    }
}

/// The generated world: entity/relation tables plus the global fact list.
///
/// Lookup maps are rebuilt on construction and not serialized.
#[derive(Debug, Clone)]
pub struct WorldSpec {
    pub config: WorldConfig,
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    pub n_sources: usize,
    facts_by_head: BTreeMap<EntityId, Vec<FactId>>,
    entity_by_name: BTreeMap<String, EntityId>,
    relation_by_name: BTreeMap<String, RelationId>,
}

impl WorldSpec {
    pub fn assemble(
        config: WorldConfig,
        seed: u64,
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        facts: Vec<Fact>,
    ) -> Result<Self> {
        let mut facts_by_head: BTreeMap<EntityId, Vec<FactId>> = BTreeMap::new();
        let mut functional: BTreeMap<(EntityId, RelationId), EntityId> = BTreeMap::new();
        for (i, f) in facts.iter().enumerate() {
            if f.head == f.tail {
                return Err(WorldError::InvalidRecord(format!(
                    "fact {i} is a self-loop on entity {}",
                    f.head
                )));
            }
            if f.head.index() >= entities.len() || f.tail.index() >= entities.len() {
                return Err(WorldError::UnknownId(format!("entity in fact {i}")));
            }
            if f.relation.index() >= relations.len() {
                return Err(WorldError::UnknownId(format!("relation in fact {i}")));
            }
            if let Some(prev) = functional.insert((f.head, f.relation), f.tail) {
                if prev != f.tail {
                    return Err(WorldError::InvalidRecord(format!(
                        "functional violation at ({}, {})",
                        f.head, f.relation
                    )));
                }
            }
            facts_by_head
                .entry(f.head)
                .or_default()
                .push(FactId(i as u32));
        }
        let entity_by_name = entities.iter().map(|e| (e.name.clone(), e.id)).collect();
        let relation_by_name = relations.iter().map(|r| (r.name.clone(), r.id)).collect();
        let n_sources = config.n_sources;
        Ok(Self {
            config,
            seed,
            entities,
            relations,
            facts,
            n_sources,
            facts_by_head,
            entity_by_name,
            relation_by_name,
        })
    }

    pub fn fact(&self, id: FactId) -> &Fact {
        &self.facts[id.index()]
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.index()].name
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id.index()].name
    }

    pub fn entity_by_name(&self, name: &str) -> Option<EntityId> {
        self.entity_by_name.get(name).copied()
    }

    pub fn relation_by_name(&self, name: &str) -> Option<RelationId> {
        self.relation_by_name.get(name).copied()
    }

    pub fn facts_from(&self, head: EntityId) -> &[FactId] {
        self.facts_by_head
            .get(&head)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The unique tail for (head, relation), if such a fact exists.
    pub fn lookup(&self, head: EntityId, relation: RelationId) -> Option<FactId> {
        self.facts_from(head)
            .iter()
            .copied()
            .find(|&f| self.fact(f).relation == relation)
    }

    pub fn sources(&self) -> Vec<Source> {
        (0..self.n_sources as u32).map(Source::Corpus).collect()
    }
}

/// A multi-hop question with its gold reasoning chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub question: Vec<String>,
    pub gold_trajectory: Vec<FactId>,
    pub gold_answer: EntityId,
    pub hops: u8,
}

/// Where a snippet came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Fact(FactId),
    Noise,
    Conflict(FactId),
}

impl Provenance {
    pub fn encode(&self) -> String {
        match self {
            Provenance::Fact(id) => id.to_string(),
            Provenance::Noise => "NOISE".to_string(),
            Provenance::Conflict(id) => format!("CONFLICT:{id}"),
        }
    }

    pub fn decode(s: &str) -> Option<Provenance> {
        if s == "NOISE" {
            return Some(Provenance::Noise);
        }
        if let Some(rest) = s.strip_prefix("CONFLICT:") {
            return rest.parse().ok().map(|id| Provenance::Conflict(FactId(id)));
        }
        s.parse().ok().map(|id| Provenance::Fact(FactId(id)))
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.encode())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Provenance::decode(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("bad provenance {s}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub snippet_id: SnippetId,
    pub tokens: Vec<String>,
    pub provenance: Provenance,
}

/// Text corpus for one external source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub source_id: Source,
    pub snippets: Vec<Snippet>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.snippets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }
}

/// Record of which fact ids were removed and which snippets contradict
/// gold facts, accumulated across perturbation passes. Error
/// classification consumes this.
#[derive(Debug, Clone, Default)]
pub struct PerturbationLedger {
    pub omitted_facts: std::collections::BTreeSet<FactId>,
    pub conflicted_facts: std::collections::BTreeSet<FactId>,
}

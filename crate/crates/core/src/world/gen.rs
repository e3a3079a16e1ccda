//! World generation: backbone chains with synonym-duplicated edges and
//! decoy branches, plus task sampling over those chains.
//!
//! Every chain is 4 edges (5 nodes) with pairwise-distinct primary
//! relations, so 2..4-hop tasks always exist. Each primary edge gets a
//! configurable number of corpus-tagged synonym copies (same endpoints,
//! different relation), which is what lets reasoning survive when one
//! copy of the evidence disappears. Each of the first three nodes may
//! also get a decoy edge that reuses the relation of the *following*
//! chain edge and leads to a dead-end sink; questions mention that
//! relation, so a stepwise reader cannot tell the two apart from token
//! overlap alone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::text;
use super::types::*;
use crate::seed::subseed;

const NAME_SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ta", "re", "zu", "ne", "vo", "sa", "pi", "do", "fa", "gu", "he", "bi", "ru",
];

/// Vowel-free syllables for distractor text; concatenations can never
/// collide with generated names or template words.
const NOISE_SYLLABLES: [&str; 8] = ["qx", "zz", "vv", "kj", "wx", "qq", "zq", "xk"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub nodes: [EntityId; 5],
    pub sink: EntityId,
    /// Primary relation of each edge, in hop order.
    pub edge_relations: [RelationId; 4],
    /// Fact id of each primary edge.
    pub edge_facts: [FactId; 4],
    /// (node index, relation) of emitted decoy edges.
    pub decoys: Vec<(usize, RelationId)>,
}

struct Plan {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    facts: Vec<Fact>,
    chains: Vec<Chain>,
}

struct NamePool {
    rng: ChaCha8Rng,
    used: std::collections::BTreeSet<String>,
}

impl NamePool {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            used: text::TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn fresh(&mut self, two_tokens: bool) -> String {
        loop {
            let word = |rng: &mut ChaCha8Rng| {
                let n = rng.gen_range(2..=3);
                (0..n)
                    .map(|_| NAME_SYLLABLES[rng.gen_range(0..NAME_SYLLABLES.len())])
                    .collect::<String>()
            };
            let name = if two_tokens {
                format!("{} {}", word(&mut self.rng), word(&mut self.rng))
            } else {
                word(&mut self.rng)
            };
            if self.used.insert(name.clone()) {
                return name;
            }
        }
    }
}

pub fn distractor_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len)
        .map(|_| {
            let n = rng.gen_range(2..=3);
            (0..n)
                .map(|_| NOISE_SYLLABLES[rng.gen_range(0..NOISE_SYLLABLES.len())])
                .collect::<String>()
        })
        .collect()
}

fn build_plan(config: &WorldConfig, seed: u64) -> Result<Plan> {
    config.validate()?;
    let mut names = NamePool::new(subseed(seed, "names"));
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "structure"));

    let entities: Vec<Entity> = (0..config.entity_count)
        .map(|i| Entity {
            id: EntityId(i as u32),
            name: names.fresh(config.two_token_entities),
        })
        .collect();

    // Relation table: primaries first, then synonym relations grouped by
    // the primary they mirror.
    let n_primary = config.relation_count;
    let total_relations = n_primary * (1 + config.synonyms_per_edge);
    let relations: Vec<Relation> = (0..total_relations)
        .map(|i| Relation {
            id: RelationId(i as u32),
            name: names.fresh(false),
        })
        .collect();
    let synonym_of = |primary: RelationId, k: usize| -> RelationId {
        RelationId((n_primary + primary.index() * config.synonyms_per_edge + k) as u32)
    };

    let mut entity_order: Vec<usize> = (0..config.entity_count).collect();
    entity_order.shuffle(&mut rng);
    let mut next_entity = entity_order.into_iter();

    let primary_ids: Vec<RelationId> = (0..n_primary).map(|i| RelationId(i as u32)).collect();

    let mut facts: Vec<Fact> = Vec::new();
    let mut outgoing: BTreeMap<EntityId, usize> = BTreeMap::new();
    let mut chains = Vec::with_capacity(config.min_chains);

    let push_fact =
        |facts: &mut Vec<Fact>, outgoing: &mut BTreeMap<EntityId, usize>, fact: Fact| -> FactId {
            *outgoing.entry(fact.head).or_default() += 1;
            facts.push(fact);
            FactId(facts.len() as u32 - 1)
        };

    for _ in 0..config.min_chains {
        let mut nodes = [EntityId(0); 5];
        for n in &mut nodes {
            *n = EntityId(next_entity.next().expect("validated entity budget") as u32);
        }
        let sink = EntityId(next_entity.next().expect("validated entity budget") as u32);

        let mut rels = primary_ids.clone();
        rels.shuffle(&mut rng);
        let edge_relations = [rels[0], rels[1], rels[2], rels[3]];

        let mut edge_facts = [FactId(0); 4];
        for (i, ef) in edge_facts.iter_mut().enumerate() {
            let source = if rng.gen_bool(config.parametric_share) {
                Source::Parametric
            } else {
                Source::Corpus(rng.gen_range(0..config.n_sources) as u32)
            };
            *ef = push_fact(
                &mut facts,
                &mut outgoing,
                Fact {
                    head: nodes[i],
                    relation: edge_relations[i],
                    tail: nodes[i + 1],
                    source_tag: source,
                },
            );
        }

        for i in 0..4 {
            for k in 0..config.synonyms_per_edge {
                let source = Source::Corpus(rng.gen_range(0..config.n_sources) as u32);
                push_fact(
                    &mut facts,
                    &mut outgoing,
                    Fact {
                        head: nodes[i],
                        relation: synonym_of(edge_relations[i], k),
                        tail: nodes[i + 1],
                        source_tag: source,
                    },
                );
            }
        }

        let mut decoys = Vec::new();
        for i in 0..3 {
            let emit = rng.gen_bool(config.decoy_density);
            let source = Source::Corpus(rng.gen_range(0..config.n_sources) as u32);
            if emit && outgoing.get(&nodes[i]).copied().unwrap_or(0) < config.max_facts_per_entity
            {
                // Relation of the *next* edge: present in any question
                // window that starts here with depth >= 2.
                let decoy_rel = edge_relations[i + 1];
                push_fact(
                    &mut facts,
                    &mut outgoing,
                    Fact {
                        head: nodes[i],
                        relation: decoy_rel,
                        tail: sink,
                        source_tag: source,
                    },
                );
                decoys.push((i, decoy_rel));
            }
        }

        chains.push(Chain {
            nodes,
            sink,
            edge_relations,
            edge_facts,
            decoys,
        });
    }

    Ok(Plan {
        entities,
        relations,
        facts,
        chains,
    })
}

/// Deterministic function of (config, seed).
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<WorldSpec> {
    let plan = build_plan(config, seed)?;
    WorldSpec::assemble(
        config.clone(),
        seed,
        plan.entities,
        plan.relations,
        plan.facts,
    )
}

/// Re-derive the backbone chains of a generated world from its embedded
/// (config, seed) and check them against the actual fact table.
pub fn chain_plan(world: &WorldSpec) -> Result<Vec<Chain>> {
    let plan = build_plan(&world.config, world.seed)?;
    if plan.facts.len() != world.facts.len() {
        return Err(WorldError::InvalidRecord(
            "world facts do not match its generator plan".into(),
        ));
    }
    for chain in &plan.chains {
        for (i, fid) in chain.edge_facts.iter().enumerate() {
            let f = world.fact(*fid);
            if f.head != chain.nodes[i] || f.tail != chain.nodes[i + 1] {
                return Err(WorldError::InvalidRecord(
                    "world facts do not match its generator plan".into(),
                ));
            }
        }
    }
    Ok(plan.chains)
}

fn sample_tasks(
    world: &WorldSpec,
    chains: &[Chain],
    chain_subset: &[usize],
    hop_mix: &BTreeMap<u8, usize>,
    seed: u64,
) -> Result<Vec<Task>> {
    for h in hop_mix.keys() {
        if !(2..=4).contains(h) {
            return Err(WorldError::Infeasible(format!("hop depth {h} outside 2..4")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "tasks"));
    let mut tasks = Vec::new();
    for (&hops, &count) in hop_mix {
        let h = hops as usize;
        let mut slots: Vec<(usize, usize)> = chain_subset
            .iter()
            .flat_map(|&c| (0..=(4 - h)).map(move |s| (c, s)))
            .collect();
        if slots.len() < count {
            return Err(WorldError::InsufficientChains {
                hops,
                requested: count,
                available: slots.len(),
            });
        }
        slots.shuffle(&mut rng);
        for &(c, s) in slots.iter().take(count) {
            let chain = &chains[c];
            let gold_trajectory: Vec<FactId> = chain.edge_facts[s..s + h].to_vec();
            let rel_names: Vec<&str> = chain.edge_relations[s..s + h]
                .iter()
                .map(|r| world.relation_name(*r))
                .collect();
            let question = text::question_tokens(&rel_names, world.entity_name(chain.nodes[s]));
            tasks.push(Task {
                id: TaskId(tasks.len() as u32),
                question,
                gold_trajectory,
                gold_answer: chain.nodes[s + h],
                hops,
            });
        }
    }
    Ok(tasks)
}

/// Sample tasks with exact per-depth counts over the whole chain pool.
pub fn generate_tasks(
    world: &WorldSpec,
    hop_mix: &BTreeMap<u8, usize>,
    seed: u64,
) -> Result<Vec<Task>> {
    let chains = chain_plan(world)?;
    let all: Vec<usize> = (0..chains.len()).collect();
    sample_tasks(world, &chains, &all, hop_mix, seed)
}

/// Disjoint train/eval task sets drawn from disjoint chain halves, so
/// evaluation questions mention entities never seen in training.
pub fn generate_task_split(
    world: &WorldSpec,
    train_mix: &BTreeMap<u8, usize>,
    eval_mix: &BTreeMap<u8, usize>,
    seed: u64,
) -> Result<(Vec<Task>, Vec<Task>)> {
    let chains = chain_plan(world)?;
    let mut order: Vec<usize> = (0..chains.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "split"));
    order.shuffle(&mut rng);
    let half = chains.len() / 2;
    let train_chains = &order[..half];
    let eval_chains = &order[half..];
    let train = sample_tasks(world, &chains, train_chains, train_mix, subseed(seed, "tr"))?;
    let mut eval = sample_tasks(world, &chains, eval_chains, eval_mix, subseed(seed, "ev"))?;
    // Task ids must stay unique across the two sets.
    for (i, t) in eval.iter_mut().enumerate() {
        t.id = TaskId((train.len() + i) as u32);
    }
    Ok((train, eval))
}

/// Render every fact tagged with `source` as one template snippet.
pub fn emit_corpus(world: &WorldSpec, source: Source) -> Result<Corpus> {
    let corpus_idx = match source {
        Source::Parametric => return Err(WorldError::ParametricCorpus(source.tag())),
        Source::Corpus(k) => k,
    };
    if corpus_idx as usize >= world.n_sources {
        return Err(WorldError::UnknownId(source.tag()));
    }
    let mut snippets = Vec::new();
    for (i, fact) in world.facts.iter().enumerate() {
        if fact.source_tag != source {
            continue;
        }
        let tokens = text::fact_tokens(
            world.relation_name(fact.relation),
            world.entity_name(fact.head),
            world.entity_name(fact.tail),
        );
        snippets.push(Snippet {
            snippet_id: SnippetId(snippets.len() as u32),
            tokens,
            provenance: Provenance::Fact(FactId(i as u32)),
        });
    }
    Ok(Corpus {
        source_id: source,
        snippets,
    })
}

/// Emit every external corpus of a world, in source order.
pub fn emit_all_corpora(world: &WorldSpec) -> Result<Vec<Corpus>> {
    world
        .sources()
        .into_iter()
        .map(|s| emit_corpus(world, s))
        .collect()
}

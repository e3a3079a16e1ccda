//! Surface-form handling: name rendering, fact/question templates, the
//! template parsers, and the token vocabulary.

use std::collections::BTreeMap;

use super::types::{EntityId, RelationId, WorldSpec};

pub const UNK_TOKEN: &str = "<unk>";
pub const TEMPLATE_WORDS: [&str; 4] = ["what", "is", "the", "of"];

/// Underscores in surface names render as spaces, so a name like
/// `capital_of` becomes the two tokens `capital of`.
pub fn render_name(name: &str) -> String {
    name.replace('_', " ")
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_string()).collect()
}

/// "the <relation> of <head> is <tail>", whitespace-tokenized.
pub fn fact_tokens(relation: &str, head: &str, tail: &str) -> Vec<String> {
    tokenize(&format!(
        "the {} of {} is {}",
        render_name(relation),
        render_name(head),
        render_name(tail)
    ))
}

/// "what is the <r_m> of the <r_{m-1}> of ... the <r_1> of <anchor>".
/// `relations` is given in execution order (first hop first).
pub fn question_tokens(relations: &[&str], anchor: &str) -> Vec<String> {
    let mut text = String::from("what is");
    for r in relations.iter().rev() {
        text.push_str(" the ");
        text.push_str(&render_name(r));
        text.push_str(" of");
    }
    text.push(' ');
    text.push_str(&render_name(anchor));
    tokenize(&text)
}

/// Longest-prefix match of a rendered name against `tokens`, using the
/// provided rendered-name table. Returns (id, tokens consumed).
fn match_name<T: Copy>(tokens: &[String], table: &BTreeMap<Vec<String>, T>) -> Option<(T, usize)> {
    let max_len = table.keys().map(Vec::len).max().unwrap_or(0);
    for len in (1..=max_len.min(tokens.len())).rev() {
        if let Some(&id) = table.get(&tokens[..len].to_vec()) {
            return Some((id, len));
        }
    }
    None
}

/// Rendered-name lookup tables for a world.
pub struct NameTables {
    entities: BTreeMap<Vec<String>, EntityId>,
    relations: BTreeMap<Vec<String>, RelationId>,
}

impl NameTables {
    pub fn new(world: &WorldSpec) -> Self {
        let entities = world
            .entities
            .iter()
            .map(|e| (tokenize(&render_name(&e.name)), e.id))
            .collect();
        let relations = world
            .relations
            .iter()
            .map(|r| (tokenize(&render_name(&r.name)), r.id))
            .collect();
        Self {
            entities,
            relations,
        }
    }

    /// Parse "the <relation> of <head> is <tail>" back into ids.
    /// Returns None for anything that does not exactly match the
    /// template (distractor text, junk names).
    pub fn parse_fact(&self, tokens: &[String]) -> Option<(EntityId, RelationId, EntityId)> {
        let mut rest = tokens;
        rest = strip_word(rest, "the")?;
        let (relation, used) = match_name(rest, &self.relations)?;
        rest = &rest[used..];
        rest = strip_word(rest, "of")?;
        let (head, used) = match_name(rest, &self.entities)?;
        rest = &rest[used..];
        rest = strip_word(rest, "is")?;
        let (tail, used) = match_name(rest, &self.entities)?;
        rest = &rest[used..];
        if rest.is_empty() {
            Some((head, relation, tail))
        } else {
            None
        }
    }

    /// Parse a question into (relations in execution order, anchor).
    pub fn parse_question(&self, tokens: &[String]) -> Option<(Vec<RelationId>, EntityId)> {
        let mut rest = tokens;
        rest = strip_word(rest, "what")?;
        rest = strip_word(rest, "is")?;
        let mut surface_order = Vec::new();
        while let Some(after_the) = strip_word(rest, "the") {
            let (relation, used) = match_name(after_the, &self.relations)?;
            let after_rel = &after_the[used..];
            rest = strip_word(after_rel, "of")?;
            surface_order.push(relation);
        }
        if surface_order.is_empty() {
            return None;
        }
        let (anchor, used) = match_name(rest, &self.entities)?;
        if !rest[used..].is_empty() {
            return None;
        }
        // The question lists relations outermost-first; execution runs
        // innermost-first.
        surface_order.reverse();
        Some((surface_order, anchor))
    }
}

fn strip_word<'a>(tokens: &'a [String], word: &str) -> Option<&'a [String]> {
    match tokens.first() {
        Some(t) if t == word => Some(&tokens[1..]),
        _ => None,
    }
}

/// Token table shared by every embedding consumer. Row 0 is the UNK row;
/// every token the world can render maps to a fixed row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build(world: &WorldSpec) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for w in TEMPLATE_WORDS {
            set.insert(w.to_string());
        }
        for e in &world.entities {
            for t in tokenize(&render_name(&e.name)) {
                set.insert(t);
            }
        }
        for r in &world.relations {
            for t in tokenize(&render_name(&r.name)) {
                set.insert(t);
            }
        }
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(set);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Row for a token; unknown tokens map to the UNK row.
    pub fn row(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn rows(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.row(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::types::{Entity, Fact, Relation, Source, WorldConfig};

    fn tiny_world() -> WorldSpec {
        let entities = vec![
            Entity {
                id: EntityId(0),
                name: "paris".into(),
            },
            Entity {
                id: EntityId(1),
                name: "france".into(),
            },
        ];
        let relations = vec![Relation {
            id: RelationId(0),
            name: "capital_of".into(),
        }];
        let facts = vec![Fact {
            head: EntityId(0),
            relation: RelationId(0),
            tail: EntityId(1),
            source_tag: Source::Corpus(0),
        }];
        let mut config = WorldConfig::default();
        config.entity_count = 20;
        config.min_chains = 0;
        WorldSpec::assemble(config, 0, entities, relations, facts).unwrap()
    }

    #[test]
    fn fact_template_renders_underscores_as_spaces() {
        let toks = fact_tokens("capital_of", "paris", "france");
        assert_eq!(
            toks,
            vec!["the", "capital", "of", "of", "paris", "is", "france"]
        );
    }

    #[test]
    fn fact_parse_round_trips() {
        let world = tiny_world();
        let tables = NameTables::new(&world);
        let toks = fact_tokens("capital_of", "paris", "france");
        let parsed = tables.parse_fact(&toks).unwrap();
        assert_eq!(parsed, (EntityId(0), RelationId(0), EntityId(1)));
    }

    #[test]
    fn junk_does_not_parse() {
        let world = tiny_world();
        let tables = NameTables::new(&world);
        let junk = tokenize("qx zz vv kj");
        assert!(tables.parse_fact(&junk).is_none());
        let truncated = tokenize("the capital of of paris is");
        assert!(tables.parse_fact(&truncated).is_none());
    }

    #[test]
    fn question_template_and_parse() {
        let world = tiny_world();
        let tables = NameTables::new(&world);
        let q = question_tokens(&["capital_of"], "paris");
        assert_eq!(q, vec!["what", "is", "the", "capital", "of", "of", "paris"]);
        let (rels, anchor) = tables.parse_question(&q).unwrap();
        assert_eq!(rels, vec![RelationId(0)]);
        assert_eq!(anchor, EntityId(0));
    }

    #[test]
    fn question_parse_execution_order_is_reversed() {
        let entities = vec![
            Entity {
                id: EntityId(0),
                name: "ka".into(),
            },
            Entity {
                id: EntityId(1),
                name: "lo".into(),
            },
            Entity {
                id: EntityId(2),
                name: "mi".into(),
            },
        ];
        let relations = vec![
            Relation {
                id: RelationId(0),
                name: "rone".into(),
            },
            Relation {
                id: RelationId(1),
                name: "rtwo".into(),
            },
        ];
        let facts = vec![
            Fact {
                head: EntityId(0),
                relation: RelationId(0),
                tail: EntityId(1),
                source_tag: Source::Corpus(0),
            },
            Fact {
                head: EntityId(1),
                relation: RelationId(1),
                tail: EntityId(2),
                source_tag: Source::Corpus(1),
            },
        ];
        let mut config = WorldConfig::default();
        config.entity_count = 20;
        config.min_chains = 0;
        let world = WorldSpec::assemble(config, 0, entities, relations, facts).unwrap();
        let tables = NameTables::new(&world);

        // Execution order rone-then-rtwo renders as "the rtwo of the rone of ka".
        let q = question_tokens(&["rone", "rtwo"], "ka");
        assert_eq!(
            q,
            vec!["what", "is", "the", "rtwo", "of", "the", "rone", "of", "ka"]
        );
        let (rels, anchor) = tables.parse_question(&q).unwrap();
        assert_eq!(rels, vec![RelationId(0), RelationId(1)]);
        assert_eq!(anchor, EntityId(0));
    }

    #[test]
    fn vocab_maps_unknowns_to_row_zero() {
        let world = tiny_world();
        let vocab = Vocab::build(&world);
        assert_eq!(vocab.row("qqzzxx"), 0);
        assert_ne!(vocab.row("paris"), 0);
        assert_ne!(vocab.row("the"), 0);
    }
}

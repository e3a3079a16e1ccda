//! JSON Lines persistence for worlds, tasks, and corpora.
//!
//! Every file starts with a header record carrying the format version,
//! the generating seed, and the world config, followed by one record
//! per entity/relation/fact/task/snippet.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::*;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record {
    Header {
        format_version: u32,
        seed: u64,
        config: WorldConfig,
    },
    Entity {
        id: EntityId,
        name: String,
    },
    Relation {
        id: RelationId,
        name: String,
    },
    Fact {
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
        source_tag: Source,
    },
    Task {
        id: TaskId,
        question: Vec<String>,
        gold_trajectory: Vec<FactId>,
        gold_answer: EntityId,
        hops: u8,
    },
    Snippet {
        snippet_id: SnippetId,
        tokens: Vec<String>,
        provenance: Provenance,
    },
}

fn write_records(path: &Path, records: impl Iterator<Item = Record>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<(u64, WorldConfig, Vec<Record>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| WorldError::InvalidRecord(format!("{}: empty file", path.display())))??;
    let header: Record = serde_json::from_str(&first)?;
    let (seed, config) = match header {
        Record::Header {
            format_version,
            seed,
            config,
        } => {
            if format_version != FORMAT_VERSION {
                return Err(WorldError::InvalidRecord(format!(
                    "unsupported format_version {format_version}"
                )));
            }
            (seed, config)
        }
        _ => {
            return Err(WorldError::InvalidRecord(format!(
                "{}: first record is not a header",
                path.display()
            )))
        }
    };
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((seed, config, records))
}

fn header(world: &WorldSpec) -> Record {
    Record::Header {
        format_version: FORMAT_VERSION,
        seed: world.seed,
        config: world.config.clone(),
    }
}

pub fn save_world(world: &WorldSpec, path: &Path) -> Result<()> {
    let records = std::iter::once(header(world))
        .chain(world.entities.iter().map(|e| Record::Entity {
            id: e.id,
            name: e.name.clone(),
        }))
        .chain(world.relations.iter().map(|r| Record::Relation {
            id: r.id,
            name: r.name.clone(),
        }))
        .chain(world.facts.iter().map(|f| Record::Fact {
            head: f.head,
            relation: f.relation,
            tail: f.tail,
            source_tag: f.source_tag,
        }));
    write_records(path, records)
}

pub fn load_world(path: &Path) -> Result<WorldSpec> {
    let (seed, config, records) = read_records(path)?;
    let mut entities = Vec::new();
    let mut relations = Vec::new();
    let mut facts = Vec::new();
    for r in records {
        match r {
            Record::Entity { id, name } => entities.push(Entity { id, name }),
            Record::Relation { id, name } => relations.push(Relation { id, name }),
            Record::Fact {
                head,
                relation,
                tail,
                source_tag,
            } => facts.push(Fact {
                head,
                relation,
                tail,
                source_tag,
            }),
            other => {
                return Err(WorldError::InvalidRecord(format!(
                    "unexpected record in world file: {other:?}"
                )))
            }
        }
    }
    WorldSpec::assemble(config, seed, entities, relations, facts)
}

pub fn save_tasks(world: &WorldSpec, tasks: &[Task], path: &Path) -> Result<()> {
    let records = std::iter::once(header(world)).chain(tasks.iter().map(|t| Record::Task {
        id: t.id,
        question: t.question.clone(),
        gold_trajectory: t.gold_trajectory.clone(),
        gold_answer: t.gold_answer,
        hops: t.hops,
    }));
    write_records(path, records)
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let (_, _, records) = read_records(path)?;
    records
        .into_iter()
        .map(|r| match r {
            Record::Task {
                id,
                question,
                gold_trajectory,
                gold_answer,
                hops,
            } => Ok(Task {
                id,
                question,
                gold_trajectory,
                gold_answer,
                hops,
            }),
            other => Err(WorldError::InvalidRecord(format!(
                "unexpected record in task file: {other:?}"
            ))),
        })
        .collect()
}

pub fn corpus_file_name(source: Source) -> String {
    format!("{}.jsonl", source.tag())
}

pub fn save_corpus(world: &WorldSpec, corpus: &Corpus, path: &Path) -> Result<()> {
    let records = std::iter::once(header(world)).chain(corpus.snippets.iter().map(|s| {
        Record::Snippet {
            snippet_id: s.snippet_id,
            tokens: s.tokens.clone(),
            provenance: s.provenance,
        }
    }));
    write_records(path, records)
}

pub fn load_corpus(path: &Path, source: Source) -> Result<Corpus> {
    let (_, _, records) = read_records(path)?;
    let snippets = records
        .into_iter()
        .map(|r| match r {
            Record::Snippet {
                snippet_id,
                tokens,
                provenance,
            } => Ok(Snippet {
                snippet_id,
                tokens,
                provenance,
            }),
            other => Err(WorldError::InvalidRecord(format!(
                "unexpected record in corpus file: {other:?}"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        source_id: source,
        snippets,
    })
}

/// Write world.jsonl, tasks.jsonl, and one corpus file per source into
/// a directory.
pub fn save_bundle(world: &WorldSpec, tasks: &[Task], corpora: &[Corpus], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_world(world, &dir.join("world.jsonl"))?;
    save_tasks(world, tasks, &dir.join("tasks.jsonl"))?;
    for c in corpora {
        save_corpus(world, c, &dir.join(corpus_file_name(c.source_id)))?;
    }
    Ok(())
}

pub struct Bundle {
    pub world: WorldSpec,
    pub tasks: Vec<Task>,
    pub corpora: Vec<Corpus>,
}

pub fn load_bundle(dir: &Path) -> Result<Bundle> {
    let world = load_world(&dir.join("world.jsonl"))?;
    let tasks_path: PathBuf = dir.join("tasks.jsonl");
    let tasks = if tasks_path.exists() {
        load_tasks(&tasks_path)?
    } else {
        Vec::new()
    };
    let corpora = world
        .sources()
        .into_iter()
        .map(|s| load_corpus(&dir.join(corpus_file_name(s)), s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Bundle {
        world,
        tasks,
        corpora,
    })
}

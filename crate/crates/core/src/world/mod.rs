//! Synthetic multi-hop world: knowledge graph generation, task
//! sampling, corpus rendering, perturbations, and JSONL persistence.

mod gen;
mod io;
mod perturb;
pub mod text;
mod types;

pub use gen::{
    chain_plan, emit_all_corpora, emit_corpus, generate_task_split, generate_tasks, generate_world,
    Chain,
};
pub use io::{
    corpus_file_name, load_bundle, load_corpus, load_tasks, load_world, save_bundle, save_corpus,
    save_tasks, save_world, Bundle, FORMAT_VERSION,
};
pub use perturb::{inject_conflicts, inject_noise, omit_facts, round_half_up};
pub use text::{NameTables, Vocab};
pub use types::{
    Corpus, Entity, EntityId, Fact, FactId, PerturbationLedger, Provenance, Relation, RelationId,
    Snippet, SnippetId, Source, Task, TaskId, WorldConfig, WorldError, WorldSpec,
};

pub type WorldResult<T> = types::Result<T>;

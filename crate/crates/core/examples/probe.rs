use hopfuse::eval::*;
use hopfuse::model::ModelParams;
use hopfuse::reasoner::{answer_head, BeamConfig, FactKey, InferenceFlags, QuestionContext, SourceSet};
use hopfuse::seed::subseed;
use hopfuse::training::train;
use hopfuse::world::NameTables;

fn main() {
    let mut cfg = ProtocolConfig::default();
    cfg.train.epochs = 15;
    cfg.train.lr = 0.1;
    let env = build_environment(&cfg, 0).unwrap();
    let beam: BeamConfig = (&cfg.beam).into();
    let world = &env.world;
    let tables = NameTables::new(world);
    let sources = SourceSet::build(env.corpora.clone());

    // Candidate coverage along gold trajectories (teacher frontiers),
    // with the *initial* model (retrieval is parameter-free for corpus
    // facts; parametric proposals depend on memorization).
    let (trained, _) = train(&env.world, &env.corpora, &env.train_tasks, &beam, &cfg.train, subseed(0, "train")).unwrap();
    let init = ModelParams::init(world, cfg.train.d, subseed(0, "train"));

    for (name, model) in [("init", &init), ("trained", &trained)] {
        let mut missing = 0;
        let mut missing_by_tag = std::collections::BTreeMap::new();
        let mut total = 0;
        for task in &env.eval_tasks {
            let mut ctx = QuestionContext::new(world, &tables, model, &sources, &task.question, beam.clone(), InferenceFlags::default()).unwrap();
            for (depth, &fid) in task.gold_trajectory.iter().enumerate() {
                let f = world.fact(fid);
                let key = FactKey { head: f.head, relation: f.relation, tail: f.tail };
                let cands = ctx.propose_candidates(depth, f.head).unwrap();
                total += 1;
                if !cands.iter().any(|c| c.fact == key) {
                    missing += 1;
                    *missing_by_tag.entry(f.source_tag.tag()).or_insert(0usize) += 1;
                }
            }
        }
        // Answer-head decode check over all entities.
        let mut decode_ok = 0;
        let n = world.entities.len();
        for e in 0..n {
            let id = hopfuse::world::EntityId(e as u32);
            let mut ctx = QuestionContext::new(world, &tables, model, &sources, &env.eval_tasks[0].question, beam.clone(), InferenceFlags::default()).unwrap();
            let term = ctx.terminal_state(id).unwrap();
            let dist = answer_head(&term, model).unwrap();
            if dist.argmax == id { decode_ok += 1; }
        }
        println!("{name}: gold candidate missing {missing}/{total} (by tag {missing_by_tag:?}); endpoint decode {decode_ok}/{n}");
    }
}

//! Corpus perturbations: distractor noise, contradictory snippets, and
//! fact omission.
//!
//! Selection at level r touches exactly `round_half_up(r * n)` snippets.
//! The selection order is a seeded permutation that does not depend on
//! the level, so a higher level always perturbs a superset of a lower
//! one under the same seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gen::distractor_tokens;
use super::text;
use super::types::*;
use crate::seed::subseed_indexed;

/// Half-up rounding with a small tolerance for f64 representation error
/// near exact halves (0.35 * 10 evaluates just below 3.5).
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor() as usize
}

fn corpus_stream(source: Source) -> u64 {
    match source {
        Source::Parametric => u64::MAX,
        Source::Corpus(k) => k as u64,
    }
}

fn selection_order(corpus: &Corpus, seed: u64, tag: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(subseed_indexed(seed, tag, corpus_stream(corpus.source_id)));
    order.shuffle(&mut rng);
    order
}

/// Replace `round(noise_level * n)` snippets with distractor text drawn
/// from a vocabulary disjoint from the world's. Returns the perturbed
/// corpus and the fact ids whose snippets were replaced.
pub fn inject_noise(corpus: &Corpus, noise_level: f64, seed: u64) -> (Corpus, Vec<FactId>) {
    assert!(
        (0.0..=1.0).contains(&noise_level),
        "noise_level outside [0,1]"
    );
    let n_replace = round_half_up(noise_level * corpus.len() as f64);
    let order = selection_order(corpus, seed, "noise");
    let chosen: std::collections::BTreeSet<usize> = order.into_iter().take(n_replace).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(subseed_indexed(
        seed,
        "noise-text",
        corpus_stream(corpus.source_id),
    ));
    let mut replaced = Vec::new();
    let snippets = corpus
        .snippets
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if chosen.contains(&i) {
                if let Provenance::Fact(fid) = s.provenance {
                    replaced.push(fid);
                }
                let len = rng.gen_range(5..=8);
                Snippet {
                    snippet_id: s.snippet_id,
                    tokens: distractor_tokens(&mut rng, len),
                    provenance: Provenance::Noise,
                }
            } else {
                s.clone()
            }
        })
        .collect();
    replaced.sort_unstable();
    (
        Corpus {
            source_id: corpus.source_id,
            snippets,
        },
        replaced,
    )
}

/// Append a contradicting snippet (same head and relation, different
/// tail) for `round(rate * n)` fact-backed snippets.
pub fn inject_conflicts(corpus: &Corpus, world: &WorldSpec, rate: f64, seed: u64) -> Corpus {
    assert!((0.0..=1.0).contains(&rate), "rate outside [0,1]");
    let n_conflict = round_half_up(rate * corpus.len() as f64);
    let order = selection_order(corpus, seed, "conflict");

    let mut rng = ChaCha8Rng::seed_from_u64(subseed_indexed(
        seed,
        "conflict-tail",
        corpus_stream(corpus.source_id),
    ));
    let mut out = corpus.clone();
    let mut next_id = corpus.len() as u32;
    let mut taken = 0;
    for idx in order {
        if taken == n_conflict {
            break;
        }
        let snippet = &corpus.snippets[idx];
        let fid = match snippet.provenance {
            Provenance::Fact(fid) => fid,
            _ => continue,
        };
        let fact = world.fact(fid);
        // Any entity other than the true tail and the head itself.
        let mut wrong = EntityId(rng.gen_range(0..world.entities.len()) as u32);
        while wrong == fact.tail || wrong == fact.head {
            wrong = EntityId(rng.gen_range(0..world.entities.len()) as u32);
        }
        out.snippets.push(Snippet {
            snippet_id: SnippetId(next_id),
            tokens: text::fact_tokens(
                world.relation_name(fact.relation),
                world.entity_name(fact.head),
                world.entity_name(wrong),
            ),
            provenance: Provenance::Conflict(fid),
        });
        next_id += 1;
        taken += 1;
    }
    out
}

/// Remove `round(rate * n)` snippets. Returns the shrunken corpus and
/// the fact ids that are no longer attested.
pub fn omit_facts(
    corpus: &Corpus,
    _world: &WorldSpec,
    rate: f64,
    seed: u64,
) -> (Corpus, Vec<FactId>) {
    assert!((0.0..=1.0).contains(&rate), "rate outside [0,1]");
    let n_remove = round_half_up(rate * corpus.len() as f64);
    let order = selection_order(corpus, seed, "omit");
    let chosen: std::collections::BTreeSet<usize> = order.into_iter().take(n_remove).collect();

    let mut removed = Vec::new();
    let snippets = corpus
        .snippets
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if chosen.contains(&i) {
                if let Provenance::Fact(fid) = s.provenance {
                    removed.push(fid);
                }
                None
            } else {
                Some(s.clone())
            }
        })
        .collect();
    removed.sort_unstable();
    (
        Corpus {
            source_id: corpus.source_id,
            snippets,
        },
        removed,
    )
}

//! All trainable tensors, their seeded initialization, and the binary
//! checkpoint format.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusionParams;
use crate::linalg::{Matrix, Vector};
use crate::reasoner::StepScorerParams;
use crate::seed::subseed;
use crate::sources::ParametricParams;
use crate::world::{Vocab, WorldSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

/// Every trainable tensor in the pipeline. The vocab is carried along
/// so token rows always mean the same thing; it is derived from the
/// world, not stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub vocab: Vocab,
    pub token_embeddings: Matrix,
    pub parametric: ParametricParams,
    pub fusion: FusionParams,
    pub scorer: StepScorerParams,
    pub answer_projection: Matrix,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Matrix::new(rows, cols, data).expect("finite init")
}

/// Identity plus uniform noise. Used for the square projections so the
/// attention scores and answer logits start out as plain embedding dot
/// products; training then only has to reshape them, which converges
/// within the epoch budget where a fully random projection stack does
/// not.
fn near_identity(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Matrix {
    let mut m = uniform_matrix(rng, n, n, scale);
    for i in 0..n {
        let v = m.get(i, i) + 1.0;
        m.set(i, i, v);
    }
    m
}

impl ModelParams {
    /// Seeded uniform(-1/sqrt(d), 1/sqrt(d)) for embeddings and
    /// projections; biases start at zero.
    pub fn init(world: &WorldSpec, d: usize, seed: u64) -> Self {
        let vocab = Vocab::build(world);
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "init"));
        let scale = 1.0 / (d as f64).sqrt();
        let token_embeddings = uniform_matrix(&mut rng, vocab.len(), d, scale);
        let entity_embeddings = uniform_matrix(&mut rng, world.entities.len(), d, scale);
        let relation_maps = (0..world.relations.len())
            .map(|_| uniform_matrix(&mut rng, d, d, scale))
            .collect();
        let fusion = FusionParams {
            w_q: near_identity(&mut rng, d, scale),
            w_k: near_identity(&mut rng, d, scale),
            w_v: near_identity(&mut rng, d, scale),
        };
        let scorer = StepScorerParams {
            weight: uniform_matrix(&mut rng, d, d, scale),
            bias: Vector::zeros(d),
        };
        let answer_projection = near_identity(&mut rng, d, scale);
        Self {
            d,
            vocab,
            token_embeddings,
            parametric: ParametricParams {
                entity_embeddings,
                relation_maps,
            },
            fusion,
            scorer,
            answer_projection,
        }
    }

    pub fn mean_token_rows(&self, rows: &[usize]) -> Vector {
        if rows.is_empty() {
            return self.token_embeddings.row_vector(0);
        }
        let mut acc = vec![0.0; self.d];
        for &r in rows {
            for (a, x) in acc.iter_mut().zip(self.token_embeddings.row(r)) {
                *a += x;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for a in &mut acc {
            *a *= inv;
        }
        Vector::new(acc).expect("finite mean")
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![(
            "token_embeddings".into(),
            vec![self.token_embeddings.rows(), self.d],
            self.token_embeddings.data(),
        )];
        out.push((
            "entity_embeddings".into(),
            vec![self.parametric.entity_embeddings.rows(), self.d],
            self.parametric.entity_embeddings.data(),
        ));
        for (i, m) in self.parametric.relation_maps.iter().enumerate() {
            out.push((format!("relation_map_{i}"), vec![self.d, self.d], m.data()));
        }
        out.push(("w_q".into(), vec![self.d, self.d], self.fusion.w_q.data()));
        out.push(("w_k".into(), vec![self.d, self.d], self.fusion.w_k.data()));
        out.push(("w_v".into(), vec![self.d, self.d], self.fusion.w_v.data()));
        out.push((
            "scorer_weight".into(),
            vec![self.d, self.d],
            self.scorer.weight.data(),
        ));
        out.push(("scorer_bias".into(), vec![self.d], self.scorer.bias.data()));
        out.push((
            "answer_projection".into(),
            vec![self.d, self.d],
            self.answer_projection.data(),
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![(
            "token_embeddings".into(),
            self.token_embeddings.as_mut_slice(),
        )];
        out.push((
            "entity_embeddings".into(),
            self.parametric.entity_embeddings.as_mut_slice(),
        ));
        for (i, m) in self.parametric.relation_maps.iter_mut().enumerate() {
            out.push((format!("relation_map_{i}"), m.as_mut_slice()));
        }
        out.push(("w_q".into(), self.fusion.w_q.as_mut_slice()));
        out.push(("w_k".into(), self.fusion.w_k.as_mut_slice()));
        out.push(("w_v".into(), self.fusion.w_v.as_mut_slice()));
        out.push(("scorer_weight".into(), self.scorer.weight.as_mut_slice()));
        out.push(("scorer_bias".into(), self.scorer.bias.as_mut_slice()));
        out.push((
            "answer_projection".into(),
            self.answer_projection.as_mut_slice(),
        ));
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub d: usize,
    pub shapes: Vec<(String, Vec<usize>)>,
    pub seed: u64,
    pub config: serde_json::Value,
}

/// Single file: one JSON header line, then the tensors as little-endian
/// f64 payloads in declared order.
pub fn save_checkpoint(
    model: &ModelParams,
    seed: u64,
    config: serde_json::Value,
    path: &Path,
) -> Result<(), ModelError> {
    let tensors = model.tensors();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        d: model.d,
        shapes: tensors
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone()))
            .collect(),
        seed,
        config,
    };
    let mut out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (_, _, data) in tensors {
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    world: &WorldSpec,
) -> Result<(ModelParams, CheckpointHeader), ModelError> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ModelError::Mismatch("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Mismatch(format!(
            "format_version {}",
            header.format_version
        )));
    }
    let mut model = ModelParams::init(world, header.d, header.seed);
    {
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors()
            .iter()
            .map(|(n, s, _)| (n.clone(), s.clone()))
            .collect();
        if expected != header.shapes {
            return Err(ModelError::Mismatch(
                "tensor shapes do not match this world".into(),
            ));
        }
    }
    let mut cursor = &bytes[newline + 1..];
    for (name, dst) in model.tensors_mut() {
        let need = dst.len() * 8;
        if cursor.len() < need {
            return Err(ModelError::Mismatch(format!("payload truncated at {name}")));
        }
        for v in dst.iter_mut() {
            let mut buf = [0u8; 8];
            cursor.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if !cursor.is_empty() {
        return Err(ModelError::Mismatch("trailing payload bytes".into()));
    }
    Ok((model, header))
}

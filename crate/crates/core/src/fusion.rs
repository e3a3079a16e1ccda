//! Knowledge fusion: single-head scaled dot-product attention over the
//! parametric state and the retrieved snippet embeddings.
//!
//! The parametric state participates as row 0 of the keys and values,
//! so fusion degrades to a plain projection of the state when retrieval
//! returns nothing.

use crate::linalg::{scaled_dot_attention_with_weights, LinalgError, Matrix, Vector};

/// Query/key/value projections, all d x d.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// One fused step representation with its attention weights over
/// [state row; snippet rows] kept for interpretability.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedState {
    pub h: Vector,
    pub attention_weights: Vec<f64>,
}

/// Fuse the state embedding with retrieved snippet embeddings:
/// query = w_q·state; keys/values = w_k/w_v applied to
/// [state; snippets]; output is the single attention row.
pub fn fuse(
    h_param: &Vector,
    snippet_embeddings: &[Vector],
    params: &FusionParams,
) -> Result<FusedState, LinalgError> {
    let q_row = params.w_q.matvec(h_param)?;
    let q = Matrix::from_rows(&[q_row])?;
    let mut key_rows = Vec::with_capacity(1 + snippet_embeddings.len());
    let mut value_rows = Vec::with_capacity(1 + snippet_embeddings.len());
    key_rows.push(params.w_k.matvec(h_param)?);
    value_rows.push(params.w_v.matvec(h_param)?);
    for s in snippet_embeddings {
        key_rows.push(params.w_k.matvec(s)?);
        value_rows.push(params.w_v.matvec(s)?);
    }
    let k = Matrix::from_rows(&key_rows)?;
    let v = Matrix::from_rows(&value_rows)?;
    let (out, weights) = scaled_dot_attention_with_weights(&q, &k, &v)?;
    Ok(FusedState {
        h: out.row_vector(0),
        attention_weights: weights.row(0).to_vec(),
    })
}

/// Fusion disabled: the state is only pushed through the value
/// projection, exactly the empty-retrieval degenerate case.
pub fn project_only(h_param: &Vector, params: &FusionParams) -> Result<FusedState, LinalgError> {
    Ok(FusedState {
        h: params.w_v.matvec(h_param)?,
        attention_weights: vec![1.0],
    })
}

//! Loss terms. A batch objective is the mean over sequences of the
//! per-sequence prediction loss (itself a sum over that sequence's masked
//! positions), plus a weighted mean squared distance between aggregate
//! embeddings and their center.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};
use crate::vocab::EncodedSequence;

use super::TrainObjective;

/// log(sum(exp(row))) with max subtraction.
fn logsumexp<F: Scalar>(row: ArrayView1<'_, F>) -> F {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// Prediction loss for one sequence: the summed negative log-probability
/// of the original token at each masked position.
pub fn mlkp_loss<F: Scalar>(logits: &ndarray::Array2<F>, targets: &[(usize, usize)]) -> F {
    targets
        .iter()
        .map(|&(pos, orig)| logsumexp(logits.row(pos)) - logits[[pos, orig]])
        .sum()
}

/// Squared distance between one aggregate embedding and the center.
pub fn vhm_loss<F: Scalar>(h_dist: ArrayView1<'_, F>, center: &Array1<F>) -> F {
    h_dist
        .iter()
        .zip(center.iter())
        .map(|(&h, &c)| (h - c) * (h - c))
        .sum()
}

/// Combine batch means into the training objective.
pub fn total_loss<F: Scalar>(objective: TrainObjective, alpha: F, mean_mlkp: F, mean_vhm: F) -> F {
    match objective {
        TrainObjective::Combined => mean_mlkp + alpha * mean_vhm,
        TrainObjective::MlkpOnly => mean_mlkp,
        TrainObjective::VhmOnly => mean_vhm,
    }
}

/// The hypersphere center: the mean aggregate embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Center<F> {
    pub vec: Array1<F>,
}

/// Mean aggregate embedding over clean (unmasked) forwards of the given
/// chunks. Depends only on the set of chunks, not their order.
pub fn compute_center<F: Scalar>(
    model: &Model<F>,
    chunks: &[EncodedSequence],
) -> Result<Center<F>> {
    if chunks.is_empty() {
        return Err(Error::Data("cannot take a center over zero sequences".into()));
    }
    let mut sum = Array1::<F>::zeros(model.config().d_model);
    for chunk in chunks {
        sum = sum + model.dist_embedding(chunk.tokens())?;
    }
    Ok(Center {
        vec: sum / crate::model::s::<F>(chunks.len() as f64),
    })
}

//! The epoch loop: recompute the center on clean forwards, shuffle, draw
//! fresh masks, accumulate batch gradients, and step the optimizer.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};
use crate::vocab::{apply_masking, EncodedSequence};

use super::adam::{Adam, AdamConfig};
use super::backward::backward_sequence;
use super::loss::{compute_center, mlkp_loss, total_loss, vhm_loss, Center};
use super::{CenterUpdate, TrainConfig, TrainObjective};

/// One row of the loss curve. The two columns are the objective's terms,
/// so `total = mlkp + vhm` holds on every row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Prediction term: mean per-sequence loss, or zero when the
    /// objective omits prediction.
    pub mlkp: f64,
    /// Compactness term as weighted into the objective: alpha times the
    /// mean squared distance, the bare mean under the compactness-only
    /// objective, zero when the term is absent or alpha is zero.
    pub vhm: f64,
    /// Value of the configured objective.
    pub total: f64,
}

pub struct TrainOutput<F> {
    pub stats: Vec<EpochStats>,
    /// Center of the aggregate embeddings under the final parameters.
    pub center: Center<F>,
    /// One digest of the sampled mask positions per epoch; equal seeds give
    /// equal digests, and masks are redrawn every epoch.
    pub epoch_mask_digests: Vec<u64>,
}

/// Train in place. Returns per-epoch statistics and the final center.
pub fn fit<F: Scalar>(
    model: &mut Model<F>,
    chunks: &[EncodedSequence],
    config: &TrainConfig,
) -> Result<TrainOutput<F>> {
    config.validate()?;
    if chunks.is_empty() {
        return Err(Error::Data("cannot train on zero sequences".into()));
    }
    for (i, c) in chunks.iter().enumerate() {
        if c.real_key_count() == 0 {
            return Err(Error::Data(format!("chunk {i} holds no key tokens")));
        }
    }

    let mut opt = Adam::new(
        &model.params,
        AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
        },
    );

    let mut stats: Vec<EpochStats> = Vec::with_capacity(config.epochs);
    let mut digests = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let mut frozen_center: Option<Center<F>> = None;
    let mut warned_collapse = false;

    for epoch in 0..config.epochs {
        let epoch_key = epoch.to_string();
        let center = match config.center_update {
            CenterUpdate::PerEpoch => compute_center(model, chunks)?,
            CenterUpdate::FixedAfterWarmup { warmup_epochs } => {
                if epoch < warmup_epochs || frozen_center.is_none() {
                    let c = compute_center(model, chunks)?;
                    frozen_center = Some(c.clone());
                    c
                } else {
                    frozen_center.clone().unwrap()
                }
            }
        };
        let mut shuffle_rng = crate::rng::substream_keyed(config.seed, "train-shuffle", &epoch_key);
        order.shuffle(&mut shuffle_rng);
        let mut mask_rng = crate::rng::substream_keyed(config.seed, "train-mask", &epoch_key);

        let mut epoch_mlkp = 0.0f64;
        let mut epoch_vhm = 0.0f64;
        let mut digest_bytes: Vec<u8> = Vec::new();

        for batch in order.chunks(config.batch_size) {
            let n = batch.len() as f64;
            let (mlkp_scale, vhm_scale) = match config.objective {
                TrainObjective::Combined => (1.0 / n, config.alpha / n),
                TrainObjective::MlkpOnly => (1.0 / n, 0.0),
                TrainObjective::VhmOnly => (0.0, 1.0 / n),
            };
            let mut grads = model.params.zeros_like();
            for &idx in batch {
                let masked = apply_masking(&chunks[idx], config.mask_ratio, &mut mask_rng)?;
                digest_bytes.extend_from_slice(&(idx as u64).to_le_bytes());
                for &pos in &masked.mask_positions {
                    digest_bytes.extend_from_slice(&(pos as u64).to_le_bytes());
                }

                // the prediction task sees the masked view
                if mlkp_scale != 0.0 {
                    let cache = model.forward_cached(masked.tokens())?;
                    let targets = masked.targets();
                    epoch_mlkp += mlkp_loss(&cache.logits, &targets).to_f64();
                    backward_sequence(
                        model,
                        &cache,
                        &targets,
                        F::from_f64(mlkp_scale),
                        F::zero(),
                        None,
                        &mut grads,
                    )?;
                }
                // the compactness term acts on the clean aggregate
                // embedding — the same quantity the center and the
                // detection distance are computed from
                if vhm_scale != 0.0 {
                    let cache = model.forward_cached(chunks[idx].tokens())?;
                    epoch_vhm += vhm_loss(cache.hidden.row(0), &center.vec).to_f64();
                    backward_sequence(
                        model,
                        &cache,
                        &[],
                        F::zero(),
                        F::from_f64(vhm_scale),
                        Some(&center.vec),
                        &mut grads,
                    )?;
                }
            }
            opt.step(&mut model.params, &grads);
        }

        let n_total = chunks.len() as f64;
        let raw_mlkp = epoch_mlkp / n_total;
        let raw_vhm = epoch_vhm / n_total;
        let total = total_loss(config.objective, config.alpha, raw_mlkp, raw_vhm);
        let (mlkp, vhm) = match config.objective {
            TrainObjective::Combined => (raw_mlkp, config.alpha * raw_vhm),
            TrainObjective::MlkpOnly => (raw_mlkp, 0.0),
            TrainObjective::VhmOnly => (0.0, raw_vhm),
        };
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}: loss {total}"
            )));
        }
        if config.log_every > 0 && (epoch % config.log_every == 0 || epoch + 1 == config.epochs) {
            eprintln!(
                "epoch {epoch:>4}  total {total:.5}  mlkp {raw_mlkp:.5}  vhm {raw_vhm:.5}"
            );
        }
        // a compact hypersphere with a stuck prediction loss means the
        // compactness weight is drowning the prediction task; judged on
        // the raw distance, so a zero alpha cannot trip it
        if !warned_collapse
            && config.objective == TrainObjective::Combined
            && stats.len() >= 5
            && raw_vhm < 1e-6
            && raw_mlkp >= stats[stats.len() - 5].mlkp
        {
            eprintln!(
                "warning: aggregate embeddings collapsed to the center while the \
                 prediction loss stopped improving; consider a smaller alpha"
            );
            warned_collapse = true;
        }
        stats.push(EpochStats {
            epoch,
            mlkp,
            vhm,
            total,
        });
        digests.push(crate::rng::fnv1a(&digest_bytes));
    }

    let center = compute_center(model, chunks)?;
    Ok(TrainOutput {
        stats,
        center,
        epoch_mask_digests: digests,
    })
}

/// Fraction of masked positions whose original token tops the predicted
/// distribution, under deterministic per-sequence masks. Ties count as
/// misses, so the score is conservative.
pub fn masked_top1_accuracy<F: Scalar>(
    model: &Model<F>,
    chunks: &[EncodedSequence],
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    let mut hits = 0u64;
    let mut total = 0u64;
    for (idx, chunk) in chunks.iter().enumerate() {
        let mut rng = crate::rng::substream_keyed(seed, "eval-mask", &idx.to_string());
        let masked = apply_masking(chunk, mask_ratio, &mut rng)?;
        let (_, logits) = model.forward(masked.tokens())?;
        for (pos, orig) in masked.targets() {
            let row = logits.row(pos);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let unique = row.iter().filter(|&&v| v == row[best]).count() == 1;
            if best == orig && unique {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

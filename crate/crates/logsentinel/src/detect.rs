//! Detection: mask each test sequence, ask the model for the masked keys,
//! and judge a key anomalous when it falls outside the g most likely
//! candidates. A sequence is anomalous when more than r of its keys are.
//! A second mode thresholds the squared distance between the sequence's
//! aggregate embedding and the training center.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};
use crate::sequence::{Label, LogSequence};
use crate::vocab::{self, EncodedSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// One random mask draw per chunk, from a stream keyed by the group id
    /// so results do not depend on processing order.
    Seeded,
    /// ceil(1/m) disjoint passes so every key position is judged exactly
    /// once. Fully deterministic.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMode {
    /// Candidate-set rule: anomalous iff more than r masked keys miss the
    /// top-g set.
    TopgR,
    /// Distance rule: anomalous iff the mean squared distance from the
    /// center exceeds the threshold.
    Distance,
}

impl std::str::FromStr for MaskingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeded" => Ok(MaskingMode::Seeded),
            "exhaustive" => Ok(MaskingMode::Exhaustive),
            other => Err(Error::Usage(format!(
                "unknown masking mode '{other}', expected seeded or exhaustive"
            ))),
        }
    }
}

impl std::str::FromStr for DetectMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topg_r" => Ok(DetectMode::TopgR),
            "distance" => Ok(DetectMode::Distance),
            other => Err(Error::Usage(format!(
                "unknown detection mode '{other}', expected topg_r or distance"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub mode: DetectMode,
    /// Candidate-set size g.
    pub top_g: usize,
    /// Anomalous-key threshold r; strict comparison.
    pub r_threshold: usize,
    pub distance_threshold: f64,
    /// Fraction of key positions masked; defaults to the training ratio.
    pub mask_ratio: f64,
    pub masking: MaskingMode,
    pub seed: u64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            mode: DetectMode::TopgR,
            top_g: 10,
            r_threshold: 0,
            distance_threshold: f64::INFINITY,
            mask_ratio: 0.5,
            masking: MaskingMode::Seeded,
            seed: 0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.top_g == 0 {
            return Err(Error::Config("top_g must be at least 1".into()));
        }
        if self.top_g > vocab_size {
            return Err(Error::Config(format!(
                "top_g {} exceeds the vocabulary of {vocab_size}",
                self.top_g
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// One masked position and how the model ranked its original token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskJudgment {
    pub chunk: usize,
    pub position: usize,
    pub true_id: usize,
    /// Rank of the original among all ids by descending probability, ties
    /// by ascending id; `None` when the original is the unknown id, which
    /// no candidate set can contain.
    pub rank: Option<usize>,
}

impl MaskJudgment {
    /// Anomalous under candidate-set size g: outside the top g, or unknown.
    pub fn anomalous_at(&self, g: usize) -> bool {
        self.rank.map_or(true, |r| r >= g)
    }
}

/// Rank of `true_id` in a score vector: the number of ids that beat it,
/// where higher score wins and equal scores are ordered by ascending id.
/// The top-g candidate set is exactly the ids with rank < g, so candidate
/// sets are nested as g grows.
pub fn true_id_rank<F: Scalar>(scores: ArrayView1<'_, F>, true_id: usize) -> usize {
    let s_t = scores[true_id];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > s_t || (s == s_t && i < true_id))
        .count()
}

/// Judge every masked position of one encoded chunk.
pub fn score_masks<F: Scalar>(
    model: &Model<F>,
    masked: &EncodedSequence,
    chunk_index: usize,
) -> Result<Vec<MaskJudgment>> {
    if masked.mask_positions.is_empty() {
        return Err(Error::Data("no masked position to judge".into()));
    }
    let (_, logits) = model.forward(masked.tokens())?;
    Ok(masked
        .targets()
        .into_iter()
        .map(|(position, true_id)| MaskJudgment {
            chunk: chunk_index,
            position,
            true_id,
            // softmax is monotone, so logit rank equals probability rank
            rank: (true_id != vocab::UNK).then(|| true_id_rank(logits.row(position), true_id)),
        })
        .collect())
}

/// Everything needed to issue a verdict for one sequence under any (g, r)
/// or distance threshold, so a tuning sweep scores each sequence once.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub group_id: String,
    pub label: Label,
    pub masks: Vec<MaskJudgment>,
    /// Mean over chunks of the squared distance between the clean
    /// aggregate embedding and the center.
    pub distance: f64,
}

impl SequenceScore {
    pub fn anomalous_key_count(&self, g: usize) -> usize {
        self.masks.iter().filter(|m| m.anomalous_at(g)).count()
    }
}

/// Score sequences against a trained model. Chunks of one sequence
/// aggregate into a single score.
pub fn score_sequences<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocab,
    center: &Array1<F>,
    sequences: &[LogSequence],
    config: &DetectionConfig,
) -> Result<Vec<SequenceScore>> {
    config.validate(vocab.size())?;
    let max_len = model.config().max_len;
    let mut scores = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.keys.is_empty() {
            return Err(Error::Data(format!(
                "sequence {} has no keys",
                seq.group_id
            )));
        }
        let chunks = vocab::encode(&seq.keys, vocab, max_len)?;
        let mut masks = Vec::new();
        let mut distance_sum = 0.0f64;
        for (chunk_index, chunk) in chunks.iter().enumerate() {
            let h0 = model.dist_embedding(chunk.tokens())?;
            distance_sum += crate::train::vhm_loss(h0.view(), center).to_f64();

            match config.masking {
                MaskingMode::Seeded => {
                    let key = format!("{}#{}", seq.group_id, chunk_index);
                    let mut rng = crate::rng::substream_keyed(config.seed, "detect-mask", &key);
                    let masked = vocab::apply_masking(chunk, config.mask_ratio, &mut rng)?;
                    masks.extend(score_masks(model, &masked, chunk_index)?);
                }
                MaskingMode::Exhaustive => {
                    for stratum in 0..vocab::stratum_count(config.mask_ratio) {
                        let masked =
                            vocab::apply_stratum_masking(chunk, config.mask_ratio, stratum)?;
                        if masked.mask_positions.is_empty() {
                            continue;
                        }
                        masks.extend(score_masks(model, &masked, chunk_index)?);
                    }
                }
            }
        }
        scores.push(SequenceScore {
            group_id: seq.group_id.clone(),
            label: seq.label,
            masks,
            distance: distance_sum / chunks.len() as f64,
        });
    }
    Ok(scores)
}

/// The serialized verdict record carries exactly the summary fields; the
/// label stays internal for metric computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub group_id: String,
    #[serde(skip, default = "unknown_label")]
    pub label: Label,
    pub anomalous_key_count: usize,
    pub masked_count: usize,
    pub distance: f64,
    pub is_anomalous: bool,
}

fn unknown_label() -> Label {
    Label::Unknown
}

/// Apply one mode's decision rule to precomputed scores. Output is sorted
/// by group id.
pub fn verdicts(scores: &[SequenceScore], config: &DetectionConfig) -> Vec<Verdict> {
    let mut out: Vec<Verdict> = scores
        .iter()
        .map(|s| {
            let anomalous_key_count = s.anomalous_key_count(config.top_g);
            let is_anomalous = match config.mode {
                DetectMode::TopgR => anomalous_key_count > config.r_threshold,
                DetectMode::Distance => s.distance > config.distance_threshold,
            };
            Verdict {
                group_id: s.group_id.clone(),
                label: s.label,
                anomalous_key_count,
                masked_count: s.masks.len(),
                distance: s.distance,
                is_anomalous,
            }
        })
        .collect();
    out.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    out
}

/// Score and judge in one call.
pub fn detect<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocab,
    center: &Array1<F>,
    sequences: &[LogSequence],
    config: &DetectionConfig,
) -> Result<Vec<Verdict>> {
    Ok(verdicts(
        &score_sequences(model, vocab, center, sequences, config)?,
        config,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    /// The input config with the winning parameters substituted.
    pub config: DetectionConfig,
    /// Best F1 on the validation scores, as a percentage.
    pub best_f1: f64,
    pub grid_points: usize,
}

/// F1 percentage of a predicted/actual split, or 0 when undefined.
fn f1_of(scores: &[SequenceScore], predict: impl Fn(&SequenceScore) -> bool) -> f64 {
    let pairs = scores
        .iter()
        .filter(|s| s.label != Label::Unknown)
        .map(|s| (s.label, predict(s)));
    crate::eval::compute_metrics(pairs).f1.unwrap_or(0.0)
}

/// Grid-search the validation scores for the parameters maximizing F1.
/// Ties prefer the smallest g, then the smallest r (or the smallest
/// distance threshold).
pub fn tune(
    scores: &[SequenceScore],
    base: &DetectionConfig,
    vocab_size: usize,
) -> Result<TuneOutcome> {
    let n_anomalous = scores.iter().filter(|s| s.label == Label::Anomalous).count();
    let n_normal = scores.iter().filter(|s| s.label == Label::Normal).count();
    if n_anomalous == 0 || n_normal == 0 {
        return Err(Error::Data(format!(
            "tuning needs both classes in the validation set, got {n_normal} normal and \
             {n_anomalous} anomalous; add labeled sequences of the missing class"
        )));
    }

    let mut config = base.clone();
    let mut grid_points = 0usize;
    let mut best_f1 = f64::NEG_INFINITY;
    match base.mode {
        DetectMode::TopgR => {
            let max_masks = scores.iter().map(|s| s.masks.len()).max().unwrap_or(0);
            let mut best = (0usize, 0usize);
            for g in 1..=vocab_size {
                let counts: Vec<usize> =
                    scores.iter().map(|s| s.anomalous_key_count(g)).collect();
                for r in 0..=max_masks {
                    grid_points += 1;
                    let f1 = {
                        let pairs = scores
                            .iter()
                            .zip(counts.iter())
                            .filter(|(s, _)| s.label != Label::Unknown)
                            .map(|(s, &c)| (s.label, c > r));
                        crate::eval::compute_metrics(pairs).f1.unwrap_or(0.0)
                    };
                    if f1 > best_f1 {
                        best_f1 = f1;
                        best = (g, r);
                    }
                }
            }
            config.top_g = best.0;
            config.r_threshold = best.1;
        }
        DetectMode::Distance => {
            let mut thresholds: Vec<f64> = scores.iter().map(|s| s.distance).collect();
            // one threshold below every observed distance flags everything
            thresholds.push(
                scores
                    .iter()
                    .map(|s| s.distance)
                    .fold(f64::INFINITY, f64::min)
                    - 1.0,
            );
            thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            thresholds.dedup();
            let mut best = f64::INFINITY;
            for &t in &thresholds {
                grid_points += 1;
                let f1 = f1_of(scores, |s| s.distance > t);
                if f1 > best_f1 {
                    best_f1 = f1;
                    best = t;
                }
            }
            config.distance_threshold = best;
        }
    }
    Ok(TuneOutcome {
        config,
        best_f1,
        grid_points,
    })
}

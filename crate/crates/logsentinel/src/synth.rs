//! Synthetic corpus with a known answer key. Normal sequences follow a
//! cyclic grammar with optional detours, so membership is decidable and a
//! perfect detector is possible by construction. Anomalies are labeled
//! perturbations of normal walks.
//!
//! Grammar: keys 0..n_main repeat cyclically from a random starting
//! phase. After emitting a key j with (j+1) % branch_every == 0, the walk
//! may take a two-key detour chosen from fixed pairs: common pairs are
//! keys n_main..n_main+2·n_common_pairs, rare pairs follow with a much
//! smaller selection weight. After a detour the cycle resumes where it
//! left off. A sequence is any fixed-length prefix of such a walk.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{Label, LogSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Keys 0..n_main form the backbone cycle.
    pub n_main: usize,
    /// Detour pairs everyone takes now and then.
    pub n_common_pairs: usize,
    /// Detour pairs with weight `rare_weight` instead of 1: present in
    /// training, but scarce.
    pub n_rare_pairs: usize,
    /// A detour may start after keys j with (j+1) % branch_every == 0.
    pub branch_every: usize,
    /// Probability of taking a detour at an opportunity.
    pub branch_prob: f64,
    /// Relative selection weight of each rare pair (common pairs weigh 1).
    pub rare_weight: f64,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of validation and test sequences perturbed, hit exactly:
    /// round(rate · n) sequences per split.
    pub anomaly_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_main: 12,
            n_common_pairs: 3,
            n_rare_pairs: 1,
            branch_every: 4,
            branch_prob: 0.3,
            rare_weight: 0.05,
            seq_len: 20,
            n_train: 2000,
            n_val: 200,
            n_test: 1200,
            anomaly_rate: 1.0 / 6.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Total distinct keys the grammar can emit.
    pub fn n_keys(&self) -> usize {
        self.n_main + 2 * (self.n_common_pairs + self.n_rare_pairs)
    }

    fn n_pairs(&self) -> usize {
        self.n_common_pairs + self.n_rare_pairs
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_main < 2 {
            return Err(Error::Config("n_main must be at least 2".into()));
        }
        if !(2..=self.n_main).contains(&self.branch_every) {
            return Err(Error::Config(format!(
                "branch_every must lie in 2..={}, got {}",
                self.n_main, self.branch_every
            )));
        }
        if !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::Config("branch_prob must lie in [0, 1]".into()));
        }
        if self.branch_prob > 0.0 && self.n_pairs() == 0 {
            return Err(Error::Config(
                "branch_prob > 0 needs at least one detour pair".into(),
            ));
        }
        if self.rare_weight < 0.0 {
            return Err(Error::Config("rare_weight must be non-negative".into()));
        }
        if self.seq_len < 4 {
            return Err(Error::Config("seq_len must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(Error::Config("anomaly_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn pair_keys(&self, pair: usize) -> (u32, u32) {
        let first = (self.n_main + 2 * pair) as u32;
        (first, first + 1)
    }

    /// Keys belonging to rare pairs; the injection pool when non-empty.
    fn rare_keys(&self) -> Vec<u32> {
        (self.n_main + 2 * self.n_common_pairs..self.n_keys())
            .map(|k| k as u32)
            .collect()
    }
}

/// One grammar walk of exactly `len` keys, starting at a random phase.
fn walk(spec: &SynthSpec, rng: &mut impl Rng, len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(len + 2);
    let mut pos = rng.random_range(0..spec.n_main);
    while out.len() < len {
        out.push(pos as u32);
        let opportunity = (pos + 1) % spec.branch_every == 0;
        pos = (pos + 1) % spec.n_main;
        if opportunity
            && spec.n_pairs() > 0
            && spec.branch_prob > 0.0
            && rng.random_bool(spec.branch_prob)
        {
            let total = spec.n_common_pairs as f64 + spec.n_rare_pairs as f64 * spec.rare_weight;
            let x = rng.random_range(0.0..total);
            let pair = if x < spec.n_common_pairs as f64 {
                x as usize
            } else {
                spec.n_common_pairs
                    + (((x - spec.n_common_pairs as f64) / spec.rare_weight) as usize)
                        .min(spec.n_rare_pairs - 1)
            };
            let (a, b) = spec.pair_keys(pair);
            out.push(a);
            out.push(b);
        }
    }
    out.truncate(len);
    out
}

/// Decide whether `keys` is a prefix of some grammar walk. A sequence may
/// end inside a detour, because walks are cut to a fixed length.
pub fn is_grammar_member(keys: &[u32], spec: &SynthSpec) -> bool {
    let n_main = spec.n_main as u32;
    let n_keys = spec.n_keys() as u32;
    let Some(&first) = keys.first() else {
        return false;
    };
    if first >= n_main {
        return false;
    }
    let mut expect = first;
    let mut i = 0;
    while i < keys.len() {
        if keys[i] != expect {
            return false;
        }
        let opportunity = (keys[i] + 1) % spec.branch_every as u32 == 0;
        expect = (expect + 1) % n_main;
        i += 1;
        if opportunity && i < keys.len() && keys[i] >= n_main {
            let k = keys[i];
            if k >= n_keys || (k - n_main) % 2 != 0 {
                return false;
            }
            i += 1;
            if i < keys.len() {
                if keys[i] != k + 1 {
                    return false;
                }
                i += 1;
            }
        }
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Random permutation of the keys; breaks nearly every adjacency.
    Shuffle,
    /// A few positions overwritten with rare-pair keys out of context, or
    /// with unseen keys when the grammar has no rare pairs.
    InjectRareKey,
    /// The middle segment replaced by a segment of an unrelated walk,
    /// leaving two discontinuities. Length is preserved.
    TruncateAndSplice,
}

pub const ANOMALY_KINDS: [AnomalyKind; 3] = [
    AnomalyKind::Shuffle,
    AnomalyKind::InjectRareKey,
    AnomalyKind::TruncateAndSplice,
];

/// Perturb a normal walk into an anomaly of the given kind. The result
/// always differs from the input.
pub fn perturb(
    keys: &[u32],
    kind: AnomalyKind,
    spec: &SynthSpec,
    rng: &mut impl Rng,
) -> Vec<u32> {
    let len = keys.len();
    match kind {
        AnomalyKind::Shuffle => {
            for _ in 0..16 {
                let mut out = keys.to_vec();
                out.shuffle(rng);
                if out != keys {
                    return out;
                }
            }
            let mut out = keys.to_vec();
            out.reverse();
            out
        }
        AnomalyKind::InjectRareKey => {
            let pool = if spec.n_rare_pairs > 0 {
                spec.rare_keys()
            } else {
                vec![spec.n_keys() as u32, spec.n_keys() as u32 + 1]
            };
            let n_inject = 3.min(len);
            for _ in 0..16 {
                let mut out = keys.to_vec();
                for idx in rand::seq::index::sample(rng, len, n_inject) {
                    out[idx] = pool[rng.random_range(0..pool.len())];
                }
                if out != keys {
                    return out;
                }
            }
            // walks always start on the backbone, so a pool key differs
            let mut out = keys.to_vec();
            out[0] = pool[0];
            out
        }
        AnomalyKind::TruncateAndSplice => {
            let a = rng.random_range(len / 4..len / 2);
            let b = rng.random_range(len / 2..(3 * len).div_ceil(4));
            for _ in 0..16 {
                let mut out = keys[..a].to_vec();
                out.extend(walk(spec, rng, b - a));
                out.extend_from_slice(&keys[b..]);
                if out != keys {
                    return out;
                }
            }
            perturb(keys, AnomalyKind::Shuffle, spec, rng)
        }
    }
}

/// Exact-count anomaly assignment: round(rate · n) positions get a kind,
/// cycling through the kinds in order over the chosen positions.
pub fn anomaly_plan(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<Option<AnomalyKind>> {
    let n_anomalous = (rate * n as f64).round() as usize;
    let mut plan = vec![None; n];
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, n, n_anomalous.min(n)).into_vec();
    chosen.sort_unstable();
    for (j, idx) in chosen.into_iter().enumerate() {
        plan[idx] = Some(ANOMALY_KINDS[j % ANOMALY_KINDS.len()]);
    }
    plan
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Normal walks only; the one-class training set.
    pub train: Vec<LogSequence>,
    pub val: Vec<LogSequence>,
    pub test: Vec<LogSequence>,
}

fn labeled_split(
    spec: &SynthSpec,
    rng: &mut impl Rng,
    name: &str,
    n: usize,
    rate: f64,
) -> Vec<LogSequence> {
    let plan = anomaly_plan(n, rate, rng);
    (0..n)
        .map(|i| {
            let normal = walk(spec, rng, spec.seq_len);
            let (keys, label) = match plan[i] {
                None => (normal, Label::Normal),
                Some(kind) => (perturb(&normal, kind, spec, rng), Label::Anomalous),
            };
            LogSequence {
                group_id: format!("{name}-{i:05}"),
                keys,
                label,
            }
        })
        .collect()
}

/// Generate train/val/test splits, fully determined by the settings and
/// their seed.
pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = crate::rng::substream(spec.seed, "synth");
    let train = labeled_split(spec, &mut rng, "train", spec.n_train, 0.0);
    let val = labeled_split(spec, &mut rng, "val", spec.n_val, spec.anomaly_rate);
    let test = labeled_split(spec, &mut rng, "test", spec.n_test, spec.anomaly_rate);
    Ok(Corpus { train, val, test })
}

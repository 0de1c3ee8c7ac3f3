//! Confusion-matrix metrics over verdicts, a stable text report, and
//! export of aggregate sequence embeddings for external plotting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};
use crate::sequence::{Label, LogSequence};
use crate::vocab::{self, Vocab};

/// Confusion counts with derived percentage scores. Anomalous is the
/// positive class. A score whose denominator is zero is absent, never 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// 100·tp/(tp+fp), two decimals.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    /// 100·tp/(tp+fn), two decimals.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    /// 2PR/(P+R) over the two fields above, two decimals; absent when
    /// either factor is absent or both are zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Harmonic mean of two percentages, as a percentage.
pub fn f1_percent(precision: f64, recall: f64) -> f64 {
    2.0 * precision * recall / (precision + recall)
}

/// Tally (actual label, predicted anomalous) pairs. Unknown labels are
/// skipped: they can support neither a hit nor a miss.
pub fn compute_metrics(pairs: impl IntoIterator<Item = (Label, bool)>) -> Metrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (label, predicted) in pairs {
        match (label, predicted) {
            (Label::Anomalous, true) => tp += 1,
            (Label::Anomalous, false) => fn_ += 1,
            (Label::Normal, true) => fp += 1,
            (Label::Normal, false) => tn += 1,
            (Label::Unknown, _) => {}
        }
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| round2(100.0 * num as f64 / den as f64));
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(round2(f1_percent(p, r))),
        _ => None,
    };
    Metrics {
        tp,
        fp,
        fn_,
        tn,
        precision,
        recall,
        f1,
    }
}

/// Fixed-layout text report; byte-identical for equal metrics. Absent
/// scores are omitted entirely.
pub fn render_metrics_report(m: &Metrics) -> String {
    let mut out = String::new();
    out.push_str(&format!("sequences {}\n", m.tp + m.fp + m.fn_ + m.tn));
    out.push_str(&format!("tp {}\nfp {}\nfn {}\ntn {}\n", m.tp, m.fp, m.fn_, m.tn));
    for (name, value) in [
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
    ] {
        if let Some(v) = value {
            out.push_str(&format!("{name} {v:.2}\n"));
        }
    }
    out
}

/// Write one comma-separated record per sequence: group id, label, then
/// the aggregate-token embedding, averaged across chunks for sequences
/// longer than one chunk. Returns the record count.
pub fn export_embeddings<F: Scalar>(
    model: &Model<F>,
    vocab: &Vocab,
    sequences: &[LogSequence],
    writer: &mut impl Write,
) -> Result<usize> {
    let d = model.config().d_model;
    let mut header = String::from("group_id,label");
    for i in 0..d {
        header.push_str(&format!(",e{i}"));
    }
    writeln!(writer, "{header}")?;

    for seq in sequences {
        if seq.keys.is_empty() {
            return Err(Error::Data(format!(
                "sequence {} has no keys",
                seq.group_id
            )));
        }
        let chunks = vocab::encode(&seq.keys, vocab, model.config().max_len)?;
        let mut mean = ndarray::Array1::<f64>::zeros(d);
        for chunk in &chunks {
            let h0 = model.dist_embedding(chunk.tokens())?;
            mean += &h0.mapv(|v| v.to_f64());
        }
        mean /= chunks.len() as f64;
        let mut line = format!("{},{}", seq.group_id, seq.label.as_str());
        for v in mean.iter() {
            line.push_str(&format!(",{v}"));
        }
        writeln!(writer, "{line}")?;
    }
    Ok(sequences.len())
}

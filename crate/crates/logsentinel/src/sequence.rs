//! Grouping parsed events into key sequences, either by session identifier
//! or by tumbling time window.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::ParsedEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
    /// No ground truth available for this sequence.
    Unknown,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
            Label::Unknown => "unknown",
        }
    }
}

/// One sequence of template keys, in event order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogSequence {
    /// Session key or window index, unique within one grouping run.
    pub group_id: String,
    pub keys: Vec<u32>,
    pub label: Label,
}

/// Counters describing one grouping run.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub events_in: u64,
    pub events_grouped: u64,
    /// Session grouping only: events carrying no session key.
    pub events_without_session: u64,
    /// Window grouping only: events carrying no timestamp.
    pub events_without_timestamp: u64,
    pub sequences_out: u64,
    /// Sequences with fewer than two events; kept, but flagged because a
    /// single key gives the model nothing to contextualize.
    pub short_sequences: u64,
}

/// Label for a set of per-event alert tags: any alert marks the sequence
/// anomalous, a full set of explicit non-alerts marks it normal, anything
/// else is unknown.
fn label_from_alerts<'a>(alerts: impl Iterator<Item = &'a Option<bool>>) -> Label {
    let mut all_clear = true;
    for a in alerts {
        match a {
            Some(true) => return Label::Anomalous,
            Some(false) => {}
            None => all_clear = false,
        }
    }
    if all_clear {
        Label::Normal
    } else {
        Label::Unknown
    }
}

/// Group events by their session key. Sequences come out in order of each
/// session's first appearance; events keep stream order within a session.
/// Events without a session key are counted and dropped.
pub fn group_by_session(events: &[ParsedEvent]) -> (Vec<LogSequence>, GroupingReport) {
    let mut report = GroupingReport {
        events_in: events.len() as u64,
        ..GroupingReport::default()
    };
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&ParsedEvent>> = HashMap::new();
    for ev in events {
        match &ev.session_key {
            Some(key) => {
                report.events_grouped += 1;
                groups
                    .entry(key.as_str())
                    .or_insert_with(|| {
                        order.push(key.as_str());
                        Vec::new()
                    })
                    .push(ev);
            }
            None => report.events_without_session += 1,
        }
    }
    let sequences: Vec<LogSequence> = order
        .iter()
        .map(|key| {
            let evs = &groups[key];
            LogSequence {
                group_id: key.to_string(),
                keys: evs.iter().map(|e| e.template_id).collect(),
                label: label_from_alerts(evs.iter().map(|e| &e.alert)),
            }
        })
        .collect();
    report.sequences_out = sequences.len() as u64;
    report.short_sequences = sequences.iter().filter(|s| s.keys.len() < 2).count() as u64;
    (sequences, report)
}

/// Group events into tumbling windows of `window_secs`, aligned to the
/// earliest timestamp: window i covers [t0 + i*w, t0 + (i+1)*w). Empty
/// windows produce no sequence. Events without a timestamp are counted and
/// dropped.
pub fn group_by_time_window(
    events: &[ParsedEvent],
    window_secs: i64,
) -> Result<(Vec<LogSequence>, GroupingReport)> {
    if window_secs <= 0 {
        return Err(Error::Config(format!(
            "window_secs must be positive, got {window_secs}"
        )));
    }
    let mut report = GroupingReport {
        events_in: events.len() as u64,
        ..GroupingReport::default()
    };
    let timestamped: Vec<&ParsedEvent> = events
        .iter()
        .filter(|e| {
            if e.timestamp.is_none() {
                report.events_without_timestamp += 1;
            }
            e.timestamp.is_some()
        })
        .collect();
    report.events_grouped = timestamped.len() as u64;
    let Some(t0) = timestamped.iter().filter_map(|e| e.timestamp).min() else {
        return Ok((Vec::new(), report));
    };

    let mut order: Vec<i64> = Vec::new();
    let mut groups: HashMap<i64, Vec<&ParsedEvent>> = HashMap::new();
    for ev in timestamped {
        let idx = (ev.timestamp.unwrap() - t0) / window_secs;
        groups
            .entry(idx)
            .or_insert_with(|| {
                order.push(idx);
                Vec::new()
            })
            .push(ev);
    }
    order.sort_unstable();
    let sequences: Vec<LogSequence> = order
        .iter()
        .map(|idx| {
            let evs = &groups[idx];
            LogSequence {
                group_id: format!("window-{idx}"),
                keys: evs.iter().map(|e| e.template_id).collect(),
                label: label_from_alerts(evs.iter().map(|e| &e.alert)),
            }
        })
        .collect();
    report.sequences_out = sequences.len() as u64;
    report.short_sequences = sequences.iter().filter(|s| s.keys.len() < 2).count() as u64;
    Ok((sequences, report))
}

/// Overwrite labels from an external ground-truth map keyed by group id.
/// Groups absent from the map keep their current label.
pub fn apply_session_labels(sequences: &mut [LogSequence], labels: &HashMap<String, Label>) {
    for seq in sequences {
        if let Some(&label) = labels.get(&seq.group_id) {
            seq.label = label;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(line_no: u64, ts: Option<i64>, session: Option<&str>, key: u32, alert: Option<bool>) -> ParsedEvent {
        ParsedEvent {
            line_no,
            timestamp: ts,
            session_key: session.map(|s| s.to_string()),
            template_id: key,
            alert,
        }
    }

    #[test]
    fn session_grouping_keeps_stream_order() {
        let events = vec![
            ev(1, None, Some("a"), 10, None),
            ev(2, None, Some("b"), 11, None),
            ev(3, None, Some("a"), 12, None),
            ev(4, None, None, 13, None),
        ];
        let (seqs, report) = group_by_session(&events);
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].group_id, "a");
        assert_eq!(seqs[0].keys, vec![10, 12]);
        assert_eq!(seqs[1].keys, vec![11]);
        assert_eq!(report.events_without_session, 1);
        assert_eq!(report.events_grouped, 3);
        assert_eq!(report.sequences_out, 2);
        // session "b" holds a single event: kept, counted as short
        assert_eq!(report.short_sequences, 1);
    }

    #[test]
    fn labels_follow_alert_tags() {
        let events = vec![
            ev(1, None, Some("clean"), 1, Some(false)),
            ev(2, None, Some("clean"), 2, Some(false)),
            ev(3, None, Some("bad"), 1, Some(false)),
            ev(4, None, Some("bad"), 2, Some(true)),
            ev(5, None, Some("untagged"), 1, None),
        ];
        let (seqs, _) = group_by_session(&events);
        assert_eq!(seqs[0].label, Label::Normal);
        assert_eq!(seqs[1].label, Label::Anomalous);
        assert_eq!(seqs[2].label, Label::Unknown);
    }

    #[test]
    fn windows_tumble_from_earliest_timestamp() {
        let events = vec![
            ev(1, Some(100), None, 1, Some(false)),
            ev(2, Some(159), None, 2, Some(false)),
            ev(3, Some(160), None, 3, Some(false)),
            ev(4, Some(340), None, 4, Some(true)),
            ev(5, None, None, 5, Some(false)),
        ];
        let (seqs, report) = group_by_time_window(&events, 60).unwrap();
        assert_eq!(seqs.len(), 3);
        assert_eq!(seqs[0].group_id, "window-0");
        assert_eq!(seqs[0].keys, vec![1, 2]);
        assert_eq!(seqs[1].keys, vec![3]);
        // gap window [220, 280) yields nothing; 340 lands in window 4
        assert_eq!(seqs[2].group_id, "window-4");
        assert_eq!(seqs[2].label, Label::Anomalous);
        assert_eq!(report.events_without_timestamp, 1);
    }

    #[test]
    fn window_needs_positive_width() {
        assert!(group_by_time_window(&[], 0).is_err());
    }

    #[test]
    fn external_labels_override() {
        let mut seqs = vec![LogSequence {
            group_id: "blk_1".into(),
            keys: vec![1],
            label: Label::Unknown,
        }];
        let mut map = HashMap::new();
        map.insert("blk_1".to_string(), Label::Anomalous);
        apply_session_labels(&mut seqs, &map);
        assert_eq!(seqs[0].label, Label::Anomalous);
    }
}

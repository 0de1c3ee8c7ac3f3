//! Dataset adapters: split a raw log line into header fields and message
//! content, recovering timestamps, session keys, and per-message alert tags
//! where the format carries them.

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Whole line is content; no timestamp, session, or alert.
    Generic,
    /// Header `<date> <time> <pid> <level> <component>:`; the block id in the
    /// content keys the session.
    Hdfs,
    /// Header starts with an alert tag (`-` means none) and an epoch second.
    Bgl,
    /// Same leading alert tag and epoch second, one extra header field.
    Thunderbird,
}

impl Default for AdapterKind {
    fn default() -> Self {
        AdapterKind::Generic
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generic" => Ok(AdapterKind::Generic),
            "hdfs" => Ok(AdapterKind::Hdfs),
            "bgl" => Ok(AdapterKind::Bgl),
            "thunderbird" => Ok(AdapterKind::Thunderbird),
            other => Err(Error::Usage(format!(
                "unknown adapter '{other}', expected generic, hdfs, bgl, or thunderbird"
            ))),
        }
    }
}

impl AdapterKind {
    pub fn spec(self) -> AdapterSpec {
        match self {
            AdapterKind::Generic => AdapterSpec {
                kind: self,
                skip_fields: 0,
                alert_field: None,
                epoch_field: None,
                date_time_fields: None,
                session_pattern: None,
            },
            AdapterKind::Hdfs => AdapterSpec {
                kind: self,
                skip_fields: 5,
                alert_field: None,
                epoch_field: None,
                date_time_fields: Some((0, 1)),
                session_pattern: Some(r"blk_-?\d+".to_string()),
            },
            AdapterKind::Bgl => AdapterSpec {
                kind: self,
                skip_fields: 9,
                alert_field: Some(0),
                epoch_field: Some(1),
                date_time_fields: None,
                session_pattern: None,
            },
            AdapterKind::Thunderbird => AdapterSpec {
                kind: self,
                skip_fields: 8,
                alert_field: Some(0),
                epoch_field: Some(1),
                date_time_fields: None,
                session_pattern: None,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    /// Leading whitespace-separated fields stripped before template mining.
    pub skip_fields: usize,
    /// Header field holding the alert tag; `-` means no alert.
    pub alert_field: Option<usize>,
    /// Header field holding an epoch-seconds timestamp.
    pub epoch_field: Option<usize>,
    /// Header fields holding a `yymmdd` date and `HHMMSS` time.
    pub date_time_fields: Option<(usize, usize)>,
    /// Pattern whose first match in the content keys the session.
    pub session_pattern: Option<String>,
}

/// One raw line split into its parts, before template mining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub content: String,
    pub timestamp: Option<i64>,
    pub session_key: Option<String>,
    pub alert: Option<bool>,
}

pub struct Adapter {
    spec: AdapterSpec,
    session_re: Option<Regex>,
}

impl Adapter {
    pub fn new(spec: AdapterSpec) -> Result<Self> {
        let session_re = match &spec.session_pattern {
            Some(pat) => Some(
                Regex::new(pat)
                    .map_err(|e| Error::Config(format!("bad session pattern {pat:?}: {e}")))?,
            ),
            None => None,
        };
        Ok(Adapter { spec, session_re })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    /// Split one line. Lines with fewer fields than the header needs are
    /// data errors; the caller decides whether to skip or abort.
    pub fn split_line(&self, line: &str) -> Result<RawEvent> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < self.spec.skip_fields {
            return Err(Error::Data(format!(
                "line has {} fields, header needs {}: {line:?}",
                fields.len(),
                self.spec.skip_fields
            )));
        }

        let alert = self
            .spec
            .alert_field
            .map(|i| fields[i] != "-");

        let mut timestamp = None;
        if let Some(i) = self.spec.epoch_field {
            timestamp = Some(fields[i].parse::<i64>().map_err(|_| {
                Error::Data(format!("bad epoch timestamp {:?} in line {line:?}", fields[i]))
            })?);
        } else if let Some((di, ti)) = self.spec.date_time_fields {
            timestamp = Some(parse_yymmdd_hhmmss(fields[di], fields[ti])?);
        }

        let content = fields[self.spec.skip_fields..].join(" ");
        let session_key = self
            .session_re
            .as_ref()
            .and_then(|re| re.find(&content).map(|m| m.as_str().to_string()));

        Ok(RawEvent {
            content,
            timestamp,
            session_key,
            alert,
        })
    }
}

/// `yymmdd` + `HHMMSS` to epoch seconds, pinning two-digit years to 20xx.
fn parse_yymmdd_hhmmss(date: &str, time: &str) -> Result<i64> {
    let bad = || Error::Data(format!("bad date/time fields {date:?} {time:?}"));
    if date.len() != 6 || time.len() != 6 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<u32>().map_err(|_| bad());
    let (y, mo, d) = (num(&date[0..2])?, num(&date[2..4])?, num(&date[4..6])?);
    let (h, mi, s) = (num(&time[0..2])?, num(&time[2..4])?, num(&time[4..6])?);
    let dt = NaiveDate::from_ymd_opt(2000 + y as i32, mo, d)
        .and_then(|d| d.and_hms_opt(h, mi, s))
        .ok_or_else(bad)?;
    Ok(dt.and_utc().timestamp())
}

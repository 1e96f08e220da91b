use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Deserializer, Serialize};

use super::{
    ClinicalEvent, Domain, EhrError, EncounterKind, EventFlag, EventStore, Measurement, PatientId, PatientRecord,
    Position, Sex,
};

/// One row of the event file, kept as text until validation.
///
/// Columns: `patient_id, domain, code, position, timestamp, value, unit,
/// encounter_id, encounter_kind, admission_code`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawEventRow {
    #[serde(default, deserialize_with = "lenient_string")]
    pub patient_id: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub domain: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub code: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub position: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub timestamp: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub value: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub unit: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub encounter_id: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub encounter_kind: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub admission_code: String,
    #[serde(skip)]
    pub line: usize,
}

/// Demographics file row: `patient_id, birth_date, sex, death_date`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DemographicsRow {
    #[serde(default, deserialize_with = "lenient_string")]
    pub patient_id: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub birth_date: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub sex: String,
    #[serde(default, deserialize_with = "lenient_string")]
    pub death_date: String,
    #[serde(skip)]
    pub line: usize,
}

// JSON lines may carry numbers or nulls where the delimited format has text.
fn lenient_string<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Loose {
        S(String),
        N(serde_json::Number),
        B(bool),
        Null(()),
    }
    Ok(match Option::<Loose>::deserialize(de)? {
        Some(Loose::S(s)) => s,
        Some(Loose::N(n)) => n.to_string(),
        Some(Loose::B(b)) => b.to_string(),
        Some(Loose::Null(())) | None => String::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSource {
    Events,
    Demographics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum RejectReason {
    EmptyPatientId,
    EmptyCode,
    UnknownDomain(String),
    UnknownPosition(String),
    UnknownEncounterKind(String),
    BadTimestamp(String),
    TimestampOutOfRange(String),
    ValueNotAllowed(Domain),
    UnknownPatient,
    EventAfterDeath,
    BadDemographics(String),
    DuplicateDemographics,
    Malformed(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::EmptyPatientId => write!(f, "empty patient_id"),
            RejectReason::EmptyCode => write!(f, "empty code"),
            RejectReason::UnknownDomain(d) => write!(f, "unknown domain '{d}'"),
            RejectReason::UnknownPosition(p) => write!(f, "unknown position '{p}'"),
            RejectReason::UnknownEncounterKind(k) => write!(f, "unknown encounter kind '{k}'"),
            RejectReason::BadTimestamp(t) => write!(f, "unparseable timestamp '{t}'"),
            RejectReason::TimestampOutOfRange(t) => write!(f, "timestamp {t} outside dataset range"),
            RejectReason::ValueNotAllowed(d) => write!(f, "value not allowed for {} events", d.as_str()),
            RejectReason::UnknownPatient => write!(f, "patient missing from demographics"),
            RejectReason::EventAfterDeath => write!(f, "event after death date"),
            RejectReason::BadDemographics(m) => write!(f, "bad demographics: {m}"),
            RejectReason::DuplicateDemographics => write!(f, "duplicate demographics row"),
            RejectReason::Malformed(m) => write!(f, "malformed row: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source: RowSource,
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted_events: usize,
    pub patients: usize,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Declared dataset date range (inclusive); events outside are rejected.
    #[serde(default)]
    pub date_range: Option<(NaiveDate, NaiveDate)>,
    /// Days after death during which events are still accepted.
    #[serde(default)]
    pub death_grace_days: i64,
}

pub(crate) fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let t = text.trim();
    if t.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Some(dt.naive_utc());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(t, fmt) {
            return Some(dt);
        }
    }
    NaiveDate::parse_from_str(t, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

fn parse_date(text: &str) -> Option<NaiveDate> {
    parse_timestamp(text).map(|t| t.date())
}

/// Validates raw rows and groups them into per-patient, time-sorted records.
///
/// Malformed rows are reported in the returned [`IngestReport`] rather than
/// silently dropped. Every patient in the demographics table gets a record.
pub fn ingest(
    events: impl IntoIterator<Item = RawEventRow>,
    demographics: impl IntoIterator<Item = DemographicsRow>,
    options: &IngestOptions,
) -> (EventStore, IngestReport) {
    let mut report = IngestReport::default();
    let mut records: BTreeMap<PatientId, PatientRecord> = BTreeMap::new();

    for (idx, row) in demographics.into_iter().enumerate() {
        let line = if row.line == 0 { idx + 1 } else { row.line };
        let reject = |reason| Rejection {
            source: RowSource::Demographics,
            line,
            patient_id: (!row.patient_id.trim().is_empty()).then(|| row.patient_id.trim().to_string()),
            reason,
        };
        let pid = row.patient_id.trim();
        if pid.is_empty() {
            report.rejections.push(reject(RejectReason::EmptyPatientId));
            continue;
        }
        let Some(birth_date) = parse_date(&row.birth_date) else {
            report.rejections.push(reject(RejectReason::BadDemographics(format!(
                "birth_date '{}'",
                row.birth_date
            ))));
            continue;
        };
        let sex = match row.sex.parse::<Sex>() {
            Ok(s) => s,
            Err(s) => {
                report
                    .rejections
                    .push(reject(RejectReason::BadDemographics(format!("sex '{s}'"))));
                continue;
            }
        };
        let death_date = if row.death_date.trim().is_empty() {
            None
        } else {
            match parse_date(&row.death_date) {
                Some(d) => Some(d),
                None => {
                    report.rejections.push(reject(RejectReason::BadDemographics(format!(
                        "death_date '{}'",
                        row.death_date
                    ))));
                    continue;
                }
            }
        };
        let id = PatientId::new(pid);
        if records.contains_key(&id) {
            report.rejections.push(reject(RejectReason::DuplicateDemographics));
            continue;
        }
        records.insert(
            id.clone(),
            PatientRecord {
                patient_id: id,
                birth_date,
                sex,
                death_date,
                events: Vec::new(),
            },
        );
    }

    for (idx, row) in events.into_iter().enumerate() {
        let line = if row.line == 0 { idx + 1 } else { row.line };
        match validate_event(&row, options) {
            Ok(event) => {
                let Some(record) = records.get_mut(&event.patient_id) else {
                    report.rejections.push(Rejection {
                        source: RowSource::Events,
                        line,
                        patient_id: Some(event.patient_id.0.clone()),
                        reason: RejectReason::UnknownPatient,
                    });
                    continue;
                };
                if let Some(death) = record.death_date {
                    let limit = death + chrono::Duration::days(options.death_grace_days);
                    if event.date() > limit {
                        report.rejections.push(Rejection {
                            source: RowSource::Events,
                            line,
                            patient_id: Some(event.patient_id.0.clone()),
                            reason: RejectReason::EventAfterDeath,
                        });
                        continue;
                    }
                }
                record.events.push(event);
                report.accepted_events += 1;
            }
            Err(reason) => report.rejections.push(Rejection {
                source: RowSource::Events,
                line,
                patient_id: (!row.patient_id.trim().is_empty()).then(|| row.patient_id.trim().to_string()),
                reason,
            }),
        }
    }

    for record in records.values_mut() {
        // stable: same-timestamp events keep file order
        record.events.sort_by_key(|e| e.timestamp);
    }
    report.patients = records.len();
    (EventStore { records }, report)
}

fn validate_event(row: &RawEventRow, options: &IngestOptions) -> Result<ClinicalEvent, RejectReason> {
    let pid = row.patient_id.trim();
    if pid.is_empty() {
        return Err(RejectReason::EmptyPatientId);
    }
    let domain: Domain = row.domain.parse().map_err(RejectReason::UnknownDomain)?;
    let code = row.code.trim();
    if code.is_empty() {
        return Err(RejectReason::EmptyCode);
    }
    let position: Position = row.position.parse().map_err(RejectReason::UnknownPosition)?;
    let encounter_kind: EncounterKind = row.encounter_kind.parse().map_err(RejectReason::UnknownEncounterKind)?;
    let timestamp = parse_timestamp(&row.timestamp).ok_or_else(|| RejectReason::BadTimestamp(row.timestamp.clone()))?;
    if let Some((lo, hi)) = options.date_range {
        if timestamp.date() < lo || timestamp.date() > hi {
            return Err(RejectReason::TimestampOutOfRange(row.timestamp.trim().to_string()));
        }
    }
    let raw_value = row.value.trim();
    let mut flags = BTreeSet::new();
    let value = if domain.carries_values() {
        if raw_value.is_empty() {
            if domain == Domain::Laboratory {
                flags.insert(EventFlag::EmptyValue);
            }
            None
        } else {
            match raw_value.parse::<f64>() {
                Ok(v) if v.is_finite() => Some(Measurement {
                    value: v,
                    unit: row.unit.trim().to_string(),
                }),
                _ => {
                    flags.insert(EventFlag::MistypedValue);
                    None
                }
            }
        }
    } else {
        if !raw_value.is_empty() {
            return Err(RejectReason::ValueNotAllowed(domain));
        }
        None
    };
    let admission_code = Some(row.admission_code.trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    Ok(ClinicalEvent {
        patient_id: PatientId::new(pid),
        domain,
        code: code.to_string(),
        position,
        timestamp,
        value,
        encounter_id: row.encounter_id.trim().to_string(),
        encounter_kind,
        admission_code,
        flags,
    })
}

enum Format {
    Delimited(u8),
    JsonLines,
}

fn detect_format(path: &Path) -> Format {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("tsv") | Some("tab") | Some("txt") => Format::Delimited(b'\t'),
        Some("jsonl") | Some("ndjson") | Some("json") => Format::JsonLines,
        _ => Format::Delimited(b','),
    }
}

fn open(path: &Path) -> Result<File, EhrError> {
    File::open(path).map_err(|source| EhrError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads rows from a delimited (by extension: `.csv`, `.tsv`) or JSON-lines file.
/// Rows that cannot be decoded at all are returned as rejections.
fn read_rows<T, F>(path: &Path, source: RowSource, set_line: F) -> Result<(Vec<T>, Vec<Rejection>), EhrError>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&mut T, usize),
{
    let file = open(path)?;
    read_rows_from(file, detect_format(path), path, source, set_line)
}

fn read_rows_from<T, F, R>(
    reader: R,
    format: Format,
    path: &Path,
    source: RowSource,
    set_line: F,
) -> Result<(Vec<T>, Vec<Rejection>), EhrError>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&mut T, usize),
    R: Read,
{
    let mut rows = Vec::new();
    let mut rejections = Vec::new();
    match format {
        Format::Delimited(delim) => {
            let mut rdr = csv::ReaderBuilder::new()
                .delimiter(delim)
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(reader);
            let headers = rdr.headers().map_err(|e| EhrError::Format {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            if !headers.iter().any(|h| h == "patient_id") {
                return Err(EhrError::Format {
                    path: path.display().to_string(),
                    message: "missing 'patient_id' column".into(),
                });
            }
            for (idx, rec) in rdr.deserialize::<T>().enumerate() {
                let line = idx + 2;
                match rec {
                    Ok(mut row) => {
                        set_line(&mut row, line);
                        rows.push(row);
                    }
                    Err(e) if e.is_io_error() => {
                        return Err(EhrError::Format {
                            path: path.display().to_string(),
                            message: e.to_string(),
                        })
                    }
                    Err(e) => rejections.push(Rejection {
                        source,
                        line,
                        patient_id: None,
                        reason: RejectReason::Malformed(e.to_string()),
                    }),
                }
            }
        }
        Format::JsonLines => {
            for (idx, line) in BufReader::new(reader).lines().enumerate() {
                let line_no = idx + 1;
                let text = line.map_err(|source| EhrError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                if text.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<T>(&text) {
                    Ok(mut row) => {
                        set_line(&mut row, line_no);
                        rows.push(row);
                    }
                    Err(e) => rejections.push(Rejection {
                        source,
                        line: line_no,
                        patient_id: None,
                        reason: RejectReason::Malformed(e.to_string()),
                    }),
                }
            }
        }
    }
    Ok((rows, rejections))
}

pub fn read_events(path: &Path) -> Result<(Vec<RawEventRow>, Vec<Rejection>), EhrError> {
    read_rows(path, RowSource::Events, |r: &mut RawEventRow, l| r.line = l)
}

pub fn read_demographics(path: &Path) -> Result<(Vec<DemographicsRow>, Vec<Rejection>), EhrError> {
    read_rows(path, RowSource::Demographics, |r: &mut DemographicsRow, l| r.line = l)
}

pub fn write_events_csv<W: Write>(rows: &[RawEventRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_demographics_csv<W: Write>(rows: &[DemographicsRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

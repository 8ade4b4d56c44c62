//! Crash records, tabular ingestion and export, and chronological splitting.
//!
//! Input is CSV with a header row or JSON-lines. A [`ColumnMapping`] names the
//! source column for every [`CrashRecord`] field; by default each field is read
//! from a column with the same name. Rows that violate a record invariant are
//! rejected and listed in the [`IngestReport`] rather than dropped.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

/// Timestamp format used on export.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

const ACCEPTED_TIMESTAMP_FORMATS: &[&str] = &[
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S%.f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoadwayClass {
    AccessControlled,
    Other,
}

impl FromStr for RoadwayClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "accesscontrolled" | "ac" | "freeway" | "interstate" => {
                Ok(RoadwayClass::AccessControlled)
            }
            "other" | "otherroads" | "nonaccesscontrolled" => Ok(RoadwayClass::Other),
            _ => Err(format!("unknown roadway class {s:?}")),
        }
    }
}

impl fmt::Display for RoadwayClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoadwayClass::AccessControlled => "AccessControlled",
            RoadwayClass::Other => "Other",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    N,
    S,
    E,
    W,
    Unknown,
}

impl Direction {
    pub fn opposite(self) -> Option<Direction> {
        match self {
            Direction::N => Some(Direction::S),
            Direction::S => Some(Direction::N),
            Direction::E => Some(Direction::W),
            Direction::W => Some(Direction::E),
            Direction::Unknown => None,
        }
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "n" | "north" | "nb" => Ok(Direction::N),
            "s" | "south" | "sb" => Ok(Direction::S),
            "e" | "east" | "eb" => Ok(Direction::E),
            "w" | "west" | "wb" => Ok(Direction::W),
            "" | "u" | "unknown" => Ok(Direction::Unknown),
            _ => Err(format!("unknown direction {s:?}")),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::N => "N",
            Direction::S => "S",
            Direction::E => "E",
            Direction::W => "W",
            Direction::Unknown => "Unknown",
        })
    }
}

/// One coded crash report and its narrative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub record_id: String,
    pub occurred_at: NaiveDateTime,
    pub route_id: String,
    pub milepoint: Option<f64>,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    pub roadway_class: RoadwayClass,
    pub direction: Direction,
    pub coded_secondary: bool,
    pub narrative: String,
}

impl CrashRecord {
    /// A record can take part in spatiotemporal pairing when it has a
    /// milepoint or a full lat/lon pair.
    pub fn is_filterable(&self) -> bool {
        self.milepoint.is_some() || self.lat_lon().is_some()
    }

    pub fn lat_lon(&self) -> Option<(f64, f64)> {
        match (self.latitude, self.longitude) {
            (Some(lat), Some(lon)) => Some((lat, lon)),
            _ => None,
        }
    }

    pub fn year(&self) -> i32 {
        self.occurred_at.year()
    }

    /// Checks the per-record invariants. Uniqueness is checked by the caller.
    pub fn validate(&self) -> Result<(), String> {
        if self.record_id.trim().is_empty() {
            return Err("empty record_id".into());
        }
        if self.route_id.trim().is_empty() {
            return Err("empty route_id".into());
        }
        if let Some(lat) = self.latitude {
            if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
                return Err("latitude out of range".into());
            }
        }
        if let Some(lon) = self.longitude {
            if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
                return Err("longitude out of range".into());
            }
        }
        if self.latitude.is_some() != self.longitude.is_some() {
            return Err("latitude and longitude must be given together".into());
        }
        if let Some(mp) = self.milepoint {
            if !mp.is_finite() || mp < 0.0 {
                return Err("milepoint must be a non-negative number".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelSource {
    ManualReview,
    AnalystUI,
    Import,
}

/// A human determination for one record. The latest label per record is the
/// active one; earlier labels stay in the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub record_id: String,
    pub is_secondary: bool,
    pub source: LabelSource,
    pub note: Option<String>,
    pub labeled_at: DateTime<Utc>,
}

/// A label value read from the corpus file itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportedLabel {
    pub record_id: String,
    pub is_secondary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Csv,
    Jsonl,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> InputFormat {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
        {
            Some(ext) if ext == "jsonl" || ext == "ndjson" || ext == "json" => InputFormat::Jsonl,
            _ => InputFormat::Csv,
        }
    }
}

/// Source column names per record field.
///
/// Unset entries default to the field name. Defaulted optional columns that
/// are absent from the input are treated as empty; explicitly configured
/// columns must exist.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub format: Option<InputFormat>,
    #[serde(default)]
    pub columns: ColumnNames,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnNames {
    pub record_id: Option<String>,
    pub occurred_at: Option<String>,
    pub route_id: Option<String>,
    pub milepoint: Option<String>,
    pub latitude: Option<String>,
    pub longitude: Option<String>,
    pub roadway_class: Option<String>,
    pub direction: Option<String>,
    pub coded_secondary: Option<String>,
    pub narrative: Option<String>,
    /// Reviewed label column (`is_secondary`); optional.
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    RecordId,
    OccurredAt,
    RouteId,
    Milepoint,
    Latitude,
    Longitude,
    RoadwayClass,
    Direction,
    CodedSecondary,
    Narrative,
    Label,
}

const FIELDS: [Field; 11] = [
    Field::RecordId,
    Field::OccurredAt,
    Field::RouteId,
    Field::Milepoint,
    Field::Latitude,
    Field::Longitude,
    Field::RoadwayClass,
    Field::Direction,
    Field::CodedSecondary,
    Field::Narrative,
    Field::Label,
];

impl Field {
    fn default_name(self) -> &'static str {
        match self {
            Field::RecordId => "record_id",
            Field::OccurredAt => "occurred_at",
            Field::RouteId => "route_id",
            Field::Milepoint => "milepoint",
            Field::Latitude => "latitude",
            Field::Longitude => "longitude",
            Field::RoadwayClass => "roadway_class",
            Field::Direction => "direction",
            Field::CodedSecondary => "coded_secondary",
            Field::Narrative => "narrative",
            Field::Label => "is_secondary",
        }
    }

    fn required(self) -> bool {
        matches!(
            self,
            Field::RecordId
                | Field::OccurredAt
                | Field::RouteId
                | Field::RoadwayClass
                | Field::Narrative
        )
    }
}

impl ColumnMapping {
    pub fn from_toml_str(s: &str) -> Result<Self, IngestError> {
        toml::from_str(s).map_err(|e| IngestError::Mapping(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    fn configured(&self, field: Field) -> Option<&str> {
        let c = &self.columns;
        match field {
            Field::RecordId => c.record_id.as_deref(),
            Field::OccurredAt => c.occurred_at.as_deref(),
            Field::RouteId => c.route_id.as_deref(),
            Field::Milepoint => c.milepoint.as_deref(),
            Field::Latitude => c.latitude.as_deref(),
            Field::Longitude => c.longitude.as_deref(),
            Field::RoadwayClass => c.roadway_class.as_deref(),
            Field::Direction => c.direction.as_deref(),
            Field::CodedSecondary => c.coded_secondary.as_deref(),
            Field::Narrative => c.narrative.as_deref(),
            Field::Label => c.label.as_deref(),
        }
    }

    /// Resolves every field to a column position in `header`.
    fn resolve(&self, header: &[String]) -> Result<ResolvedColumns, IngestError> {
        let position: HashMap<&str, usize> = header
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim(), i))
            .collect();
        let mut slots = [None; 11];
        for (slot, field) in slots.iter_mut().zip(FIELDS) {
            let explicit = self.configured(field);
            let name = explicit.unwrap_or(field.default_name());
            match position.get(name) {
                Some(&i) => *slot = Some(i),
                None if explicit.is_some() || field.required() => {
                    return Err(IngestError::MissingColumn(name.to_string()))
                }
                None => {}
            }
        }
        Ok(ResolvedColumns { slots })
    }
}

struct ResolvedColumns {
    slots: [Option<usize>; 11],
}

impl ResolvedColumns {
    fn get<'a>(&self, field: Field, row: &'a [String]) -> &'a str {
        let idx = FIELDS
            .iter()
            .position(|f| *f == field)
            .expect("field listed");
        self.slots[idx]
            .and_then(|i| row.get(i))
            .map(|s| s.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mapping references missing column {0:?}")]
    MissingColumn(String),
    #[error("invalid column mapping: {0}")]
    Mapping(String),
    #[error("malformed input: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based data row number (the header is not counted).
    pub row: usize,
    pub record_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub accepted: usize,
    pub rejected: Vec<RejectedRow>,
    /// Accepted records with neither a milepoint nor lat/lon.
    pub unfilterable: Vec<String>,
    pub labeled: usize,
    pub labeled_positive: usize,
}

impl IngestReport {
    /// Fraction of labeled records that are positive.
    pub fn prevalence(&self) -> Option<f64> {
        (self.labeled > 0).then(|| self.labeled_positive as f64 / self.labeled as f64)
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "rows read: {}, accepted: {}, rejected: {}, unfilterable: {}",
            self.rows_read,
            self.accepted,
            self.rejected.len(),
            self.unfilterable.len()
        )?;
        if let Some(p) = self.prevalence() {
            writeln!(
                f,
                "labeled: {}, positive: {} ({:.1}%)",
                self.labeled,
                self.labeled_positive,
                p * 100.0
            )?;
        }
        for r in &self.rejected {
            writeln!(f, "  row {}: {}", r.row, r.reason)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    pub records: Vec<CrashRecord>,
    pub labels: Vec<ImportedLabel>,
    pub report: IngestReport,
}

impl Ingested {
    pub fn label_map(&self) -> HashMap<String, bool> {
        self.labels
            .iter()
            .map(|l| (l.record_id.clone(), l.is_secondary))
            .collect()
    }
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime, String> {
    let s = s.trim();
    ACCEPTED_TIMESTAMP_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .ok_or_else(|| format!("unparseable timestamp {s:?}"))
}

fn parse_bool(s: &str) -> Result<Option<bool>, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => Ok(None),
        "true" | "t" | "yes" | "y" | "1" => Ok(Some(true)),
        "false" | "f" | "no" | "n" | "0" => Ok(Some(false)),
        other => Err(format!("not a boolean: {other:?}")),
    }
}

fn parse_opt_f64(s: &str, what: &str) -> Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("{what} is not a number: {s:?}"))
}

fn parse_row(
    cols: &ResolvedColumns,
    row: &[String],
) -> Result<(CrashRecord, Option<bool>), String> {
    let record = CrashRecord {
        record_id: cols.get(Field::RecordId, row).trim().to_string(),
        occurred_at: parse_timestamp(cols.get(Field::OccurredAt, row))?,
        route_id: cols.get(Field::RouteId, row).trim().to_string(),
        milepoint: parse_opt_f64(cols.get(Field::Milepoint, row), "milepoint")?,
        latitude: parse_opt_f64(cols.get(Field::Latitude, row), "latitude")?,
        longitude: parse_opt_f64(cols.get(Field::Longitude, row), "longitude")?,
        roadway_class: cols.get(Field::RoadwayClass, row).parse()?,
        direction: cols.get(Field::Direction, row).parse()?,
        coded_secondary: parse_bool(cols.get(Field::CodedSecondary, row))?.unwrap_or(false),
        narrative: cols.get(Field::Narrative, row).to_string(),
    };
    record.validate()?;
    let label = parse_bool(cols.get(Field::Label, row)).map_err(|e| format!("label {e}"))?;
    Ok((record, label))
}

/// Shared row loop: validates, de-duplicates, and fills the report.
fn ingest_rows<I>(
    header: Vec<String>,
    rows: I,
    mapping: &ColumnMapping,
) -> Result<Ingested, IngestError>
where
    I: Iterator<Item = Result<Vec<String>, String>>,
{
    let cols = mapping.resolve(&header)?;
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (i, row) in rows.enumerate() {
        let row_no = i + 1;
        out.report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(reason) => {
                out.report.rejected.push(RejectedRow {
                    row: row_no,
                    record_id: None,
                    reason,
                });
                continue;
            }
        };
        match parse_row(&cols, &row) {
            Ok((record, label)) => {
                if !seen.insert(record.record_id.clone()) {
                    out.report.rejected.push(RejectedRow {
                        row: row_no,
                        record_id: Some(record.record_id),
                        reason: "duplicate record_id".into(),
                    });
                    continue;
                }
                if !record.is_filterable() {
                    out.report.unfilterable.push(record.record_id.clone());
                }
                if let Some(is_secondary) = label {
                    out.report.labeled += 1;
                    out.report.labeled_positive += usize::from(is_secondary);
                    out.labels.push(ImportedLabel {
                        record_id: record.record_id.clone(),
                        is_secondary,
                    });
                }
                out.records.push(record);
            }
            Err(reason) => {
                let id = cols.get(Field::RecordId, &row).trim();
                out.report.rejected.push(RejectedRow {
                    row: row_no,
                    record_id: (!id.is_empty()).then(|| id.to_string()),
                    reason,
                });
            }
        }
    }
    out.report.accepted = out.records.len();
    Ok(out)
}

pub fn ingest_csv<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<Ingested, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| IngestError::Malformed(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let width = header.len();
    let rows = rdr.into_records().map(move |r| match r {
        Ok(rec) if rec.len() != width => {
            Err(format!("expected {width} fields, found {}", rec.len()))
        }
        Ok(rec) => Ok(rec.iter().map(str::to_string).collect()),
        Err(e) => Err(format!("csv error: {e}")),
    });
    ingest_rows(header, rows, mapping)
}

fn json_cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn ingest_jsonl<R: BufRead>(
    reader: R,
    mapping: &ColumnMapping,
) -> Result<Ingested, IngestError> {
    let mut objects = Vec::new();
    let mut header: Vec<String> = Vec::new();
    let mut known = HashSet::new();
    for line in reader.lines() {
        let line = line.map_err(|e| IngestError::Malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&line) {
            Ok(obj) => {
                for k in obj.keys() {
                    if known.insert(k.clone()) {
                        header.push(k.clone());
                    }
                }
                objects.push(Ok(obj));
            }
            Err(e) => objects.push(Err(format!("invalid JSON object: {e}"))),
        }
    }
    let cols = header.clone();
    let rows = objects.into_iter().map(move |obj| {
        obj.map(|o| {
            cols.iter()
                .map(|c| o.get(c).map(json_cell).unwrap_or_default())
                .collect()
        })
    });
    ingest_rows(header, rows, mapping)
}

/// Ingests a file, choosing CSV or JSON-lines from the mapping or the extension.
pub fn ingest_path(path: &Path, mapping: &ColumnMapping) -> Result<Ingested, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match mapping
        .format
        .unwrap_or_else(|| InputFormat::from_path(path))
    {
        InputFormat::Csv => ingest_csv(file, mapping),
        InputFormat::Jsonl => ingest_jsonl(BufReader::new(file), mapping),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn export_cells(r: &CrashRecord, label: Option<bool>) -> [String; 11] {
    [
        r.record_id.clone(),
        r.occurred_at.format(TIMESTAMP_FORMAT).to_string(),
        r.route_id.clone(),
        fmt_opt(r.milepoint),
        fmt_opt(r.latitude),
        fmt_opt(r.longitude),
        r.roadway_class.to_string(),
        r.direction.to_string(),
        r.coded_secondary.to_string(),
        r.narrative.clone(),
        label.map(|b| b.to_string()).unwrap_or_default(),
    ]
}

/// Writes records as CSV using the default column names, so the output
/// re-ingests with the default mapping.
pub fn export_csv<W: Write>(
    records: &[CrashRecord],
    labels: &HashMap<String, bool>,
    writer: W,
) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| IngestError::Malformed(e.to_string());
    w.write_record(FIELDS.iter().map(|f| f.default_name()))
        .map_err(err)?;
    for r in records {
        w.write_record(export_cells(r, labels.get(&r.record_id).copied()))
            .map_err(err)?;
    }
    w.flush().map_err(|e| IngestError::Malformed(e.to_string()))
}

pub fn export_jsonl<W: Write>(
    records: &[CrashRecord],
    labels: &HashMap<String, bool>,
    mut writer: W,
) -> Result<(), IngestError> {
    for r in records {
        let mut obj = serde_json::Map::new();
        for (field, cell) in FIELDS
            .iter()
            .zip(export_cells(r, labels.get(&r.record_id).copied()))
        {
            if !cell.is_empty() {
                obj.insert(
                    field.default_name().to_string(),
                    serde_json::Value::String(cell),
                );
            }
        }
        serde_json::to_writer(&mut writer, &obj)
            .map_err(|e| IngestError::Malformed(e.to_string()))?;
        writer
            .write_all(b"\n")
            .map_err(|e| IngestError::Malformed(e.to_string()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub cutoff_year: i32,
    pub warnings: Vec<String>,
}

/// Records from `cutoff_year` and earlier train; later years test.
pub fn split_by_year(records: &[CrashRecord], cutoff_year: i32) -> DatasetSplit {
    let (train, test): (Vec<_>, Vec<_>) = records.iter().partition(|r| r.year() <= cutoff_year);
    let train: BTreeSet<String> = train.into_iter().map(|r| r.record_id.clone()).collect();
    let test: BTreeSet<String> = test.into_iter().map(|r| r.record_id.clone()).collect();
    let mut warnings = Vec::new();
    if !records.is_empty() {
        if train.is_empty() {
            warnings.push(format!(
                "no records in or before {cutoff_year}; training set is empty"
            ));
        }
        if test.is_empty() {
            warnings.push(format!("no records after {cutoff_year}; test set is empty"));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    DatasetSplit {
        train,
        test,
        cutoff_year,
        warnings,
    }
}

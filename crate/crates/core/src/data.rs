//! Birth-history records, their expansion into discrete-time person-months
//! and aggregation into model-ready count cells.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Calendar month counted from January of year 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month(pub i32);

impl Month {
    pub fn new(year: i32, month: u32) -> Self {
        assert!((1..=12).contains(&month), "month out of range");
        Month(year * 12 + month as i32 - 1)
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12)
    }

    /// 1-based month of the year.
    pub fn month_of_year(self) -> u32 {
        self.0.rem_euclid(12) as u32 + 1
    }

    pub fn plus(self, months: i32) -> Self {
        Month(self.0 + months)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month_of_year())
    }
}

impl FromStr for Month {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| format!("malformed month {s:?} (expected YYYY-MM)"))?;
        if y.len() != 4 || m.len() != 2 {
            return Err(format!("malformed month {s:?} (expected YYYY-MM)"));
        }
        let year: i32 = y.parse().map_err(|_| format!("malformed year in {s:?}"))?;
        let month: u32 = m.parse().map_err(|_| format!("malformed month in {s:?}"))?;
        if !(1..=12).contains(&month) {
            return Err(format!("month out of range in {s:?}"));
        }
        Ok(Month::new(year, month))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BirthRecord {
    pub child_id: String,
    pub birth_month: Month,
    pub death_month: Option<Month>,
    pub interview_month: Month,
    pub cluster_id: String,
    pub region_id: String,
    pub is_urban: bool,
    /// Design weight of the mother.
    pub weight: f64,
}

impl BirthRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return Err(Error::InvalidRecord(format!(
                "child {}: weight must be positive",
                self.child_id
            )));
        }
        if self.interview_month < self.birth_month {
            return Err(Error::InvalidRecord(format!(
                "child {}: interview before birth",
                self.child_id
            )));
        }
        if let Some(d) = self.death_month {
            if d < self.birth_month {
                return Err(Error::InvalidRecord(format!(
                    "child {}: death before birth",
                    self.child_id
                )));
            }
            if d > self.interview_month {
                return Err(Error::InvalidRecord(format!(
                    "child {}: death after interview",
                    self.child_id
                )));
            }
        }
        Ok(())
    }

    /// Age in months at death, if the child died.
    pub fn death_age(&self) -> Option<i32> {
        self.death_month.map(|d| d.0 - self.birth_month.0)
    }
}

/// The six under-five age bands `[0,1) [1,12) [12,24) [24,36) [36,48) [48,60)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeBandSchema {
    lower: [u32; 6],
    upper: [u32; 6],
    midpoints: [f64; 6],
}

impl Default for AgeBandSchema {
    fn default() -> Self {
        Self {
            lower: [0, 1, 12, 24, 36, 48],
            upper: [1, 12, 24, 36, 48, 60],
            midpoints: [0.0, 6.0, 17.5, 29.5, 41.5, 52.5],
        }
    }
}

impl AgeBandSchema {
    pub const BANDS: usize = 6;
    pub const MAX_AGE: u32 = 60;

    pub fn midpoints(&self) -> &[f64; 6] {
        &self.midpoints
    }

    /// Number of months in each band (1, 11, 12, 12, 12, 12).
    pub fn widths(&self) -> [u32; 6] {
        std::array::from_fn(|i| self.upper[i] - self.lower[i])
    }

    pub fn bounds(&self, band: usize) -> (u32, u32) {
        (self.lower[band], self.upper[band])
    }

    pub fn band_of(&self, age_months: u32) -> Option<usize> {
        (0..Self::BANDS).find(|&b| self.lower[b] <= age_months && age_months < self.upper[b])
    }

    pub fn label(&self, band: usize) -> String {
        format!("[{},{})", self.lower[band], self.upper[band])
    }
}

/// Months at risk that one child contributes to one (band, period, cohort).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedRow {
    pub cluster_id: String,
    pub region_id: String,
    pub is_urban: bool,
    pub weight: f64,
    pub age_band: usize,
    pub period: i32,
    pub cohort: i32,
    pub months: u32,
    pub died: bool,
}

/// Attributes every life-month below age 60 to its age band and calendar
/// year. Survivors are censored at the month before the interview; a death
/// contributes its own month and is flagged in the band that contains it.
pub fn expand_birth_history(
    record: &BirthRecord,
    schema: &AgeBandSchema,
) -> Result<Vec<ExpandedRow>> {
    record.validate()?;
    let cohort = record.birth_month.year();
    let (last_age, death_age) = match record.death_age() {
        Some(a) => (a, Some(a)),
        None => (record.interview_month.0 - record.birth_month.0 - 1, None),
    };
    let last_age = last_age.min(AgeBandSchema::MAX_AGE as i32 - 1);

    let mut rows: Vec<ExpandedRow> = Vec::new();
    for age in 0..=last_age {
        let band = schema.band_of(age as u32).expect("age below 60");
        let period = record.birth_month.plus(age).year();
        let died = death_age == Some(age);
        match rows.last_mut() {
            Some(r) if r.age_band == band && r.period == period => {
                r.months += 1;
                r.died |= died;
            }
            _ => rows.push(ExpandedRow {
                cluster_id: record.cluster_id.clone(),
                region_id: record.region_id.clone(),
                is_urban: record.is_urban,
                weight: record.weight,
                age_band: band,
                period,
                cohort,
                months: 1,
                died,
            }),
        }
    }
    Ok(rows)
}

/// Aggregated deaths `y` and exposure `n` (person-months) for one
/// (band, period, cohort, cluster).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountCell {
    pub age_band: usize,
    pub period: i32,
    pub cohort: i32,
    pub cluster_id: String,
    pub region_id: String,
    pub is_urban: bool,
    pub deaths: u64,
    pub exposure: u64,
}

/// Sums expanded rows per (cluster, band, period, cohort). Output is sorted by
/// that key, so it does not depend on input order.
pub fn aggregate_cells<'a>(rows: impl IntoIterator<Item = &'a ExpandedRow>) -> Vec<CountCell> {
    let mut acc: BTreeMap<(&str, &str, bool, usize, i32, i32), (u64, u64)> = BTreeMap::new();
    for r in rows {
        let e = acc
            .entry((
                r.cluster_id.as_str(),
                r.region_id.as_str(),
                r.is_urban,
                r.age_band,
                r.period,
                r.cohort,
            ))
            .or_insert((0, 0));
        e.0 += r.died as u64;
        e.1 += r.months as u64;
    }
    acc.into_iter()
        .filter(|(_, v)| v.1 > 0)
        .map(
            |((cluster, region, urban, band, period, cohort), (y, n))| CountCell {
                age_band: band,
                period,
                cohort,
                cluster_id: cluster.to_string(),
                region_id: region.to_string(),
                is_urban: urban,
                deaths: y,
                exposure: n,
            },
        )
        .collect()
}

/// Expands and aggregates a whole survey, keeping periods in `periods`
/// (inclusive) when given.
pub fn survey_cells(
    records: &[BirthRecord],
    schema: &AgeBandSchema,
    periods: Option<(i32, i32)>,
) -> Result<Vec<CountCell>> {
    let mut rows = Vec::new();
    for r in records {
        rows.extend(expand_birth_history(r, schema)?);
    }
    if let Some((lo, hi)) = periods {
        rows.retain(|r| r.period >= lo && r.period <= hi);
    }
    Ok(aggregate_cells(&rows))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// Line number in the source file (the header is line 1).
    pub row: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SurveyLoad {
    pub records: Vec<BirthRecord>,
    pub rejections: Vec<Rejection>,
}

pub const SURVEY_COLUMNS: [&str; 8] = [
    "child_id",
    "birth_month",
    "death_month",
    "interview_month",
    "cluster_id",
    "region_id",
    "urban",
    "weight",
];

/// Reads a birth-history CSV. Rows that fail to parse or validate are
/// reported, never dropped silently. When `known_regions` is given, region ids
/// outside it are rejected.
pub fn load_survey_csv(
    path: impl AsRef<Path>,
    known_regions: Option<&HashSet<String>>,
) -> Result<SurveyLoad> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut index = [0usize; 8];
    for (k, name) in SURVEY_COLUMNS.iter().enumerate() {
        index[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("missing column {name}"),
            })?;
    }

    let mut out = SurveyLoad::default();
    for result in reader.records() {
        let record = result?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&record, &index, known_regions) {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejections.push(Rejection { row: line, reason }),
        }
    }
    Ok(out)
}

fn parse_row(
    record: &csv::StringRecord,
    index: &[usize; 8],
    known_regions: Option<&HashSet<String>>,
) -> std::result::Result<BirthRecord, String> {
    let field = |k: usize| record.get(index[k]).unwrap_or("");
    let child_id = field(0).to_string();
    if child_id.is_empty() {
        return Err("missing child_id".into());
    }
    let birth_month: Month = field(1).parse()?;
    let death_month = match field(2) {
        "" => None,
        s => Some(s.parse::<Month>()?),
    };
    let interview_month: Month = field(3).parse()?;
    let cluster_id = field(4).to_string();
    if cluster_id.is_empty() {
        return Err("missing cluster_id".into());
    }
    let region_id = field(5).to_string();
    if region_id.is_empty() {
        return Err("missing region_id".into());
    }
    if let Some(known) = known_regions {
        if !known.contains(&region_id) {
            return Err(format!("unknown region id {region_id:?}"));
        }
    }
    let is_urban = match field(6) {
        "1" => true,
        "0" => false,
        s => return Err(format!("urban must be 0 or 1, got {s:?}")),
    };
    let weight = match field(7) {
        "" => return Err("missing weight".into()),
        s => s
            .parse::<f64>()
            .map_err(|_| format!("malformed weight {s:?}"))?,
    };
    let rec = BirthRecord {
        child_id,
        birth_month,
        death_month,
        interview_month,
        cluster_id,
        region_id,
        is_urban,
        weight,
    };
    rec.validate().map_err(|e| match e {
        Error::InvalidRecord(m) => m,
        other => other.to_string(),
    })?;
    Ok(rec)
}

pub fn write_survey_csv(path: impl AsRef<Path>, records: &[BirthRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(SURVEY_COLUMNS)?;
    for r in records {
        w.write_record([
            r.child_id.clone(),
            r.birth_month.to_string(),
            r.death_month.map(|m| m.to_string()).unwrap_or_default(),
            r.interview_month.to_string(),
            r.cluster_id.clone(),
            r.region_id.clone(),
            (r.is_urban as u8).to_string(),
            format_weight(r.weight),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
fn format_weight(w: f64) -> String {
    w.to_string()
}

pub fn write_rejections_csv(path: impl AsRef<Path>, rejections: &[Rejection]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["row", "reason"])?;
    for r in rejections {
        w.write_record([r.row.to_string(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

pub fn write_cells_csv(path: impl AsRef<Path>, cells: &[CountCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record([
        "age_band",
        "period",
        "cohort",
        "cluster_id",
        "region_id",
        "urban",
        "deaths",
        "exposure",
    ])?;
    for c in cells {
        w.write_record([
            c.age_band.to_string(),
            c.period.to_string(),
            c.cohort.to_string(),
            c.cluster_id.clone(),
            c.region_id.clone(),
            (c.is_urban as u8).to_string(),
            c.deaths.to_string(),
            c.exposure.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

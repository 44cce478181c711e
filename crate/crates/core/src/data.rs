//! Paired longitudinal observations and their validated ingestion.
//!
//! A [`LongitudinalDataset`] is subject-major: subjects appear in order of
//! first appearance in the source table and each subject's visits are sorted
//! by observation time. Everything downstream (design stacking, per-subject
//! covariance blocks) relies on that layout.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed table: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{column}` for role `{role}`")]
    MissingColumn { role: String, column: String },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("subject `{subject}` has two visits with the same {what}")]
    DuplicateVisit { subject: String, what: &'static str },
    #[error("subject `{subject}` appears in groups {first} and {second}")]
    NonConstantGroup {
        subject: String,
        first: usize,
        second: usize,
    },
    #[error("group {0} has no subjects")]
    EmptyGroup(usize),
    #[error("group label {value} on row {row} is not an integer >= 1")]
    InvalidGroup { row: usize, value: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dataset has no observations")]
    Empty,
}

/// One paired measurement of one subject at one visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub subject_id: String,
    pub visit_index: usize,
    pub time: f64,
    pub y1: f64,
    pub y2: f64,
    pub w: f64,
    pub h: f64,
    pub parametric: Vec<f64>,
    /// 1-based group label.
    pub group: usize,
}

/// Contiguous row range of one subject within the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpan {
    pub start: usize,
    pub len: usize,
    pub group: usize,
}

impl SubjectSpan {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    observations: Vec<Observation>,
    subjects: Vec<SubjectSpan>,
    num_groups: usize,
    parametric_names: Vec<String>,
}

impl LongitudinalDataset {
    /// Validates and reorders observations into subject-major, time-sorted
    /// layout. `visit_index` values are rewritten to 1..n_i in time order.
    pub fn new(
        observations: Vec<Observation>,
        parametric_names: Vec<String>,
    ) -> Result<Self, DataError> {
        Self::build(observations, parametric_names, false)
    }

    fn build(
        observations: Vec<Observation>,
        parametric_names: Vec<String>,
        explicit_visits: bool,
    ) -> Result<Self, DataError> {
        if observations.is_empty() {
            return Err(DataError::Empty);
        }
        let mut order: Vec<String> = Vec::new();
        let mut by_subject: HashMap<String, Vec<Observation>> = HashMap::new();
        for obs in observations {
            if obs.parametric.len() != parametric_names.len() {
                return Err(DataError::NonFinite(format!(
                    "parametric covariates of subject `{}` (expected {} values)",
                    obs.subject_id,
                    parametric_names.len()
                )));
            }
            let finite = [obs.time, obs.y1, obs.y2, obs.w, obs.h]
                .iter()
                .chain(obs.parametric.iter())
                .all(|v| v.is_finite());
            if !finite {
                return Err(DataError::NonFinite(format!("subject `{}`", obs.subject_id)));
            }
            if obs.group == 0 {
                return Err(DataError::InvalidGroup {
                    row: 0,
                    value: "0".into(),
                });
            }
            let entry = by_subject.entry(obs.subject_id.clone()).or_insert_with(|| {
                order.push(obs.subject_id.clone());
                Vec::new()
            });
            if let Some(first) = entry.first() {
                if first.group != obs.group {
                    return Err(DataError::NonConstantGroup {
                        subject: obs.subject_id.clone(),
                        first: first.group,
                        second: obs.group,
                    });
                }
            }
            entry.push(obs);
        }

        let mut ordered = Vec::new();
        let mut subjects = Vec::with_capacity(order.len());
        let mut num_groups = 0;
        for id in order {
            let mut visits = by_subject.remove(&id).unwrap_or_default();
            if explicit_visits {
                visits.sort_by_key(|o| o.visit_index);
                if visits.windows(2).any(|p| p[0].visit_index == p[1].visit_index) {
                    return Err(DataError::DuplicateVisit {
                        subject: id,
                        what: "visit index",
                    });
                }
            }
            visits.sort_by(|a, b| a.time.total_cmp(&b.time));
            if visits.windows(2).any(|p| p[0].time == p[1].time) {
                return Err(DataError::DuplicateVisit {
                    subject: id,
                    what: "time",
                });
            }
            if explicit_visits {
                // time must increase with the recorded visit index
                if visits.windows(2).any(|p| p[0].visit_index > p[1].visit_index) {
                    return Err(DataError::DuplicateVisit {
                        subject: id,
                        what: "ordering of time and visit index",
                    });
                }
            } else {
                for (j, v) in visits.iter_mut().enumerate() {
                    v.visit_index = j + 1;
                }
            }
            let group = visits[0].group;
            num_groups = num_groups.max(group);
            subjects.push(SubjectSpan {
                start: ordered.len(),
                len: visits.len(),
                group,
            });
            ordered.extend(visits);
        }
        for g in 1..=num_groups {
            if !subjects.iter().any(|s| s.group == g) {
                return Err(DataError::EmptyGroup(g));
            }
        }
        Ok(Self {
            observations: ordered,
            subjects,
            num_groups,
            parametric_names,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn subjects(&self) -> &[SubjectSpan] {
        &self.subjects
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Total number of paired observations N.
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn visits_per_subject(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.len).collect()
    }

    pub fn parametric_names(&self) -> &[String] {
        &self.parametric_names
    }

    pub fn parametric_index(&self, name: &str) -> Option<usize> {
        self.parametric_names.iter().position(|n| n == name)
    }

    pub fn covariate_points(&self) -> Vec<[f64; 2]> {
        self.observations.iter().map(|o| [o.w, o.h]).collect()
    }

    /// Same subjects, times and covariates with new responses. `y1` and `y2`
    /// follow dataset row order.
    pub fn with_responses(&self, y1: &[f64], y2: &[f64]) -> Self {
        assert_eq!(y1.len(), self.len());
        assert_eq!(y2.len(), self.len());
        let mut out = self.clone();
        for (o, (a, b)) in out.observations.iter_mut().zip(y1.iter().zip(y2)) {
            o.y1 = *a;
            o.y2 = *b;
        }
        out
    }

    /// Copy with the first covariate multiplied by `factor`.
    pub fn scale_w(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for o in &mut out.observations {
            o.w *= factor;
        }
        out
    }
}

/// Maps model roles onto column names of a delimited table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnSchema {
    pub subject: String,
    pub time: String,
    pub y1: String,
    pub y2: String,
    pub group: String,
    pub w: String,
    pub h: String,
    /// Optional explicit visit index column.
    pub visit: Option<String>,
    pub parametric: Vec<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            subject: "subject".into(),
            time: "time".into(),
            y1: "y1".into(),
            y2: "y2".into(),
            group: "group".into(),
            w: "w".into(),
            h: "h".into(),
            visit: None,
            parametric: Vec::new(),
        }
    }
}

impl ColumnSchema {
    pub fn with_parametric(mut self, names: &[&str]) -> Self {
        self.parametric = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    #[default]
    Csv,
    Tsv,
}

impl Delimiter {
    pub fn byte(self) -> u8 {
        match self {
            Delimiter::Csv => b',',
            Delimiter::Tsv => b'\t',
        }
    }
}

impl fmt::Display for Delimiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delimiter::Csv => write!(f, "csv"),
            Delimiter::Tsv => write!(f, "tsv"),
        }
    }
}

/// Reads a delimited table with a header row. Lines starting with `#` are
/// treated as comments.
pub fn load_dataset(
    path: impl AsRef<Path>,
    schema: &ColumnSchema,
    delimiter: Delimiter,
) -> Result<LongitudinalDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema, delimiter)
}

pub fn read_dataset<R: std::io::Read>(
    reader: R,
    schema: &ColumnSchema,
    delimiter: Delimiter,
) -> Result<LongitudinalDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter.byte())
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |role: &str, name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                role: role.to_string(),
                column: name.to_string(),
            })
    };
    let subject_col = col("subject", &schema.subject)?;
    let time_col = col("time", &schema.time)?;
    let y1_col = col("y1", &schema.y1)?;
    let y2_col = col("y2", &schema.y2)?;
    let group_col = col("group", &schema.group)?;
    let w_col = col("w", &schema.w)?;
    let h_col = col("h", &schema.h)?;
    let visit_col = match &schema.visit {
        Some(name) => Some(col("visit", name)?),
        None => None,
    };
    let par_cols = schema
        .parametric
        .iter()
        .map(|name| col("parametric", name))
        .collect::<Result<Vec<_>, _>>()?;

    let mut observations = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |c: usize| -> Result<&str, DataError> {
            match record.get(c) {
                Some(v) if !v.is_empty() && v != "NA" => Ok(v),
                _ => Err(DataError::MissingValue {
                    row,
                    column: headers.get(c).unwrap_or("?").to_string(),
                }),
            }
        };
        let num = |c: usize| -> Result<f64, DataError> {
            let raw = cell(c)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row,
                    column: headers.get(c).unwrap_or("?").to_string(),
                    value: raw.to_string(),
                })
        };
        let group_raw = cell(group_col)?;
        let group = group_raw
            .parse::<usize>()
            .ok()
            .filter(|g| *g >= 1)
            .ok_or_else(|| DataError::InvalidGroup {
                row,
                value: group_raw.to_string(),
            })?;
        let visit_index = match visit_col {
            Some(c) => {
                let raw = cell(c)?;
                raw.parse::<usize>().map_err(|_| DataError::NonNumeric {
                    row,
                    column: headers.get(c).unwrap_or("?").to_string(),
                    value: raw.to_string(),
                })?
            }
            None => 0,
        };
        observations.push(Observation {
            subject_id: cell(subject_col)?.to_string(),
            visit_index,
            time: num(time_col)?,
            y1: num(y1_col)?,
            y2: num(y2_col)?,
            w: num(w_col)?,
            h: num(h_col)?,
            parametric: par_cols.iter().map(|&c| num(c)).collect::<Result<_, _>>()?,
            group,
        });
    }
    LongitudinalDataset::build(observations, schema.parametric.clone(), visit_col.is_some())
}

/// Writes the dataset with the default column names plus parametric columns.
pub fn write_dataset<W: std::io::Write>(
    ds: &LongitudinalDataset,
    writer: W,
    delimiter: Delimiter,
) -> Result<(), DataError> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(delimiter.byte())
        .from_writer(writer);
    let mut header: Vec<String> = ["subject", "visit", "time", "y1", "y2", "group", "w", "h"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(ds.parametric_names.iter().cloned());
    wtr.write_record(&header)?;
    for o in &ds.observations {
        let mut rec = vec![
            o.subject_id.clone(),
            o.visit_index.to_string(),
            fmt_num(o.time),
            fmt_num(o.y1),
            fmt_num(o.y2),
            o.group.to_string(),
            fmt_num(o.w),
            fmt_num(o.h),
        ];
        rec.extend(o.parametric.iter().map(|v| fmt_num(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(
    ds: &LongitudinalDataset,
    path: impl AsRef<Path>,
    delimiter: Delimiter,
) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(file), delimiter)
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Moments {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
        let sd = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: usize,
    pub subjects: usize,
    pub observations: usize,
    pub w_range: (f64, f64),
    pub h_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub num_subjects: usize,
    pub num_observations: usize,
    pub groups: Vec<GroupSummary>,
    pub y1: Moments,
    pub y2: Moments,
    /// Pairs of groups whose covariate bounding boxes do not overlap on
    /// at least one axis.
    pub disjoint_support: Vec<(usize, usize)>,
}

impl DatasetSummary {
    pub fn group_counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.subjects).collect()
    }
}

pub fn summarize(ds: &LongitudinalDataset) -> DatasetSummary {
    let obs = ds.observations();
    let groups: Vec<GroupSummary> = (1..=ds.num_groups())
        .map(|g| {
            let subjects = ds.subjects().iter().filter(|s| s.group == g).count();
            let rows: Vec<&Observation> = obs.iter().filter(|o| o.group == g).collect();
            let range = |f: fn(&Observation) -> f64| {
                rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), o| {
                    (lo.min(f(o)), hi.max(f(o)))
                })
            };
            GroupSummary {
                group: g,
                subjects,
                observations: rows.len(),
                w_range: range(|o| o.w),
                h_range: range(|o| o.h),
            }
        })
        .collect();
    let mut disjoint = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let (ga, gb) = (&groups[a], &groups[b]);
            let apart = |x: (f64, f64), y: (f64, f64)| x.1 < y.0 || y.1 < x.0;
            if apart(ga.w_range, gb.w_range) || apart(ga.h_range, gb.h_range) {
                disjoint.push((ga.group, gb.group));
            }
        }
    }
    DatasetSummary {
        num_subjects: ds.num_subjects(),
        num_observations: ds.len(),
        groups,
        y1: Moments::of(obs.iter().map(|o| o.y1)),
        y2: Moments::of(obs.iter().map(|o| o.y2)),
        disjoint_support: disjoint,
    }
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "subjects: {}  observations: {}",
            self.num_subjects, self.num_observations
        )?;
        writeln!(f, "y1: mean {:.4} sd {:.4}", self.y1.mean, self.y1.sd)?;
        writeln!(f, "y2: mean {:.4} sd {:.4}", self.y2.mean, self.y2.sd)?;
        writeln!(f, "group  subjects  observations  w_range  h_range")?;
        for g in &self.groups {
            writeln!(
                f,
                "{:>5}  {:>8}  {:>12}  [{:.4}, {:.4}]  [{:.4}, {:.4}]",
                g.group,
                g.subjects,
                g.observations,
                g.w_range.0,
                g.w_range.1,
                g.h_range.0,
                g.h_range.1
            )?;
        }
        for (a, b) in &self.disjoint_support {
            writeln!(f, "warning: groups {a} and {b} have non-overlapping covariate support")?;
        }
        Ok(())
    }
}

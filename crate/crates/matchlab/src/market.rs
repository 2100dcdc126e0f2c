//! Market primitives: students, programs, rankings, offer timing, beliefs,
//! and quality distributions, plus CSV import/export for all of them.
//!
//! A market holds students (with a score in [0, 1] and an ordered application
//! list), programs (with a capacity), and per-program rankings over their
//! applicants. Rankings list student ids best-first; a student absent from a
//! program's ranking is unacceptable to it and can never receive its offer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum MarketError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("invalid market: {0}")]
    Invalid(String),
}

/// One student: identifier, admission score in [0, 1], and the ordered list
/// of program ids she applied to (most preferred first).
#[derive(Clone, Debug, PartialEq)]
pub struct StudentProfile {
    pub id: u32,
    pub abitur: f64,
    pub applications: Vec<u32>,
}

/// One program: identifier and seat capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramProfile {
    pub id: u32,
    pub capacity: u32,
}

/// A complete market instance. `rankings` maps program id to student ids in
/// the program's preference order, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarketInstance {
    pub students: Vec<StudentProfile>,
    pub programs: Vec<ProgramProfile>,
    pub rankings: BTreeMap<u32, Vec<u32>>,
}

impl MarketInstance {
    pub fn student(&self, id: u32) -> Option<&StudentProfile> {
        self.students.iter().find(|s| s.id == id)
    }

    pub fn program(&self, id: u32) -> Option<&ProgramProfile> {
        self.programs.iter().find(|p| p.id == id)
    }

    pub fn capacity(&self, program: u32) -> u32 {
        self.program(program).map_or(0, |p| p.capacity)
    }

    /// Position of `student` in `program`'s ranking (0 = best), if ranked.
    pub fn rank_of(&self, program: u32, student: u32) -> Option<usize> {
        self.rankings
            .get(&program)?
            .iter()
            .position(|&s| s == student)
    }
}

/// A named validation failure: which entity broke which rule.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

fn violation(entity: impl Into<String>, rule: impl Into<String>) -> Violation {
    Violation {
        entity: entity.into(),
        rule: rule.into(),
    }
}

/// Checks referential integrity and value ranges; returns every violation
/// found (empty means the market is well-formed).
pub fn validate_market(m: &MarketInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut student_ids = BTreeSet::new();
    let mut program_ids = BTreeSet::new();

    for p in &m.programs {
        if !program_ids.insert(p.id) {
            out.push(violation(format!("program {}", p.id), "duplicate id"));
        }
    }
    for s in &m.students {
        if !student_ids.insert(s.id) {
            out.push(violation(format!("student {}", s.id), "duplicate id"));
        }
        if !(0.0..=1.0).contains(&s.abitur) {
            out.push(violation(
                format!("student {}", s.id),
                format!("abitur {} outside [0, 1]", s.abitur),
            ));
        }
        if s.applications.is_empty() {
            out.push(violation(format!("student {}", s.id), "empty application list"));
        }
        let mut seen = BTreeSet::new();
        for &k in &s.applications {
            if !seen.insert(k) {
                out.push(violation(
                    format!("student {}", s.id),
                    format!("duplicate application to program {k}"),
                ));
            }
            if !m.programs.iter().any(|p| p.id == k) {
                out.push(violation(
                    format!("student {}", s.id),
                    format!("application to unknown program {k}"),
                ));
            }
        }
    }
    for (&k, ranking) in &m.rankings {
        if !program_ids.contains(&k) {
            out.push(violation(format!("program {k}"), "ranking for unknown program"));
        }
        let mut seen = BTreeSet::new();
        for &s in ranking {
            if !seen.insert(s) {
                out.push(violation(
                    format!("program {k}"),
                    format!("student {s} ranked twice"),
                ));
            }
            match m.student(s) {
                None => out.push(violation(
                    format!("program {k}"),
                    format!("ranking lists unknown student {s}"),
                )),
                Some(profile) => {
                    if !profile.applications.contains(&k) {
                        out.push(violation(
                            format!("program {k}"),
                            format!("ranked student {s} did not apply"),
                        ));
                    }
                }
            }
        }
    }
    out
}

/// When each of a student's applied-to programs sent her an early offer.
///
/// Entry `j` refers to the j-th program in her application list; the value is
/// a period in `1..=J`, or `J + 1` meaning "no early offer". Entries below
/// `J + 1` are pairwise distinct: at most one offer reaches a student per
/// period.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OfferArrival {
    pub entries: Vec<u32>,
}

impl OfferArrival {
    /// Arrival vector with no offers at all.
    pub fn none(j: usize) -> Self {
        Self {
            entries: vec![j as u32 + 1; j],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Indices of programs whose offer has arrived by the end of period `t`.
    pub fn arrived_by(&self, t: u32) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &e)| e <= t)
            .map(|(j, _)| j)
            .collect()
    }

    /// Earliest arrival period, if any offer arrives.
    pub fn first_arrival(&self) -> Option<u32> {
        let j = self.entries.len() as u32;
        self.entries.iter().copied().filter(|&e| e <= j).min()
    }

    pub fn validate(&self) -> Result<(), String> {
        let j = self.entries.len() as u32;
        let mut seen = BTreeSet::new();
        for &e in &self.entries {
            if e == 0 || e > j + 1 {
                return Err(format!("arrival period {e} outside 1..={}", j + 1));
            }
            if e <= j && !seen.insert(e) {
                return Err(format!("two offers arrive in period {e}"));
            }
        }
        Ok(())
    }
}

/// Admission probabilities per program, each in (0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefVector {
    pub p: Vec<f64>,
}

impl BeliefVector {
    pub fn new(p: Vec<f64>) -> Self {
        Self { p }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (j, &q) in self.p.iter().enumerate() {
            if !(q > 0.0 && q <= 1.0) {
                return Err(format!("belief {q} for program {j} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Distribution of a program's match quality for one student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum QualityDistribution {
    /// Continuous uniform on `[center - half_width, center + half_width]`.
    Uniform { center: f64, half_width: f64 },
    /// Finite support given as `(value, probability)` pairs.
    FiniteDiscrete { points: Vec<(f64, f64)> },
}

impl QualityDistribution {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            QualityDistribution::Uniform { half_width, .. } => {
                if *half_width <= 0.0 {
                    return Err(format!("half width {half_width} must be positive"));
                }
            }
            QualityDistribution::FiniteDiscrete { points } => {
                if points.is_empty() {
                    return Err("empty support".into());
                }
                let mut total = 0.0;
                for &(_, prob) in points {
                    if prob <= 0.0 {
                        return Err(format!("probability {prob} must be positive"));
                    }
                    total += prob;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(format!("probabilities sum to {total}, expected 1"));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            QualityDistribution::Uniform { center, .. } => *center,
            QualityDistribution::FiniteDiscrete { points } => {
                points.iter().map(|&(x, p)| x * p).sum()
            }
        }
    }

    pub fn sample(&self, stream: &mut RngStream) -> f64 {
        match self {
            QualityDistribution::Uniform { center, half_width } => {
                stream.uniform_range(center - half_width, center + half_width)
            }
            QualityDistribution::FiniteDiscrete { points } => {
                let u = stream.uniform_open01();
                let mut acc = 0.0;
                for &(x, p) in points {
                    acc += p;
                    if u <= acc {
                        return x;
                    }
                }
                points[points.len() - 1].0
            }
        }
    }
}

// --- CSV import/export ------------------------------------------------------
//
// students.csv      id,abitur
// programs.csv      id,capacity
// applications.csv  student_id,program_id,application_order
// rankings.csv      program_id,rank,student_id

#[derive(Serialize, Deserialize)]
struct StudentRow {
    id: u32,
    abitur: f64,
}

#[derive(Serialize, Deserialize)]
struct ProgramRow {
    id: u32,
    capacity: u32,
}

#[derive(Serialize, Deserialize)]
struct ApplicationRow {
    student_id: u32,
    program_id: u32,
    application_order: u32,
}

#[derive(Serialize, Deserialize)]
struct RankingRow {
    program_id: u32,
    rank: u32,
    student_id: u32,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, MarketError> {
    csv::Writer::from_path(path).map_err(|e| MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, MarketError> {
    csv::Reader::from_path(path).map_err(|e| MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    })
}

fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<(), MarketError> {
    w.flush().map_err(|e| MarketError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Writes the four market CSVs into `dir`.
pub fn write_market(m: &MarketInstance, dir: &Path) -> Result<(), MarketError> {
    let path = dir.join("students.csv");
    let mut w = csv_writer(&path)?;
    for s in &m.students {
        w.serialize(StudentRow {
            id: s.id,
            abitur: s.abitur,
        })
        .map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    flush(w, &path)?;

    let path = dir.join("programs.csv");
    let mut w = csv_writer(&path)?;
    for p in &m.programs {
        w.serialize(ProgramRow {
            id: p.id,
            capacity: p.capacity,
        })
        .map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    flush(w, &path)?;

    let path = dir.join("applications.csv");
    let mut w = csv_writer(&path)?;
    for s in &m.students {
        for (order, &k) in s.applications.iter().enumerate() {
            w.serialize(ApplicationRow {
                student_id: s.id,
                program_id: k,
                application_order: order as u32 + 1,
            })
            .map_err(|e| MarketError::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    flush(w, &path)?;

    let path = dir.join("rankings.csv");
    let mut w = csv_writer(&path)?;
    for (&k, ranking) in &m.rankings {
        for (rank, &s) in ranking.iter().enumerate() {
            w.serialize(RankingRow {
                program_id: k,
                rank: rank as u32 + 1,
                student_id: s,
            })
            .map_err(|e| MarketError::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
        }
    }
    flush(w, &path)?;
    Ok(())
}

/// Reads the four market CSVs from `dir`. The result is not validated; call
/// [`validate_market`] on it.
pub fn read_market(dir: &Path) -> Result<MarketInstance, MarketError> {
    let path = dir.join("students.csv");
    let mut students = Vec::new();
    for row in csv_reader(&path)?.deserialize::<StudentRow>() {
        let row = row.map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        students.push(StudentProfile {
            id: row.id,
            abitur: row.abitur,
            applications: Vec::new(),
        });
    }

    let path = dir.join("programs.csv");
    let mut programs = Vec::new();
    for row in csv_reader(&path)?.deserialize::<ProgramRow>() {
        let row = row.map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        programs.push(ProgramProfile {
            id: row.id,
            capacity: row.capacity,
        });
    }

    let path = dir.join("applications.csv");
    let mut apps: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
    for row in csv_reader(&path)?.deserialize::<ApplicationRow>() {
        let row = row.map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        apps.entry(row.student_id)
            .or_default()
            .push((row.application_order, row.program_id));
    }
    for s in &mut students {
        if let Some(list) = apps.get_mut(&s.id) {
            list.sort_unstable();
            s.applications = list.iter().map(|&(_, k)| k).collect();
        }
    }

    let path = dir.join("rankings.csv");
    let mut rankings: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
    for row in csv_reader(&path)?.deserialize::<RankingRow>() {
        let row = row.map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        rankings
            .entry(row.program_id)
            .or_default()
            .push((row.rank, row.student_id));
    }
    let rankings = rankings
        .into_iter()
        .map(|(k, mut list)| {
            list.sort_unstable();
            (k, list.into_iter().map(|(_, s)| s).collect())
        })
        .collect();

    Ok(MarketInstance {
        students,
        programs,
        rankings,
    })
}

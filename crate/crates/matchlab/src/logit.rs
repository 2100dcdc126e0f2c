//! Conditional-logit and rank-ordered-logit estimation of program choice.
//!
//! Rows describe (student, program) pairs with feasibility, early-offer
//! flags, and covariates. Two event constructions are supported: a single
//! accepted-program choice per student over her feasible set, or the
//! exploded sequence of ranked choices truncated after the event in which
//! the student picks her highest-ranked early offer (lower-ranked programs
//! stay pooled in the final risk set and contribute no further events).
//! Coefficients cover program fixed effects (the smallest program id is the
//! reference), the two offer flags, distance and its square, and a home
//! region indicator. Fitting maximizes the exact likelihood with BFGS and
//! Armijo backtracking on the analytic gradient; standard errors come from
//! the inverse observed information, built by central differences of that
//! gradient.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::market::MarketError;
use crate::rng::{gumbel_draw, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum LogitError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("design matrix is not full rank ({0})")]
    RankDeficient(String),
    #[error("optimizer failed: {0}")]
    NoConvergence(String),
    #[error("covariance unavailable: {0}")]
    Covariance(String),
    #[error("distance utility must decline at the evaluation point (slope = {0})")]
    BadSlope(f64),
    #[error("no distance-equivalent root in [0, {0}]")]
    NoRoot(f64),
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// One (student, program) pair. `rank_position` is the 1-based position on
/// the student's submitted list, if listed.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceRow {
    pub student_id: u32,
    pub program_id: u32,
    pub feasible: bool,
    pub early_offer: bool,
    pub first_early_offer: bool,
    pub distance_km: f64,
    pub in_region: bool,
    pub chosen: bool,
    pub rank_position: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChoiceDataset {
    pub rows: Vec<ChoiceRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitMode {
    /// One event per student: the accepted program out of her feasible set.
    Acceptance,
    /// Exploded ranked choices, truncated after the highest-ranked early
    /// offer is picked.
    Ranked,
}

impl FitMode {
    pub fn label(&self) -> &'static str {
        match self {
            FitMode::Acceptance => "acceptance",
            FitMode::Ranked => "ranked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "acceptance" => Some(FitMode::Acceptance),
            "ranked" => Some(FitMode::Ranked),
            _ => None,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> MarketError {
    MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    }
}

const CHOICE_HEADER: [&str; 9] = [
    "student_id",
    "program_id",
    "feasible",
    "early_offer",
    "first_early_offer",
    "distance_km",
    "in_region",
    "chosen",
    "rank_position",
];

impl ChoiceDataset {
    pub fn write_csv(&self, path: &Path) -> Result<(), MarketError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(CHOICE_HEADER).map_err(|e| csv_err(path, e))?;
        let flag = |b: bool| if b { "1" } else { "0" }.to_string();
        for r in &self.rows {
            w.write_record([
                r.student_id.to_string(),
                r.program_id.to_string(),
                flag(r.feasible),
                flag(r.early_offer),
                flag(r.first_early_offer),
                r.distance_km.to_string(),
                flag(r.in_region),
                flag(r.chosen),
                r.rank_position.map_or(String::new(), |v| v.to_string()),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| MarketError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, LogitError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let parse_flag = |field: &str, line: usize| -> Result<bool, LogitError> {
            match field.trim() {
                "0" | "false" => Ok(false),
                "1" | "true" => Ok(true),
                other => Err(LogitError::Invalid(format!(
                    "line {line}: flag value {other:?}"
                ))),
            }
        };
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_err(path, e))?;
            let line = i + 2;
            if record.len() != CHOICE_HEADER.len() {
                return Err(LogitError::Invalid(format!(
                    "line {line}: expected {} fields, got {}",
                    CHOICE_HEADER.len(),
                    record.len()
                )));
            }
            let field = |j: usize| record.get(j).unwrap_or("").trim();
            let parse_num = |j: usize| -> Result<f64, LogitError> {
                field(j)
                    .parse()
                    .map_err(|_| LogitError::Invalid(format!("line {line}: bad number {:?}", field(j))))
            };
            let rank = match field(8) {
                "" => None,
                s => Some(s.parse().map_err(|_| {
                    LogitError::Invalid(format!("line {line}: bad rank {s:?}"))
                })?),
            };
            rows.push(ChoiceRow {
                student_id: parse_num(0)? as u32,
                program_id: parse_num(1)? as u32,
                feasible: parse_flag(field(2), line)?,
                early_offer: parse_flag(field(3), line)?,
                first_early_offer: parse_flag(field(4), line)?,
                distance_km: parse_num(5)?,
                in_region: parse_flag(field(6), line)?,
                chosen: parse_flag(field(7), line)?,
                rank_position: rank,
            });
        }
        Ok(Self { rows })
    }
}

/// Coefficient layout: one fixed effect per program except the reference
/// (smallest id), then early offer, first early offer, distance, squared
/// distance, and in-region.
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub program_ids: Vec<u32>,
    pub reference: u32,
    pub names: Vec<String>,
}

const N_COVARIATES: usize = 5;

impl Design {
    pub fn new(mut program_ids: Vec<u32>) -> Self {
        program_ids.sort_unstable();
        program_ids.dedup();
        let reference = program_ids[0];
        let mut names: Vec<String> = program_ids
            .iter()
            .skip(1)
            .map(|id| format!("program_{id}"))
            .collect();
        names.extend(
            ["early_offer", "first_early_offer", "distance_km", "distance_km_sq", "in_region"]
                .map(String::from),
        );
        Self {
            program_ids,
            reference,
            names,
        }
    }

    pub fn dim(&self) -> usize {
        self.program_ids.len() - 1 + N_COVARIATES
    }

    pub fn row(&self, r: &ChoiceRow) -> Vec<f64> {
        self.row_with_flags(r, r.early_offer, r.first_early_offer)
    }

    /// Design row with the pair's offer flags overridden, everything else at
    /// observed values.
    pub fn row_with_flags(&self, r: &ChoiceRow, early: bool, first: bool) -> Vec<f64> {
        let mut z = vec![0.0; self.dim()];
        if r.program_id != self.reference {
            let slot = self
                .program_ids
                .binary_search(&r.program_id)
                .expect("program id missing from design");
            z[slot - 1] = 1.0;
        }
        let c = self.program_ids.len() - 1;
        z[c] = early as u64 as f64;
        z[c + 1] = first as u64 as f64;
        z[c + 2] = r.distance_km;
        z[c + 3] = r.distance_km * r.distance_km;
        z[c + 4] = r.in_region as u64 as f64;
        z
    }
}

/// Softmax choice probabilities for one event, stable under large utilities.
pub fn choice_probabilities(utilities: &[f64]) -> Vec<f64> {
    let m = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utilities.iter().map(|u| (u - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Dataset compiled to likelihood events: per event, the design rows of the
/// alternatives at risk and the index of the chosen one.
pub struct Prepared {
    pub design: Design,
    pub events: Vec<(Vec<Vec<f64>>, usize)>,
    pub n_students_used: usize,
    pub n_students_dropped: usize,
}

fn group_students(dataset: &ChoiceDataset) -> Result<BTreeMap<u32, Vec<&ChoiceRow>>, LogitError> {
    let mut groups: BTreeMap<u32, Vec<&ChoiceRow>> = BTreeMap::new();
    let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
    for r in &dataset.rows {
        if !r.distance_km.is_finite() || r.distance_km < 0.0 {
            return Err(LogitError::Invalid(format!(
                "student {} program {}: distance {}",
                r.student_id, r.program_id, r.distance_km
            )));
        }
        if !seen.insert((r.student_id, r.program_id)) {
            return Err(LogitError::Invalid(format!(
                "student {} lists program {} twice",
                r.student_id, r.program_id
            )));
        }
        groups.entry(r.student_id).or_default().push(r);
    }
    for (s, rows) in &groups {
        let mut ranks: Vec<u32> = rows.iter().filter_map(|r| r.rank_position).collect();
        ranks.sort_unstable();
        for (i, rank) in ranks.iter().enumerate() {
            if *rank != i as u32 + 1 {
                return Err(LogitError::Invalid(format!(
                    "student {s}: list positions must run 1..=n, got {ranks:?}"
                )));
            }
        }
    }
    Ok(groups)
}

/// Compiles a dataset into likelihood events for the given mode, validating
/// choice structure and dropping students with fewer than two feasible rows.
pub fn prepare(dataset: &ChoiceDataset, mode: FitMode) -> Result<Prepared, LogitError> {
    if dataset.rows.is_empty() {
        return Err(LogitError::Invalid("empty dataset".to_string()));
    }
    let groups = group_students(dataset)?;
    let mut program_ids: Vec<u32> = Vec::new();
    let mut events: Vec<(Vec<Vec<f64>>, usize)> = Vec::new();
    let mut used = 0usize;
    let mut dropped = 0usize;

    // The design spans programs feasible for at least one retained student.
    let mut retained: Vec<(u32, Vec<&ChoiceRow>)> = Vec::new();
    for (s, rows) in groups {
        let feasible: Vec<&ChoiceRow> = rows.iter().copied().filter(|r| r.feasible).collect();
        if feasible.len() < 2 {
            dropped += 1;
            continue;
        }
        if mode == FitMode::Acceptance {
            let chosen_feasible = feasible.iter().filter(|r| r.chosen).count();
            if chosen_feasible != 1 {
                return Err(LogitError::Invalid(format!(
                    "student {s}: {chosen_feasible} feasible chosen rows, need exactly 1"
                )));
            }
            if rows.iter().any(|r| r.chosen && !r.feasible) {
                return Err(LogitError::Invalid(format!(
                    "student {s}: chosen program is not feasible"
                )));
            }
        }
        program_ids.extend(feasible.iter().map(|r| r.program_id));
        retained.push((s, feasible));
        used += 1;
    }
    if retained.is_empty() {
        return Err(LogitError::Invalid(
            "no student has at least two feasible programs".to_string(),
        ));
    }
    let design = Design::new(program_ids);

    for (_, feasible) in &retained {
        match mode {
            FitMode::Acceptance => {
                let z: Vec<Vec<f64>> = feasible.iter().map(|r| design.row(r)).collect();
                let chosen = feasible.iter().position(|r| r.chosen).unwrap();
                events.push((z, chosen));
            }
            FitMode::Ranked => {
                let mut ranked: Vec<&ChoiceRow> =
                    feasible.iter().copied().filter(|r| r.rank_position.is_some()).collect();
                ranked.sort_by_key(|r| r.rank_position.unwrap());
                let mut risk: Vec<&ChoiceRow> = feasible.clone();
                for choice in ranked {
                    if risk.len() < 2 {
                        break;
                    }
                    let z: Vec<Vec<f64>> = risk.iter().map(|r| design.row(r)).collect();
                    let pos = risk
                        .iter()
                        .position(|r| r.program_id == choice.program_id)
                        .expect("ranked feasible program left the risk set");
                    events.push((z, pos));
                    risk.remove(pos);
                    if choice.early_offer {
                        break;
                    }
                }
            }
        }
    }
    if events.is_empty() {
        return Err(LogitError::Invalid("no informative choice events".to_string()));
    }
    Ok(Prepared {
        design,
        events,
        n_students_used: used,
        n_students_dropped: dropped,
    })
}

fn check_identified(p: &Prepared) -> Result<(), LogitError> {
    let dim = p.design.dim();
    let mut gram = vec![vec![0.0; dim]; dim];
    for (z, _) in &p.events {
        let n = z.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in z {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        for row in z {
            let centered: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..dim {
                for j in 0..dim {
                    gram[i][j] += centered[i] * centered[j];
                }
            }
        }
    }
    let scale = (0..dim).map(|i| gram[i][i]).fold(0.0f64, f64::max).max(1.0);
    if let Err(col) = cholesky_in_place(&mut gram, 1e-10 * scale) {
        return Err(LogitError::RankDeficient(format!(
            "no variation in coefficient {}",
            p.design.names[col]
        )));
    }
    Ok(())
}

/// Negative log-likelihood and its gradient.
pub fn neg_loglik_grad(events: &[(Vec<Vec<f64>>, usize)], beta: &[f64]) -> (f64, Vec<f64>) {
    let dim = beta.len();
    let mut f = 0.0;
    let mut g = vec![0.0; dim];
    for (z, chosen) in events {
        let utilities: Vec<f64> = z
            .iter()
            .map(|row| row.iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect();
        let probs = choice_probabilities(&utilities);
        let m = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_denom = m + utilities.iter().map(|u| (u - m).exp()).sum::<f64>().ln();
        f -= utilities[*chosen] - log_denom;
        for (row, prob) in z.iter().zip(&probs) {
            for (gi, zi) in g.iter_mut().zip(row) {
                *gi += prob * zi;
            }
        }
        for (gi, zi) in g.iter_mut().zip(&z[*chosen]) {
            *gi -= zi;
        }
    }
    (f, g)
}

// ---------------------------------------------------------------------------
// Dense linear algebra, sized for a few dozen coefficients.

/// In-place lower Cholesky factorization; fails with the offending column if
/// a pivot drops below `tol`.
fn cholesky_in_place(a: &mut [Vec<f64>], tol: f64) -> Result<(), usize> {
    let n = a.len();
    for j in 0..n {
        for k in 0..j {
            let l = a[j][k];
            for i in j..n {
                a[i][j] -= a[i][k] * l;
            }
        }
        if a[j][j] <= tol {
            return Err(j);
        }
        let d = a[j][j].sqrt();
        for row in a.iter_mut().skip(j) {
            row[j] /= d;
        }
    }
    for j in 0..n {
        for k in (j + 1)..n {
            a[j][k] = 0.0;
        }
    }
    Ok(())
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
fn invert_spd(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l: Vec<Vec<f64>> = a.to_vec();
    cholesky_in_place(&mut l, 0.0).ok()?;
    // Solve L y = e_k, then L^T x = y, one unit vector at a time.
    let mut inv = vec![vec![0.0; n]; n];
    for k in 0..n {
        let mut y = vec![0.0; n];
        for i in 0..n {
            let rhs = if i == k { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|j| l[i][j] * y[j]).sum();
            y[i] = (rhs - s) / l[i][i];
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| l[j][i] * inv[j][k]).sum();
            inv[i][k] = (y[i] - s) / l[i][i];
        }
    }
    Some(inv)
}

fn mat_vec(h: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    h.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MAX_ITER: usize = 500;
const GRAD_TOL: f64 = 1e-8;
const ARMIJO_C1: f64 = 1e-4;

fn bfgs(p: &Prepared) -> Result<(Vec<f64>, usize), LogitError> {
    let dim = p.design.dim();
    // Optimize with columns rescaled to unit max-abs; squared distances would
    // otherwise leave the search badly conditioned. The convergence test
    // stays on the original-scale gradient.
    let mut scale = vec![1.0f64; dim];
    for (z, _) in &p.events {
        for row in z {
            for (s, v) in scale.iter_mut().zip(row) {
                *s = s.max(v.abs());
            }
        }
    }
    let events: Vec<(Vec<Vec<f64>>, usize)> = p
        .events
        .iter()
        .map(|(z, c)| {
            let scaled = z
                .iter()
                .map(|row| row.iter().zip(&scale).map(|(v, s)| v / s).collect())
                .collect();
            (scaled, *c)
        })
        .collect();
    let grad_max = |g: &[f64]| {
        g.iter()
            .zip(&scale)
            .fold(0.0f64, |m, (v, s)| m.max((v * s).abs()))
    };
    let mut x = vec![0.0; dim];
    let (mut f, mut g) = neg_loglik_grad(&events, &x);
    let identity = |h: &mut Vec<Vec<f64>>| {
        for (i, row) in h.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i == j) as u64 as f64;
            }
        }
    };
    let mut h = vec![vec![0.0; dim]; dim];
    identity(&mut h);

    let unscale =
        |x: &[f64]| -> Vec<f64> { x.iter().zip(&scale).map(|(b, s)| b / s).collect() };
    for iter in 0..MAX_ITER {
        let g_max = grad_max(&g);
        let g_scaled_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Done, or close enough that the objective is flat to machine
        // precision; the caller polishes the last digits with Newton steps.
        if g_max < GRAD_TOL || g_scaled_max < 1e-9 {
            return Ok((unscale(&x), iter));
        }
        let mut d: Vec<f64> = mat_vec(&h, &g).iter().map(|v| -v).collect();
        if dot(&g, &d) >= 0.0 {
            identity(&mut h);
            d = g.iter().map(|v| -v).collect();
        }
        let slope = dot(&g, &d);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let (fn_, gn) = neg_loglik_grad(&events, &xn);
            if fn_.is_finite() && fn_ <= f + ARMIJO_C1 * alpha * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if g_scaled_max < 1e-4 {
                return Ok((unscale(&x), iter));
            }
            return Err(LogitError::NoConvergence(format!(
                "line search stalled at iteration {iter} (|grad| = {g_max:.3e})"
            )));
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&y, &y).sqrt();
        if sy > 1e-12 * s_norm * y_norm {
            let hy = mat_vec(&h, &y);
            let yhy = dot(&y, &hy);
            let c1 = (sy + yhy) / (sy * sy);
            for i in 0..dim {
                for j in 0..dim {
                    h[i][j] += c1 * s[i] * s[j] - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                }
            }
        }
        x = xn;
        f = fn_;
        g = gn;
    }
    let g_scaled_max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if g_scaled_max < 1e-4 {
        return Ok((unscale(&x), MAX_ITER));
    }
    Err(LogitError::NoConvergence(format!(
        "gradient max-norm still {:.3e} after {MAX_ITER} iterations",
        grad_max(&g)
    )))
}

/// Newton refinement on the exact gradient, driving its max-norm under
/// `GRAD_TOL` once BFGS has entered the quadratic basin.
fn newton_polish(
    events: &[(Vec<Vec<f64>>, usize)],
    mut x: Vec<f64>,
) -> Result<(Vec<f64>, usize), LogitError> {
    let max_abs = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut steps = 0;
    for _ in 0..8 {
        let (_, g) = neg_loglik_grad(events, &x);
        let g_max = max_abs(&g);
        if g_max < GRAD_TOL {
            return Ok((x, steps));
        }
        let info = observed_information(events, &x);
        let inv = invert_spd(&info).ok_or_else(|| {
            LogitError::NoConvergence("observed information is not positive definite".to_string())
        })?;
        let step = mat_vec(&inv, &g);
        let mut damp = 1.0;
        let mut moved = false;
        for _ in 0..10 {
            let xn: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a - damp * s).collect();
            let (_, gn) = neg_loglik_grad(events, &xn);
            if max_abs(&gn) < g_max {
                x = xn;
                moved = true;
                break;
            }
            damp *= 0.5;
        }
        steps += 1;
        if !moved {
            break;
        }
    }
    let (_, g) = neg_loglik_grad(events, &x);
    let g_max = max_abs(&g);
    if g_max < GRAD_TOL {
        Ok((x, steps))
    } else {
        Err(LogitError::NoConvergence(format!(
            "gradient max-norm stuck at {g_max:.3e}"
        )))
    }
}

/// Observed information (Hessian of the negative log-likelihood) by central
/// differences of the analytic gradient.
fn observed_information(events: &[(Vec<Vec<f64>>, usize)], beta: &[f64]) -> Vec<Vec<f64>> {
    let dim = beta.len();
    let mut hess = vec![vec![0.0; dim]; dim];
    for j in 0..dim {
        let h = 1e-5 * (1.0 + beta[j].abs());
        let mut plus = beta.to_vec();
        plus[j] += h;
        let mut minus = beta.to_vec();
        minus[j] -= h;
        let (_, gp) = neg_loglik_grad(events, &plus);
        let (_, gm) = neg_loglik_grad(events, &minus);
        for i in 0..dim {
            hess[i][j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (hess[i][j] + hess[j][i]);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}

/// Maximum-likelihood estimates with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub design: Design,
    pub mode: FitMode,
    pub estimates: Vec<f64>,
    pub std_errs: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub n_events: usize,
    pub n_students_used: usize,
    pub n_students_dropped: usize,
}

impl FitReport {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.design.names.iter().position(|n| n == name)?;
        Some((self.estimates[i], self.std_errs[i]))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MarketError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["name", "estimate", "std_err"])
            .map_err(|e| csv_err(path, e))?;
        for i in 0..self.design.names.len() {
            w.write_record([
                self.design.names[i].clone(),
                self.estimates[i].to_string(),
                self.std_errs[i].to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| MarketError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }
}

pub fn fit_mle(dataset: &ChoiceDataset, mode: FitMode) -> Result<FitReport, LogitError> {
    let prepared = prepare(dataset, mode)?;
    check_identified(&prepared)?;
    let (coarse, bfgs_iters) = bfgs(&prepared)?;
    let (estimates, polish_steps) = newton_polish(&prepared.events, coarse)?;
    let (neg_ll, _) = neg_loglik_grad(&prepared.events, &estimates);
    let info = observed_information(&prepared.events, &estimates);
    let cov = invert_spd(&info).ok_or_else(|| {
        LogitError::Covariance("observed information is not positive definite".to_string())
    })?;
    let std_errs: Vec<f64> = (0..estimates.len()).map(|i| cov[i][i].sqrt()).collect();
    Ok(FitReport {
        design: prepared.design,
        mode,
        estimates,
        std_errs,
        loglik: -neg_ll,
        iterations: bfgs_iters + polish_steps,
        n_events: prepared.events.len(),
        n_students_used: prepared.n_students_used,
        n_students_dropped: prepared.n_students_dropped,
    })
}

/// Average effect of early-offer flags on a program's predicted acceptance
/// probability, over all (student, feasible program) pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyOfferMarginalEffects {
    /// Mean predicted probability with both flags off everywhere they apply.
    pub baseline: f64,
    /// Mean probability shift from turning on `early_offer` alone.
    pub early_offer: f64,
    /// Mean probability shift from turning on both flags.
    pub early_and_first: f64,
}

/// For each (student, feasible program) pair, toggles only that pair's offer
/// flags — everything else stays at observed values — and averages the
/// pair's predicted choice probability over the student's feasible set.
pub fn marginal_effects_early_offer(
    dataset: &ChoiceDataset,
    report: &FitReport,
) -> Result<EarlyOfferMarginalEffects, LogitError> {
    let groups = group_students(dataset)?;
    let design = &report.design;
    let beta = &report.estimates;
    let mut sums = [0.0f64; 3];
    let mut count = 0u64;
    for (_, rows) in groups {
        let feasible: Vec<&ChoiceRow> = rows.iter().copied().filter(|r| r.feasible).collect();
        if feasible.len() < 2 {
            continue;
        }
        let observed: Vec<f64> = feasible.iter().map(|r| dot(&design.row(r), beta)).collect();
        for (k, target) in feasible.iter().enumerate() {
            for (variant, (early, first)) in
                [(false, false), (true, false), (true, true)].into_iter().enumerate()
            {
                let mut utilities = observed.clone();
                utilities[k] = dot(&design.row_with_flags(target, early, first), beta);
                sums[variant] += choice_probabilities(&utilities)[k];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(LogitError::Invalid(
            "no student has at least two feasible programs".to_string(),
        ));
    }
    let mean = |s: f64| s / count as f64;
    Ok(EarlyOfferMarginalEffects {
        baseline: mean(sums[0]),
        early_offer: mean(sums[1]) - mean(sums[0]),
        early_and_first: mean(sums[2]) - mean(sums[0]),
    })
}

/// Kilometers of distance reduction worth the same utility as `delta_u`, for
/// a program currently `d` km away: solves
/// `gamma_d2 x^2 - (gamma_d + 2 gamma_d2 d) x - delta_u = 0` for the root
/// nearest zero within `[0, d]`. Requires utility to be declining in
/// distance at `d`.
pub fn distance_equivalent(
    gamma_d: f64,
    gamma_d2: f64,
    delta_u: f64,
    d: f64,
) -> Result<f64, LogitError> {
    let slope = gamma_d + 2.0 * gamma_d2 * d;
    if !(slope < 0.0) {
        return Err(LogitError::BadSlope(slope));
    }
    let in_range = |x: f64| x.is_finite() && x >= 0.0 && x <= d;
    if gamma_d2.abs() < 1e-14 {
        let x = -delta_u / slope;
        return if in_range(x) { Ok(x) } else { Err(LogitError::NoRoot(d)) };
    }
    let (a, b, c) = (gamma_d2, -slope, -delta_u);
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Err(LogitError::NoRoot(d));
    }
    let sd = disc.sqrt();
    let roots = [(-b + sd) / (2.0 * a), (-b - sd) / (2.0 * a)];
    roots
        .into_iter()
        .filter(|x| in_range(*x))
        .min_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap())
        .ok_or(LogitError::NoRoot(d))
}

/// Synthetic choice data generated from known coefficients, for estimator
/// checks. Returns the dataset and the generating coefficient vector, laid
/// out per `Design::new(1..=n_programs)`.
pub fn synthetic_dataset(
    n_students: u32,
    n_programs: u32,
    mode: FitMode,
    stream: &mut RngStream,
) -> (ChoiceDataset, Design, Vec<f64>) {
    assert!(n_programs >= 4, "need at least 4 programs");
    let ids: Vec<u32> = (1..=n_programs).collect();
    let design = Design::new(ids.clone());
    let mut beta = vec![0.0; design.dim()];
    for (i, id) in ids.iter().skip(1).enumerate() {
        beta[i] = 0.5 * (*id as f64 * 0.7).sin();
    }
    let c = ids.len() - 1;
    beta[c] = 0.8;
    beta[c + 1] = 0.5;
    beta[c + 2] = -0.08;
    beta[c + 3] = 0.0015;
    beta[c + 4] = 0.4;

    let mut rows = Vec::new();
    for s in 1..=n_students {
        let n_feas = (3 + stream.below(4)).min(n_programs as usize);
        let mut pool = ids.clone();
        stream.shuffle(&mut pool);
        let feasible = &pool[..n_feas];
        let mut student_rows: Vec<ChoiceRow> = feasible
            .iter()
            .map(|&k| ChoiceRow {
                student_id: s,
                program_id: k,
                feasible: true,
                early_offer: stream.uniform_open01() < 0.35,
                first_early_offer: false,
                distance_km: stream.uniform_range(0.0, 20.0),
                in_region: stream.uniform_open01() < 0.4,
                chosen: false,
                rank_position: None,
            })
            .collect();
        let offered: Vec<usize> = student_rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.early_offer)
            .map(|(i, _)| i)
            .collect();
        if !offered.is_empty() {
            let first = offered[stream.below(offered.len())];
            student_rows[first].first_early_offer = true;
        }
        let utilities: Vec<f64> = student_rows
            .iter()
            .map(|r| dot(&design.row(r), &beta) + gumbel_draw(stream))
            .collect();
        let mut order: Vec<usize> = (0..student_rows.len()).collect();
        order.sort_by(|&a, &b| utilities[b].partial_cmp(&utilities[a]).unwrap());
        student_rows[order[0]].chosen = true;
        if mode == FitMode::Ranked {
            for (rank, &i) in order.iter().enumerate() {
                student_rows[i].rank_position = Some(rank as u32 + 1);
            }
        }
        rows.extend(student_rows);
        // An infeasible row now and then; estimation must ignore it.
        if n_feas < pool.len() && stream.uniform_open01() < 0.5 {
            rows.push(ChoiceRow {
                student_id: s,
                program_id: pool[n_feas],
                feasible: false,
                early_offer: false,
                first_early_offer: false,
                distance_km: stream.uniform_range(0.0, 20.0),
                in_region: false,
                chosen: false,
                rank_position: None,
            });
        }
    }
    (ChoiceDataset { rows }, design, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn stream() -> RngStream {
        RngStream::root(421).fork(0)
    }

    #[test]
    fn csv_round_trip() {
        let (data, _, _) = synthetic_dataset(25, 6, FitMode::Ranked, &mut stream());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("choices.csv");
        data.write_csv(&path).unwrap();
        let back = ChoiceDataset::read_csv(&path).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn validation_rejects_malformed_students() {
        let row = ChoiceRow {
            student_id: 1,
            program_id: 7,
            feasible: true,
            early_offer: false,
            first_early_offer: false,
            distance_km: 1.0,
            in_region: false,
            chosen: true,
            rank_position: Some(1),
        };
        // Duplicate pair.
        let data = ChoiceDataset {
            rows: vec![row.clone(), row.clone()],
        };
        assert!(matches!(
            fit_mle(&data, FitMode::Acceptance),
            Err(LogitError::Invalid(_))
        ));
        // Ranks must be a contiguous prefix.
        let mut r2 = row.clone();
        r2.program_id = 8;
        r2.chosen = false;
        r2.rank_position = Some(3);
        let data = ChoiceDataset {
            rows: vec![row.clone(), r2],
        };
        assert!(matches!(
            fit_mle(&data, FitMode::Ranked),
            Err(LogitError::Invalid(_))
        ));
        // Two chosen feasible programs.
        let mut r3 = row.clone();
        r3.program_id = 8;
        r3.rank_position = None;
        let data = ChoiceDataset {
            rows: vec![row, r3],
        };
        assert!(matches!(
            fit_mle(&data, FitMode::Acceptance),
            Err(LogitError::Invalid(_))
        ));
    }

    #[test]
    fn ranked_events_stop_at_the_first_early_offer() {
        let mk = |program_id: u32, early: bool, rank: Option<u32>| ChoiceRow {
            student_id: 1,
            program_id,
            feasible: true,
            early_offer: early,
            first_early_offer: early,
            distance_km: 1.0,
            in_region: false,
            chosen: rank == Some(1),
            rank_position: rank,
        };
        let data = ChoiceDataset {
            rows: vec![
                mk(10, false, Some(1)),
                mk(20, true, Some(2)),
                mk(30, false, Some(3)),
                mk(40, false, Some(4)),
            ],
        };
        let prepared = prepare(&data, FitMode::Ranked).unwrap();
        assert_eq!(prepared.events.len(), 2);
        assert_eq!(prepared.events[0].0.len(), 4);
        assert_eq!(prepared.events[1].0.len(), 3);

        // Without any early offer the whole list explodes.
        let data = ChoiceDataset {
            rows: vec![
                mk(10, false, Some(1)),
                mk(20, false, Some(2)),
                mk(30, false, Some(3)),
                mk(40, false, Some(4)),
            ],
        };
        let prepared = prepare(&data, FitMode::Ranked).unwrap();
        assert_eq!(prepared.events.len(), 3);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for mode in [FitMode::Acceptance, FitMode::Ranked] {
            let (data, design, _) = synthetic_dataset(40, 6, mode, &mut stream());
            let prepared = prepare(&data, mode).unwrap();
            let mut st = RngStream::root(99).fork(1);
            let beta: Vec<f64> = (0..design.dim())
                .map(|_| st.uniform_range(-0.5, 0.5))
                .collect();
            let (_, grad) = neg_loglik_grad(&prepared.events, &beta);
            for j in 0..beta.len() {
                let h = 1e-6;
                let mut plus = beta.clone();
                plus[j] += h;
                let mut minus = beta.clone();
                minus[j] -= h;
                let (fp, _) = neg_loglik_grad(&prepared.events, &plus);
                let (fm, _) = neg_loglik_grad(&prepared.events, &minus);
                let fd = (fp - fm) / (2.0 * h);
                let scale = grad[j].abs().max(1.0);
                assert!(
                    (grad[j] - fd).abs() / scale < 1e-6,
                    "{mode:?} coordinate {j}: analytic {} vs fd {fd}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn fit_recovers_generating_coefficients() {
        let (data, design, truth) = synthetic_dataset(2500, 8, FitMode::Acceptance, &mut stream());
        let report = fit_mle(&data, FitMode::Acceptance).unwrap();
        assert_eq!(report.design, design);
        for i in 0..design.dim() {
            let err = (report.estimates[i] - truth[i]).abs();
            assert!(
                err <= 3.0 * report.std_errs[i],
                "{}: estimate {} vs truth {} (se {})",
                design.names[i],
                report.estimates[i],
                truth[i],
                report.std_errs[i]
            );
        }
        assert!(report.std_errs.iter().all(|s| s.is_finite() && *s > 0.0));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let (mut data, _, _) = synthetic_dataset(60, 6, FitMode::Acceptance, &mut stream());
        for r in &mut data.rows {
            r.in_region = false;
        }
        match fit_mle(&data, FitMode::Acceptance) {
            Err(LogitError::RankDeficient(msg)) => assert!(msg.contains("in_region")),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn marginal_effects_match_a_direct_recomputation() {
        let (data, _, _) = synthetic_dataset(120, 6, FitMode::Acceptance, &mut stream());
        let report = fit_mle(&data, FitMode::Acceptance).unwrap();
        let effects = marginal_effects_early_offer(&data, &report).unwrap();
        assert!(effects.early_offer > 0.0);
        assert!(effects.early_and_first > effects.early_offer);

        // Direct recomputation, one flag configuration at a time.
        let mut by_student: BTreeMap<u32, Vec<&ChoiceRow>> = BTreeMap::new();
        for r in &data.rows {
            if r.feasible {
                by_student.entry(r.student_id).or_default().push(r);
            }
        }
        let mut means = [0.0f64; 3];
        let mut count = 0u64;
        for rows in by_student.values() {
            if rows.len() < 2 {
                continue;
            }
            for k in 0..rows.len() {
                for (v, flags) in [(false, false), (true, false), (true, true)].iter().enumerate() {
                    let utilities: Vec<f64> = rows
                        .iter()
                        .enumerate()
                        .map(|(j, r)| {
                            let z = if j == k {
                                report.design.row_with_flags(r, flags.0, flags.1)
                            } else {
                                report.design.row(r)
                            };
                            dot(&z, &report.estimates)
                        })
                        .collect();
                    means[v] += choice_probabilities(&utilities)[k];
                }
                count += 1;
            }
        }
        let n = count as f64;
        assert_abs_diff_eq!(effects.baseline, means[0] / n, epsilon = 1e-12);
        assert_abs_diff_eq!(effects.early_offer, (means[1] - means[0]) / n, epsilon = 1e-12);
        assert_abs_diff_eq!(effects.early_and_first, (means[2] - means[0]) / n, epsilon = 1e-12);
    }

    #[test]
    fn distance_equivalents() {
        // Linear utility: 0.5 units at -0.1 per km is 5 km.
        assert_abs_diff_eq!(distance_equivalent(-0.1, 0.0, 0.5, 30.0).unwrap(), 5.0, epsilon = 1e-12);
        // Quadratic case: verify the root satisfies the equation.
        let (gd, gd2, du, d) = (-0.08, 0.0015, 0.3, 15.0);
        let x = distance_equivalent(gd, gd2, du, d).unwrap();
        assert!(x > 0.0 && x <= d);
        assert_abs_diff_eq!(gd2 * x * x - (gd + 2.0 * gd2 * d) * x - du, 0.0, epsilon = 1e-12);
        // Utility increasing in distance at d: rejected.
        assert!(matches!(
            distance_equivalent(0.01, 0.0, 0.5, 10.0),
            Err(LogitError::BadSlope(_))
        ));
        // Gain too large to express within d kilometers.
        assert!(matches!(
            distance_equivalent(-0.1, 0.0, 50.0, 10.0),
            Err(LogitError::NoRoot(_))
        ));
    }

    #[test]
    fn ranked_fit_runs_and_uses_more_events_than_students() {
        let (data, _, truth) = synthetic_dataset(800, 6, FitMode::Ranked, &mut stream());
        let report = fit_mle(&data, FitMode::Ranked).unwrap();
        assert!(report.n_events > report.n_students_used);
        let c = report.design.program_ids.len() - 1;
        for i in [c, c + 2] {
            let err = (report.estimates[i] - truth[i]).abs();
            assert!(
                err <= 4.0 * report.std_errs[i],
                "{}: {} vs {}",
                report.design.names[i],
                report.estimates[i],
                truth[i]
            );
        }
    }
}

//! Monte Carlo comparison of the three mechanisms on synthetic markets.
//!
//! A generated market fixes students, applications, capacities, program
//! rankings (by admission score), early-offer sets, and each pair's
//! full-information valuation with its standard error. Every sample then
//! draws utility shocks, a no-information valuation, an early-offer arrival
//! order, and a baseline learning order; each mechanism turns those into a
//! learning sequence, a learned-half set, perceived utilities, a complete
//! truthful list, and a program-proposing match. Mechanisms are compared by
//! the share of students who rank their ex-post feasible programs in true
//! preference order, and by per-student expected utility evaluated at full
//! information.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::market::{
    read_market, validate_market, write_market, MarketError, MarketInstance, ProgramProfile,
    StudentProfile,
};
use crate::matching::{compute_expost_feasible, gs_program_proposing, MatchError, Matching};
use crate::mechanism::MechanismKind;
use crate::rng::{gumbel_draw, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("invalid market input: {0}")]
    Input(String),
    #[error("invalid learning-sequence input: {0}")]
    Sequence(String),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// The never-feasible outside option present in every application set.
pub const OUTSIDE_OPTION: u32 = 0;

/// Samples processed per parallel work unit; aggregation folds the units in
/// index order, so results are independent of thread count.
const SAMPLE_SHARD: u32 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_students: u32,
    pub n_programs: u32,
    pub n_samples: u32,
    pub seed: u64,
    /// Real programs applied to per student, uniform on [min, max]; the
    /// outside option is added on top.
    pub apps_min: u32,
    pub apps_max: u32,
    pub capacity_min: u32,
    pub capacity_max: u32,
    /// Full-information valuations are N(0, v_scale^2).
    pub v_scale: f64,
    /// Standard error attached to every valuation.
    pub se_scale: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Config(msg));
        if self.n_students < 1 || self.n_programs < 1 || self.n_samples < 1 {
            return fail("n_students, n_programs, n_samples must be at least 1".to_string());
        }
        if self.apps_min < 1 || self.apps_min > self.apps_max {
            return fail(format!(
                "application bounds [{}, {}] must satisfy 1 <= min <= max",
                self.apps_min, self.apps_max
            ));
        }
        if self.apps_max > self.n_programs {
            return fail(format!(
                "apps_max {} exceeds the {} available programs",
                self.apps_max, self.n_programs
            ));
        }
        if self.capacity_min > self.capacity_max {
            return fail(format!(
                "capacity bounds [{}, {}] are inverted",
                self.capacity_min, self.capacity_max
            ));
        }
        for (name, v) in [("v_scale", self.v_scale), ("se_scale", self.se_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-(student, program) utility components: the fixed valuation and its
/// standard error, plus the per-sample no-information valuation and the two
/// independent Gumbel shocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtilityPair {
    pub v_full: f64,
    pub se_full: f64,
    pub v_noinfo: f64,
    pub eps_full: f64,
    pub eps_noinfo: f64,
}

impl UtilityPair {
    pub fn full_info(&self) -> f64 {
        self.v_full + self.eps_full
    }

    pub fn no_info(&self) -> f64 {
        self.v_noinfo + self.eps_noinfo
    }
}

/// Utility as perceived when the list is submitted.
pub fn perceived_utility(pair: &UtilityPair, learned: bool) -> f64 {
    if learned {
        pair.full_info()
    } else {
        pair.no_info()
    }
}

/// Admission score: the mean of the student's percentile rank and a
/// program-specific uniform component.
pub fn program_score(abitur: f64, nu: f64) -> f64 {
    (abitur + nu) / 2.0
}

/// A generated market plus the sample-invariant utility components.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMarket {
    pub market: MarketInstance,
    /// Fixed valuation per (student, program), outside option included.
    pub v_full: BTreeMap<(u32, u32), f64>,
    pub se_full: BTreeMap<(u32, u32), f64>,
    /// Programs whose early offer each student holds, ascending by id.
    pub early_offers: BTreeMap<u32, Vec<u32>>,
    /// Programs that can ever admit the student: her real applications.
    pub extended_feasible: BTreeMap<u32, Vec<u32>>,
}

/// Draws a market: abitur ranks, application sets (plus the capacity-zero
/// outside option), capacities, score-based rankings, early-offer sets, and
/// valuations with a constant standard error.
pub fn generate_market(cfg: &SimConfig, stream: &RngStream) -> Result<SimMarket, SimError> {
    cfg.validate()?;
    let mut st_students = stream.fork(1);
    let mut st_caps = stream.fork(2);
    let mut st_scores = stream.fork(3);
    let mut st_values = stream.fork(4);
    let program_ids: Vec<u32> = (1..=cfg.n_programs).collect();

    let mut students = Vec::with_capacity(cfg.n_students as usize);
    for id in 1..=cfg.n_students {
        let abitur = st_students.uniform_open01();
        let span = (cfg.apps_max - cfg.apps_min + 1) as usize;
        let n_apps = cfg.apps_min as usize + st_students.below(span);
        let mut pool = program_ids.clone();
        st_students.shuffle(&mut pool);
        let mut applications = pool[..n_apps].to_vec();
        applications.push(OUTSIDE_OPTION);
        students.push(StudentProfile {
            id,
            abitur,
            applications,
        });
    }

    let mut programs = vec![ProgramProfile {
        id: OUTSIDE_OPTION,
        capacity: 0,
    }];
    for &k in &program_ids {
        let span = (cfg.capacity_max - cfg.capacity_min + 1) as usize;
        programs.push(ProgramProfile {
            id: k,
            capacity: cfg.capacity_min + st_caps.below(span) as u32,
        });
    }

    let mut applicants: BTreeMap<u32, Vec<u32>> =
        program_ids.iter().map(|&k| (k, Vec::new())).collect();
    for s in &students {
        for &k in &s.applications {
            if k != OUTSIDE_OPTION {
                applicants.get_mut(&k).unwrap().push(s.id);
            }
        }
    }
    let mut rankings: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    rankings.insert(OUTSIDE_OPTION, Vec::new());
    for (&k, ids) in &applicants {
        let mut scored: Vec<(f64, u32)> = ids
            .iter()
            .map(|&i| {
                let abitur = students[(i - 1) as usize].abitur;
                (program_score(abitur, st_scores.uniform_open01()), i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        rankings.insert(k, scored.into_iter().map(|(_, i)| i).collect());
    }

    let mut v_full = BTreeMap::new();
    let mut se_full = BTreeMap::new();
    for s in &students {
        for &k in &s.applications {
            v_full.insert((s.id, k), st_values.normal() * cfg.v_scale);
            se_full.insert((s.id, k), cfg.se_scale);
        }
    }

    let mut early_offers: BTreeMap<u32, Vec<u32>> =
        students.iter().map(|s| (s.id, Vec::new())).collect();
    for &k in &program_ids {
        let capacity = programs[k as usize].capacity as usize;
        for &i in rankings[&k].iter().take(capacity) {
            early_offers.get_mut(&i).unwrap().push(k);
        }
    }

    let extended_feasible = students
        .iter()
        .map(|s| {
            let mut real: Vec<u32> = s
                .applications
                .iter()
                .copied()
                .filter(|&k| k != OUTSIDE_OPTION)
                .collect();
            real.sort_unstable();
            (s.id, real)
        })
        .collect();

    let market = MarketInstance {
        students,
        programs,
        rankings,
    };
    debug_assert!(validate_market(&market).is_empty());
    Ok(SimMarket {
        market,
        v_full,
        se_full,
        early_offers,
        extended_feasible,
    })
}

// ---------------------------------------------------------------------------
// Market persistence.

/// Writes the four market CSVs plus `utilities.csv` holding each
/// (student, program) pair's fixed valuation and standard error.
pub fn write_sim_market(sim: &SimMarket, dir: &Path) -> Result<(), MarketError> {
    write_market(&sim.market, dir)?;
    let path = dir.join("utilities.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["student_id", "program_id", "v_full_info", "se_v_full_info"])
        .map_err(|e| csv_err(&path, e))?;
    for s in &sim.market.students {
        for &k in &s.applications {
            w.write_record([
                s.id.to_string(),
                k.to_string(),
                sim.v_full[&(s.id, k)].to_string(),
                sim.se_full[&(s.id, k)].to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| flush_err(&path, e))
}

#[derive(Deserialize)]
struct UtilityRow {
    student_id: u32,
    program_id: u32,
    v_full_info: f64,
    se_v_full_info: f64,
}

/// Reads a simulation market back from `dir`: the four market CSVs plus
/// `utilities.csv`. Early-offer sets (the top of each program's ranking up to
/// capacity) and the admissible-program sets are rederived, so a written
/// market loads to the exact in-memory value it was saved from.
pub fn read_sim_market(dir: &Path) -> Result<SimMarket, SimError> {
    let mut market = read_market(dir)?;
    for p in &market.programs {
        market.rankings.entry(p.id).or_default();
    }
    let violations = validate_market(&market);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(SimError::Input(format!(
            "{}: {}",
            dir.display(),
            list.join("; ")
        )));
    }
    if market.program(OUTSIDE_OPTION).map(|p| p.capacity) != Some(0) {
        return Err(SimError::Input(format!(
            "{}: program {OUTSIDE_OPTION} must exist with capacity 0 (the outside option)",
            dir.display()
        )));
    }
    for s in &market.students {
        if !s.applications.contains(&OUTSIDE_OPTION) {
            return Err(SimError::Input(format!(
                "{}: student {} does not list the outside option",
                dir.display(),
                s.id
            )));
        }
        if s.applications.iter().all(|&k| k == OUTSIDE_OPTION) {
            return Err(SimError::Input(format!(
                "{}: student {} applies only to the outside option",
                dir.display(),
                s.id
            )));
        }
    }

    let path = dir.join("utilities.csv");
    let mut v_full = BTreeMap::new();
    let mut se_full = BTreeMap::new();
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for row in reader.deserialize::<UtilityRow>() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        let key = (row.student_id, row.program_id);
        if v_full.insert(key, row.v_full_info).is_some() {
            return Err(SimError::Input(format!(
                "{}: duplicate utility row for student {} program {}",
                path.display(),
                key.0,
                key.1
            )));
        }
        se_full.insert(key, row.se_v_full_info);
    }
    for s in &market.students {
        for &k in &s.applications {
            if !v_full.contains_key(&(s.id, k)) {
                return Err(SimError::Input(format!(
                    "{}: missing utility row for student {} program {k}",
                    path.display(),
                    s.id
                )));
            }
        }
    }
    let n_applications: usize = market.students.iter().map(|s| s.applications.len()).sum();
    if v_full.len() != n_applications {
        return Err(SimError::Input(format!(
            "{}: {} utility rows do not match {} applications",
            path.display(),
            v_full.len(),
            n_applications
        )));
    }

    let mut early_offers: BTreeMap<u32, Vec<u32>> =
        market.students.iter().map(|s| (s.id, Vec::new())).collect();
    let mut program_ids: Vec<u32> = market
        .programs
        .iter()
        .map(|p| p.id)
        .filter(|&k| k != OUTSIDE_OPTION)
        .collect();
    program_ids.sort_unstable();
    for &k in &program_ids {
        let capacity = market.program(k).unwrap().capacity as usize;
        for &i in market.rankings[&k].iter().take(capacity) {
            early_offers.get_mut(&i).unwrap().push(k);
        }
    }
    let extended_feasible = market
        .students
        .iter()
        .map(|s| {
            let mut real: Vec<u32> = s
                .applications
                .iter()
                .copied()
                .filter(|&k| k != OUTSIDE_OPTION)
                .collect();
            real.sort_unstable();
            (s.id, real)
        })
        .collect();
    Ok(SimMarket {
        market,
        v_full,
        se_full,
        early_offers,
        extended_feasible,
    })
}

fn check_sequence_inputs(da_order: &[u32], arrival: &[u32]) -> Result<(), SimError> {
    let all: BTreeSet<u32> = da_order.iter().copied().collect();
    if all.len() != da_order.len() || da_order.is_empty() {
        return Err(SimError::Sequence(format!(
            "baseline order {da_order:?} is not a nonempty permutation"
        )));
    }
    let mut seen = BTreeSet::new();
    for &k in arrival {
        if !all.contains(&k) {
            return Err(SimError::Sequence(format!(
                "arrival program {k} is outside the application set"
            )));
        }
        if !seen.insert(k) {
            return Err(SimError::Sequence(format!("arrival lists program {k} twice")));
        }
    }
    Ok(())
}

fn dosv_sequence(da_order: &[u32], arrival: &[u32]) -> Vec<u32> {
    if arrival.is_empty() {
        return da_order.to_vec();
    }
    let mut seq = Vec::with_capacity(da_order.len());
    let mut placed = BTreeSet::new();
    // The first early offer is always learned first; afterwards each step
    // takes the next unseen arrival when the previous step consumed one, and
    // otherwise falls back to the earliest unlearned program in the baseline
    // order.
    let mut latest = 0usize;
    seq.push(arrival[0]);
    placed.insert(arrival[0]);
    while seq.len() < da_order.len() {
        let next_baseline = || {
            da_order
                .iter()
                .copied()
                .find(|k| !placed.contains(k))
                .unwrap()
        };
        let prev_was_latest = seq.last() == arrival.get(latest);
        let k = if prev_was_latest {
            next_baseline()
        } else {
            latest += 1;
            match arrival.get(latest) {
                Some(&e) if !placed.contains(&e) => e,
                _ => next_baseline(),
            }
        };
        seq.push(k);
        placed.insert(k);
    }
    seq
}

fn hybrid_sequence(da_order: &[u32], early: &BTreeSet<u32>) -> Vec<u32> {
    let mut seq: Vec<u32> = da_order
        .iter()
        .copied()
        .filter(|k| early.contains(k))
        .collect();
    seq.extend(da_order.iter().copied().filter(|k| !early.contains(k)));
    seq
}

/// The order in which a student would learn programs under each mechanism,
/// given her baseline order and the arrival order of her early offers.
pub fn learning_sequence(
    kind: MechanismKind,
    da_order: &[u32],
    arrival: &[u32],
) -> Result<Vec<u32>, SimError> {
    check_sequence_inputs(da_order, arrival)?;
    Ok(match kind {
        MechanismKind::Da => da_order.to_vec(),
        MechanismKind::Dosv => dosv_sequence(da_order, arrival),
        MechanismKind::Hybrid => {
            let early: BTreeSet<u32> = arrival.iter().copied().collect();
            hybrid_sequence(da_order, &early)
        }
    })
}

/// Programs actually learned: the first half of the sequence, rounded down.
pub fn learning_outcomes(omega: &[u32]) -> BTreeSet<u32> {
    omega.iter().copied().take(omega.len() / 2).collect()
}

/// One comparison arm: the full-information benchmark or a mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SimArm {
    FullInfo,
    Mechanism(MechanismKind),
}

impl SimArm {
    pub fn label(&self) -> &'static str {
        match self {
            SimArm::FullInfo => "full_info",
            SimArm::Mechanism(kind) => kind.label(),
        }
    }
}

/// The full-information benchmark followed by the requested mechanisms in
/// canonical order.
pub fn canonical_arms(kinds: &[MechanismKind]) -> Vec<SimArm> {
    let mut arms = vec![SimArm::FullInfo];
    for kind in MechanismKind::ALL {
        if kinds.contains(&kind) {
            arms.push(SimArm::Mechanism(kind));
        }
    }
    arms
}

/// One student's draws for one sample: utility components per listed
/// program, the baseline submission order, and the early-offer arrival
/// order.
pub struct StudentDraws {
    pub pairs: BTreeMap<u32, UtilityPair>,
    pub omega_da: Vec<u32>,
    pub arrival: Vec<u32>,
}

/// Per-student draws for one sample, consumed in a fixed order: three draws
/// per listed program, then the baseline-order shuffle, then the
/// arrival-order shuffle.
pub fn draw_sample(market: &SimMarket, mut stream: RngStream) -> BTreeMap<u32, StudentDraws> {
    let mut out = BTreeMap::new();
    for s in &market.market.students {
        let mut pairs = BTreeMap::new();
        for &k in &s.applications {
            let v_full = market.v_full[&(s.id, k)];
            let se_full = market.se_full[&(s.id, k)];
            let v_noinfo = v_full + se_full * stream.normal();
            let eps_full = gumbel_draw(&mut stream);
            let eps_noinfo = gumbel_draw(&mut stream);
            pairs.insert(
                k,
                UtilityPair {
                    v_full,
                    se_full,
                    v_noinfo,
                    eps_full,
                    eps_noinfo,
                },
            );
        }
        let mut omega_da = s.applications.clone();
        stream.shuffle(&mut omega_da);
        let mut arrival = market.early_offers.get(&s.id).cloned().unwrap_or_default();
        stream.shuffle(&mut arrival);
        out.insert(
            s.id,
            StudentDraws {
                pairs,
                omega_da,
                arrival,
            },
        );
    }
    out
}

/// True if the programs appear in decreasing full-information utility.
fn in_full_info_order(seq: &[u32], pairs: &BTreeMap<u32, UtilityPair>) -> bool {
    seq.windows(2).all(|w| {
        let (a, b) = (pairs[&w[0]].full_info(), pairs[&w[1]].full_info());
        a > b || (a == b && w[0] < w[1])
    })
}

/// One sample's outcomes per arm: count of students whose submitted list,
/// restricted to ex-post feasible programs, follows full-information order;
/// each student's realized utility; the submitted lists; and the matching.
pub struct SampleOutcome {
    pub theta_hits: Vec<u64>,
    pub utilities: Vec<Vec<f64>>,
    pub rols: Vec<BTreeMap<u32, Vec<u32>>>,
    pub matchings: Vec<Matching>,
}

/// Runs every arm on one sample's draws: learn, rank by perceived utility,
/// match, and score.
pub fn run_sample_from_draws(
    market: &SimMarket,
    arms: &[SimArm],
    draws: &BTreeMap<u32, StudentDraws>,
) -> Result<SampleOutcome, SimError> {
    let unmatched_penalty = std::f64::consts::PI / 6.0f64.sqrt();
    let students = &market.market.students;
    let mut theta_hits = vec![0u64; arms.len()];
    let mut utilities = vec![vec![0.0; students.len()]; arms.len()];
    let mut all_rols = Vec::with_capacity(arms.len());
    let mut matchings = Vec::with_capacity(arms.len());

    for (a, arm) in arms.iter().enumerate() {
        let mut rols: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for s in students {
            let d = &draws[&s.id];
            let learned: BTreeSet<u32> = match arm {
                SimArm::FullInfo => s.applications.iter().copied().collect(),
                SimArm::Mechanism(kind) => {
                    let omega = learning_sequence(*kind, &d.omega_da, &d.arrival)?;
                    learning_outcomes(&omega)
                }
            };
            let perceived: BTreeMap<u32, f64> = s
                .applications
                .iter()
                .map(|&k| (k, perceived_utility(&d.pairs[&k], learned.contains(&k))))
                .collect();
            let mut rol = s.applications.clone();
            rol.sort_by(|&x, &y| {
                perceived[&y]
                    .partial_cmp(&perceived[&x])
                    .unwrap()
                    .then(x.cmp(&y))
            });
            rols.insert(s.id, rol);
        }
        let matching = gs_program_proposing(&market.market, &rols)?;
        let feasible = compute_expost_feasible(&market.market, &matching);
        for (idx, s) in students.iter().enumerate() {
            let d = &draws[&s.id];
            let kept: Vec<u32> = rols[&s.id]
                .iter()
                .copied()
                .filter(|k| feasible[&s.id].contains(k))
                .collect();
            if in_full_info_order(&kept, &d.pairs) {
                theta_hits[a] += 1;
            }
            utilities[a][idx] = match matching.program_of(s.id) {
                Some(k) => d.pairs[&k].full_info(),
                None => {
                    let floor = market.extended_feasible[&s.id]
                        .iter()
                        .map(|k| d.pairs[k].full_info())
                        .fold(f64::INFINITY, f64::min);
                    floor - unmatched_penalty
                }
            };
        }
        all_rols.push(rols);
        matchings.push(matching);
    }
    Ok(SampleOutcome {
        theta_hits,
        utilities,
        rols: all_rols,
        matchings,
    })
}

/// Aggregated outcomes: per-arm list-ordering shares and per-student
/// expected utilities, averaged over samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SimResults {
    pub arms: Vec<SimArm>,
    pub students: Vec<u32>,
    pub n_samples: u32,
    pub theta: Vec<f64>,
    pub eu: Vec<Vec<f64>>,
}

/// Runs all samples for the full-information benchmark plus the requested
/// mechanisms. Samples share draws across arms; work units run in parallel
/// and are folded in index order, so any thread count gives identical
/// results.
pub fn run_samples(
    market: &SimMarket,
    n_samples: u32,
    kinds: &[MechanismKind],
    stream: &RngStream,
) -> Result<SimResults, SimError> {
    if n_samples < 1 {
        return Err(SimError::Config("n_samples must be at least 1".to_string()));
    }
    let arms = canonical_arms(kinds);
    let students: Vec<u32> = market.market.students.iter().map(|s| s.id).collect();
    let shard_starts: Vec<u32> = (0..n_samples).step_by(SAMPLE_SHARD as usize).collect();
    let shards: Result<Vec<(Vec<u64>, Vec<Vec<f64>>)>, SimError> = shard_starts
        .par_iter()
        .map(|&start| {
            let end = (start + SAMPLE_SHARD).min(n_samples);
            let mut hits = vec![0u64; arms.len()];
            let mut sums = vec![vec![0.0; students.len()]; arms.len()];
            for s in start..end {
                let draws = draw_sample(market, stream.fork(s as u64));
                let outcome = run_sample_from_draws(market, &arms, &draws)?;
                for a in 0..arms.len() {
                    hits[a] += outcome.theta_hits[a];
                    for (acc, u) in sums[a].iter_mut().zip(&outcome.utilities[a]) {
                        *acc += u;
                    }
                }
            }
            Ok((hits, sums))
        })
        .collect();
    let shards = shards?;

    let mut hits = vec![0u64; arms.len()];
    let mut sums = vec![vec![0.0; students.len()]; arms.len()];
    for (shard_hits, shard_sums) in shards {
        for a in 0..arms.len() {
            hits[a] += shard_hits[a];
            for (acc, u) in sums[a].iter_mut().zip(&shard_sums[a]) {
                *acc += u;
            }
        }
    }
    let denom = n_samples as f64 * students.len() as f64;
    let theta = hits.iter().map(|&h| h as f64 / denom).collect();
    let eu = sums
        .into_iter()
        .map(|row| row.into_iter().map(|u| u / n_samples as f64).collect())
        .collect();
    Ok(SimResults {
        arms,
        students,
        n_samples,
        theta,
        eu,
    })
}

/// Share of students strictly better off, strictly worse off, and exactly
/// tied between the two arms of `pair`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairShares {
    pub pair: String,
    pub better: f64,
    pub worse: f64,
    pub equal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonStats {
    pub theta: Vec<(String, f64)>,
    pub eu: Vec<(String, Vec<(u32, f64)>)>,
    pub pairs: Vec<PairShares>,
}

/// Pairwise welfare shares for the canonical comparisons present in the
/// results, plus the per-arm statistics laid out for persistence.
pub fn compare(results: &SimResults) -> ComparisonStats {
    let theta = results
        .arms
        .iter()
        .zip(&results.theta)
        .map(|(arm, t)| (arm.label().to_string(), *t))
        .collect();
    let eu = results
        .arms
        .iter()
        .zip(&results.eu)
        .map(|(arm, row)| {
            let per_student = results.students.iter().copied().zip(row.iter().copied()).collect();
            (arm.label().to_string(), per_student)
        })
        .collect();

    let candidates = [
        (SimArm::FullInfo, SimArm::Mechanism(MechanismKind::Da)),
        (
            SimArm::Mechanism(MechanismKind::Dosv),
            SimArm::Mechanism(MechanismKind::Da),
        ),
        (
            SimArm::Mechanism(MechanismKind::Hybrid),
            SimArm::Mechanism(MechanismKind::Da),
        ),
        (
            SimArm::Mechanism(MechanismKind::Hybrid),
            SimArm::Mechanism(MechanismKind::Dosv),
        ),
    ];
    let mut pairs = Vec::new();
    for (first, second) in candidates {
        let (Some(i), Some(j)) = (
            results.arms.iter().position(|a| *a == first),
            results.arms.iter().position(|a| *a == second),
        ) else {
            continue;
        };
        let n = results.students.len() as f64;
        let mut better = 0u64;
        let mut worse = 0u64;
        for (x, y) in results.eu[i].iter().zip(&results.eu[j]) {
            if x > y {
                better += 1;
            } else if x < y {
                worse += 1;
            }
        }
        let equal = results.students.len() as u64 - better - worse;
        pairs.push(PairShares {
            pair: format!("{}_vs_{}", first.label(), second.label()),
            better: better as f64 / n,
            worse: worse as f64 / n,
            equal: equal as f64 / n,
        });
    }
    ComparisonStats { theta, eu, pairs }
}

fn csv_err(path: &Path, e: csv::Error) -> MarketError {
    MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    }
}

fn flush_err(path: &Path, e: std::io::Error) -> MarketError {
    MarketError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn write_theta_csv(stats: &ComparisonStats, path: &Path) -> Result<(), MarketError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["mechanism", "theta"]).map_err(|e| csv_err(path, e))?;
    for (label, theta) in &stats.theta {
        w.write_record([label.clone(), theta.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| flush_err(path, e))
}

pub fn write_eu_csv(stats: &ComparisonStats, path: &Path) -> Result<(), MarketError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["student_id", "mechanism", "eu"])
        .map_err(|e| csv_err(path, e))?;
    for (label, per_student) in &stats.eu {
        for (student, eu) in per_student {
            w.write_record([student.to_string(), label.clone(), eu.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| flush_err(path, e))
}

pub fn write_pi_csv(stats: &ComparisonStats, path: &Path) -> Result<(), MarketError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["pair", "better", "worse", "equal"])
        .map_err(|e| csv_err(path, e))?;
    for p in &stats.pairs {
        w.write_record([
            p.pair.clone(),
            p.better.to_string(),
            p.worse.to_string(),
            p.equal.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| flush_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::is_stable;
    use approx::assert_abs_diff_eq;

    fn small_config() -> SimConfig {
        SimConfig {
            n_students: 40,
            n_programs: 8,
            n_samples: 12,
            seed: 7,
            apps_min: 2,
            apps_max: 5,
            capacity_min: 2,
            capacity_max: 6,
            v_scale: 1.0,
            se_scale: 0.8,
        }
    }

    fn all_kinds() -> Vec<MechanismKind> {
        vec![MechanismKind::Da, MechanismKind::Dosv, MechanismKind::Hybrid]
    }

    #[test]
    fn worked_sequence_examples() {
        let da = [1, 2, 3, 4];
        let seq = learning_sequence(MechanismKind::Dosv, &da, &[4, 2, 1]).unwrap();
        assert_eq!(seq, vec![4, 1, 2, 3]);
        let seq = learning_sequence(MechanismKind::Dosv, &da, &[2, 1, 4]).unwrap();
        assert_eq!(seq, vec![2, 1, 3, 4]);
        let seq = learning_sequence(MechanismKind::Hybrid, &da, &[4, 2, 1]).unwrap();
        assert_eq!(seq, vec![1, 2, 4, 3]);
        // Without early offers all three sequences coincide.
        for kind in MechanismKind::ALL {
            assert_eq!(learning_sequence(kind, &da, &[]).unwrap(), da.to_vec());
        }
        assert!(matches!(
            learning_sequence(MechanismKind::Dosv, &da, &[9]),
            Err(SimError::Sequence(_))
        ));
        assert!(matches!(
            learning_sequence(MechanismKind::Dosv, &da, &[2, 2]),
            Err(SimError::Sequence(_))
        ));
    }

    #[test]
    fn score_and_learning_budget() {
        assert_abs_diff_eq!(program_score(1.0, 0.0), 0.5);
        assert_abs_diff_eq!(program_score(0.0, 0.0), 0.0);
        let grid: Vec<f64> = (0..=4).map(|i| i as f64 / 4.0).collect();
        for w in grid.windows(2) {
            for &nu in &grid {
                assert!(program_score(w[1], nu) > program_score(w[0], nu));
                assert!(program_score(nu, w[1]) > program_score(nu, w[0]));
            }
        }
        assert_eq!(learning_outcomes(&[3, 1, 4, 2, 5]).len(), 2);
        assert_eq!(learning_outcomes(&[3, 1, 4, 2]).len(), 2);
        assert_eq!(learning_outcomes(&[3]).len(), 0);
        assert_eq!(learning_outcomes(&[3, 1, 4, 2]), BTreeSet::from([1, 3]));
    }

    #[test]
    fn sequence_invariants_over_random_draws() {
        let mut stream = RngStream::root(11).fork(0);
        for _ in 0..200 {
            let n = 2 + stream.below(7);
            let mut da_order: Vec<u32> = (0..n as u32).collect();
            stream.shuffle(&mut da_order);
            let n_early = stream.below(n + 1);
            let mut arrival = da_order.clone();
            stream.shuffle(&mut arrival);
            arrival.truncate(n_early);
            let budget = n / 2;
            for kind in MechanismKind::ALL {
                let omega = learning_sequence(kind, &da_order, &arrival).unwrap();
                let mut sorted = omega.clone();
                sorted.sort_unstable();
                let mut expect = da_order.clone();
                expect.sort_unstable();
                assert_eq!(sorted, expect, "{kind:?} must permute the applications");
                assert_eq!(learning_outcomes(&omega).len(), budget);
            }
            if !arrival.is_empty() {
                let dosv = learning_sequence(MechanismKind::Dosv, &da_order, &arrival).unwrap();
                assert_eq!(dosv[0], arrival[0]);
                if budget >= 1 {
                    assert!(learning_outcomes(&dosv).contains(&arrival[0]));
                }
                let hybrid =
                    learning_sequence(MechanismKind::Hybrid, &da_order, &arrival).unwrap();
                let early: BTreeSet<u32> = arrival.iter().copied().collect();
                let head = early.len().min(budget);
                for &k in hybrid.iter().take(head) {
                    assert!(early.contains(&k), "early offers lead the hybrid order");
                }
            }
        }
    }

    #[test]
    fn generated_markets_are_deterministic_and_well_formed() {
        let cfg = small_config();
        let stream = RngStream::root(cfg.seed).fork(1);
        let m1 = generate_market(&cfg, &stream).unwrap();
        let m2 = generate_market(&cfg, &stream).unwrap();
        assert_eq!(m1, m2);
        assert!(validate_market(&m1.market).is_empty());
        assert_eq!(m1.market.capacity(OUTSIDE_OPTION), 0);
        for s in &m1.market.students {
            assert_eq!(*s.applications.last().unwrap(), OUTSIDE_OPTION);
            let n_real = s.applications.len() - 1;
            assert!((cfg.apps_min as usize..=cfg.apps_max as usize).contains(&n_real));
            for &k in &m1.early_offers[&s.id] {
                assert!(s.applications.contains(&k));
            }
        }
        // Every early-offer batch respects capacity and ranking order.
        for p in &m1.market.programs {
            if p.id == OUTSIDE_OPTION {
                continue;
            }
            let offered: Vec<u32> = m1
                .early_offers
                .iter()
                .filter(|(_, ks)| ks.contains(&p.id))
                .map(|(&i, _)| i)
                .collect();
            assert!(offered.len() <= p.capacity as usize);
            let expect: BTreeSet<u32> = m1.market.rankings[&p.id]
                .iter()
                .copied()
                .take(p.capacity as usize)
                .collect();
            assert_eq!(offered.into_iter().collect::<BTreeSet<_>>(), expect);
        }
    }

    #[test]
    fn written_markets_read_back_to_the_same_value() {
        let cfg = small_config();
        let stream = RngStream::root(cfg.seed).fork(1);
        let generated = generate_market(&cfg, &stream).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sim_market(&generated, dir.path()).unwrap();
        let loaded = read_sim_market(dir.path()).unwrap();
        assert_eq!(loaded, generated);

        let arms = MechanismKind::ALL;
        let from_memory = run_samples(&generated, 16, &arms, &stream.fork(9)).unwrap();
        let from_disk = run_samples(&loaded, 16, &arms, &stream.fork(9)).unwrap();
        assert_eq!(from_memory, from_disk);

        std::fs::remove_file(dir.path().join("utilities.csv")).unwrap();
        assert!(read_sim_market(dir.path()).is_err());
    }

    #[test]
    fn single_program_with_room_admits_every_applicant() {
        let cfg = SimConfig {
            n_students: 9,
            n_programs: 1,
            n_samples: 1,
            seed: 3,
            apps_min: 1,
            apps_max: 1,
            capacity_min: 9,
            capacity_max: 9,
            v_scale: 1.0,
            se_scale: 0.5,
        };
        let market = generate_market(&cfg, &RngStream::root(cfg.seed).fork(1)).unwrap();
        let results = run_samples(&market, 1, &all_kinds(), &RngStream::root(3).fork(2)).unwrap();
        for eu_row in &results.eu {
            assert!(eu_row.iter().all(|u| u.is_finite()));
        }
        let draws = draw_sample(&market, RngStream::root(3).fork(2).fork(0));
        let outcome = run_sample_from_draws(&market, &results.arms, &draws).unwrap();
        for matching in &outcome.matchings {
            assert_eq!(matching.assignment.len(), 9);
            let feasible = compute_expost_feasible(&market.market, matching);
            assert!(feasible.values().all(|f| f.contains(&1)));
        }
    }

    #[test]
    fn application_counts_match_the_configured_mean() {
        let cfg = SimConfig {
            n_students: 10_000,
            n_programs: 12,
            n_samples: 1,
            seed: 5,
            apps_min: 2,
            apps_max: 9,
            capacity_min: 1,
            capacity_max: 3,
            v_scale: 1.0,
            se_scale: 0.5,
        };
        let market = generate_market(&cfg, &RngStream::root(cfg.seed).fork(1)).unwrap();
        let mean: f64 = market
            .market
            .students
            .iter()
            .map(|s| s.applications.len() as f64)
            .sum::<f64>()
            / cfg.n_students as f64;
        // Real applications are uniform on {2..9}; plus one outside option.
        let expect = (2.0 + 9.0) / 2.0 + 1.0;
        let var = (8.0f64 * 8.0 - 1.0) / 12.0;
        let sigma = (var / cfg.n_students as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * sigma,
            "mean {mean} vs {expect} (sigma {sigma})"
        );
    }

    #[test]
    fn hand_traced_sample() {
        let students = vec![
            StudentProfile {
                id: 1,
                abitur: 0.9,
                applications: vec![1, 2, OUTSIDE_OPTION],
            },
            StudentProfile {
                id: 2,
                abitur: 0.6,
                applications: vec![1, 2, OUTSIDE_OPTION],
            },
            StudentProfile {
                id: 3,
                abitur: 0.3,
                applications: vec![1, 2, OUTSIDE_OPTION],
            },
        ];
        let programs = vec![
            ProgramProfile {
                id: OUTSIDE_OPTION,
                capacity: 0,
            },
            ProgramProfile { id: 1, capacity: 1 },
            ProgramProfile { id: 2, capacity: 1 },
        ];
        let rankings = BTreeMap::from([
            (OUTSIDE_OPTION, Vec::new()),
            (1, vec![1, 2, 3]),
            (2, vec![1, 2, 3]),
        ]);
        let market = MarketInstance {
            students,
            programs,
            rankings,
        };
        let mut v_full = BTreeMap::new();
        let mut se_full = BTreeMap::new();
        for (i, values) in [(1, [2.0, 1.0, -5.0]), (2, [1.0, 2.0, -5.0]), (3, [1.5, 0.5, -5.0])] {
            for (k, v) in [1, 2, OUTSIDE_OPTION].into_iter().zip(values) {
                v_full.insert((i, k), v);
                se_full.insert((i, k), 1.0);
            }
        }
        let sim = SimMarket {
            market,
            v_full: v_full.clone(),
            se_full,
            early_offers: BTreeMap::from([(1, vec![1, 2]), (2, vec![]), (3, vec![])]),
            extended_feasible: BTreeMap::from([(1, vec![1, 2]), (2, vec![1, 2]), (3, vec![1, 2])]),
        };

        let pair = |i: u32, k: u32, v_no: f64| UtilityPair {
            v_full: v_full[&(i, k)],
            se_full: 1.0,
            v_noinfo: v_no,
            eps_full: 0.0,
            eps_noinfo: 0.0,
        };
        let draws = BTreeMap::from([
            (
                1,
                StudentDraws {
                    pairs: BTreeMap::from([
                        (1, pair(1, 1, 0.5)),
                        (2, pair(1, 2, 1.5)),
                        (OUTSIDE_OPTION, pair(1, OUTSIDE_OPTION, -4.0)),
                    ]),
                    omega_da: vec![1, OUTSIDE_OPTION, 2],
                    arrival: vec![2, 1],
                },
            ),
            (
                2,
                StudentDraws {
                    pairs: BTreeMap::from([
                        (1, pair(2, 1, 0.8)),
                        (2, pair(2, 2, 0.6)),
                        (OUTSIDE_OPTION, pair(2, OUTSIDE_OPTION, -4.0)),
                    ]),
                    omega_da: vec![1, 2, OUTSIDE_OPTION],
                    arrival: vec![],
                },
            ),
            (
                3,
                StudentDraws {
                    pairs: BTreeMap::from([
                        (1, pair(3, 1, 1.2)),
                        (2, pair(3, 2, 0.9)),
                        (OUTSIDE_OPTION, pair(3, OUTSIDE_OPTION, -4.0)),
                    ]),
                    omega_da: vec![2, 1, OUTSIDE_OPTION],
                    arrival: vec![],
                },
            ),
        ]);

        let arms = canonical_arms(&all_kinds());
        let outcome = run_sample_from_draws(&sim, &arms, &draws).unwrap();

        // Student 1 learns program 1 under DA/Hybrid but program 2 under
        // DoSV, flipping her list; students 2 and 3 behave identically
        // everywhere.
        let assignments: Vec<Vec<(u32, u32)>> = outcome
            .matchings
            .iter()
            .map(|m| m.assignment.iter().map(|(&s, &k)| (s, k)).collect())
            .collect();
        assert_eq!(assignments[0], vec![(1, 1), (2, 2)]); // full information
        assert_eq!(assignments[1], vec![(1, 1), (2, 2)]); // da
        assert_eq!(assignments[2], vec![(1, 2), (2, 1)]); // dosv
        assert_eq!(assignments[3], vec![(1, 1), (2, 2)]); // hybrid
        assert_eq!(outcome.theta_hits, vec![3, 3, 2, 3]);

        let floor = 0.5 - std::f64::consts::PI / 6.0f64.sqrt();
        let expect = [
            vec![2.0, 2.0, floor],
            vec![2.0, 2.0, floor],
            vec![1.0, 1.0, floor],
            vec![2.0, 2.0, floor],
        ];
        for (got, want) in outcome.utilities.iter().zip(&expect) {
            for (g, w) in got.iter().zip(want) {
                assert_abs_diff_eq!(g, w, epsilon = 1e-15);
            }
        }

        let results = SimResults {
            arms: arms.clone(),
            students: vec![1, 2, 3],
            n_samples: 1,
            theta: outcome.theta_hits.iter().map(|&h| h as f64 / 3.0).collect(),
            eu: outcome.utilities.clone(),
        };
        let stats = compare(&results);
        assert_eq!(stats.pairs.len(), 4);
        let by_name = |name: &str| stats.pairs.iter().find(|p| p.pair == name).unwrap();
        let fi_da = by_name("full_info_vs_da");
        assert_abs_diff_eq!(fi_da.equal, 1.0, epsilon = 1e-15);
        let dosv_da = by_name("dosv_vs_da");
        assert_abs_diff_eq!(dosv_da.better, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dosv_da.worse, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dosv_da.equal, 1.0 / 3.0, epsilon = 1e-15);
        let hy_dosv = by_name("hybrid_vs_dosv");
        assert_abs_diff_eq!(hy_dosv.better, 2.0 / 3.0, epsilon = 1e-15);
        for p in &stats.pairs {
            assert_abs_diff_eq!(p.better + p.worse + p.equal, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_early_offers_collapses_the_mechanisms() {
        let cfg = small_config();
        let mut market = generate_market(&cfg, &RngStream::root(cfg.seed).fork(1)).unwrap();
        for offers in market.early_offers.values_mut() {
            offers.clear();
        }
        let results =
            run_samples(&market, 6, &all_kinds(), &RngStream::root(cfg.seed).fork(2)).unwrap();
        let da = results
            .arms
            .iter()
            .position(|a| *a == SimArm::Mechanism(MechanismKind::Da))
            .unwrap();
        for kind in [MechanismKind::Dosv, MechanismKind::Hybrid] {
            let other = results
                .arms
                .iter()
                .position(|a| *a == SimArm::Mechanism(kind))
                .unwrap();
            assert_eq!(results.theta[da], results.theta[other]);
            assert_eq!(results.eu[da], results.eu[other]);
        }
        let stats = compare(&results);
        for name in ["dosv_vs_da", "hybrid_vs_da", "hybrid_vs_dosv"] {
            let p = stats.pairs.iter().find(|p| p.pair == name).unwrap();
            assert_abs_diff_eq!(p.equal, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn full_information_always_ranks_in_true_order() {
        let cfg = small_config();
        let market = generate_market(&cfg, &RngStream::root(cfg.seed).fork(1)).unwrap();
        let results =
            run_samples(&market, 8, &all_kinds(), &RngStream::root(41).fork(2)).unwrap();
        assert_eq!(results.arms[0], SimArm::FullInfo);
        assert_abs_diff_eq!(results.theta[0], 1.0, epsilon = 1e-15);
        for p in compare(&results).pairs {
            assert_abs_diff_eq!(p.better + p.worse + p.equal, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_matchings_are_stable() {
        let cfg = small_config();
        let market = generate_market(&cfg, &RngStream::root(cfg.seed).fork(1)).unwrap();
        let arms = canonical_arms(&all_kinds());
        let sample_stream = RngStream::root(17).fork(2);
        let draws = draw_sample(&market, sample_stream.fork(0));
        // Rebuild the lists the sample used so stability is judged against
        // the same inputs.
        for (a, arm) in arms.iter().enumerate() {
            let mut rols: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for s in &market.market.students {
                let d = &draws[&s.id];
                let learned: BTreeSet<u32> = match arm {
                    SimArm::FullInfo => s.applications.iter().copied().collect(),
                    SimArm::Mechanism(kind) => {
                        let omega = learning_sequence(*kind, &d.omega_da, &d.arrival).unwrap();
                        learning_outcomes(&omega)
                    }
                };
                let mut rol = s.applications.clone();
                rol.sort_by(|&x, &y| {
                    let ux = perceived_utility(&d.pairs[&x], learned.contains(&x));
                    let uy = perceived_utility(&d.pairs[&y], learned.contains(&y));
                    uy.partial_cmp(&ux).unwrap().then(x.cmp(&y))
                });
                rols.insert(s.id, rol);
            }
            let outcome = run_sample_from_draws(&market, &arms, &draws).unwrap();
            assert_eq!(outcome.rols[a], rols);
            let (stable, blocking) = is_stable(&market.market, &rols, &outcome.matchings[a]);
            assert!(stable, "{arm:?}: blocking pairs {blocking:?}");
        }
    }

    #[test]
    fn aggregation_is_deterministic_and_matches_single_samples() {
        let cfg = small_config();
        let market = generate_market(&cfg, &RngStream::root(cfg.seed).fork(1)).unwrap();
        let stream = RngStream::root(23).fork(2);
        let kinds = all_kinds();

        let r1 = run_samples(&market, cfg.n_samples, &kinds, &stream).unwrap();
        let r2 = run_samples(&market, cfg.n_samples, &kinds, &stream).unwrap();
        assert_eq!(r1, r2);

        let pool = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
        };
        let serial = pool(1).install(|| run_samples(&market, cfg.n_samples, &kinds, &stream));
        let parallel = pool(4).install(|| run_samples(&market, cfg.n_samples, &kinds, &stream));
        assert_eq!(serial.unwrap(), r1);
        assert_eq!(parallel.unwrap(), r1);

        // The one-sample run equals that sample computed by hand.
        let single = run_samples(&market, 1, &kinds, &stream).unwrap();
        let draws = draw_sample(&market, stream.fork(0));
        let outcome = run_sample_from_draws(&market, &single.arms, &draws).unwrap();
        let n = market.market.students.len() as f64;
        for a in 0..single.arms.len() {
            assert_eq!(single.theta[a], outcome.theta_hits[a] as f64 / n);
            assert_eq!(single.eu[a], outcome.utilities[a]);
        }
    }

    #[test]
    fn matched_pairs_converge_when_nothing_is_unknown() {
        let pair = UtilityPair {
            v_full: 1.25,
            se_full: 0.0,
            v_noinfo: 1.25,
            eps_full: 0.4,
            eps_noinfo: 0.4,
        };
        assert_eq!(perceived_utility(&pair, true), perceived_utility(&pair, false));
    }

    #[test]
    fn config_validation_rejects_bad_bounds() {
        let mut cfg = small_config();
        cfg.apps_max = cfg.n_programs + 1;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
        let mut cfg = small_config();
        cfg.se_scale = 0.0;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
        let mut cfg = small_config();
        cfg.n_samples = 0;
        assert!(matches!(cfg.validate(), Err(SimError::Config(_))));
        assert!(small_config().validate().is_ok());
    }

    #[test]
    fn csv_writers_round_out_the_statistics() {
        let cfg = small_config();
        let market = generate_market(&cfg, &RngStream::root(cfg.seed).fork(1)).unwrap();
        let results = run_samples(&market, 4, &all_kinds(), &RngStream::root(9).fork(2)).unwrap();
        let stats = compare(&results);
        let dir = tempfile::tempdir().unwrap();
        let theta_path = dir.path().join("theta.csv");
        let eu_path = dir.path().join("eu.csv");
        let pi_path = dir.path().join("pi.csv");
        write_theta_csv(&stats, &theta_path).unwrap();
        write_eu_csv(&stats, &eu_path).unwrap();
        write_pi_csv(&stats, &pi_path).unwrap();
        let theta = std::fs::read_to_string(&theta_path).unwrap();
        assert!(theta.starts_with("mechanism,theta\nfull_info,1\n"));
        assert_eq!(theta.lines().count(), 5);
        let eu = std::fs::read_to_string(&eu_path).unwrap();
        assert_eq!(eu.lines().count(), 1 + 4 * cfg.n_students as usize);
        let pi = std::fs::read_to_string(&pi_path).unwrap();
        assert!(pi.starts_with("pair,better,worse,equal\n"));
        assert_eq!(pi.lines().count(), 5);
    }
}

//! Period-by-period mechanism runtime.
//!
//! Three admission procedures share one timeline: programs may release early
//! offers per a schedule, students learn about programs (via an agent policy)
//! and submit rank-order lists, and a final deferred-acceptance round clears
//! the market.
//!
//! - `Da`: students learn and submit ROLs before any offer exists.
//! - `Dosv`: early offers arrive over periods; a student re-optimizes her
//!   learning each time an offer improves her admission beliefs, and her
//!   best arrived offer (by her final ROL) is tentatively held going into
//!   the final round.
//! - `Hybrid`: all early offers are released in one common period; each
//!   student learns once, after seeing all of them, with the same held-offer
//!   seeding as `Dosv`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::learning::{follow_strategy, optimal_strategy, rol_value, LearnError, LearningProblem, LearningState, Strategy};
use crate::market::{validate_market, MarketError, MarketInstance, OfferArrival};
use crate::matching::{gs_with_held_offers, MatchError, Matching, RolMap};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MechanismKind {
    Da,
    Dosv,
    Hybrid,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 3] = [MechanismKind::Da, MechanismKind::Dosv, MechanismKind::Hybrid];

    pub fn label(&self) -> &'static str {
        match self {
            MechanismKind::Da => "da",
            MechanismKind::Dosv => "dosv",
            MechanismKind::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "da" => Some(MechanismKind::Da),
            "dosv" => Some(MechanismKind::Dosv),
            "hybrid" => Some(MechanismKind::Hybrid),
            _ => None,
        }
    }
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// When each program releases its early offers (period ≥ 1). Programs absent
/// from the map release none.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OfferSchedule {
    pub release_period: BTreeMap<u32, u32>,
}

#[derive(Debug, thiserror::Error)]
pub enum MechanismError {
    #[error("market failed validation: {0}")]
    InvalidMarket(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("agent policy misbehaved: {0}")]
    Agent(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Offer,
    Learn,
    FinalizeRol,
    Match,
}

impl EventKind {
    fn label(&self) -> &'static str {
        match self {
            EventKind::Offer => "offer",
            EventKind::Learn => "learn",
            EventKind::FinalizeRol => "finalize_rol",
            EventKind::Match => "match",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub period: u32,
    pub kind: EventKind,
    pub student: u32,
    pub program: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    fn push(&mut self, period: u32, kind: EventKind, student: u32, program: Option<u32>) {
        self.events.push(Event {
            period,
            kind,
            student,
            program,
        });
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MarketError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        w.write_record(["period", "kind", "student_id", "program_id"])
            .map_err(|e| MarketError::Csv {
                path: path.display().to_string(),
                source: e,
            })?;
        for e in &self.events {
            let program = e.program.map_or(String::new(), |k| k.to_string());
            w.write_record([
                e.period.to_string(),
                e.kind.label().to_string(),
                e.student.to_string(),
                program,
            ])
            .map_err(|err| MarketError::Csv {
                path: path.display().to_string(),
                source: err,
            })?;
        }
        w.flush().map_err(|e| MarketError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(())
    }
}

/// Per-student policy bundle driven by the runtime. Program positions refer
/// to indices into the student's application list, matching the order of the
/// beliefs vector.
pub trait AgentBundle {
    /// Prior admission beliefs, one per applied-to program.
    fn initial_beliefs(&self, student: u32) -> Vec<f64>;

    /// One learning episode at the given beliefs; returns the indices
    /// inspected this episode, in order. May draw from `stream`.
    fn learn_episode(
        &mut self,
        student: u32,
        period: u32,
        beliefs: &[f64],
        stream: &mut RngStream,
    ) -> Result<Vec<usize>, MechanismError>;

    /// Final rank-order list (indices, best first) at the given beliefs.
    fn final_rol(&mut self, student: u32, beliefs: &[f64]) -> Result<Vec<usize>, MechanismError>;
}

/// Outcome of one mechanism run.
#[derive(Clone, Debug)]
pub struct MechanismRun {
    pub matching: Matching,
    pub events: EventLog,
    pub rols: RolMap,
}

/// Computes per-student offer arrivals implied by a release schedule: each
/// releasing program sends early offers to its top-ranked applicants up to
/// capacity. Two offers reaching one student in the same period are
/// serialized into consecutive periods by program id; an offer that cannot
/// fit within the student's horizon is a schedule error.
pub fn derive_offer_arrival(
    m: &MarketInstance,
    schedule: &OfferSchedule,
) -> Result<BTreeMap<u32, OfferArrival>, MechanismError> {
    let violations = validate_market(m);
    if !violations.is_empty() {
        return Err(MechanismError::InvalidMarket(violations[0].to_string()));
    }
    let mut per_student: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
    for (&k, &period) in &schedule.release_period {
        if period == 0 {
            return Err(MechanismError::Schedule(format!(
                "program {k} releases in period 0; periods start at 1"
            )));
        }
        let Some(program) = m.program(k) else {
            return Err(MechanismError::Schedule(format!("unknown program {k}")));
        };
        let ranking = m.rankings.get(&k).map_or(&[][..], |r| r.as_slice());
        for &s in ranking.iter().take(program.capacity as usize) {
            per_student.entry(s).or_default().push((period, k));
        }
    }

    let mut out = BTreeMap::new();
    for student in &m.students {
        let j = student.applications.len();
        let mut arrival = OfferArrival::none(j);
        if let Some(offers) = per_student.get_mut(&student.id) {
            offers.sort_unstable();
            let mut next_free = 0u32;
            for &(period, k) in offers.iter() {
                let assigned = period.max(next_free + 1);
                if assigned > j as u32 {
                    return Err(MechanismError::Schedule(format!(
                        "offer from program {k} to student {} cannot fit before her horizon {j}",
                        student.id
                    )));
                }
                next_free = assigned;
                let idx = student
                    .applications
                    .iter()
                    .position(|&a| a == k)
                    .ok_or_else(|| {
                        MechanismError::Schedule(format!(
                            "program {k} offered to student {} who did not apply",
                            student.id
                        ))
                    })?;
                arrival.entries[idx] = assigned;
            }
        }
        debug_assert!(arrival.validate().is_ok());
        out.insert(student.id, arrival);
    }
    Ok(out)
}

fn checked_beliefs(
    agent: &dyn AgentBundle,
    student: u32,
    j: usize,
) -> Result<Vec<f64>, MechanismError> {
    let beliefs = agent.initial_beliefs(student);
    if beliefs.len() != j {
        return Err(MechanismError::Agent(format!(
            "student {student}: {} beliefs for {j} applications",
            beliefs.len()
        )));
    }
    for &p in &beliefs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(MechanismError::Agent(format!(
                "student {student}: belief {p} outside (0, 1]"
            )));
        }
    }
    Ok(beliefs)
}

fn checked_rol(
    student: u32,
    indices: &[usize],
    applications: &[u32],
) -> Result<Vec<u32>, MechanismError> {
    let mut seen = BTreeSet::new();
    let mut rol = Vec::with_capacity(indices.len());
    for &idx in indices {
        if idx >= applications.len() {
            return Err(MechanismError::Agent(format!(
                "student {student}: ROL index {idx} out of range"
            )));
        }
        if !seen.insert(idx) {
            return Err(MechanismError::Agent(format!(
                "student {student}: ROL lists index {idx} twice"
            )));
        }
        rol.push(applications[idx]);
    }
    Ok(rol)
}

/// Runs one mechanism end to end and returns the matching, the event log,
/// and the submitted ROLs.
///
/// Under `Da` the schedule is ignored: students learn and finalize at period
/// 0 and the final round starts from a clean slate. Under `Dosv`, learning
/// episodes run whenever an offer arrives and at each student's horizon, and
/// the final round is seeded with held offers. `Hybrid` requires all
/// releasing programs to share one period; each student learns once after
/// every release is out.
pub fn run_mechanism(
    kind: MechanismKind,
    m: &MarketInstance,
    schedule: &OfferSchedule,
    agent: &mut dyn AgentBundle,
    stream: &mut RngStream,
) -> Result<MechanismRun, MechanismError> {
    let violations = validate_market(m);
    if !violations.is_empty() {
        return Err(MechanismError::InvalidMarket(violations[0].to_string()));
    }
    if kind == MechanismKind::Hybrid {
        let periods: BTreeSet<u32> = schedule.release_period.values().copied().collect();
        if periods.len() > 1 {
            return Err(MechanismError::Schedule(format!(
                "hybrid releases must share one period, got {periods:?}"
            )));
        }
    }

    let arrivals = match kind {
        MechanismKind::Da => None,
        _ => Some(derive_offer_arrival(m, schedule)?),
    };
    let mut events = EventLog::default();
    let mut rols: RolMap = BTreeMap::new();
    let horizon_max = m
        .students
        .iter()
        .map(|s| s.applications.len() as u32)
        .max()
        .unwrap_or(0);

    let mut student_streams: BTreeMap<u32, RngStream> =
        m.students.iter().map(|s| (s.id, stream.fork(s.id as u64))).collect();
    let mut beliefs: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for s in &m.students {
        beliefs.insert(s.id, checked_beliefs(agent, s.id, s.applications.len())?);
    }

    match kind {
        MechanismKind::Da => {
            for s in &m.students {
                let b = beliefs[&s.id].clone();
                let stream_s = student_streams.get_mut(&s.id).unwrap();
                let learned = agent.learn_episode(s.id, 0, &b, stream_s)?;
                for idx in learned {
                    let k = *s.applications.get(idx).ok_or_else(|| {
                        MechanismError::Agent(format!("student {}: learned index {idx} out of range", s.id))
                    })?;
                    events.push(0, EventKind::Learn, s.id, Some(k));
                }
                let rol = checked_rol(s.id, &agent.final_rol(s.id, &b)?, &s.applications)?;
                events.push(0, EventKind::FinalizeRol, s.id, None);
                rols.insert(s.id, rol);
            }
            let matching = gs_with_held_offers(m, &rols, &BTreeMap::new(), &BTreeMap::new())?;
            for (&s, &k) in &matching.assignment {
                events.push(horizon_max + 1, EventKind::Match, s, Some(k));
            }
            Ok(MechanismRun {
                matching,
                events,
                rols,
            })
        }
        MechanismKind::Dosv | MechanismKind::Hybrid => {
            let arrivals = arrivals.unwrap();
            // A hybrid student learns exactly once, after her last offer has
            // arrived (collisions serialize offers past the release period).
            let release_max = schedule.release_period.values().copied().max();
            let hybrid_episode: BTreeMap<u32, u32> = m
                .students
                .iter()
                .map(|s| {
                    let horizon = s.applications.len() as u32;
                    let last_arrival = arrivals[&s.id]
                        .entries
                        .iter()
                        .copied()
                        .filter(|&e| e <= horizon)
                        .max();
                    let period = last_arrival
                        .or(release_max.map(|p| p.min(horizon)))
                        .unwrap_or(horizon);
                    (s.id, period)
                })
                .collect();
            for t in 1..=horizon_max {
                for s in &m.students {
                    let arrival = &arrivals[&s.id];
                    let mut new_offer = false;
                    for (idx, &entry) in arrival.entries.iter().enumerate() {
                        if entry == t {
                            events.push(t, EventKind::Offer, s.id, Some(s.applications[idx]));
                            beliefs.get_mut(&s.id).unwrap()[idx] = 1.0;
                            new_offer = true;
                        }
                    }
                    let horizon = s.applications.len() as u32;
                    if t > horizon {
                        continue;
                    }
                    // Under Dosv, re-optimization at unchanged beliefs from a
                    // stopped state is a no-op, so episodes only need to run
                    // on arrivals and at the horizon.
                    let episode_now = match kind {
                        MechanismKind::Dosv => new_offer || t == horizon,
                        _ => t == hybrid_episode[&s.id],
                    };
                    if episode_now {
                        let b = beliefs[&s.id].clone();
                        let stream_s = student_streams.get_mut(&s.id).unwrap();
                        let learned = agent.learn_episode(s.id, t, &b, stream_s)?;
                        for idx in learned {
                            let k = *s.applications.get(idx).ok_or_else(|| {
                                MechanismError::Agent(format!(
                                    "student {}: learned index {idx} out of range",
                                    s.id
                                ))
                            })?;
                            events.push(t, EventKind::Learn, s.id, Some(k));
                        }
                    }
                }
            }
            for s in &m.students {
                let b = beliefs[&s.id].clone();
                let rol = checked_rol(s.id, &agent.final_rol(s.id, &b)?, &s.applications)?;
                events.push(s.applications.len() as u32, EventKind::FinalizeRol, s.id, None);
                rols.insert(s.id, rol);
            }

            // Exhausted sets: every early offer already went out. Each student
            // enters the final round holding her best arrived offer per her
            // final ROL.
            let mut exhausted: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
            let mut held: BTreeMap<u32, u32> = BTreeMap::new();
            for s in &m.students {
                let arrival = &arrivals[&s.id];
                let horizon = s.applications.len() as u32;
                let mut best: Option<(usize, u32)> = None;
                for (idx, &entry) in arrival.entries.iter().enumerate() {
                    if entry <= horizon {
                        let k = s.applications[idx];
                        exhausted.entry(k).or_default().insert(s.id);
                        if let Some(pos) = rols[&s.id].iter().position(|&r| r == k) {
                            if best.is_none_or(|(b_pos, _)| pos < b_pos) {
                                best = Some((pos, k));
                            }
                        }
                    }
                }
                if let Some((_, k)) = best {
                    held.insert(s.id, k);
                }
            }
            let matching = gs_with_held_offers(m, &rols, &held, &exhausted)?;
            for (&s, &k) in &matching.assignment {
                events.push(horizon_max + 1, EventKind::Match, s, Some(k));
            }
            Ok(MechanismRun {
                matching,
                events,
                rols,
            })
        }
    }
}

/// Agent that solves the inspection problem optimally at whatever beliefs the
/// runtime presents, carrying its learning state across episodes. Qualities
/// are sampled from the problem's distributions on first inspection.
pub struct TheoryAgent {
    problems: BTreeMap<u32, LearningProblem>,
    states: BTreeMap<u32, LearningState>,
    cache: BTreeMap<(u32, Vec<u64>), Strategy>,
}

impl TheoryAgent {
    pub fn new(problems: BTreeMap<u32, LearningProblem>) -> Self {
        Self {
            problems,
            states: BTreeMap::new(),
            cache: BTreeMap::new(),
        }
    }

    pub fn state_of(&self, student: u32) -> Option<&LearningState> {
        self.states.get(&student)
    }

    fn strategy_at(&mut self, student: u32, beliefs: &[f64]) -> Result<&Strategy, MechanismError> {
        let bits: Vec<u64> = beliefs.iter().map(|b| b.to_bits()).collect();
        let key = (student, bits);
        if !self.cache.contains_key(&key) {
            let prob = self.problems[&student].with_beliefs(beliefs.to_vec());
            let (strategy, _) = optimal_strategy(&prob)?;
            self.cache.insert(key.clone(), strategy);
        }
        Ok(&self.cache[&key])
    }
}

impl AgentBundle for TheoryAgent {
    fn initial_beliefs(&self, student: u32) -> Vec<f64> {
        self.problems[&student].beliefs.clone()
    }

    fn learn_episode(
        &mut self,
        student: u32,
        _period: u32,
        beliefs: &[f64],
        stream: &mut RngStream,
    ) -> Result<Vec<usize>, MechanismError> {
        let prob = self.problems[&student].with_beliefs(beliefs.to_vec());
        let strategy = self.strategy_at(student, beliefs)?.clone();
        let state = self
            .states
            .entry(student)
            .or_insert_with(|| LearningState::initial(prob.len()));
        let learned = follow_strategy(&strategy, &prob, state, stream)?;
        Ok(learned.into_iter().map(|(j, _)| j).collect())
    }

    fn final_rol(&mut self, student: u32, beliefs: &[f64]) -> Result<Vec<usize>, MechanismError> {
        let prob = self.problems[&student].with_beliefs(beliefs.to_vec());
        let state = self
            .states
            .entry(student)
            .or_insert_with(|| LearningState::initial(prob.len()));
        Ok(rol_value(state, &prob).1)
    }
}

/// Agent with a fixed ROL per student and no learning; useful for driving the
/// runtime with scripted preferences.
pub struct FixedRolAgent {
    pub rols: BTreeMap<u32, Vec<usize>>,
    pub beliefs: BTreeMap<u32, Vec<f64>>,
}

impl AgentBundle for FixedRolAgent {
    fn initial_beliefs(&self, student: u32) -> Vec<f64> {
        self.beliefs[&student].clone()
    }

    fn learn_episode(
        &mut self,
        _student: u32,
        _period: u32,
        _beliefs: &[f64],
        _stream: &mut RngStream,
    ) -> Result<Vec<usize>, MechanismError> {
        Ok(Vec::new())
    }

    fn final_rol(&mut self, student: u32, _beliefs: &[f64]) -> Result<Vec<usize>, MechanismError> {
        Ok(self.rols[&student].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{ProgramProfile, QualityDistribution, StudentProfile};
    use crate::learning::Utility;

    fn two_point(lo: f64, hi: f64) -> QualityDistribution {
        QualityDistribution::FiniteDiscrete {
            points: vec![(lo, 0.5), (hi, 0.5)],
        }
    }

    fn toy_market() -> MarketInstance {
        MarketInstance {
            students: vec![
                StudentProfile {
                    id: 1,
                    abitur: 0.8,
                    applications: vec![10, 20],
                },
                StudentProfile {
                    id: 2,
                    abitur: 0.6,
                    applications: vec![10, 20],
                },
            ],
            programs: vec![
                ProgramProfile { id: 10, capacity: 1 },
                ProgramProfile { id: 20, capacity: 1 },
            ],
            rankings: BTreeMap::from([(10, vec![1, 2]), (20, vec![2, 1])]),
        }
    }

    fn theory_agent() -> TheoryAgent {
        let problem = LearningProblem {
            distributions: vec![two_point(-0.2, 0.8), two_point(-0.4, 0.9)],
            beliefs: vec![0.6, 0.6],
            cost: 0.05,
            utility: Utility::Identity,
        };
        TheoryAgent::new(BTreeMap::from([(1, problem.clone()), (2, problem)]))
    }

    #[test]
    fn offer_arrival_derivation_serializes_collisions() {
        let m = toy_market();
        // Both programs top-rank a different student, releasing in period 1.
        let schedule = OfferSchedule {
            release_period: BTreeMap::from([(10, 1), (20, 1)]),
        };
        let arrivals = derive_offer_arrival(&m, &schedule).unwrap();
        assert_eq!(arrivals[&1].entries, vec![1, 3]);
        assert_eq!(arrivals[&2].entries, vec![3, 1]);

        // A single program offering to its top two applicants.
        let m2 = MarketInstance {
            programs: vec![
                ProgramProfile { id: 10, capacity: 2 },
                ProgramProfile { id: 20, capacity: 0 },
            ],
            ..toy_market()
        };
        let schedule = OfferSchedule {
            release_period: BTreeMap::from([(10, 2)]),
        };
        let arrivals = derive_offer_arrival(&m2, &schedule).unwrap();
        assert_eq!(arrivals[&1].entries, vec![2, 3]);
        assert_eq!(arrivals[&2].entries, vec![2, 3]);
    }

    #[test]
    fn overflowing_schedule_is_rejected() {
        let m = toy_market();
        let schedule = OfferSchedule {
            release_period: BTreeMap::from([(10, 5)]),
        };
        assert!(matches!(
            derive_offer_arrival(&m, &schedule),
            Err(MechanismError::Schedule(_))
        ));
    }

    #[test]
    fn empty_schedule_makes_mechanisms_agree() {
        let m = toy_market();
        let schedule = OfferSchedule::default();
        let mut outcomes = Vec::new();
        for kind in MechanismKind::ALL {
            let mut agent = theory_agent();
            let mut stream = RngStream::root(11).fork(0);
            let run = run_mechanism(kind, &m, &schedule, &mut agent, &mut stream).unwrap();
            outcomes.push((run.rols, run.matching));
        }
        assert_eq!(outcomes[0], outcomes[1]);
        assert_eq!(outcomes[1], outcomes[2]);
    }

    #[test]
    fn single_common_offer_period_aligns_dosv_and_hybrid() {
        let m = toy_market();
        let schedule = OfferSchedule {
            release_period: BTreeMap::from([(10, 1), (20, 1)]),
        };
        let mut runs = Vec::new();
        for kind in [MechanismKind::Dosv, MechanismKind::Hybrid] {
            let mut agent = theory_agent();
            let mut stream = RngStream::root(3).fork(0);
            runs.push(run_mechanism(kind, &m, &schedule, &mut agent, &mut stream).unwrap());
        }
        assert_eq!(runs[0].rols, runs[1].rols);
        assert_eq!(runs[0].matching, runs[1].matching);
        assert_eq!(runs[0].events, runs[1].events);
    }

    #[test]
    fn hybrid_rejects_split_release_periods() {
        let m = toy_market();
        let schedule = OfferSchedule {
            release_period: BTreeMap::from([(10, 1), (20, 2)]),
        };
        let mut agent = theory_agent();
        let mut stream = RngStream::root(1).fork(0);
        let run = run_mechanism(MechanismKind::Hybrid, &m, &schedule, &mut agent, &mut stream);
        assert!(matches!(run, Err(MechanismError::Schedule(_))));
    }

    #[test]
    fn held_offer_survives_final_round() {
        // Student 1 gets an early offer from 10 and lists it first; she must
        // keep it in the final match.
        let m = toy_market();
        let schedule = OfferSchedule {
            release_period: BTreeMap::from([(10, 1)]),
        };
        let mut agent = FixedRolAgent {
            rols: BTreeMap::from([(1, vec![0, 1]), (2, vec![0, 1])]),
            beliefs: BTreeMap::from([(1, vec![0.5, 0.5]), (2, vec![0.5, 0.5])]),
        };
        let mut stream = RngStream::root(1).fork(0);
        let run = run_mechanism(MechanismKind::Dosv, &m, &schedule, &mut agent, &mut stream).unwrap();
        assert_eq!(run.matching.program_of(1), Some(10));
        assert_eq!(run.matching.program_of(2), Some(20));
        assert!(run
            .events
            .events
            .iter()
            .any(|e| e.kind == EventKind::Offer && e.student == 1 && e.program == Some(10)));
    }
}

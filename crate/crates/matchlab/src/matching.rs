//! Program-proposing deferred acceptance, its variant that starts from
//! tentatively held offers, stability checking, ex-post feasibility, a random
//! serial dictatorship for clearing leftover seats, and a brute-force stable-
//! matching enumerator used as a test oracle.
//!
//! Programs propose down their rankings; each student tentatively keeps the
//! offer ranked highest on her rank-order list (ROL) and rejects the rest. A
//! program never proposes to the same student twice. The algorithm stops when
//! no program can extend another offer, which yields the program-optimal
//! stable matching.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::market::{validate_market, MarketError, MarketInstance};
use crate::rng::RngStream;

/// Student ROLs: student id → program ids, most preferred first.
pub type RolMap = BTreeMap<u32, Vec<u32>>;

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("market failed validation: {0}")]
    InvalidMarket(String),
    #[error("student {student} lists program {program} she did not apply to")]
    RolOutsideApplications { student: u32, program: u32 },
    #[error("student {student} lists program {program} twice")]
    RolDuplicate { student: u32, program: u32 },
    #[error("held offer ({student}, {program}) was never extended per the exhausted sets")]
    HeldWithoutOffer { student: u32, program: u32 },
    #[error("market too large for enumeration: {students} students x {programs} programs")]
    TooLargeForEnumeration { students: usize, programs: usize },
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// An assignment of students to programs; unassigned students are absent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Matching {
    pub assignment: BTreeMap<u32, u32>,
}

impl Matching {
    pub fn program_of(&self, student: u32) -> Option<u32> {
        self.assignment.get(&student).copied()
    }

    /// Students admitted by each program, in the program's ranking order.
    pub fn admitted_by_program(&self, m: &MarketInstance) -> BTreeMap<u32, Vec<u32>> {
        let mut by_program: BTreeMap<u32, Vec<u32>> =
            m.programs.iter().map(|p| (p.id, Vec::new())).collect();
        for (&s, &k) in &self.assignment {
            by_program.entry(k).or_default().push(s);
        }
        for (&k, admitted) in by_program.iter_mut() {
            admitted.sort_by_key(|&s| m.rank_of(k, s).unwrap_or(usize::MAX));
        }
        by_program
    }
}

fn check_rols(m: &MarketInstance, rols: &RolMap) -> Result<(), MatchError> {
    let violations = validate_market(m);
    if !violations.is_empty() {
        return Err(MatchError::InvalidMarket(violations[0].to_string()));
    }
    for (&s, rol) in rols {
        let student = m
            .student(s)
            .ok_or(MatchError::InvalidMarket(format!("unknown student {s}")))?;
        let mut seen = BTreeSet::new();
        for &k in rol {
            if !student.applications.contains(&k) {
                return Err(MatchError::RolOutsideApplications {
                    student: s,
                    program: k,
                });
            }
            if !seen.insert(k) {
                return Err(MatchError::RolDuplicate {
                    student: s,
                    program: k,
                });
            }
        }
    }
    Ok(())
}

fn rol_rank(rols: &RolMap, student: u32, program: u32) -> Option<usize> {
    rols.get(&student)?.iter().position(|&k| k == program)
}

/// Program-proposing deferred acceptance from an empty state.
pub fn gs_program_proposing(m: &MarketInstance, rols: &RolMap) -> Result<Matching, MatchError> {
    gs_with_held_offers(m, rols, &BTreeMap::new(), &BTreeMap::new())
}

/// Program-proposing deferred acceptance that starts with some offers already
/// held and some students already offered to.
///
/// `held` maps student → program whose offer she tentatively holds; the held
/// seat counts against the program's capacity from the start. `exhausted`
/// maps program → students it has already offered to; those students can
/// never receive the same offer again. Every held offer must appear in the
/// exhausted sets. A held student whose final ROL omits the program rejects
/// it immediately. No student ends up worse, by her ROL, than the offer she
/// entered with.
pub fn gs_with_held_offers(
    m: &MarketInstance,
    rols: &RolMap,
    held: &BTreeMap<u32, u32>,
    exhausted: &BTreeMap<u32, BTreeSet<u32>>,
) -> Result<Matching, MatchError> {
    check_rols(m, rols)?;
    for (&s, &k) in held {
        if !exhausted.get(&k).is_some_and(|set| set.contains(&s)) {
            return Err(MatchError::HeldWithoutOffer {
                student: s,
                program: k,
            });
        }
    }

    let mut offered: BTreeMap<u32, BTreeSet<u32>> = exhausted.clone();
    let mut holding: BTreeMap<u32, u32> = BTreeMap::new();
    let mut held_count: BTreeMap<u32, u32> = m.programs.iter().map(|p| (p.id, 0)).collect();
    for (&s, &k) in held {
        if rol_rank(rols, s, k).is_some() {
            holding.insert(s, k);
            *held_count.entry(k).or_insert(0) += 1;
        }
    }

    let mut cursor: BTreeMap<u32, usize> = m.programs.iter().map(|p| (p.id, 0)).collect();
    loop {
        // Each program tops up to capacity among students never offered to.
        let mut round: Vec<(u32, u32)> = Vec::new();
        for p in &m.programs {
            let ranking = match m.rankings.get(&p.id) {
                Some(r) => r,
                None => continue,
            };
            let mut free = p.capacity.saturating_sub(held_count[&p.id]);
            let cur = cursor.get_mut(&p.id).unwrap();
            while free > 0 && *cur < ranking.len() {
                let s = ranking[*cur];
                *cur += 1;
                if offered.get(&p.id).is_some_and(|set| set.contains(&s)) {
                    continue;
                }
                offered.entry(p.id).or_default().insert(s);
                round.push((s, p.id));
                free -= 1;
            }
        }
        if round.is_empty() {
            break;
        }

        // Students keep the best offer on their ROL and reject the rest.
        let mut incoming: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (s, k) in round {
            incoming.entry(s).or_default().push(k);
        }
        for (&s, offers) in &incoming {
            let mut best = holding.get(&s).copied();
            let mut best_rank = best.and_then(|k| rol_rank(rols, s, k));
            for &k in offers {
                let rank = rol_rank(rols, s, k);
                let better = match (rank, best_rank) {
                    (None, _) => false,
                    (Some(_), None) => true,
                    (Some(r), Some(b)) => r < b,
                };
                if better {
                    if let Some(old) = best {
                        *held_count.get_mut(&old).unwrap() -= 1;
                    }
                    best = Some(k);
                    best_rank = rank;
                    *held_count.get_mut(&k).unwrap() += 1;
                }
            }
            match best {
                Some(k) => {
                    holding.insert(s, k);
                }
                None => {
                    holding.remove(&s);
                }
            }
        }
    }

    Ok(Matching {
        assignment: holding,
    })
}

/// Why a (student, program) pair blocks a matching.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockReason {
    /// The program has a free seat and the student prefers it.
    FreeSeat,
    /// The program prefers the student to one of its admits.
    PrefersStudent,
    /// The student is assigned to a program absent from her ROL.
    AssignedUnlisted,
    /// The program admitted a student absent from its ranking.
    AdmittedUnranked,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockingPair {
    pub student: u32,
    pub program: u32,
    pub reason: BlockReason,
}

/// Checks pairwise stability of `matching` with respect to the students'
/// ROLs and the programs' rankings. Returns all blocking pairs found.
pub fn is_stable(
    m: &MarketInstance,
    rols: &RolMap,
    matching: &Matching,
) -> (bool, Vec<BlockingPair>) {
    let admitted = matching.admitted_by_program(m);
    let mut blocking = Vec::new();

    for (&k, students) in &admitted {
        for &s in students {
            if m.rank_of(k, s).is_none() {
                blocking.push(BlockingPair {
                    student: s,
                    program: k,
                    reason: BlockReason::AdmittedUnranked,
                });
            }
        }
    }

    for student in &m.students {
        let s = student.id;
        let assigned = matching.program_of(s);
        let assigned_rank = assigned.and_then(|k| rol_rank(rols, s, k));
        if let Some(k) = assigned {
            if assigned_rank.is_none() {
                blocking.push(BlockingPair {
                    student: s,
                    program: k,
                    reason: BlockReason::AssignedUnlisted,
                });
            }
        }
        let Some(rol) = rols.get(&s) else { continue };
        for (rank, &k) in rol.iter().enumerate() {
            if assigned_rank.is_some_and(|a| rank >= a) {
                break;
            }
            let Some(my_rank) = m.rank_of(k, s) else {
                continue;
            };
            let admits = &admitted[&k];
            if (admits.len() as u32) < m.capacity(k) {
                blocking.push(BlockingPair {
                    student: s,
                    program: k,
                    reason: BlockReason::FreeSeat,
                });
            } else if admits
                .iter()
                .any(|&other| m.rank_of(k, other).is_none_or(|r| r > my_rank))
            {
                blocking.push(BlockingPair {
                    student: s,
                    program: k,
                    reason: BlockReason::PrefersStudent,
                });
            }
        }
    }
    (blocking.is_empty(), blocking)
}

/// Programs feasible to each student after the fact: those she applied to
/// and is ranked by, that either left a seat unfilled or admitted someone
/// the program ranks below her.
pub fn compute_expost_feasible(
    m: &MarketInstance,
    matching: &Matching,
) -> BTreeMap<u32, BTreeSet<u32>> {
    let admitted = matching.admitted_by_program(m);
    let worst_rank: BTreeMap<u32, Option<usize>> = admitted
        .iter()
        .map(|(&k, students)| {
            let worst = students.iter().filter_map(|&s| m.rank_of(k, s)).max();
            (k, worst)
        })
        .collect();

    let mut out = BTreeMap::new();
    for student in &m.students {
        let mut feasible = BTreeSet::new();
        for &k in &student.applications {
            let Some(my_rank) = m.rank_of(k, student.id) else {
                continue;
            };
            let filled = admitted.get(&k).map_or(0, |a| a.len()) as u32;
            let undersubscribed = filled < m.capacity(k);
            let above_cutoff = worst_rank
                .get(&k)
                .copied()
                .flatten()
                .is_some_and(|worst| my_rank <= worst);
            if undersubscribed || above_cutoff {
                feasible.insert(k);
            }
        }
        out.insert(student.id, feasible);
    }
    out
}

/// Random serial dictatorship over leftover seats: students are ordered
/// uniformly at random, and each takes the first program in her application
/// list with a seat still free. Returns the assignments made.
pub fn clearing_rsd(
    m: &MarketInstance,
    remaining_students: &[u32],
    remaining_seats: &BTreeMap<u32, u32>,
    stream: &mut RngStream,
) -> Vec<(u32, u32)> {
    let mut order: Vec<u32> = remaining_students.to_vec();
    stream.shuffle(&mut order);
    let mut seats = remaining_seats.clone();
    let mut out = Vec::new();
    for s in order {
        let Some(student) = m.student(s) else { continue };
        for &k in &student.applications {
            if seats.get(&k).copied().unwrap_or(0) > 0 {
                *seats.get_mut(&k).unwrap() -= 1;
                out.push((s, k));
                break;
            }
        }
    }
    out.sort_unstable();
    out
}

/// Enumerates every stable matching by exhaustive search. Only intended for
/// tiny markets; errors above 8 students or 5 programs.
pub fn enumerate_stable_matchings(
    m: &MarketInstance,
    rols: &RolMap,
) -> Result<Vec<Matching>, MatchError> {
    if m.students.len() > 8 || m.programs.len() > 5 {
        return Err(MatchError::TooLargeForEnumeration {
            students: m.students.len(),
            programs: m.programs.len(),
        });
    }
    check_rols(m, rols)?;

    let students: Vec<u32> = m.students.iter().map(|s| s.id).collect();
    // A student can only ever be assigned a program she lists and that ranks her.
    let options: Vec<Vec<Option<u32>>> = students
        .iter()
        .map(|&s| {
            let mut opts: Vec<Option<u32>> = vec![None];
            if let Some(rol) = rols.get(&s) {
                for &k in rol {
                    if m.rank_of(k, s).is_some() {
                        opts.push(Some(k));
                    }
                }
            }
            opts
        })
        .collect();

    let mut stable = Vec::new();
    let mut filled: BTreeMap<u32, u32> = m.programs.iter().map(|p| (p.id, 0)).collect();
    let mut current: Vec<Option<u32>> = vec![None; students.len()];

    fn recurse(
        m: &MarketInstance,
        rols: &RolMap,
        students: &[u32],
        options: &[Vec<Option<u32>>],
        idx: usize,
        filled: &mut BTreeMap<u32, u32>,
        current: &mut Vec<Option<u32>>,
        stable: &mut Vec<Matching>,
    ) {
        if idx == students.len() {
            let assignment: BTreeMap<u32, u32> = students
                .iter()
                .zip(current.iter())
                .filter_map(|(&s, &k)| k.map(|k| (s, k)))
                .collect();
            let matching = Matching { assignment };
            if is_stable(m, rols, &matching).0 {
                stable.push(matching);
            }
            return;
        }
        for &opt in &options[idx] {
            if let Some(k) = opt {
                if filled[&k] >= m.capacity(k) {
                    continue;
                }
                *filled.get_mut(&k).unwrap() += 1;
            }
            current[idx] = opt;
            recurse(m, rols, students, options, idx + 1, filled, current, stable);
            if let Some(k) = opt {
                *filled.get_mut(&k).unwrap() -= 1;
            }
        }
    }

    recurse(
        m,
        rols,
        &students,
        &options,
        0,
        &mut filled,
        &mut current,
        &mut stable,
    );
    Ok(stable)
}

// --- matching CSV ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatchRow {
    student_id: u32,
    program_id: u32,
}

pub fn write_matching(matching: &Matching, path: &Path) -> Result<(), MarketError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    for (&s, &k) in &matching.assignment {
        w.serialize(MatchRow {
            student_id: s,
            program_id: k,
        })
        .map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| MarketError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_matching(path: &Path) -> Result<Matching, MarketError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut assignment = BTreeMap::new();
    for row in r.deserialize::<MatchRow>() {
        let row = row.map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
        assignment.insert(row.student_id, row.program_id);
    }
    Ok(Matching { assignment })
}

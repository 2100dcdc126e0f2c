//! Closed-form analysis of a two-university admission market with costly
//! quality inspection.
//!
//! A student faces two universities with independent qualities
//! `X_i ~ U(mu_i - 1/2, mu_i + 1/2)` (university 1 has the higher mean) and
//! admission chances she resolves only when an early offer arrives.
//! Inspecting a university's quality costs `cost` per inspection. For each
//! admission procedure and each early-offer history this module derives the
//! inspection plan a rational student follows — which university she inspects
//! first, the cutoff below which she also inspects the second, and the
//! admission beliefs her final outcome is scored at — and evaluates the
//! plan's inspection probabilities, top-of-list probabilities, and expected
//! payoff by exact piecewise integration (midpoint rule on linear pieces,
//! Simpson's rule on quadratic pieces). A sharded Monte Carlo oracle
//! cross-checks every closed-form quantity.

use std::path::Path;

use rayon::prelude::*;

use crate::market::MarketError;
use crate::mechanism::MechanismKind;
use crate::rng::RngStream;

/// Benchmark inspection cost: the midpoint of the admissible cost interval
/// at the benchmark means and beliefs.
pub const DEFAULT_COST: f64 = 3339.0 / 65536.0;

#[derive(Debug, thiserror::Error)]
pub enum TwoUnivError {
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("inspection cost {cost} outside admissible interval ({lo}, {hi})")]
    InadmissibleCost { cost: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// Market primitives: quality means, prior admission beliefs, and the
/// per-inspection cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoUnivParams {
    pub mu1: f64,
    pub mu2: f64,
    pub p1: f64,
    pub p2: f64,
    pub cost: f64,
}

impl TwoUnivParams {
    /// Benchmark calibration: means 1/16 and 1/32, prior beliefs 9/16, cost
    /// at the midpoint of the admissible interval.
    pub fn benchmark() -> Self {
        Self {
            mu1: 1.0 / 16.0,
            mu2: 1.0 / 32.0,
            p1: 9.0 / 16.0,
            p2: 9.0 / 16.0,
            cost: DEFAULT_COST,
        }
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = cost;
        self
    }

    fn mu(&self, univ: usize) -> f64 {
        if univ == 0 {
            self.mu1
        } else {
            self.mu2
        }
    }

    fn support(&self, univ: usize) -> (f64, f64) {
        let mu = self.mu(univ);
        (mu - 0.5, mu + 0.5)
    }

    /// Checks means and beliefs but not the cost.
    pub fn validate_base(&self) -> Result<(), TwoUnivError> {
        for (label, v) in [("mu1", self.mu1), ("mu2", self.mu2)] {
            if !v.is_finite() {
                return Err(TwoUnivError::Invalid(format!("{label} must be finite")));
            }
        }
        if self.mu1 <= self.mu2 {
            return Err(TwoUnivError::Invalid(format!(
                "university 1 must have the higher mean quality (mu1 = {}, mu2 = {})",
                self.mu1, self.mu2
            )));
        }
        for (label, p) in [("p1", self.p1), ("p2", self.p2)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(TwoUnivError::Invalid(format!("{label} = {p} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Full validation including admissibility of the inspection cost.
    pub fn validate(&self) -> Result<(), TwoUnivError> {
        self.validate_base()?;
        let (lo, hi) = admissible_cost_interval(self);
        if !(self.cost > lo && self.cost < hi) {
            return Err(TwoUnivError::InadmissibleCost {
                cost: self.cost,
                lo,
                hi,
            });
        }
        Ok(())
    }
}

/// Open interval of inspection costs for which inspecting the first
/// university is always worthwhile, the continuation cutoff is interior, and
/// both stay so at every belief combination an offer history can induce.
pub fn admissible_cost_interval(params: &TwoUnivParams) -> (f64, f64) {
    let l1 = params.mu1 - 0.5;
    let l2 = params.mu2 - 0.5;
    let gap = params.mu1 - params.mu2;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for b1 in [params.p1, 1.0] {
        for b2 in [params.p2, 1.0] {
            lo = lo.max(0.5 * (1.0 - b1) * b2 * l2 * l2);
            lo = lo.max(0.5 * (1.0 - b2) * b1 * l1 * l1 + 0.5 * b1 * b2 * gap * gap);
            hi = hi.min(0.5 * b2 * l2 * l2);
            hi = hi.min(0.5 * b1 * l1 * l1);
        }
    }
    (lo, hi)
}

/// `n` evenly spaced costs strictly inside the admissible interval.
pub fn admissible_cost_grid(params: &TwoUnivParams, n: usize) -> Result<Vec<f64>, TwoUnivError> {
    params.validate_base()?;
    let (lo, hi) = admissible_cost_interval(params);
    if !(hi > lo) {
        return Err(TwoUnivError::Invalid(format!(
            "admissible cost interval ({lo}, {hi}) is empty"
        )));
    }
    let step = (hi - lo) / (n as f64 + 1.0);
    Ok((1..=n).map(|i| lo + i as f64 * step).collect())
}

/// Early-offer history over the two universities, by arrival order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ArrivalCase {
    NoOffer,
    Offer1,
    Offer2,
    Offers12,
    Offers21,
}

impl ArrivalCase {
    pub const ALL: [ArrivalCase; 5] = [
        ArrivalCase::NoOffer,
        ArrivalCase::Offer1,
        ArrivalCase::Offer2,
        ArrivalCase::Offers12,
        ArrivalCase::Offers21,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ArrivalCase::NoOffer => "no_offer",
            ArrivalCase::Offer1 => "offer_1",
            ArrivalCase::Offer2 => "offer_2",
            ArrivalCase::Offers12 => "offers_1_2",
            ArrivalCase::Offers21 => "offers_2_1",
        }
    }

    /// Admission beliefs once the whole history has arrived.
    pub fn final_beliefs(&self, params: &TwoUnivParams) -> (f64, f64) {
        match self {
            ArrivalCase::NoOffer => (params.p1, params.p2),
            ArrivalCase::Offer1 => (1.0, params.p2),
            ArrivalCase::Offer2 => (params.p1, 1.0),
            ArrivalCase::Offers12 | ArrivalCase::Offers21 => (1.0, 1.0),
        }
    }

    /// Admission beliefs when the first offer of the history lands (priors
    /// if it never does).
    pub fn first_arrival_beliefs(&self, params: &TwoUnivParams) -> (f64, f64) {
        match self {
            ArrivalCase::NoOffer => (params.p1, params.p2),
            ArrivalCase::Offer1 | ArrivalCase::Offers12 => (1.0, params.p2),
            ArrivalCase::Offer2 | ArrivalCase::Offers21 => (params.p1, 1.0),
        }
    }

    /// Whether a second offer lands after the first one was acted upon.
    pub fn has_followup_offer(&self) -> bool {
        matches!(self, ArrivalCase::Offers12 | ArrivalCase::Offers21)
    }
}

impl std::fmt::Display for ArrivalCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Which university is inspected first, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnSequence {
    FirstU1,
    FirstU2,
    Neither,
}

impl LearnSequence {
    /// Zero-based (first, other) university indices.
    pub fn first_other(&self) -> Option<(usize, usize)> {
        match self {
            LearnSequence::FirstU1 => Some((0, 1)),
            LearnSequence::FirstU2 => Some((1, 0)),
            LearnSequence::Neither => None,
        }
    }
}

/// Resolved inspection plan for one mechanism and offer history: the
/// inspection order, the cutoff on the first observed quality below which
/// the second university is also inspected, and the admission beliefs the
/// final outcome is evaluated at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CasePlan {
    pub sequence: LearnSequence,
    pub threshold: Option<f64>,
    pub decision_beliefs: (f64, f64),
    pub scoring_beliefs: (f64, f64),
}

fn belief(b: (f64, f64), univ: usize) -> f64 {
    if univ == 0 {
        b.0
    } else {
        b.1
    }
}

/// Cutoff on the first-inspected quality: inspecting the other university is
/// worthwhile exactly when the observed draw falls below this value.
pub fn inspection_threshold(
    params: &TwoUnivParams,
    first: usize,
    beliefs: (f64, f64),
) -> f64 {
    let other = 1 - first;
    let bf = belief(beliefs, first);
    let bo = belief(beliefs, other);
    let lo = params.mu(other) - 0.5;
    let inner = (2.0 * params.cost - (1.0 - bf) * bo * lo * lo) / (bf * bo);
    debug_assert!(inner > 0.0, "cutoff undefined at cost {}", params.cost);
    params.mu(other) + 0.5 - inner.sqrt()
}

// ---------------------------------------------------------------------------
// Exact piecewise integration.

fn split_segments(lo: f64, hi: f64, cuts: &[f64]) -> Vec<(f64, f64)> {
    let mut pts: Vec<f64> = vec![lo, hi];
    pts.extend(cuts.iter().copied().filter(|c| *c > lo && *c < hi));
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.windows(2)
        .map(|w| (w[0], w[1]))
        .filter(|(a, b)| b > a)
        .collect()
}

/// Exact for integrands linear on each segment.
fn integrate_linear(lo: f64, hi: f64, cuts: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    split_segments(lo, hi, cuts)
        .into_iter()
        .map(|(a, b)| (b - a) * f(0.5 * (a + b)))
        .sum()
}

/// Exact for integrands quadratic (indeed cubic) on each segment.
fn integrate_quadratic(lo: f64, hi: f64, cuts: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    split_segments(lo, hi, cuts)
        .into_iter()
        .map(|(a, b)| (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b)))
        .sum()
}

// ---------------------------------------------------------------------------
// Plan payoffs.

/// Expected payoff of ranking the positive-value universities best first:
/// the best feasible entry is attended. Values at or below zero are left off
/// the list; ties rank university 1 first.
fn two_box_value(v1: f64, v2: f64, b1: f64, b2: f64) -> f64 {
    if v1 <= 0.0 && v2 <= 0.0 {
        0.0
    } else if v2 <= 0.0 {
        b1 * v1
    } else if v1 <= 0.0 {
        b2 * v2
    } else if v1 >= v2 {
        b1 * v1 + (1.0 - b1) * b2 * v2
    } else {
        b2 * v2 + (1.0 - b2) * b1 * v1
    }
}

fn value_by_univ(first: usize, x_first: f64, other_value: f64, scoring: (f64, f64)) -> f64 {
    if first == 0 {
        two_box_value(x_first, other_value, scoring.0, scoring.1)
    } else {
        two_box_value(other_value, x_first, scoring.0, scoring.1)
    }
}

/// Expected list value after inspecting both universities, integrating out
/// the second quality; excludes inspection costs.
fn expected_value_learn_other(
    params: &TwoUnivParams,
    first: usize,
    scoring: (f64, f64),
    x_first: f64,
) -> f64 {
    let other = 1 - first;
    let (lo, hi) = params.support(other);
    integrate_linear(lo, hi, &[0.0, x_first], |x_other| {
        value_by_univ(first, x_first, x_other, scoring)
    })
}

/// Expected list value when the other university stays uninspected and is
/// valued at its mean; excludes inspection costs.
fn stop_value_after_first(
    params: &TwoUnivParams,
    first: usize,
    scoring: (f64, f64),
    x_first: f64,
) -> f64 {
    value_by_univ(first, x_first, params.mu(1 - first), scoring)
}

/// Expected list value with neither university inspected.
fn stop_value_unlearned(params: &TwoUnivParams, scoring: (f64, f64)) -> f64 {
    two_box_value(params.mu1, params.mu2, scoring.0, scoring.1)
}

/// Expected payoff net of all inspection costs, conditional on the first
/// inspected quality coming out at `x_first`.
pub fn conditional_payoff(params: &TwoUnivParams, plan: &CasePlan, x_first: f64) -> f64 {
    match plan.sequence.first_other() {
        None => stop_value_unlearned(params, plan.scoring_beliefs),
        Some((first, _)) => {
            let t = plan.threshold.expect("inspection plan without a cutoff");
            if x_first < t {
                expected_value_learn_other(params, first, plan.scoring_beliefs, x_first)
                    - 2.0 * params.cost
            } else {
                stop_value_after_first(params, first, plan.scoring_beliefs, x_first) - params.cost
            }
        }
    }
}

/// Expected payoff of a plan net of all inspection costs, integrating over
/// the first inspected quality. The two branches are integrated separately:
/// when the cutoff was committed at different beliefs than the outcome is
/// scored at, the payoff jumps there, so a shared endpoint must not leak one
/// branch's value into the other's segment.
pub fn conditional_welfare(params: &TwoUnivParams, plan: &CasePlan) -> f64 {
    let Some((first, other)) = plan.sequence.first_other() else {
        return stop_value_unlearned(params, plan.scoring_beliefs);
    };
    let (lo, hi) = params.support(first);
    let (lo_o, hi_o) = params.support(other);
    let t = plan.threshold.expect("inspection plan without a cutoff");
    let cuts = [0.0, params.mu(other), lo_o, hi_o];
    let split = t.clamp(lo, hi);
    let learn = integrate_quadratic(lo, split, &cuts, |x| {
        expected_value_learn_other(params, first, plan.scoring_beliefs, x) - 2.0 * params.cost
    });
    let stop = integrate_quadratic(split, hi, &cuts, |x| {
        stop_value_after_first(params, first, plan.scoring_beliefs, x) - params.cost
    });
    learn + stop
}

fn sequence_value(params: &TwoUnivParams, first: usize, beliefs: (f64, f64)) -> f64 {
    let plan = CasePlan {
        sequence: if first == 0 {
            LearnSequence::FirstU1
        } else {
            LearnSequence::FirstU2
        },
        threshold: Some(inspection_threshold(params, first, beliefs)),
        decision_beliefs: beliefs,
        scoring_beliefs: beliefs,
    };
    conditional_welfare(params, &plan)
}

/// Derives the inspection plan for one mechanism and offer history.
///
/// The inspection order maximizes expected payoff at the beliefs held when
/// the student commits: priors under `Da` (she moves before any offer),
/// first-arrival beliefs under `Dosv`, and end-of-history beliefs under
/// `Hybrid`. Under `Dosv` a follow-up offer lets her revisit the stopping
/// decision at certainty beliefs, which can only widen the cutoff. Outcomes
/// are always scored at end-of-history beliefs.
pub fn case_plan(
    params: &TwoUnivParams,
    kind: MechanismKind,
    case: ArrivalCase,
) -> Result<CasePlan, TwoUnivError> {
    params.validate()?;
    let scoring = case.final_beliefs(params);
    let decision = match kind {
        MechanismKind::Da => (params.p1, params.p2),
        MechanismKind::Dosv => case.first_arrival_beliefs(params),
        MechanismKind::Hybrid => scoring,
    };
    let candidates = [
        (sequence_value(params, 0, decision), LearnSequence::FirstU1),
        (sequence_value(params, 1, decision), LearnSequence::FirstU2),
        (stop_value_unlearned(params, decision), LearnSequence::Neither),
    ];
    let mut best = candidates[0];
    for c in &candidates[1..] {
        if c.0 > best.0 {
            best = *c;
        }
    }
    let sequence = best.1;
    let threshold = sequence.first_other().map(|(first, _)| {
        let t = inspection_threshold(params, first, decision);
        if kind == MechanismKind::Dosv && case.has_followup_offer() {
            t.max(inspection_threshold(params, first, (1.0, 1.0)))
        } else {
            t
        }
    });
    Ok(CasePlan {
        sequence,
        threshold,
        decision_beliefs: decision,
        scoring_beliefs: scoring,
    })
}

/// Probability that each university gets inspected under a plan, in
/// university order.
pub fn learning_probabilities(params: &TwoUnivParams, plan: &CasePlan) -> (f64, f64) {
    let Some((first, _)) = plan.sequence.first_other() else {
        return (0.0, 0.0);
    };
    let t = plan.threshold.expect("inspection plan without a cutoff");
    let (lo, _) = params.support(first);
    let p_other = (t - lo).clamp(0.0, 1.0);
    if first == 0 {
        (1.0, p_other)
    } else {
        (p_other, 1.0)
    }
}

/// Probability that each university ends up top of the student's list, in
/// university order. Only positive values are listed, so the two entries
/// need not sum to one.
pub fn top_rank_probabilities(params: &TwoUnivParams, plan: &CasePlan) -> (f64, f64) {
    let Some((first, other)) = plan.sequence.first_other() else {
        let (v1, v2) = (params.mu1, params.mu2);
        return if v1 <= 0.0 && v2 <= 0.0 {
            (0.0, 0.0)
        } else if v1 >= v2 {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
    };
    let t = plan.threshold.expect("inspection plan without a cutoff");
    let (lo_f, hi_f) = params.support(first);
    let (lo_o, hi_o) = params.support(other);
    let mu_o = params.mu(other);
    let cuts = [t, 0.0, mu_o, lo_o, hi_o];
    let p_first = integrate_linear(lo_f, hi_f, &cuts, |x| {
        if x < t {
            if x > 0.0 {
                (x - lo_o).clamp(0.0, 1.0)
            } else {
                0.0
            }
        } else if x > 0.0 && (mu_o <= 0.0 || x > mu_o) {
            1.0
        } else {
            0.0
        }
    });
    let p_other = integrate_linear(lo_f, hi_f, &cuts, |x| {
        if x < t {
            1.0 - (x.max(0.0) - lo_o).clamp(0.0, 1.0)
        } else if mu_o > 0.0 && x < mu_o {
            1.0
        } else {
            0.0
        }
    });
    if first == 0 {
        (p_first, p_other)
    } else {
        (p_other, p_first)
    }
}

// ---------------------------------------------------------------------------
// Comparative statics.

/// Changes in each university's top-of-list probability caused by its own
/// early offer under the sequential procedure, holding the rest of the offer
/// history fixed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyOfferEffects {
    pub u1_offer1_vs_none: f64,
    pub u1_offers12_vs_offer2: f64,
    pub u1_offers21_vs_offer2: f64,
    pub u2_offer2_vs_none: f64,
    pub u2_offers12_vs_offer1: f64,
    pub u2_offers21_vs_offer1: f64,
}

impl EarlyOfferEffects {
    pub fn as_array(&self) -> [(&'static str, f64); 6] {
        [
            ("offer_1_vs_no_offer", self.u1_offer1_vs_none),
            ("offers_1_2_vs_offer_2", self.u1_offers12_vs_offer2),
            ("offers_2_1_vs_offer_2", self.u1_offers21_vs_offer2),
            ("offer_2_vs_no_offer", self.u2_offer2_vs_none),
            ("offers_1_2_vs_offer_1", self.u2_offers12_vs_offer1),
            ("offers_2_1_vs_offer_1", self.u2_offers21_vs_offer1),
        ]
    }
}

fn dosv_top_ranks(params: &TwoUnivParams) -> Result<[(f64, f64); 5], TwoUnivError> {
    let mut out = [(0.0, 0.0); 5];
    for (i, case) in ArrivalCase::ALL.iter().enumerate() {
        let plan = case_plan(params, MechanismKind::Dosv, *case)?;
        out[i] = top_rank_probabilities(params, &plan);
    }
    Ok(out)
}

pub fn early_offer_effects(params: &TwoUnivParams) -> Result<EarlyOfferEffects, TwoUnivError> {
    let [none, o1, o2, o12, o21] = dosv_top_ranks(params)?;
    Ok(EarlyOfferEffects {
        u1_offer1_vs_none: o1.0 - none.0,
        u1_offers12_vs_offer2: o12.0 - o2.0,
        u1_offers21_vs_offer2: o21.0 - o2.0,
        u2_offer2_vs_none: o2.1 - none.1,
        u2_offers12_vs_offer1: o12.1 - o1.1,
        u2_offers21_vs_offer1: o21.1 - o1.1,
    })
}

/// Change in each university's top-of-list probability from arriving first
/// rather than second when both offers land, under the sequential procedure.
pub fn first_offer_effects(params: &TwoUnivParams) -> Result<(f64, f64), TwoUnivError> {
    let [_, _, _, o12, o21] = dosv_top_ranks(params)?;
    Ok((o12.0 - o21.0, o21.1 - o12.1))
}

/// Expected-payoff gaps between procedures for one offer history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelfareComparison {
    pub case: ArrivalCase,
    pub da: f64,
    pub dosv: f64,
    pub hybrid: f64,
}

impl WelfareComparison {
    pub fn hybrid_minus_dosv(&self) -> f64 {
        self.hybrid - self.dosv
    }

    pub fn dosv_minus_da(&self) -> f64 {
        self.dosv - self.da
    }

    pub fn hybrid_minus_da(&self) -> f64 {
        self.hybrid - self.da
    }
}

pub fn welfare_comparisons(params: &TwoUnivParams) -> Result<Vec<WelfareComparison>, TwoUnivError> {
    let mut out = Vec::with_capacity(ArrivalCase::ALL.len());
    for case in ArrivalCase::ALL {
        let welfare = |kind| -> Result<f64, TwoUnivError> {
            let plan = case_plan(params, kind, case)?;
            Ok(conditional_welfare(params, &plan))
        };
        out.push(WelfareComparison {
            case,
            da: welfare(MechanismKind::Da)?,
            dosv: welfare(MechanismKind::Dosv)?,
            hybrid: welfare(MechanismKind::Hybrid)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reference table.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStatistic {
    LearnProb1,
    LearnProb2,
    TopRank1,
    TopRank2,
    Welfare,
}

impl CellStatistic {
    pub const ALL: [CellStatistic; 5] = [
        CellStatistic::LearnProb1,
        CellStatistic::LearnProb2,
        CellStatistic::TopRank1,
        CellStatistic::TopRank2,
        CellStatistic::Welfare,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            CellStatistic::LearnProb1 => "learn_prob_1",
            CellStatistic::LearnProb2 => "learn_prob_2",
            CellStatistic::TopRank1 => "top_rank_1",
            CellStatistic::TopRank2 => "top_rank_2",
            CellStatistic::Welfare => "welfare",
        }
    }

    /// Scale at which reference values are printed.
    pub fn scale(&self) -> f64 {
        match self {
            CellStatistic::Welfare => 1000.0,
            _ => 100.0,
        }
    }
}

/// One published benchmark value, at its printed scale. A flagged cell is
/// known to disagree with the exact computation at print precision and is
/// adjudicated against the Monte Carlo oracle instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceCell {
    pub mechanism: MechanismKind,
    pub case: ArrivalCase,
    pub statistic: CellStatistic,
    pub printed: f64,
    pub flagged: bool,
}

/// The 75 published benchmark values (3 mechanisms x 5 offer histories x 5
/// statistics). Probabilities are printed x100, expected payoffs x1000.
pub fn reference_cells() -> Vec<ReferenceCell> {
    let printed: [(CellStatistic, [(MechanismKind, [f64; 5]); 3]); 5] = [
        (
            CellStatistic::LearnProb1,
            [
                (MechanismKind::Da, [100.0, 100.0, 100.0, 100.0, 100.0]),
                (MechanismKind::Dosv, [100.0, 100.0, 60.6, 100.0, 71.2]),
                (MechanismKind::Hybrid, [100.0, 100.0, 60.6, 100.0, 100.0]),
            ],
        ),
        (
            CellStatistic::LearnProb2,
            [
                (MechanismKind::Da, [58.0, 58.0, 58.0, 58.0, 58.0]),
                (MechanismKind::Dosv, [58.0, 54.3, 100.0, 65.0, 100.0]),
                (MechanismKind::Hybrid, [58.0, 54.3, 100.0, 65.0, 65.0]),
            ],
        ),
        (
            CellStatistic::TopRank1,
            [
                (MechanismKind::Da, [49.7, 49.7, 49.7, 49.7, 49.7]),
                (MechanismKind::Dosv, [49.7, 51.2, 33.1, 47.2, 37.1]),
                (MechanismKind::Hybrid, [49.7, 51.2, 33.3, 47.2, 47.2]),
            ],
        ),
        (
            CellStatistic::TopRank2,
            [
                (MechanismKind::Da, [29.8, 29.8, 29.8, 29.8, 29.8]),
                (MechanismKind::Dosv, [29.8, 28.3, 46.4, 32.3, 42.4]),
                (MechanismKind::Hybrid, [29.8, 28.3, 46.4, 32.3, 32.3]),
            ],
        ),
        (
            CellStatistic::Welfare,
            [
                (MechanismKind::Da, [56.2, 121.0, 93.3, 154.6, 154.6]),
                (MechanismKind::Dosv, [56.2, 121.1, 110.5, 155.5, 152.3]),
                (MechanismKind::Hybrid, [56.2, 121.1, 110.5, 155.5, 155.5]),
            ],
        ),
    ];
    let mut cells = Vec::with_capacity(75);
    for (statistic, rows) in printed {
        for (mechanism, values) in rows {
            for (case, value) in ArrivalCase::ALL.into_iter().zip(values) {
                let flagged = mechanism == MechanismKind::Hybrid
                    && case == ArrivalCase::Offer2
                    && statistic == CellStatistic::TopRank1;
                cells.push(ReferenceCell {
                    mechanism,
                    case,
                    statistic,
                    printed: value,
                    flagged,
                });
            }
        }
    }
    cells
}

/// Computes one benchmark statistic at natural (unscaled) units.
pub fn cell_value(
    params: &TwoUnivParams,
    mechanism: MechanismKind,
    case: ArrivalCase,
    statistic: CellStatistic,
) -> Result<f64, TwoUnivError> {
    let plan = case_plan(params, mechanism, case)?;
    Ok(match statistic {
        CellStatistic::LearnProb1 => learning_probabilities(params, &plan).0,
        CellStatistic::LearnProb2 => learning_probabilities(params, &plan).1,
        CellStatistic::TopRank1 => top_rank_probabilities(params, &plan).0,
        CellStatistic::TopRank2 => top_rank_probabilities(params, &plan).1,
        CellStatistic::Welfare => conditional_welfare(params, &plan),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellCheck {
    pub cell: ReferenceCell,
    pub computed_scaled: f64,
    pub abs_err: f64,
    pub pass: bool,
}

/// Recomputes every published benchmark value and compares at the printed
/// scale. Flagged cells keep their error but are expected to fail the
/// print-precision comparison.
pub fn check_reference_table(
    params: &TwoUnivParams,
    tol: f64,
) -> Result<Vec<CellCheck>, TwoUnivError> {
    let mut out = Vec::with_capacity(75);
    for cell in reference_cells() {
        let computed = cell_value(params, cell.mechanism, cell.case, cell.statistic)?;
        let computed_scaled = computed * cell.statistic.scale();
        let abs_err = (computed_scaled - cell.printed).abs();
        out.push(CellCheck {
            cell,
            computed_scaled,
            abs_err,
            pass: abs_err <= tol,
        });
    }
    Ok(out)
}

pub fn write_reference_table_csv(path: &Path, checks: &[CellCheck]) -> Result<(), MarketError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    let record = |w: &mut csv::Writer<std::fs::File>, fields: [String; 6]| {
        w.write_record(fields).map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })
    };
    w.write_record(["mechanism", "case", "statistic", "computed", "reference", "abs_err"])
        .map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    for c in checks {
        record(
            &mut w,
            [
                c.cell.mechanism.label().to_string(),
                c.cell.case.label().to_string(),
                c.cell.statistic.label().to_string(),
                c.computed_scaled.to_string(),
                c.cell.printed.to_string(),
                c.abs_err.to_string(),
            ],
        )?;
    }
    w.flush().map_err(|e| MarketError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sign conditions.

#[derive(Clone, Debug, PartialEq)]
pub struct SignCheck {
    pub claim: String,
    pub case: String,
    pub k: f64,
    pub value: f64,
    pub sign_ok: bool,
}

const EQUALITY_TOL: f64 = 1e-9;

/// Evaluates every directional claim about early offers and procedure
/// rankings at the given cost: own early offers raise a university's
/// top-of-list probability, arriving first raises it further, the one-shot
/// release weakly improves on the sequential one (strictly when the
/// lower-mean university's offer lands first), and the sequential procedure
/// beats the offer-free one except on that same history.
pub fn check_sign_conditions(params: &TwoUnivParams) -> Result<Vec<SignCheck>, TwoUnivError> {
    let k = params.cost;
    let mut out = Vec::new();
    let effects = early_offer_effects(params)?;
    for (case, value) in effects.as_array() {
        out.push(SignCheck {
            claim: "early_offer_top_rank".to_string(),
            case: case.to_string(),
            k,
            value,
            sign_ok: value > 0.0,
        });
    }
    let (f1, f2) = first_offer_effects(params)?;
    for (case, value) in [("offers_1_2_vs_offers_2_1", f1), ("offers_2_1_vs_offers_1_2", f2)] {
        out.push(SignCheck {
            claim: "first_offer_top_rank".to_string(),
            case: case.to_string(),
            k,
            value,
            sign_ok: value > 0.0,
        });
    }
    for cmp in welfare_comparisons(params)? {
        let hd = cmp.hybrid_minus_dosv();
        out.push(SignCheck {
            claim: "welfare_order_hybrid_dosv".to_string(),
            case: cmp.case.label().to_string(),
            k,
            value: hd,
            sign_ok: if cmp.case == ArrivalCase::Offers21 {
                hd > 0.0
            } else {
                hd.abs() <= EQUALITY_TOL
            },
        });
        let dd = cmp.dosv_minus_da();
        out.push(SignCheck {
            claim: "welfare_order_dosv_da".to_string(),
            case: cmp.case.label().to_string(),
            k,
            value: dd,
            sign_ok: match cmp.case {
                ArrivalCase::NoOffer => dd.abs() <= EQUALITY_TOL,
                ArrivalCase::Offers21 => dd < 0.0,
                _ => dd > 0.0,
            },
        });
        let ha = cmp.hybrid_minus_da();
        out.push(SignCheck {
            claim: "welfare_order_hybrid_da".to_string(),
            case: cmp.case.label().to_string(),
            k,
            value: ha,
            sign_ok: match cmp.case {
                ArrivalCase::NoOffer => ha.abs() <= EQUALITY_TOL,
                _ => ha > 0.0,
            },
        });
    }
    Ok(out)
}

pub fn write_sign_checks_csv(path: &Path, checks: &[SignCheck]) -> Result<(), MarketError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| MarketError::Csv {
        path: path.display().to_string(),
        source: e,
    })?;
    w.write_record(["claim", "case", "k", "value", "sign_ok"])
        .map_err(|e| MarketError::Csv {
            path: path.display().to_string(),
            source: e,
        })?;
    for c in checks {
        w.write_record([
            c.claim.clone(),
            c.case.clone(),
            c.k.to_string(),
            c.value.to_string(),
            c.sign_ok.to_string(),
        ])
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

// ---------------------------------------------------------------------------
// One university with a near-certain quality.

/// Variant market where university 1's quality is already almost known: its
/// support has half-width below half the inspection cost (so inspecting it
/// never pays) and sits inside (1/2, 1), while university 2's quality is
/// standard uniform on (0, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NarrowSupportParams {
    pub mu1: f64,
    pub half_width: f64,
    pub p1: f64,
    pub p2: f64,
    pub cost: f64,
}

/// Early-offer and first-offer effects in the near-certain-quality market,
/// plus their arrival-probability-weighted average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NarrowSupportEffects {
    pub u1_offer1_vs_none: f64,
    pub u1_offers_vs_offer2: f64,
    pub u2_offer2_vs_none: f64,
    pub u2_offers_vs_offer1: f64,
    pub first_offer_u1: f64,
    pub first_offer_u2: f64,
    pub weighted_average: f64,
}

/// Top-of-list effects of early offers when university 1's quality is
/// near-certain. Inspecting university 2 pays exactly when
/// `b1 * b2 * (1 - mu1)^2 / 2 > cost`; a student who inspects ranks
/// university 2 first with probability `1 - mu1`, and one who does not
/// always ranks university 1 first. Offer histories that leave the
/// inspection decision unchanged therefore produce zero effects, and
/// histories that switch it on move top-rank probability from university 1
/// to university 2.
pub fn narrow_support_effects(
    params: &NarrowSupportParams,
) -> Result<NarrowSupportEffects, TwoUnivError> {
    if !(params.mu1 > 0.5 && params.mu1 < 1.0) {
        return Err(TwoUnivError::Invalid(format!(
            "mu1 = {} must lie in (1/2, 1)",
            params.mu1
        )));
    }
    if !(params.cost > 0.0) {
        return Err(TwoUnivError::Invalid(format!(
            "cost = {} must be positive",
            params.cost
        )));
    }
    if !(params.half_width > 0.0 && params.half_width < params.cost / 2.0) {
        return Err(TwoUnivError::Invalid(format!(
            "half_width = {} must lie in (0, cost / 2)",
            params.half_width
        )));
    }
    if params.mu1 - params.half_width <= 0.5 || params.mu1 + params.half_width >= 1.0 {
        return Err(TwoUnivError::Invalid(
            "university 1's support must stay inside (1/2, 1)".to_string(),
        ));
    }
    for (label, p) in [("p1", params.p1), ("p2", params.p2)] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(TwoUnivError::Invalid(format!("{label} = {p} outside (0, 1]")));
        }
    }

    let tops = |b1: f64, b2: f64| -> (f64, f64) {
        let learns = b1 * b2 * (1.0 - params.mu1) * (1.0 - params.mu1) / 2.0 > params.cost;
        if learns {
            (params.mu1, 1.0 - params.mu1)
        } else {
            (1.0, 0.0)
        }
    };
    let none = tops(params.p1, params.p2);
    let o1 = tops(1.0, params.p2);
    let o2 = tops(params.p1, 1.0);
    let both = tops(1.0, 1.0);

    let effects = [
        (o1.0 - none.0, params.p1 * (1.0 - params.p2)),
        (both.0 - o2.0, params.p1 * params.p2),
        (o2.1 - none.1, (1.0 - params.p1) * params.p2),
        (both.1 - o1.1, params.p1 * params.p2),
    ];
    let weight_sum: f64 = effects.iter().map(|(_, w)| w).sum();
    let weighted_average = effects.iter().map(|(e, w)| e * w).sum::<f64>() / weight_sum;
    Ok(NarrowSupportEffects {
        u1_offer1_vs_none: effects[0].0,
        u1_offers_vs_offer2: effects[1].0,
        u2_offer2_vs_none: effects[2].0,
        u2_offers_vs_offer1: effects[3].0,
        first_offer_u1: both.0 - both.0,
        first_offer_u2: both.1 - both.1,
        weighted_average,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo oracle.

/// Monte Carlo estimates of every plan statistic, with standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub draws: u64,
    pub learn1: f64,
    pub learn1_se: f64,
    pub learn2: f64,
    pub learn2_se: f64,
    pub top1: f64,
    pub top1_se: f64,
    pub top2: f64,
    pub top2_se: f64,
    pub welfare: f64,
    pub welfare_se: f64,
}

impl McEstimate {
    /// (estimate, standard error) for one statistic.
    pub fn statistic(&self, statistic: CellStatistic) -> (f64, f64) {
        match statistic {
            CellStatistic::LearnProb1 => (self.learn1, self.learn1_se),
            CellStatistic::LearnProb2 => (self.learn2, self.learn2_se),
            CellStatistic::TopRank1 => (self.top1, self.top1_se),
            CellStatistic::TopRank2 => (self.top2, self.top2_se),
            CellStatistic::Welfare => (self.welfare, self.welfare_se),
        }
    }
}

const MC_SHARD: u64 = 65536;

/// Simulates a plan draw by draw: both qualities and both admission lotteries
/// are realized each sample, the plan decides what gets inspected, the list
/// ranks positive values of inspected qualities and prior means, and the
/// payoff is the true quality of the best feasible entry minus inspection
/// costs. Work is sharded so results are identical for any thread count.
pub fn mc_oracle(
    params: &TwoUnivParams,
    kind: MechanismKind,
    case: ArrivalCase,
    draws: u64,
    stream: &RngStream,
) -> Result<McEstimate, TwoUnivError> {
    if draws == 0 {
        return Err(TwoUnivError::Invalid("draws must be positive".to_string()));
    }
    let plan = case_plan(params, kind, case)?;
    let supports = [params.support(0), params.support(1)];
    let mus = [params.mu1, params.mu2];
    let scoring = [plan.scoring_beliefs.0, plan.scoring_beliefs.1];
    let n_shards = draws.div_ceil(MC_SHARD);

    let partials: Vec<[f64; 6]> = (0..n_shards)
        .into_par_iter()
        .map(|shard| {
            let mut st = stream.fork(shard);
            let n = MC_SHARD.min(draws - shard * MC_SHARD);
            let mut acc = [0.0f64; 6];
            for _ in 0..n {
                let x = [
                    st.uniform_range(supports[0].0, supports[0].1),
                    st.uniform_range(supports[1].0, supports[1].1),
                ];
                let admit = [
                    st.uniform_open01() < scoring[0],
                    st.uniform_open01() < scoring[1],
                ];
                let mut learned = [false, false];
                if let Some((first, other)) = plan.sequence.first_other() {
                    learned[first] = true;
                    if x[first] < plan.threshold.expect("inspection plan without a cutoff") {
                        learned[other] = true;
                    }
                }
                let values = [
                    if learned[0] { x[0] } else { mus[0] },
                    if learned[1] { x[1] } else { mus[1] },
                ];
                let mut rol: Vec<usize> = (0..2).filter(|&i| values[i] > 0.0).collect();
                rol.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
                let inspections = learned.iter().filter(|&&l| l).count() as f64;
                let mut payoff = -params.cost * inspections;
                if let Some(&winner) = rol.iter().find(|&&i| admit[i]) {
                    payoff += x[winner];
                }
                acc[0] += learned[0] as u64 as f64;
                acc[1] += learned[1] as u64 as f64;
                if let Some(&top) = rol.first() {
                    acc[2] += (top == 0) as u64 as f64;
                    acc[3] += (top == 1) as u64 as f64;
                }
                acc[4] += payoff;
                acc[5] += payoff * payoff;
            }
            acc
        })
        .collect();

    let mut total = [0.0f64; 6];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    let n = draws as f64;
    let prop = |sum: f64| {
        let mean = sum / n;
        (mean, (mean * (1.0 - mean) / n).sqrt())
    };
    let (learn1, learn1_se) = prop(total[0]);
    let (learn2, learn2_se) = prop(total[1]);
    let (top1, top1_se) = prop(total[2]);
    let (top2, top2_se) = prop(total[3]);
    let welfare = total[4] / n;
    let welfare_se = ((total[5] / n - welfare * welfare).max(0.0) / n).sqrt();
    Ok(McEstimate {
        draws,
        learn1,
        learn1_se,
        learn2,
        learn2_se,
        top1,
        top1_se,
        top2,
        top2_se,
        welfare,
        welfare_se,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlaggedCellCheck {
    pub cell: ReferenceCell,
    pub computed: f64,
    pub mc_value: f64,
    pub mc_se: f64,
    pub within_3_sigma: bool,
}

/// Adjudicates each flagged reference cell against the Monte Carlo oracle:
/// the exact computation should sit within three standard errors of the
/// simulated value even where it disagrees with the printed one.
pub fn check_flagged_cells_mc(
    params: &TwoUnivParams,
    draws: u64,
    stream: &RngStream,
) -> Result<Vec<FlaggedCellCheck>, TwoUnivError> {
    let mut out = Vec::new();
    for (i, cell) in reference_cells().into_iter().filter(|c| c.flagged).enumerate() {
        let computed = cell_value(params, cell.mechanism, cell.case, cell.statistic)?;
        let est = mc_oracle(
            params,
            cell.mechanism,
            cell.case,
            draws,
            &stream.fork(i as u64),
        )?;
        let (mc_value, mc_se) = est.statistic(cell.statistic);
        out.push(FlaggedCellCheck {
            cell,
            computed,
            mc_value,
            mc_se,
            within_3_sigma: (computed - mc_value).abs() <= 3.0 * mc_se,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const K: f64 = DEFAULT_COST;

    fn grid_costs() -> Vec<f64> {
        let params = TwoUnivParams::benchmark();
        let (lo, hi) = admissible_cost_interval(&params);
        vec![K, lo + 0.3 * (hi - lo), lo + 0.77 * (hi - lo)]
    }

    #[test]
    fn benchmark_cost_interval_is_exact() {
        let params = TwoUnivParams::benchmark();
        let (lo, hi) = admissible_cost_interval(&params);
        assert_eq!(lo, 1575.0 / 32768.0);
        assert_eq!(hi, 1764.0 / 32768.0);
        assert_eq!(params.cost, (lo + hi) / 2.0);
        params.validate().unwrap();
        assert!(matches!(
            params.with_cost(hi).validate(),
            Err(TwoUnivError::InadmissibleCost { .. })
        ));
        let grid = admissible_cost_grid(&params, 101).unwrap();
        assert_eq!(grid.len(), 101);
        assert!(grid.iter().all(|&k| k > lo && k < hi));
    }

    #[test]
    fn thresholds_match_closed_forms() {
        let params = TwoUnivParams::benchmark();
        let p0 = (params.p1, params.p2);
        let s2k = (2.0 * K).sqrt();
        let cases = [
            (0, p0, 17.0 / 32.0 - (16.0 / 9.0) * (2.0 * K - 14175.0 / 262144.0).sqrt(), 0.14247),
            (0, (1.0, params.p2), 17.0 / 32.0 - (4.0 / 3.0) * s2k, 0.10563),
            (0, (1.0, 1.0), 17.0 / 32.0 - s2k, 0.21203),
            (1, (params.p1, 1.0), 9.0 / 16.0 - (4.0 / 3.0) * s2k, 0.13688),
            (1, (1.0, 1.0), 9.0 / 16.0 - s2k, 0.24328),
        ];
        for (first, beliefs, closed, printed) in cases {
            let t = inspection_threshold(&params, first, beliefs);
            assert_abs_diff_eq!(t, closed, epsilon = 1e-15);
            assert_abs_diff_eq!(t, printed, epsilon = 1e-5);
        }
    }

    #[test]
    fn threshold_is_the_branch_indifference_point() {
        let params = TwoUnivParams::benchmark();
        let combos = [
            (0usize, (params.p1, params.p2)),
            (0, (1.0, params.p2)),
            (0, (1.0, 1.0)),
            (1, (params.p1, 1.0)),
            (1, (1.0, 1.0)),
            (1, (params.p1, params.p2)),
        ];
        for (first, beliefs) in combos {
            let t = inspection_threshold(&params, first, beliefs);
            let learn = expected_value_learn_other(&params, first, beliefs, t) - params.cost;
            let stop = stop_value_after_first(&params, first, beliefs, t);
            assert_abs_diff_eq!(learn, stop, epsilon = 1e-12);
        }
    }

    #[test]
    fn plans_follow_offer_histories() {
        let params = TwoUnivParams::benchmark();
        for case in ArrivalCase::ALL {
            let plan = case_plan(&params, MechanismKind::Da, case).unwrap();
            assert_eq!(plan.sequence, LearnSequence::FirstU1);
            assert_abs_diff_eq!(
                plan.threshold.unwrap(),
                inspection_threshold(&params, 0, (params.p1, params.p2)),
                epsilon = 0.0
            );
            assert_eq!(plan.scoring_beliefs, case.final_beliefs(&params));
        }
        let expect = [
            (ArrivalCase::NoOffer, LearnSequence::FirstU1, (params.p1, params.p2)),
            (ArrivalCase::Offer1, LearnSequence::FirstU1, (1.0, params.p2)),
            (ArrivalCase::Offer2, LearnSequence::FirstU2, (params.p1, 1.0)),
            (ArrivalCase::Offers12, LearnSequence::FirstU1, (1.0, 1.0)),
            (ArrivalCase::Offers21, LearnSequence::FirstU2, (1.0, 1.0)),
        ];
        for (case, seq, threshold_beliefs) in expect {
            let plan = case_plan(&params, MechanismKind::Dosv, case).unwrap();
            assert_eq!(plan.sequence, seq, "dosv {case}");
            let first = plan.sequence.first_other().unwrap().0;
            assert_abs_diff_eq!(
                plan.threshold.unwrap(),
                inspection_threshold(&params, first, threshold_beliefs),
                epsilon = 0.0
            );
        }
        for case in ArrivalCase::ALL {
            let plan = case_plan(&params, MechanismKind::Hybrid, case).unwrap();
            let seq = if case == ArrivalCase::Offer2 {
                LearnSequence::FirstU2
            } else {
                LearnSequence::FirstU1
            };
            assert_eq!(plan.sequence, seq, "hybrid {case}");
            let first = plan.sequence.first_other().unwrap().0;
            assert_abs_diff_eq!(
                plan.threshold.unwrap(),
                inspection_threshold(&params, first, case.final_beliefs(&params)),
                epsilon = 0.0
            );
        }
    }

    #[test]
    fn learning_probabilities_match_reference_points() {
        let params = TwoUnivParams::benchmark();
        let plan = case_plan(&params, MechanismKind::Dosv, ArrivalCase::Offer2).unwrap();
        let (l1, l2) = learning_probabilities(&params, &plan);
        assert_abs_diff_eq!(l1, 0.6056, epsilon = 5e-5);
        assert_eq!(l2, 1.0);
        let plan = case_plan(&params, MechanismKind::Da, ArrivalCase::NoOffer).unwrap();
        let (l1, l2) = learning_probabilities(&params, &plan);
        assert_eq!(l1, 1.0);
        assert_abs_diff_eq!(l2, 0.58, epsilon = 5e-5);
    }

    #[test]
    fn top_rank_probabilities_match_closed_forms() {
        for k in grid_costs() {
            let params = TwoUnivParams::benchmark().with_cost(k);
            let cases: [(MechanismKind, ArrivalCase, f64, f64); 7] = [
                (MechanismKind::Da, ArrivalCase::NoOffer, 256.0 * k / 81.0 + 43.0 / 128.0, 235.0 / 512.0 - 256.0 * k / 81.0),
                (MechanismKind::Da, ArrivalCase::Offers21, 256.0 * k / 81.0 + 43.0 / 128.0, 235.0 / 512.0 - 256.0 * k / 81.0),
                (MechanismKind::Dosv, ArrivalCase::Offer1, 16.0 * k / 9.0 + 863.0 / 2048.0, 765.0 / 2048.0 - 16.0 * k / 9.0),
                (MechanismKind::Dosv, ArrivalCase::Offer2, 27.0 / 64.0 - 16.0 * k / 9.0, 16.0 * k / 9.0 + 191.0 / 512.0),
                (MechanismKind::Dosv, ArrivalCase::Offers12, k + 863.0 / 2048.0, 765.0 / 2048.0 - k),
                (MechanismKind::Dosv, ArrivalCase::Offers21, 27.0 / 64.0 - k, k + 191.0 / 512.0),
                (MechanismKind::Hybrid, ArrivalCase::Offers21, k + 863.0 / 2048.0, 765.0 / 2048.0 - k),
            ];
            for (kind, case, p1, p2) in cases {
                let plan = case_plan(&params, kind, case).unwrap();
                let (t1, t2) = top_rank_probabilities(&params, &plan);
                assert_abs_diff_eq!(t1, p1, epsilon = 1e-12);
                assert_abs_diff_eq!(t2, p2, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn top_rank_probabilities_close() {
        // Listing nothing happens exactly when both realized values are
        // non-positive, independent draws with known mass.
        let params = TwoUnivParams::benchmark();
        let unlisted = (0.5 - params.mu1) * (0.5 - params.mu2);
        for kind in MechanismKind::ALL {
            for case in ArrivalCase::ALL {
                let plan = case_plan(&params, kind, case).unwrap();
                let (t1, t2) = top_rank_probabilities(&params, &plan);
                assert_abs_diff_eq!(t1 + t2 + unlisted, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn welfare_matches_closed_forms() {
        for k in grid_costs() {
            let params = TwoUnivParams::benchmark().with_cost(k);
            let r = 524288.0 * k - 14175.0;
            let sr = r.sqrt();
            let s2k = (2.0 * k).sqrt();
            let da_no = k * sr / 432.0 - 525.0 * sr / 8388608.0 - 63.0 * k / 32.0 + 1260909.0 / 8388608.0;
            let da_o1 = k * sr / 288.0 - r * sr / 254803968.0 - 63.0 * k / 32.0 + 217041.0 / 1048576.0;
            let da_o2 = 11.0 * k * sr / 7776.0 - 175.0 * sr / 1572864.0 - 63.0 * k / 32.0 + 103813.0 / 524288.0;
            let da_both = k * sr / 288.0 - r * sr / 143327232.0 - 63.0 * k / 32.0 + 48155.0 / 196608.0;
            let dosv_o1 = 8.0 * k * s2k / 9.0 - 63.0 * k / 32.0 + 217041.0 / 1048576.0;
            let dosv_o2 = 8.0 * k * s2k / 9.0 - 65.0 * k / 32.0 + 52301.0 / 262144.0;
            let dosv_12 = 2.0 * k * s2k / 3.0 - 63.0 * k / 32.0 + 48155.0 / 196608.0;
            let dosv_21 = 2.0 * k * s2k / 3.0 - 65.0 * k / 32.0 + 4013.0 / 16384.0;
            let expected: [(MechanismKind, [f64; 5]); 3] = [
                (MechanismKind::Da, [da_no, da_o1, da_o2, da_both, da_both]),
                (MechanismKind::Dosv, [da_no, dosv_o1, dosv_o2, dosv_12, dosv_21]),
                (MechanismKind::Hybrid, [da_no, dosv_o1, dosv_o2, dosv_12, dosv_12]),
            ];
            for (kind, values) in expected {
                for (case, want) in ArrivalCase::ALL.into_iter().zip(values) {
                    let plan = case_plan(&params, kind, case).unwrap();
                    let got = conditional_welfare(&params, &plan);
                    assert_abs_diff_eq!(got, want, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn effects_match_closed_forms() {
        for k in grid_costs() {
            let params = TwoUnivParams::benchmark().with_cost(k);
            let e = early_offer_effects(&params).unwrap();
            assert_abs_diff_eq!(e.u1_offer1_vs_none, 175.0 / 2048.0 - 112.0 * k / 81.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.u1_offers12_vs_offer2, 25.0 * k / 9.0 - 1.0 / 2048.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.u1_offers21_vs_offer2, 7.0 * k / 9.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.u2_offer2_vs_none, 400.0 * k / 81.0 - 11.0 / 128.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.u2_offers12_vs_offer1, 7.0 * k / 9.0, epsilon = 1e-12);
            assert_abs_diff_eq!(e.u2_offers21_vs_offer1, 25.0 * k / 9.0 - 1.0 / 2048.0, epsilon = 1e-12);
            assert!(e.as_array().iter().all(|(_, v)| *v > 0.0));
            let (f1, f2) = first_offer_effects(&params).unwrap();
            assert_abs_diff_eq!(f1, 2.0 * k - 1.0 / 2048.0, epsilon = 1e-12);
            assert_abs_diff_eq!(f2, 2.0 * k - 1.0 / 2048.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn welfare_comparisons_match_identities() {
        for k in grid_costs() {
            let params = TwoUnivParams::benchmark().with_cost(k);
            for cmp in welfare_comparisons(&params).unwrap() {
                match cmp.case {
                    ArrivalCase::NoOffer => {
                        assert_abs_diff_eq!(cmp.hybrid_minus_dosv(), 0.0, epsilon = 1e-14);
                        assert_abs_diff_eq!(cmp.dosv_minus_da(), 0.0, epsilon = 1e-14);
                    }
                    ArrivalCase::Offers21 => {
                        assert_abs_diff_eq!(
                            cmp.hybrid_minus_dosv(),
                            k / 16.0 - 1.0 / 196608.0,
                            epsilon = 1e-12
                        );
                        assert!(cmp.dosv_minus_da() < 0.0);
                        assert!(cmp.hybrid_minus_da() > 0.0);
                    }
                    _ => {
                        assert_abs_diff_eq!(cmp.hybrid_minus_dosv(), 0.0, epsilon = 1e-14);
                        assert!(cmp.dosv_minus_da() > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn reference_table_checks_out() {
        let params = TwoUnivParams::benchmark();
        let checks = check_reference_table(&params, 0.05).unwrap();
        assert_eq!(checks.len(), 75);
        let flagged: Vec<_> = checks.iter().filter(|c| c.cell.flagged).collect();
        assert_eq!(flagged.len(), 1);
        for c in &checks {
            if c.cell.flagged {
                assert!(!c.pass, "flagged cell unexpectedly matches print precision");
            } else {
                assert!(
                    c.pass,
                    "{} {} {}: computed {} vs printed {}",
                    c.cell.mechanism,
                    c.cell.case,
                    c.cell.statistic.label(),
                    c.computed_scaled,
                    c.cell.printed
                );
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        write_reference_table_csv(&path, &checks).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 76);
        assert!(text.starts_with("mechanism,case,statistic,computed,reference,abs_err"));
    }

    #[test]
    fn sign_conditions_hold_at_benchmark() {
        let params = TwoUnivParams::benchmark();
        let checks = check_sign_conditions(&params).unwrap();
        assert_eq!(checks.len(), 6 + 2 + 15);
        for c in &checks {
            assert!(c.sign_ok, "{} {} = {}", c.claim, c.case, c.value);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("signs.csv");
        write_sign_checks_csv(&path, &checks).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), checks.len() + 1);
    }

    #[test]
    fn narrow_support_example() {
        let params = NarrowSupportParams {
            mu1: 0.75,
            half_width: 0.005,
            p1: 0.3,
            p2: 0.8,
            cost: 0.015,
        };
        let e = narrow_support_effects(&params).unwrap();
        assert_eq!(e.u1_offer1_vs_none, -0.25);
        assert_eq!(e.u1_offers_vs_offer2, -0.25);
        assert_eq!(e.u2_offer2_vs_none, 0.0);
        assert_eq!(e.u2_offers_vs_offer1, 0.0);
        assert_eq!(e.first_offer_u1, 0.0);
        assert_eq!(e.first_offer_u2, 0.0);
        assert!(e.weighted_average < 0.0);

        // A cost no offer history can overcome: nobody inspects, no effects.
        let high = NarrowSupportParams { cost: 0.5, half_width: 0.005, ..params };
        let e = narrow_support_effects(&high).unwrap();
        assert_eq!(
            (e.u1_offer1_vs_none, e.u1_offers_vs_offer2, e.u2_offer2_vs_none, e.u2_offers_vs_offer1),
            (0.0, 0.0, 0.0, 0.0)
        );
        // A cost below every inspection gate: everybody inspects, no effects.
        let low = NarrowSupportParams { cost: 1e-3, half_width: 4e-4, ..params };
        let e = narrow_support_effects(&low).unwrap();
        assert_eq!(
            (e.u1_offer1_vs_none, e.u1_offers_vs_offer2, e.u2_offer2_vs_none, e.u2_offers_vs_offer1),
            (0.0, 0.0, 0.0, 0.0)
        );

        assert!(narrow_support_effects(&NarrowSupportParams { mu1: 0.4, ..params }).is_err());
        assert!(narrow_support_effects(&NarrowSupportParams { half_width: 0.01, ..params }).is_err());
        assert!(narrow_support_effects(&NarrowSupportParams { half_width: 0.3, ..params }).is_err());
    }

    #[test]
    fn mc_oracle_matches_exact_values() {
        let params = TwoUnivParams::benchmark();
        let stream = RngStream::root(1903).fork(7);
        let est = mc_oracle(&params, MechanismKind::Dosv, ArrivalCase::Offer2, 262144, &stream).unwrap();
        let plan = case_plan(&params, MechanismKind::Dosv, ArrivalCase::Offer2).unwrap();
        let (l1, _) = learning_probabilities(&params, &plan);
        let (t1, t2) = top_rank_probabilities(&params, &plan);
        let w = conditional_welfare(&params, &plan);
        assert!((est.learn1 - l1).abs() <= 4.0 * est.learn1_se);
        assert!((est.top1 - t1).abs() <= 4.0 * est.top1_se);
        assert!((est.top2 - t2).abs() <= 4.0 * est.top2_se);
        assert!((est.welfare - w).abs() <= 4.0 * est.welfare_se);
        assert_eq!(est.learn2, 1.0);

        let again = mc_oracle(&params, MechanismKind::Dosv, ArrivalCase::Offer2, 262144, &stream).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn flagged_cell_sides_with_the_exact_value() {
        let params = TwoUnivParams::benchmark();
        let stream = RngStream::root(88).fork(0);
        let checks = check_flagged_cells_mc(&params, 2_000_000, &stream).unwrap();
        assert_eq!(checks.len(), 1);
        let c = &checks[0];
        assert!(c.within_3_sigma);
        // The printed value sits outside the confidence band the exact
        // computation passes.
        assert!((c.cell.printed / 100.0 - c.mc_value).abs() > 3.0 * c.mc_se);
    }
}

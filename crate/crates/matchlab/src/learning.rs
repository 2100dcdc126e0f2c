//! Costly sequential learning of match qualities.
//!
//! A student faces J programs. Program j admits her with probability `p_j`
//! and has match quality `X_j` drawn from a known distribution. She may
//! inspect programs one at a time at cost `k` per inspection; an inspection
//! reveals the realized quality. When she stops, she ranks the programs by
//! value — realized `max(0, u(x_j))` if inspected, expected `max(0, E[u(X_j)])`
//! otherwise — and her payoff is the admission-probability-weighted value of
//! that list. [`optimal_strategy`] solves the resulting dynamic program by
//! backward induction over finite supports. [`myopic_dosv_policy`] chains
//! per-period re-optimizations as early offers arrive, which is how the
//! sequential mechanism is played.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::market::{OfferArrival, QualityDistribution};
use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum LearnError {
    #[error("operation requires finite supports")]
    ContinuousSupport,
    #[error("state space too large: {states} states")]
    TooLarge { states: u128 },
    #[error("state not representable: {0}")]
    BadState(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Scalar utility over match quality; weakly concave.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Utility {
    Identity,
    /// Constant absolute risk aversion: `(1 - exp(-alpha x)) / alpha`.
    Cara { alpha: f64 },
}

impl Utility {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Utility::Identity => x,
            Utility::Cara { alpha } => (1.0 - (-alpha * x).exp()) / alpha,
        }
    }

    /// `E[u(X)]` under `dist`.
    pub fn mean(&self, dist: &QualityDistribution) -> f64 {
        match (self, dist) {
            (Utility::Identity, _) => dist.mean(),
            (Utility::Cara { alpha }, QualityDistribution::Uniform { center, half_width }) => {
                let (a, b) = (center - half_width, center + half_width);
                // ∫ (1 - e^{-αx}) / α dx / (b - a)
                (1.0 - ((-alpha * a).exp() - (-alpha * b).exp()) / (alpha * (b - a))) / alpha
            }
            (Utility::Cara { .. }, QualityDistribution::FiniteDiscrete { points }) => {
                points.iter().map(|&(x, p)| p * self.apply(x)).sum()
            }
        }
    }
}

/// The decision problem: one distribution and one admission belief per
/// program, a common inspection cost, and the utility over quality.
#[derive(Clone, Debug)]
pub struct LearningProblem {
    pub distributions: Vec<QualityDistribution>,
    pub beliefs: Vec<f64>,
    pub cost: f64,
    pub utility: Utility,
}

impl LearningProblem {
    pub fn len(&self) -> usize {
        self.distributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distributions.is_empty()
    }

    pub fn with_beliefs(&self, beliefs: Vec<f64>) -> Self {
        Self {
            beliefs,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), LearnError> {
        if self.beliefs.len() != self.distributions.len() {
            return Err(LearnError::Invalid(format!(
                "{} beliefs for {} programs",
                self.beliefs.len(),
                self.distributions.len()
            )));
        }
        for &p in &self.beliefs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(LearnError::Invalid(format!("belief {p} outside (0, 1]")));
            }
        }
        if !(self.cost >= 0.0) {
            return Err(LearnError::Invalid(format!("negative cost {}", self.cost)));
        }
        for d in &self.distributions {
            d.validate().map_err(LearnError::Invalid)?;
        }
        Ok(())
    }

    fn supports(&self) -> Result<Vec<&[(f64, f64)]>, LearnError> {
        self.distributions
            .iter()
            .map(|d| match d {
                QualityDistribution::FiniteDiscrete { points } => Ok(points.as_slice()),
                QualityDistribution::Uniform { .. } => Err(LearnError::ContinuousSupport),
            })
            .collect()
    }
}

/// What the student knows: which programs are uninspected and the realized
/// quality of each inspected one.
#[derive(Clone, Debug, PartialEq)]
pub struct LearningState {
    pub unlearned: BTreeSet<usize>,
    pub learned: BTreeMap<usize, f64>,
}

impl LearningState {
    pub fn initial(j: usize) -> Self {
        Self {
            unlearned: (0..j).collect(),
            learned: BTreeMap::new(),
        }
    }

    /// State after inspecting program `j` and observing `x`.
    pub fn after_learning(&self, j: usize, x: f64) -> Self {
        let mut next = self.clone();
        next.unlearned.remove(&j);
        next.learned.insert(j, x);
        next
    }
}

/// Beliefs implied by offers that arrived through period `t`: an arrived
/// offer makes admission certain, everything else keeps its prior.
pub fn update_beliefs(p0: &[f64], arrival: &OfferArrival, t: u32) -> Vec<f64> {
    p0.iter()
        .enumerate()
        .map(|(j, &p)| {
            if arrival.entries.get(j).is_some_and(|&e| e <= t) {
                1.0
            } else {
                p
            }
        })
        .collect()
}

/// Value of stopping in `state`: ranks programs by value (inspected ones by
/// realized utility, the rest by expected utility, negatives dropped) and
/// returns the admission-weighted value together with the list itself.
pub fn rol_value(state: &LearningState, prob: &LearningProblem) -> (f64, Vec<usize>) {
    let mut entries: Vec<(f64, usize)> = Vec::with_capacity(prob.len());
    for j in 0..prob.len() {
        let v = match state.learned.get(&j) {
            Some(&x) => prob.utility.apply(x),
            None => prob.utility.mean(&prob.distributions[j]),
        };
        if v > 0.0 {
            entries.push((v, j));
        }
    }
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut value = 0.0;
    let mut reach = 1.0;
    for &(v, j) in &entries {
        let p = prob.beliefs[j];
        value += reach * p * v;
        reach *= 1.0 - p;
    }
    (value, entries.into_iter().map(|(_, j)| j).collect())
}

/// What to do in a state: stop and submit the list, or inspect a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Stop,
    Learn(usize),
}

// States are packed into a u128 key: 15 bits per program holding the support
// index plus one, zero meaning uninspected.
const KEY_BITS: u32 = 15;
const MAX_PROGRAMS: usize = 8;
const MAX_STATES: u128 = 1 << 22;

#[derive(Clone, Debug)]
struct Packing {
    sizes: Vec<usize>,
}

impl Packing {
    fn new(supports: &[&[(f64, f64)]]) -> Result<Self, LearnError> {
        if supports.len() > MAX_PROGRAMS {
            return Err(LearnError::Invalid(format!(
                "{} programs exceeds the {MAX_PROGRAMS}-program limit",
                supports.len()
            )));
        }
        let mut states: u128 = 1;
        for s in supports {
            if s.len() + 1 >= (1 << KEY_BITS) {
                return Err(LearnError::TooLarge {
                    states: s.len() as u128,
                });
            }
            states = states.saturating_mul(s.len() as u128 + 1);
        }
        if states > MAX_STATES {
            return Err(LearnError::TooLarge { states });
        }
        Ok(Self {
            sizes: supports.iter().map(|s| s.len()).collect(),
        })
    }

    fn with_learned(&self, key: u128, j: usize, support_idx: usize) -> u128 {
        key | ((support_idx as u128 + 1) << (KEY_BITS as usize * j))
    }

    fn slot(&self, key: u128, j: usize) -> Option<usize> {
        let raw = (key >> (KEY_BITS as usize * j)) & ((1 << KEY_BITS) - 1);
        (raw != 0).then(|| raw as usize - 1)
    }

    fn key_of(&self, state: &LearningState, supports: &[Vec<(f64, f64)>]) -> Result<u128, LearnError> {
        let mut key = 0u128;
        for (&j, &x) in &state.learned {
            if j >= self.sizes.len() {
                return Err(LearnError::BadState(format!("program {j} out of range")));
            }
            let idx = supports[j]
                .iter()
                .position(|&(v, _)| v == x)
                .ok_or_else(|| {
                    LearnError::BadState(format!("value {x} not in program {j}'s support"))
                })?;
            key = self.with_learned(key, j, idx);
        }
        Ok(key)
    }

    fn state_of(&self, key: u128, supports: &[Vec<(f64, f64)>]) -> LearningState {
        let mut state = LearningState::initial(self.sizes.len());
        for j in 0..self.sizes.len() {
            if let Some(idx) = self.slot(key, j) {
                state.unlearned.remove(&j);
                state.learned.insert(j, supports[j][idx].0);
            }
        }
        state
    }
}

/// An optimal policy, materialized over the whole state space, with the value
/// function alongside.
#[derive(Clone, Debug)]
pub struct Strategy {
    packing: Packing,
    supports: Vec<Vec<(f64, f64)>>,
    actions: HashMap<u128, Action>,
    values: HashMap<u128, f64>,
}

impl Strategy {
    pub fn action(&self, state: &LearningState) -> Result<Action, LearnError> {
        let key = self.packing.key_of(state, &self.supports)?;
        Ok(self.actions[&key])
    }

    pub fn value(&self, state: &LearningState) -> Result<f64, LearnError> {
        let key = self.packing.key_of(state, &self.supports)?;
        Ok(self.values[&key])
    }

    fn action_key(&self, key: u128) -> Action {
        self.actions[&key]
    }
}

/// Solves the inspection problem by backward induction over the full state
/// space. Returns the policy and the value of the initial (nothing-learned)
/// state. Ties break toward stopping, then toward the lowest program index.
pub fn optimal_strategy(prob: &LearningProblem) -> Result<(Strategy, f64), LearnError> {
    prob.validate()?;
    let support_refs = prob.supports()?;
    let packing = Packing::new(&support_refs)?;
    let supports: Vec<Vec<(f64, f64)>> = support_refs.iter().map(|s| s.to_vec()).collect();
    let j = prob.len();

    // Group learned-set masks by how many programs they cover, most first,
    // so every child state is solved before its parents.
    let mut masks_by_count: Vec<Vec<u32>> = vec![Vec::new(); j + 1];
    for mask in 0..(1u32 << j) {
        masks_by_count[mask.count_ones() as usize].push(mask);
    }

    let mut actions: HashMap<u128, Action> = HashMap::new();
    let mut values: HashMap<u128, f64> = HashMap::new();

    for count in (0..=j).rev() {
        for &mask in &masks_by_count[count] {
            let learned: Vec<usize> = (0..j).filter(|&i| mask & (1 << i) != 0).collect();
            let unlearned: Vec<usize> = (0..j).filter(|&i| mask & (1 << i) == 0).collect();
            // Iterate the product of support indices for the learned set.
            let mut idx = vec![0usize; learned.len()];
            loop {
                let mut key = 0u128;
                let mut state = LearningState::initial(j);
                for (slot, &prog) in learned.iter().enumerate() {
                    key = packing.with_learned(key, prog, idx[slot]);
                    state.unlearned.remove(&prog);
                    state.learned.insert(prog, supports[prog][idx[slot]].0);
                }
                let (stop_value, _) = rol_value(&state, prob);
                let mut best = stop_value;
                let mut best_action = Action::Stop;
                for &target in &unlearned {
                    let mut ev = 0.0;
                    for (s_idx, &(_, p)) in supports[target].iter().enumerate() {
                        let child = packing.with_learned(key, target, s_idx);
                        ev += p * values[&child];
                    }
                    let candidate = ev - prob.cost;
                    if candidate > best {
                        best = candidate;
                        best_action = Action::Learn(target);
                    }
                }
                actions.insert(key, best_action);
                values.insert(key, best);

                // Advance the mixed-radix support counter.
                let mut slot = 0;
                loop {
                    if slot == learned.len() {
                        break;
                    }
                    idx[slot] += 1;
                    if idx[slot] < supports[learned[slot]].len() {
                        break;
                    }
                    idx[slot] = 0;
                    slot += 1;
                }
                if slot == learned.len() {
                    break;
                }
            }
        }
    }

    let root_value = values[&0];
    Ok((
        Strategy {
            packing,
            supports,
            actions,
            values,
        },
        root_value,
    ))
}

/// Follows `strategy` from `state`, sampling each inspected quality from its
/// distribution. Returns the `(program, value)` inspections in order.
pub fn follow_strategy(
    strategy: &Strategy,
    prob: &LearningProblem,
    state: &mut LearningState,
    stream: &mut RngStream,
) -> Result<Vec<(usize, f64)>, LearnError> {
    let mut out = Vec::new();
    loop {
        match strategy.action(state)? {
            Action::Stop => break,
            Action::Learn(j) => {
                let x = prob.distributions[j].sample(stream);
                *state = state.after_learning(j, x);
                out.push((j, x));
            }
        }
    }
    Ok(out)
}

/// One period of the sequential play: the beliefs in force and the policy
/// re-optimized for them.
#[derive(Clone, Debug)]
pub struct PeriodStep {
    pub period: u32,
    pub beliefs: Vec<f64>,
    pub strategy: Strategy,
}

/// The policy obtained by playing each period's re-optimized strategy from
/// the states where the previous period stopped. `action` answers Stop for
/// every state never reached with a learning prescription.
#[derive(Clone, Debug)]
pub struct MyopicPolicy {
    packing: Packing,
    supports: Vec<Vec<(f64, f64)>>,
    prescriptions: HashMap<u128, (u32, Action)>,
    visited: BTreeSet<u128>,
}

/// Distribution of outcomes induced by a [`MyopicPolicy`].
#[derive(Clone, Debug)]
pub struct MyopicOutcome {
    /// Probability that each program gets inspected.
    pub learn_probs: Vec<f64>,
    /// Probability that each program tops the final list.
    pub top_rank_probs: Vec<f64>,
    /// Expected payoff net of inspection costs, at the problem's beliefs.
    pub expected_value: f64,
}

impl MyopicPolicy {
    pub fn action(&self, state: &LearningState) -> Result<Action, LearnError> {
        let key = self.packing.key_of(state, &self.supports)?;
        Ok(self
            .prescriptions
            .get(&key)
            .map_or(Action::Stop, |&(_, a)| a))
    }

    /// Period whose re-optimization prescribed learning in `state`, if any.
    pub fn period_of(&self, state: &LearningState) -> Result<Option<u32>, LearnError> {
        let key = self.packing.key_of(state, &self.supports)?;
        Ok(self.prescriptions.get(&key).map(|&(t, _)| t))
    }

    /// Every state examined while chaining the per-period policies.
    pub fn visited_states(&self) -> Vec<LearningState> {
        self.visited
            .iter()
            .map(|&key| self.packing.state_of(key, &self.supports))
            .collect()
    }

    /// Propagates the realization distribution through the policy and scores
    /// terminal lists at `scoring`'s beliefs.
    pub fn expected_outcome(&self, scoring: &LearningProblem) -> Result<MyopicOutcome, LearnError> {
        scoring.validate()?;
        let j = scoring.len();
        let mut learn_probs = vec![0.0; j];
        let mut top_rank_probs = vec![0.0; j];
        let mut expected_value = 0.0;
        let mut stack: Vec<(u128, f64)> = vec![(0, 1.0)];
        while let Some((key, mass)) = stack.pop() {
            match self.prescriptions.get(&key).map(|&(_, a)| a) {
                Some(Action::Learn(target)) => {
                    learn_probs[target] += mass;
                    expected_value -= scoring.cost * mass;
                    for (s_idx, &(_, p)) in self.supports[target].iter().enumerate() {
                        stack.push((self.packing.with_learned(key, target, s_idx), mass * p));
                    }
                }
                _ => {
                    let state = self.packing.state_of(key, &self.supports);
                    let (value, rol) = rol_value(&state, scoring);
                    expected_value += mass * value;
                    if let Some(&top) = rol.first() {
                        top_rank_probs[top] += mass;
                    }
                }
            }
        }
        Ok(MyopicOutcome {
            learn_probs,
            top_rank_probs,
            expected_value,
        })
    }
}

/// Plays the arrival process period by period: at each period from the first
/// arrival (or the horizon, if nothing ever arrives) through the horizon, the
/// strategy is re-optimized at the beliefs implied by offers so far and
/// followed from the states where play had stopped. Returns the combined
/// policy and the per-period trace.
pub fn myopic_dosv_policy(
    prob: &LearningProblem,
    arrival: &OfferArrival,
) -> Result<(MyopicPolicy, Vec<PeriodStep>), LearnError> {
    prob.validate()?;
    arrival.validate().map_err(LearnError::Invalid)?;
    if arrival.len() != prob.len() {
        return Err(LearnError::Invalid(format!(
            "arrival vector covers {} programs, problem has {}",
            arrival.len(),
            prob.len()
        )));
    }
    let horizon = prob.len() as u32;
    let t_lo = arrival.first_arrival().unwrap_or(horizon).min(horizon);

    let support_refs = prob.supports()?;
    let packing = Packing::new(&support_refs)?;
    let supports: Vec<Vec<(f64, f64)>> = support_refs.iter().map(|s| s.to_vec()).collect();

    let mut prescriptions: HashMap<u128, (u32, Action)> = HashMap::new();
    let mut visited: BTreeSet<u128> = BTreeSet::new();
    let mut frontier: Vec<u128> = vec![0];
    let mut trace = Vec::new();

    for t in t_lo..=horizon {
        let beliefs = update_beliefs(&prob.beliefs, arrival, t);
        let (strategy, _) = optimal_strategy(&prob.with_beliefs(beliefs.clone()))?;
        let mut next_frontier = Vec::new();
        let mut stack = std::mem::take(&mut frontier);
        while let Some(key) = stack.pop() {
            visited.insert(key);
            match strategy.action_key(key) {
                Action::Stop => next_frontier.push(key),
                Action::Learn(target) => {
                    let prior = prescriptions.insert(key, (t, Action::Learn(target)));
                    debug_assert!(
                        prior.is_none(),
                        "state prescribed learning in two different periods"
                    );
                    for s_idx in 0..supports[target].len() {
                        stack.push(packing.with_learned(key, target, s_idx));
                    }
                }
            }
        }
        frontier = next_frontier;
        trace.push(PeriodStep {
            period: t,
            beliefs,
            strategy,
        });
    }

    Ok((
        MyopicPolicy {
            packing,
            supports,
            prescriptions,
            visited,
        },
        trace,
    ))
}

/// Whether realized utilities have an almost-surely fixed complete order and
/// fixed signs, so that inspection can never change the submitted list.
pub fn is_ordinally_informed(prob: &LearningProblem) -> Result<bool, LearnError> {
    prob.validate()?;
    let supports = prob.supports()?;
    let ranges: Vec<(f64, f64)> = supports
        .iter()
        .map(|s| {
            let utilities: Vec<f64> = s.iter().map(|&(x, _)| prob.utility.apply(x)).collect();
            (
                utilities.iter().copied().fold(f64::INFINITY, f64::min),
                utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            )
        })
        .collect();
    for &(lo, hi) in &ranges {
        // Acceptability must be certain: utilities all positive or all
        // non-positive. A support straddling zero leaves it uncertain.
        if !(lo > 0.0 || hi <= 0.0) {
            return Ok(false);
        }
    }
    for a in 0..ranges.len() {
        for b in (a + 1)..ranges.len() {
            let separated = ranges[a].1 < ranges[b].0 || ranges[b].1 < ranges[a].0;
            if !separated {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Every expected value achievable by some pure inspection policy, produced
/// by exhaustive enumeration of decision trees. Test oracle for
/// [`optimal_strategy`]; the list's maximum is the optimal value.
pub fn enumerate_policy_values(prob: &LearningProblem) -> Result<Vec<f64>, LearnError> {
    prob.validate()?;
    let supports = prob.supports()?;
    const CAP: usize = 1_000_000;

    fn values_of(
        state: &LearningState,
        prob: &LearningProblem,
        supports: &[&[(f64, f64)]],
    ) -> Result<Vec<f64>, LearnError> {
        let mut out = vec![rol_value(state, prob).0];
        for &j in state.unlearned.iter() {
            // All ways to pair a continuation with each realization.
            let mut combos: Vec<f64> = vec![0.0];
            for &(x, p) in supports[j] {
                let child = state.after_learning(j, x);
                let child_values = values_of(&child, prob, supports)?;
                let mut next = Vec::with_capacity(combos.len() * child_values.len());
                for &base in &combos {
                    for &v in &child_values {
                        next.push(base + p * v);
                    }
                }
                if next.len() > CAP {
                    return Err(LearnError::TooLarge {
                        states: next.len() as u128,
                    });
                }
                combos = next;
            }
            for &combo in &combos {
                out.push(combo - prob.cost);
            }
            if out.len() > CAP {
                return Err(LearnError::TooLarge {
                    states: out.len() as u128,
                });
            }
        }
        Ok(out)
    }

    values_of(&LearningState::initial(prob.len()), prob, &supports)
}

/// Value of inspecting in the fixed order `order` with optimal stopping.
pub fn fixed_order_value(prob: &LearningProblem, order: &[usize]) -> Result<f64, LearnError> {
    prob.validate()?;
    let supports = prob.supports()?;

    fn go(
        state: &LearningState,
        rest: &[usize],
        prob: &LearningProblem,
        supports: &[&[(f64, f64)]],
    ) -> f64 {
        let stop = rol_value(state, prob).0;
        let Some((&j, tail)) = rest.split_first() else {
            return stop;
        };
        let mut ev = 0.0;
        for &(x, p) in supports[j] {
            ev += p * go(&state.after_learning(j, x), tail, prob, supports);
        }
        stop.max(ev - prob.cost)
    }

    Ok(go(
        &LearningState::initial(prob.len()),
        order,
        prob,
        &supports,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point(lo: f64, hi: f64) -> QualityDistribution {
        QualityDistribution::FiniteDiscrete {
            points: vec![(lo, 0.5), (hi, 0.5)],
        }
    }

    #[test]
    fn stop_value_matches_hand_computation() {
        // Benchmark parameters, nothing learned: 9/16·1/16 + 7/16·9/16·1/32.
        let prob = LearningProblem {
            distributions: vec![two_point(-0.4375, 0.5625), two_point(-0.46875, 0.53125)],
            beliefs: vec![9.0 / 16.0, 9.0 / 16.0],
            cost: 3339.0 / 65536.0,
            utility: Utility::Identity,
        };
        let (value, rol) = rol_value(&LearningState::initial(2), &prob);
        assert_eq!(value, 351.0 / 8192.0);
        assert_eq!(rol, vec![0, 1]);
    }

    #[test]
    fn negative_values_leave_the_list() {
        let prob = LearningProblem {
            distributions: vec![two_point(-1.0, 1.0), two_point(-1.0, 1.0)],
            beliefs: vec![0.5, 0.5],
            cost: 0.01,
            utility: Utility::Identity,
        };
        let state = LearningState::initial(2)
            .after_learning(0, -1.0)
            .after_learning(1, 1.0);
        let (value, rol) = rol_value(&state, &prob);
        assert_eq!(rol, vec![1]);
        assert_eq!(value, 0.5);
    }

    #[test]
    fn beliefs_update_only_for_arrived_offers() {
        let arrival = OfferArrival {
            entries: vec![2, 4, 1],
        };
        let p0 = [0.3, 0.4, 0.5];
        assert_eq!(update_beliefs(&p0, &arrival, 1), vec![0.3, 0.4, 1.0]);
        assert_eq!(update_beliefs(&p0, &arrival, 2), vec![1.0, 0.4, 1.0]);
        assert_eq!(update_beliefs(&p0, &arrival, 3), vec![1.0, 0.4, 1.0]);
    }

    #[test]
    fn single_program_learning_threshold() {
        // Learning is worth 0.5 - k against a stop value of 0.
        let make = |cost| LearningProblem {
            distributions: vec![two_point(-1.0, 1.0)],
            beliefs: vec![1.0],
            cost,
            utility: Utility::Identity,
        };
        let (strategy, value) = optimal_strategy(&make(0.2)).unwrap();
        assert_eq!(
            strategy.action(&LearningState::initial(1)).unwrap(),
            Action::Learn(0)
        );
        assert!((value - 0.3).abs() < 1e-15);

        let (strategy, value) = optimal_strategy(&make(0.6)).unwrap();
        assert_eq!(
            strategy.action(&LearningState::initial(1)).unwrap(),
            Action::Stop
        );
        assert_eq!(value, 0.0);
    }

    #[test]
    fn ties_break_toward_stop_then_lowest_index() {
        // Learning is worth exactly the stop value: stop wins.
        let prob = LearningProblem {
            distributions: vec![two_point(-0.5, 0.5)],
            beliefs: vec![1.0],
            cost: 0.25,
            utility: Utility::Identity,
        };
        let (strategy, _) = optimal_strategy(&prob).unwrap();
        assert_eq!(
            strategy.action(&LearningState::initial(1)).unwrap(),
            Action::Stop
        );

        // Two identical programs: the lower index gets inspected first.
        let prob = LearningProblem {
            distributions: vec![two_point(-0.5, 0.5), two_point(-0.5, 0.5)],
            beliefs: vec![1.0, 1.0],
            cost: 0.01,
            utility: Utility::Identity,
        };
        let (strategy, _) = optimal_strategy(&prob).unwrap();
        assert_eq!(
            strategy.action(&LearningState::initial(2)).unwrap(),
            Action::Learn(0)
        );
    }

    #[test]
    fn optimal_value_matches_policy_enumeration() {
        let prob = LearningProblem {
            distributions: vec![
                two_point(-0.2, 0.8),
                two_point(-0.6, 0.9),
                QualityDistribution::FiniteDiscrete {
                    points: vec![(-0.3, 0.25), (0.1, 0.5), (0.7, 0.25)],
                },
            ],
            beliefs: vec![0.9, 0.5, 0.7],
            cost: 0.05,
            utility: Utility::Identity,
        };
        let (_, value) = optimal_strategy(&prob).unwrap();
        let all = enumerate_policy_values(&prob).unwrap();
        let best = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((value - best).abs() < 1e-12, "dp {value} vs oracle {best}");
        for order in [vec![0, 1, 2], vec![2, 1, 0], vec![1], vec![2, 0]] {
            let fixed = fixed_order_value(&prob, &order).unwrap();
            assert!(value >= fixed - 1e-12);
        }
    }

    #[test]
    fn ordinal_information_detection() {
        let informed = LearningProblem {
            distributions: vec![two_point(0.5, 0.6), two_point(0.1, 0.2), two_point(-0.4, -0.1)],
            beliefs: vec![0.5, 0.5, 0.5],
            cost: 0.01,
            utility: Utility::Identity,
        };
        assert!(is_ordinally_informed(&informed).unwrap());

        let overlapping = LearningProblem {
            distributions: vec![two_point(0.1, 0.6), two_point(0.2, 0.8)],
            beliefs: vec![0.5, 0.5],
            cost: 0.01,
            utility: Utility::Identity,
        };
        assert!(!is_ordinally_informed(&overlapping).unwrap());

        let sign_uncertain = LearningProblem {
            distributions: vec![two_point(-0.5, 0.5), two_point(0.8, 0.9)],
            beliefs: vec![0.5, 0.5],
            cost: 0.01,
            utility: Utility::Identity,
        };
        assert!(!is_ordinally_informed(&sign_uncertain).unwrap());
    }

    #[test]
    fn myopic_policy_extends_learning_after_second_arrival() {
        // Two programs, offers arriving in periods 1 and 2. The period-1
        // re-optimization inspects at interim beliefs; the period-2 one
        // extends inspection from the states where period 1 stopped.
        let prob = LearningProblem {
            distributions: vec![
                QualityDistribution::FiniteDiscrete {
                    points: vec![(-0.25, 0.25), (0.05, 0.25), (0.15, 0.25), (0.45, 0.25)],
                },
                two_point(-0.3, 0.7),
            ],
            beliefs: vec![0.5, 0.5],
            cost: 0.02,
            utility: Utility::Identity,
        };
        let arrival = OfferArrival {
            entries: vec![1, 2],
        };
        let (policy, trace) = myopic_dosv_policy(&prob, &arrival).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[0].beliefs, vec![1.0, 0.5]);
        assert_eq!(trace[1].beliefs, vec![1.0, 1.0]);
        let outcome = policy
            .expected_outcome(&prob.with_beliefs(vec![1.0, 1.0]))
            .unwrap();
        assert!(outcome.learn_probs[0] > 0.0);
        let total: f64 = outcome.top_rank_probs.iter().sum();
        assert!(total <= 1.0 + 1e-12);
    }

    #[test]
    fn no_arrivals_reduce_to_one_shot_optimum() {
        let prob = LearningProblem {
            distributions: vec![two_point(-0.2, 0.8), two_point(-0.6, 0.9)],
            beliefs: vec![0.6, 0.7],
            cost: 0.05,
            utility: Utility::Identity,
        };
        let arrival = OfferArrival::none(2);
        let (policy, trace) = myopic_dosv_policy(&prob, &arrival).unwrap();
        assert_eq!(trace.len(), 1);
        let (strategy, value) = optimal_strategy(&prob).unwrap();
        let outcome = policy.expected_outcome(&prob).unwrap();
        assert!((outcome.expected_value - value).abs() < 1e-12);
        assert_eq!(
            policy.action(&LearningState::initial(2)).unwrap(),
            strategy.action(&LearningState::initial(2)).unwrap()
        );
    }
}

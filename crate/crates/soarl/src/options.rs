//! Symbolic options: tabular Q-learning policies, derived initiation and
//! termination conditions, the global random-walk option, and success-rate
//! tracking.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{PrimitiveAction, RawState, StepOutcome, ACTIONS};
use crate::symbolic::{
    apply_unchecked, is_executable, ActionModel, SymbolicState, SymbolicTransition,
};

pub const DEFAULT_SUCCESS_WINDOW: usize = 50;
pub const DEFAULT_OPTION_BUDGET: usize = 100;

/// Tabular state key: agent position plus the four item flags.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct StateKey {
    pub x: i32,
    pub y: i32,
    pub have_coffee: bool,
    pub have_mail: bool,
    pub delivered_coffee: bool,
    pub delivered_mail: bool,
}

impl From<&RawState> for StateKey {
    fn from(s: &RawState) -> Self {
        StateKey {
            x: s.agent_pos.0,
            y: s.agent_pos.1,
            have_coffee: s.have_coffee,
            have_mail: s.have_mail,
            delivered_coffee: s.delivered_coffee,
            delivered_mail: s.delivered_mail,
        }
    }
}

impl StateKey {
    pub fn encode(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.x,
            self.y,
            self.have_coffee as u8,
            self.have_mail as u8,
            self.delivered_coffee as u8,
            self.delivered_mail as u8
        )
    }

    pub fn decode(text: &str) -> Option<StateKey> {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 6 {
            return None;
        }
        Some(StateKey {
            x: parts[0].parse().ok()?,
            y: parts[1].parse().ok()?,
            have_coffee: parts[2] == "1",
            have_mail: parts[3] == "1",
            delivered_coffee: parts[4] == "1",
            delivered_mail: parts[5] == "1",
        })
    }
}

/// Tabular action-value function. Missing entries read as zero.
///
/// Serialized with Q-values as decimal strings (shortest round-trip form) so
/// library files reload bit-exactly.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(from = "QTableRepr", into = "QTableRepr")]
pub struct QTable {
    pub alpha: f64,
    pub gamma: f64,
    values: BTreeMap<StateKey, [f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct QTableRepr {
    alpha: f64,
    gamma: f64,
    values: BTreeMap<String, [String; 4]>,
}

impl From<QTableRepr> for QTable {
    fn from(r: QTableRepr) -> Self {
        let mut values = BTreeMap::new();
        for (k, v) in r.values {
            if let Some(key) = StateKey::decode(&k) {
                let mut row = [0.0; 4];
                for (i, s) in v.iter().enumerate() {
                    row[i] = s.parse().unwrap_or(0.0);
                }
                values.insert(key, row);
            }
        }
        QTable { alpha: r.alpha, gamma: r.gamma, values }
    }
}

impl From<QTable> for QTableRepr {
    fn from(q: QTable) -> Self {
        QTableRepr {
            alpha: q.alpha,
            gamma: q.gamma,
            values: q
                .values
                .into_iter()
                .map(|(k, row)| (k.encode(), row.map(|v| v.to_string())))
                .collect(),
        }
    }
}

impl QTable {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        assert!((0.0..1.0).contains(&gamma), "gamma must be in [0,1)");
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0,1]");
        QTable { alpha, gamma, values: BTreeMap::new() }
    }

    pub fn q(&self, state: &RawState, action: PrimitiveAction) -> f64 {
        self.values
            .get(&StateKey::from(state))
            .map(|row| row[action.index()])
            .unwrap_or(0.0)
    }

    pub fn max_q(&self, state: &RawState) -> f64 {
        self.values
            .get(&StateKey::from(state))
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .unwrap_or(0.0)
    }

    /// Greedy action: argmax over the fixed action order, earliest entry on
    /// ties.
    pub fn greedy(&self, state: &RawState) -> PrimitiveAction {
        let row = self.values.get(&StateKey::from(state)).copied().unwrap_or([0.0; 4]);
        let mut best = ACTIONS[0];
        let mut best_q = row[0];
        for a in &ACTIONS[1..] {
            if row[a.index()] > best_q {
                best_q = row[a.index()];
                best = *a;
            }
        }
        best
    }

    /// ε-greedy selection.
    pub fn select(&self, state: &RawState, epsilon: f64, rng: &mut impl Rng) -> PrimitiveAction {
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            ACTIONS[rng.gen_range(0..ACTIONS.len())]
        } else {
            self.greedy(state)
        }
    }

    /// One-step Q-learning update:
    /// `Q(s,a) += α·(r + γ·max_a' Q(s',a')·[not terminal] − Q(s,a))`.
    pub fn q_update(
        &mut self,
        s: &RawState,
        a: PrimitiveAction,
        r: f64,
        s_next: &RawState,
        terminal: bool,
    ) {
        let bootstrap = if terminal { 0.0 } else { self.gamma * self.max_q(s_next) };
        let row = self.values.entry(StateKey::from(s)).or_insert([0.0; 4]);
        let q = row[a.index()];
        row[a.index()] = q + self.alpha * (r + bootstrap - q);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Recent-window success history.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SuccessHistory {
    capacity: usize,
    outcomes: VecDeque<bool>,
}

impl SuccessHistory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        SuccessHistory { capacity, outcomes: VecDeque::new() }
    }

    pub fn push(&mut self, outcome: bool) {
        if self.outcomes.len() == self.capacity {
            self.outcomes.pop_front();
        }
        self.outcomes.push_back(outcome);
    }

    /// Mean of the buffer; an empty history reads as 0.
    pub fn rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|b| **b).count() as f64 / self.outcomes.len() as f64
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ReplayItem {
    pub state: RawState,
    pub action: PrimitiveAction,
    pub reward: f64,
    pub next_state: RawState,
    pub terminal: bool,
}

/// A symbolic option: preconditions and effects copied from its action
/// model, a tabular policy, and bookkeeping for success tracking and reuse.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SymbolicOption {
    pub id: String,
    pub pre_pos: std::collections::BTreeSet<crate::symbolic::Proposition>,
    pub pre_neg: std::collections::BTreeSet<crate::symbolic::Proposition>,
    pub eff_pos: std::collections::BTreeSet<crate::symbolic::Proposition>,
    pub eff_neg: std::collections::BTreeSet<crate::symbolic::Proposition>,
    pub policy: QTable,
    pub success_history: SuccessHistory,
    #[serde(skip)]
    pub replay: Vec<ReplayItem>,
    pub executions: u64,
    /// Set when the policy was populated from the skill library.
    pub reused: bool,
}

impl SymbolicOption {
    pub fn from_model(model: &ActionModel, alpha: f64, gamma: f64, window: usize) -> Self {
        SymbolicOption {
            id: model.name.clone(),
            pre_pos: model.pre_pos.clone(),
            pre_neg: model.pre_neg.clone(),
            eff_pos: model.eff_pos.clone(),
            eff_neg: model.eff_neg.clone(),
            policy: QTable::new(alpha, gamma),
            success_history: SuccessHistory::new(window),
            replay: Vec::new(),
            executions: 0,
            reused: false,
        }
    }

    fn as_model(&self) -> ActionModel {
        ActionModel {
            name: self.id.clone(),
            pre_pos: self.pre_pos.clone(),
            pre_neg: self.pre_neg.clone(),
            eff_pos: self.eff_pos.clone(),
            eff_neg: self.eff_neg.clone(),
        }
    }

    /// Initiation condition: the option-as-action is executable in the
    /// symbolic image of the current raw state.
    pub fn initiation(&self, sym_state: &SymbolicState) -> bool {
        is_executable(sym_state, &self.as_model())
    }

    /// Termination: the effects applied to the initiation-time symbolic
    /// state are covered by the current one.
    pub fn termination(&self, start_sym: &SymbolicState, now_sym: &SymbolicState) -> bool {
        now_sym.is_superset(&self.expected_after(start_sym))
    }

    /// The symbolic state this option promises to produce from `start`.
    pub fn expected_after(&self, start: &SymbolicState) -> SymbolicState {
        apply_unchecked(start, &self.as_model())
    }

    /// Sync preconditions/effects after action-model refinement.
    pub fn sync_with(&mut self, model: &ActionModel) {
        self.pre_pos = model.pre_pos.clone();
        self.pre_neg = model.pre_neg.clone();
        self.eff_pos = model.eff_pos.clone();
        self.eff_neg = model.eff_neg.clone();
    }

    pub fn success_rate(&self) -> f64 {
        self.success_history.rate()
    }
}

/// Pushes an execution outcome and returns the updated windowed rate.
pub fn update_success_rate(option: &mut SymbolicOption, succeeded: bool) -> f64 {
    option.success_history.push(succeeded);
    option.success_history.rate()
}

/// Intrinsic option reward: the environment reward plus a terminal bonus ψ
/// on successful termination.
pub fn intrinsic_reward(env_reward: f64, terminated_successfully: bool, psi: f64) -> f64 {
    if terminated_successfully {
        env_reward + psi
    } else {
        env_reward
    }
}

/// Executes uniformly random primitive actions until the symbolic state
/// changes, the episode ends, or `max_steps` run out. Returns the observed
/// symbolic pair (if any), the resulting raw state, the accumulated
/// extrinsic reward, and whether the environment terminated.
pub fn run_global_option<S, L>(
    mut step_fn: S,
    label_fn: L,
    start: RawState,
    max_steps: usize,
    rng: &mut impl Rng,
) -> (Option<SymbolicTransition>, RawState, f64, bool)
where
    S: FnMut(&RawState, PrimitiveAction) -> StepOutcome,
    L: Fn(&RawState) -> SymbolicState,
{
    let start_sym = label_fn(&start);
    let mut state = start;
    let mut accumulated = 0.0;
    for _ in 0..max_steps {
        let action = ACTIONS[rng.gen_range(0..ACTIONS.len())];
        let outcome = step_fn(&state, action);
        accumulated += outcome.reward;
        state = outcome.next_state;
        let now_sym = label_fn(&state);
        if now_sym != start_sym {
            let t = SymbolicTransition::new(start_sym, now_sym, accumulated);
            return (Some(t), state, accumulated, outcome.done);
        }
        if outcome.done {
            return (None, state, accumulated, true);
        }
    }
    (None, state, accumulated, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{
        label_state, office_world_a, step, DoneReason, RewardScheme, Task,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap as Map;

    fn state(x: i32, y: i32) -> RawState {
        RawState::at((x, y))
    }

    #[test]
    fn greedy_tie_breaks_to_first_action() {
        let q = QTable::new(0.1, 0.95);
        assert_eq!(q.greedy(&state(0, 0)), PrimitiveAction::Up);
    }

    #[test]
    fn greedy_picks_argmax() {
        let mut q = QTable::new(1.0, 0.0);
        q.q_update(&state(0, 0), PrimitiveAction::Right, 5.0, &state(1, 0), true);
        assert_eq!(q.greedy(&state(0, 0)), PrimitiveAction::Right);
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let q = QTable::new(0.1, 0.95);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts: Map<PrimitiveAction, usize> = Map::new();
        for _ in 0..10_000 {
            *counts.entry(q.select(&state(0, 0), 1.0, &mut rng)).or_default() += 1;
        }
        for a in ACTIONS {
            let freq = counts[&a] as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.05, "{a} frequency {freq}");
        }
    }

    #[test]
    fn q_update_examples() {
        let mut q = QTable::new(1.0, 0.0);
        q.q_update(&state(0, 0), PrimitiveAction::Up, 1.0, &state(0, 1), false);
        assert_eq!(q.q(&state(0, 0), PrimitiveAction::Up), 1.0);

        // terminal: bootstrap contributes nothing even with large next-state Q
        let mut q = QTable::new(0.5, 0.9);
        q.q_update(&state(9, 9), PrimitiveAction::Up, 100.0, &state(9, 8), true);
        q.q_update(&state(0, 0), PrimitiveAction::Down, 2.0, &state(9, 9), true);
        assert_eq!(q.q(&state(0, 0), PrimitiveAction::Down), 1.0);
    }

    #[test]
    fn q_learning_converges_on_two_state_chain() {
        // states 0 and 1; Right from 0 -> 1 (r=0), Right from 1 -> terminal
        // (r=1); other actions self-loop with r=0
        let gamma = 0.9;
        let mut q = QTable::new(0.5, gamma);
        let s0 = state(0, 0);
        let s1 = state(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..4000 {
            let s = if rng.gen::<bool>() { s0 } else { s1 };
            let a = ACTIONS[rng.gen_range(0..4)];
            let (r, s_next, terminal) = match (s, a) {
                (s, PrimitiveAction::Right) if s == s0 => (0.0, s1, false),
                (s, PrimitiveAction::Right) if s == s1 => (1.0, s1, true),
                (s, _) => (0.0, s, false),
            };
            q.q_update(&s, a, r, &s_next, terminal);
        }
        // value-iteration oracle: Q*(s1,Right)=1, Q*(s0,Right)=γ·1
        assert!((q.q(&s1, PrimitiveAction::Right) - 1.0).abs() < 1e-6);
        assert!((q.q(&s0, PrimitiveAction::Right) - gamma).abs() < 1e-6);
    }

    #[test]
    fn intrinsic_reward_examples() {
        assert_eq!(intrinsic_reward(0.0, true, 100.0), 100.0);
        assert_eq!(intrinsic_reward(-0.01, false, 100.0), -0.01);
        assert_eq!(intrinsic_reward(3.5, true, 0.0), 3.5);
    }

    #[test]
    fn success_history_examples() {
        let mut h = SuccessHistory::new(50);
        h.push(true);
        assert_eq!(h.rate(), 1.0);

        let mut h = SuccessHistory::new(50);
        for b in [true, true, false, true] {
            h.push(b);
        }
        assert_eq!(h.rate(), 0.75);
    }

    #[test]
    fn success_history_is_windowed() {
        let mut h = SuccessHistory::new(100);
        let mut full: Vec<bool> = Vec::new();
        let mut x = 9u64;
        for _ in 0..150 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
            let b = (x >> 40) & 1 == 1;
            h.push(b);
            full.push(b);
        }
        let window = &full[50..];
        let expected = window.iter().filter(|b| **b).count() as f64 / 100.0;
        assert_eq!(h.rate(), expected);
    }

    #[test]
    fn option_initiation_and_termination() {
        use crate::symbolic::Proposition;
        let model = ActionModel::new(
            "deliver",
            std::iter::once(Proposition::new("haveCoffee")).collect(),
            Default::default(),
            std::iter::once(Proposition::new("deliveredCoffee")).collect(),
            std::iter::once(Proposition::new("haveCoffee")).collect(),
        );
        let opt = SymbolicOption::from_model(&model, 0.1, 0.95, 50);
        assert!(opt.initiation(&SymbolicState::from_names(&["haveCoffee"])));
        assert!(!opt.initiation(&SymbolicState::empty()));
        assert!(opt.termination(
            &SymbolicState::from_names(&["haveCoffee"]),
            &SymbolicState::from_names(&["deliveredCoffee"])
        ));
        assert!(!opt.termination(
            &SymbolicState::from_names(&["haveCoffee"]),
            &SymbolicState::from_names(&["haveCoffee"])
        ));
    }

    #[test]
    fn global_option_zero_steps_is_none() {
        let map = office_world_a();
        let start = state(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, end, r, done) = run_global_option(
            |s, a| step(&map, s, a, Task::DeliverCoffee, RewardScheme::default()),
            |s| label_state(s, &map),
            start,
            0,
            &mut rng,
        );
        assert!(t.is_none());
        assert_eq!(end, start);
        assert_eq!(r, 0.0);
        assert!(!done);
    }

    #[test]
    fn global_option_finds_symbolic_change() {
        let map = office_world_a();
        // adjacent to coffee at (0,3); some seed will step onto it quickly
        let start = state(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t, _, _, _) = run_global_option(
            |s, a| step(&map, s, a, Task::DeliverCoffee, RewardScheme::default()),
            |s| label_state(s, &map),
            start,
            500,
            &mut rng,
        );
        let t = t.expect("random walk reaches some symbolic change");
        assert!(t.before.is_empty());
        assert!(!t.after.is_empty());
    }

    #[test]
    fn global_option_stops_on_env_termination() {
        let map = office_world_a();
        // holding coffee right next to the office: termination and symbolic
        // change coincide, so the transition must still be reported
        let mut s = state(4, 3);
        s.have_coffee = true;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, _, _, done) = run_global_option(
            |s, a| step(&map, s, a, Task::DeliverCoffee, RewardScheme::default()),
            |s| label_state(s, &map),
            s,
            500,
            &mut rng,
        );
        if done {
            assert!(t.is_some(), "termination with symbolic change reports the pair");
            assert_eq!(t.unwrap().after.holds().iter().next().unwrap().name(), "deliveredCoffee");
        }
        let _ = DoneReason::TaskComplete;
    }

    #[test]
    fn qtable_serde_roundtrip_is_exact() {
        let mut q = QTable::new(0.1, 0.95);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for i in 0..50 {
            q.q_update(
                &state(i % 7, i / 7),
                ACTIONS[rng.gen_range(0..4)],
                rng.gen::<f64>() * 10.0 - 5.0,
                &state((i + 1) % 7, i / 7),
                rng.gen::<bool>(),
            );
        }
        let json = serde_json::to_string(&q).unwrap();
        let back: QTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q);
    }
}

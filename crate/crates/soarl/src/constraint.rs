//! Natural-language constraint enforcement: entity extraction, limitation
//! splitting, reward-machine monitoring, and predicted-reward shaping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    extract_prompt, parse_entities, AnnotatorBackend, AnnotatorError, AnnotatorRequest, Parsed,
    RequestKind,
};
use crate::env::{
    step, DoneReason, EntityRegistry, GridMap, PrimitiveAction, RawState, RewardScheme,
    StepOutcome, Task,
};
use crate::symbolic::{Proposition, SymbolicState};

pub const DEFAULT_PENALTY: f64 = -1.0;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Forbidden propositions derived from a natural-language constraint.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct LimitationSet {
    forbidden: BTreeSet<Proposition>,
    pub source_constraint: String,
    pub entities: Vec<String>,
}

impl LimitationSet {
    /// Empty set: monitoring disabled.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn forbidden(&self) -> &BTreeSet<Proposition> {
        &self.forbidden
    }

    pub fn is_empty(&self) -> bool {
        self.forbidden.is_empty()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum RmState {
    UInit,
    UBroken,
}

/// Two-state monitor: `u_init` until the first violation, then `u_broken`
/// for the rest of the episode.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct RewardMachine {
    pub state: RmState,
    pub penalty: f64,
}

impl RewardMachine {
    pub fn new(penalty: f64) -> Self {
        RewardMachine { state: RmState::UInit, penalty }
    }

    pub fn reset(&mut self) {
        self.state = RmState::UInit;
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("guarded_step called with the reward machine already broken")]
    ContractViolation,
}

/// Builds the limitation set for a constraint sentence: extract entities via
/// the annotator, then union their registry propositions. An empty
/// constraint disables monitoring.
pub fn build_limitation_set(
    constraint_text: &str,
    backend: &dyn AnnotatorBackend,
    registry: &EntityRegistry,
) -> Result<LimitationSet, AnnotatorError> {
    if constraint_text.trim().is_empty() {
        return Ok(LimitationSet::none());
    }
    assert!(!registry.is_empty(), "entity registry must be non-empty");
    let prompt = extract_prompt(registry, constraint_text);
    let request = AnnotatorRequest::new(RequestKind::ExtractEntities, prompt, "constraint", 0);
    let response = backend.complete(&request)?;
    let candidates = match response.parsed {
        Some(Parsed::Entities(names)) => names.join(", "),
        _ => response.raw.clone(),
    };
    let entities = parse_entities(&candidates, registry);
    let forbidden = entities
        .iter()
        .flat_map(|e| registry.propositions(e).into_iter().flatten().cloned())
        .collect();
    Ok(LimitationSet {
        forbidden,
        source_constraint: constraint_text.to_string(),
        entities,
    })
}

/// Violation indicator: the current symbolic state intersects the
/// limitation set.
pub fn check_violation(sym_state: &SymbolicState, lim: &LimitationSet) -> bool {
    !sym_state.intersection(&lim.forbidden).is_empty()
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("no experienced reward recorded for this state pattern and action")]
pub struct NoExperience;

/// Predicted reward assisting exploration near known-forbidden states:
/// `r_p = λ · experienced_reward`.
pub fn predicted_reward(experienced_reward: f64, lambda: f64) -> f64 {
    lambda * experienced_reward
}

/// Last experienced reward per (forbidden proposition, action) pair; the
/// lookup backing predicted-reward shaping.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct ExperienceIndex {
    entries: BTreeMap<(Proposition, PrimitiveAction), f64>,
}

impl ExperienceIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, prop: Proposition, action: PrimitiveAction, reward: f64) {
        self.entries.insert((prop, action), reward);
    }

    pub fn lookup(&self, prop: &Proposition, action: PrimitiveAction) -> Result<f64, NoExperience> {
        self.entries
            .get(&(prop.clone(), action))
            .copied()
            .ok_or(NoExperience)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One monitored environment step: delegate to the environment, label the
/// post-step state, and on violation flip the reward machine, replace the
/// reward with the penalty, and terminate the episode.
pub fn guarded_step(
    map: &GridMap,
    state: &RawState,
    action: PrimitiveAction,
    task: Task,
    rewards: RewardScheme,
    lim: &LimitationSet,
    rm: &mut RewardMachine,
) -> Result<StepOutcome, ConstraintError> {
    if rm.state == RmState::UBroken {
        return Err(ConstraintError::ContractViolation);
    }
    let mut outcome = step(map, state, action, task, rewards);
    if !lim.is_empty() {
        let labels = crate::env::label_state(&outcome.next_state, map);
        if check_violation(&labels, lim) {
            rm.state = RmState::UBroken;
            outcome.reward = rm.penalty;
            outcome.done = true;
            outcome.done_reason = DoneReason::Violation;
        }
    }
    Ok(outcome)
}

//! Meta-controller: the outer closed loop. Learns action models from
//! observed symbolic transitions, maintains the reward dictionary and
//! model weights, plans over the learned domain, schedules option
//! execution, and falls back to global exploration.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::AnnotatorBackend;
use crate::constraint::{
    guarded_step, predicted_reward, ExperienceIndex, LimitationSet, RewardMachine,
};
use crate::env::{
    label_state, reset, vocabulary, DoneReason, GridMap, RawState, RewardScheme, Task,
};
use crate::options::{
    intrinsic_reward, run_global_option, update_success_rate, ReplayItem, SymbolicOption,
};
use crate::planner::{solve, validate_plan, Plan, PlanningProblem};
use crate::skills::{
    annotate_option, lookup_and_reuse, try_add_skill, Provenance, SemanticLabel, SkillLibrary,
};
use crate::symbolic::{
    apply_unchecked, is_executable, serialize_domain, ActionModel, Domain, Proposition,
    SymbolicState, SymbolicTransition,
};

pub const DEFAULT_PSI: f64 = 100.0;
pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_COUNT_THRESHOLD: u64 = 20;
pub const DEFAULT_SR_THRESHOLD: f64 = 0.95;
pub const DEFAULT_MAX_EPISODE_STEPS: u64 = 500;
pub const DEFAULT_EPISODE_BUDGET: u64 = 3000;

/// End-of-episode passes over each option's replay buffer.
const REPLAY_SWEEPS: usize = 2;

/// Every hyperparameter of one learning run. All fields have defaults.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_final: f64,
    pub psi: f64,
    pub c: f64,
    pub tau: f64,
    pub lambda: f64,
    pub penalty: f64,
    pub step_cost: f64,
    pub task_reward: f64,
    pub option_budget: u64,
    pub max_episode_steps: u64,
    pub success_window: usize,
    pub count_threshold: u64,
    pub sr_threshold: f64,
    pub episode_budget: u64,
    pub max_plan_length: usize,
    /// Diagnostic mode: reused policies never receive Q-updates.
    pub freeze_reused_options: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            alpha: 0.1,
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_final: 0.01,
            psi: DEFAULT_PSI,
            c: DEFAULT_C,
            tau: crate::skills::DEFAULT_TAU,
            lambda: crate::constraint::DEFAULT_LAMBDA,
            penalty: crate::constraint::DEFAULT_PENALTY,
            step_cost: -0.01,
            task_reward: 1.0,
            option_budget: crate::options::DEFAULT_OPTION_BUDGET as u64,
            max_episode_steps: DEFAULT_MAX_EPISODE_STEPS,
            success_window: crate::options::DEFAULT_SUCCESS_WINDOW,
            count_threshold: DEFAULT_COUNT_THRESHOLD,
            sr_threshold: DEFAULT_SR_THRESHOLD,
            episode_budget: DEFAULT_EPISODE_BUDGET,
            max_plan_length: crate::planner::DEFAULT_MAX_PLAN_LENGTH,
            freeze_reused_options: false,
        }
    }
}

impl LearnerConfig {
    /// Per-option ε: decays with the option's own execution count, so every
    /// option explores on its own clock regardless of when it was created.
    pub fn option_epsilon(&self, executions: u64) -> f64 {
        let decay = self.epsilon_start / (1.0 + executions as f64 / self.count_threshold as f64);
        decay.max(self.epsilon_final)
    }

    pub fn rewards(&self) -> RewardScheme {
        RewardScheme { step_cost: self.step_cost, task_reward: self.task_reward }
    }
}

/// Observed extrinsic rewards per (before, after) symbolic pair. Houses R.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct RewardDictionary {
    entries: BTreeMap<(SymbolicState, SymbolicState), Vec<f64>>,
}

/// Rewards kept per pair. A bounded window lets a pair's mean recover once
/// its option starts succeeding instead of being anchored by old failures.
pub const DICT_WINDOW: usize = 30;

impl RewardDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, before: SymbolicState, after: SymbolicState, reward: f64) {
        assert!(before != after, "dictionary pairs require a state change");
        let list = self.entries.entry((before, after)).or_default();
        list.push(reward);
        if list.len() > DICT_WINDOW {
            list.remove(0);
        }
    }

    pub fn rewards(&self, pair: &(SymbolicState, SymbolicState)) -> Option<&[f64]> {
        self.entries.get(pair).map(Vec::as_slice)
    }

    pub fn contains(&self, pair: &(SymbolicState, SymbolicState)) -> bool {
        self.entries.contains_key(pair)
    }

    pub fn pairs(&self) -> impl Iterator<Item = &(SymbolicState, SymbolicState)> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Snapshot statistics for one action model.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct ActionModelStats {
    pub sr: f64,
    pub under_exploration: bool,
    pub weight: f64,
}

pub fn under_exploration(executions: u64, sr: f64, config: &LearnerConfig) -> bool {
    executions < config.count_threshold || sr < config.sr_threshold
}

/// Exploration bonus r_e = c·(1 − sr) while the model is under exploration.
pub fn exploration_bonus(sr: f64, under_exploration: bool, c: f64) -> f64 {
    if under_exploration {
        c * (1.0 - sr)
    } else {
        0.0
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("pair has no recorded rewards; observe before weighting")]
pub struct MissingPair;

/// ρ for a single pair: historical mean extrinsic reward plus the
/// exploration bonus.
pub fn reward_weight(
    dict: &RewardDictionary,
    pair: &(SymbolicState, SymbolicState),
    stats: &ActionModelStats,
    c: f64,
) -> Result<f64, MissingPair> {
    let rewards = dict.rewards(pair).ok_or(MissingPair)?;
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(mean + exploration_bonus(stats.sr, stats.under_exploration, c))
}

/// ρ for a model owning several pairs: mean over the concatenation of all
/// its pairs' reward lists, plus the exploration bonus.
pub fn model_weight(rewards: &[f64], sr: f64, under_exploration: bool, c: f64) -> f64 {
    assert!(!rewards.is_empty(), "a model always has at least one recorded reward");
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    mean + exploration_bonus(sr, under_exploration, c)
}

/// Induces a STRIPS model from one observed transition: effects are the
/// state diff, preconditions the most specific description of `before`.
pub fn induce_model(
    t: &SymbolicTransition,
    vocabulary: &BTreeSet<Proposition>,
    name: &str,
) -> ActionModel {
    let before = t.before.holds();
    let after = t.after.holds();
    let eff_pos: BTreeSet<Proposition> = after.difference(before).cloned().collect();
    let eff_neg: BTreeSet<Proposition> = before.difference(after).cloned().collect();
    let pre_pos = before.clone();
    let pre_neg: BTreeSet<Proposition> = vocabulary.difference(before).cloned().collect();
    ActionModel::new(name, pre_pos, pre_neg, eff_pos, eff_neg)
}

/// Conservative refinement: shrink both precondition sets to stay
/// consistent with the new before-state evidence.
pub fn refine_model(model: &mut ActionModel, before: &SymbolicState) {
    model.pre_pos.retain(|p| before.contains(p));
    model.pre_neg.retain(|p| !before.contains(p));
}

/// An action model together with its evidence.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model: ActionModel,
    /// Every dictionary pair attributed to this model. Non-empty: a model
    /// only exists because some transition was observed.
    pub pairs: BTreeSet<(SymbolicState, SymbolicState)>,
    pub evidence: u64,
}

/// F_{A,O}: bijection from action-model names to option ids.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct OptionMapping {
    pairs: BTreeMap<String, String>,
}

impl OptionMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, action: String, option: String) {
        assert!(
            !self.pairs.values().any(|o| *o == option),
            "mapping must stay bijective"
        );
        let prev = self.pairs.insert(action, option);
        assert!(prev.is_none(), "mapping must stay bijective");
    }

    pub fn get(&self, action: &str) -> Option<&str> {
        self.pairs.get(action).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("plan step `{0}` has no mapped option")]
pub struct UnmappedAction(pub String);

/// Resolves a plan into its options, in plan order.
pub fn map_actions_to_options<'o>(
    plan: &Plan,
    mapping: &OptionMapping,
    options: &'o BTreeMap<String, SymbolicOption>,
) -> Result<Vec<&'o SymbolicOption>, UnmappedAction> {
    plan.steps
        .iter()
        .map(|step| {
            mapping
                .get(step)
                .and_then(|id| options.get(id))
                .ok_or_else(|| UnmappedAction(step.clone()))
        })
        .collect()
}

fn map_option_ids(plan: &Plan, mapping: &OptionMapping) -> Result<Vec<String>, UnmappedAction> {
    plan.steps
        .iter()
        .map(|step| {
            mapping
                .get(step)
                .map(str::to_string)
                .ok_or_else(|| UnmappedAction(step.clone()))
        })
        .collect()
}

/// The dynamic goal G: the reachable state maximizing summed mean rewards
/// over the learned models, unless the config pins the task goal.
pub fn update_goal(
    domain: &Domain,
    initial: &SymbolicState,
    mean_rewards: &BTreeMap<String, f64>,
    max_depth: usize,
    config_goal: Option<&SymbolicState>,
) -> SymbolicState {
    if let Some(goal) = config_goal {
        return goal.clone();
    }
    let mut layer: BTreeMap<SymbolicState, f64> = BTreeMap::new();
    layer.insert(initial.clone(), 0.0);
    let mut best_state = initial.clone();
    let mut best_value = 0.0;
    for _ in 0..max_depth {
        let mut next: BTreeMap<SymbolicState, f64> = BTreeMap::new();
        for (state, value) in &layer {
            for (name, action) in domain.actions() {
                if !is_executable(state, action) {
                    continue;
                }
                let succ = apply_unchecked(state, action);
                let v = value + mean_rewards.get(name).copied().unwrap_or(0.0);
                let entry = next.entry(succ).or_insert(f64::NEG_INFINITY);
                if v > *entry {
                    *entry = v;
                }
            }
        }
        for (state, value) in &next {
            if *value > best_value {
                best_value = *value;
                best_state = state.clone();
            }
        }
        if next.is_empty() {
            break;
        }
        layer = next;
    }
    best_state
}

pub fn task_goal(task: Task) -> SymbolicState {
    match task {
        Task::DeliverCoffee => SymbolicState::from_names(&["deliveredCoffee"]),
        Task::DeliverMail => SymbolicState::from_names(&["deliveredMail"]),
        Task::DeliverBoth => SymbolicState::from_names(&["deliveredCoffee", "deliveredMail"]),
    }
}

/// Inputs behind one reported weight, kept so ρ can be recomputed from raw
/// data after the fact.
#[derive(Clone, PartialEq, Debug)]
pub struct WeightInputs {
    pub rewards: Vec<f64>,
    pub sr: f64,
    pub under_exploration: bool,
}

/// Everything observable about one episode.
#[derive(Clone, PartialEq, Debug)]
pub struct EpisodeTrace {
    pub episode: u64,
    pub steps: u64,
    pub extrinsic_return: f64,
    pub success: bool,
    pub violated: bool,
    pub done_reason: DoneReason,
    pub plan: Vec<String>,
    pub plan_completed: bool,
    pub weights: BTreeMap<String, f64>,
    pub weight_inputs: BTreeMap<String, WeightInputs>,
    pub reuse_events: Vec<SemanticLabel>,
    pub new_models: Vec<String>,
    pub option_sr: BTreeMap<String, f64>,
}

/// Serializable snapshot for resumable runs.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub domain: String,
    pub models: Vec<ModelRecord>,
    pub mapping: OptionMapping,
    pub dictionary: Vec<DictEntry>,
    pub options: BTreeMap<String, SymbolicOption>,
    pub labels: BTreeMap<String, SemanticLabel>,
    pub best_plan: Option<Plan>,
    pub cumulative_samples: u64,
    pub cumulative_violations: u64,
}

#[derive(Serialize, Deserialize)]
pub struct DictEntry {
    pub before: SymbolicState,
    pub after: SymbolicState,
    pub rewards: Vec<f64>,
}

type Signature = (BTreeSet<Proposition>, BTreeSet<Proposition>);

fn signature(before: &SymbolicState, after: &SymbolicState) -> Signature {
    (
        after.holds().difference(before.holds()).cloned().collect(),
        before.holds().difference(after.holds()).cloned().collect(),
    )
}

/// One task's learning state: domain, models, options, dictionary, plan
/// cache, and counters. Single-threaded owner of everything mutable.
pub struct Learner<'a> {
    pub config: LearnerConfig,
    map: GridMap,
    world: String,
    task: Task,
    goal: SymbolicState,
    lim: LimitationSet,
    backend: &'a dyn AnnotatorBackend,
    rng: ChaCha8Rng,
    domain: Domain,
    models: BTreeMap<String, ModelRecord>,
    sig_index: BTreeMap<Signature, String>,
    options: BTreeMap<String, SymbolicOption>,
    labels: BTreeMap<String, SemanticLabel>,
    last_label: Option<SemanticLabel>,
    mapping: OptionMapping,
    dict: RewardDictionary,
    experience: ExperienceIndex,
    best_plan: Option<Plan>,
    next_model_id: u32,
    pub cumulative_samples: u64,
    pub cumulative_violations: u64,
}

struct OptionRun {
    succeeded: bool,
    seg_reward: f64,
    steps_taken: u64,
    start_sym: SymbolicState,
}

#[allow(clippy::too_many_arguments)]
fn execute_option(
    opt: &mut SymbolicOption,
    greedy: bool,
    frozen: bool,
    map: &GridMap,
    task: Task,
    config: &LearnerConfig,
    lim: &LimitationSet,
    rm: &mut RewardMachine,
    experience: &mut ExperienceIndex,
    rng: &mut ChaCha8Rng,
    state: &mut RawState,
    sym: &mut SymbolicState,
    steps: &mut u64,
    ret: &mut f64,
    violated: &mut bool,
    violations: &mut u64,
    done: &mut bool,
    done_reason: &mut DoneReason,
) -> OptionRun {
    let start_sym = sym.clone();
    let epsilon = if greedy { 0.0 } else { config.option_epsilon(opt.executions) };
    let rewards = config.rewards();
    let mut seg_reward = 0.0;
    let mut steps_taken = 0;
    let mut succeeded = false;
    for _ in 0..config.option_budget {
        if *steps >= config.max_episode_steps {
            break;
        }
        let action = opt.policy.select(state, epsilon, rng);
        let outcome = guarded_step(map, state, action, task, rewards, lim, rm)
            .expect("episode continues only while the reward machine is intact");
        *steps += 1;
        steps_taken += 1;
        seg_reward += outcome.reward;
        *ret += outcome.reward;
        let next_sym = label_state(&outcome.next_state, map);

        let mut learn_reward = outcome.reward;
        if !lim.is_empty() {
            for prop in next_sym.intersection(lim.forbidden()) {
                if let Ok(exp) = experience.lookup(&prop, action) {
                    learn_reward += predicted_reward(exp, config.lambda);
                }
            }
        }
        if outcome.done_reason == DoneReason::Violation {
            *violated = true;
            *violations += 1;
            for prop in next_sym.intersection(lim.forbidden()) {
                experience.record(prop, action, outcome.reward);
            }
        }

        let terminated = opt.termination(&start_sym, &next_sym);
        let learn_signal = intrinsic_reward(learn_reward, terminated, config.psi);
        let terminal = terminated || outcome.done;
        if !frozen {
            opt.policy.q_update(state, action, learn_signal, &outcome.next_state, terminal);
        }
        opt.replay.push(ReplayItem {
            state: *state,
            action,
            reward: learn_signal,
            next_state: outcome.next_state,
            terminal,
        });

        *state = outcome.next_state;
        *sym = next_sym;
        if outcome.done {
            *done = true;
            *done_reason = outcome.done_reason;
        }
        if terminated {
            succeeded = true;
            break;
        }
        if outcome.done {
            break;
        }
    }
    opt.executions += 1;
    update_success_rate(opt, succeeded);
    OptionRun { succeeded, seg_reward, steps_taken, start_sym }
}

impl<'a> Learner<'a> {
    pub fn new(
        config: LearnerConfig,
        map: GridMap,
        world: &str,
        task: Task,
        lim: LimitationSet,
        backend: &'a dyn AnnotatorBackend,
        seed: u64,
    ) -> Self {
        let domain = Domain::with_vocabulary(vocabulary(&map));
        Learner {
            goal: task_goal(task),
            config,
            map,
            world: world.to_string(),
            task,
            lim,
            backend,
            rng: ChaCha8Rng::seed_from_u64(seed),
            domain,
            models: BTreeMap::new(),
            sig_index: BTreeMap::new(),
            options: BTreeMap::new(),
            labels: BTreeMap::new(),
            last_label: None,
            mapping: OptionMapping::new(),
            dict: RewardDictionary::new(),
            experience: ExperienceIndex::new(),
            best_plan: None,
            next_model_id: 0,
            cumulative_samples: 0,
            cumulative_violations: 0,
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn models(&self) -> &BTreeMap<String, ModelRecord> {
        &self.models
    }

    pub fn options(&self) -> &BTreeMap<String, SymbolicOption> {
        &self.options
    }

    pub fn labels(&self) -> &BTreeMap<String, SemanticLabel> {
        &self.labels
    }

    pub fn mapping(&self) -> &OptionMapping {
        &self.mapping
    }

    pub fn dict(&self) -> &RewardDictionary {
        &self.dict
    }

    pub fn best_plan(&self) -> Option<&Plan> {
        self.best_plan.as_ref()
    }

    fn domain_info(&self) -> String {
        let props: Vec<String> =
            self.domain.vocabulary().iter().map(|p| p.to_string()).collect();
        format!("office gridworld; propositions: {}", props.join(", "))
    }

    fn stats_inputs(&self, name: &str) -> (u64, f64) {
        let opt = &self.options[name];
        (opt.executions, opt.success_rate())
    }

    /// Recomputes every model's ρ from the dictionary. Also returns the raw
    /// inputs so callers can audit the arithmetic.
    fn compute_weights(&self) -> (BTreeMap<String, f64>, BTreeMap<String, WeightInputs>) {
        let mut weights = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        for (name, record) in &self.models {
            let (executions, sr) = self.stats_inputs(name);
            let exploring = under_exploration(executions, sr, &self.config);
            let mut rewards = Vec::new();
            for pair in &record.pairs {
                rewards.extend_from_slice(
                    self.dict.rewards(pair).expect("recorded pairs stay in the dictionary"),
                );
            }
            let w = model_weight(&rewards, sr, exploring, self.config.c);
            weights.insert(name.clone(), w);
            inputs.insert(name.clone(), WeightInputs { rewards, sr, under_exploration: exploring });
        }
        (weights, inputs)
    }

    /// Routes one observed transition: record the reward, then refine the
    /// matching model or induce a new one (with annotation and library
    /// lookup).
    fn observe_transition(
        &mut self,
        t: &SymbolicTransition,
        library: &SkillLibrary,
        episode: u64,
        reuse_events: &mut Vec<SemanticLabel>,
        new_models: &mut Vec<String>,
    ) {
        self.dict.record(t.before.clone(), t.after.clone(), t.extrinsic_reward);
        let sig = signature(&t.before, &t.after);
        if let Some(name) = self.sig_index.get(&sig).cloned() {
            let record = self.models.get_mut(&name).expect("index and models stay in sync");
            refine_model(&mut record.model, &t.before);
            record.pairs.insert((t.before.clone(), t.after.clone()));
            record.evidence += 1;
            self.domain.replace_action(record.model.clone());
            let model = record.model.clone();
            self.options
                .get_mut(&name)
                .expect("every model has an option")
                .sync_with(&model);
            return;
        }

        self.next_model_id += 1;
        let name = format!("act{}", self.next_model_id);
        let model = induce_model(t, self.domain.vocabulary(), &name);
        self.domain.add_action(model.clone()).expect("vocabulary is closed over the map");
        let mut option = SymbolicOption::from_model(
            &model,
            self.config.alpha,
            self.config.gamma,
            self.config.success_window,
        );
        let label = annotate_option(
            self.backend,
            &self.domain_info(),
            &t.before,
            &t.after,
            self.last_label.as_ref(),
            &self.world,
            episode,
        );
        if lookup_and_reuse(library, &label, &mut option) {
            log::info!("skill reuse: {label} -> {name}");
            reuse_events.push(label.clone());
        }
        self.labels.insert(name.clone(), label.clone());
        self.last_label = Some(label);
        self.mapping.insert(name.clone(), name.clone());
        let mut pairs = BTreeSet::new();
        pairs.insert((t.before.clone(), t.after.clone()));
        self.models.insert(name.clone(), ModelRecord { model, pairs, evidence: 1 });
        self.sig_index.insert(sig, name.clone());
        self.options.insert(name.clone(), option);
        new_models.push(name);
    }

    /// One full episode: reset, plan, execute mapped options under the
    /// constraint monitor, then explore globally until the episode ends.
    pub fn run_episode(&mut self, episode: u64, library: &mut SkillLibrary) -> EpisodeTrace {
        let mut rm = RewardMachine::new(self.config.penalty);
        let mut state = reset(&self.map, &mut self.rng);
        let mut sym = label_state(&state, &self.map);
        let mut steps: u64 = 0;
        let mut ret = 0.0;
        let mut violated = false;
        let mut done = false;
        let mut done_reason = DoneReason::Running;
        let mut reuse_events = Vec::new();
        let mut new_models = Vec::new();

        let (weights, weight_inputs) = self.compute_weights();
        let under_map: BTreeMap<String, bool> = weight_inputs
            .iter()
            .map(|(name, wi)| (name.clone(), wi.under_exploration))
            .collect();

        // plan over weights shifted so every step is strictly negative: the
        // search then returns the cheapest goal-reaching plan (still favoring
        // high-ρ steps) instead of padding with positive-weight cycles
        let shift = 1.0 + weights.values().copied().fold(0.0, f64::max);
        let mut problem = PlanningProblem::new(self.domain.clone(), sym.clone(), self.goal.clone());
        problem.weights = weights.iter().map(|(k, v)| (k.clone(), v - shift)).collect();
        problem.max_plan_length = self.config.max_plan_length;
        let floor = self
            .best_plan
            .as_ref()
            .map(|p| p.steps.iter().map(|s| problem.weight(s)).sum::<f64>());
        let plan = match solve(&problem, floor) {
            Some(p) => Some(p),
            None => self.best_plan.clone().filter(|p| validate_plan(&problem, p)),
        };

        let mut plan_completed = false;
        if let Some(plan) = &plan {
            let option_ids =
                map_option_ids(plan, &self.mapping).expect("mapping covers every planned step");
            plan_completed = true;
            for id in option_ids {
                if done || steps >= self.config.max_episode_steps {
                    plan_completed = false;
                    break;
                }
                if !self.options[&id].initiation(&sym) {
                    // mid-plan state diverged (an earlier option overshot);
                    // abandon and fall back to exploration
                    plan_completed = false;
                    break;
                }
                let greedy = !under_map.get(&id).copied().unwrap_or(true)
                    || self.options[&id].reused;
                let run = {
                    let opt = self.options.get_mut(&id).expect("mapped options exist");
                    let frozen = opt.reused && self.config.freeze_reused_options;
                    execute_option(
                        opt,
                        greedy,
                        frozen,
                        &self.map,
                        self.task,
                        &self.config,
                        &self.lim,
                        &mut rm,
                        &mut self.experience,
                        &mut self.rng,
                        &mut state,
                        &mut sym,
                        &mut steps,
                        &mut ret,
                        &mut violated,
                        &mut self.cumulative_violations,
                        &mut done,
                        &mut done_reason,
                    )
                };
                if run.succeeded && sym != run.start_sym {
                    let t = SymbolicTransition::new(run.start_sym, sym.clone(), run.seg_reward);
                    self.observe_transition(&t, library, episode, &mut reuse_events, &mut new_models);
                } else if !run.succeeded && run.steps_taken > 0 {
                    // a failed attempt is still experience for the intended
                    // pair; without this, chronically failing models keep
                    // their optimistic means and poison planning. Charge the
                    // pure step cost, not incidental rewards collected along
                    // the way, so unrelated successes cannot inflate the pair
                    let cost = run.steps_taken as f64 * self.config.step_cost;
                    let intended = self.options[&id].expected_after(&run.start_sym);
                    if intended != run.start_sym {
                        self.dict.record(run.start_sym.clone(), intended.clone(), cost);
                        self.models
                            .get_mut(&id)
                            .expect("mapped options have models")
                            .pairs
                            .insert((run.start_sym.clone(), intended));
                    }
                }
                if !run.succeeded {
                    plan_completed = false;
                    break;
                }
            }
            if plan_completed && done_reason == DoneReason::TaskComplete {
                self.best_plan = Some(plan.clone());
            }
        }

        // global exploration: random walks until something symbolic happens
        while !done && steps < self.config.max_episode_steps {
            let remaining = (self.config.max_episode_steps - steps)
                .min(self.config.option_budget);
            let map = &self.map;
            let task = self.task;
            let rewards = self.config.rewards();
            let lim = &self.lim;
            let experience = &mut self.experience;
            let mut gsteps: u64 = 0;
            let mut gret = 0.0;
            let mut gviol = 0u64;
            let mut greason = DoneReason::Running;
            let (transition, end_state, _, env_done) = run_global_option(
                |s, a| {
                    let outcome = guarded_step(map, s, a, task, rewards, lim, &mut rm)
                        .expect("walk stops at the first violation");
                    gsteps += 1;
                    gret += outcome.reward;
                    if outcome.done {
                        greason = outcome.done_reason;
                    }
                    if outcome.done_reason == DoneReason::Violation {
                        gviol += 1;
                        let next_sym = label_state(&outcome.next_state, map);
                        for prop in next_sym.intersection(lim.forbidden()) {
                            experience.record(prop, a, outcome.reward);
                        }
                    }
                    outcome
                },
                |s| label_state(s, map),
                state,
                remaining as usize,
                &mut self.rng,
            );
            steps += gsteps;
            ret += gret;
            if gviol > 0 {
                violated = true;
                self.cumulative_violations += gviol;
            }
            state = end_state;
            if let Some(t) = &transition {
                self.observe_transition(t, library, episode, &mut reuse_events, &mut new_models);
            }
            if env_done {
                done = true;
                done_reason = greason;
            }
        }
        if !done {
            done_reason = DoneReason::MaxSteps;
        }

        // end of episode: replay sweep, then offer validated options to the
        // library
        for opt in self.options.values_mut() {
            let frozen = opt.reused && self.config.freeze_reused_options;
            let buffer = std::mem::take(&mut opt.replay);
            if !frozen {
                // reverse order propagates a terminal bonus down the whole
                // trajectory in a single pass
                for _ in 0..REPLAY_SWEEPS {
                    for item in buffer.iter().rev() {
                        opt.policy.q_update(
                            &item.state,
                            item.action,
                            item.reward,
                            &item.next_state,
                            item.terminal,
                        );
                    }
                }
            }
        }
        for (name, opt) in &self.options {
            let exploring = under_exploration(opt.executions, opt.success_rate(), &self.config);
            if exploring {
                continue;
            }
            if let Some(label) = self.labels.get(name) {
                let provenance = Provenance {
                    world: self.world.clone(),
                    task: self.task.id(),
                    episode,
                    timestamp: episode,
                };
                try_add_skill(library, opt, label, provenance);
            }
        }

        self.cumulative_samples += steps;
        let option_sr = self
            .options
            .iter()
            .map(|(name, opt)| (name.clone(), opt.success_rate()))
            .collect();
        EpisodeTrace {
            episode,
            steps,
            extrinsic_return: ret,
            success: done_reason == DoneReason::TaskComplete,
            violated,
            done_reason,
            plan: plan.map(|p| p.steps).unwrap_or_default(),
            plan_completed,
            weights,
            weight_inputs,
            reuse_events,
            new_models,
            option_sr,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            domain: serialize_domain(&self.domain),
            models: self.models.values().cloned().collect(),
            mapping: self.mapping.clone(),
            dictionary: self
                .dict
                .entries
                .iter()
                .map(|((before, after), rewards)| DictEntry {
                    before: before.clone(),
                    after: after.clone(),
                    rewards: rewards.clone(),
                })
                .collect(),
            options: self.options.clone(),
            labels: self.labels.clone(),
            best_plan: self.best_plan.clone(),
            cumulative_samples: self.cumulative_samples,
            cumulative_violations: self.cumulative_violations,
        }
    }
}

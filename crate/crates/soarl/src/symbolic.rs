//! Propositional states, STRIPS-style action models, and the line-oriented
//! domain-description format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A grounded proposition: an identifier plus an ordered (possibly empty)
/// argument list. Purely syntactic; no variables.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Proposition {
    name: String,
    args: Vec<String>,
}

impl Proposition {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        assert!(
            !name.is_empty() && !name.chars().any(char::is_whitespace),
            "proposition name must be non-empty and whitespace-free"
        );
        Proposition { name, args: Vec::new() }
    }

    pub fn with_args(name: impl Into<String>, args: &[&str]) -> Self {
        let mut p = Self::new(name);
        p.args = args.iter().map(|a| a.to_string()).collect();
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn args(&self) -> &[String] {
        &self.args
    }

    /// Parses `name` or `name(a,b)`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let text = text.trim();
        if text.is_empty() {
            return Err("empty proposition".into());
        }
        match text.find('(') {
            None => {
                if text.chars().any(char::is_whitespace) || text.contains(')') {
                    return Err(format!("malformed proposition `{text}`"));
                }
                Ok(Proposition::new(text))
            }
            Some(open) => {
                if !text.ends_with(')') {
                    return Err(format!("unbalanced parentheses in `{text}`"));
                }
                let name = &text[..open];
                if name.is_empty() || name.chars().any(char::is_whitespace) {
                    return Err(format!("malformed proposition `{text}`"));
                }
                let inner = &text[open + 1..text.len() - 1];
                let args: Vec<&str> = if inner.trim().is_empty() {
                    Vec::new()
                } else {
                    inner.split(',').map(str::trim).collect()
                };
                if args.iter().any(|a| a.is_empty() || a.chars().any(char::is_whitespace)) {
                    return Err(format!("malformed argument list in `{text}`"));
                }
                Ok(Proposition::with_args(name, &args))
            }
        }
    }
}

impl fmt::Display for Proposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.args.is_empty() {
            write!(f, "{}", self.name)
        } else {
            write!(f, "{}({})", self.name, self.args.join(","))
        }
    }
}

/// A symbolic state: the set of propositions currently true.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
pub struct SymbolicState {
    holds: BTreeSet<Proposition>,
}

impl SymbolicState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_props<I: IntoIterator<Item = Proposition>>(props: I) -> Self {
        SymbolicState { holds: props.into_iter().collect() }
    }

    /// Convenience constructor for argument-free propositions.
    pub fn from_names(names: &[&str]) -> Self {
        Self::from_props(names.iter().map(|n| Proposition::new(*n)))
    }

    pub fn holds(&self) -> &BTreeSet<Proposition> {
        &self.holds
    }

    pub fn contains(&self, p: &Proposition) -> bool {
        self.holds.contains(p)
    }

    pub fn insert(&mut self, p: Proposition) {
        self.holds.insert(p);
    }

    pub fn len(&self) -> usize {
        self.holds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.holds.is_empty()
    }

    pub fn is_superset(&self, other: &SymbolicState) -> bool {
        self.holds.is_superset(&other.holds)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Proposition> {
        self.holds.iter()
    }

    pub fn intersection(&self, other: &BTreeSet<Proposition>) -> BTreeSet<Proposition> {
        self.holds.intersection(other).cloned().collect()
    }

    pub fn difference(&self, other: &SymbolicState) -> BTreeSet<Proposition> {
        self.holds.difference(&other.holds).cloned().collect()
    }
}

impl fmt::Display for SymbolicState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner: Vec<String> = self.holds.iter().map(|p| p.to_string()).collect();
        write!(f, "{{{}}}", inner.join(", "))
    }
}

/// A STRIPS-style operator over propositions.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ActionModel {
    pub name: String,
    pub pre_pos: BTreeSet<Proposition>,
    pub pre_neg: BTreeSet<Proposition>,
    pub eff_pos: BTreeSet<Proposition>,
    pub eff_neg: BTreeSet<Proposition>,
}

impl ActionModel {
    pub fn new(
        name: impl Into<String>,
        pre_pos: BTreeSet<Proposition>,
        pre_neg: BTreeSet<Proposition>,
        eff_pos: BTreeSet<Proposition>,
        eff_neg: BTreeSet<Proposition>,
    ) -> Self {
        assert!(
            pre_pos.is_disjoint(&pre_neg),
            "pre+ and pre- must be disjoint"
        );
        assert!(
            eff_pos.is_disjoint(&eff_neg),
            "eff+ and eff- must be disjoint"
        );
        ActionModel { name: name.into(), pre_pos, pre_neg, eff_pos, eff_neg }
    }

    /// All propositions referenced by this model.
    pub fn referenced(&self) -> BTreeSet<Proposition> {
        self.pre_pos
            .iter()
            .chain(&self.pre_neg)
            .chain(&self.eff_pos)
            .chain(&self.eff_neg)
            .cloned()
            .collect()
    }
}

/// Executability: `pre_pos ⊆ s` and `s ∩ pre_neg = ∅`.
pub fn is_executable(state: &SymbolicState, action: &ActionModel) -> bool {
    action.pre_pos.is_subset(state.holds())
        && state.holds().is_disjoint(&action.pre_neg)
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("action `{action}` is not executable in state {state}")]
pub struct NotExecutable {
    pub action: String,
    pub state: String,
}

/// Successor state `(s − eff_neg) ∪ eff_pos`. Deletion precedes addition,
/// so a proposition in both effect sets survives.
pub fn apply(state: &SymbolicState, action: &ActionModel) -> Result<SymbolicState, NotExecutable> {
    if !is_executable(state, action) {
        return Err(NotExecutable {
            action: action.name.clone(),
            state: state.to_string(),
        });
    }
    Ok(apply_unchecked(state, action))
}

/// Effect application without the precondition check. Used for option
/// termination tests, where only the effect arithmetic matters.
pub fn apply_unchecked(state: &SymbolicState, action: &ActionModel) -> SymbolicState {
    let mut holds = state.holds().clone();
    for p in &action.eff_neg {
        holds.remove(p);
    }
    for p in &action.eff_pos {
        holds.insert(p.clone());
    }
    SymbolicState { holds }
}

/// A planning domain: vocabulary plus named action models.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct Domain {
    vocabulary: BTreeSet<Proposition>,
    actions: BTreeMap<String, ActionModel>,
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("action `{0}` references proposition `{1}` outside the vocabulary")]
    VocabularyClosure(String, String),
    #[error("duplicate action name `{0}`")]
    DuplicateAction(String),
}

impl Domain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_vocabulary<I: IntoIterator<Item = Proposition>>(vocab: I) -> Self {
        Domain { vocabulary: vocab.into_iter().collect(), actions: BTreeMap::new() }
    }

    pub fn vocabulary(&self) -> &BTreeSet<Proposition> {
        &self.vocabulary
    }

    pub fn add_proposition(&mut self, p: Proposition) {
        self.vocabulary.insert(p);
    }

    pub fn add_action(&mut self, action: ActionModel) -> Result<(), DomainError> {
        for p in action.referenced() {
            if !self.vocabulary.contains(&p) {
                return Err(DomainError::VocabularyClosure(action.name.clone(), p.to_string()));
            }
        }
        if self.actions.contains_key(&action.name) {
            return Err(DomainError::DuplicateAction(action.name.clone()));
        }
        self.actions.insert(action.name.clone(), action);
        Ok(())
    }

    /// Replaces an existing model (same name) after precondition refinement.
    pub fn replace_action(&mut self, action: ActionModel) {
        self.actions.insert(action.name.clone(), action);
    }

    pub fn action(&self, name: &str) -> Option<&ActionModel> {
        self.actions.get(name)
    }

    pub fn actions(&self) -> &BTreeMap<String, ActionModel> {
        &self.actions
    }
}

/// A recorded change of symbolic state together with the extrinsic reward
/// accumulated while producing it.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SymbolicTransition {
    pub before: SymbolicState,
    pub after: SymbolicState,
    pub extrinsic_reward: f64,
}

impl SymbolicTransition {
    pub fn new(before: SymbolicState, after: SymbolicState, extrinsic_reward: f64) -> Self {
        assert!(before != after, "a symbolic transition requires a state change");
        SymbolicTransition { before, after, extrinsic_reward }
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("parse error at line {line}: {message} (near `{token}`)")]
pub struct ParseError {
    pub line: usize,
    pub token: String,
    pub message: String,
}

fn parse_err(line: usize, token: &str, message: impl Into<String>) -> ParseError {
    ParseError { line, token: token.to_string(), message: message.into() }
}

/// Splits a comma-separated proposition list, respecting parentheses.
/// The empty list is written `-`.
fn split_prop_list(text: &str, line: usize) -> Result<Vec<Proposition>, ParseError> {
    if text == "-" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for ch in text.chars() {
        match ch {
            '(' => {
                depth += 1;
                current.push(ch);
            }
            ')' => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| parse_err(line, text, "unbalanced parentheses"))?;
                current.push(ch);
            }
            ',' if depth == 0 => {
                out.push(current.clone());
                current.clear();
            }
            _ => current.push(ch),
        }
    }
    if depth != 0 {
        return Err(parse_err(line, text, "unbalanced parentheses"));
    }
    out.push(current);
    out.iter()
        .map(|t| Proposition::parse(t).map_err(|m| parse_err(line, t, m)))
        .collect()
}

/// Parses the line-oriented domain format:
///
/// ```text
/// prop haveCoffee
/// action getCoffee pre+ - pre- haveCoffee eff+ haveCoffee eff- -
/// ```
pub fn parse_domain(text: &str) -> Result<Domain, ParseError> {
    let mut domain = Domain::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "prop" => {
                if tokens.len() != 2 {
                    return Err(parse_err(line_no, line, "expected `prop <name>`"));
                }
                let p = Proposition::parse(tokens[1])
                    .map_err(|m| parse_err(line_no, tokens[1], m))?;
                domain.add_proposition(p);
            }
            "action" => {
                if tokens.len() != 10
                    || tokens[2] != "pre+"
                    || tokens[4] != "pre-"
                    || tokens[6] != "eff+"
                    || tokens[8] != "eff-"
                {
                    return Err(parse_err(
                        line_no,
                        line,
                        "expected `action <name> pre+ <..> pre- <..> eff+ <..> eff- <..>`",
                    ));
                }
                let name = tokens[1];
                if name.is_empty() {
                    return Err(parse_err(line_no, name, "empty action name"));
                }
                let pre_pos = split_prop_list(tokens[3], line_no)?;
                let pre_neg = split_prop_list(tokens[5], line_no)?;
                let eff_pos = split_prop_list(tokens[7], line_no)?;
                let eff_neg = split_prop_list(tokens[9], line_no)?;
                let model = ActionModel::new(
                    name,
                    pre_pos.into_iter().collect(),
                    pre_neg.into_iter().collect(),
                    eff_pos.into_iter().collect(),
                    eff_neg.into_iter().collect(),
                );
                domain
                    .add_action(model)
                    .map_err(|e| parse_err(line_no, name, e.to_string()))?;
            }
            other => {
                return Err(parse_err(line_no, other, "unknown declaration"));
            }
        }
    }
    Ok(domain)
}

fn format_prop_list(props: &BTreeSet<Proposition>) -> String {
    if props.is_empty() {
        "-".to_string()
    } else {
        props.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Canonical form: propositions sorted lexicographically, actions by name.
pub fn serialize_domain(domain: &Domain) -> String {
    let mut out = String::new();
    for p in &domain.vocabulary {
        out.push_str(&format!("prop {p}\n"));
    }
    for (name, a) in &domain.actions {
        out.push_str(&format!(
            "action {} pre+ {} pre- {} eff+ {} eff- {}\n",
            name,
            format_prop_list(&a.pre_pos),
            format_prop_list(&a.pre_neg),
            format_prop_list(&a.eff_pos),
            format_prop_list(&a.eff_neg),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(name: &str) -> Proposition {
        Proposition::new(name)
    }

    fn set(names: &[&str]) -> BTreeSet<Proposition> {
        names.iter().map(|n| p(n)).collect()
    }

    fn model(pre_pos: &[&str], pre_neg: &[&str], eff_pos: &[&str], eff_neg: &[&str]) -> ActionModel {
        ActionModel::new("a", set(pre_pos), set(pre_neg), set(eff_pos), set(eff_neg))
    }

    #[test]
    fn executability_examples() {
        let s = SymbolicState::from_names(&["p", "q"]);
        assert!(is_executable(&s, &model(&["p"], &["r"], &[], &[])));

        let s = SymbolicState::from_names(&["p", "r"]);
        assert!(!is_executable(&s, &model(&["p"], &["r"], &[], &[])));

        let s = SymbolicState::empty();
        assert!(is_executable(&s, &model(&[], &[], &[], &[])));
    }

    #[test]
    fn executability_inclusive_subset() {
        // preconditions exactly equal to the state must be executable
        let s = SymbolicState::from_names(&["p"]);
        assert!(is_executable(&s, &model(&["p"], &[], &[], &[])));
    }

    #[test]
    fn apply_examples() {
        let s = SymbolicState::from_names(&["haveCoffee"]);
        let a = model(&[], &[], &["deliveredCoffee"], &["haveCoffee"]);
        assert_eq!(
            apply(&s, &a).unwrap(),
            SymbolicState::from_names(&["deliveredCoffee"])
        );

        let s = SymbolicState::from_names(&["p"]);
        assert_eq!(apply(&s, &model(&[], &[], &[], &[])).unwrap(), s);

        // deletion precedes addition: eff_pos wins when a prop is in both sets
        let s = SymbolicState::from_names(&["p", "q"]);
        let mut a = model(&[], &[], &["q"], &[]);
        a.eff_neg = set(&[]); // eff sets must stay disjoint via the constructor
        let survived = apply_unchecked(
            &SymbolicState::from_names(&["p", "q"]),
            &ActionModel {
                name: "x".into(),
                pre_pos: set(&[]),
                pre_neg: set(&[]),
                eff_pos: set(&["q"]),
                eff_neg: set(&["q"]),
            },
        );
        assert_eq!(survived, SymbolicState::from_names(&["p", "q"]));
        let _ = (s, a);
    }

    #[test]
    fn apply_rejects_inexecutable() {
        let s = SymbolicState::empty();
        let a = model(&["p"], &[], &[], &[]);
        assert!(apply(&s, &a).is_err());
    }

    #[test]
    fn executability_matches_brute_force_over_small_universe() {
        let universe = ["a", "b", "c", "d", "e", "f"];
        let action = model(&["a", "c"], &["e"], &[], &[]);
        for mask in 0u32..64 {
            let names: Vec<&str> = universe
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, n)| *n)
                .collect();
            let s = SymbolicState::from_names(&names);
            let brute = action.pre_pos.iter().all(|p| s.contains(p))
                && !action.pre_neg.iter().any(|p| s.contains(p));
            assert_eq!(is_executable(&s, &action), brute, "state {s}");
        }
    }

    #[test]
    fn parse_smallest_document() {
        let d = parse_domain("prop haveCoffee\naction getCoffee pre+ - pre- - eff+ haveCoffee eff- -\n")
            .unwrap();
        assert_eq!(d.actions().len(), 1);
        assert!(d.vocabulary().contains(&p("haveCoffee")));
    }

    #[test]
    fn parse_rejects_undeclared_proposition() {
        let err = parse_domain("action getCoffee pre+ - pre- - eff+ haveCoffee eff- -\n");
        assert!(err.is_err());
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = parse_domain("prop ok\nbogus line here\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn parse_propositions_with_args() {
        let d = parse_domain("prop on(plant)\nprop at(x,y)\naction go pre+ on(plant) pre- - eff+ at(x,y) eff- on(plant)\n").unwrap();
        assert!(d.vocabulary().contains(&Proposition::with_args("on", &["plant"])));
        assert_eq!(d.actions().len(), 1);
    }

    #[test]
    fn serialize_empty_domain() {
        assert_eq!(serialize_domain(&Domain::new()), "");
    }

    #[test]
    fn canonicalization_is_order_independent() {
        let a = "prop b\nprop a\naction z pre+ - pre- - eff+ a eff- -\naction y pre+ b,a pre- - eff+ - eff- -\n";
        let b = "prop a\nprop b\naction y pre+ a,b pre- - eff+ - eff- -\naction z pre+ - pre- - eff+ a eff- -\n";
        let da = parse_domain(a).unwrap();
        let db = parse_domain(b).unwrap();
        assert_eq!(serialize_domain(&da), serialize_domain(&db));
    }

    fn arb_domain() -> impl Strategy<Value = Domain> {
        let names = prop::sample::subsequence(
            vec!["pa", "pb", "pc", "pd", "pe", "pf"],
            1..=6,
        );
        (names, 0usize..5).prop_map(|(vocab, n_actions)| {
            let mut d = Domain::new();
            for v in &vocab {
                d.add_proposition(p(v));
            }
            for i in 0..n_actions {
                let pre_pos: BTreeSet<_> = vocab.iter().take(i % vocab.len().max(1)).map(|v| p(v)).collect();
                let eff_pos: BTreeSet<_> = vocab.iter().skip(i % vocab.len().max(1)).map(|v| p(v)).collect();
                let model = ActionModel::new(format!("act{i}"), pre_pos, set(&[]), eff_pos, set(&[]));
                d.add_action(model).unwrap();
            }
            d
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_roundtrip(d in arb_domain()) {
            let text = serialize_domain(&d);
            let reparsed = parse_domain(&text).unwrap();
            prop_assert_eq!(serialize_domain(&reparsed), text);
            prop_assert_eq!(reparsed, d);
        }

        #[test]
        fn apply_postconditions(mask in 0u32..64, eff_mask in 0u32..64, del_mask in 0u32..64) {
            let universe = ["a", "b", "c", "d", "e", "f"];
            let pick = |m: u32| -> BTreeSet<Proposition> {
                universe.iter().enumerate()
                    .filter(|(i, _)| m & (1 << i) != 0)
                    .map(|(_, n)| p(n)).collect()
            };
            let state = SymbolicState::from_props(pick(mask));
            let eff_pos = pick(eff_mask);
            let eff_neg: BTreeSet<_> = pick(del_mask).difference(&eff_pos).cloned().collect();
            let action = ActionModel::new("a", set(&[]), set(&[]), eff_pos.clone(), eff_neg.clone());
            let next = apply(&state, &action).unwrap();
            prop_assert!(next.holds().is_superset(&eff_pos));
            let removed: BTreeSet<_> = eff_neg.difference(&eff_pos).cloned().collect();
            prop_assert!(next.holds().is_disjoint(&removed));
            // determinism
            prop_assert_eq!(apply(&state, &action).unwrap(), next);
        }
    }
}

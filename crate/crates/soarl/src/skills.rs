//! Semantic labels, the label-indexed skill library with threshold-gated
//! insertion, and policy reuse for semantically matching new options.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{
    label_prompt, AnnotatorBackend, AnnotatorRequest, Parsed, RequestKind,
};
use crate::options::{QTable, SymbolicOption};
use crate::symbolic::SymbolicState;

pub const LIBRARY_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.95;
const ANNOTATE_MAX_RETRIES: u32 = 2;

/// Predicate-argument semantic label in canonical (lowercase, trimmed) form.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct SemanticLabel {
    predicate: String,
    args: Vec<String>,
}

impl SemanticLabel {
    pub fn new(predicate: &str, args: &[&str]) -> Self {
        SemanticLabel {
            predicate: predicate.trim().to_lowercase(),
            args: args.iter().map(|a| a.trim().to_lowercase()).collect(),
        }
    }

    pub fn predicate(&self) -> &str {
        &self.predicate
    }

    pub fn args(&self) -> &[String] {
        &self.args
    }
}

impl fmt::Display for SemanticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.args.is_empty() {
            write!(f, "{}()", self.predicate)
        } else {
            write!(f, "{}({})", self.predicate, self.args.join(", "))
        }
    }
}

impl From<SemanticLabel> for String {
    fn from(l: SemanticLabel) -> String {
        l.to_string()
    }
}

impl From<String> for SemanticLabel {
    fn from(s: String) -> SemanticLabel {
        crate::annotator::parse_label(&s)
            .unwrap_or_else(|_| SemanticLabel::new("invalid", &[&s.replace(['(', ')', ','], "_")]))
    }
}

/// Deterministic fallback label derived from the state diff, used when the
/// annotator output cannot be parsed: `diff(<added>+...<removed>-...)`.
pub fn fallback_label(before: &SymbolicState, after: &SymbolicState) -> SemanticLabel {
    let mut parts: Vec<String> = after
        .difference(before)
        .iter()
        .map(|p| format!("{p}+"))
        .chain(before.difference(after).iter().map(|p| format!("{p}-")))
        .collect();
    parts.sort();
    let arg = parts.join("").to_lowercase();
    SemanticLabel::new("diff", &[&arg])
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub world: String,
    pub task: u8,
    pub episode: u64,
    pub timestamp: u64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct SkillRecord {
    pub label: SemanticLabel,
    pub policy: QTable,
    pub sr_at_save: f64,
    pub provenance: Provenance,
}

#[derive(Clone, PartialEq, Debug)]
pub struct SkillLibrary {
    records: BTreeMap<SemanticLabel, SkillRecord>,
    pub tau: f64,
}

impl SkillLibrary {
    pub fn new(tau: f64) -> Self {
        SkillLibrary { records: BTreeMap::new(), tau }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, label: &SemanticLabel) -> Option<&SkillRecord> {
        self.records.get(label)
    }

    pub fn records(&self) -> impl Iterator<Item = &SkillRecord> {
        self.records.values()
    }

    fn check_invariant(&self) {
        debug_assert!(
            self.records.values().all(|r| r.sr_at_save >= self.tau),
            "library holds a record below tau"
        );
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AddOutcome {
    Added,
    Replaced,
    RejectedLowSr,
    KeptExisting,
}

/// Threshold-gated insertion: candidates below τ are rejected; on a label
/// collision the record with the higher success rate wins, ties keeping the
/// existing one.
pub fn try_add_skill(
    lib: &mut SkillLibrary,
    option: &SymbolicOption,
    label: &SemanticLabel,
    provenance: Provenance,
) -> AddOutcome {
    let sr = option.success_rate();
    if sr < lib.tau {
        return AddOutcome::RejectedLowSr;
    }
    let record = SkillRecord {
        label: label.clone(),
        policy: option.policy.clone(),
        sr_at_save: sr,
        provenance,
    };
    let outcome = match lib.records.get(label) {
        None => {
            lib.records.insert(label.clone(), record);
            AddOutcome::Added
        }
        Some(existing) if sr > existing.sr_at_save => {
            lib.records.insert(label.clone(), record);
            AddOutcome::Replaced
        }
        Some(_) => AddOutcome::KeptExisting,
    };
    lib.check_invariant();
    outcome
}

/// On an exact label match, copies the stored policy into the fresh option
/// and reports the hit. Never mutates the library.
pub fn lookup_and_reuse(
    lib: &SkillLibrary,
    label: &SemanticLabel,
    new_option: &mut SymbolicOption,
) -> bool {
    match lib.records.get(label) {
        Some(record) => {
            new_option.policy = record.policy.clone();
            new_option.reused = true;
            true
        }
        None => false,
    }
}

/// Generates a semantic label for an option's observed transition: renders
/// the prompt, queries the backend, and retries on malformed output before
/// falling back to the deterministic diff label.
pub fn annotate_option(
    backend: &dyn AnnotatorBackend,
    domain_info: &str,
    s_before: &SymbolicState,
    s_after: &SymbolicState,
    last_label: Option<&SemanticLabel>,
    world: &str,
    episode: u64,
) -> SemanticLabel {
    assert!(s_before != s_after, "a label needs an actual state change");
    let prompt = label_prompt(domain_info, s_before, s_after, last_label);
    let request = AnnotatorRequest::new(RequestKind::LabelTransition, prompt, world, episode);
    for _ in 0..=ANNOTATE_MAX_RETRIES {
        match backend.complete(&request) {
            Ok(resp) => {
                if let Some(Parsed::Label(label)) = resp.parsed {
                    return label;
                }
            }
            Err(_) => {}
        }
    }
    fallback_label(s_before, s_after)
}

#[derive(Error, Debug)]
pub enum LibraryError {
    #[error("library io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("library file is not valid json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("library schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    version: u32,
    tau: f64,
    records: Vec<SkillRecord>,
}

pub fn save_library(lib: &SkillLibrary, path: &Path) -> Result<(), LibraryError> {
    let file = LibraryFile {
        version: LIBRARY_SCHEMA_VERSION,
        tau: lib.tau,
        records: lib.records.values().cloned().collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_library(path: &Path) -> Result<SkillLibrary, LibraryError> {
    let text = std::fs::read_to_string(path)?;
    let file: LibraryFile = serde_json::from_str(&text)?;
    if file.version != LIBRARY_SCHEMA_VERSION {
        return Err(LibraryError::SchemaVersionMismatch {
            found: file.version,
            expected: LIBRARY_SCHEMA_VERSION,
        });
    }
    let mut lib = SkillLibrary::new(file.tau);
    for record in file.records {
        lib.records.insert(record.label.clone(), record);
    }
    lib.check_invariant();
    Ok(lib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::MockBackend;
    use crate::options::SuccessHistory;
    use crate::symbolic::ActionModel;

    fn option_with_sr(successes: usize, failures: usize) -> SymbolicOption {
        let model = ActionModel::new(
            "act0",
            Default::default(),
            Default::default(),
            std::iter::once(crate::symbolic::Proposition::new("haveCoffee")).collect(),
            Default::default(),
        );
        let mut opt = SymbolicOption::from_model(&model, 0.1, 0.95, 50);
        let mut h = SuccessHistory::new(50);
        for _ in 0..successes {
            h.push(true);
        }
        for _ in 0..failures {
            h.push(false);
        }
        opt.success_history = h;
        opt
    }

    fn prov() -> Provenance {
        Provenance { world: "A".into(), task: 1, episode: 0, timestamp: 0 }
    }

    #[test]
    fn label_canonicalization_is_idempotent() {
        let l = SemanticLabel::new("  ACT ", &[" Coffee", "OFFICE "]);
        let again = SemanticLabel::new(l.predicate(), &l.args().iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(l, again);
        assert_eq!(l.to_string(), "act(coffee, office)");
    }

    #[test]
    fn annotate_known_transitions() {
        let backend = MockBackend::new();
        let l = annotate_option(
            &backend,
            "office world",
            &SymbolicState::from_names(&["haveCoffee"]),
            &SymbolicState::from_names(&["deliveredCoffee"]),
            None,
            "A",
            0,
        );
        assert_eq!(l.to_string(), "act(coffee, office)");

        let l = annotate_option(
            &backend,
            "office world",
            &SymbolicState::empty(),
            &SymbolicState::from_names(&["haveCoffee"]),
            None,
            "A",
            0,
        );
        assert_eq!(l.to_string(), "act(start, coffee)");
    }

    #[test]
    fn annotate_falls_back_on_unparseable_output() {
        struct FreeText;
        impl AnnotatorBackend for FreeText {
            fn complete(
                &self,
                _request: &AnnotatorRequest,
            ) -> Result<crate::annotator::AnnotatorResponse, crate::annotator::AnnotatorError>
            {
                Ok(crate::annotator::AnnotatorResponse {
                    raw: "go left maybe".into(),
                    parsed: None,
                })
            }
        }
        let l = annotate_option(
            &FreeText,
            "office world",
            &SymbolicState::empty(),
            &SymbolicState::from_names(&["haveCoffee"]),
            None,
            "A",
            0,
        );
        assert_eq!(l.to_string(), "diff(havecoffee+)");
    }

    #[test]
    fn annotate_is_pure_under_mock() {
        let backend = MockBackend::new();
        let run = || {
            annotate_option(
                &backend,
                "w",
                &SymbolicState::empty(),
                &SymbolicState::from_names(&["haveMail"]),
                None,
                "A",
                9,
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn try_add_threshold_gate() {
        let mut lib = SkillLibrary::new(0.95);
        let label = SemanticLabel::new("act", &["start", "coffee"]);

        let good = option_with_sr(97, 3);
        assert_eq!(try_add_skill(&mut lib, &good, &label, prov()), AddOutcome::RejectedLowSr);
        // windowed history keeps only the last 50 entries; build a clean one
        let good = option_with_sr(50, 0);
        assert_eq!(try_add_skill(&mut lib, &good, &label, prov()), AddOutcome::Added);

        let weak = option_with_sr(45, 5); // sr = 0.90
        assert_eq!(try_add_skill(&mut lib, &weak, &label, prov()), AddOutcome::RejectedLowSr);
    }

    #[test]
    fn try_add_prefers_higher_success_rate() {
        let mut lib = SkillLibrary::new(0.90);
        let label = SemanticLabel::new("act", &["start", "coffee"]);
        let first = option_with_sr(48, 2); // 0.96
        assert_eq!(try_add_skill(&mut lib, &first, &label, prov()), AddOutcome::Added);
        let better = option_with_sr(50, 0); // 1.00
        assert_eq!(try_add_skill(&mut lib, &better, &label, prov()), AddOutcome::Replaced);
        let tie = option_with_sr(50, 0);
        assert_eq!(try_add_skill(&mut lib, &tie, &label, prov()), AddOutcome::KeptExisting);
        assert_eq!(lib.get(&label).unwrap().sr_at_save, 1.0);
    }

    #[test]
    fn lookup_copies_policy_without_mutating_library() {
        let mut lib = SkillLibrary::new(0.9);
        let label = SemanticLabel::new("act", &["start", "coffee"]);
        let mut trained = option_with_sr(50, 0);
        trained.policy.q_update(
            &crate::env::RawState::at((1, 1)),
            crate::env::PrimitiveAction::Right,
            2.0,
            &crate::env::RawState::at((2, 1)),
            true,
        );
        try_add_skill(&mut lib, &trained, &label, prov());
        let before = lib.clone();

        let mut fresh = option_with_sr(0, 0);
        assert!(fresh.policy.is_empty());
        assert!(lookup_and_reuse(&lib, &label, &mut fresh));
        assert!(fresh.reused);
        assert_eq!(fresh.policy, trained.policy);
        assert_eq!(lib, before);

        let mut other = option_with_sr(0, 0);
        assert!(!lookup_and_reuse(&lib, &SemanticLabel::new("act", &["start", "juice"]), &mut other));
        assert!(!other.reused);

        assert!(!lookup_and_reuse(&SkillLibrary::new(0.9), &label, &mut other));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.json");
        let mut lib = SkillLibrary::new(0.95);
        let mut opt = option_with_sr(50, 0);
        opt.policy.q_update(
            &crate::env::RawState::at((3, 2)),
            crate::env::PrimitiveAction::Left,
            0.123456789012345,
            &crate::env::RawState::at((2, 2)),
            false,
        );
        try_add_skill(&mut lib, &opt, &SemanticLabel::new("act", &["start", "coffee"]), prov());
        save_library(&lib, &path).unwrap();
        let loaded = load_library(&path).unwrap();
        assert_eq!(loaded, lib);
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.json");
        std::fs::write(&path, r#"{"version": 99, "tau": 0.95, "records": []}"#).unwrap();
        assert!(matches!(
            load_library(&path),
            Err(LibraryError::SchemaVersionMismatch { found: 99, .. })
        ));
    }
}

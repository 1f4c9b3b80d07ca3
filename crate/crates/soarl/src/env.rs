//! Deterministic Office World gridworlds: map loading, transition logic,
//! and the labeling function mapping raw states to propositions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symbolic::{Proposition, SymbolicState};

pub const OFFICE_WORLD_A: &str = include_str!("../data/office_world_a.map");
pub const OFFICE_WORLD_B: &str = include_str!("../data/office_world_b.map");

pub type Cell = (i32, i32);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum EntityKind {
    Coffee,
    Mail,
    Office,
    Plant,
    Printer,
    Start,
}

impl EntityKind {
    fn from_keyword(word: &str) -> Option<Self> {
        match word {
            "coffee" => Some(EntityKind::Coffee),
            "mail" => Some(EntityKind::Mail),
            "office" => Some(EntityKind::Office),
            "plant" => Some(EntityKind::Plant),
            "printer" => Some(EntityKind::Printer),
            "start" => Some(EntityKind::Start),
            _ => None,
        }
    }
}

/// Fixed primitive action order; ties in greedy selection break toward the
/// earliest entry.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum PrimitiveAction {
    Up,
    Down,
    Left,
    Right,
}

pub const ACTIONS: [PrimitiveAction; 4] = [
    PrimitiveAction::Up,
    PrimitiveAction::Down,
    PrimitiveAction::Left,
    PrimitiveAction::Right,
];

impl PrimitiveAction {
    pub fn index(self) -> usize {
        match self {
            PrimitiveAction::Up => 0,
            PrimitiveAction::Down => 1,
            PrimitiveAction::Left => 2,
            PrimitiveAction::Right => 3,
        }
    }

    fn delta(self) -> (i32, i32) {
        match self {
            PrimitiveAction::Up => (0, -1),
            PrimitiveAction::Down => (0, 1),
            PrimitiveAction::Left => (-1, 0),
            PrimitiveAction::Right => (1, 0),
        }
    }
}

impl fmt::Display for PrimitiveAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PrimitiveAction::Up => "up",
            PrimitiveAction::Down => "down",
            PrimitiveAction::Left => "left",
            PrimitiveAction::Right => "right",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct GridMap {
    pub width: i32,
    pub height: i32,
    walls: BTreeSet<(Cell, Cell)>,
    placements: BTreeMap<Cell, EntityKind>,
    start_cells: Vec<Cell>,
}

impl GridMap {
    pub fn placements(&self) -> &BTreeMap<Cell, EntityKind> {
        &self.placements
    }

    pub fn entity_at(&self, cell: Cell) -> Option<EntityKind> {
        self.placements.get(&cell).copied()
    }

    pub fn start_cells(&self) -> &[Cell] {
        &self.start_cells
    }

    pub fn is_blocked(&self, from: Cell, to: Cell) -> bool {
        self.walls.contains(&(from, to))
    }

    pub fn in_bounds(&self, cell: Cell) -> bool {
        cell.0 >= 0 && cell.0 < self.width && cell.1 >= 0 && cell.1 < self.height
    }

    pub fn has_kind(&self, kind: EntityKind) -> bool {
        self.placements.values().any(|k| *k == kind)
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("map parse error at row {row}, column {col}: {message}")]
pub struct MapParseError {
    pub row: usize,
    pub col: usize,
    pub message: String,
}

fn map_err(row: usize, col: usize, message: impl Into<String>) -> MapParseError {
    MapParseError { row, col, message: message.into() }
}

fn parse_cell(text: &str) -> Option<Cell> {
    let inner = text.strip_prefix('(')?.strip_suffix(')')?;
    let (x, y) = inner.split_once(',')?;
    Some((x.trim().parse().ok()?, y.trim().parse().ok()?))
}

/// Parses the ASCII map format: `legend <char> <entity-kind>` lines, grid
/// rows, then an optional `walls:` section of `wall (x1,y1)-(x2,y2)` lines.
pub fn load_map(text: &str) -> Result<GridMap, MapParseError> {
    let mut legend: BTreeMap<char, EntityKind> = BTreeMap::new();
    let mut rows: Vec<(usize, String)> = Vec::new();
    let mut wall_lines: Vec<(usize, String)> = Vec::new();
    let mut in_walls = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim_end();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed == "walls:" {
            in_walls = true;
            continue;
        }
        if in_walls {
            wall_lines.push((line_no, trimmed.to_string()));
        } else if let Some(rest) = trimmed.strip_prefix("legend ") {
            let mut parts = rest.split_whitespace();
            let (Some(ch), Some(kind)) = (parts.next(), parts.next()) else {
                return Err(map_err(line_no, 0, "expected `legend <char> <entity-kind>`"));
            };
            if ch.chars().count() != 1 {
                return Err(map_err(line_no, 0, format!("legend symbol `{ch}` must be one character")));
            }
            let kind = EntityKind::from_keyword(kind)
                .ok_or_else(|| map_err(line_no, 0, format!("unknown entity kind `{kind}`")))?;
            legend.insert(ch.chars().next().unwrap(), kind);
        } else {
            rows.push((line_no, trimmed.to_string()));
        }
    }

    if rows.is_empty() {
        return Err(map_err(0, 0, "map has no grid rows"));
    }
    let width = rows[0].1.chars().count() as i32;
    let height = rows.len() as i32;
    let mut placements = BTreeMap::new();
    let mut start_cells = Vec::new();
    for (y, (line_no, row)) in rows.iter().enumerate() {
        if row.chars().count() as i32 != width {
            return Err(map_err(*line_no, 0, "ragged grid row"));
        }
        for (x, ch) in row.chars().enumerate() {
            if ch == '.' {
                continue;
            }
            let kind = *legend
                .get(&ch)
                .ok_or_else(|| map_err(*line_no, x + 1, format!("symbol `{ch}` not in legend")))?;
            let cell = (x as i32, y as i32);
            if kind == EntityKind::Start {
                start_cells.push(cell);
            }
            placements.insert(cell, kind);
        }
    }

    let mut walls = BTreeSet::new();
    for (line_no, line) in wall_lines {
        let Some(rest) = line.strip_prefix("wall ") else {
            return Err(map_err(line_no, 0, "expected `wall (x1,y1)-(x2,y2)`"));
        };
        let Some((a, b)) = rest.split_once('-') else {
            return Err(map_err(line_no, 0, "expected `wall (x1,y1)-(x2,y2)`"));
        };
        let (Some(a), Some(b)) = (parse_cell(a.trim()), parse_cell(b.trim())) else {
            return Err(map_err(line_no, 0, "malformed wall coordinates"));
        };
        let bounds_ok = |c: Cell| c.0 >= 0 && c.0 < width && c.1 >= 0 && c.1 < height;
        if !bounds_ok(a) || !bounds_ok(b) {
            return Err(map_err(line_no, 0, "wall endpoint out of bounds"));
        }
        // stored symmetrically so movement respects both directions
        walls.insert((a, b));
        walls.insert((b, a));
    }

    Ok(GridMap { width, height, walls, placements, start_cells })
}

pub fn office_world_a() -> GridMap {
    load_map(OFFICE_WORLD_A).expect("bundled map A parses")
}

pub fn office_world_b() -> GridMap {
    load_map(OFFICE_WORLD_B).expect("bundled map B parses")
}

/// The raw (non-symbolic) environment state.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct RawState {
    pub agent_pos: Cell,
    pub have_coffee: bool,
    pub have_mail: bool,
    pub delivered_coffee: bool,
    pub delivered_mail: bool,
}

impl RawState {
    pub fn at(pos: Cell) -> Self {
        RawState {
            agent_pos: pos,
            have_coffee: false,
            have_mail: false,
            delivered_coffee: false,
            delivered_mail: false,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Task {
    DeliverCoffee,
    DeliverMail,
    DeliverBoth,
}

impl Task {
    pub fn from_id(id: u8) -> Option<Task> {
        match id {
            1 => Some(Task::DeliverCoffee),
            2 => Some(Task::DeliverMail),
            3 => Some(Task::DeliverBoth),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Task::DeliverCoffee => 1,
            Task::DeliverMail => 2,
            Task::DeliverBoth => 3,
        }
    }

    fn complete(self, state: &RawState) -> bool {
        match self {
            Task::DeliverCoffee => state.delivered_coffee,
            Task::DeliverMail => state.delivered_mail,
            Task::DeliverBoth => state.delivered_coffee && state.delivered_mail,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum DoneReason {
    Running,
    TaskComplete,
    Violation,
    MaxSteps,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: RawState,
    pub reward: f64,
    pub done: bool,
    pub done_reason: DoneReason,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct RewardScheme {
    pub step_cost: f64,
    pub task_reward: f64,
}

impl Default for RewardScheme {
    fn default() -> Self {
        RewardScheme { step_cost: -0.01, task_reward: 1.0 }
    }
}

/// Places the agent uniformly at random over the start-region cells with all
/// item flags cleared.
pub fn reset(map: &GridMap, rng: &mut impl Rng) -> RawState {
    assert!(!map.start_cells.is_empty(), "map has no start-region cells");
    let idx = rng.gen_range(0..map.start_cells.len());
    RawState::at(map.start_cells[idx])
}

/// One deterministic environment step. Movement blocked by walls or bounds
/// leaves the position unchanged; entity cells trigger pickup/delivery.
/// Plant and printer contact is reported through the labeling function only.
pub fn step(
    map: &GridMap,
    state: &RawState,
    action: PrimitiveAction,
    task: Task,
    rewards: RewardScheme,
) -> StepOutcome {
    let (dx, dy) = action.delta();
    let target = (state.agent_pos.0 + dx, state.agent_pos.1 + dy);
    let mut next = *state;
    if map.in_bounds(target) && !map.is_blocked(state.agent_pos, target) {
        next.agent_pos = target;
    }

    let mut reward = rewards.step_cost;
    match map.entity_at(next.agent_pos) {
        // items respawn only until their delivery is done
        Some(EntityKind::Coffee) if !next.delivered_coffee => next.have_coffee = true,
        Some(EntityKind::Mail) if !next.delivered_mail => next.have_mail = true,
        Some(EntityKind::Office) => {
            if next.have_coffee {
                next.have_coffee = false;
                next.delivered_coffee = true;
                if matches!(task, Task::DeliverCoffee | Task::DeliverBoth) {
                    reward += rewards.task_reward;
                }
            }
            if next.have_mail {
                next.have_mail = false;
                next.delivered_mail = true;
                if matches!(task, Task::DeliverMail | Task::DeliverBoth) {
                    reward += rewards.task_reward;
                }
            }
        }
        _ => {}
    }

    let done = task.complete(&next);
    StepOutcome {
        next_state: next,
        reward,
        done,
        done_reason: if done { DoneReason::TaskComplete } else { DoneReason::Running },
    }
}

/// The labeling function F: raw state → proposition set.
pub fn label_state(state: &RawState, map: &GridMap) -> SymbolicState {
    let mut out = SymbolicState::empty();
    if state.have_coffee {
        out.insert(Proposition::new("haveCoffee"));
    }
    if state.have_mail {
        out.insert(Proposition::new("haveMail"));
    }
    if state.delivered_coffee {
        out.insert(Proposition::new("deliveredCoffee"));
    }
    if state.delivered_mail {
        out.insert(Proposition::new("deliveredMail"));
    }
    match map.entity_at(state.agent_pos) {
        Some(EntityKind::Plant) => out.insert(Proposition::new("onPlant")),
        Some(EntityKind::Printer) => out.insert(Proposition::new("onPrinter")),
        _ => {}
    }
    out
}

/// Proposition vocabulary for a map: the four task propositions plus the
/// contact propositions for entities actually present.
pub fn vocabulary(map: &GridMap) -> BTreeSet<Proposition> {
    let mut vocab: BTreeSet<Proposition> =
        ["haveCoffee", "haveMail", "deliveredCoffee", "deliveredMail"]
            .iter()
            .map(|n| Proposition::new(*n))
            .collect();
    if map.has_kind(EntityKind::Plant) {
        vocab.insert(Proposition::new("onPlant"));
    }
    if map.has_kind(EntityKind::Printer) {
        vocab.insert(Proposition::new("onPrinter"));
    }
    vocab
}

/// Maps entity names to the propositions that become true on contact; the
/// mapping function used by constraint splitting.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct EntityRegistry {
    entities: BTreeMap<String, BTreeSet<Proposition>>,
}

impl EntityRegistry {
    pub fn from_map(map: &GridMap) -> Self {
        let mut entities = BTreeMap::new();
        let mut add = |name: &str, prop: &str| {
            entities.insert(
                name.to_string(),
                std::iter::once(Proposition::new(prop)).collect::<BTreeSet<_>>(),
            );
        };
        if map.has_kind(EntityKind::Coffee) {
            add("coffee", "haveCoffee");
        }
        if map.has_kind(EntityKind::Mail) {
            add("mail", "haveMail");
        }
        if map.has_kind(EntityKind::Plant) {
            add("plant", "onPlant");
        }
        if map.has_kind(EntityKind::Printer) {
            add("printer", "onPrinter");
        }
        EntityRegistry { entities }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entities.contains_key(name)
    }

    pub fn propositions(&self, name: &str) -> Option<&BTreeSet<Proposition>> {
        self.entities.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entities.keys().map(String::as_str)
    }
}

//! DoorKey gridworld, 4×4, fully observable.
//!
//! ```text
//!   col 0 1 2   3
//! row 0 . . . # .
//!     1 . . . D .
//!     2 . . . # .
//!     3 . . . # G
//! ```
//!
//! Column 3 is the locked room; the door joins cells 6 and 7 and opens only
//! for an agent holding the key. The goal (cell 15) is absorbing.

mod dataset;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use dataset::{
    generate_dataset, generate_trajectory, read_dataset, read_records, trajectory_rng, validation_count, write_dataset,
    write_records, Dataset, DatasetHeader, Trajectory, TrajectoryRecord,
};

/// Episode length.
pub const HORIZON: usize = 10;
pub const SIDE: usize = 4;
pub const NUM_CELLS: usize = SIDE * SIDE;
pub const NUM_ACTIONS: usize = 4;
pub const LOCKED_COL: usize = 3;
pub const GOAL: Cell = Cell(15);
pub const DOOR: (Cell, Cell) = (Cell(6), Cell(7));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell(u8);

impl Cell {
    pub fn new(index: usize) -> Option<Self> {
        (index < NUM_CELLS).then_some(Cell(index as u8))
    }

    pub fn at(col: usize, row: usize) -> Option<Self> {
        (col < SIDE && row < SIDE).then(|| Cell((row * SIDE + col) as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn col(self) -> usize {
        self.index() % SIDE
    }

    pub fn row(self) -> usize {
        self.index() / SIDE
    }

    pub fn is_locked(self) -> bool {
        self.col() == LOCKED_COL
    }

    pub fn is_spawn(self) -> bool {
        !self.is_locked()
    }

    pub fn all() -> impl Iterator<Item = Cell> {
        (0..NUM_CELLS).map(|i| Cell(i as u8))
    }

    /// Neighbour in `action`'s direction, ignoring walls; `None` off-grid.
    fn offset(self, action: Action) -> Option<Cell> {
        let (c, r) = (self.col() as isize, self.row() as isize);
        let (dc, dr) = match action {
            Action::Up => (0, -1),
            Action::Right => (1, 0),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
        };
        let (nc, nr) = (c + dc, r + dr);
        if (0..SIDE as isize).contains(&nc) && (0..SIDE as isize).contains(&nr) {
            Cell::at(nc as usize, nr as usize)
        } else {
            None
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cells where agent and key may start: everything outside the locked room.
pub fn spawn_cells() -> Vec<Cell> {
    Cell::all().filter(|c| c.is_spawn()).collect()
}

fn is_door_edge(a: Cell, b: Cell) -> bool {
    (a, b) == DOOR || (b, a) == DOOR
}

fn crosses_wall(a: Cell, b: Cell) -> bool {
    a.is_locked() != b.is_locked()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up = 0,
    Right = 1,
    Down = 2,
    Left = 3,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Up, Action::Right, Action::Down, Action::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "Up",
            Action::Right => "Right",
            Action::Down => "Down",
            Action::Left => "Left",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(i) = s.parse::<usize>() {
            return Action::from_index(i).ok_or_else(|| format!("action index {i} out of range"));
        }
        Action::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown action `{s}`"))
    }
}

/// Agent and key positions. `key == agent` means the key is held.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridState {
    pub agent: Cell,
    pub key: Cell,
}

pub const NUM_GRID_STATES: usize = NUM_CELLS * NUM_CELLS;

impl GridState {
    pub fn new(agent: Cell, key: Cell) -> Self {
        Self { agent, key }
    }

    pub fn has_key(self) -> bool {
        self.agent == self.key
    }

    /// The key is never inside the locked room unless carried.
    pub fn is_valid(self) -> bool {
        !self.key.is_locked() || self.has_key()
    }

    /// Valid and consistent with a legal history: inside the locked room
    /// only while carrying the key.
    pub fn is_plausible(self) -> bool {
        self.is_valid() && (!self.agent.is_locked() || self.has_key())
    }

    pub fn is_initial(self) -> bool {
        self.agent.is_spawn() && self.key.is_spawn() && self.agent != self.key
    }

    pub fn index(self) -> usize {
        self.agent.index() * NUM_CELLS + self.key.index()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < NUM_GRID_STATES).then(|| {
            GridState::new(Cell((i / NUM_CELLS) as u8), Cell((i % NUM_CELLS) as u8))
        })
    }
}

impl fmt::Display for GridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent:{},key:{}", self.agent, self.key)
    }
}

/// Breadth-first distance on the layout graph, with the door always open.
pub fn shortest_path_distance(from: Cell, to: Cell) -> u32 {
    DISTANCES.with(|d| d[from.index()][to.index()])
}

thread_local! {
    static DISTANCES: [[u32; NUM_CELLS]; NUM_CELLS] = all_pairs_bfs();
}

fn all_pairs_bfs() -> [[u32; NUM_CELLS]; NUM_CELLS] {
    let mut out = [[u32::MAX; NUM_CELLS]; NUM_CELLS];
    for src in Cell::all() {
        let dist = &mut out[src.index()];
        dist[src.index()] = 0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(c) = queue.pop_front() {
            for a in Action::ALL {
                let Some(n) = c.offset(a) else { continue };
                if crosses_wall(c, n) && !is_door_edge(c, n) {
                    continue;
                }
                if dist[n.index()] == u32::MAX {
                    dist[n.index()] = dist[c.index()] + 1;
                    queue.push_back(n);
                }
            }
        }
    }
    out
}

/// Deterministic transition.
pub fn step(state: GridState, action: Action) -> GridState {
    if state.agent == GOAL {
        return state;
    }
    let Some(next) = state.agent.offset(action) else {
        return state;
    };
    if crosses_wall(state.agent, next) && !(is_door_edge(state.agent, next) && state.has_key()) {
        return state;
    }
    let key = if state.has_key() || next == state.key {
        next
    } else {
        state.key
    };
    GridState::new(next, key)
}

fn distance_sign(before: u32, after: u32) -> i32 {
    match after.cmp(&before) {
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Greater => -1,
        std::cmp::Ordering::Equal => 0,
    }
}

/// +1 for moving closer to the goal, -1 for moving away, 0 otherwise.
pub fn reward(prev: GridState, next: GridState) -> i32 {
    distance_sign(
        shortest_path_distance(prev.agent, GOAL),
        shortest_path_distance(next.agent, GOAL),
    )
}

/// The key while it is on the floor, the goal once it is held.
pub fn current_target(state: GridState) -> Cell {
    if state.has_key() {
        GOAL
    } else {
        state.key
    }
}

/// Advantage-like score of every action with respect to the current target.
pub fn action_scores(state: GridState) -> [i32; NUM_ACTIONS] {
    let target = current_target(state);
    let before = shortest_path_distance(state.agent, target);
    Action::ALL.map(|a| distance_sign(before, shortest_path_distance(step(state, a).agent, target)))
}

/// Noisy-rational data policy: softmax of the action scores.
pub fn noisy_policy(state: GridState) -> [f64; NUM_ACTIONS] {
    let scores = action_scores(state);
    let w = scores.map(|c| (c as f64).exp());
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

pub fn uniform_policy(_: GridState) -> [f64; NUM_ACTIONS] {
    [0.25; NUM_ACTIONS]
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p / total;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn sample_action<R: Rng + ?Sized>(state: GridState, rng: &mut R) -> Action {
    Action::ALL[sample_categorical(&noisy_policy(state), rng)]
}

/// All 132 ordered pairs of distinct spawn cells, in a fixed order.
pub fn initial_states() -> Vec<GridState> {
    let spawn = spawn_cells();
    let mut out = Vec::with_capacity(spawn.len() * (spawn.len() - 1));
    for &agent in &spawn {
        for &key in &spawn {
            if agent != key {
                out.push(GridState::new(agent, key));
            }
        }
    }
    out
}

pub fn sample_initial<R: Rng + ?Sized>(rng: &mut R) -> GridState {
    let spawn = spawn_cells();
    let n = spawn.len();
    let i = rng.random_range(0..n * (n - 1));
    let agent = spawn[i / (n - 1)];
    let mut k = i % (n - 1);
    if k >= i / (n - 1) {
        k += 1;
    }
    GridState::new(agent, spawn[k])
}

/// Text picture of one state: `A` agent, `K` key on the floor, `G` goal,
/// `D` door, `#` walls.
pub fn render(state: GridState) -> String {
    let border = "#".repeat(2 * SIDE + 3);
    let mut out = String::new();
    out.push_str(&border);
    out.push('\n');
    for row in 0..SIDE {
        out.push('#');
        for col in 0..SIDE {
            let c = Cell::at(col, row).unwrap();
            if col == LOCKED_COL {
                out.push(if c == DOOR.1 { 'D' } else { '#' });
            } else {
                out.push(' ');
            }
            let ch = if c == state.agent {
                'A'
            } else if c == state.key {
                'K'
            } else if c == GOAL {
                'G'
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push_str(" #\n");
    }
    out.push_str(&border);
    out.push('\n');
    out
}

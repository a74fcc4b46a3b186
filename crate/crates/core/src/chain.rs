//! Chain MDPs: prototypes, general chains, the grid maze and the `π^{-+}_k` family.

use std::collections::VecDeque;
use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::mdp::{full_mask, solve_exact, FiniteMdp, Outcome, Policy};

/// Action index of `a⁺` (the goal action at `s_n`).
pub const FORWARD: usize = 0;
/// Action index of `a⁻`.
pub const BACKWARD: usize = 1;
/// Index of the first trap action, when a state has any.
pub const FIRST_TRAP: usize = 2;

pub const DEFAULT_GAMMA: f64 = 0.998;
pub const DEFAULT_R_G: f64 = 1.0;
pub const DEFAULT_R_D: f64 = 0.001;

/// How far back `a⁻` throws the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hazard {
    Steps(u32),
    /// Straight back to `s₁`.
    Reset,
}

impl Serialize for Hazard {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Hazard::Steps(k) => ser.serialize_u32(*k),
            Hazard::Reset => ser.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Hazard {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Steps(u32),
            Word(String),
        }
        match Raw::deserialize(de)? {
            Raw::Steps(k) => Ok(Hazard::Steps(k)),
            Raw::Word(w) if w == "inf" => Ok(Hazard::Reset),
            Raw::Word(w) => Err(de::Error::custom(format!(
                "hazard must be a positive integer or \"inf\", got {w:?}"
            ))),
        }
    }
}

impl fmt::Display for Hazard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hazard::Steps(k) => write!(f, "{k}"),
            Hazard::Reset => f.write_str("inf"),
        }
    }
}

/// What the goal action does after paying `r_G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Productivity {
    SelfLoop,
    Reset,
}

/// Declarative chain description. Indices in method arguments are 1-based
/// chain positions; vectors are stored 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChainSpec")]
pub struct ChainSpec {
    pub n: usize,
    pub forward_p: Vec<f64>,
    pub hazard: Vec<Hazard>,
    pub productivity: Productivity,
    pub backward_p: Vec<f64>,
    #[serde(rename = "r_G")]
    pub r_g: f64,
    #[serde(rename = "r_D")]
    pub r_d: f64,
    pub gamma: f64,
    /// Extra actions per state that send the agent to `s₁` with the state's
    /// backward probability (stepping into a trap). Empty means none.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traps: Vec<u32>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    fn expand(self, len: usize, field: &str) -> std::result::Result<Vec<T>, String> {
        match self {
            OneOrMany::One(x) => Ok(vec![x; len]),
            OneOrMany::Many(v) if v.len() == len => Ok(v),
            OneOrMany::Many(v) => Err(format!("{field} has {} entries, expected {len}", v.len())),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChainSpec {
    n: usize,
    forward_p: OneOrMany<f64>,
    hazard: OneOrMany<Hazard>,
    productivity: Productivity,
    backward_p: Option<OneOrMany<f64>>,
    #[serde(rename = "r_G", default = "default_r_g")]
    r_g: f64,
    #[serde(rename = "r_D", default = "default_r_d")]
    r_d: f64,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(default)]
    traps: Option<OneOrMany<u32>>,
}

fn default_r_g() -> f64 {
    DEFAULT_R_G
}
fn default_r_d() -> f64 {
    DEFAULT_R_D
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl TryFrom<RawChainSpec> for ChainSpec {
    type Error = String;

    fn try_from(raw: RawChainSpec) -> std::result::Result<Self, String> {
        let n = raw.n;
        if n < 2 {
            return Err(format!("chain length {n} must be at least 2"));
        }
        let spec = ChainSpec {
            n,
            forward_p: raw.forward_p.expand(n - 1, "forward_p")?,
            hazard: raw.hazard.expand(n, "hazard")?,
            productivity: raw.productivity,
            backward_p: match raw.backward_p {
                Some(b) => b.expand(n, "backward_p")?,
                None => vec![1.0; n],
            },
            r_g: raw.r_g,
            r_d: raw.r_d,
            gamma: raw.gamma,
            traps: match raw.traps {
                Some(t) => t.expand(n, "traps")?,
                None => Vec::new(),
            },
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl ChainSpec {
    /// A prototype-shaped chain with uniform forward probability and the
    /// default rewards and discount.
    pub fn prototype(hazard: Hazard, productivity: Productivity, n: usize, p: f64) -> Self {
        Self {
            n,
            forward_p: vec![p; n.saturating_sub(1)],
            hazard: vec![hazard; n],
            productivity,
            backward_p: vec![1.0; n],
            r_g: DEFAULT_R_G,
            r_d: DEFAULT_R_D,
            gamma: DEFAULT_GAMMA,
            traps: Vec::new(),
        }
    }

    pub fn with_rewards(mut self, r_g: f64, r_d: f64) -> Self {
        self.r_g = r_g;
        self.r_d = r_d;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_forward_p(mut self, forward_p: Vec<f64>) -> Self {
        self.forward_p = forward_p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        let bad = |msg: String| Err(Error::Validation(msg));
        if n < 2 {
            return bad(format!("chain length {n} must be at least 2"));
        }
        if self.forward_p.len() != n - 1 {
            return bad(format!("forward_p needs {} entries", n - 1));
        }
        if self.hazard.len() != n || self.backward_p.len() != n {
            return bad(format!("hazard and backward_p need {n} entries"));
        }
        if !self.traps.is_empty() && self.traps.len() != n {
            return bad(format!("traps needs {n} entries when present"));
        }
        for (i, &p) in self.forward_p.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("forward_p[{}] = {p} not in (0,1]", i + 1));
            }
        }
        for (i, &p) in self.backward_p.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("backward_p[{}] = {p} not in (0,1]", i + 1));
            }
        }
        if self.hazard.contains(&Hazard::Steps(0)) {
            return bad("finite hazard must be at least 1".into());
        }
        if !(self.r_g > 0.0 && self.r_g.is_finite()) {
            return bad(format!("r_G = {} must be positive", self.r_g));
        }
        if !(self.r_d >= 0.0 && self.r_d.is_finite()) {
            return bad(format!("r_D = {} must be nonnegative", self.r_d));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma = {} not in (0,1)", self.gamma));
        }
        Ok(())
    }

    /// Forward probability `p_i`, `1 ≤ i < n`.
    pub fn p(&self, i: usize) -> f64 {
        self.forward_p[i - 1]
    }

    pub fn backward_p_at(&self, i: usize) -> f64 {
        self.backward_p[i - 1]
    }

    /// Landing position of a successful `a⁻` at `s_i`.
    pub fn backward_target(&self, i: usize) -> usize {
        match self.hazard[i - 1] {
            Hazard::Reset => 1,
            Hazard::Steps(h) => i.saturating_sub(h as usize).max(1),
        }
    }

    pub fn traps_at(&self, i: usize) -> u32 {
        self.traps.get(i - 1).copied().unwrap_or(0)
    }

    pub fn num_actions(&self, i: usize) -> usize {
        FIRST_TRAP + self.traps_at(i) as usize
    }

    /// Discounted forward product `F_j = ∏_{i=j}^{n−1} γp_i/(1−γ(1−p_i))`
    /// for an arbitrary vector of forward probabilities.
    pub fn forward_product(&self, p: &[f64], j: usize) -> f64 {
        let g = self.gamma;
        p[j - 1..].iter().map(|&q| g * q / (1.0 - g * (1.0 - q))).product()
    }

    /// Short label such as `H1_G1` or `Hinf_Greset`.
    pub fn label(&self) -> String {
        let h = if self.hazard.iter().all(|&h| h == Hazard::Reset) {
            "Hinf".to_string()
        } else if self.hazard.iter().all(|&h| h == self.hazard[0]) {
            format!("H{}", self.hazard[0])
        } else {
            "Hmix".to_string()
        };
        let g = match self.productivity {
            Productivity::SelfLoop => "G1",
            Productivity::Reset => "Greset",
        };
        format!("{h}_{g}")
    }
}

/// Outcome list with duplicate successors merged and empty branches dropped.
fn merged(parts: &[(usize, f64, f64)]) -> Vec<Outcome> {
    let mut out: Vec<Outcome> = Vec::with_capacity(parts.len());
    for &(next, prob, reward) in parts {
        if prob <= 0.0 {
            continue;
        }
        match out.iter_mut().find(|o| o.next == next) {
            Some(o) => o.prob += prob,
            None => out.push(Outcome::new(next, prob, reward)),
        }
    }
    out
}

pub fn build_general_chain(spec: &ChainSpec) -> Result<FiniteMdp> {
    spec.validate()?;
    let n = spec.n;
    let mut rows = Vec::with_capacity(n);
    for i in 1..=n {
        let me = i - 1;
        let mut actions = Vec::with_capacity(spec.num_actions(i));
        if i < n {
            let p = spec.p(i);
            actions.push(merged(&[(i, p, 0.0), (me, 1.0 - p, 0.0)]));
        } else {
            let back = match spec.productivity {
                Productivity::SelfLoop => me,
                Productivity::Reset => 0,
            };
            actions.push(vec![Outcome::new(back, 1.0, spec.r_g)]);
        }
        let bp = spec.backward_p_at(i);
        if i == 1 {
            actions.push(vec![Outcome::new(0, 1.0, spec.r_d)]);
        } else {
            let target = spec.backward_target(i) - 1;
            actions.push(merged(&[(target, bp, 0.0), (me, 1.0 - bp, 0.0)]));
        }
        for _ in 0..spec.traps_at(i) {
            actions.push(merged(&[(0, bp, 0.0), (me, 1.0 - bp, 0.0)]));
        }
        rows.push(actions);
    }
    FiniteMdp::new(rows, spec.gamma)?.with_goal(n - 1)
}

/// One of the four prototype chains (`hazard` must be `Steps(1)` or `Reset`).
pub fn build_prototype(
    hazard: Hazard,
    productivity: Productivity,
    n: usize,
    forward_p: &[f64],
    r_g: f64,
    r_d: f64,
    gamma: f64,
) -> Result<FiniteMdp> {
    if !matches!(hazard, Hazard::Steps(1) | Hazard::Reset) {
        return Err(invalid(format!("prototype hazard must be 1 or inf, got {hazard}")));
    }
    let spec = ChainSpec::prototype(hazard, productivity, n, 1.0)
        .with_forward_p(forward_p.to_vec())
        .with_rewards(r_g, r_d)
        .with_gamma(gamma);
    build_general_chain(&spec)
}

/// `a⁻` on `s₁..s_k`, `a⁺` on `s_{k+1}..s_n`.
pub fn pbf_policy(k: usize, spec: &ChainSpec) -> Result<Policy> {
    if k > spec.n {
        return Err(invalid(format!("family index {k} exceeds n={}", spec.n)));
    }
    Ok(Policy::new(
        (0..spec.n)
            .map(|s| if s < k { BACKWARD } else { FORWARD })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Open,
    Blocked,
    Trap,
    Start,
    Goal,
}

/// Grid maze. Rows are listed top to bottom using `.` open, `#` blocked,
/// `T` trap, `S` start and `G` goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeSpec {
    #[serde(default = "MazeSpec::standard_grid")]
    pub grid: Vec<String>,
    pub move_p: f64,
    #[serde(rename = "r_G", default = "default_r_g")]
    pub r_g: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

/// Move directions; index doubles as the action number.
const MOVES: [(i64, i64); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];
pub const COLLECT: usize = 4;

impl MazeSpec {
    pub fn standard_grid() -> Vec<String> {
        [".....", ".....", ".T#T.", ".S#G.", "..#.."]
            .iter()
            .map(|r| r.to_string())
            .collect()
    }

    pub fn standard(move_p: f64) -> Self {
        Self {
            grid: Self::standard_grid(),
            move_p,
            r_g: DEFAULT_R_G,
            gamma: DEFAULT_GAMMA,
        }
    }

    fn cells(&self) -> Result<(usize, usize, Vec<Cell>)> {
        let height = self.grid.len();
        let width = self.grid.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(Error::Validation("maze grid is empty".into()));
        }
        // Stored with y pointing up: index = y * width + x.
        let mut cells = vec![Cell::Blocked; width * height];
        for (r, row) in self.grid.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Validation(format!("maze row {r} has the wrong width")));
            }
            let y = height - 1 - r;
            for (x, ch) in row.chars().enumerate() {
                cells[y * width + x] = match ch {
                    '.' => Cell::Open,
                    '#' => Cell::Blocked,
                    'T' => Cell::Trap,
                    'S' => Cell::Start,
                    'G' => Cell::Goal,
                    other => {
                        return Err(Error::Validation(format!("unknown maze cell {other:?}")))
                    }
                };
            }
        }
        for kind in [Cell::Start, Cell::Goal] {
            let count = cells.iter().filter(|&&c| c == kind).count();
            if count != 1 {
                return Err(Error::Validation(format!(
                    "maze needs exactly one {kind:?}, found {count}"
                )));
            }
        }
        if !(self.move_p > 0.0 && self.move_p <= 1.0) {
            return Err(Error::Validation(format!("move_p {} not in (0,1]", self.move_p)));
        }
        Ok((width, height, cells))
    }
}

/// The 2D maze, its chain abstraction and how they line up.
#[derive(Debug, Clone)]
pub struct MazePair {
    pub mdp: FiniteMdp,
    pub chain: ChainSpec,
    /// MDP state of each chain position, start first.
    pub path: Vec<usize>,
    /// Optimal policy of the maze; walks the path and collects at the goal.
    pub path_policy: Policy,
}

pub fn build_maze_pair(maze: &MazeSpec) -> Result<MazePair> {
    let (width, height, cells) = maze.cells()?;
    let walkable = |c: Cell| matches!(c, Cell::Open | Cell::Start | Cell::Goal);
    let start_cell = cells.iter().position(|&c| c == Cell::Start).unwrap_or(0);
    let goal_cell = cells.iter().position(|&c| c == Cell::Goal).unwrap_or(0);

    // Start is state 0; other walkable cells follow in display order.
    let mut state_of = vec![usize::MAX; cells.len()];
    let mut cell_of = vec![start_cell];
    state_of[start_cell] = 0;
    for y in (0..height).rev() {
        for x in 0..width {
            let c = y * width + x;
            if c != start_cell && walkable(cells[c]) {
                state_of[c] = cell_of.len();
                cell_of.push(c);
            }
        }
    }

    let step = |c: usize, dir: usize| -> Option<usize> {
        let (dx, dy) = MOVES[dir];
        let x = (c % width) as i64 + dx;
        let y = (c / width) as i64 + dy;
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return None;
        }
        let t = y as usize * width + x as usize;
        (cells[t] != Cell::Blocked).then_some(t)
    };

    let p = maze.move_p;
    let mut rows = Vec::with_capacity(cell_of.len());
    for &c in &cell_of {
        let me = state_of[c];
        let mut actions: Vec<Vec<Outcome>> = (0..MOVES.len())
            .map(|dir| match step(c, dir) {
                None => vec![Outcome::new(me, 1.0, 0.0)],
                Some(t) if cells[t] == Cell::Trap => merged(&[(0, p, 0.0), (me, 1.0 - p, 0.0)]),
                Some(t) => merged(&[(state_of[t], p, 0.0), (me, 1.0 - p, 0.0)]),
            })
            .collect();
        if c == goal_cell {
            actions.push(vec![Outcome::new(0, 1.0, maze.r_g)]);
        }
        rows.push(actions);
    }
    let mdp = FiniteMdp::new(rows, maze.gamma)?.with_goal(state_of[goal_cell])?;

    // Shortest trap-free route from start to goal, first-found on ties.
    let mut parent = vec![usize::MAX; cells.len()];
    let mut seen = vec![false; cells.len()];
    let mut queue = VecDeque::from([start_cell]);
    seen[start_cell] = true;
    while let Some(c) = queue.pop_front() {
        for dir in 0..MOVES.len() {
            if let Some(t) = step(c, dir) {
                if !seen[t] && walkable(cells[t]) {
                    seen[t] = true;
                    parent[t] = c;
                    queue.push_back(t);
                }
            }
        }
    }
    if !seen[goal_cell] {
        return Err(Error::Validation("maze goal is unreachable".into()));
    }
    let mut route = vec![goal_cell];
    while *route.last().unwrap_or(&start_cell) != start_cell {
        route.push(parent[route[route.len() - 1]]);
    }
    route.reverse();

    let n = route.len();
    let traps: Vec<u32> = route
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if i == 0 {
                return 0;
            }
            (0..MOVES.len())
                .filter(|&d| step(c, d).is_some_and(|t| cells[t] == Cell::Trap))
                .count() as u32
        })
        .collect();
    let chain = ChainSpec {
        n,
        forward_p: vec![p; n - 1],
        hazard: vec![Hazard::Steps(1); n],
        productivity: Productivity::Reset,
        backward_p: vec![p; n],
        r_g: maze.r_g,
        r_d: 0.0,
        gamma: maze.gamma,
        traps: if traps.iter().any(|&t| t > 0) {
            traps
        } else {
            Vec::new()
        },
    };
    chain.validate()?;

    let (_, optimal) = solve_exact(&mdp, &full_mask(&mdp))?;
    let mut actions: Vec<usize> = optimal.iter().map(|set| set[0]).collect();
    for (i, &c) in route.iter().enumerate() {
        actions[state_of[c]] = match route.get(i + 1) {
            Some(&next) => (0..MOVES.len())
                .find(|&d| step(c, d) == Some(next))
                .unwrap_or(0),
            None => COLLECT,
        };
    }

    Ok(MazePair {
        mdp,
        chain,
        path: route.iter().map(|&c| state_of[c]).collect(),
        path_policy: Policy::new(actions),
    })
}

//! Maze and open-grid environments, experts, rendering and ground-truth
//! oracles (expert, video model, inverse dynamics table).
//!
//! Coordinates are `(x, y)` with `y` increasing upward. Images and the text
//! map put the highest `y` on the first row.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasets::{State, Transition};
use crate::error::{Error, Result};

/// Number of discrete actions.
pub const N_ACTIONS: usize = 4;

/// Canonical action order: right, left, up, down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Right = 0,
    Left = 1,
    Up = 2,
    Down = 3,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Right, Action::Left, Action::Up, Action::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Unit displacement in `(x, y)`.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Right => (1, 0),
            Action::Left => (-1, 0),
            Action::Up => (0, 1),
            Action::Down => (0, -1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Right => "right",
            Action::Left => "left",
            Action::Up => "up",
            Action::Down => "down",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PosState {
    pub x: i32,
    pub y: i32,
}

impl PosState {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    fn shifted(self, a: Action) -> Self {
        let (dx, dy) = a.delta();
        Self::new(self.x + dx, self.y + dy)
    }
}

impl fmt::Display for PosState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Binary image `[3, height, width]`: walls, player, goal.
#[derive(Clone, Debug, PartialEq)]
pub struct ImgState {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImgState {
    pub const CHANNELS: usize = 3;
    pub const WALLS: usize = 0;
    pub const PLAYER: usize = 1;
    pub const GOAL: usize = 2;

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Reads the player position back out of channel 1.
    pub fn player(&self) -> Option<PosState> {
        let idx = self.channel(Self::PLAYER).iter().position(|&v| v > 0.5)?;
        let (row, col) = (idx / self.width, idx % self.width);
        Some(PosState::new(col as i32, (self.height - 1 - row) as i32))
    }
}

/// A rectangular environment with walls, a start and a goal.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    start: PosState,
    goal: PosState,
    seed: u64,
    feasible: Vec<bool>,
}

impl Grid {
    /// `walls` is indexed by `y * width + x`.
    pub fn new(width: usize, height: usize, walls: Vec<bool>, start: PosState, goal: PosState, seed: u64) -> Result<Self> {
        if width == 0 || height == 0 || walls.len() != width * height {
            return Err(Error::Parameter(format!(
                "wall mask of length {} does not fit {width}x{height}",
                walls.len()
            )));
        }
        let mut g = Self {
            width,
            height,
            walls,
            start,
            goal,
            seed,
            feasible: Vec::new(),
        };
        for (what, p) in [("start", start), ("goal", goal)] {
            if g.is_blocked(p) {
                return Err(Error::Domain(format!("{what} {p} is a wall or off-grid")));
            }
        }
        let dist = g.distances_from(start);
        g.feasible = dist.iter().map(Option::is_some).collect();
        if !g.feasible[g.cell(goal)] {
            return Err(Error::Domain("goal unreachable from start".into()));
        }
        Ok(g)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> PosState {
        self.start
    }

    pub fn goal(&self) -> PosState {
        self.goal
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn cell(&self, p: PosState) -> usize {
        p.y as usize * self.width + p.x as usize
    }

    pub fn in_bounds(&self, p: PosState) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    /// Wall or outside the grid.
    pub fn is_blocked(&self, p: PosState) -> bool {
        !self.in_bounds(p) || self.walls[self.cell(p)]
    }

    pub fn is_wall(&self, p: PosState) -> bool {
        self.in_bounds(p) && self.walls[self.cell(p)]
    }

    /// Non-wall and reachable from the start.
    pub fn is_feasible(&self, p: PosState) -> bool {
        self.in_bounds(p) && self.feasible[self.cell(p)]
    }

    /// Feasible cells ordered by `y`, then `x`.
    pub fn feasible_states(&self) -> Vec<PosState> {
        (0..self.height as i32)
            .flat_map(|y| (0..self.width as i32).map(move |x| PosState::new(x, y)))
            .filter(|&p| self.is_feasible(p))
            .collect()
    }

    /// Feasible cells other than the goal.
    pub fn decision_states(&self) -> Vec<PosState> {
        self.feasible_states().into_iter().filter(|&p| p != self.goal).collect()
    }

    fn unchecked_step(&self, s: PosState, a: Action) -> PosState {
        let n = s.shifted(a);
        if self.is_blocked(n) {
            s
        } else {
            n
        }
    }

    /// Deterministic dynamics: one cell in direction `a`, or stay put when blocked.
    pub fn step(&self, s: PosState, a: Action) -> Result<PosState> {
        if !self.is_feasible(s) {
            return Err(Error::Domain(format!("state {s} is not feasible")));
        }
        Ok(self.unchecked_step(s, a))
    }

    /// Shortest-path distances (in moves) from `from` to every cell.
    pub fn distances_from(&self, from: PosState) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.width * self.height];
        if self.is_blocked(from) {
            return dist;
        }
        dist[self.cell(from)] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(p) = queue.pop_front() {
            let d = dist[self.cell(p)].unwrap_or(0);
            for a in Action::ALL {
                let n = p.shifted(a);
                if !self.is_blocked(n) && dist[self.cell(n)].is_none() {
                    dist[self.cell(n)] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn distance(&self, from: PosState, to: PosState) -> Option<usize> {
        if !self.in_bounds(to) {
            return None;
        }
        self.distances_from(from)[self.cell(to)]
    }

    /// Same layout with a different goal cell.
    pub fn with_goal(&self, goal: PosState) -> Result<Self> {
        Self::new(self.width, self.height, self.walls.clone(), self.start, goal, self.seed)
    }

    /// Renders `s` following the three-channel image contract.
    pub fn render_img(&self, s: PosState) -> Result<ImgState> {
        if !self.in_bounds(s) || self.is_wall(s) {
            return Err(Error::Domain(format!("cannot render player at {s}")));
        }
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0; ImgState::CHANNELS * h * w];
        let pix = |p: PosState| (h - 1 - p.y as usize) * w + p.x as usize;
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let p = PosState::new(x, y);
                if self.is_wall(p) {
                    data[ImgState::WALLS * h * w + pix(p)] = 1.0;
                }
            }
        }
        data[ImgState::PLAYER * h * w + pix(s)] = 1.0;
        data[ImgState::GOAL * h * w + pix(self.goal)] = 1.0;
        Ok(ImgState { height: h, width: w, data })
    }

    /// `#` wall, `.` free, `S` start, `G` goal; top row is the highest `y`.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in (0..self.height as i32).rev() {
            for x in 0..self.width as i32 {
                let p = PosState::new(x, y);
                out.push(if p == self.start {
                    'S'
                } else if p == self.goal {
                    'G'
                } else if self.is_wall(p) {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, seed: u64) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map(|r| r.chars().count()).unwrap_or(0);
        let mut walls = vec![false; width * height];
        let (mut start, mut goal) = (None, None);
        for (r, line) in rows.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::Parse {
                    line: r + 1,
                    detail: "ragged map row".into(),
                });
            }
            let y = (height - 1 - r) as i32;
            for (x, ch) in line.chars().enumerate() {
                let p = PosState::new(x as i32, y);
                match ch {
                    '#' => walls[y as usize * width + x] = true,
                    '.' => {}
                    'S' => start = Some(p),
                    'G' => goal = Some(p),
                    other => {
                        return Err(Error::Parse {
                            line: r + 1,
                            detail: format!("unexpected map character `{other}`"),
                        })
                    }
                }
            }
        }
        let start = start.ok_or_else(|| Error::Parse { line: 0, detail: "map has no start".into() })?;
        let goal = goal.ok_or_else(|| Error::Parse { line: 0, detail: "map has no goal".into() })?;
        Self::new(width, height, walls, start, goal, seed)
    }
}

/// Recursive-backtracker perfect maze with a full wall frame.
///
/// Passages live on an odd lattice of side `m` (`m = size` for odd sizes,
/// `size - 1` otherwise); for even sizes the extra row and column are walls.
/// Start is the lattice cell `(1, 1)`, goal the opposite lattice corner.
pub fn generate_maze(size: usize, seed: u64) -> Result<Grid> {
    if size < 5 {
        return Err(Error::Parameter(format!("maze size {size} too small (need >= 5)")));
    }
    let m = if size % 2 == 1 { size } else { size - 1 };
    let cells = (m - 1) / 2;
    let mut walls = vec![true; size * size];
    let mut visited = vec![false; cells * cells];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let open = |walls: &mut Vec<bool>, x: usize, y: usize| walls[y * size + x] = false;

    let mut stack = vec![(0usize, 0usize)];
    visited[0] = true;
    open(&mut walls, 1, 1);
    while let Some(&(cx, cy)) = stack.last() {
        let mut next: Vec<(usize, usize)> = Vec::with_capacity(4);
        if cx + 1 < cells {
            next.push((cx + 1, cy));
        }
        if cx > 0 {
            next.push((cx - 1, cy));
        }
        if cy + 1 < cells {
            next.push((cx, cy + 1));
        }
        if cy > 0 {
            next.push((cx, cy - 1));
        }
        next.retain(|&(x, y)| !visited[y * cells + x]);
        if next.is_empty() {
            stack.pop();
            continue;
        }
        let &(nx, ny) = next.choose(&mut rng).expect("non-empty");
        visited[ny * cells + nx] = true;
        open(&mut walls, 2 * nx + 1, 2 * ny + 1);
        open(&mut walls, cx + nx + 1, cy + ny + 1);
        stack.push((nx, ny));
    }
    let corner = (2 * cells - 1) as i32;
    Grid::new(size, size, walls, PosState::new(1, 1), PosState::new(corner, corner), seed)
}

/// Obstacle-free `n x n` grid, start top-left, goal bottom-right.
pub fn make_open_grid(n: usize) -> Result<Grid> {
    if n < 2 {
        return Err(Error::Parameter("open grid needs n >= 2".into()));
    }
    let top = n as i32 - 1;
    Grid::new(n, n, vec![false; n * n], PosState::new(0, top), PosState::new(top, 0), 0)
}

/// An expert acting on a [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub enum ExpertPolicy {
    /// First move of a shortest path, per cell (`y * width + x`).
    Deterministic { table: Vec<Option<Action>>, width: usize },
    /// Right with probability `p_right`, down otherwise; forced on the
    /// right and bottom borders. Assumes the goal is the bottom-right corner.
    StochasticDiagonal { p_right: f64 },
}

impl ExpertPolicy {
    pub fn stochastic_diagonal(p_right: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_right) {
            return Err(Error::Parameter(format!("p_right {p_right} outside [0, 1]")));
        }
        Ok(Self::StochasticDiagonal { p_right })
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            Self::Deterministic { .. } => true,
            Self::StochasticDiagonal { p_right } => *p_right == 0.0 || *p_right == 1.0,
        }
    }

    pub fn id(&self) -> String {
        match self {
            Self::Deterministic { .. } => "shortest_path".into(),
            Self::StochasticDiagonal { p_right } => format!("diagonal_p{p_right}"),
        }
    }

    /// `π*(·|s)`; `None` at the goal or outside the expert's support.
    pub fn distribution(&self, grid: &Grid, s: PosState) -> Option<[f64; N_ACTIONS]> {
        if s == grid.goal() || !grid.is_feasible(s) {
            return None;
        }
        let mut p = [0.0; N_ACTIONS];
        match self {
            Self::Deterministic { table, width } => {
                let a = table.get(s.y as usize * width + s.x as usize).copied().flatten()?;
                p[a.index()] = 1.0;
            }
            Self::StochasticDiagonal { p_right } => {
                let right_border = s.x as usize == grid.width() - 1;
                let bottom_border = s.y == 0;
                if right_border {
                    p[Action::Down.index()] = 1.0;
                } else if bottom_border {
                    p[Action::Right.index()] = 1.0;
                } else {
                    p[Action::Right.index()] = *p_right;
                    p[Action::Down.index()] = 1.0 - p_right;
                }
            }
        }
        Some(p)
    }

    /// The action of a deterministic expert.
    pub fn action(&self, grid: &Grid, s: PosState) -> Option<Action> {
        let p = self.distribution(grid, s)?;
        let best = (0..N_ACTIONS).find(|&i| p[i] == 1.0)?;
        Action::from_index(best)
    }

    pub fn sample<R: Rng>(&self, grid: &Grid, s: PosState, rng: &mut R) -> Result<Action> {
        let p = self
            .distribution(grid, s)
            .ok_or_else(|| Error::Domain(format!("expert undefined at {s}")))?;
        Ok(sample_index(&p, rng).and_then(Action::from_index).unwrap_or(Action::Right))
    }
}

/// Draws an index from a probability vector with a single uniform.
pub fn sample_index<R: Rng>(p: &[f64], rng: &mut R) -> Option<usize> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        acc += pi;
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}

/// Deterministic shortest-path expert; ties go to the earliest action in
/// canonical order. Cells that cannot reach the goal get no action.
pub fn solve_expert(grid: &Grid) -> ExpertPolicy {
    let dist = grid.distances_from(grid.goal());
    let idx = |p: PosState| p.y as usize * grid.width() + p.x as usize;
    let mut table = vec![None; grid.width() * grid.height()];
    for s in grid.decision_states() {
        let Some(d) = dist[idx(s)] else { continue };
        table[idx(s)] = Action::ALL.into_iter().find(|&a| {
            let n = grid.unchecked_step(s, a);
            n != s && d > 0 && dist[idx(n)] == Some(d - 1)
        });
    }
    ExpertPolicy::Deterministic {
        table,
        width: grid.width(),
    }
}

/// `v*(s) = f(s, π*(s))` for a deterministic expert.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthVm {
    next: BTreeMap<PosState, PosState>,
}

impl GroundTruthVm {
    pub fn next(&self, s: PosState) -> Option<PosState> {
        self.next.get(&s).copied()
    }

    pub fn len(&self) -> usize {
        self.next.len()
    }

    pub fn is_empty(&self) -> bool {
        self.next.is_empty()
    }
}

pub fn ground_truth_vm(grid: &Grid, expert: &ExpertPolicy) -> Result<GroundTruthVm> {
    if !expert.is_deterministic() {
        return Err(Error::Unsupported(
            "ground-truth video model needs a deterministic expert".into(),
        ));
    }
    let mut next = BTreeMap::new();
    for s in grid.decision_states() {
        if let Some(a) = expert.action(grid, s) {
            next.insert(s, grid.unchecked_step(s, a));
        }
    }
    Ok(GroundTruthVm { next })
}

/// Rolls the expert from the start for up to `horizon` actions, stopping
/// early at the goal.
pub fn sample_trajectory<R: Rng>(grid: &Grid, expert: &ExpertPolicy, horizon: usize, rng: &mut R) -> Result<Vec<Transition>> {
    if horizon < 1 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    let mut s = grid.start();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        if s == grid.goal() {
            break;
        }
        let a = expert.sample(grid, s, rng)?;
        let n = grid.step(s, a)?;
        out.push(Transition::labeled(State::Pos(s), a, State::Pos(n)));
        s = n;
    }
    Ok(out)
}

/// Exact `h*(a | s, s')` for every `(s, s')` with positive probability.
#[derive(Clone, Debug, PartialEq)]
pub struct IdmTable {
    entries: BTreeMap<(PosState, PosState), [f64; N_ACTIONS]>,
}

impl IdmTable {
    pub fn get(&self, s: PosState, s_next: PosState) -> Option<[f64; N_ACTIONS]> {
        self.entries.get(&(s, s_next)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(PosState, PosState), &[f64; N_ACTIONS])> {
        self.entries.iter()
    }

    /// Every entry puts mass 1 on a single action.
    pub fn is_deterministic(&self) -> bool {
        self.entries.values().all(|p| p.contains(&1.0))
    }

    pub fn argmax(&self, s: PosState, s_next: PosState) -> Option<Action> {
        let p = self.get(s, s_next)?;
        Action::from_index(argmax(&p))
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Conditions the expert's transition distribution on `(s, s')`. The state
/// weight cancels within each `s`, so every decision state contributes.
pub fn ground_truth_idm_table(grid: &Grid, expert: &ExpertPolicy) -> IdmTable {
    let mut entries: BTreeMap<(PosState, PosState), [f64; N_ACTIONS]> = BTreeMap::new();
    for s in grid.decision_states() {
        let Some(pi) = expert.distribution(grid, s) else { continue };
        for a in Action::ALL {
            if pi[a.index()] <= 0.0 {
                continue;
            }
            let n = grid.unchecked_step(s, a);
            entries.entry((s, n)).or_insert([0.0; N_ACTIONS])[a.index()] += pi[a.index()];
        }
    }
    for p in entries.values_mut() {
        let z: f64 = p.iter().sum();
        for v in p.iter_mut() {
            *v /= z;
        }
    }
    IdmTable { entries }
}

/// `(1/T) Σ_t p^t(s)` from the start state; the goal is absorbing.
pub fn state_visitation(grid: &Grid, expert: &ExpertPolicy, horizon: usize) -> BTreeMap<PosState, f64> {
    let mut current: BTreeMap<PosState, f64> = BTreeMap::from([(grid.start(), 1.0)]);
    let mut total: BTreeMap<PosState, f64> = BTreeMap::new();
    for _ in 0..horizon {
        for (&s, &p) in &current {
            *total.entry(s).or_insert(0.0) += p / horizon as f64;
        }
        let mut next: BTreeMap<PosState, f64> = BTreeMap::new();
        for (&s, &p) in &current {
            match expert.distribution(grid, s) {
                Some(pi) => {
                    for a in Action::ALL {
                        if pi[a.index()] > 0.0 {
                            *next.entry(grid.unchecked_step(s, a)).or_insert(0.0) += p * pi[a.index()];
                        }
                    }
                }
                None => *next.entry(s).or_insert(0.0) += p,
            }
        }
        current = next;
    }
    total
}

/// Exact `H(a|s)` and `H(a|s,s')` (nats) under the state weights `p(s)`,
/// renormalized over states where the expert acts.
pub fn conditional_entropies(grid: &Grid, expert: &ExpertPolicy, weights: &BTreeMap<PosState, f64>) -> (f64, f64) {
    let table = ground_truth_idm_table(grid, expert);
    let (mut h_policy, mut h_idm, mut mass) = (0.0, 0.0, 0.0);
    for (&s, &w) in weights {
        let Some(pi) = expert.distribution(grid, s) else { continue };
        if w <= 0.0 {
            continue;
        }
        mass += w;
        for a in Action::ALL {
            let p = pi[a.index()];
            if p <= 0.0 {
                continue;
            }
            h_policy -= w * p * p.ln();
            let n = grid.unchecked_step(s, a);
            let h = table.get(s, n).map(|q| q[a.index()]).unwrap_or(1.0);
            h_idm -= w * p * h.ln();
        }
    }
    if mass > 0.0 {
        (h_policy / mass, h_idm / mass)
    } else {
        (0.0, 0.0)
    }
}

/// Distinct goals drawn uniformly (without replacement) from feasible cells.
pub fn sample_goals(grid: &Grid, count: usize, seed: u64) -> Result<Vec<PosState>> {
    let mut cells = grid.feasible_states();
    if count == 0 || count > cells.len() {
        return Err(Error::Parameter(format!(
            "cannot draw {count} goals from {} feasible cells",
            cells.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    cells.truncate(count);
    Ok(cells)
}

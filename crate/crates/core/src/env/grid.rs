use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::spec::GridTrackSpec;
use super::{Action, Context, ContextDistribution, ContextualEnv, EnvError, Outcome, State, ValueSupport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    Goal,
}

impl Cell {
    fn from_char(c: char) -> Option<(Self, bool)> {
        match c {
            '.' => Some((Cell::Free, false)),
            'S' => Some((Cell::Free, true)),
            '#' => Some((Cell::Wall, false)),
            'G' => Some((Cell::Goal, false)),
            _ => None,
        }
    }

    fn to_char(self) -> char {
        match self {
            Cell::Free => '.',
            Cell::Wall => '#',
            Cell::Goal => 'G',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    fn cw(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    fn ccw(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Heading::N => (-1, 0),
            Heading::E => (0, 1),
            Heading::S => (1, 0),
            Heading::W => (0, -1),
        }
    }
}

/// Vehicle actions: keep still, drive forward, reverse, or turn in place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Stay = 0,
    Forward = 1,
    Back = 2,
    RotateCw = 3,
    RotateCcw = 4,
}

impl GridAction {
    pub const COUNT: usize = 5;

    pub fn from_index(a: Action) -> Option<Self> {
        match a {
            0 => Some(GridAction::Stay),
            1 => Some(GridAction::Forward),
            2 => Some(GridAction::Back),
            3 => Some(GridAction::RotateCw),
            4 => Some(GridAction::RotateCcw),
            _ => None,
        }
    }
}

/// Episodic gridworld whose layout (walls and goals) depends on the context.
///
/// The observation is `(cell, heading)`; it is the same function of the
/// vehicle pose in every context. Driving into a wall leaves the pose
/// unchanged and yields `collision_reward`; entering a goal cell yields
/// `goal_reward` and ends the episode; anything else costs `step_reward`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTrackEnv {
    width: usize,
    height: usize,
    layouts: Vec<Vec<Cell>>,
    start: Vec<(State, f64)>,
    start_heading: Heading,
    step_reward: f64,
    collision_reward: f64,
    goal_reward: f64,
    horizon: usize,
    gamma: f64,
    context_dist: ContextDistribution,
}

impl GridTrackEnv {
    pub(super) fn from_spec(spec: &GridTrackSpec) -> Result<Self, EnvError> {
        let context_dist = ContextDistribution::new(spec.context_probs.clone())?;
        if spec.layouts.len() != context_dist.len() {
            return Err(EnvError::Invalid(format!(
                "{} layouts for {} contexts",
                spec.layouts.len(),
                context_dist.len()
            )));
        }
        if spec.horizon == 0 {
            return Err(EnvError::Invalid("horizon must be at least 1".into()));
        }
        if !(spec.gamma > 0.0 && spec.gamma <= 1.0) {
            return Err(EnvError::Invalid(format!("gamma {} outside (0, 1]", spec.gamma)));
        }
        for r in [spec.step_reward, spec.collision_reward, spec.goal_reward] {
            if !r.is_finite() {
                return Err(EnvError::Invalid("non-finite reward constant".into()));
            }
        }
        let height = spec.layouts[0].len();
        let width = spec.layouts[0].first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(EnvError::Invalid("empty layout".into()));
        }

        let mut layouts = Vec::with_capacity(spec.layouts.len());
        let mut start_cells: Option<Vec<usize>> = None;
        for (u, rows) in spec.layouts.iter().enumerate() {
            if rows.len() != height || rows.iter().any(|r| r.chars().count() != width) {
                return Err(EnvError::Invalid(format!("layout {u} is not a {height}x{width} rectangle")));
            }
            let mut cells = Vec::with_capacity(width * height);
            let mut starts = Vec::new();
            for (row, line) in rows.iter().enumerate() {
                for (col, ch) in line.chars().enumerate() {
                    let (cell, is_start) = Cell::from_char(ch)
                        .ok_or_else(|| EnvError::Invalid(format!("layout {u}: unknown cell '{ch}'")))?;
                    if is_start {
                        starts.push(row * width + col);
                    }
                    cells.push(cell);
                }
            }
            match &start_cells {
                None => start_cells = Some(starts),
                Some(s) if *s != starts => {
                    return Err(EnvError::Invalid("start cells must coincide across layouts".into()))
                }
                Some(_) => {}
            }
            layouts.push(cells);
        }
        let start_cells = start_cells.unwrap_or_default();
        if start_cells.is_empty() {
            return Err(EnvError::Invalid("no start cell ('S')".into()));
        }
        let probs = match &spec.start_probs {
            Some(p) => {
                if p.len() != start_cells.len() {
                    return Err(EnvError::Invalid(format!(
                        "{} start probabilities for {} start cells",
                        p.len(),
                        start_cells.len()
                    )));
                }
                ContextDistribution::new(p.clone())
                    .map_err(|e| EnvError::Invalid(format!("start distribution: {e}")))?;
                p.clone()
            }
            None => vec![1.0 / start_cells.len() as f64; start_cells.len()],
        };
        let start = start_cells
            .iter()
            .zip(&probs)
            .map(|(&cell, &p)| (cell * 4 + spec.start_heading.index(), p))
            .collect();

        let env = Self {
            width,
            height,
            layouts,
            start,
            start_heading: spec.start_heading,
            step_reward: spec.step_reward,
            collision_reward: spec.collision_reward,
            goal_reward: spec.goal_reward,
            horizon: spec.horizon,
            gamma: spec.gamma,
            context_dist,
        };
        env.check_reachability()?;
        Ok(env)
    }

    pub fn to_spec(&self) -> GridTrackSpec {
        let start_cells: Vec<usize> = self.start.iter().map(|(s, _)| s / 4).collect();
        let layouts = self
            .layouts
            .iter()
            .map(|cells| {
                (0..self.height)
                    .map(|row| {
                        (0..self.width)
                            .map(|col| {
                                let idx = row * self.width + col;
                                if start_cells.contains(&idx) {
                                    'S'
                                } else {
                                    cells[idx].to_char()
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let probs: Vec<f64> = self.start.iter().map(|(_, p)| *p).collect();
        let uniform = probs.iter().all(|p| *p == 1.0 / probs.len() as f64);
        GridTrackSpec {
            layouts,
            context_probs: self.context_dist.probs().to_vec(),
            step_reward: self.step_reward,
            collision_reward: self.collision_reward,
            goal_reward: self.goal_reward,
            horizon: self.horizon,
            gamma: self.gamma,
            start_heading: self.start_heading,
            start_probs: if uniform { None } else { Some(probs) },
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell(&self, context: Context, row: usize, col: usize) -> Cell {
        self.layouts[context.0][row * self.width + col]
    }

    pub fn state_index(&self, row: usize, col: usize, heading: Heading) -> State {
        (row * self.width + col) * 4 + heading.index()
    }

    pub fn decode_state(&self, s: State) -> (usize, usize, Heading) {
        let cell = s / 4;
        (cell / self.width, cell % self.width, Heading::from_index(s % 4))
    }

    pub fn step_reward(&self) -> f64 {
        self.step_reward
    }

    pub fn collision_reward(&self) -> f64 {
        self.collision_reward
    }

    pub fn goal_reward(&self) -> f64 {
        self.goal_reward
    }

    fn neighbour(&self, row: usize, col: usize, h: Heading) -> Option<(usize, usize)> {
        let (dr, dc) = h.delta();
        let r = row as isize + dr;
        let c = col as isize + dc;
        if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    fn check_reachability(&self) -> Result<(), EnvError> {
        for (u, cells) in self.layouts.iter().enumerate() {
            // BFS backwards from goals over positions; turning is always possible.
            let mut reach = vec![false; cells.len()];
            let mut queue: VecDeque<usize> = VecDeque::new();
            for (i, c) in cells.iter().enumerate() {
                if *c == Cell::Goal {
                    reach[i] = true;
                    queue.push_back(i);
                }
            }
            while let Some(i) = queue.pop_front() {
                let (row, col) = (i / self.width, i % self.width);
                for h in Heading::ALL {
                    if let Some((r, c)) = self.neighbour(row, col, h) {
                        let j = r * self.width + c;
                        if !reach[j] && cells[j] == Cell::Free {
                            reach[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
            for (s, p) in &self.start {
                let cell = s / 4;
                if *p > 0.0 && !reach[cell] {
                    return Err(EnvError::GoalUnreachable {
                        context: u,
                        row: cell / self.width,
                        col: cell % self.width,
                    });
                }
            }
        }
        Ok(())
    }
}

impl ContextualEnv for GridTrackEnv {
    fn num_states(&self) -> usize {
        self.width * self.height * 4
    }
    fn num_actions(&self) -> usize {
        GridAction::COUNT
    }
    fn context_dist(&self) -> &ContextDistribution {
        &self.context_dist
    }
    fn start_dist(&self) -> &[(State, f64)] {
        &self.start
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn value_support(&self) -> ValueSupport {
        let worst = self.step_reward.min(self.collision_reward).min(0.0);
        let best = self.step_reward.max(self.collision_reward).max(0.0);
        let weight: f64 = (0..self.horizon).map(|t| self.gamma.powi(t as i32)).sum();
        ValueSupport {
            v_lo: weight * worst + self.goal_reward.min(0.0),
            v_hi: weight * best + self.goal_reward.max(0.0),
        }
    }

    fn dynamics(&self, context: Context, state: State, action: Action) -> Outcome {
        let (row, col, heading) = self.decode_state(state);
        let cells = &self.layouts[context.0];
        if cells[row * self.width + col] == Cell::Goal {
            return Outcome { next_state: state, reward: 0.0, terminal: true };
        }
        let drive = |h: Heading| -> Outcome {
            match self.neighbour(row, col, h) {
                Some((r, c)) => match cells[r * self.width + c] {
                    Cell::Wall => {
                        Outcome { next_state: state, reward: self.collision_reward, terminal: false }
                    }
                    Cell::Goal => Outcome {
                        next_state: self.state_index(r, c, heading),
                        reward: self.goal_reward,
                        terminal: true,
                    },
                    Cell::Free => Outcome {
                        next_state: self.state_index(r, c, heading),
                        reward: self.step_reward,
                        terminal: false,
                    },
                },
                None => Outcome { next_state: state, reward: self.collision_reward, terminal: false },
            }
        };
        let turn = |h: Heading| Outcome {
            next_state: self.state_index(row, col, h),
            reward: self.step_reward,
            terminal: false,
        };
        match GridAction::from_index(action) {
            Some(GridAction::Stay) => turn(heading),
            Some(GridAction::Forward) => drive(heading),
            Some(GridAction::Back) => drive(heading.cw().cw()),
            Some(GridAction::RotateCw) => turn(heading.cw()),
            Some(GridAction::RotateCcw) => turn(heading.ccw()),
            None => panic!("action {action} out of range"),
        }
    }
}

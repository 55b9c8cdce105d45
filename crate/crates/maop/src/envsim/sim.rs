//! Deterministic platformer physics, rendering and reward.

use super::layout::{CellKind, LayoutSpec, CANVAS, CELL_PX, GRID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed action order; indices are the wire format everywhere.
pub const ACTION_NAMES: [&str; 6] = ["up", "down", "left", "right", "jump", "noop"];
pub const N_ACTIONS: usize = 6;
pub const ACT_UP: usize = 0;
pub const ACT_DOWN: usize = 1;
pub const ACT_LEFT: usize = 2;
pub const ACT_RIGHT: usize = 3;
pub const ACT_JUMP: usize = 4;
pub const ACT_NOOP: usize = 5;

/// Upward velocity set by a grounded jump (pixels/step, negative is up).
const JUMP_VELOCITY: f32 = -4.0;
/// Gravity increment per airborne step.
const GRAVITY: f32 = 1.0;
/// Terminal fall speed.
const MAX_FALL: f32 = 4.0;
/// Horizontal / ladder move per step (one cell).
const MOVE_PX: f32 = CELL_PX as f32;
/// Episode step cap: the episode times out beyond this.
pub const EPISODE_CAP: u32 = 100;
/// Win / lose bonus magnitude.
const TERMINAL_BONUS: f32 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Win,
    Lose,
    Timeout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazardState {
    pub path_idx: usize,
}

/// Full simulator state; `step` is a pure function of `(state, layout, action)`.
#[derive(Clone, Debug)]
pub struct EnvState {
    /// Agent sprite top-left, pixels. Always integral.
    pub agent: (f32, f32),
    pub vy: f32,
    pub hazards: Vec<HazardState>,
    pub princess: (f32, f32),
    pub steps: u32,
    /// Smallest agent-princess center distance seen so far.
    pub best_dist: f32,
    pub outcome: Option<Outcome>,
    /// Drives optional hazard jitter; cloned with the state so planning
    /// branches deterministically.
    jitter_rng: ChaCha8Rng,
    pub jitter_prob: f32,
}

fn center(p: (f32, f32)) -> (f32, f32) {
    (p.0 + (CELL_PX as f32 - 1.0) / 2.0, p.1 + (CELL_PX as f32 - 1.0) / 2.0)
}

fn dist(a: (f32, f32), b: (f32, f32)) -> f32 {
    let (ca, cb) = (center(a), center(b));
    ((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2)).sqrt()
}

fn sprites_touch(a: (f32, f32), b: (f32, f32)) -> bool {
    (a.0 - b.0).abs() < CELL_PX as f32 && (a.1 - b.1).abs() < CELL_PX as f32
}

fn cell_to_px(cell: (usize, usize)) -> (f32, f32) {
    ((cell.0 * CELL_PX) as f32, (cell.1 * CELL_PX) as f32)
}

impl EnvState {
    pub fn init(layout: &LayoutSpec, seed: u64) -> Self {
        Self::init_at(layout, seed, layout.spawn_cell, layout.princess_cell)
    }

    /// Start with explicit agent/princess cells (used by the planning
    /// evaluation, which randomizes both).
    pub fn init_at(
        layout: &LayoutSpec,
        seed: u64,
        spawn: (usize, usize),
        princess: (usize, usize),
    ) -> Self {
        let agent = cell_to_px(spawn);
        let princess = cell_to_px(princess);
        let mut s = EnvState {
            agent,
            vy: 0.0,
            hazards: layout.hazard_paths.iter().map(|_| HazardState { path_idx: 0 }).collect(),
            princess,
            steps: 0,
            best_dist: 0.0,
            outcome: None,
            jitter_rng: ChaCha8Rng::seed_from_u64(seed),
            jitter_prob: 0.0,
        };
        s.best_dist = dist(s.agent, s.princess);
        s
    }

    pub fn hazard_px(&self, layout: &LayoutSpec, i: usize) -> (f32, f32) {
        cell_to_px(layout.hazard_paths[i][self.hazards[i].path_idx])
    }

    fn grounded(&self, layout: &LayoutSpec) -> bool {
        layout.cell_at_px(self.agent.0 as i64 + CELL_PX as i64, self.agent.1 as i64)
            == CellKind::Wall
    }

    fn on_ladder(&self, layout: &LayoutSpec) -> bool {
        let (r, c) = (self.agent.0 as i64, self.agent.1 as i64);
        layout.cell_at_px(r, c) == CellKind::Ladder
            || layout.cell_at_px(r + CELL_PX as i64 - 1, c) == CellKind::Ladder
    }
}

/// Advance one step. Deterministic given `(state, action)` (the jitter stream
/// is part of the state).
pub fn step(state: &EnvState, layout: &LayoutSpec, action: usize) -> EnvState {
    assert!(action < N_ACTIONS, "invalid action {action}");
    let mut s = state.clone();
    if s.outcome.is_some() {
        return s;
    }
    s.steps += 1;

    let grounded = s.grounded(layout);
    let on_ladder = s.on_ladder(layout);
    let mut climbed = false;

    match action {
        ACT_LEFT | ACT_RIGHT => {
            let c = s.agent.1 + if action == ACT_LEFT { -MOVE_PX } else { MOVE_PX };
            if !layout.wall_overlaps_sprite(s.agent.0 as i64, c as i64) {
                s.agent.1 = c;
            }
        }
        ACT_UP | ACT_DOWN if on_ladder => {
            let r = s.agent.0 + if action == ACT_UP { -MOVE_PX } else { MOVE_PX };
            if !layout.wall_overlaps_sprite(r as i64, s.agent.1 as i64) {
                s.agent.0 = r;
                s.vy = 0.0;
                climbed = true;
            }
        }
        ACT_JUMP if grounded => {
            s.vy = JUMP_VELOCITY;
        }
        _ => {}
    }

    // Vertical physics: skipped while holding a ladder rung.
    let hold = (on_ladder || s.on_ladder(layout)) && (climbed || s.vy == 0.0);
    if !hold {
        let jumped_now = action == ACT_JUMP && grounded;
        if s.grounded(layout) && s.vy >= 0.0 && !jumped_now {
            s.vy = 0.0;
        } else {
            if !jumped_now {
                s.vy = (s.vy + GRAVITY).min(MAX_FALL);
            }
            // Move pixel by pixel so collisions resolve exactly.
            let dir = if s.vy > 0.0 { 1.0 } else { -1.0 };
            for _ in 0..s.vy.abs() as i64 {
                let r = s.agent.0 + dir;
                if layout.wall_overlaps_sprite(r as i64, s.agent.1 as i64) {
                    s.vy = 0.0;
                    break;
                }
                s.agent.0 = r;
            }
            // Landing zeroes the fall speed in the same step.
            if s.vy > 0.0 && s.grounded(layout) {
                s.vy = 0.0;
            }
        }
    }

    // Hazards advance one waypoint per step (optionally holding under jitter).
    for (i, hz) in s.hazards.iter_mut().enumerate() {
        let hold = s.jitter_prob > 0.0 && s.jitter_rng.gen::<f32>() < s.jitter_prob;
        if !hold {
            hz.path_idx = (hz.path_idx + 1) % layout.hazard_paths[i].len();
        }
    }

    // Terminal checks.
    if sprites_touch(s.agent, s.princess) {
        s.outcome = Some(Outcome::Win);
    } else {
        for i in 0..s.hazards.len() {
            if sprites_touch(s.agent, s.hazard_px(layout, i)) {
                s.outcome = Some(Outcome::Lose);
                break;
            }
        }
    }
    if s.outcome.is_none() && s.steps >= EPISODE_CAP {
        s.outcome = Some(Outcome::Timeout);
    }
    s.best_dist = s.best_dist.min(dist(s.agent, s.princess));
    s
}

/// Shrinking-distance reward plus terminal bonuses: `max(0, best_prev -
/// dist_next)`, `+5` on reaching the princess, `-5` on touching a hazard.
pub fn reward(prev: &EnvState, next: &EnvState) -> f32 {
    let mut r = (prev.best_dist - dist(next.agent, next.princess)).max(0.0);
    match next.outcome {
        Some(Outcome::Win) => r += TERMINAL_BONUS,
        Some(Outcome::Lose) => r -= TERMINAL_BONUS,
        _ => {}
    }
    r
}

/// Rendered RGB frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    /// `h*w*3` bytes, row-major RGB.
    pub data: Vec<u8>,
}

impl Frame {
    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.w + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Normalized float image `[1, 3, h, w]` in `[0, 1]`.
    pub fn to_array(&self) -> crate::diffcore::Array4 {
        let mut a = crate::diffcore::Array4::zeros([1, 3, self.h, self.w]);
        for ch in 0..3 {
            for row in 0..self.h {
                for col in 0..self.w {
                    a.set(0, ch, row, col, self.data[(row * self.w + col) * 3 + ch] as f32 / 255.0);
                }
            }
        }
        a
    }
}

fn fill_sprite(frame: &mut Frame, top_left: (f32, f32), color: [u8; 3]) {
    let (r0, c0) = (top_left.0 as i64, top_left.1 as i64);
    for r in r0..r0 + CELL_PX as i64 {
        for c in c0..c0 + CELL_PX as i64 {
            if r >= 0 && r < frame.h as i64 && c >= 0 && c < frame.w as i64 {
                let i = (r as usize * frame.w + c as usize) * 3;
                frame.data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Flat-color render. Identical state renders to identical bytes.
pub fn render(state: &EnvState, layout: &LayoutSpec) -> Frame {
    let mut f = Frame { h: CANVAS, w: CANVAS, data: vec![0; CANVAS * CANVAS * 3] };
    for row in 0..CANVAS {
        for col in 0..CANVAS {
            let i = (row * CANVAS + col) * 3;
            f.data[i..i + 3].copy_from_slice(&layout.palette.background);
        }
    }
    for r in 0..GRID {
        for c in 0..GRID {
            let color = match layout.cell(r, c) {
                CellKind::Empty => continue,
                CellKind::Wall => layout.palette.wall,
                CellKind::Ladder => layout.palette.ladder,
            };
            fill_sprite(&mut f, cell_to_px((r, c)), color);
        }
    }
    fill_sprite(&mut f, state.princess, layout.palette.princess);
    for i in 0..state.hazards.len() {
        fill_sprite(&mut f, state.hazard_px(layout, i), layout.palette.hazard);
    }
    fill_sprite(&mut f, state.agent, layout.palette.agent);
    f
}

/// Dynamic object classes in ground truth.
pub const CLASS_AGENT: usize = 0;
pub const CLASS_HAZARD: usize = 1;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TruthInstance {
    pub class: usize,
    pub id: usize,
    pub row: f32,
    pub col: f32,
}

/// Ground-truth centers of every dynamic instance in the state.
pub fn truth(state: &EnvState, layout: &LayoutSpec) -> Vec<TruthInstance> {
    let mut out = Vec::with_capacity(1 + state.hazards.len());
    let ac = center(state.agent);
    out.push(TruthInstance { class: CLASS_AGENT, id: 0, row: ac.0, col: ac.1 });
    for i in 0..state.hazards.len() {
        let hc = center(state.hazard_px(layout, i));
        out.push(TruthInstance { class: CLASS_HAZARD, id: i, row: hc.0, col: hc.1 });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::layout::LayoutMode;

    fn simple_layout() -> LayoutSpec {
        LayoutSpec::generate("t", 11, LayoutMode::Simple)
    }

    #[test]
    fn noop_on_grounded_agent_changes_only_the_step_counter() {
        let l = simple_layout();
        let s0 = EnvState::init(&l, 0);
        assert!(s0.grounded(&l), "spawn must be grounded");
        let s1 = step(&s0, &l, ACT_NOOP);
        assert_eq!(s1.agent, s0.agent);
        assert_eq!(s1.vy, 0.0);
        assert_eq!(s1.steps, 1);
    }

    #[test]
    fn jump_arc_is_symmetric_and_returns_to_start() {
        let l = simple_layout();
        let s0 = EnvState::init(&l, 0);
        let start_row = s0.agent.0;
        let mut s = step(&s0, &l, ACT_JUMP);
        // Hand-simulated arc: velocity -4 on the jump step, then gravity +1
        // per step until landing back at the start row.
        let mut rows = vec![s.agent.0 - start_row];
        for _ in 0..12 {
            s = step(&s, &l, ACT_NOOP);
            rows.push(s.agent.0 - start_row);
            if s.agent.0 == start_row && s.vy == 0.0 {
                break;
            }
        }
        assert_eq!(rows, vec![-4.0, -7.0, -9.0, -10.0, -10.0, -9.0, -7.0, -4.0, 0.0]);
    }

    #[test]
    fn walking_into_a_wall_leaves_position_unchanged() {
        let l = simple_layout();
        let mut s = EnvState::init(&l, 0);
        // Walk left until the border wall blocks; then one more left is a noop.
        for _ in 0..GRID {
            s = step(&s, &l, ACT_LEFT);
        }
        let stuck = s.agent;
        let s2 = step(&s, &l, ACT_LEFT);
        assert_eq!(s2.agent, stuck);
    }

    #[test]
    fn render_is_deterministic_and_truth_matches_sprite_centroid() {
        let l = LayoutSpec::generate("t", 5, LayoutMode::Full);
        let s = EnvState::init(&l, 3);
        let f1 = render(&s, &l);
        let f2 = render(&s, &l);
        assert_eq!(f1, f2);
        // Centroid of agent-colored pixels vs truth center.
        let t = truth(&s, &l);
        let (mut sr, mut sc, mut n) = (0.0f32, 0.0f32, 0.0f32);
        for row in 0..f1.h {
            for col in 0..f1.w {
                if f1.rgb(row, col) == l.palette.agent {
                    sr += row as f32;
                    sc += col as f32;
                    n += 1.0;
                }
            }
        }
        assert!((sr / n - t[0].row).abs() <= 0.5);
        assert!((sc / n - t[0].col).abs() <= 0.5);
    }

    #[test]
    fn reaching_the_princess_wins_with_bonus() {
        let l = simple_layout();
        let mut s = EnvState::init(&l, 0);
        // Place the agent one cell left of the princess, on the bump top.
        s.agent = (
            l.princess_cell.0 as f32 * CELL_PX as f32,
            (l.princess_cell.1 as f32 - 1.0) * CELL_PX as f32,
        );
        let next = step(&s, &l, ACT_RIGHT);
        assert_eq!(next.outcome, Some(Outcome::Win));
        assert!(reward(&s, &next) >= TERMINAL_BONUS);
    }

    #[test]
    fn hazard_contact_loses_with_negative_bonus() {
        let l = LayoutSpec::generate("t", 5, LayoutMode::Full);
        let mut s = EnvState::init(&l, 3);
        let hz = s.hazard_px(&l, 0);
        s.agent = (hz.0, hz.1 - MOVE_PX);
        let next = step(&s, &l, ACT_RIGHT);
        // Either we stepped onto the hazard or it stepped onto us.
        if next.outcome == Some(Outcome::Lose) {
            assert!(reward(&s, &next) <= -TERMINAL_BONUS + 1.0);
        }
    }

    #[test]
    fn timeout_at_episode_cap() {
        let l = simple_layout();
        let mut s = EnvState::init(&l, 0);
        for _ in 0..EPISODE_CAP {
            s = step(&s, &l, ACT_NOOP);
            if s.outcome.is_some() {
                break;
            }
        }
        assert_eq!(s.outcome, Some(Outcome::Timeout));
        assert_eq!(s.steps, EPISODE_CAP);
    }

    #[test]
    fn no_approach_means_zero_reward() {
        let l = simple_layout();
        let s0 = EnvState::init(&l, 0);
        let s1 = step(&s0, &l, ACT_NOOP);
        assert_eq!(reward(&s0, &s1), 0.0);
    }
}

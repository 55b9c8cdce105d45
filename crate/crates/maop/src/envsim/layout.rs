//! Scene layouts: cell grid, hazard patrol paths, palette, text format.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cells per side of the square lattice.
pub const GRID: usize = 12;
/// Pixels per cell (and per sprite).
pub const CELL_PX: usize = 4;
/// Canvas side in pixels.
pub const CANVAS: usize = GRID * CELL_PX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Empty,
    Wall,
    Ladder,
}

/// Flat RGB colors, one per object class, pairwise distinct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    pub background: [u8; 3],
    pub wall: [u8; 3],
    pub ladder: [u8; 3],
    pub princess: [u8; 3],
    pub agent: [u8; 3],
    pub hazard: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            background: [24, 24, 32],
            wall: [120, 76, 32],
            ladder: [212, 188, 52],
            princess: [232, 112, 184],
            agent: [64, 208, 84],
            hazard: [228, 52, 40],
        }
    }
}

/// One scene: terrain grid, hazard waypoint loops, princess and spawn cells.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSpec {
    pub name: String,
    pub cells: Vec<CellKind>,
    /// Each path is a closed waypoint cycle in cell coordinates; a hazard
    /// advances one waypoint per step.
    pub hazard_paths: Vec<Vec<(usize, usize)>>,
    pub princess_cell: (usize, usize),
    pub spawn_cell: (usize, usize),
    pub palette: Palette,
    pub cell_px: usize,
}

/// Layout family used by a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutMode {
    /// Single agent, walls only: fast acceptance runs.
    Simple,
    /// Adds ladders and two patrolling hazards.
    Full,
}

impl LayoutMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(LayoutMode::Simple),
            "full" => Ok(LayoutMode::Full),
            other => Err(Error::Config(format!("unknown env mode {other:?} (simple|full)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LayoutMode::Simple => "simple",
            LayoutMode::Full => "full",
        }
    }
}

impl LayoutSpec {
    pub fn cell(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * GRID + col]
    }

    fn set_cell(&mut self, row: usize, col: usize, k: CellKind) {
        self.cells[row * GRID + col] = k;
    }

    /// Cell kind at a pixel coordinate; outside the canvas reads as wall.
    pub fn cell_at_px(&self, row_px: i64, col_px: i64) -> CellKind {
        if row_px < 0 || col_px < 0 || row_px >= CANVAS as i64 || col_px >= CANVAS as i64 {
            return CellKind::Wall;
        }
        self.cell(row_px as usize / CELL_PX, col_px as usize / CELL_PX)
    }

    /// True if any wall pixel intersects the sprite rect whose top-left pixel
    /// is `(row, col)`.
    pub fn wall_overlaps_sprite(&self, row: i64, col: i64) -> bool {
        for dr in [0, CELL_PX as i64 - 1] {
            for dc in [0, CELL_PX as i64 - 1] {
                if self.cell_at_px(row + dr, col + dc) == CellKind::Wall {
                    return true;
                }
            }
        }
        false
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != GRID * GRID {
            return Err(Error::Config("layout grid must be 12x12".into()));
        }
        for (what, (r, c)) in [("spawn", self.spawn_cell), ("princess", self.princess_cell)] {
            if self.cell(r, c) != CellKind::Empty {
                return Err(Error::Config(format!("{what} cell ({r},{c}) is not empty")));
            }
        }
        for (i, path) in self.hazard_paths.iter().enumerate() {
            if path.is_empty() {
                return Err(Error::Config(format!("hazard {i} has an empty path")));
            }
            for &(r, c) in path {
                if r >= GRID || c >= GRID {
                    return Err(Error::Config(format!("hazard {i} waypoint ({r},{c}) out of bounds")));
                }
            }
        }
        let colors = [
            self.palette.background,
            self.palette.wall,
            self.palette.ladder,
            self.palette.princess,
            self.palette.agent,
            self.palette.hazard,
        ];
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                if colors[i] == colors[j] {
                    return Err(Error::Config("palette colors must be pairwise distinct".into()));
                }
            }
        }
        Ok(())
    }

    /// Serialize to the plain-text grid format: `#` wall, `H` ladder, `.`
    /// empty, `P` princess, `A` spawn; digits 0-4 mark the first hazard's
    /// waypoint anchors in order, 5-9 the second's.
    pub fn to_text(&self) -> String {
        let mut chars: Vec<char> = self
            .cells
            .iter()
            .map(|k| match k {
                CellKind::Empty => '.',
                CellKind::Wall => '#',
                CellKind::Ladder => 'H',
            })
            .collect();
        for (hi, path) in self.hazard_paths.iter().enumerate().take(2) {
            // Anchors are the unique waypoints in first-visit order.
            let mut anchors: Vec<(usize, usize)> = Vec::new();
            for wp in path {
                if !anchors.contains(wp) {
                    anchors.push(*wp);
                }
            }
            for (ai, (r, c)) in anchors.into_iter().enumerate().take(5) {
                chars[r * GRID + c] = char::from_digit((hi * 5 + ai) as u32, 10).unwrap();
            }
        }
        chars[self.princess_cell.0 * GRID + self.princess_cell.1] = 'P';
        chars[self.spawn_cell.0 * GRID + self.spawn_cell.1] = 'A';
        let mut out = String::with_capacity(GRID * (GRID + 1));
        for row in 0..GRID {
            for col in 0..GRID {
                out.push(chars[row * GRID + col]);
            }
            out.push('\n');
        }
        out
    }

    /// Parse the text grid format. Hazard anchors are expanded into ping-pong
    /// patrol cycles.
    pub fn from_text(name: &str, text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != GRID {
            return Err(Error::Data(format!("layout {name:?}: expected {GRID} rows, got {}", rows.len())));
        }
        let mut cells = vec![CellKind::Empty; GRID * GRID];
        let mut princess = None;
        let mut spawn = None;
        let mut anchors: Vec<Vec<(usize, usize, u32)>> = vec![Vec::new(), Vec::new()];
        for (r, line) in rows.iter().enumerate() {
            let chars: Vec<char> = line.chars().collect();
            if chars.len() != GRID {
                return Err(Error::Data(format!("layout {name:?}: row {r} must have {GRID} cells")));
            }
            for (c, ch) in chars.iter().enumerate() {
                match ch {
                    '#' => cells[r * GRID + c] = CellKind::Wall,
                    'H' => cells[r * GRID + c] = CellKind::Ladder,
                    '.' => {}
                    'P' => princess = Some((r, c)),
                    'A' => spawn = Some((r, c)),
                    d if d.is_ascii_digit() => {
                        let v = d.to_digit(10).unwrap();
                        anchors[(v / 5) as usize].push((r, c, v % 5));
                    }
                    other => {
                        return Err(Error::Data(format!("layout {name:?}: bad cell char {other:?}")))
                    }
                }
            }
        }
        let princess = princess.ok_or_else(|| Error::Data(format!("layout {name:?}: no princess")))?;
        let spawn = spawn.ok_or_else(|| Error::Data(format!("layout {name:?}: no spawn")))?;
        let mut hazard_paths = Vec::new();
        for mut set in anchors {
            if set.is_empty() {
                continue;
            }
            set.sort_by_key(|&(_, _, v)| v);
            let pts: Vec<(usize, usize)> = set.into_iter().map(|(r, c, _)| (r, c)).collect();
            hazard_paths.push(ping_pong_cycle(&pts));
        }
        let layout = LayoutSpec {
            name: name.to_string(),
            cells,
            hazard_paths,
            princess_cell: princess,
            spawn_cell: spawn,
            palette: Palette::default(),
            cell_px: CELL_PX,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Procedurally generate one layout. Same `(seed, mode)` always yields the
    /// same layout.
    pub fn generate(name: &str, seed: u64, mode: LayoutMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = LayoutSpec {
            name: name.to_string(),
            cells: vec![CellKind::Empty; GRID * GRID],
            hazard_paths: Vec::new(),
            princess_cell: (0, 0),
            spawn_cell: (0, 0),
            palette: Palette::default(),
            cell_px: CELL_PX,
        };
        // Border ring of walls; the bottom ring is the floor.
        for i in 0..GRID {
            l.set_cell(0, i, CellKind::Wall);
            l.set_cell(GRID - 1, i, CellKind::Wall);
            l.set_cell(i, 0, CellKind::Wall);
            l.set_cell(i, GRID - 1, CellKind::Wall);
        }
        let mut platform: Option<(usize, usize, usize)> = None; // (row, c0, c1)
        let mut patrol: Vec<(usize, usize)> = Vec::new();
        if mode == LayoutMode::Full {
            // One platform with a ladder down to the floor. Patrol loops need
            // length >= 4 so no cell is occupied often enough to blend into
            // the background statistics.
            let len = rng.gen_range(4..=5);
            let c0 = rng.gen_range(2..GRID - 2 - len);
            let row = GRID - 5;
            for c in c0..c0 + len {
                l.set_cell(row, c, CellKind::Wall);
            }
            let ladder_col = rng.gen_range(c0..c0 + len);
            for r in row + 1..GRID - 1 {
                if l.cell(r, ladder_col) == CellKind::Empty {
                    l.set_cell(r, ladder_col, CellKind::Ladder);
                }
            }
            platform = Some((row, c0, c0 + len - 1));
            // Reserve the floor patrol before placing bumps, so its cells
            // stay wall-free and adjacent. The ladder column is avoided
            // because the text format stores one glyph per cell.
            let plen = rng.gen_range(4..=5);
            let starts: Vec<usize> = (1..GRID - 1 - plen)
                .filter(|&s| !(s..s + plen).contains(&ladder_col))
                .collect();
            let start = starts[rng.gen_range(0..starts.len())];
            patrol = (start..start + plen).map(|c| (GRID - 2, c)).collect();
        }
        // Single-cell bumps on the floor row, spaced apart and off the
        // patrol. Sampling from the remaining valid columns keeps this loop
        // finite.
        let n_bumps = if mode == LayoutMode::Full { rng.gen_range(1..=2) } else { rng.gen_range(2..=3) };
        let mut bump_cols: Vec<usize> = Vec::new();
        for _ in 0..n_bumps {
            let valid: Vec<usize> = (2..GRID - 2)
                .filter(|&c| {
                    bump_cols.iter().all(|&b| (b as i64 - c as i64).abs() >= 3)
                        && l.cell(GRID - 2, c) == CellKind::Empty
                        && !patrol.iter().any(|&(_, pc)| pc == c)
                })
                .collect();
            if valid.is_empty() {
                break;
            }
            let c = valid[rng.gen_range(0..valid.len())];
            bump_cols.push(c);
            l.set_cell(GRID - 2, c, CellKind::Wall);
        }
        bump_cols.sort_unstable();
        let floor_cols: Vec<usize> = (1..GRID - 1)
            .filter(|&c| l.cell(GRID - 2, c) == CellKind::Empty)
            .collect();
        // Princess on a bump top whose cell stayed empty (a ladder may have
        // claimed one); floor fallback.
        l.princess_cell = {
            let free: Vec<usize> = bump_cols
                .iter()
                .copied()
                .filter(|&c| l.cell(GRID - 3, c) == CellKind::Empty)
                .collect();
            if free.is_empty() {
                let off_patrol: Vec<usize> = floor_cols
                    .iter()
                    .copied()
                    .filter(|&c| !patrol.iter().any(|&(_, pc)| pc == c))
                    .collect();
                let c = off_patrol[rng.gen_range(0..off_patrol.len())];
                (GRID - 2, c)
            } else {
                (GRID - 3, free[rng.gen_range(0..free.len())])
            }
        };
        // Spawn: an empty floor cell off the patrol, preferring distance from
        // the princess.
        let open: Vec<usize> = floor_cols
            .iter()
            .copied()
            .filter(|&c| {
                !patrol.iter().any(|&(_, pc)| pc == c) && (GRID - 2, c) != l.princess_cell
            })
            .collect();
        let mut far: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&c| (c as i64 - l.princess_cell.1 as i64).abs() >= 3)
            .collect();
        if far.is_empty() {
            far = open;
        }
        let spawn_col = far[rng.gen_range(0..far.len())];
        l.spawn_cell = (GRID - 2, spawn_col);
        if mode == LayoutMode::Full {
            l.hazard_paths.push(ping_pong_cycle(&patrol));
            // Hazard 2 patrols the platform top.
            if let Some((row, c0, c1)) = platform {
                let top: Vec<(usize, usize)> = (c0..=c1).map(|c| (row - 1, c)).collect();
                l.hazard_paths.push(ping_pong_cycle(&top));
            }
        }
        l.validate().expect("generated layout must validate");
        l
    }
}

/// Expand an anchor sequence into a ping-pong cycle; interior anchors appear
/// twice (out and back).
fn ping_pong_cycle(points: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut cycle = points.to_vec();
    if points.len() > 2 {
        for p in points[1..points.len() - 1].iter().rev() {
            cycle.push(*p);
        }
    }
    cycle
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_deterministic_and_valid() {
        let a = LayoutSpec::generate("t", 7, LayoutMode::Full);
        let b = LayoutSpec::generate("t", 7, LayoutMode::Full);
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.hazard_paths.len(), 2);
        let s = LayoutSpec::generate("s", 7, LayoutMode::Simple);
        assert!(s.hazard_paths.is_empty());
    }

    #[test]
    fn text_round_trip_preserves_structure() {
        let a = LayoutSpec::generate("t", 3, LayoutMode::Full);
        let text = a.to_text();
        let b = LayoutSpec::from_text("t", &text).unwrap();
        assert_eq!(a.cells, b.cells);
        assert_eq!(a.princess_cell, b.princess_cell);
        assert_eq!(a.spawn_cell, b.spawn_cell);
        assert_eq!(a.hazard_paths, b.hazard_paths);
    }

    #[test]
    fn ping_pong_cycle_walks_out_and_back() {
        let c = ping_pong_cycle(&[(0, 1), (0, 2), (0, 3)]);
        assert_eq!(c, vec![(0, 1), (0, 2), (0, 3), (0, 2)]);
    }
}

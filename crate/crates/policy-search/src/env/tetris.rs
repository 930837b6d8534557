//! Feature-based afterstate Tetris.
//!
//! Actions are full placements (rotation class + column); the piece drops to
//! its rest position, full rows clear immediately and the reward is the
//! number of cleared lines. A placement that cannot rest inside the board
//! tops the game out: the board resets to empty with zero reward, which
//! keeps the empty board a recurrent state of the chain. Policy features are
//! evaluated on after-states: column heights, absolute adjacent height
//! differences, maximum height and hole count.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::model::SampledEnv;
use crate::policy::ActionFeatures;

pub const N_PIECES: usize = 7;
const MAX_W: usize = 14;
const MAX_H: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    O = 0,
    I = 1,
    S = 2,
    Z = 3,
    T = 4,
    L = 5,
    J = 6,
}

impl Piece {
    pub const ALL: [Piece; N_PIECES] = [
        Piece::O,
        Piece::I,
        Piece::S,
        Piece::Z,
        Piece::T,
        Piece::L,
        Piece::J,
    ];

    fn from_index(i: usize) -> Piece {
        Piece::ALL[i]
    }
}

/// A placement: rotation class index and leftmost column of the piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub rot: u8,
    pub col: u8,
}

#[derive(Debug, Clone)]
struct Shape {
    cells: [(u8, u8); 4],
    width: u8,
    height: u8,
    /// Lowest occupied dy per piece column.
    bottom: [u8; 4],
    /// Highest occupied dy per piece column.
    top: [u8; 4],
}

fn shape(cells: [(u8, u8); 4]) -> Shape {
    let width = cells.iter().map(|&(x, _)| x + 1).max().unwrap();
    let height = cells.iter().map(|&(_, y)| y + 1).max().unwrap();
    let mut bottom = [u8::MAX; 4];
    let mut top = [0u8; 4];
    for &(x, y) in &cells {
        let x = x as usize;
        bottom[x] = bottom[x].min(y);
        top[x] = top[x].max(y);
    }
    Shape { cells, width, height, bottom, top }
}

fn shapes() -> &'static [Vec<Shape>; N_PIECES] {
    static SHAPES: OnceLock<[Vec<Shape>; N_PIECES]> = OnceLock::new();
    SHAPES.get_or_init(|| {
        [
            // O
            vec![shape([(0, 0), (1, 0), (0, 1), (1, 1)])],
            // I
            vec![
                shape([(0, 0), (1, 0), (2, 0), (3, 0)]),
                shape([(0, 0), (0, 1), (0, 2), (0, 3)]),
            ],
            // S
            vec![
                shape([(0, 0), (1, 0), (1, 1), (2, 1)]),
                shape([(1, 0), (0, 1), (1, 1), (0, 2)]),
            ],
            // Z
            vec![
                shape([(1, 0), (2, 0), (0, 1), (1, 1)]),
                shape([(0, 0), (0, 1), (1, 1), (1, 2)]),
            ],
            // T
            vec![
                shape([(0, 0), (1, 0), (2, 0), (1, 1)]),
                shape([(0, 0), (0, 1), (0, 2), (1, 1)]),
                shape([(1, 0), (0, 1), (1, 1), (2, 1)]),
                shape([(1, 0), (0, 1), (1, 1), (1, 2)]),
            ],
            // L
            vec![
                shape([(0, 0), (1, 0), (0, 1), (0, 2)]),
                shape([(0, 0), (1, 0), (2, 0), (0, 1)]),
                shape([(1, 0), (1, 1), (0, 2), (1, 2)]),
                shape([(2, 0), (0, 1), (1, 1), (2, 1)]),
            ],
            // J
            vec![
                shape([(0, 0), (1, 0), (1, 1), (1, 2)]),
                shape([(0, 0), (1, 0), (2, 0), (2, 1)]),
                shape([(0, 0), (0, 1), (0, 2), (1, 2)]),
                shape([(0, 0), (0, 1), (1, 1), (2, 1)]),
            ],
        ]
    })
}

/// Board plus the piece to place. Row 0 is the bottom; bit `c` of a row is
/// column `c`. Rows at or above the board height stay zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TetrisState {
    pub rows: [u16; MAX_H],
    pub piece: Piece,
}

impl TetrisState {
    pub fn empty(piece: Piece) -> Self {
        TetrisState { rows: [0; MAX_H], piece }
    }

    pub fn board_empty(&self) -> bool {
        self.rows.iter().all(|&r| r == 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct ColumnStats {
    heights: [u8; MAX_W],
    filled: [u8; MAX_W],
}

impl ColumnStats {
    fn of(rows: &[u16; MAX_H], board_h: usize) -> ColumnStats {
        let mut stats = ColumnStats { heights: [0; MAX_W], filled: [0; MAX_W] };
        for (r, &bits) in rows.iter().enumerate().take(board_h) {
            let mut bits = bits;
            while bits != 0 {
                let c = bits.trailing_zeros() as usize;
                stats.filled[c] += 1;
                stats.heights[c] = r as u8 + 1;
                bits &= bits - 1;
            }
        }
        stats
    }
}

/// Outcome of committing a placement.
struct Afterstate {
    rows: [u16; MAX_H],
    stats: ColumnStats,
    lines: u32,
    topout: bool,
}

/// The Tetris simulator: board geometry plus the per-piece placement lists.
#[derive(Debug, Clone)]
pub struct TetrisSim {
    width: usize,
    height: usize,
    full_row: u16,
    placements: [Vec<Placement>; N_PIECES],
}

impl TetrisSim {
    pub fn new(width: usize, height: usize) -> Self {
        assert!((4..=MAX_W).contains(&width), "board width out of range");
        assert!((4..=MAX_H).contains(&height), "board height out of range");
        let placements = std::array::from_fn(|piece| {
            let mut list = Vec::new();
            for (rot, shape) in shapes()[piece].iter().enumerate() {
                for col in 0..=(width - shape.width as usize) {
                    list.push(Placement { rot: rot as u8, col: col as u8 });
                }
            }
            list
        });
        TetrisSim {
            width,
            height,
            full_row: ((1u32 << width) - 1) as u16,
            placements,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Feature dimension: `width` heights, `width - 1` adjacent differences,
    /// maximum height, hole count.
    pub fn n_features(&self) -> usize {
        2 * self.width + 1
    }

    /// Every placement of `piece` that fits horizontally. Placements are
    /// always non-empty; ones that cannot rest vertically top the game out
    /// when committed.
    pub fn placements(&self, piece: Piece) -> &[Placement] {
        &self.placements[piece as usize]
    }

    fn afterstate(
        &self,
        rows: &[u16; MAX_H],
        stats: &ColumnStats,
        piece: Piece,
        placement: Placement,
    ) -> Afterstate {
        let shape = &shapes()[piece as usize][placement.rot as usize];
        let col = placement.col as usize;
        let mut base = 0i32;
        for dx in 0..shape.width as usize {
            base = base.max(stats.heights[col + dx] as i32 - shape.bottom[dx] as i32);
        }
        let base = base as usize;
        if base + shape.height as usize > self.height {
            return Afterstate {
                rows: [0; MAX_H],
                stats: ColumnStats { heights: [0; MAX_W], filled: [0; MAX_W] },
                lines: 0,
                topout: true,
            };
        }
        let mut new_rows = *rows;
        for &(dx, dy) in &shape.cells {
            new_rows[base + dy as usize] |= 1 << (col + dx as usize);
        }
        // Only rows the piece touched can have completed.
        let mut cleared = 0u32;
        for r in base..base + shape.height as usize {
            if new_rows[r] == self.full_row {
                cleared += 1;
            }
        }
        if cleared == 0 {
            let mut stats = *stats;
            for dx in 0..shape.width as usize {
                stats.heights[col + dx] = stats.heights[col + dx].max((base + shape.top[dx] as usize) as u8 + 1);
            }
            for &(dx, _) in &shape.cells {
                stats.filled[col + dx as usize] += 1;
            }
            return Afterstate { rows: new_rows, stats, lines: 0, topout: false };
        }
        let mut compacted = [0u16; MAX_H];
        let mut out = 0;
        for r in 0..self.height {
            if new_rows[r] != self.full_row {
                compacted[out] = new_rows[r];
                out += 1;
            }
        }
        let stats = ColumnStats::of(&compacted, self.height);
        Afterstate { rows: compacted, stats, lines: cleared, topout: false }
    }

    fn write_features(&self, stats: &ColumnStats, out: &mut [f64]) {
        let w = self.width;
        let mut max_h = 0u8;
        let mut holes = 0u32;
        for c in 0..w {
            let h = stats.heights[c];
            out[c] = h as f64;
            max_h = max_h.max(h);
            holes += (h - stats.filled[c]) as u32;
        }
        for c in 0..w - 1 {
            out[w + c] = (stats.heights[c] as f64 - stats.heights[c + 1] as f64).abs();
        }
        out[2 * w - 1] = max_h as f64;
        out[2 * w] = holes as f64;
    }

    /// Features of a raw board (exposed for tests and debugging).
    pub fn board_features(&self, state: &TetrisState) -> DVector<f64> {
        let stats = ColumnStats::of(&state.rows, self.height);
        let mut out = DVector::zeros(self.n_features());
        self.write_features(&stats, out.as_mut_slice());
        out
    }

    /// Commits a placement: returns the resulting board (empty on top-out)
    /// and the number of lines cleared (0 on top-out).
    pub fn apply(&self, state: &TetrisState, placement: Placement) -> ([u16; MAX_H], u32) {
        let stats = ColumnStats::of(&state.rows, self.height);
        let after = self.afterstate(&state.rows, &stats, state.piece, placement);
        if after.topout {
            ([0; MAX_H], 0)
        } else {
            (after.rows, after.lines)
        }
    }

    /// Text rendering, top row first.
    pub fn render(&self, state: &TetrisState) -> String {
        let mut s = String::new();
        for r in (0..self.height).rev() {
            for c in 0..self.width {
                s.push(if state.rows[r] & (1 << c) != 0 { '#' } else { '.' });
            }
            s.push('\n');
        }
        s.push_str(&format!("piece: {:?}\n", state.piece));
        s
    }
}

impl SampledEnv for TetrisSim {
    type State = TetrisState;
    type Action = Placement;

    fn reset<R: Rng>(&self, rng: &mut R) -> TetrisState {
        TetrisState::empty(Piece::from_index(rng.random_range(0..N_PIECES)))
    }

    fn step<R: Rng>(&self, state: &TetrisState, action: &Placement, rng: &mut R) -> (TetrisState, f64) {
        let (rows, lines) = self.apply(state, *action);
        let piece = Piece::from_index(rng.random_range(0..N_PIECES));
        (TetrisState { rows, piece }, lines as f64)
    }

    fn has_recurrent_state(&self) -> bool {
        true
    }

    /// The empty board is the recurrent state; every game passes through it
    /// (a new game starts there and games terminate in finite time), which
    /// is what regenerative estimation requires. The upcoming piece is not
    /// part of the recurrence predicate.
    fn at_recurrent_state(&self, state: &TetrisState) -> bool {
        state.board_empty()
    }
}

/// Gibbs-policy feature provider over placements: the features of an action
/// are the board features of its after-state.
#[derive(Debug, Clone)]
pub struct TetrisActionSpace {
    sim: TetrisSim,
}

impl TetrisActionSpace {
    pub fn new(sim: TetrisSim) -> Self {
        TetrisActionSpace { sim }
    }

    pub fn sim(&self) -> &TetrisSim {
        &self.sim
    }
}

impl ActionFeatures for TetrisActionSpace {
    type State = TetrisState;
    type Action = Placement;

    fn n_features(&self) -> usize {
        self.sim.n_features()
    }

    fn actions(&self, state: &TetrisState) -> Vec<Placement> {
        self.sim.placements(state.piece).to_vec()
    }

    fn features_into(&self, state: &TetrisState, out: &mut DMatrix<f64>) -> Vec<Placement> {
        let placements = self.sim.placements(state.piece);
        let n_feat = self.sim.n_features();
        out.resize_mut(placements.len(), n_feat, 0.0);
        let stats = ColumnStats::of(&state.rows, self.sim.height);
        let mut row_buf = vec![0.0; n_feat];
        for (k, &placement) in placements.iter().enumerate() {
            let after = self.sim.afterstate(&state.rows, &stats, state.piece, placement);
            self.sim.write_features(&after.stats, &mut row_buf);
            for (j, &v) in row_buf.iter().enumerate() {
                out[(k, j)] = v;
            }
        }
        placements.to_vec()
    }

    fn features(&self, state: &TetrisState, action: &Placement) -> DVector<f64> {
        let stats = ColumnStats::of(&state.rows, self.sim.height);
        let after = self.sim.afterstate(&state.rows, &stats, state.piece, *action);
        let mut out = DVector::zeros(self.sim.n_features());
        self.sim.write_features(&after.stats, out.as_mut_slice());
        out
    }
}

/// Convenience: features of an arbitrary board under a given geometry.
pub fn tetris_features(sim: &TetrisSim, state: &TetrisState) -> DVector<f64> {
    sim.board_features(state)
}

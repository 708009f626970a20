//! Built-in benchmark MDPs, each with four named test rewards.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Discount used by the built-in benchmarks unless overridden.
pub const BENCHMARK_DISCOUNT: f64 = 0.95;

/// A state reward vector with a name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReward {
    pub name: String,
    pub reward: Vec<f64>,
}

impl NamedReward {
    fn new(name: &str, reward: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            reward,
        }
    }

    pub fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.reward)
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: &'static str,
    pub mdp: TabularMdp,
    pub test_tasks: Vec<NamedReward>,
}

pub const BENCHMARK_NAMES: [&str; 3] = ["four_rooms", "corridor", "windy_grid"];

pub fn benchmark(name: &str, discount: f64) -> Result<Benchmark> {
    match name {
        "four_rooms" => four_rooms(discount),
        "corridor" => corridor(discount),
        "windy_grid" => windy_grid(discount),
        other => Err(Error::InvalidArgument(format!("unknown benchmark '{other}'"))),
    }
}

pub fn all_benchmarks(discount: f64) -> Result<Vec<Benchmark>> {
    BENCHMARK_NAMES.iter().map(|n| benchmark(n, discount)).collect()
}

// up, down, left, right, stay
const MOVES: [(i64, i64); 5] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];

struct Grid {
    rows: usize,
    cols: usize,
}

impl Grid {
    fn index(&self, r: usize, c: usize) -> usize {
        r * self.cols + c
    }

    fn n(&self) -> usize {
        self.rows * self.cols
    }

    fn clamp_move(&self, r: usize, c: usize, dr: i64, dc: i64) -> (usize, usize) {
        let nr = (r as i64 + dr).clamp(0, self.rows as i64 - 1) as usize;
        let nc = (c as i64 + dc).clamp(0, self.cols as i64 - 1) as usize;
        (nr, nc)
    }
}

fn uniform_dist(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0 / n as f64)
}

/// 8x8 grid split into four 4x4 rooms by walls between cells, with one
/// doorway per shared wall. With probability `slip` the intended action is
/// replaced by a uniformly random one.
pub fn four_rooms(discount: f64) -> Result<Benchmark> {
    let grid = Grid { rows: 8, cols: 8 };
    let slip = 0.1;
    // wall between columns 3|4 is open at rows 1 and 6; between rows 3|4 at columns 1 and 6
    let blocked = |r: usize, c: usize, nr: usize, nc: usize| -> bool {
        if c != nc && c.min(nc) == 3 {
            return r != 1 && r != 6;
        }
        if r != nr && r.min(nr) == 3 {
            return c != 1 && c != 6;
        }
        false
    };
    let n = grid.n();
    let deterministic: Vec<DMatrix<f64>> = MOVES
        .iter()
        .map(|&(dr, dc)| {
            let mut p = DMatrix::zeros(n, n);
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let (nr, nc) = grid.clamp_move(r, c, dr, dc);
                    let target = if blocked(r, c, nr, nc) { (r, c) } else { (nr, nc) };
                    p[(grid.index(r, c), grid.index(target.0, target.1))] = 1.0;
                }
            }
            p
        })
        .collect();
    let mean_move = deterministic.iter().fold(DMatrix::zeros(n, n), |acc, p| acc + p) / MOVES.len() as f64;
    let transitions = deterministic
        .iter()
        .map(|p| p * (1.0 - slip) + &mean_move * slip)
        .collect();
    let mdp = TabularMdp::new(transitions, uniform_dist(n), discount)?;

    let cell = |cells: &[(usize, usize)], value: f64| {
        let mut r = vec![0.0; n];
        for &(a, b) in cells {
            r[grid.index(a, b)] = value;
        }
        r
    };
    let mut avoid = vec![0.0; n];
    for r in 0..8 {
        for c in 0..8 {
            if r < 4 && c < 4 {
                avoid[grid.index(r, c)] = -1.0;
            } else if r >= 4 && c >= 4 {
                avoid[grid.index(r, c)] = 1.0;
            }
        }
    }
    let doors = [(1, 3), (1, 4), (6, 3), (6, 4), (3, 1), (4, 1), (3, 6), (4, 6)];
    Ok(Benchmark {
        name: "four_rooms",
        mdp,
        test_tasks: vec![
            NamedReward::new("reach-corner", cell(&[(7, 7)], 1.0)),
            NamedReward::new("reach-center", cell(&[(3, 3), (3, 4), (4, 3), (4, 4)], 1.0)),
            NamedReward::new("avoid-region", avoid),
            NamedReward::new("traverse", cell(&doors, 1.0)),
        ],
    })
}

/// 12-state line with a reliable forward action, an unreliable reverse
/// action and a no-op.
pub fn corridor(discount: f64) -> Result<Benchmark> {
    let n = 12;
    let mut forward = DMatrix::zeros(n, n);
    let mut reverse = DMatrix::zeros(n, n);
    let stay = DMatrix::identity(n, n);
    for s in 0..n {
        let next = (s + 1).min(n - 1);
        forward[(s, next)] += 0.9;
        forward[(s, s)] += 0.1;
        let prev = s.saturating_sub(1);
        reverse[(s, prev)] += 0.5;
        reverse[(s, s)] += 0.5;
    }
    let mut mu = DVector::zeros(n);
    for s in 4..=7 {
        mu[s] = 0.25;
    }
    let mdp = TabularMdp::new(vec![forward, reverse, stay], mu, discount)?;
    let last = (n - 1) as f64;
    let mut middle = vec![0.0; n];
    middle[5] = 1.0;
    middle[6] = 1.0;
    let avoid_ends = (0..n)
        .map(|s| if s <= 1 || s >= n - 2 { -1.0 } else { 0.5 })
        .collect();
    Ok(Benchmark {
        name: "corridor",
        mdp,
        test_tasks: vec![
            NamedReward::new("run-forward", (0..n).map(|s| s as f64 / last).collect()),
            NamedReward::new("run-backward", (0..n).map(|s| (last - s as f64) / last).collect()),
            NamedReward::new("reach-middle", middle),
            NamedReward::new("avoid-ends", avoid_ends),
        ],
    })
}

/// 6x6 open grid whose two middle columns push the agent one cell up with
/// probability 0.3 after each move.
pub fn windy_grid(discount: f64) -> Result<Benchmark> {
    let grid = Grid { rows: 6, cols: 6 };
    let wind = 0.3;
    let windy = |c: usize| c == 2 || c == 3;
    let n = grid.n();
    let transitions = MOVES
        .iter()
        .map(|&(dr, dc)| {
            let mut p = DMatrix::zeros(n, n);
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let from = grid.index(r, c);
                    let (nr, nc) = grid.clamp_move(r, c, dr, dc);
                    if windy(nc) {
                        let (wr, wc) = grid.clamp_move(nr, nc, -1, 0);
                        p[(from, grid.index(nr, nc))] += 1.0 - wind;
                        p[(from, grid.index(wr, wc))] += wind;
                    } else {
                        p[(from, grid.index(nr, nc))] = 1.0;
                    }
                }
            }
            p
        })
        .collect();
    let mdp = TabularMdp::new(transitions, uniform_dist(n), discount)?;
    let cell = |cells: &[(usize, usize)]| {
        let mut r = vec![0.0; n];
        for &(a, b) in cells {
            r[grid.index(a, b)] = 1.0;
        }
        r
    };
    let mut avoid = vec![0.0; n];
    for r in 0..6 {
        for c in 0..6 {
            if windy(c) {
                avoid[grid.index(r, c)] = -1.0;
            } else if r == 5 {
                avoid[grid.index(r, c)] = 1.0;
            }
        }
    }
    Ok(Benchmark {
        name: "windy_grid",
        mdp,
        test_tasks: vec![
            NamedReward::new("reach-top-left", cell(&[(0, 0)])),
            NamedReward::new("reach-bottom-right", cell(&[(5, 5)])),
            NamedReward::new("reach-center", cell(&[(2, 2), (2, 3), (3, 2), (3, 3)])),
            NamedReward::new("avoid-wind", avoid),
        ],
    })
}

//! Deterministic turn-rule corpora on a hexagonal disk, for learnability
//! experiments with a known ceiling for first-order predictors.
//!
//! Every cell carries a fixed turn in {-1, 0, +1} (sixths of a revolution).
//! A walker enters at a rim cell heading inward and at each cell rotates its
//! heading by `σ · turn(cell)`, stepping to the neighbour it then faces. The
//! walk ends (with EOT) when it steps off the disk, or is cut at `max_len`.
//! With `σ = +1` the next cell is a function of the last two; drawing
//! `σ = ±1` per trajectory makes it depend on history a first-order chain
//! cannot see.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{HexTrajectory, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::windows;
use crate::hexgrid::{disk, hex_distance, neighbors, HexCell};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Disk radius in cells; radius 11 gives 397 cells.
    pub radius: u32,
    pub res: u8,
    /// Probability that a cell's turn is 0.
    pub p_straight: f64,
    pub trajectories: usize,
    /// Walks shorter than this are never drawn.
    pub min_len: usize,
    pub max_len: usize,
    /// Draw `σ = ±1` per trajectory instead of always `+1`.
    pub handedness: bool,
    /// Seed of the turn table (the "world").
    pub world_seed: u64,
    /// Seed of the trajectory draws.
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            radius: 11,
            res: 9,
            p_straight: 0.6,
            trajectories: 500,
            min_len: 16,
            max_len: 48,
            handedness: false,
            world_seed: 7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TurnWorld {
    center: HexCell,
    radius: u32,
    cells: Vec<HexCell>,
    turns: HashMap<HexCell, i32>,
}

impl TurnWorld {
    pub fn new(radius: u32, res: u8, p_straight: f64, seed: u64) -> Result<Self> {
        if radius == 0 || !(0.0..=1.0).contains(&p_straight) {
            return Err(Error::Config(format!("radius {radius}, p_straight {p_straight}")));
        }
        let center = HexCell::new(res, 0, 0);
        let mut cells = disk(center, radius);
        cells.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let turns = cells
            .iter()
            .map(|c| {
                let t = if rng.random_bool(p_straight) {
                    0
                } else if rng.random_bool(0.5) {
                    1
                } else {
                    -1
                };
                (*c, t)
            })
            .collect();
        Ok(TurnWorld {
            center,
            radius,
            cells,
            turns,
        })
    }

    /// Sorted disk cells.
    pub fn cells(&self) -> &[HexCell] {
        &self.cells
    }

    pub fn turn(&self, c: &HexCell) -> Option<i32> {
        self.turns.get(c).copied()
    }

    pub fn contains(&self, c: &HexCell) -> bool {
        self.turns.contains_key(c)
    }

    /// Rim cells, each with the inward heading that most reduces distance to
    /// the centre (lowest direction index on ties).
    pub fn entries(&self) -> Vec<(HexCell, usize)> {
        let dist = |c: HexCell| hex_distance(c, self.center).unwrap_or(u32::MAX);
        self.cells
            .iter()
            .filter(|c| dist(**c) == self.radius)
            .map(|c| {
                let ns = neighbors(*c);
                let h = (0..6).min_by_key(|&d| (dist(ns[d]), d)).expect("six directions");
                (*c, h)
            })
            .collect()
    }

    /// The deterministic walk from `start`; returns the cells and whether it
    /// left the disk (as opposed to being cut at `max_len`).
    pub fn walk(&self, start: HexCell, heading: usize, sigma: i32, max_len: usize) -> (Vec<HexCell>, bool) {
        let mut cells = vec![start];
        let mut cur = start;
        let mut h = heading as i32;
        while cells.len() < max_len {
            h = (h + sigma * self.turns[&cur]).rem_euclid(6);
            let next = neighbors(cur)[h as usize];
            if !self.contains(&next) {
                return (cells, true);
            }
            cells.push(next);
            cur = next;
        }
        (cells, false)
    }
}

/// One admissible start state: entry cell, heading and handedness.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub start: HexCell,
    pub heading: usize,
    pub sigma: i32,
    pub cells: Vec<HexCell>,
    pub terminated: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub world: TurnWorld,
    /// Every start state whose walk reaches `min_len`; draws are uniform
    /// over this set.
    pub routes: Vec<Route>,
    pub trajectories: Vec<HexTrajectory>,
    /// `σ` of each drawn trajectory.
    pub sigmas: Vec<i32>,
    /// All disk cells, so the vocabulary does not depend on the draw.
    pub vocab: Vocabulary,
}

fn routes(world: &TurnWorld, cfg: &SyntheticConfig) -> Vec<Route> {
    let sigmas: &[i32] = if cfg.handedness { &[1, -1] } else { &[1] };
    let mut out = Vec::new();
    for (start, heading) in world.entries() {
        for &sigma in sigmas {
            let (cells, terminated) = world.walk(start, heading, sigma, cfg.max_len);
            if cells.len() >= cfg.min_len {
                out.push(Route {
                    start,
                    heading,
                    sigma,
                    cells,
                    terminated,
                });
            }
        }
    }
    out
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::Config(format!("min_len {} / max_len {}", cfg.min_len, cfg.max_len)));
    }
    let world = TurnWorld::new(cfg.radius, cfg.res, cfg.p_straight, cfg.world_seed)?;
    let routes = routes(&world, cfg);
    if routes.is_empty() {
        return Err(Error::Empty("synthetic routes of the minimum length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectories = Vec::with_capacity(cfg.trajectories);
    let mut sigmas = Vec::with_capacity(cfg.trajectories);
    for i in 0..cfg.trajectories {
        let r = routes.choose(&mut rng).expect("nonempty");
        trajectories.push(HexTrajectory {
            start_time: i as f64,
            cells: r.cells.clone(),
            terminated: r.terminated,
        });
        sigmas.push(r.sigma);
    }
    let vocab = Vocabulary::from_cells(world.cells().iter().copied());
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        world,
        routes,
        trajectories,
        sigmas,
        vocab,
    })
}

impl SyntheticCorpus {
    pub fn encoded(&self, seqs: &[HexTrajectory]) -> Result<Vec<Vec<u32>>> {
        seqs.iter().map(|t| self.vocab.encode_trajectory(t)).collect()
    }

    /// Exact best Acc@1 achievable by any predictor that sees only the last
    /// prefix token, over evaluation windows `(l, k)` drawn from this
    /// generator. Computed by enumerating every route with its draw
    /// probability, not by sampling.
    pub fn last_token_ceiling(&self, l: usize, k: usize) -> Result<f64> {
        let seqs: Vec<Vec<u32>> = self
            .routes
            .iter()
            .map(|r| {
                self.vocab.encode_trajectory(&HexTrajectory {
                    start_time: 0.0,
                    cells: r.cells.clone(),
                    terminated: r.terminated,
                })
            })
            .collect::<Result<_>>()?;
        // Every route is equally likely, so window counts are proportional
        // to window probabilities.
        let mut joint: BTreeMap<u32, BTreeMap<Vec<u32>, usize>> = BTreeMap::new();
        let mut total = 0usize;
        for (prefix, cont) in windows(&seqs, l, k) {
            let cont = crate::eval::truncate_eot(&cont).to_vec();
            *joint.entry(*prefix.last().expect("l >= 1")).or_default().entry(cont).or_insert(0) += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::Empty("windows of length l + k"));
        }
        let best: usize = joint.values().map(|m| m.values().max().copied().unwrap_or(0)).sum();
        Ok(best as f64 / total as f64)
    }
}

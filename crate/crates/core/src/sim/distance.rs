use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{PlanarState, Vec2, WorldSpec};

/// Wall-aware shortest-path distances to the goal on an 8-connected grid.
///
/// The grid is aligned so the goal sits exactly on a cell center and spans the
/// world bounds. A cell is occupied when its center lies in a wall interior.
/// Diagonal moves cost `sqrt(2) * resolution` and may not cut occupied corners.
#[derive(Clone, Debug)]
pub struct DistanceField {
    origin: Vec2,
    resolution: f64,
    nx: usize,
    ny: usize,
    goal_cell: (usize, usize),
    occupied: Vec<bool>,
    dist: Vec<f64>,
}

#[derive(PartialEq)]
struct Node {
    cost: f64,
    idx: usize,
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NEIGHBORS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

impl DistanceField {
    /// Occupancy grid only; distances are filled by [`DistanceField::solve`].
    pub fn grid(world: &WorldSpec, resolution: f64) -> Self {
        assert!(resolution > 0.0, "resolution must be positive");
        let g = world.goal;
        let lo = world.bounds.min;
        let hi = world.bounds.max;
        let i_lo = ((lo.x - g.x) / resolution).ceil() as i64;
        let i_hi = ((hi.x - g.x) / resolution).floor() as i64;
        let j_lo = ((lo.y - g.y) / resolution).ceil() as i64;
        let j_hi = ((hi.y - g.y) / resolution).floor() as i64;
        let nx = (i_hi - i_lo + 1).max(1) as usize;
        let ny = (j_hi - j_lo + 1).max(1) as usize;
        let origin = Vec2::new(
            g.x + i_lo as f64 * resolution,
            g.y + j_lo as f64 * resolution,
        );
        let mut occupied = vec![false; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                let c = origin + Vec2::new(i as f64, j as f64) * resolution;
                occupied[j * nx + i] = world.walls.iter().any(|w| w.interior_contains(&c, 0.0));
            }
        }
        Self {
            origin,
            resolution,
            nx,
            ny,
            goal_cell: ((-i_lo) as usize, (-j_lo) as usize),
            occupied,
            dist: vec![f64::INFINITY; nx * ny],
        }
    }

    pub fn compute(world: &WorldSpec, resolution: f64) -> Self {
        let mut f = Self::grid(world, resolution);
        f.solve(resolution, resolution * std::f64::consts::SQRT_2);
        f
    }

    /// Dijkstra from the goal cell with the given straight and diagonal step costs.
    pub fn solve(&mut self, straight: f64, diagonal: f64) {
        self.dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        let src = self.index(self.goal_cell.0, self.goal_cell.1);
        if self.occupied[src] {
            return;
        }
        let mut heap = BinaryHeap::new();
        self.dist[src] = 0.0;
        heap.push(Node { cost: 0.0, idx: src });
        while let Some(Node { cost, idx }) = heap.pop() {
            if cost > self.dist[idx] {
                continue;
            }
            for (nbr, w) in self.neighbors(idx, straight, diagonal) {
                let nc = cost + w;
                if nc < self.dist[nbr] {
                    self.dist[nbr] = nc;
                    heap.push(Node { cost: nc, idx: nbr });
                }
            }
        }
    }

    /// Free neighbors of cell `idx` with their step costs.
    pub fn neighbors(&self, idx: usize, straight: f64, diagonal: f64) -> Vec<(usize, f64)> {
        let (i, j) = ((idx % self.nx) as i64, (idx / self.nx) as i64);
        let mut out = Vec::with_capacity(8);
        for (di, dj) in NEIGHBORS {
            let (ni, nj) = (i + di, j + dj);
            if !self.free(ni, nj) {
                continue;
            }
            if di != 0 && dj != 0 {
                if !self.free(i + di, j) || !self.free(i, j + dj) {
                    continue;
                }
                out.push((self.index(ni as usize, nj as usize), diagonal));
            } else {
                out.push((self.index(ni as usize, nj as usize), straight));
            }
        }
        out
    }

    fn free(&self, i: i64, j: i64) -> bool {
        i >= 0
            && j >= 0
            && (i as usize) < self.nx
            && (j as usize) < self.ny
            && !self.occupied[self.index(i as usize, j as usize)]
    }

    fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn goal_index(&self) -> usize {
        self.index(self.goal_cell.0, self.goal_cell.1)
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.occupied[idx]
    }

    pub fn cell_distances(&self) -> &[f64] {
        &self.dist
    }

    pub fn cell_center(&self, idx: usize) -> Vec2 {
        let (i, j) = (idx % self.nx, idx / self.nx);
        self.origin + Vec2::new(i as f64, j as f64) * self.resolution
    }

    /// Cell containing `p` (nearest center), clamped to the grid.
    pub fn cell_of(&self, p: &Vec2) -> usize {
        let rel = (p - self.origin) / self.resolution;
        let i = (rel.x.round().max(0.0) as usize).min(self.nx - 1);
        let j = (rel.y.round().max(0.0) as usize).min(self.ny - 1);
        self.index(i, j)
    }

    /// Distance from `p` to the goal: best over the containing cell and its
    /// neighbors of `dist(cell) + |p - center(cell)|`. Infinite when enclosed.
    pub fn query(&self, p: &Vec2) -> f64 {
        let c = self.cell_of(p);
        let (ci, cj) = ((c % self.nx) as i64, (c / self.nx) as i64);
        let mut best = f64::INFINITY;
        for dj in -1..=1 {
            for di in -1..=1 {
                let (i, j) = (ci + di, cj + dj);
                if !self.free(i, j) {
                    continue;
                }
                let idx = self.index(i as usize, j as usize);
                let d = self.dist[idx];
                if d.is_finite() {
                    best = best.min(d + (p - self.cell_center(idx)).norm());
                }
            }
        }
        best
    }
}

/// Wall-aware goal distance of `x` at the given grid resolution.
pub fn dijkstra_goal_distance(world: &WorldSpec, x: &PlanarState, resolution: f64) -> f64 {
    DistanceField::compute(world, resolution).query(&x.pos)
}

//! Ground-truth dead-end labels.
//!
//! A traversable cell is a dead-end cell when the goal is unreachable from it,
//! or when some single passable cell (a corridor mouth) separates it from the
//! goal. Connectivity is 4-neighbour over passable cells.

use std::collections::BTreeSet;

use super::map::{CellIndex, GridMap, GridError, Point2};

/// A set of cells stored as a mask aligned with a [`GridMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadEndSet {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl DeadEndSet {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn for_map(map: &GridMap) -> Self {
        Self::empty(map.width(), map.height())
    }

    pub fn insert(&mut self, c: CellIndex) {
        if c.x < self.width && c.y < self.height {
            self.mask[c.y * self.width + c.x] = true;
        }
    }

    pub fn contains(&self, c: CellIndex) -> bool {
        c.x < self.width && c.y < self.height && self.mask[c.y * self.width + c.x]
    }

    pub fn contains_linear(&self, i: usize) -> bool {
        self.mask.get(i).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = CellIndex> + '_ {
        let w = self.width;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| CellIndex::new(i % w, i / w))
    }

    pub fn to_btree(&self) -> BTreeSet<CellIndex> {
        self.iter().collect()
    }
}

/// Labels dead-end cells relative to `goal`.
pub fn ground_truth_deadend(map: &GridMap, goal: Point2) -> Result<DeadEndSet, GridError> {
    let goal_cell = map.world_to_cell(goal)?;
    let n = map.len();
    let mut labels = DeadEndSet::for_map(map);
    if !map.is_passable(goal_cell) {
        // nothing reaches the goal
        for i in 0..n {
            if map.cells()[i].is_passable() {
                labels.mask[i] = true;
            }
        }
        return Ok(labels);
    }

    const UNSEEN: usize = usize::MAX;
    let mut disc = vec![UNSEEN; n];
    let mut low = vec![0usize; n];
    let mut subtree_end = vec![0usize; n];
    let mut order: Vec<usize> = Vec::new();
    // (cell, parent, next neighbour slot)
    let mut stack: Vec<(usize, usize, u8)> = Vec::new();

    let root = map.linear(goal_cell);
    disc[root] = 0;
    low[root] = 0;
    order.push(root);
    stack.push((root, UNSEEN, 0));
    // cut intervals in preorder: [start, end) subtrees severed from the goal
    let mut cuts: Vec<(usize, usize)> = Vec::new();

    while let Some(top) = stack.last_mut() {
        let (v, parent, slot) = *top;
        if slot < 4 {
            top.2 += 1;
            let c = map.cell_of_linear(v);
            let (dx, dy) = [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)][slot as usize];
            let nx = c.x as isize + dx;
            let ny = c.y as isize + dy;
            if nx < 0 || ny < 0 || nx as usize >= map.width() || ny as usize >= map.height() {
                continue;
            }
            let u = ny as usize * map.width() + nx as usize;
            if !map.cells()[u].is_passable() {
                continue;
            }
            if disc[u] == UNSEEN {
                disc[u] = order.len();
                low[u] = disc[u];
                order.push(u);
                stack.push((u, v, 0));
            } else if u != parent {
                low[v] = low[v].min(disc[u]);
            }
        } else {
            stack.pop();
            subtree_end[v] = order.len();
            if parent != UNSEEN {
                low[parent] = low[parent].min(low[v]);
                // parent separates v's subtree from the root unless parent is the root
                if parent != root && low[v] >= disc[parent] {
                    cuts.push((disc[v], subtree_end[v]));
                }
            }
        }
    }

    let mut marks = vec![0i64; order.len() + 1];
    for (a, b) in cuts {
        marks[a] += 1;
        marks[b] -= 1;
    }
    let mut running = 0i64;
    for (pos, &cell) in order.iter().enumerate() {
        running += marks[pos];
        if running > 0 {
            labels.mask[cell] = true;
        }
    }
    for i in 0..n {
        if map.cells()[i].is_passable() && disc[i] == UNSEEN {
            labels.mask[i] = true;
        }
    }
    Ok(labels)
}

/// Passable cells 4-connected to `from`; the test oracles build on it.
#[cfg(test)]
pub(crate) fn reachable_from(map: &GridMap, from: CellIndex) -> Vec<bool> {
    let mut seen = vec![false; map.len()];
    if !map.is_passable(from) {
        return seen;
    }
    let mut queue = std::collections::VecDeque::from([from]);
    seen[map.linear(from)] = true;
    while let Some(c) = queue.pop_front() {
        for nb in map.neighbors4(c) {
            let i = map.linear(nb);
            if !seen[i] && map.is_passable(nb) {
                seen[i] = true;
                queue.push_back(nb);
            }
        }
    }
    seen
}

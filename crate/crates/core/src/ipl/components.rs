//! Two-pass connected-component labelling over a disjoint-set forest.

use crate::error::{Error, Result};
use crate::types::{Connectivity, Grid, InstanceMap, LabelMap, FOREGROUND, IGNORE};

/// Union-find with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        ra
    }
}

/// Already-visited neighbours in a row-major scan.
fn causal_neighbors(connectivity: Connectivity) -> &'static [(isize, isize)] {
    match connectivity {
        Connectivity::Four => &[(0, -1), (-1, 0)],
        Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
    }
}

/// Labels maximal regions of equal nonzero `class`; zero is background.
///
/// Ids are assigned `1..=K` in order of each region's first pixel in row-major order.
fn label_by(class: &[u32], (h, w): (usize, usize), connectivity: Connectivity) -> (Vec<u32>, u32) {
    let mut forest = DisjointSet::new(h * w);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if class[i] == 0 {
                continue;
            }
            for &(dr, dc) in causal_neighbors(connectivity) {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if class[j] == class[i] {
                    forest.union(i, j);
                }
            }
        }
    }
    let mut root_id = vec![0u32; h * w];
    let mut out = vec![0u32; h * w];
    let mut next = 0u32;
    for i in 0..h * w {
        if class[i] == 0 {
            continue;
        }
        let root = forest.find(i);
        if root_id[root] == 0 {
            next += 1;
            root_id[root] = next;
        }
        out[i] = root_id[root];
    }
    (out, next)
}

/// Labels the foreground of a binary mask.
pub fn connected_components(mask: &LabelMap, connectivity: Connectivity) -> Result<InstanceMap> {
    if mask.grid().data().contains(&IGNORE) {
        return Err(Error::invariant("connected_components needs a binary {0, 1} mask"));
    }
    let class: Vec<u32> = mask.grid().data().iter().map(|&v| (v == FOREGROUND) as u32).collect();
    let (h, w) = mask.shape();
    let (ids, count) = label_by(&class, (h, w), connectivity);
    Ok(InstanceMap::from_grid_unchecked(Grid::from_parts_unchecked(h, w, ids), count))
}

/// Canonicalizes an arbitrary label grid: each connected run of one nonzero
/// label becomes its own instance.
pub fn relabel_regions(labels: &Grid<u32>, connectivity: Connectivity) -> InstanceMap {
    let (h, w) = labels.shape();
    let (ids, count) = label_by(labels.data(), (h, w), connectivity);
    InstanceMap::from_grid_unchecked(Grid::from_parts_unchecked(h, w, ids), count)
}

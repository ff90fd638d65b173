//! Structural statistics: reachability and maximum antichain width.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{TaskGraph, TaskId};

/// Above this size the quadratic reachability matrix is not built and the
/// antichain width is reported as unknown.
pub const ANTICHAIN_TASK_LIMIT: usize = 12_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub task_count: usize,
    pub edge_count: usize,
    pub max_antichain_width: Option<usize>,
    pub roots: usize,
    pub leaves: usize,
    /// Number of tasks on the longest dependency chain.
    pub longest_chain: usize,
}

impl GraphStats {
    pub fn of(graph: &TaskGraph) -> Self {
        let mut depth = vec![0usize; graph.len()];
        for t in graph.tasks() {
            let d = t.predecessors.iter().map(|p| depth[p.0 as usize]).max().unwrap_or(0) + 1;
            depth[t.id.0 as usize] = d;
        }
        Self {
            task_count: graph.len(),
            edge_count: graph.edge_count(),
            max_antichain_width: (graph.len() <= ANTICHAIN_TASK_LIMIT).then(|| max_antichain_width(graph, None)),
            roots: graph.tasks().filter(|t| t.predecessors.is_empty()).count(),
            leaves: graph.tasks().filter(|t| t.successors.is_empty()).count(),
            longest_chain: depth.into_iter().max().unwrap_or(0),
        }
    }
}

struct BitMatrix {
    words: usize,
    bits: Vec<u64>,
}

impl BitMatrix {
    fn new(n: usize) -> Self {
        let words = n.div_ceil(64);
        Self { words, bits: vec![0; words * n] }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
    }

    fn or_row_into(&mut self, dst: usize, src: usize) {
        let w = self.words;
        let (a, b) = if dst < src {
            let (lo, hi) = self.bits.split_at_mut(src * w);
            (&mut lo[dst * w..(dst + 1) * w], &hi[..w])
        } else {
            let (lo, hi) = self.bits.split_at_mut(dst * w);
            (&mut hi[..w], &lo[src * w..(src + 1) * w])
        };
        for (x, y) in a.iter_mut().zip(b) {
            *x |= *y;
        }
    }
}

fn for_each_bit(row: &[u64], mask: &[u64], mut f: impl FnMut(usize) -> bool) {
    for (wi, (r, m)) in row.iter().zip(mask).enumerate() {
        let mut w = r & m;
        while w != 0 {
            let b = w.trailing_zeros() as usize;
            if !f(wi * 64 + b) {
                return;
            }
            w &= w - 1;
        }
    }
}

/// Width of the largest set of mutually unreachable tasks, optionally
/// restricted to `subset` (reachability still goes through the full graph).
/// Computed exactly via Dilworth: width = |S| - maximum matching in the
/// bipartite comparability graph.
pub fn max_antichain_width(graph: &TaskGraph, subset: Option<&BTreeSet<TaskId>>) -> usize {
    let n = graph.len();
    if n == 0 {
        return 0;
    }
    // Edges always go from lower to higher ids, so descending id order is a
    // reverse topological order.
    let mut reach = BitMatrix::new(n);
    for t in graph.tasks().collect::<Vec<_>>().into_iter().rev() {
        let u = t.id.0 as usize;
        for s in &t.successors {
            let v = s.0 as usize;
            reach.set(u, v);
            reach.or_row_into(u, v);
        }
    }
    let mut mask = vec![0u64; reach.words];
    let members: Vec<usize> = match subset {
        Some(s) => s.iter().map(|id| id.0 as usize).filter(|i| *i < n).collect(),
        None => (0..n).collect(),
    };
    for &m in &members {
        mask[m / 64] |= 1 << (m % 64);
    }
    members.len() - hopcroft_karp(&reach, &mask, &members, n)
}

fn hopcroft_karp(reach: &BitMatrix, mask: &[u64], left: &[usize], n: usize) -> usize {
    const NIL: usize = usize::MAX;
    let mut match_l = vec![NIL; n];
    let mut match_r = vec![NIL; n];
    let mut dist = vec![0usize; n];
    let mut matching = 0;

    // Greedy warm start.
    for &u in left {
        for_each_bit(reach.row(u), mask, |v| {
            if match_r[v] == NIL {
                match_r[v] = u;
                match_l[u] = v;
                matching += 1;
                false
            } else {
                true
            }
        });
    }

    loop {
        // BFS layering from free left vertices.
        let mut queue = VecDeque::new();
        for &u in left {
            if match_l[u] == NIL {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = usize::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for_each_bit(reach.row(u), mask, |v| {
                let w = match_r[v];
                if w == NIL {
                    found = true;
                } else if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
                true
            });
        }
        if !found {
            break;
        }
        for &u in left {
            if match_l[u] == NIL && augment(u, reach, mask, &mut match_l, &mut match_r, &mut dist) {
                matching += 1;
            }
        }
    }
    matching
}

fn augment(
    root: usize,
    reach: &BitMatrix,
    mask: &[u64],
    match_l: &mut [usize],
    match_r: &mut [usize],
    dist: &mut [usize],
) -> bool {
    const NIL: usize = usize::MAX;
    // Iterative DFS over layered graph; stack holds (left vertex, candidate rights).
    let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
    let neighbours = |u: usize| {
        let mut v = Vec::new();
        for_each_bit(reach.row(u), mask, |x| {
            v.push(x);
            true
        });
        v.reverse();
        v
    };
    stack.push((root, neighbours(root)));
    let mut path: Vec<(usize, usize)> = Vec::new();
    while let Some((u, cands)) = stack.last_mut() {
        let u = *u;
        match cands.pop() {
            None => {
                dist[u] = usize::MAX;
                stack.pop();
                path.pop();
            }
            Some(v) => {
                let w = match_r[v];
                if w == NIL {
                    path.push((u, v));
                    for (a, b) in path {
                        match_l[a] = b;
                        match_r[b] = a;
                    }
                    return true;
                }
                if dist[w] == dist[u].wrapping_add(1) {
                    path.push((u, v));
                    stack.push((w, neighbours(w)));
                }
            }
        }
    }
    false
}

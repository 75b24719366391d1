use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed-point scale for distances, so reduced costs compare exactly.
const COST_SCALE: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    /// Maximum-cardinality matching of minimum total distance.
    #[default]
    Optimal,
    /// Nearest pairs first; faster, not guaranteed maximal.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// (predicted voxel, ground-truth voxel, distance), flat indices.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// Integer offsets within `max_dist`, nearest first.
fn offsets(max_dist: f64) -> Vec<([isize; 3], i64, f64)> {
    let r = max_dist.floor() as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dz * dz + dy * dy + dx * dx) as f64;
                if d2 <= max_dist * max_dist {
                    let d = d2.sqrt();
                    out.push(([dz, dy, dx], (d * COST_SCALE).round() as i64, d));
                }
            }
        }
    }
    out.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

struct Graph {
    /// Flat voxel index of each left (predicted) and right (truth) node.
    left: Vec<usize>,
    right: Vec<usize>,
    /// Per left node: (right node, cost, distance), cheapest first.
    edges: Vec<Vec<(usize, i64, f64)>>,
}

fn build_graph(pred: &Tensor<f32>, gt: &Tensor<f32>, max_dist: f64) -> Graph {
    let [_, _, d, h, w] = gt.shape().0;
    let mut right_of = vec![u32::MAX; gt.len()];
    let mut right = Vec::new();
    for (i, &v) in gt.data().iter().enumerate() {
        if v != 0.0 {
            right_of[i] = right.len() as u32;
            right.push(i);
        }
    }
    let offs = offsets(max_dist);
    let mut left = Vec::new();
    let mut edges = Vec::new();
    for (i, &v) in pred.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
        let mut e = Vec::new();
        for (o, cost, dist) in &offs {
            let (qz, qy, qx) = (z + o[0], y + o[1], x + o[2]);
            if qz < 0 || qy < 0 || qx < 0 || qz >= d as isize || qy >= h as isize || qx >= w as isize {
                continue;
            }
            let r = right_of[(qz as usize * h + qy as usize) * w + qx as usize];
            if r != u32::MAX {
                e.push((r as usize, *cost, *dist));
            }
        }
        left.push(i);
        edges.push(e);
    }
    Graph { left, right, edges }
}

const FREE: usize = usize::MAX;

/// Primal-dual min-cost maximum matching. Each phase runs one Dijkstra over
/// reduced costs, lifts the potentials, then augments a maximal set of
/// vertex-disjoint zero-reduced-cost paths.
fn optimal(g: &Graph) -> Vec<usize> {
    let (nl, nr) = (g.left.len(), g.right.len());
    let mut mate_l = vec![FREE; nl];
    let mut mate_r = vec![FREE; nr];
    let mut pot_l = vec![0i64; nl];
    let mut pot_r = vec![0i64; nr];
    let mut dist_l = vec![i64::MAX; nl];
    let mut dist_r = vec![i64::MAX; nr];
    let mut heap = BinaryHeap::new();
    loop {
        dist_l.fill(i64::MAX);
        dist_r.fill(i64::MAX);
        heap.clear();
        for u in 0..nl {
            if mate_l[u] == FREE && !g.edges[u].is_empty() {
                dist_l[u] = 0;
                heap.push(Reverse((0i64, u)));
            }
        }
        let mut best = i64::MAX;
        while let Some(Reverse((du, u))) = heap.pop() {
            if du > best {
                break;
            }
            if du > dist_l[u] {
                continue;
            }
            for &(v, c, _) in &g.edges[u] {
                if mate_l[u] == v {
                    continue;
                }
                let nd = du + c + pot_l[u] - pot_r[v];
                if nd >= dist_r[v] {
                    continue;
                }
                dist_r[v] = nd;
                match mate_r[v] {
                    FREE => best = best.min(nd),
                    m => {
                        if nd < dist_l[m] {
                            dist_l[m] = nd;
                            heap.push(Reverse((nd, m)));
                        }
                    }
                }
            }
        }
        if best == i64::MAX {
            break;
        }
        for u in 0..nl {
            pot_l[u] += dist_l[u].min(best);
        }
        for v in 0..nr {
            pot_r[v] += dist_r[v].min(best);
        }

        // Augment along admissible edges: unmatched with zero reduced cost.
        let mut visited = vec![false; nr];
        let mut cursor = vec![0usize; nl];
        for root in 0..nl {
            if mate_l[root] != FREE {
                continue;
            }
            let mut stack = vec![root];
            let mut via: Vec<usize> = Vec::new();
            while let Some(&u) = stack.last() {
                let mut next = None;
                while cursor[u] < g.edges[u].len() {
                    let (v, c, _) = g.edges[u][cursor[u]];
                    cursor[u] += 1;
                    if !visited[v] && mate_l[u] != v && c + pot_l[u] - pot_r[v] == 0 {
                        next = Some(v);
                        break;
                    }
                }
                match next {
                    Some(v) => {
                        visited[v] = true;
                        via.push(v);
                        if mate_r[v] == FREE {
                            for (&l, &r) in stack.iter().zip(&via) {
                                mate_l[l] = r;
                                mate_r[r] = l;
                            }
                            break;
                        }
                        stack.push(mate_r[v]);
                    }
                    None => {
                        stack.pop();
                        via.pop();
                    }
                }
            }
        }
    }
    mate_l
}

fn greedy(g: &Graph) -> Vec<usize> {
    let mut cand: Vec<(i64, usize, usize)> = g
        .edges
        .iter()
        .enumerate()
        .flat_map(|(u, e)| e.iter().map(move |&(v, c, _)| (c, u, v)))
        .collect();
    cand.sort_unstable();
    let mut mate_l = vec![FREE; g.left.len()];
    let mut used = vec![false; g.right.len()];
    for (_, u, v) in cand {
        if mate_l[u] == FREE && !used[v] {
            mate_l[u] = v;
            used[v] = true;
        }
    }
    mate_l
}

/// One-to-one correspondence between predicted and true positives within
/// `max_dist` voxels.
pub fn match_boundaries(
    pred: &Tensor<f32>,
    gt: &Tensor<f32>,
    max_dist: f64,
    matcher: Matcher,
) -> Result<MatchResult> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "match_boundaries",
            left: pred.shape(),
            right: gt.shape(),
        });
    }
    if !(max_dist >= 0.0 && max_dist.is_finite()) {
        return Err(Error::InvalidArgument(format!("max_dist must be finite and >= 0, got {max_dist}")));
    }
    let g = build_graph(pred, gt, max_dist);
    let mate = match matcher {
        Matcher::Optimal => optimal(&g),
        Matcher::Greedy => greedy(&g),
    };
    let pairs: Vec<_> = mate
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != FREE)
        .map(|(u, &v)| {
            let dist = g.edges[u].iter().find(|e| e.0 == v).expect("matched along an edge").2;
            (g.left[u], g.right[v], dist)
        })
        .collect();
    let predicted = pred.data().iter().filter(|&&v| v != 0.0).count();
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: predicted - tp,
        fn_: g.right.len() - tp,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_within_two() {
        assert_eq!(offsets(2.0).len(), 33);
        assert_eq!(offsets(0.0).len(), 1);
        assert_eq!(offsets(1.0).len(), 7);
    }
}

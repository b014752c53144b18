//! Sublevel-set cubical H0 persistence and the bottleneck distance.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::volume::{downsample2, Volume};

/// Voxel budget above which volumes are average-pooled before persistence.
pub const PERSISTENCE_MAX_VOXELS: usize = 64 * 64 * 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
}

impl PersistencePair {
    pub fn persistence(&self) -> f64 {
        self.death - self.birth
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub dimension: usize,
    pub points: Vec<PersistencePair>,
}

impl PersistenceDiagram {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self {
            dimension: 0,
            points: points
                .into_iter()
                .map(|(birth, death)| PersistencePair { birth, death })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points sorted by (birth, death), for multiset comparison.
    pub fn sorted(&self) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.birth, p.death)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        pts
    }

    pub fn total_persistence(&self) -> f64 {
        self.points.iter().map(PersistencePair::persistence).sum()
    }

    pub fn max_persistence(&self) -> f64 {
        self.points.iter().map(PersistencePair::persistence).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_csv_atomic(path, &self.points)
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        let mut root = i;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        while self.parent[i as usize] != root {
            let next = self.parent[i as usize];
            self.parent[i as usize] = root;
            i = next;
        }
        root
    }
}

/// H0 diagram of the sublevel filtration under 6-connectivity.
///
/// Voxels enter in `(value, linear index)` order; at a merge the component
/// whose birth voxel entered later dies at the current value. The essential
/// class is closed at the global maximum. Zero-length finite pairs are not
/// emitted.
pub fn sublevel_persistence_h0(v: &Volume) -> PersistenceDiagram {
    let data = v.data();
    let n = data.len();
    if n == 0 {
        return PersistenceDiagram::default();
    }
    let [nx, ny, nz] = v.dims();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| {
        data[a as usize]
            .total_cmp(&data[b as usize])
            .then(a.cmp(&b))
    });
    let mut rank = vec![0u32; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i as usize] = r as u32;
    }

    // Roots are always the birth voxel of their component.
    let mut uf = UnionFind::new(n);
    let mut active = vec![false; n];
    let mut points = Vec::new();
    let plane = nx * ny;
    for &i in &order {
        let iu = i as usize;
        let value = data[iu];
        active[iu] = true;
        let x = iu % nx;
        let y = (iu / nx) % ny;
        let z = iu / plane;
        let mut neighbors = [u32::MAX; 6];
        if x > 0 {
            neighbors[0] = i - 1;
        }
        if x + 1 < nx {
            neighbors[1] = i + 1;
        }
        if y > 0 {
            neighbors[2] = i - nx as u32;
        }
        if y + 1 < ny {
            neighbors[3] = i + nx as u32;
        }
        if z > 0 {
            neighbors[4] = i - plane as u32;
        }
        if z + 1 < nz {
            neighbors[5] = i + plane as u32;
        }
        let mut own_root: Option<u32> = None;
        for &nb in neighbors.iter().filter(|&&nb| nb != u32::MAX) {
            if !active[nb as usize] {
                continue;
            }
            let r = uf.find(nb);
            match own_root {
                None => {
                    uf.parent[iu] = r;
                    own_root = Some(r);
                }
                Some(cur) if cur == r => {}
                Some(cur) => {
                    let (elder, younger) = if rank[cur as usize] < rank[r as usize] {
                        (cur, r)
                    } else {
                        (r, cur)
                    };
                    let birth = data[younger as usize];
                    if value > birth {
                        points.push((birth, value));
                    }
                    uf.parent[younger as usize] = elder;
                    own_root = Some(elder);
                }
            }
        }
    }
    let global_min = data[order[0] as usize];
    let global_max = data[order[n - 1] as usize];
    points.push((global_min, global_max));
    PersistenceDiagram::new(points)
}

/// Average-pool until the voxel count fits [`PERSISTENCE_MAX_VOXELS`].
/// Returns the pooled volume and the number of halvings applied.
pub fn prepare_for_persistence(v: &Volume) -> (Volume, usize) {
    let mut cur = v.clone();
    let mut steps = 0;
    while cur.len() > PERSISTENCE_MAX_VOXELS && cur.dims().iter().any(|&d| d > 1) {
        cur = downsample2(&cur);
        steps += 1;
    }
    (cur, steps)
}

#[inline]
fn linf(a: &PersistencePair, b: &PersistencePair) -> f64 {
    (a.birth - b.birth).abs().max((a.death - b.death).abs())
}

#[inline]
fn to_diagonal(p: &PersistencePair) -> f64 {
    (p.death - p.birth) / 2.0
}

/// Bottleneck (W-infinity) distance between two diagrams.
pub fn bottleneck_distance(d1: &PersistenceDiagram, d2: &PersistenceDiagram) -> f64 {
    let a = &d1.points;
    let b = &d2.points;
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let mut candidates: Vec<f64> = Vec::with_capacity(a.len() * b.len() + a.len() + b.len() + 1);
    candidates.push(0.0);
    candidates.extend(a.iter().map(to_diagonal));
    candidates.extend(b.iter().map(to_diagonal));
    for p in a {
        for q in b {
            candidates.push(linf(p, q));
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut matcher = DiagramMatcher::new(a, b);
    // The largest candidate is always feasible: every point can go to the diagonal.
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if matcher.perfect_within(candidates[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    candidates[lo]
}

/// Threshold-feasibility oracle: does a perfect matching with all costs <= eps exist?
///
/// Left vertices are the points of `a` followed by diagonal copies of `b`;
/// right vertices are the points of `b` followed by diagonal copies of `a`.
struct DiagramMatcher<'a> {
    a: &'a [PersistencePair],
    b: &'a [PersistencePair],
    adj: Vec<Vec<u32>>,
    match_l: Vec<u32>,
    match_r: Vec<u32>,
    dist: Vec<u32>,
}

const NIL: u32 = u32::MAX;

impl<'a> DiagramMatcher<'a> {
    fn new(a: &'a [PersistencePair], b: &'a [PersistencePair]) -> Self {
        let size = a.len() + b.len();
        Self {
            a,
            b,
            adj: vec![Vec::new(); size],
            match_l: vec![NIL; size],
            match_r: vec![NIL; size],
            dist: vec![0; size],
        }
    }

    fn build(&mut self, eps: f64) {
        let (n, m) = (self.a.len(), self.b.len());
        for list in &mut self.adj {
            list.clear();
        }
        for (i, p) in self.a.iter().enumerate() {
            for (j, q) in self.b.iter().enumerate() {
                if linf(p, q) <= eps {
                    self.adj[i].push(j as u32);
                }
            }
            if to_diagonal(p) <= eps {
                self.adj[i].push((m + i) as u32);
            }
        }
        for (j, q) in self.b.iter().enumerate() {
            let row = &mut self.adj[n + j];
            if to_diagonal(q) <= eps {
                row.push(j as u32);
            }
            row.extend((0..n).map(|i| (m + i) as u32));
        }
    }

    fn perfect_within(&mut self, eps: f64) -> bool {
        self.build(eps);
        let size = self.adj.len();
        self.match_l.iter_mut().for_each(|x| *x = NIL);
        self.match_r.iter_mut().for_each(|x| *x = NIL);
        let mut matched = 0;
        while self.bfs() {
            for u in 0..size {
                if self.match_l[u] == NIL && self.dfs(u as u32) {
                    matched += 1;
                }
            }
        }
        matched == size
    }

    fn bfs(&mut self) -> bool {
        let mut queue = VecDeque::new();
        let mut found = false;
        for u in 0..self.adj.len() {
            if self.match_l[u] == NIL {
                self.dist[u] = 0;
                queue.push_back(u as u32);
            } else {
                self.dist[u] = NIL;
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &self.adj[u as usize] {
                let w = self.match_r[v as usize];
                if w == NIL {
                    found = true;
                } else if self.dist[w as usize] == NIL {
                    self.dist[w as usize] = self.dist[u as usize] + 1;
                    queue.push_back(w);
                }
            }
        }
        found
    }

    fn dfs(&mut self, u: u32) -> bool {
        let ui = u as usize;
        for k in 0..self.adj[ui].len() {
            let v = self.adj[ui][k];
            let w = self.match_r[v as usize];
            let ok = if w == NIL {
                true
            } else if self.dist[w as usize] == self.dist[ui].wrapping_add(1) {
                self.dfs(w)
            } else {
                false
            };
            if ok {
                self.match_l[ui] = v;
                self.match_r[v as usize] = u;
                return true;
            }
        }
        self.dist[ui] = NIL;
        false
    }
}

/// Summary of a follow-up/baseline diagram comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopoSummary {
    pub bottleneck: f64,
    pub fu_points: usize,
    pub fu_total_persistence: f64,
    pub fu_max_persistence: f64,
    pub downsample_steps: usize,
}

pub fn topo_summary(fu: &Volume, bl: &Volume) -> TopoSummary {
    let (fu_p, steps) = prepare_for_persistence(fu);
    let (bl_p, _) = prepare_for_persistence(bl);
    let dfu = sublevel_persistence_h0(&fu_p);
    let dbl = sublevel_persistence_h0(&bl_p);
    TopoSummary {
        bottleneck: bottleneck_distance(&dfu, &dbl),
        fu_points: dfu.len(),
        fu_total_persistence: dfu.total_persistence(),
        fu_max_persistence: dfu.max_persistence(),
        downsample_steps: steps,
    }
}

/// `exp(-tau * W_inf(D(fu), D(bl)))`.
pub fn q_topo_from_distance(bottleneck: f64, tau: f64) -> f64 {
    (-tau * bottleneck).exp()
}

pub fn q_topo(fu: &Volume, bl: &Volume, tau: f64) -> f64 {
    q_topo_from_distance(topo_summary(fu, bl).bottleneck, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
        Volume::new(dims, [1.0; 3], [0.0; 3], data).unwrap()
    }

    #[test]
    fn constant_volume_has_single_flat_point() {
        let d = sublevel_persistence_h0(&Volume::filled([3, 3, 3], 1.0, 4.0));
        assert_eq!(d.sorted(), vec![(4.0, 4.0)]);
    }

    #[test]
    fn two_minima_profile() {
        let d = sublevel_persistence_h0(&vol([3, 1, 1], vec![0.0, 5.0, 1.0]));
        assert_eq!(d.sorted(), vec![(0.0, 5.0), (1.0, 5.0)]);
    }

    #[test]
    fn tie_break_is_by_index() {
        // Two equal minima merge at 3; exactly one finite pair (1, 3) plus the essential class.
        let d = sublevel_persistence_h0(&vol([3, 1, 1], vec![1.0, 3.0, 1.0]));
        assert_eq!(d.sorted(), vec![(1.0, 3.0), (1.0, 3.0)]);
    }

    #[test]
    fn bottleneck_simple_cases() {
        let d = PersistenceDiagram::new(vec![(0.0, 1.0)]);
        assert_eq!(bottleneck_distance(&d, &d), 0.0);
        assert_eq!(bottleneck_distance(&d, &PersistenceDiagram::default()), 0.5);
        let e = PersistenceDiagram::new(vec![(0.0, 1.2)]);
        assert!((bottleneck_distance(&d, &e) - 0.2).abs() < 1e-12);
        // Far apart: cheaper to send both to the diagonal.
        let f = PersistenceDiagram::new(vec![(10.0, 11.0)]);
        assert_eq!(bottleneck_distance(&d, &f), 0.5);
    }

    #[test]
    fn q_topo_fixed_points() {
        let v = Volume::from_fn([6, 6, 6], 1.0, |x, y, z| ((x * 7 + y * 3 + z * 5) % 11) as f64);
        assert_eq!(q_topo(&v, &v, 0.3), 1.0);
        assert!((q_topo_from_distance(1.0 / 0.25, 0.25) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn large_volumes_are_pooled() {
        let v = Volume::filled([65, 64, 64], 1.0, 0.0);
        let (p, steps) = prepare_for_persistence(&v);
        assert_eq!(steps, 1);
        assert_eq!(p.dims(), [32, 32, 32]);
        let small = Volume::filled([64, 64, 64], 1.0, 0.0);
        assert_eq!(prepare_for_persistence(&small).1, 0);
    }
}

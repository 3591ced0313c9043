//! Connectivity of the open subgraph: union-find component labels, crossing
//! clusters, the good-cube predicate, the Calderón–Zygmund partition of good
//! triadic cubes, coarsened functions, and small-cluster accounting.

use std::collections::HashMap;

use crate::lattice::{CubeDomain, ScalarField, TriadicCube, MAX_DIM};
use crate::percolation::ConductanceField;
use crate::{Error, Result};

/// Label for vertices with no open incident edge.
pub const NO_CLUSTER: usize = usize::MAX;

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            // path halving
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

/// Component labels over an explicit edge list; every vertex gets the smallest
/// vertex index of its component (isolated vertices label themselves).
pub fn components_from_edges(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
) -> Vec<usize> {
    let mut ds = DisjointSet::new(n);
    for (a, b) in edges {
        ds.union(a as u32, b as u32);
    }
    let mut canon = vec![usize::MAX; n];
    for v in 0..n {
        let r = ds.find(v as u32) as usize;
        if canon[r] == usize::MAX {
            canon[r] = v;
        }
    }
    (0..n).map(|v| canon[ds.find(v as u32) as usize]).collect()
}

/// Connected-component labels of the open subgraph, with the maximal cluster
/// distinguished.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClusterLabels {
    domain: CubeDomain,
    labels: Vec<usize>,
    maximal: Option<usize>,
    maximal_size: usize,
    component_count: usize,
}

impl ClusterLabels {
    #[inline]
    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    #[inline]
    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }

    #[inline]
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Label of `C_*(□)`: the crossing cluster when one exists, otherwise the
    /// largest component by vertex count.
    #[inline]
    pub fn maximal_label(&self) -> Option<usize> {
        self.maximal
    }

    #[inline]
    pub fn on_maximal(&self, idx: usize) -> bool {
        self.maximal.is_some_and(|m| self.labels[idx] == m)
    }

    #[inline]
    pub fn maximal_size(&self) -> usize {
        self.maximal_size
    }

    #[inline]
    pub fn component_count(&self) -> usize {
        self.component_count
    }

    pub fn maximal_mask(&self) -> Vec<bool> {
        (0..self.labels.len()).map(|i| self.on_maximal(i)).collect()
    }

    /// Interior-of-domain vertices of the maximal cluster.
    pub fn maximal_interior_mask(&self) -> Vec<bool> {
        (0..self.labels.len())
            .map(|i| self.on_maximal(i) && self.domain.is_interior(i))
            .collect()
    }

    pub fn from_labels(domain: CubeDomain, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != domain.vertex_count() {
            return Err(Error::InvalidArgument("label count mismatch".into()));
        }
        Ok(finish_labels(domain, labels))
    }
}

fn finish_labels(domain: CubeDomain, labels: Vec<usize>) -> ClusterLabels {
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for &l in &labels {
        if l != NO_CLUSTER {
            *sizes.entry(l).or_default() += 1;
        }
    }
    // prefer a component that touches all 2d faces of the cube
    let mut face_hits: HashMap<usize, u32> = HashMap::new();
    let all_faces = (1u32 << (2 * domain.dim())) - 1;
    for (idx, &l) in labels.iter().enumerate() {
        if l == NO_CLUSTER {
            continue;
        }
        let local = domain.local_of(idx);
        let mut bits = 0u32;
        for j in 0..domain.dim() {
            if local[j] == 0 {
                bits |= 1 << (2 * j);
            }
            if local[j] == domain.side() - 1 {
                bits |= 1 << (2 * j + 1);
            }
        }
        if bits != 0 {
            *face_hits.entry(l).or_default() |= bits;
        }
    }
    let largest = |candidates: &mut dyn Iterator<Item = usize>| -> Option<usize> {
        candidates.min_by_key(|l| (usize::MAX - sizes[l], *l))
    };
    let crossing =
        largest(&mut face_hits.iter().filter(|(_, b)| **b == all_faces).map(|(l, _)| *l));
    let maximal = crossing.or_else(|| largest(&mut sizes.keys().copied()));
    let maximal_size = maximal.map_or(0, |m| sizes[&m]);
    ClusterLabels { domain, labels, maximal, maximal_size, component_count: sizes.len() }
}

/// Disjoint-set pass over the open edges, path-compressed and union-by-size;
/// labels are canonicalized to the smallest vertex index per component.
pub fn union_find_clusters(a: &ConductanceField) -> ClusterLabels {
    let domain = *a.domain();
    let n = domain.vertex_count();
    let mut ds = DisjointSet::new(n);
    let mut has_open = vec![false; n];
    for axis in 0..domain.dim() {
        let stride = domain.stride(axis);
        for idx in 0..n {
            if a.at(idx, axis) != 0.0 {
                ds.union(idx as u32, (idx + stride) as u32);
                has_open[idx] = true;
                has_open[idx + stride] = true;
            }
        }
    }
    let mut canon = vec![usize::MAX; n];
    for v in 0..n {
        if has_open[v] {
            let r = ds.find(v as u32) as usize;
            if canon[r] == usize::MAX {
                canon[r] = v;
            }
        }
    }
    let labels = (0..n)
        .map(|v| if has_open[v] { canon[ds.find(v as u32) as usize] } else { NO_CLUSTER })
        .collect();
    finish_labels(domain, labels)
}

/// An axis-aligned lattice cube in domain-local coordinates: vertex set
/// `base + [0, size)^d`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct LatticeCube {
    pub base: [i64; MAX_DIM],
    pub size: usize,
}

impl LatticeCube {
    pub fn of_triadic(t: &TriadicCube) -> Self {
        Self { base: t.base, size: t.size() as usize }
    }

    fn in_domain(&self, domain: &CubeDomain) -> bool {
        (0..domain.dim())
            .all(|j| self.base[j] >= 0 && self.base[j] + self.size as i64 <= domain.side() as i64)
    }

    #[inline]
    fn cell_count(&self, dim: usize) -> usize {
        self.size.pow(dim as u32)
    }

    #[inline]
    fn cell_strides(&self, dim: usize) -> [usize; MAX_DIM] {
        if dim == 3 {
            [self.size * self.size, self.size, 1]
        } else {
            [self.size, 1, 0]
        }
    }

    #[inline]
    fn cell_local(&self, cell: usize, dim: usize) -> [usize; MAX_DIM] {
        let s = self.size;
        if dim == 3 {
            [cell / (s * s), (cell / s) % s, cell % s]
        } else {
            [cell / s, cell % s, 0]
        }
    }

    #[inline]
    fn vertex_of(&self, cell: usize, domain: &CubeDomain) -> usize {
        let l = self.cell_local(cell, domain.dim());
        domain.index_of([
            (self.base[0] + l[0] as i64) as usize,
            (self.base[1] + l[1] as i64) as usize,
            (self.base[2] + l[2] as i64) as usize,
        ])
    }
}

/// Open components of the subgraph restricted to a box: component id per cell
/// (`u32::MAX` for cells with no open edge inside the box), plus per-component
/// face-touch bitmasks and bounding boxes.
struct BoxComponents {
    comp: Vec<u32>,
    faces: Vec<u32>,
    bbox: Vec<[(i64, i64); MAX_DIM]>,
}

fn box_components(a: &ConductanceField, cube: LatticeCube) -> BoxComponents {
    let domain = a.domain();
    let dim = domain.dim();
    let s = cube.size;
    let strides = cube.cell_strides(dim);
    let cells = cube.cell_count(dim);

    let mut comp = vec![u32::MAX; cells];
    let mut faces = Vec::new();
    let mut bbox: Vec<[(i64, i64); MAX_DIM]> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..cells {
        if comp[start] != u32::MAX {
            continue;
        }
        let local = cube.cell_local(start, dim);
        let v = cube.vertex_of(start, domain);
        let seeded = (0..dim).any(|axis| {
            (local[axis] + 1 < s && a.at(v, axis) != 0.0)
                || (local[axis] > 0 && a.oriented(v, axis, false) != 0.0)
        });
        if !seeded {
            continue;
        }
        let id = faces.len() as u32;
        faces.push(0u32);
        bbox.push([(i64::MAX, i64::MIN); MAX_DIM]);
        comp[start] = id;
        stack.push(start);
        while let Some(cell) = stack.pop() {
            let local = cube.cell_local(cell, dim);
            let v = cube.vertex_of(cell, domain);
            for j in 0..dim {
                if local[j] == 0 {
                    faces[id as usize] |= 1 << (2 * j);
                }
                if local[j] == s - 1 {
                    faces[id as usize] |= 1 << (2 * j + 1);
                }
                let b = &mut bbox[id as usize][j];
                b.0 = b.0.min(local[j] as i64);
                b.1 = b.1.max(local[j] as i64);
            }
            for axis in 0..dim {
                if local[axis] + 1 < s && a.at(v, axis) != 0.0 {
                    let ncell = cell + strides[axis];
                    if comp[ncell] == u32::MAX {
                        comp[ncell] = id;
                        stack.push(ncell);
                    }
                }
                if local[axis] > 0 && a.oriented(v, axis, false) != 0.0 {
                    let ncell = cell - strides[axis];
                    if comp[ncell] == u32::MAX {
                        comp[ncell] = id;
                        stack.push(ncell);
                    }
                }
            }
        }
    }
    BoxComponents { comp, faces, bbox }
}

#[inline]
fn all_faces_mask(dim: usize) -> u32 {
    (1u32 << (2 * dim)) - 1
}

fn crossable_from(bc: &BoxComponents, dim: usize) -> bool {
    (0..dim).all(|j| {
        let pair = (1u32 << (2 * j)) | (1u32 << (2 * j + 1));
        bc.faces.iter().any(|f| f & pair == pair)
    })
}

/// A cube is crossable when, for each axis, some open component inside it
/// touches both opposite faces.
pub fn is_crossable(a: &ConductanceField, cube: LatticeCube) -> bool {
    if cube.size <= 1 {
        return true;
    }
    crossable_from(&box_components(a, cube), a.domain().dim())
}

/// Whether a single open component touches all `2d` faces of the cube.
pub fn has_crossing_cluster(a: &ConductanceField, cube: LatticeCube) -> bool {
    if cube.size <= 1 {
        return true;
    }
    let bc = box_components(a, cube);
    let all = all_faces_mask(a.domain().dim());
    bc.faces.iter().any(|f| *f == all)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GoodStatus {
    Good,
    Bad,
    /// Size exceeds the exhaustive-check cap; never silently treated as good.
    Unchecked,
}

/// Exhaustive goodness checks are capped at this cube size per axis.
pub const GOODNESS_CAP: usize = 81;

/// Memoizing checker for well-connectedness and goodness of triadic cubes
/// within one sampled environment.
pub struct GoodnessChecker<'a> {
    a: &'a ConductanceField,
    well: HashMap<TriadicCube, bool>,
    good: HashMap<TriadicCube, GoodStatus>,
}

impl<'a> GoodnessChecker<'a> {
    pub fn new(a: &'a ConductanceField) -> Self {
        Self { a, well: HashMap::new(), good: HashMap::new() }
    }

    /// A cube is well-connected when it has a crossing cluster `C` such that
    /// every sub-cube of size in `[⌈size/10⌉, ⌊size/2⌋]` meeting `(3/4)□̄` is
    /// crossable, and every open component of such a sub-cube with diameter at
    /// least size/10 meets `C`.  The per-path condition is checked per
    /// component, which is equivalent since every path lies in a component of
    /// at least its own diameter.
    pub fn is_well_connected(&mut self, cube: TriadicCube) -> bool {
        if let Some(&v) = self.well.get(&cube) {
            return v;
        }
        let v = self.well_connected_uncached(cube);
        self.well.insert(cube, v);
        v
    }

    fn well_connected_uncached(&self, cube: TriadicCube) -> bool {
        let domain = self.a.domain();
        let dim = domain.dim();
        let size = cube.size();
        if size <= 1 {
            return true;
        }
        let lat = LatticeCube::of_triadic(&cube);
        if !lat.in_domain(domain) {
            return false;
        }
        let bc = box_components(self.a, lat);
        let all = all_faces_mask(dim);
        let crossing_ids: Vec<u32> =
            (0..bc.faces.len() as u32).filter(|id| bc.faces[*id as usize] == all).collect();
        if crossing_ids.is_empty() {
            return false;
        }

        let lo = (size + 9) / 10; // ⌈size/10⌉
        let hi = size / 2;
        if lo > hi {
            return true;
        }

        // vertex masks of the candidate crossing clusters
        let candidates: Vec<Vec<bool>> = crossing_ids
            .iter()
            .map(|&cid| {
                let mut mask = vec![false; domain.vertex_count()];
                for (cell, c) in bc.comp.iter().enumerate() {
                    if *c == cid {
                        mask[lat.vertex_of(cell, domain)] = true;
                    }
                }
                mask
            })
            .collect();
        let mut alive = vec![true; candidates.len()];

        // hull of (3/4)□̄ per axis, scaled by 8 to stay in integers
        let center = cube.center_local();
        let meets_hull = |sub: &LatticeCube| -> bool {
            (0..dim).all(|j| {
                8 * sub.base[j] <= 8 * center[j] + 3 * size
                    && 8 * (sub.base[j] + sub.size as i64 - 1) >= 8 * center[j] - 3 * size
            })
        };

        for s in lo..=hi {
            if s <= 1 {
                // single vertices are trivially crossable and carry no paths
                continue;
            }
            let s = s as usize;
            let range = |j: usize| -> (i64, i64) {
                let lo_b = (cube.base[j] - s as i64 + 1).max(0);
                let hi_b = (cube.base[j] + size - 1).min(domain.side() as i64 - s as i64);
                (lo_b, hi_b)
            };
            let (lo0, hi0) = range(0);
            let (lo1, hi1) = range(1);
            let (lo2, hi2) = if dim == 3 { range(2) } else { (0, 0) };
            for b0 in lo0..=hi0 {
                for b1 in lo1..=hi1 {
                    for b2 in lo2..=hi2 {
                        let sub = LatticeCube { base: [b0, b1, b2], size: s };
                        if !meets_hull(&sub) {
                            continue;
                        }
                        let sbc = box_components(self.a, sub);
                        if !crossable_from(&sbc, dim) {
                            return false;
                        }
                        prune_candidates(domain, &sub, &sbc, size, &candidates, &mut alive);
                        if alive.iter().all(|v| !*v) {
                            return false;
                        }
                    }
                }
            }
        }
        alive.iter().any(|v| *v)
    }

    /// A triadic cube is good when its size is at least 3, it carries a
    /// crossing cluster, and all `3^d` successors are well-connected.
    pub fn is_good(&mut self, cube: TriadicCube) -> GoodStatus {
        if let Some(&v) = self.good.get(&cube) {
            return v;
        }
        let dim = self.a.domain().dim();
        let v = if cube.size() < 3 {
            GoodStatus::Bad
        } else if cube.size() > GOODNESS_CAP as i64 {
            GoodStatus::Unchecked
        } else if !LatticeCube::of_triadic(&cube).in_domain(self.a.domain()) {
            GoodStatus::Bad
        } else if !has_crossing_cluster(self.a, LatticeCube::of_triadic(&cube)) {
            GoodStatus::Bad
        } else if cube.successors(dim).into_iter().all(|s| self.is_well_connected(s)) {
            GoodStatus::Good
        } else {
            GoodStatus::Bad
        };
        self.good.insert(cube, v);
        v
    }
}

/// Kill candidate crossing clusters missed by some component of diameter at
/// least `parent_size/10` inside the sub-cube.
fn prune_candidates(
    domain: &CubeDomain,
    sub: &LatticeCube,
    sbc: &BoxComponents,
    parent_size: i64,
    candidates: &[Vec<bool>],
    alive: &mut [bool],
) {
    let dim = domain.dim();
    for id in 0..sbc.faces.len() {
        let diam = (0..dim).map(|j| sbc.bbox[id][j].1 - sbc.bbox[id][j].0).max().unwrap();
        if 10 * diam < parent_size {
            continue;
        }
        let mut hits = vec![false; candidates.len()];
        for (cell, c) in sbc.comp.iter().enumerate() {
            if *c == id as u32 {
                let v = sub.vertex_of(cell, domain);
                for (ci, mask) in candidates.iter().enumerate() {
                    if mask[v] {
                        hits[ci] = true;
                    }
                }
            }
        }
        for ci in 0..candidates.len() {
            if alive[ci] && !hits[ci] {
                alive[ci] = false;
            }
        }
    }
}

/// The partition of the domain into good triadic cubes: per-vertex level
/// `n(x)` with `□_P(x)` the triadic cube of size `3^{n(x)}` containing `x`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Partition {
    domain: CubeDomain,
    level: Vec<u8>,
    degenerate: bool,
    /// Levels whose goodness exceeded the exhaustive cap and was assumed.
    assumed_levels: Vec<u32>,
}

impl Partition {
    #[inline]
    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    #[inline]
    pub fn level_of(&self, idx: usize) -> u32 {
        self.level[idx] as u32
    }

    #[inline]
    pub fn cube_of(&self, idx: usize) -> TriadicCube {
        self.domain.triadic_of(idx, self.level_of(idx))
    }

    /// True when the whole cube failed the goodness check and the partition
    /// fell back to a single cube.
    #[inline]
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    #[inline]
    pub fn assumed_levels(&self) -> &[u32] {
        &self.assumed_levels
    }

    #[inline]
    pub fn max_level(&self) -> u32 {
        self.level.iter().copied().max().unwrap_or(0) as u32
    }

    /// Distinct partition cubes in order of first appearance.
    pub fn cubes(&self) -> Vec<TriadicCube> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for idx in 0..self.domain.vertex_count() {
            let c = self.cube_of(idx);
            if seen.insert(c, ()).is_none() {
                out.push(c);
            }
        }
        out
    }
}

/// Builds the partition: per vertex the smallest level whose triadic cube and
/// all in-domain ancestors are good, made consistent (a cube is either whole
/// or fully refined) and then smoothed so adjacent partition cubes differ by
/// at most one level.  Levels only ever rise.
pub fn build_partition(a: &ConductanceField) -> Result<Partition> {
    let domain = *a.domain();
    let m = domain.level();
    let mut checker = GoodnessChecker::new(a);

    let top = TriadicCube { level: m, base: [0; MAX_DIM] };
    let mut assumed_levels = Vec::new();
    match checker.is_good(top) {
        GoodStatus::Unchecked => {
            assumed_levels.push(m);
            log::warn!("goodness of the size-{} cube exceeds the cap and is assumed", top.size());
        }
        GoodStatus::Bad => {
            if has_crossing_cluster(a, LatticeCube::of_triadic(&top)) {
                log::warn!("domain cube is not good; partition degenerates to the whole cube");
                return Ok(Partition {
                    domain,
                    level: vec![m as u8; domain.vertex_count()],
                    degenerate: true,
                    assumed_levels,
                });
            }
            return Err(Error::SubcriticalSample("domain cube has no crossing cluster".into()));
        }
        GoodStatus::Good => {}
    }

    let n = domain.vertex_count();
    let mut level = vec![m as u8; n];
    // chain rule: smallest level whose cube and all in-domain ancestors are
    // good; Unchecked counts as good by assumption
    for (idx, lev_out) in level.iter_mut().enumerate() {
        let mut best = m;
        for lev in (1..m).rev() {
            let c = domain.triadic_of(idx, lev);
            let ok = match checker.is_good(c) {
                GoodStatus::Good => true,
                GoodStatus::Bad => false,
                GoodStatus::Unchecked => {
                    if !assumed_levels.contains(&lev) {
                        assumed_levels.push(lev);
                    }
                    true
                }
            };
            if ok {
                best = lev;
            } else {
                break;
            }
        }
        *lev_out = best as u8;
    }

    enforce_consistency(&domain, &mut level);

    // neighbor comparability over L∞-adjacent vertices; raising only
    loop {
        let mut changed = false;
        let side = domain.side() as i64;
        let dim = domain.dim();
        let deltas: &[i64] = &[-1, 0, 1];
        for idx in 0..n {
            let li = level[idx] as i32;
            let local = domain.local_of(idx);
            let mut needs_raise = false;
            'scan: for &d0 in deltas {
                for &d1 in deltas {
                    for &d2 in if dim == 3 { deltas } else { &[0][..] } {
                        if d0 == 0 && d1 == 0 && d2 == 0 {
                            continue;
                        }
                        let c = [local[0] as i64 + d0, local[1] as i64 + d1, local[2] as i64 + d2];
                        if c.iter().take(dim).any(|v| *v < 0 || *v >= side) {
                            continue;
                        }
                        let nidx = domain.index_of([c[0] as usize, c[1] as usize, c[2] as usize]);
                        if level[nidx] as i32 > li + 1 {
                            needs_raise = true;
                            break 'scan;
                        }
                    }
                }
            }
            if needs_raise {
                level[idx] += 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        enforce_consistency(&domain, &mut level);
    }

    Ok(Partition { domain, level, degenerate: false, assumed_levels })
}

/// One ascending sweep: whenever some vertex demands level `ℓ`, its whole
/// level-`ℓ` cube takes level `ℓ`.  Produces a consistent tiling.
fn enforce_consistency(domain: &CubeDomain, level: &mut [u8]) {
    for lev in 1..=domain.level() {
        for cube in domain.triadic_cubes(lev) {
            let verts = cube.vertices(domain);
            let mx = verts.iter().map(|&v| level[v]).max().unwrap();
            if mx as u32 == lev {
                for &v in &verts {
                    level[v] = lev as u8;
                }
            }
        }
    }
}

/// Audit of the partition invariants, used by tests and the CLI stats path.
pub fn check_partition(a: &ConductanceField, p: &Partition) -> Result<()> {
    let domain = *a.domain();
    let mut checker = GoodnessChecker::new(a);
    // consistency: the cube of each vertex has a constant level
    for idx in 0..domain.vertex_count() {
        let c = p.cube_of(idx);
        for v in c.vertices(&domain) {
            if p.level_of(v) != p.level_of(idx) {
                return Err(Error::InvalidArgument("partition does not tile".into()));
            }
        }
    }
    if p.is_degenerate() {
        return Ok(());
    }
    for idx in 0..domain.vertex_count() {
        // all in-domain ancestors good (or beyond the cap)
        let mut c = p.cube_of(idx);
        loop {
            if checker.is_good(c) == GoodStatus::Bad {
                return Err(Error::InvalidArgument(format!(
                    "partition cube ancestor at level {} is bad",
                    c.level
                )));
            }
            if c.level >= domain.level() {
                break;
            }
            c = c.predecessor();
        }
        // comparability with face neighbors
        let local = domain.local_of(idx);
        let side = domain.side() as i64;
        for axis in 0..domain.dim() {
            for dir in [-1i64, 1] {
                let mut nb = [local[0] as i64, local[1] as i64, local[2] as i64];
                nb[axis] += dir;
                if nb[axis] < 0 || nb[axis] >= side {
                    continue;
                }
                let nidx = domain.index_of([nb[0] as usize, nb[1] as usize, nb[2] as usize]);
                if (p.level_of(idx) as i32 - p.level_of(nidx) as i32).abs() > 1 {
                    return Err(Error::InvalidArgument(
                        "adjacent partition cubes differ by more than a factor 3".into(),
                    ));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CoarsenVariant {
    /// `[u]_P`: constant per cube, valued at the cluster vertex nearest the center.
    Interior,
    /// `[u]_{P,□}`: additionally zero on cubes touching the domain boundary.
    BoundaryZero,
}

/// Piecewise-constant projection of a cluster function onto the partition:
/// per cube the value of `u` at the maximal-cluster vertex nearest the cube
/// center (L∞ metric, lexicographic tie-break on coordinates).
pub fn coarsen(
    u: &ScalarField,
    labels: &ClusterLabels,
    partition: &Partition,
    variant: CoarsenVariant,
) -> Result<ScalarField> {
    let domain = *u.domain();
    if labels.domain() != &domain || partition.domain() != &domain {
        return Err(Error::DomainMismatch);
    }
    let mut rep: HashMap<TriadicCube, (i64, [i64; MAX_DIM], usize)> = HashMap::new();
    for idx in 0..domain.vertex_count() {
        if !labels.on_maximal(idx) {
            continue;
        }
        let cube = partition.cube_of(idx);
        let center = cube.center_local();
        let local = domain.local_of(idx);
        let dist =
            (0..domain.dim()).map(|j| (local[j] as i64 - center[j]).abs()).max().unwrap();
        let key = (dist, [local[0] as i64, local[1] as i64, local[2] as i64]);
        match rep.get(&cube) {
            Some(&(d, l, _)) if (d, l) <= key => {}
            _ => {
                rep.insert(cube, (key.0, key.1, idx));
            }
        }
    }

    let mut out = ScalarField::zeros(domain);
    for idx in 0..domain.vertex_count() {
        let cube = partition.cube_of(idx);
        let Some(&(_, _, z)) = rep.get(&cube) else {
            return Err(Error::EmptyCluster(format!(
                "partition cube at level {} has no maximal-cluster vertex",
                cube.level
            )));
        };
        if variant == CoarsenVariant::BoundaryZero && cube_touches_boundary(&domain, &cube) {
            out.set(idx, 0.0);
        } else {
            out.set(idx, u.get(z));
        }
    }
    Ok(out)
}

fn cube_touches_boundary(domain: &CubeDomain, cube: &TriadicCube) -> bool {
    let side = domain.side() as i64;
    (0..domain.dim()).any(|j| cube.base[j] == 0 || cube.base[j] + cube.size() == side)
}

/// Vertex set of the small clusters `C_s(□)`: open components that touch the
/// domain boundary but are not the maximal cluster.
#[derive(Clone, Debug)]
pub struct SmallClusters {
    pub vertices: Vec<usize>,
    /// Whether every reported vertex lies in the boundary layer of partition cubes.
    pub within_boundary_layer: bool,
}

pub fn small_clusters(labels: &ClusterLabels, partition: &Partition) -> Result<SmallClusters> {
    let domain = *labels.domain();
    if partition.domain() != &domain {
        return Err(Error::DomainMismatch);
    }
    let mut touches: HashMap<usize, bool> = HashMap::new();
    for idx in 0..domain.vertex_count() {
        let l = labels.label(idx);
        if l == NO_CLUSTER || labels.on_maximal(idx) {
            continue;
        }
        let e = touches.entry(l).or_default();
        if !domain.is_interior(idx) {
            *e = true;
        }
    }
    // boundary layer: union of partition cubes containing a boundary vertex
    let mut layer_cubes: HashMap<TriadicCube, ()> = HashMap::new();
    for idx in 0..domain.vertex_count() {
        if !domain.is_interior(idx) {
            layer_cubes.insert(partition.cube_of(idx), ());
        }
    }
    let mut vertices = Vec::new();
    let mut within = true;
    for idx in 0..domain.vertex_count() {
        let l = labels.label(idx);
        if l == NO_CLUSTER || labels.on_maximal(idx) {
            continue;
        }
        if touches.get(&l).copied().unwrap_or(false) {
            vertices.push(idx);
            if !layer_cubes.contains_key(&partition.cube_of(idx)) {
                within = false;
            }
        }
    }
    Ok(SmallClusters { vertices, within_boundary_layer: within })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percolation::{sample, PercolationLaw};

    fn bfs_labels(a: &ConductanceField) -> Vec<usize> {
        let domain = a.domain();
        let n = domain.vertex_count();
        let mut label = vec![NO_CLUSTER; n];
        let mut has_open = vec![false; n];
        for axis in 0..domain.dim() {
            for idx in 0..n {
                if a.at(idx, axis) != 0.0 {
                    has_open[idx] = true;
                    has_open[idx + domain.stride(axis)] = true;
                }
            }
        }
        for start in 0..n {
            if !has_open[start] || label[start] != NO_CLUSTER {
                continue;
            }
            let mut queue = vec![start];
            label[start] = start;
            while let Some(v) = queue.pop() {
                for axis in 0..domain.dim() {
                    for fwd in [true, false] {
                        if a.oriented(v, axis, fwd) != 0.0 {
                            let w = domain.neighbor(v, axis, fwd).unwrap();
                            if label[w] == NO_CLUSTER {
                                label[w] = start;
                                queue.push(w);
                            }
                        }
                    }
                }
            }
        }
        label
    }

    #[test]
    fn full_lattice_single_component() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let labels = union_find_clusters(&a);
        assert_eq!(labels.component_count(), 1);
        assert_eq!(labels.maximal_size(), dom.vertex_count());
        assert!(labels.labels().iter().all(|l| *l == 0));
    }

    #[test]
    fn empty_lattice_all_sentinel() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(0.0).unwrap(), 0);
        let labels = union_find_clusters(&a);
        assert_eq!(labels.component_count(), 0);
        assert!(labels.maximal_label().is_none());
        assert!(labels.labels().iter().all(|l| *l == NO_CLUSTER));
    }

    #[test]
    fn union_find_matches_bfs_oracle() {
        let dom = CubeDomain::new(2, 2).unwrap();
        for seed in 0..200 {
            let a = sample(dom, PercolationLaw::bernoulli(0.5).unwrap(), seed);
            let uf = union_find_clusters(&a);
            assert_eq!(uf.labels(), &bfs_labels(&a)[..], "seed {seed}");
        }
    }

    #[test]
    fn crossable_line_only_one_axis() {
        // single horizontal open line through a 9×9 cube: crossable along
        // axis 0 only, hence not crossable overall
        let dom = CubeDomain::new(2, 2).unwrap();
        let law = PercolationLaw::bernoulli(0.5).unwrap();
        let mut dirs = vec![vec![0.0; dom.vertex_count()]; 2];
        for c0 in 0..8 {
            dirs[0][dom.index_of([c0, 4, 0])] = 1.0;
        }
        let a = ConductanceField::from_raw(dom, law, 0, dirs).unwrap();
        let cube = LatticeCube { base: [0, 0, 0], size: 9 };
        assert!(!is_crossable(&a, cube));
        assert!(!has_crossing_cluster(&a, cube));

        let full = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        assert!(is_crossable(&full, cube));
        assert!(has_crossing_cluster(&full, cube));

        let empty = sample(dom, PercolationLaw::bernoulli(0.0).unwrap(), 0);
        assert!(!is_crossable(&empty, cube));
    }

    #[test]
    fn goodness_trivial_cases() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let full = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let mut checker = GoodnessChecker::new(&full);
        let top = TriadicCube { level: 2, base: [0, 0, 0] };
        assert_eq!(checker.is_good(top), GoodStatus::Good);

        let empty = sample(dom, PercolationLaw::bernoulli(0.0).unwrap(), 0);
        let mut checker = GoodnessChecker::new(&empty);
        assert_eq!(checker.is_good(top), GoodStatus::Bad);
    }

    #[test]
    fn partition_full_lattice_all_level_one() {
        let dom = CubeDomain::new(2, 3).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let p = build_partition(&a).unwrap();
        assert!(p.level.iter().all(|l| *l == 1));
        check_partition(&a, &p).unwrap();
        // the distinct cubes tile the domain
        let total: usize = p.cubes().iter().map(|c| c.vertices(&dom).len()).sum();
        assert_eq!(total, dom.vertex_count());
    }

    #[test]
    fn partition_survives_single_defect() {
        let dom = CubeDomain::new(2, 3).unwrap();
        let full = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let mut dirs = vec![full.dir(0).to_vec(), full.dir(1).to_vec()];
        dirs[0][dom.index_of([13, 13, 0])] = 0.0;
        let a = ConductanceField::from_raw(dom, *full.law(), 0, dirs).unwrap();
        let p = build_partition(&a).unwrap();
        check_partition(&a, &p).unwrap();
        assert!(!p.is_degenerate());
        assert!(p.level.iter().all(|l| *l == 1));
    }

    #[test]
    fn partition_invariants_on_random_samples() {
        // at p = 0.7 desk-scale cubes are rarely good, so most partitions
        // degenerate; the invariants must hold either way
        let dom = CubeDomain::new(2, 3).unwrap();
        let mut outcomes = 0;
        for seed in 0..50 {
            let a = sample(dom, PercolationLaw::bernoulli(0.7).unwrap(), seed);
            match build_partition(&a) {
                Ok(p) => {
                    check_partition(&a, &p).unwrap();
                    outcomes += 1;
                }
                Err(Error::SubcriticalSample(_)) => {}
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
        assert!(outcomes > 40, "only {outcomes}/50 samples produced a partition");
    }

    #[test]
    fn partition_proper_in_dilute_regime() {
        // near p = 1 the goodness machinery has real bite: partitions come out
        // non-degenerate and fine almost everywhere
        let dom = CubeDomain::new(2, 3).unwrap();
        let mut proper = 0;
        for seed in 0..20 {
            let a = sample(dom, PercolationLaw::bernoulli(0.99).unwrap(), seed);
            let p = build_partition(&a).unwrap();
            check_partition(&a, &p).unwrap();
            if !p.is_degenerate() {
                proper += 1;
                assert!(p.level_of(dom.index_of([13, 13, 0])) <= 2);
            }
        }
        assert!(proper >= 10, "only {proper}/20 proper partitions at p = 0.99");
    }

    #[test]
    fn good_fraction_monotone_in_open_probability() {
        // goodness of a fixed size rises with p and saturates at the full
        // lattice; the asymptotic size trend is out of reach at these sizes,
        // where the all-successors requirement dominates
        let frac = |p: f64, m: u32, seeds: u64| -> f64 {
            let dom = CubeDomain::new(2, m).unwrap();
            let law = PercolationLaw::bernoulli(p).unwrap();
            let mut good = 0;
            for seed in 0..seeds {
                let a = sample(dom, law, seed);
                let mut checker = GoodnessChecker::new(&a);
                if checker.is_good(TriadicCube { level: m, base: [0, 0, 0] }) == GoodStatus::Good {
                    good += 1;
                }
            }
            good as f64 / seeds as f64
        };
        let at = [frac(0.7, 2, 200), frac(0.8, 2, 200), frac(0.9, 2, 200)];
        assert!(at[0] <= at[1] && at[1] <= at[2], "{at:?}");
        assert_eq!(frac(1.0, 2, 5), 1.0);
        assert_eq!(frac(1.0, 3, 5), 1.0);
    }

    #[test]
    fn fused_neighbors_share_a_component() {
        // adjacent good 9-cubes: their crossing clusters meet inside the
        // union (size 3 sits below the scale where the connectivity
        // conditions have any content, so the check runs at size 9)
        let dom = CubeDomain::new(2, 3).unwrap();
        let mut pairs = 0;
        for seed in 0..25 {
            let a = sample(dom, PercolationLaw::bernoulli(0.85).unwrap(), seed);
            let mut checker = GoodnessChecker::new(&a);
            for b0 in [0i64, 9, 18] {
                for b1 in [0i64, 9] {
                    let c1 = TriadicCube { level: 2, base: [b0, b1, 0] };
                    let c2 = TriadicCube { level: 2, base: [b0, b1 + 9, 0] };
                    if checker.is_good(c1) != GoodStatus::Good
                        || checker.is_good(c2) != GoodStatus::Good
                    {
                        continue;
                    }
                    pairs += 1;
                    let union_labels = union_bfs(&a, &[c1, c2]);
                    let m1 = crossing_rep(&a, c1);
                    let m2 = crossing_rep(&a, c2);
                    assert_eq!(union_labels[m1], union_labels[m2], "seed {seed}");
                }
            }
        }
        assert!(pairs > 5, "too few good pairs ({pairs}) to exercise the check");
    }

    fn crossing_rep(a: &ConductanceField, cube: TriadicCube) -> usize {
        let domain = a.domain();
        let lat = LatticeCube::of_triadic(&cube);
        let bc = box_components(a, lat);
        let all = all_faces_mask(domain.dim());
        let id = (0..bc.faces.len() as u32).find(|i| bc.faces[*i as usize] == all).unwrap();
        bc.comp
            .iter()
            .enumerate()
            .find(|(_, c)| **c == id)
            .map(|(cell, _)| lat.vertex_of(cell, domain))
            .unwrap()
    }

    fn union_bfs(a: &ConductanceField, cubes: &[TriadicCube]) -> Vec<usize> {
        let domain = a.domain();
        let mut allowed = vec![false; domain.vertex_count()];
        for c in cubes {
            for v in c.vertices(domain) {
                allowed[v] = true;
            }
        }
        let mut label = vec![NO_CLUSTER; domain.vertex_count()];
        for start in 0..domain.vertex_count() {
            if !allowed[start] || label[start] != NO_CLUSTER {
                continue;
            }
            label[start] = start;
            let mut queue = vec![start];
            while let Some(v) = queue.pop() {
                for axis in 0..domain.dim() {
                    for fwd in [true, false] {
                        if a.oriented(v, axis, fwd) != 0.0 {
                            let w = domain.neighbor(v, axis, fwd).unwrap();
                            if allowed[w] && label[w] == NO_CLUSTER {
                                label[w] = start;
                                queue.push(w);
                            }
                        }
                    }
                }
            }
        }
        label
    }

    #[test]
    fn coarsen_constants_and_staircase() {
        let dom = CubeDomain::new(2, 3).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let labels = union_find_clusters(&a);
        let p = build_partition(&a).unwrap();

        let c = ScalarField::constant(dom, 4.5);
        let out = coarsen(&c, &labels, &p, CoarsenVariant::Interior).unwrap();
        assert!(out.values().iter().all(|v| *v == 4.5));

        // linear along axis 0: plateaus of width 3 at cube-center values
        let lin = ScalarField::linear(dom, [1.0, 0.0, 0.0]);
        let out = coarsen(&lin, &labels, &p, CoarsenVariant::Interior).unwrap();
        for idx in 0..dom.vertex_count() {
            let cube = p.cube_of(idx);
            let center = cube.center_local();
            let g = dom.global_of([center[0] as usize, center[1] as usize, center[2] as usize]);
            assert_eq!(out.get(idx), g[0] as f64);
        }

        // boundary-zero variant kills the outer ring of cubes
        let out = coarsen(&c, &labels, &p, CoarsenVariant::BoundaryZero).unwrap();
        for idx in 0..dom.vertex_count() {
            let expect = if cube_touches_boundary(&dom, &p.cube_of(idx)) { 0.0 } else { 4.5 };
            assert_eq!(out.get(idx), expect);
        }
    }

    #[test]
    fn isolated_square_masked_off() {
        // spanning cluster on the first two rows plus an isolated open square;
        // masking zeroes the square's 4 edges
        let dom = CubeDomain::new(2, 2).unwrap();
        let law = PercolationLaw::bernoulli(0.5).unwrap();
        let mut dirs = vec![vec![0.0; dom.vertex_count()]; 2];
        for c0 in 0..9 {
            dirs[1][dom.index_of([c0, 0, 0])] = 1.0;
        }
        for c0 in 0..8 {
            dirs[0][dom.index_of([c0, 0, 0])] = 1.0;
        }
        dirs[0][dom.index_of([6, 6, 0])] = 1.0;
        dirs[0][dom.index_of([6, 7, 0])] = 1.0;
        dirs[1][dom.index_of([6, 6, 0])] = 1.0;
        dirs[1][dom.index_of([7, 6, 0])] = 1.0;
        let a = ConductanceField::from_raw(dom, law, 0, dirs).unwrap();
        let labels = union_find_clusters(&a);
        assert_eq!(labels.component_count(), 2);
        let masked = crate::percolation::mask_to_cluster(
            &a,
            &labels,
            crate::percolation::MaskTarget::Maximal,
        )
        .unwrap();
        assert_eq!(masked.at(dom.index_of([6, 6, 0]), 0), 0.0);
        assert_eq!(masked.at(dom.index_of([6, 6, 0]), 1), 0.0);
        assert_eq!(masked.at(dom.index_of([6, 7, 0]), 0), 0.0);
        assert_eq!(masked.at(dom.index_of([7, 6, 0]), 1), 0.0);
        assert_eq!(masked.at(dom.index_of([0, 0, 0]), 1), 1.0);
    }

    #[test]
    fn small_clusters_empty_on_full_lattice() {
        let dom = CubeDomain::new(2, 3).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let labels = union_find_clusters(&a);
        let p = build_partition(&a).unwrap();
        let sc = small_clusters(&labels, &p).unwrap();
        assert!(sc.vertices.is_empty());
    }

    #[test]
    fn small_cluster_size_scales_like_boundary() {
        // median |C_s(□_m)| / 3^{m(d−1)} stays bounded across m ∈ {3, 4}
        // (calibrated bound 2.0, measured medians well below)
        let law = PercolationLaw::bernoulli(0.7).unwrap();
        let normalized_median = |m: u32| -> f64 {
            let dom = CubeDomain::new(2, m).unwrap();
            let mut vals = Vec::new();
            for seed in 0..20 {
                let a = sample(dom, law, seed);
                let labels = union_find_clusters(&a);
                if labels.maximal_label().is_none() {
                    continue;
                }
                let Ok(p) = build_partition(&a) else { continue };
                let sc = small_clusters(&labels, &p).unwrap();
                vals.push(sc.vertices.len() as f64 / dom.side() as f64);
            }
            vals.sort_by(f64::total_cmp);
            vals[vals.len() / 2]
        };
        let m3 = normalized_median(3);
        let m4 = normalized_median(4);
        assert!(m3 <= 2.0 && m4 <= 2.0, "normalized medians {m3}, {m4}");
    }

    #[test]
    fn small_clusters_reports_detached_boundary_component() {
        // full lattice with a corner block cut off (touches the boundary,
        // reported) and an interior block cut off (not reported)
        let dom = CubeDomain::new(2, 3).unwrap();
        let full = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let mut dirs = vec![full.dir(0).to_vec(), full.dir(1).to_vec()];
        for c0 in 0..2 {
            dirs[1][dom.index_of([c0, 1, 0])] = 0.0;
        }
        for c1 in 0..2 {
            dirs[0][dom.index_of([1, c1, 0])] = 0.0;
        }
        for c0 in 10..12 {
            dirs[1][dom.index_of([c0, 9, 0])] = 0.0;
            dirs[1][dom.index_of([c0, 11, 0])] = 0.0;
        }
        for c1 in 10..12 {
            dirs[0][dom.index_of([9, c1, 0])] = 0.0;
            dirs[0][dom.index_of([11, c1, 0])] = 0.0;
        }
        let a = ConductanceField::from_raw(dom, *full.law(), 0, dirs).unwrap();
        let labels = union_find_clusters(&a);
        assert_eq!(labels.component_count(), 3);
        let p = build_partition(&a).unwrap();
        let sc = small_clusters(&labels, &p).unwrap();
        let expect: Vec<usize> = vec![
            dom.index_of([0, 0, 0]),
            dom.index_of([0, 1, 0]),
            dom.index_of([1, 0, 0]),
            dom.index_of([1, 1, 0]),
        ];
        let mut got = sc.vertices.clone();
        got.sort_unstable();
        assert_eq!(got, expect);
        assert!(sc.within_boundary_layer);
    }
}

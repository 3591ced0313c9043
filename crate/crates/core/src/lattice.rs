//! Cube domains of `Z^d`, triadic-cube combinatorics, and the two discrete
//! calculus systems: the edge gradient `∇` and the one-sided finite
//! differences `D`, `D*` (with zero extension outside the domain).
//!
//! Layout convention: vertex values are stored row-major by axis order, axis 0
//! slowest and the last axis fastest.  This order is fixed so that serialized
//! fields are bit-comparable across runs.

use crate::{Error, Result};

pub const MAX_DIM: usize = 3;

/// The cube `center + (-3^m/2, 3^m/2)^d ∩ Z^d`, with `3^m` vertices per axis.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CubeDomain {
    dim: usize,
    level: u32,
    side: usize,
    center: [i64; MAX_DIM],
}

impl CubeDomain {
    pub fn new(dim: usize, level: u32) -> Result<Self> {
        Self::centered(dim, level, [0; MAX_DIM])
    }

    pub fn centered(dim: usize, level: u32, center: [i64; MAX_DIM]) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidDomain(format!("dim must be 2 or 3, got {dim}")));
        }
        if level == 0 {
            return Err(Error::InvalidDomain("level must be at least 1".into()));
        }
        let side = 3usize
            .checked_pow(level)
            .filter(|s| s.checked_pow(dim as u32).is_some_and(|n| n <= 1 << 31))
            .ok_or_else(|| Error::InvalidDomain(format!("3^{level} per axis is too large")))?;
        Ok(Self { dim, level, side, center })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn level(&self) -> u32 {
        self.level
    }

    /// Vertices per axis, `3^m`.
    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn center(&self) -> [i64; MAX_DIM] {
        self.center
    }

    #[inline]
    pub fn vertex_count(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    #[inline]
    fn shape(&self) -> [usize; MAX_DIM] {
        let mut s = [1; MAX_DIM];
        s[..self.dim].fill(self.side);
        s
    }

    #[inline]
    pub fn index_of(&self, local: [usize; MAX_DIM]) -> usize {
        let s = self.shape();
        (local[0] * s[1] + local[1]) * s[2] + local[2]
    }

    #[inline]
    pub fn local_of(&self, idx: usize) -> [usize; MAX_DIM] {
        let s = self.shape();
        [idx / (s[1] * s[2]), (idx / s[2]) % s[1], idx % s[2]]
    }

    /// Absolute lattice coordinates of a vertex; the cube spans
    /// `center - (side-1)/2 ..= center + (side-1)/2` per axis.
    #[inline]
    pub fn global_of(&self, local: [usize; MAX_DIM]) -> [i64; MAX_DIM] {
        let half = (self.side as i64 - 1) / 2;
        let mut g = [0; MAX_DIM];
        for j in 0..self.dim {
            g[j] = self.center[j] - half + local[j] as i64;
        }
        g
    }

    /// In-domain neighbor `x ± e_axis`, if any.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, forward: bool) -> Option<usize> {
        let local = self.local_of(idx);
        let stride = self.stride(axis);
        if forward {
            (local[axis] + 1 < self.side).then(|| idx + stride)
        } else {
            (local[axis] > 0).then(|| idx - stride)
        }
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        let s = self.shape();
        match axis {
            0 => s[1] * s[2],
            1 => s[2],
            _ => 1,
        }
    }

    /// True when all `2d` lattice neighbors lie in the cube.
    #[inline]
    pub fn is_interior(&self, idx: usize) -> bool {
        let local = self.local_of(idx);
        (0..self.dim).all(|j| local[j] >= 1 && local[j] + 2 <= self.side)
    }

    /// L∞ distance from a vertex to the boundary vertex set `∂(V)`.
    #[inline]
    pub fn boundary_distance(&self, idx: usize) -> usize {
        let local = self.local_of(idx);
        (0..self.dim)
            .map(|j| local[j].min(self.side - 1 - local[j]))
            .min()
            .unwrap()
    }

    /// Complementary vertex masks `(interior, boundary)`.
    pub fn interior_boundary(&self) -> (Vec<bool>, Vec<bool>) {
        let n = self.vertex_count();
        let mut interior = vec![false; n];
        let mut boundary = vec![false; n];
        for idx in 0..n {
            if self.is_interior(idx) {
                interior[idx] = true;
            } else {
                boundary[idx] = true;
            }
        }
        (interior, boundary)
    }

    /// Triadic cube of size `3^n` containing a vertex, in domain-local coordinates.
    #[inline]
    pub fn triadic_of(&self, idx: usize, n: u32) -> TriadicCube {
        let local = self.local_of(idx);
        let size = 3i64.pow(n);
        let mut base = [0i64; MAX_DIM];
        for j in 0..self.dim {
            base[j] = (local[j] as i64).div_euclid(size) * size;
        }
        TriadicCube { level: n, base }
    }

    /// All triadic cubes of level `n` tiling the domain, in index order.
    pub fn triadic_cubes(&self, n: u32) -> Vec<TriadicCube> {
        assert!(n <= self.level);
        let size = 3i64.pow(n);
        let per_axis = 3i64.pow(self.level - n);
        let mut out = Vec::new();
        let counts = |j: usize| if j < self.dim { per_axis } else { 1 };
        for i0 in 0..counts(0) {
            for i1 in 0..counts(1) {
                for i2 in 0..counts(2) {
                    out.push(TriadicCube { level: n, base: [i0 * size, i1 * size, i2 * size] });
                }
            }
        }
        out
    }
}

/// Triadic cube in domain-local coordinates: vertex set `base + [0, 3^level)^d`
/// with `base ∈ 3^level Z^d`.  Two triadic cubes are either disjoint or nested.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TriadicCube {
    pub level: u32,
    pub base: [i64; MAX_DIM],
}

impl TriadicCube {
    #[inline]
    pub fn size(&self) -> i64 {
        3i64.pow(self.level)
    }

    /// The unique triadic cube of size `3^{level+1}` containing this one.
    pub fn predecessor(&self) -> TriadicCube {
        let size = self.size() * 3;
        let mut base = [0; MAX_DIM];
        for j in 0..MAX_DIM {
            base[j] = self.base[j].div_euclid(size) * size;
        }
        TriadicCube { level: self.level + 1, base }
    }

    /// The `3^d` triadic cubes this one splits into.
    pub fn successors(&self, dim: usize) -> Vec<TriadicCube> {
        assert!(self.level >= 1);
        let size = self.size() / 3;
        let mut out = Vec::with_capacity(3usize.pow(dim as u32));
        let counts = |j: usize| if j < dim { 3 } else { 1 };
        for i0 in 0..counts(0) {
            for i1 in 0..counts(1) {
                for i2 in 0..counts(2) {
                    out.push(TriadicCube {
                        level: self.level - 1,
                        base: [
                            self.base[0] + i0 * size,
                            self.base[1] + i1 * size,
                            self.base[2] + i2 * size,
                        ],
                    });
                }
            }
        }
        out
    }

    #[inline]
    pub fn contains_local(&self, local: [usize; MAX_DIM], dim: usize) -> bool {
        let size = self.size();
        (0..dim).all(|j| {
            let c = local[j] as i64;
            c >= self.base[j] && c < self.base[j] + size
        })
    }

    /// Continuum center in local coordinates (a lattice point since `3^n` is odd).
    #[inline]
    pub fn center_local(&self) -> [i64; MAX_DIM] {
        let half = (self.size() - 1) / 2;
        [self.base[0] + half, self.base[1] + half, self.base[2] + half]
    }

    pub fn contains(&self, other: &TriadicCube) -> bool {
        let size = self.size();
        other.level <= self.level
            && (0..MAX_DIM).all(|j| {
                other.base[j] >= self.base[j] && other.base[j] + other.size() <= self.base[j] + size
            })
    }

    /// Vertex indices of the cube, clipped to the domain.
    pub fn vertices(&self, domain: &CubeDomain) -> Vec<usize> {
        let size = self.size();
        let lo = |j: usize| self.base[j].max(0) as usize;
        let hi = |j: usize| ((self.base[j] + size) as usize).min(domain.side());
        let mut out = Vec::new();
        let top = |j: usize| if j < domain.dim() { hi(j) } else { 1 };
        for c0 in lo(0)..top(0) {
            for c1 in lo(1)..top(1) {
                for c2 in if domain.dim() == 3 { lo(2)..top(2) } else { 0..1 } {
                    out.push(domain.index_of([c0, c1, c2]));
                }
            }
        }
        out
    }
}

/// A real-valued function on the vertices of a cube domain.
#[derive(Clone, PartialEq, Debug)]
pub struct ScalarField {
    domain: CubeDomain,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(domain: CubeDomain) -> Self {
        Self { domain, values: vec![0.0; domain.vertex_count()] }
    }

    pub fn constant(domain: CubeDomain, c: f64) -> Self {
        Self { domain, values: vec![c; domain.vertex_count()] }
    }

    pub fn from_values(domain: CubeDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.vertex_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                domain.vertex_count(),
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite value in field".into()));
        }
        Ok(Self { domain, values })
    }

    pub fn from_fn(domain: CubeDomain, mut f: impl FnMut(usize) -> f64) -> Self {
        let values = (0..domain.vertex_count()).map(|i| f(i)).collect();
        Self { domain, values }
    }

    /// The affine function `l_p(x) = p · x` in absolute lattice coordinates.
    pub fn linear(domain: CubeDomain, p: [f64; MAX_DIM]) -> Self {
        Self::from_fn(domain, |idx| {
            let g = domain.global_of(domain.local_of(idx));
            (0..domain.dim()).map(|j| p[j] * g[j] as f64).sum()
        })
    }

    #[inline]
    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: f64) {
        self.values[idx] = v;
    }
}

/// An antisymmetric function on oriented edges, stored once per unoriented
/// edge: `dir(j)[x]` holds `F(x, x+e_j)`; slots whose head leaves the domain
/// stay zero.
#[derive(Clone, PartialEq, Debug)]
pub struct EdgeField {
    domain: CubeDomain,
    dirs: Vec<Vec<f64>>,
}

impl EdgeField {
    pub fn zeros(domain: CubeDomain) -> Self {
        let n = domain.vertex_count();
        Self { domain, dirs: vec![vec![0.0; n]; domain.dim()] }
    }

    pub fn from_dirs(domain: CubeDomain, dirs: Vec<Vec<f64>>) -> Result<Self> {
        if dirs.len() != domain.dim() || dirs.iter().any(|d| d.len() != domain.vertex_count()) {
            return Err(Error::InvalidArgument("edge array shape mismatch".into()));
        }
        Ok(Self { domain, dirs })
    }

    #[inline]
    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    #[inline]
    pub fn dir(&self, axis: usize) -> &[f64] {
        &self.dirs[axis]
    }

    #[inline]
    pub fn dir_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.dirs[axis]
    }

    /// Value on the oriented edge `(x, x ± e_axis)`; antisymmetry by construction.
    #[inline]
    pub fn oriented(&self, idx: usize, axis: usize, forward: bool) -> f64 {
        if forward {
            self.dirs[axis][idx]
        } else {
            match self.domain.neighbor(idx, axis, false) {
                Some(prev) => -self.dirs[axis][prev],
                None => 0.0,
            }
        }
    }
}

/// `d` reals per vertex (components along `e_1..e_d`).
#[derive(Clone, PartialEq, Debug)]
pub struct VectorField {
    domain: CubeDomain,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(domain: CubeDomain) -> Self {
        let n = domain.vertex_count();
        Self { domain, comps: vec![vec![0.0; n]; domain.dim()] }
    }

    #[inline]
    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    #[inline]
    pub fn comp(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    #[inline]
    pub fn comp_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.comps[axis]
    }

    pub fn from_comps(domain: CubeDomain, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != domain.dim() || comps.iter().any(|c| c.len() != domain.vertex_count()) {
            return Err(Error::InvalidArgument("component array shape mismatch".into()));
        }
        Ok(Self { domain, comps })
    }
}

/// `∇u(x,y) = u(y) − u(x)` on every in-domain edge.
pub fn gradient(u: &ScalarField) -> EdgeField {
    let domain = *u.domain();
    let mut out = EdgeField::zeros(domain);
    for axis in 0..domain.dim() {
        let stride = domain.stride(axis);
        let dir = out.dir_mut(axis);
        for idx in 0..domain.vertex_count() {
            if domain.neighbor(idx, axis, true).is_some() {
                dir[idx] = u.get(idx + stride) - u.get(idx);
            }
        }
    }
    out
}

/// `D_j u = u(· + e_j) − u`, with `u` extended by zero outside the domain.
pub fn forward_diff(u: &ScalarField, axis: usize) -> ScalarField {
    let domain = *u.domain();
    ScalarField::from_fn(domain, |idx| {
        let next = domain.neighbor(idx, axis, true).map_or(0.0, |n| u.get(n));
        next - u.get(idx)
    })
}

/// `D*_j u = u(· − e_j) − u`, with zero extension.
pub fn adjoint_diff(u: &ScalarField, axis: usize) -> ScalarField {
    let domain = *u.domain();
    ScalarField::from_fn(domain, |idx| {
        let prev = domain.neighbor(idx, axis, false).map_or(0.0, |n| u.get(n));
        prev - u.get(idx)
    })
}

/// The discrete gradient `D u = (D_1 u, …, D_d u)`.
pub fn forward_diff_all(u: &ScalarField) -> VectorField {
    let domain = *u.domain();
    let mut out = VectorField::zeros(domain);
    for axis in 0..domain.dim() {
        let d = forward_diff(u, axis);
        out.comp_mut(axis).copy_from_slice(d.values());
    }
    out
}

/// `D*·F = Σ_j D*_j F_j` for a vector field, with zero extension.
pub fn adjoint_divergence(f: &VectorField) -> ScalarField {
    let domain = *f.domain();
    ScalarField::from_fn(domain, |idx| {
        (0..domain.dim())
            .map(|axis| {
                let prev = domain.neighbor(idx, axis, false).map_or(0.0, |n| f.comp(axis)[n]);
                prev - f.comp(axis)[idx]
            })
            .sum()
    })
}

/// `∇·F(x) = Σ_{y∼x} F(x,y)` over in-domain edges.
pub fn edge_divergence(f: &EdgeField) -> ScalarField {
    let domain = *f.domain();
    ScalarField::from_fn(domain, |idx| {
        (0..domain.dim())
            .map(|axis| f.oriented(idx, axis, true) + f.oriented(idx, axis, false))
            .sum()
    })
}

/// Discrete Laplacian `Δu = ∇·∇u` on the interior (zero on the boundary rows).
pub fn laplacian(u: &ScalarField) -> ScalarField {
    let domain = *u.domain();
    ScalarField::from_fn(domain, |idx| {
        if !domain.is_interior(idx) {
            return 0.0;
        }
        let mut acc = 0.0;
        for axis in 0..domain.dim() {
            let stride = domain.stride(axis);
            acc += u.get(idx + stride) + u.get(idx - stride) - 2.0 * u.get(idx);
        }
        acc
    })
}

/// `⟨u,v⟩_V = Σ_{x∈V} u(x)v(x)`; pass `None` for the whole cube.
pub fn dot(u: &ScalarField, v: &ScalarField, mask: Option<&[bool]>) -> Result<f64> {
    if u.domain() != v.domain() {
        return Err(Error::DomainMismatch);
    }
    let mut acc = 0.0;
    match mask {
        None => {
            for i in 0..u.values().len() {
                acc += u.get(i) * v.get(i);
            }
        }
        Some(m) => {
            for i in 0..u.values().len() {
                if m[i] {
                    acc += u.get(i) * v.get(i);
                }
            }
        }
    }
    Ok(acc)
}

pub fn norm_l2(u: &ScalarField, mask: Option<&[bool]>) -> f64 {
    dot(u, u, mask).expect("same field").sqrt()
}

pub fn norm_lp(u: &ScalarField, p: f64, mask: Option<&[bool]>) -> f64 {
    let mut acc = 0.0;
    for i in 0..u.values().len() {
        if mask.map_or(true, |m| m[i]) {
            acc += u.get(i).abs().powf(p);
        }
    }
    acc.powf(1.0 / p)
}

/// `‖F‖²_{L²}` over unoriented in-domain edges (optionally edges inside a
/// vertex mask), equal to the half-weighted ordered sum.
pub fn edge_norm_sq(f: &EdgeField, mask: Option<&[bool]>) -> f64 {
    let domain = *f.domain();
    let mut acc = 0.0;
    for axis in 0..domain.dim() {
        let dir = f.dir(axis);
        let stride = domain.stride(axis);
        for idx in 0..domain.vertex_count() {
            if domain.neighbor(idx, axis, true).is_none() {
                continue;
            }
            if mask.map_or(true, |m| m[idx] && m[idx + stride]) {
                acc += dir[idx] * dir[idx];
            }
        }
    }
    acc
}

/// `Σ_x Σ_j F_j(x)²` over vertices.
pub fn vector_norm_sq(f: &VectorField, mask: Option<&[bool]>) -> f64 {
    let mut acc = 0.0;
    for axis in 0..f.domain().dim() {
        let c = f.comp(axis);
        for (i, v) in c.iter().enumerate() {
            if mask.map_or(true, |m| m[i]) {
                acc += v * v;
            }
        }
    }
    acc
}

/// `‖∇v 1_{a≠0}‖_{L²(V)}`: root of the sum of `(v(y)−v(x))²` over unoriented
/// open edges with both endpoints in the vertex mask.
pub fn grad_norm_open(
    v: &ScalarField,
    open: &dyn Fn(usize, usize) -> bool,
    mask: Option<&[bool]>,
) -> f64 {
    let domain = *v.domain();
    let mut acc = 0.0;
    for axis in 0..domain.dim() {
        let stride = domain.stride(axis);
        for idx in 0..domain.vertex_count() {
            if domain.neighbor(idx, axis, true).is_none() {
                continue;
            }
            let head = idx + stride;
            if mask.map_or(true, |m| m[idx] && m[head]) && open(idx, axis) {
                let d = v.get(head) - v.get(idx);
                acc += d * d;
            }
        }
    }
    acc.sqrt()
}

/// Half-width of the truncated discrete Gaussian of scale `r`.
pub fn heat_kernel_halfwidth(r: f64) -> usize {
    (6.0 * r).ceil() as usize
}

/// Normalized 1D slice of the product Gaussian `exp(-|z|²/4r²)` truncated at
/// the box `|z|_∞ ≤ ⌈6r⌉`.
fn heat_kernel_1d(r: f64) -> Vec<f64> {
    let h = heat_kernel_halfwidth(r) as i64;
    let mut w: Vec<f64> = (-h..=h).map(|z| (-(z * z) as f64 / (4.0 * r * r)).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Discrete convolution with the heat kernel `Φ_r` sampled on lattice offsets,
/// truncated at `|z|_∞ ≤ ⌈6r⌉` and renormalized to unit discrete mass; the
/// field is extended by zero outside its domain.  The truncated kernel is a
/// product over axes, so the convolution runs as `d` 1D passes.
pub fn heat_kernel_convolve(u: &ScalarField, r: f64) -> Result<ScalarField> {
    if r < 0.5 {
        return Err(Error::InvalidArgument(format!("kernel scale {r} below 0.5")));
    }
    let domain = *u.domain();
    let w = heat_kernel_1d(r);
    let h = heat_kernel_halfwidth(r) as i64;
    let mut cur = u.values().to_vec();
    let side = domain.side() as i64;
    for axis in 0..domain.dim() {
        let stride = domain.stride(axis);
        let mut next = vec![0.0; cur.len()];
        for idx in 0..cur.len() {
            let c = domain.local_of(idx)[axis] as i64;
            let mut acc = 0.0;
            let lo = (-h).max(-c);
            let hi = h.min(side - 1 - c);
            for z in lo..=hi {
                acc += w[(z + h) as usize] * cur[(idx as i64 + z * stride as i64) as usize];
            }
            next[idx] = acc;
        }
        cur = next;
    }
    ScalarField::from_values(domain, cur)
}

//! Discrete operator application and the three solver backends: conjugate
//! gradients on the (regularized) heterogeneous operator, geometric multigrid
//! for the constant-coefficient homogenized operator, and a dense direct
//! oracle for tests.

use std::time::Instant;

use rayon::prelude::*;

use crate::lattice::{CubeDomain, ScalarField};
use crate::percolation::ConductanceField;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum OperatorKind<'a> {
    /// `λ²_{C,m} − ∇·a_{C,m}∇` with a cluster-masked conductance field.
    Heterogeneous { a: &'a ConductanceField, lambda: &'a ScalarField },
    /// `λ²_{C,m} − ∇·ā∇` with full-lattice edges.
    Homogenized { abar: f64, lambda: Option<&'a ScalarField> },
}

#[derive(Clone, Copy, Debug)]
pub struct OperatorSpec<'a> {
    domain: CubeDomain,
    kind: OperatorKind<'a>,
}

impl<'a> OperatorSpec<'a> {
    pub fn heterogeneous(a: &'a ConductanceField, lambda: &'a ScalarField) -> Result<Self> {
        if a.domain() != lambda.domain() {
            return Err(Error::DomainMismatch);
        }
        Ok(Self { domain: *a.domain(), kind: OperatorKind::Heterogeneous { a, lambda } })
    }

    pub fn homogenized(
        domain: CubeDomain,
        abar: f64,
        lambda: Option<&'a ScalarField>,
    ) -> Result<Self> {
        if abar <= 0.0 || !abar.is_finite() {
            return Err(Error::InvalidArgument(format!("effective conductance {abar} must be positive")));
        }
        if let Some(l) = lambda {
            if l.domain() != &domain {
                return Err(Error::DomainMismatch);
            }
        }
        Ok(Self { domain, kind: OperatorKind::Homogenized { abar, lambda } })
    }

    #[inline]
    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    #[inline]
    pub fn kind(&self) -> &OperatorKind<'a> {
        &self.kind
    }

    #[inline]
    fn lambda_at(&self, idx: usize) -> f64 {
        match self.kind {
            OperatorKind::Heterogeneous { lambda, .. } => lambda.get(idx),
            OperatorKind::Homogenized { lambda, .. } => lambda.map_or(0.0, |l| l.get(idx)),
        }
    }

    #[inline]
    fn conductance(&self, idx: usize, axis: usize, forward: bool) -> f64 {
        match self.kind {
            OperatorKind::Heterogeneous { a, .. } => a.oriented(idx, axis, forward),
            OperatorKind::Homogenized { abar, .. } => {
                let exists = if forward {
                    self.domain.neighbor(idx, axis, true).is_some()
                } else {
                    self.domain.neighbor(idx, axis, false).is_some()
                };
                if exists {
                    abar
                } else {
                    0.0
                }
            }
        }
    }

    /// Interior vertices carrying an actual unknown: positive `λ` or an
    /// incident nonzero conductance.  Off-cluster interior vertices are
    /// excluded entirely (their value pinned at zero).
    pub fn active_mask(&self) -> Vec<bool> {
        let n = self.domain.vertex_count();
        (0..n)
            .map(|idx| {
                if !self.domain.is_interior(idx) {
                    return false;
                }
                match self.kind {
                    OperatorKind::Homogenized { .. } => true,
                    OperatorKind::Heterogeneous { .. } => {
                        self.lambda_at(idx) != 0.0
                            || (0..self.domain.dim()).any(|axis| {
                                self.conductance(idx, axis, true) != 0.0
                                    || self.conductance(idx, axis, false) != 0.0
                            })
                    }
                }
            })
            .collect()
    }
}

/// One stencil row: `λ(x)² u(x) + Σ_{y∼x} a(x,y)(u(x) − u(y))`.
#[inline]
fn stencil_row(spec: &OperatorSpec, u: &[f64], idx: usize) -> f64 {
    let domain = spec.domain();
    let lam = spec.lambda_at(idx);
    let mut acc = lam * lam * u[idx];
    for axis in 0..domain.dim() {
        let stride = domain.stride(axis);
        let af = spec.conductance(idx, axis, true);
        if af != 0.0 {
            acc += af * (u[idx] - u[idx + stride]);
        }
        let ab = spec.conductance(idx, axis, false);
        if ab != 0.0 {
            acc += ab * (u[idx] - u[idx - stride]);
        }
    }
    acc
}

/// Exact stencil application; boundary rows act as the identity so Dirichlet
/// data passes through unchanged.
pub fn apply(spec: &OperatorSpec, u: &ScalarField) -> Result<ScalarField> {
    if u.domain() != spec.domain() {
        return Err(Error::DomainMismatch);
    }
    let domain = *spec.domain();
    let uv = u.values();
    let values: Vec<f64> = (0..domain.vertex_count())
        .into_par_iter()
        .map(|idx| if domain.is_interior(idx) { stencil_row(spec, uv, idx) } else { uv[idx] })
        .collect();
    ScalarField::from_values(domain, values)
}

/// Work below this size is not worth a thread-pool dispatch.
const PAR_THRESHOLD: usize = 1 << 13;

/// Stencil application restricted to an active set, reading zeros elsewhere.
fn apply_active(spec: &OperatorSpec, u: &[f64], active: &[bool], out: &mut [f64]) {
    let row = |(idx, o): (usize, &mut f64)| {
        *o = if active[idx] { stencil_row(spec, u, idx) } else { 0.0 };
    };
    if out.len() >= PAR_THRESHOLD {
        out.par_iter_mut().enumerate().for_each(row);
    } else {
        out.iter_mut().enumerate().for_each(row);
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub wall_time: f64,
}

fn dot_seq(a: &[f64], b: &[f64]) -> f64 {
    // fixed summation order keeps results bit-deterministic across thread counts
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Conjugate gradients on the operator restricted to its active set, with
/// zero Dirichlet boundary.  Exceeding `max_iter` yields a non-converged
/// report rather than an error; a non-positive curvature is an error.
pub fn cg_solve(
    spec: &OperatorSpec,
    rhs: &ScalarField,
    tol: f64,
    max_iter: usize,
) -> Result<(ScalarField, SolveReport)> {
    if rhs.domain() != spec.domain() {
        return Err(Error::DomainMismatch);
    }
    let start = Instant::now();
    let domain = *spec.domain();
    let n = domain.vertex_count();
    let active = spec.active_mask();

    let mut b = vec![0.0; n];
    for i in 0..n {
        if active[i] {
            b[i] = rhs.get(i);
        }
    }
    let bnorm = dot_seq(&b, &b).sqrt();
    if bnorm == 0.0 {
        let report = SolveReport {
            iterations: 0,
            final_residual: 0.0,
            converged: true,
            wall_time: start.elapsed().as_secs_f64(),
        };
        return Ok((ScalarField::zeros(domain), report));
    }

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot_seq(&r, &r);
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..max_iter {
        if rr.sqrt() <= tol * bnorm {
            converged = true;
            break;
        }
        apply_active(spec, &p, &active, &mut ap);
        let pap = dot_seq(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::SolverBreakdown(format!(
                "non-positive curvature {pap} in conjugate gradients"
            )));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot_seq(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        iterations += 1;
    }
    if !converged && rr.sqrt() <= tol * bnorm {
        converged = true;
    }
    let report = SolveReport {
        iterations,
        final_residual: rr.sqrt() / bnorm,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((ScalarField::from_values(domain, x)?, report))
}

/// Default CG iteration cap, `20·3^m`.
pub fn default_cg_max_iter(domain: &CubeDomain) -> usize {
    20 * domain.side()
}

// ---------------------------------------------------------------------------
// Geometric multigrid on the factor-3 hierarchy.

// Factor-3 coarsening with pointwise injection leaves the smoother
// responsible for every mode the coarse grid corrects poorly, down to quite
// low frequencies.  A fixed damping factor cannot cover that band, so each
// half-cycle runs a Chebyshev schedule of damping weights over the operator
// eigenvalue band [MG_BAND_LO, 4d].  The roots are interleaved so transiently
// amplified rough modes are re-damped immediately.
const MG_SWEEPS: usize = 8;
const MG_BAND_LO: f64 = 0.24;
const MG_ROOT_ORDER: [usize; MG_SWEEPS] = [0, 7, 3, 4, 1, 6, 2, 5];

fn chebyshev_weights(dim: usize) -> [f64; MG_SWEEPS] {
    let hi = 4.0 * dim as f64;
    let c = 0.5 * (hi + MG_BAND_LO);
    let e = 0.5 * (hi - MG_BAND_LO);
    let mut roots = [0.0; MG_SWEEPS];
    for (t, r) in roots.iter_mut().enumerate() {
        *r = c + e * (std::f64::consts::PI * (2.0 * t as f64 + 1.0) / (2.0 * MG_SWEEPS as f64))
            .cos();
    }
    let mut w = [0.0; MG_SWEEPS];
    for (slot, &pick) in MG_ROOT_ORDER.iter().enumerate() {
        w[slot] = 2.0 * dim as f64 / roots[pick];
    }
    w
}

/// Schedule repetitions per level: coarse grids are 9× smaller, so repeating
/// the schedule there is nearly free and stands in for a deeper coarse solve.
fn mg_repeats(depth: usize) -> usize {
    3usize.pow(depth as u32).min(27)
}

struct MgLevel {
    domain: CubeDomain,
    u: Vec<f64>,
    rhs: Vec<f64>,
    res: Vec<f64>,
}

/// Damped-Jacobi sweeps for `−Δu = rhs` (unit coefficient) with zero Dirichlet
/// boundary, one scheduled damping weight per sweep.
fn jacobi(level: &mut MgLevel, repeats: usize) {
    let domain = level.domain;
    let dim = domain.dim();
    let diag = 2.0 * dim as f64;
    let weights = chebyshev_weights(dim);
    for _ in 0..repeats {
        for omega in weights {
            let u = &level.u;
            let step = |idx: usize| {
                if !domain.is_interior(idx) {
                    return 0.0;
                }
                let mut nb = 0.0;
                for axis in 0..dim {
                    let stride = domain.stride(axis);
                    nb += u[idx + stride] + u[idx - stride];
                }
                let jac = (level.rhs[idx] + nb) / diag;
                u[idx] + omega * (jac - u[idx])
            };
            let next: Vec<f64> = if u.len() >= PAR_THRESHOLD {
                (0..u.len()).into_par_iter().map(step).collect()
            } else {
                (0..u.len()).map(step).collect()
            };
            level.u = next;
        }
    }
}

fn mg_residual(level: &mut MgLevel) {
    let domain = level.domain;
    let dim = domain.dim();
    let u = &level.u;
    let rhs = &level.rhs;
    let row = |idx: usize| {
        if !domain.is_interior(idx) {
            return 0.0;
        }
        let mut au = 2.0 * dim as f64 * u[idx];
        for axis in 0..dim {
            let stride = domain.stride(axis);
            au -= u[idx + stride] + u[idx - stride];
        }
        rhs[idx] - au
    };
    let res: Vec<f64> = if u.len() >= PAR_THRESHOLD {
        (0..u.len()).into_par_iter().map(row).collect()
    } else {
        (0..u.len()).map(row).collect()
    };
    level.res = res;
}

/// Injection at coincident points (coarse node `i ↔` fine node `3i+1`); the
/// factor 9 accounts for the mesh-width jump of the unit-coefficient stencil.
fn restrict(fine: &MgLevel, coarse: &mut MgLevel) {
    let cd = coarse.domain;
    let fd = fine.domain;
    for cidx in 0..cd.vertex_count() {
        let cl = cd.local_of(cidx);
        let fl = [3 * cl[0] + 1, 3 * cl[1] + 1, if fd.dim() == 3 { 3 * cl[2] + 1 } else { 0 }];
        coarse.rhs[cidx] = 9.0 * fine.res[fd.index_of(fl)];
    }
    coarse.u.fill(0.0);
}

/// Separable linear interpolation from coarse nodes at fine coordinates
/// `3i+1`; the fine boundary stays at zero.
fn prolong_add(coarse: &MgLevel, fine: &mut MgLevel) {
    let cd = coarse.domain;
    let fd = fine.domain;
    let dim = fd.dim();
    let weights = |f: usize| -> (usize, f64) {
        // coarse node below and the fractional offset
        let c = (f - 1) / 3;
        let t = (f as i64 - (3 * c as i64 + 1)) as f64 / 3.0;
        (c, t)
    };
    let u = &coarse.u;
    let body = |idx: usize| {
            if !fd.is_interior(idx) {
                return 0.0;
            }
            let l = fd.local_of(idx);
            let mut acc = 0.0;
            // product of 1D hat weights over the 2^d surrounding coarse nodes
            let (c0, t0) = weights(l[0]);
            let (c1, t1) = weights(l[1]);
            let (c2, t2) = if dim == 3 { weights(l[2]) } else { (0, 0.0) };
            let w0 = [(c0, 1.0 - t0), (c0 + 1, t0)];
            let w1 = [(c1, 1.0 - t1), (c1 + 1, t1)];
            let w2 = if dim == 3 { vec![(c2, 1.0 - t2), (c2 + 1, t2)] } else { vec![(0, 1.0)] };
            for &(i0, a0) in &w0 {
                if a0 == 0.0 {
                    continue;
                }
                for &(i1, a1) in &w1 {
                    if a1 == 0.0 {
                        continue;
                    }
                    for &(i2, a2) in &w2 {
                        if a2 == 0.0 {
                            continue;
                        }
                        acc += a0 * a1 * a2 * u[cd.index_of([i0, i1, i2])];
                    }
                }
            }
            acc
    };
    let add: Vec<f64> = if fd.vertex_count() >= PAR_THRESHOLD {
        (0..fd.vertex_count()).into_par_iter().map(body).collect()
    } else {
        (0..fd.vertex_count()).map(body).collect()
    };
    for i in 0..fine.u.len() {
        fine.u[i] += add[i];
    }
}

fn v_cycle(levels: &mut [MgLevel], k: usize) {
    if k == levels.len() - 1 {
        // coarsest 3-per-axis grid has a single interior point
        let domain = levels[k].domain;
        let dim = domain.dim();
        let center = domain.index_of([1, 1, if dim == 3 { 1 } else { 0 }]);
        levels[k].u.fill(0.0);
        levels[k].u[center] = levels[k].rhs[center] / (2.0 * dim as f64);
        return;
    }
    jacobi(&mut levels[k], mg_repeats(k));
    mg_residual(&mut levels[k]);
    let (fine, rest) = levels.split_at_mut(k + 1);
    restrict(&fine[k], &mut rest[0]);
    v_cycle(levels, k + 1);
    let (fine, rest) = levels.split_at_mut(k + 1);
    prolong_add(&rest[0], &mut fine[k]);
    jacobi(&mut levels[k], mg_repeats(k));
}

/// Solves `−∇·ā∇ū = rhs` with zero Dirichlet boundary by V-cycles on the
/// 3-refinement hierarchy down to a directly solved 3-per-axis grid.
pub fn multigrid_poisson(
    abar: f64,
    rhs: &ScalarField,
    tol: f64,
    max_cycles: usize,
) -> Result<(ScalarField, SolveReport)> {
    if abar <= 0.0 || !abar.is_finite() {
        return Err(Error::InvalidArgument(format!("effective conductance {abar} must be positive")));
    }
    let start = Instant::now();
    let domain = *rhs.domain();
    let m = domain.level();

    let mut levels: Vec<MgLevel> = (1..=m)
        .rev()
        .map(|k| {
            let d = CubeDomain::new(domain.dim(), k).expect("level valid");
            let n = d.vertex_count();
            MgLevel { domain: d, u: vec![0.0; n], rhs: vec![0.0; n], res: vec![0.0; n] }
        })
        .collect();

    // unit-coefficient problem: −Δu = rhs/ā on the interior
    for idx in 0..domain.vertex_count() {
        levels[0].rhs[idx] = if domain.is_interior(idx) { rhs.get(idx) / abar } else { 0.0 };
    }
    let bnorm = dot_seq(&levels[0].rhs, &levels[0].rhs).sqrt();
    if bnorm == 0.0 {
        let report = SolveReport {
            iterations: 0,
            final_residual: 0.0,
            converged: true,
            wall_time: start.elapsed().as_secs_f64(),
        };
        return Ok((ScalarField::zeros(domain), report));
    }

    let mut cycles = 0;
    let mut rel = f64::INFINITY;
    while cycles < max_cycles {
        v_cycle(&mut levels, 0);
        cycles += 1;
        mg_residual(&mut levels[0]);
        rel = dot_seq(&levels[0].res, &levels[0].res).sqrt() / bnorm;
        if rel <= tol {
            break;
        }
    }
    let u = ScalarField::from_values(domain, levels.swap_remove(0).u)?;
    let report = SolveReport {
        iterations: cycles,
        final_residual: rel,
        converged: rel <= tol,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((u, report))
}

/// Residual reduction factor of a single V-cycle, used to pin multigrid
/// behavior in tests.
pub fn v_cycle_contraction(abar: f64, rhs: &ScalarField) -> Result<f64> {
    let (_, r1) = multigrid_poisson(abar, rhs, 0.0, 1)?;
    let (_, r2) = multigrid_poisson(abar, rhs, 0.0, 2)?;
    Ok(r2.final_residual / r1.final_residual)
}

/// Dense direct oracle: assembles the operator restricted to its active
/// unknowns and solves by Gaussian elimination with partial pivoting.
pub fn dense_direct(spec: &OperatorSpec, rhs: &ScalarField) -> Result<ScalarField> {
    if rhs.domain() != spec.domain() {
        return Err(Error::DomainMismatch);
    }
    let domain = *spec.domain();
    if domain.vertex_count() > 10_000 {
        return Err(Error::InvalidArgument("dense oracle capped at 10^4 vertices".into()));
    }
    let active = spec.active_mask();
    let ids: Vec<usize> = (0..domain.vertex_count()).filter(|&i| active[i]).collect();
    let pos: Vec<Option<usize>> = {
        let mut p = vec![None; domain.vertex_count()];
        for (k, &i) in ids.iter().enumerate() {
            p[i] = Some(k);
        }
        p
    };
    let n = ids.len();
    let mut mat = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for (row, &idx) in ids.iter().enumerate() {
        let lam = match spec.kind() {
            OperatorKind::Heterogeneous { lambda, .. } => lambda.get(idx),
            OperatorKind::Homogenized { lambda, .. } => lambda.map_or(0.0, |l| l.get(idx)),
        };
        let mut diag = lam * lam;
        for axis in 0..domain.dim() {
            for fwd in [true, false] {
                let a = spec.conductance(idx, axis, fwd);
                if a == 0.0 {
                    continue;
                }
                diag += a;
                let nb = spec.domain().neighbor(idx, axis, fwd).expect("edge in domain");
                if let Some(col) = pos[nb] {
                    mat[row * n + col] -= a;
                }
                // inactive neighbors are pinned at zero and drop out
            }
        }
        mat[row * n + row] += diag;
        b[row] = rhs.get(idx);
    }

    // Gaussian elimination with partial pivoting
    for col in 0..n {
        let mut piv = col;
        let mut best = mat[col * n + col].abs();
        for row in col + 1..n {
            let v = mat[row * n + col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best < 1e-300 {
            return Err(Error::Singular("active block is singular".into()));
        }
        if piv != col {
            for k in 0..n {
                mat.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = mat[col * n + col];
        for row in col + 1..n {
            let f = mat[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                mat[row * n + k] -= f * mat[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= mat[row * n + k] * x[k];
        }
        x[row] = acc / mat[row * n + row];
    }

    let mut out = ScalarField::zeros(domain);
    for (k, &idx) in ids.iter().enumerate() {
        out.set(idx, x[k]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::union_find_clusters;
    use crate::lattice::{dot, norm_l2};
    use crate::percolation::{field_lambda, mask_to_cluster, sample, MaskTarget, PercolationLaw};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_c0(domain: CubeDomain, rng: &mut ChaCha8Rng) -> ScalarField {
        ScalarField::from_fn(domain, |idx| {
            if domain.is_interior(idx) {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn apply_constant_and_linear_are_harmonic() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let lam = ScalarField::zeros(dom);
        let spec = OperatorSpec::heterogeneous(&a, &lam).unwrap();
        for u in [ScalarField::constant(dom, 2.0), ScalarField::linear(dom, [1.0, -0.5, 0.0])] {
            let au = apply(&spec, &u).unwrap();
            for idx in 0..dom.vertex_count() {
                if dom.is_interior(idx) {
                    assert!(au.get(idx).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn apply_matches_dense_matrix_product() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = sample(dom, PercolationLaw::bernoulli(0.7).unwrap(), 3);
        let labels = union_find_clusters(&a);
        let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
        let lam = field_lambda(&labels, 0.1);
        let spec = OperatorSpec::heterogeneous(&am, &lam).unwrap();
        let active = spec.active_mask();
        let u = {
            let mut u = random_c0(dom, &mut rng);
            for i in 0..dom.vertex_count() {
                if !active[i] {
                    u.set(i, 0.0);
                }
            }
            u
        };
        // oracle: assemble the dense operator over active unknowns
        let au = apply(&spec, &u).unwrap();
        let rhs = au.clone();
        let direct = dense_direct(&spec, &rhs).unwrap();
        for i in 0..dom.vertex_count() {
            if active[i] {
                assert!(
                    (direct.get(i) - u.get(i)).abs() < 1e-10,
                    "dense(apply(u)) should recover u"
                );
            }
        }
    }

    #[test]
    fn dense_single_unknown_with_unit_mass() {
        // one active vertex, a ≡ 0, λ = 1: the row is the identity, u = rhs
        let dom = CubeDomain::new(2, 1).unwrap();
        let law = PercolationLaw::bernoulli(0.5).unwrap();
        let a = ConductanceField::from_raw(dom, law, 0, vec![vec![0.0; 9]; 2]).unwrap();
        let center = dom.index_of([1, 1, 0]);
        let labels = crate::cluster::ClusterLabels::from_labels(
            dom,
            (0..9).map(|i| if i == center { center } else { crate::cluster::NO_CLUSTER }).collect(),
        )
        .unwrap();
        let lam = field_lambda(&labels, 1.0);
        let spec = OperatorSpec::heterogeneous(&a, &lam).unwrap();
        assert_eq!(spec.active_mask().iter().filter(|b| **b).count(), 1);
        let mut rhs = ScalarField::zeros(dom);
        rhs.set(center, 3.75);
        let u = dense_direct(&spec, &rhs).unwrap();
        assert_eq!(u.get(center), 3.75);
    }

    #[test]
    fn cg_recovers_applied_field() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = sample(dom, PercolationLaw::bernoulli(0.75).unwrap(), 5);
        let labels = union_find_clusters(&a);
        let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
        let lam = field_lambda(&labels, 0.1);
        let spec = OperatorSpec::heterogeneous(&am, &lam).unwrap();
        let active = spec.active_mask();
        let mut v = random_c0(dom, &mut rng);
        for i in 0..dom.vertex_count() {
            if !active[i] {
                v.set(i, 0.0);
            }
        }
        let rhs = apply(&spec, &v).unwrap();
        let (got, report) = cg_solve(&spec, &rhs, 1e-12, 10_000).unwrap();
        assert!(report.converged);
        for i in 0..dom.vertex_count() {
            assert!((got.get(i) - v.get(i)).abs() < 1e-8);
        }
    }

    #[test]
    fn cg_max_iter_reports_nonconverged() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(1.0).unwrap(), 0);
        let labels = union_find_clusters(&a);
        let lam = field_lambda(&labels, 0.0);
        let spec = OperatorSpec::heterogeneous(&a, &lam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rhs = random_c0(dom, &mut rng);
        let (_, report) = cg_solve(&spec, &rhs, 1e-14, 2).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 2);
    }

    #[test]
    fn regularization_reduces_iteration_count() {
        let dom = CubeDomain::new(2, 3).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(0.7).unwrap(), 11);
        let labels = union_find_clusters(&a);
        let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rhs = random_c0(dom, &mut rng);
        let mask = labels.maximal_interior_mask();
        for i in 0..dom.vertex_count() {
            if !mask[i] {
                rhs.set(i, 0.0);
            }
        }
        let lam0 = field_lambda(&labels, 0.0);
        let lam1 = field_lambda(&labels, 0.1);
        let spec0 = OperatorSpec::heterogeneous(&am, &lam0).unwrap();
        let spec1 = OperatorSpec::heterogeneous(&am, &lam1).unwrap();
        let (_, r0) = cg_solve(&spec0, &rhs, 1e-8, 100_000).unwrap();
        let (_, r1) = cg_solve(&spec1, &rhs, 1e-8, 100_000).unwrap();
        assert!(r0.converged && r1.converged);
        assert!(
            r1.iterations < r0.iterations,
            "λ=0.1 took {} iterations, λ=0 took {}",
            r1.iterations,
            r0.iterations
        );
    }

    #[test]
    fn multigrid_trivial_and_manufactured() {
        let dom = CubeDomain::new(2, 3).unwrap();
        let (u, report) = multigrid_poisson(1.0, &ScalarField::zeros(dom), 1e-8, 50).unwrap();
        assert!(report.converged);
        assert!(u.values().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = random_c0(dom, &mut rng);
        let spec = OperatorSpec::homogenized(dom, 0.7, None).unwrap();
        let rhs = apply(&spec, &target).unwrap();
        let (got, report) = multigrid_poisson(0.7, &rhs, 1e-10, 50).unwrap();
        assert!(report.converged);
        for i in 0..dom.vertex_count() {
            assert!((got.get(i) - target.get(i)).abs() < 1e-8);
        }
    }

    #[test]
    fn multigrid_contraction_factor_small_on_smooth_rhs() {
        let dom = CubeDomain::new(2, 3).unwrap();
        let side = dom.side() as f64;
        let rhs = ScalarField::from_fn(dom, |idx| {
            let l = dom.local_of(idx);
            if dom.is_interior(idx) {
                (std::f64::consts::PI * (l[0] as f64 + 1.0) / (side + 1.0)).sin()
                    * (std::f64::consts::PI * (l[1] as f64 + 1.0) / (side + 1.0)).sin()
            } else {
                0.0
            }
        });
        let factor = v_cycle_contraction(1.0, &rhs).unwrap();
        assert!(factor <= 0.2, "V-cycle residual reduction factor {factor}");
    }

    #[test]
    fn dense_oracle_cross_validates_cg_and_multigrid() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..30 {
            let p = 0.55 + 0.4 * (trial as f64 / 30.0);
            let a = sample(dom, PercolationLaw::bernoulli(p).unwrap(), 100 + trial as u64);
            let labels = union_find_clusters(&a);
            if labels.maximal_label().is_none() {
                continue;
            }
            let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
            let lam = field_lambda(&labels, 0.1);
            let spec = OperatorSpec::heterogeneous(&am, &lam).unwrap();
            let active = spec.active_mask();
            let mut rhs = random_c0(dom, &mut rng);
            for i in 0..dom.vertex_count() {
                if !active[i] {
                    rhs.set(i, 0.0);
                }
            }
            let oracle = dense_direct(&spec, &rhs).unwrap();
            let (cg, report) = cg_solve(&spec, &rhs, 1e-12, 20_000).unwrap();
            assert!(report.converged);
            for i in 0..dom.vertex_count() {
                assert!((oracle.get(i) - cg.get(i)).abs() < 1e-8, "trial {trial}");
            }

            let hom = OperatorSpec::homogenized(dom, 0.8, None).unwrap();
            let hrhs = random_c0(dom, &mut rng);
            let oracle = dense_direct(&hom, &hrhs).unwrap();
            let (mg, report) = multigrid_poisson(0.8, &hrhs, 1e-12, 200).unwrap();
            assert!(report.converged);
            for i in 0..dom.vertex_count() {
                assert!((oracle.get(i) - mg.get(i)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn operator_symmetry_and_energy_identity() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = sample(dom, PercolationLaw::bernoulli(0.7).unwrap(), 9);
        let labels = union_find_clusters(&a);
        let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
        let lam = field_lambda(&labels, 0.2);
        let spec = OperatorSpec::heterogeneous(&am, &lam).unwrap();
        let (interior, _) = dom.interior_boundary();
        let u = random_c0(dom, &mut rng);
        let v = random_c0(dom, &mut rng);
        let au = apply(&spec, &u).unwrap();
        let av = apply(&spec, &v).unwrap();
        let lhs = dot(&u, &av, Some(&interior)).unwrap();
        let rhs = dot(&au, &v, Some(&interior)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));

        // ⟨u, (λ² − ∇·a∇)u⟩ = ‖λu‖² + ⟨∇u, a∇u⟩
        let quad = dot(&u, &au, Some(&interior)).unwrap();
        let mut energy = 0.0;
        for axis in 0..dom.dim() {
            let stride = dom.stride(axis);
            for idx in 0..dom.vertex_count() {
                let c = am.at(idx, axis);
                if c != 0.0 {
                    let d = u.get(idx + stride) - u.get(idx);
                    energy += c * d * d;
                }
            }
        }
        let lu = ScalarField::from_fn(dom, |i| lam.get(i) * u.get(i));
        let expect = norm_l2(&lu, None).powi(2) + energy;
        assert!((quad - expect).abs() < 1e-10 * (1.0 + expect.abs()));

        // positive semidefiniteness on cluster-supported fields
        assert!(quad >= -1e-12);
    }

    #[test]
    fn cg_energy_error_monotone() {
        let dom = CubeDomain::new(2, 2).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(0.8).unwrap(), 21);
        let labels = union_find_clusters(&a);
        let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
        let lam = field_lambda(&labels, 0.1);
        let spec = OperatorSpec::heterogeneous(&am, &lam).unwrap();
        let active = spec.active_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rhs = random_c0(dom, &mut rng);
        for i in 0..dom.vertex_count() {
            if !active[i] {
                rhs.set(i, 0.0);
            }
        }
        let exact = dense_direct(&spec, &rhs).unwrap();
        let energy_err = |x: &ScalarField| -> f64 {
            let diff = ScalarField::from_fn(dom, |i| x.get(i) - exact.get(i));
            let adiff = apply(&spec, &diff).unwrap();
            let (interior, _) = dom.interior_boundary();
            dot(&diff, &adiff, Some(&interior)).unwrap()
        };
        let mut last = f64::INFINITY;
        for iters in 1..20 {
            let (x, _) = cg_solve(&spec, &rhs, 0.0, iters).unwrap();
            let e = energy_err(&x);
            assert!(e <= last + 1e-10, "energy error rose at iteration {iters}");
            last = e;
        }
    }
}

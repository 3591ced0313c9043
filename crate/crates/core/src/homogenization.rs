//! Effective conductance, finite-volume correctors, the centered flux and its
//! spatial averages, truncated flux-corrector gradients, the boundary cutoff,
//! modified correctors, and the two-scale expansion with its H¹ error.
//!
//! Infinite-volume correctors are replaced throughout by the localized
//! `φ_{L,p}` solved on the maximal cluster of the sampled cube.

use rayon::prelude::*;

use crate::cluster::{coarsen, ClusterLabels, CoarsenVariant, Partition};
use crate::elliptic::{cg_solve, default_cg_max_iter, OperatorSpec, SolveReport};
use crate::lattice::{
    self, forward_diff, heat_kernel_convolve, heat_kernel_halfwidth, CubeDomain, ScalarField,
    VectorField, MAX_DIM,
};
use crate::percolation::{ell_width, field_lambda, mask_to_cluster, sample, ConductanceField,
    MaskTarget, PercolationLaw};
use crate::{Error, Result};

/// Monte-Carlo estimate of the effective conductance with its diagnostics.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EffectiveTensor {
    /// Energy-based estimate, averaged over directions and samples.
    pub abar: f64,
    /// Standard error of the mean over (seed, direction) energy estimates.
    pub stderr: f64,
    /// Energy-based estimate per canonical direction.
    pub per_direction: Vec<f64>,
    /// Flux-average estimate, averaged over directions and samples.
    pub flux_abar: f64,
    /// Flux-average estimate per canonical direction.
    pub flux_per_direction: Vec<f64>,
    pub m_used: u32,
    pub samples_used: usize,
    pub samples_skipped: usize,
}

impl EffectiveTensor {
    /// Gap between the two axis estimates, a finite-volume isotropy diagnostic.
    pub fn isotropy_gap(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in &self.per_direction {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        hi - lo
    }
}

/// Localized corrector: `φ ∈ C₀` on the maximal cluster with
/// `−∇·a∇(φ + l_p) = 0`, solved by CG on the masked operator.
pub fn localized_corrector(
    a_masked: &ConductanceField,
    labels: &ClusterLabels,
    p: [f64; MAX_DIM],
    tol: f64,
) -> Result<(ScalarField, SolveReport)> {
    let domain = *a_masked.domain();
    if labels.domain() != &domain {
        return Err(Error::DomainMismatch);
    }
    if labels.maximal_label().is_none() {
        return Err(Error::EmptyCluster("no maximal cluster to solve on".into()));
    }
    let lam = field_lambda(labels, 0.0);
    let spec = OperatorSpec::heterogeneous(a_masked, &lam)?;
    // rhs = ∇·a∇l_p on cluster-interior vertices
    let rhs = ScalarField::from_fn(domain, |idx| {
        if !domain.is_interior(idx) || !labels.on_maximal(idx) {
            return 0.0;
        }
        let mut acc = 0.0;
        for axis in 0..domain.dim() {
            acc += a_masked.oriented(idx, axis, true) * p[axis];
            acc -= a_masked.oriented(idx, axis, false) * p[axis];
        }
        acc
    });
    cg_solve(&spec, &rhs, tol, 4 * default_cg_max_iter(&domain))
}

/// The energy `ν(□_m, p)`: minimum of `½ |□|⁻¹ ⟨∇v, a∇v⟩` over `v ∈ l_p + C₀`
/// on the maximal cluster's open edges.
pub fn dirichlet_energy(
    a_masked: &ConductanceField,
    labels: &ClusterLabels,
    p: [f64; MAX_DIM],
) -> Result<f64> {
    let (phi, _) = localized_corrector(a_masked, labels, p, 1e-10)?;
    Ok(energy_of(a_masked, labels, &phi, p))
}

fn energy_of(
    a_masked: &ConductanceField,
    labels: &ClusterLabels,
    phi: &ScalarField,
    p: [f64; MAX_DIM],
) -> f64 {
    let domain = a_masked.domain();
    let mut acc = 0.0;
    for axis in 0..domain.dim() {
        let stride = domain.stride(axis);
        for idx in 0..domain.vertex_count() {
            let c = a_masked.at(idx, axis);
            if c != 0.0 && labels.on_maximal(idx) {
                let d = phi.get(idx + stride) - phi.get(idx) + p[axis];
                acc += c * d * d;
            }
        }
    }
    0.5 * acc / domain.vertex_count() as f64
}

/// Flux-average estimate per direction: the cube mean of the masked flux
/// `a_C (D_k φ + p_k)`, the finite-volume analogue of the ensemble mean.
fn flux_average(
    a_masked: &ConductanceField,
    phi: &ScalarField,
    axis: usize,
) -> f64 {
    let domain = a_masked.domain();
    let stride = domain.stride(axis);
    let mut acc = 0.0;
    for idx in 0..domain.vertex_count() {
        let c = a_masked.at(idx, axis);
        if c != 0.0 {
            acc += c * (phi.get(idx + stride) - phi.get(idx) + 1.0);
        }
    }
    acc / domain.vertex_count() as f64
}

/// Monte-Carlo estimate of `ā` over seeds and canonical directions: per sample
/// both the energy route (`2ν(□_m, e_k)`) and the flux-average route from the
/// same corrector solve.
pub fn effective_conductance(
    law: PercolationLaw,
    dim: usize,
    m: u32,
    seeds: &[u64],
) -> Result<EffectiveTensor> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    if m < 3 {
        log::warn!("effective-conductance estimates below m = 3 carry large boundary effects");
    }
    let domain = CubeDomain::new(dim, m)?;

    struct SampleEstimate {
        energy: Vec<f64>,
        flux: Vec<f64>,
    }
    let runs: Vec<Option<SampleEstimate>> = seeds
        .par_iter()
        .map(|&seed| {
            let a = sample(domain, law, seed);
            let labels = crate::cluster::union_find_clusters(&a);
            if labels.maximal_label().is_none() {
                return None;
            }
            let a_masked = mask_to_cluster(&a, &labels, MaskTarget::Maximal).ok()?;
            let mut energy = Vec::new();
            let mut flux = Vec::new();
            for axis in 0..dim {
                let mut p = [0.0; MAX_DIM];
                p[axis] = 1.0;
                let (phi, rep) = localized_corrector(&a_masked, &labels, p, 1e-10).ok()?;
                if !rep.converged {
                    return None;
                }
                energy.push(2.0 * energy_of(&a_masked, &labels, &phi, p));
                flux.push(flux_average(&a_masked, &phi, axis));
            }
            Some(SampleEstimate { energy, flux })
        })
        .collect();

    let mut per_direction = vec![0.0; dim];
    let mut flux_per_direction = vec![0.0; dim];
    let mut all = Vec::new();
    let mut used = 0usize;
    for run in runs.iter().flatten() {
        for axis in 0..dim {
            per_direction[axis] += run.energy[axis];
            flux_per_direction[axis] += run.flux[axis];
            all.push(run.energy[axis]);
        }
        used += 1;
    }
    let skipped = seeds.len() - used;
    if skipped > 0 {
        log::warn!("{skipped} subcritical-looking sample(s) skipped");
    }
    if used == 0 {
        return Err(Error::SubcriticalSample("every sample was skipped".into()));
    }
    for v in per_direction.iter_mut().chain(flux_per_direction.iter_mut()) {
        *v /= used as f64;
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = if all.len() > 1 {
        all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (all.len() - 1) as f64
    } else {
        0.0
    };
    Ok(EffectiveTensor {
        abar: mean,
        stderr: (var / all.len() as f64).sqrt(),
        per_direction,
        flux_abar: flux_per_direction.iter().sum::<f64>() / dim as f64,
        flux_per_direction,
        m_used: m,
        samples_used: used,
        samples_skipped: skipped,
    })
}

/// Discrete radially symmetric mollifier of radius 1 and unit mass: weight ½
/// at the center, `1/(4d)` on each of the `2d` neighbors (zero extension).
pub fn eta_mollify(u: &ScalarField) -> ScalarField {
    let domain = *u.domain();
    let w_nb = 1.0 / (4.0 * domain.dim() as f64);
    ScalarField::from_fn(domain, |idx| {
        let mut acc = 0.5 * u.get(idx);
        for axis in 0..domain.dim() {
            for fwd in [true, false] {
                if let Some(nb) = domain.neighbor(idx, axis, fwd) {
                    acc += w_nb * u.get(nb);
                }
            }
        }
        acc
    })
}

/// Modified corrector `φ^{(λ)} = φ − ([φ]_{P,□} ⋆ η) ⋆ Φ_{λ⁻¹}`.
pub fn modified_corrector(
    phi: &ScalarField,
    labels: &ClusterLabels,
    partition: &Partition,
    lambda: f64,
) -> Result<ScalarField> {
    let coarse = coarsen(phi, labels, partition, CoarsenVariant::BoundaryZero)?;
    let smooth = heat_kernel_convolve(&eta_mollify(&coarse), 1.0 / lambda)?;
    Ok(ScalarField::from_fn(*phi.domain(), |idx| phi.get(idx) - smooth.get(idx)))
}

/// The cutoff `Υ`: 0 within `ℓ(λ)` of the boundary, 1 beyond `2ℓ(λ)`, linear
/// in between; `ℓ(λ)` is rounded up to an integer ≥ 1.
pub fn cutoff(domain: CubeDomain, lambda: f64) -> ScalarField {
    let ell = ell_width(lambda, domain.dim());
    if 2 * ell >= domain.side() / 2 {
        log::warn!("cutoff width 2ℓ = {} swallows the size-{} domain", 2 * ell, domain.side());
    }
    ScalarField::from_fn(domain, |idx| {
        let dist = domain.boundary_distance(idx) as f64;
        ((dist - ell as f64) / ell as f64).clamp(0.0, 1.0)
    })
}

/// Per-direction corrector data for one sampled environment.
#[derive(Clone, Debug)]
pub struct CorrectorSet {
    pub phi: Vec<ScalarField>,
    pub phi_lambda: Vec<ScalarField>,
    pub lambda: f64,
    pub side: usize,
    pub seed: u64,
}

pub fn compute_correctors(
    a_masked: &ConductanceField,
    labels: &ClusterLabels,
    partition: &Partition,
    lambda: f64,
    tol: f64,
) -> Result<CorrectorSet> {
    let domain = *a_masked.domain();
    let mut phi = Vec::new();
    let mut phi_lambda = Vec::new();
    for axis in 0..domain.dim() {
        let mut p = [0.0; MAX_DIM];
        p[axis] = 1.0;
        let (f, _) = localized_corrector(a_masked, labels, p, tol)?;
        phi_lambda.push(modified_corrector(&f, labels, partition, lambda)?);
        phi.push(f);
    }
    Ok(CorrectorSet { phi, phi_lambda, lambda, side: domain.side(), seed: a_masked.seed() })
}

/// Two-scale expansion `w = v̄ + Σ_k (Υ D_k v̄) φ^{(λ)}_{e_k}`.
pub fn two_scale_expansion(
    vbar: &ScalarField,
    correctors: &CorrectorSet,
    upsilon: &ScalarField,
) -> Result<ScalarField> {
    let domain = *vbar.domain();
    if upsilon.domain() != &domain
        || correctors.phi_lambda.iter().any(|f| f.domain() != &domain)
    {
        return Err(Error::DomainMismatch);
    }
    let diffs: Vec<ScalarField> = (0..domain.dim()).map(|axis| forward_diff(vbar, axis)).collect();
    Ok(ScalarField::from_fn(domain, |idx| {
        let mut acc = vbar.get(idx);
        for (axis, d) in diffs.iter().enumerate() {
            acc += upsilon.get(idx) * d.get(idx) * correctors.phi_lambda[axis].get(idx);
        }
        acc
    }))
}

/// H¹ error of the expansion and the budget norms that bound it.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct TwoScaleError {
    /// `‖∇(w − v) 1_{a≠0}‖_{L²(C_*(□_m))}`
    pub h1_error: f64,
    /// `‖∇v̄‖_{L²(□_m)}`
    pub grad_vbar: f64,
    /// `‖Δv̄‖_{L²(int □_m)}`
    pub lap_vbar: f64,
    /// `‖∇v̄‖^{1/2} ‖Δv̄‖^{1/2}`
    pub mixed: f64,
}

pub fn two_scale_error(
    v: &ScalarField,
    vbar: &ScalarField,
    w: &ScalarField,
    a: &ConductanceField,
    labels: &ClusterLabels,
) -> Result<TwoScaleError> {
    let domain = *v.domain();
    if vbar.domain() != &domain || w.domain() != &domain || a.domain() != &domain {
        return Err(Error::DomainMismatch);
    }
    let diff = ScalarField::from_fn(domain, |i| w.get(i) - v.get(i));
    let mask = labels.maximal_mask();
    let h1_error =
        lattice::grad_norm_open(&diff, &|idx, axis| a.is_open(idx, axis), Some(&mask));
    let grad_vbar = lattice::edge_norm_sq(&lattice::gradient(vbar), None).sqrt();
    let (interior, _) = domain.interior_boundary();
    let lap_vbar = lattice::norm_l2(&lattice::laplacian(vbar), Some(&interior));
    Ok(TwoScaleError {
        h1_error,
        grad_vbar,
        lap_vbar,
        mixed: grad_vbar.sqrt() * lap_vbar.sqrt(),
    })
}

/// Centered flux `g_p = a_C(Dφ_p + p) − āp`, one `d`-vector per vertex.
pub fn centered_flux(
    a: &ConductanceField,
    labels: &ClusterLabels,
    phi: &ScalarField,
    abar: f64,
    p: [f64; MAX_DIM],
) -> Result<VectorField> {
    let domain = *a.domain();
    if labels.domain() != &domain || phi.domain() != &domain {
        return Err(Error::DomainMismatch);
    }
    let mut out = VectorField::zeros(domain);
    for axis in 0..domain.dim() {
        let stride = domain.stride(axis);
        let comp = out.comp_mut(axis);
        for idx in 0..domain.vertex_count() {
            let mut c = a.at(idx, axis);
            if c != 0.0 && !(labels.on_maximal(idx) && labels.on_maximal(idx + stride)) {
                c = 0.0;
            }
            let dphi = if c != 0.0 { phi.get(idx + stride) - phi.get(idx) } else { 0.0 };
            comp[idx] = c * (dphi + p[axis]) - abar * p[axis];
        }
    }
    Ok(out)
}

/// Spatial-average kernels for probing the flux.
#[derive(Clone, Debug)]
pub enum SpatialKernel {
    /// Heat kernel of scale `r`, truncated at `⌈6r⌉` and normalized.
    Heat { r: f64 },
    /// Explicit non-negative weight table over the box `[-radius, radius]^d`,
    /// normalized internally.
    Table { radius: usize, weights: Vec<f64> },
}

impl SpatialKernel {
    fn radius(&self) -> usize {
        match self {
            SpatialKernel::Heat { r } => heat_kernel_halfwidth(*r),
            SpatialKernel::Table { radius, .. } => *radius,
        }
    }
}

/// Convolution of the piecewise-constant extension of `g` against the kernel
/// at the given probe vertices; probes must keep the full kernel support
/// inside the domain.
pub fn flux_spatial_average(
    g: &VectorField,
    kernel: &SpatialKernel,
    probes: &[usize],
) -> Result<Vec<[f64; MAX_DIM]>> {
    let domain = *g.domain();
    let dim = domain.dim();
    let radius = kernel.radius();
    let h = radius as i64;
    let table_len = (2 * radius + 1).pow(dim as u32);
    let weights: Vec<f64> = match kernel {
        SpatialKernel::Heat { r } => {
            let mut w = Vec::with_capacity(table_len);
            for flat in 0..table_len {
                let mut rem = flat;
                let mut sq = 0i64;
                for _ in 0..dim {
                    let z = (rem % (2 * radius + 1)) as i64 - h;
                    rem /= 2 * radius + 1;
                    sq += z * z;
                }
                w.push((-(sq as f64) / (4.0 * r * r)).exp());
            }
            w
        }
        SpatialKernel::Table { weights, .. } => {
            if weights.len() != table_len {
                return Err(Error::InvalidArgument(format!(
                    "kernel table needs {table_len} entries, got {}",
                    weights.len()
                )));
            }
            weights.clone()
        }
    };
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("kernel has no mass".into()));
    }

    let mut out = Vec::with_capacity(probes.len());
    for &probe in probes {
        let margin = domain.boundary_distance(probe);
        if margin < radius {
            return Err(Error::ProbeTooClose { needed: radius, margin });
        }
        let local = domain.local_of(probe);
        let mut acc = [0.0; MAX_DIM];
        for (flat, wgt) in weights.iter().enumerate() {
            let mut rem = flat;
            let mut nb = local;
            for j in 0..dim {
                let z = (rem % (2 * radius + 1)) as i64 - h;
                rem /= 2 * radius + 1;
                nb[j] = (local[j] as i64 + z) as usize;
            }
            let idx = domain.index_of(nb);
            for (j, a) in acc.iter_mut().enumerate().take(dim) {
                *a += wgt / total * g.comp(j)[idx];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// One step of the lazy simple random walk semigroup: stay with probability
/// ½, move to each neighbor with probability `1/(4d)`; zero extension.
fn lazy_step(domain: &CubeDomain, u: &[f64]) -> Vec<f64> {
    let w_nb = 1.0 / (4.0 * domain.dim() as f64);
    let step = |idx: usize| {
        let mut acc = 0.5 * u[idx];
        for axis in 0..domain.dim() {
            if let Some(nb) = domain.neighbor(idx, axis, true) {
                acc += w_nb * u[nb];
            }
            if let Some(nb) = domain.neighbor(idx, axis, false) {
                acc += w_nb * u[nb];
            }
        }
        acc
    };
    if u.len() >= 1 << 13 {
        (0..u.len()).into_par_iter().map(step).collect()
    } else {
        (0..u.len()).map(step).collect()
    }
}

/// Truncated flux-corrector gradients: partial sums over `t ≤ t_max` of
/// `(1/4d) [D_k D_j (P_t g_i) − D_k D_i (P_t g_j)]`, stored for `i < j` with
/// the antisymmetric counterpart produced on access.
#[derive(Clone, Debug)]
pub struct FluxCorrectorGradient {
    domain: CubeDomain,
    /// fields[pair][k], pairs in lexicographic (i, j) order with i < j
    fields: Vec<Vec<ScalarField>>,
    /// the final semigroup term, same layout; the reported truncation indicator
    last_term: Vec<Vec<ScalarField>>,
    pairs: Vec<(usize, usize)>,
    pub terms_used: usize,
    pub last_term_max: f64,
}

impl FluxCorrectorGradient {
    /// `D_k S_{p,ij}`; exactly antisymmetric in `(i, j)`.
    pub fn component(&self, i: usize, j: usize, k: usize) -> ScalarField {
        if i == j {
            return ScalarField::zeros(self.domain);
        }
        let (pair, sign) = if i < j { ((i, j), 1.0) } else { ((j, i), -1.0) };
        let pos = self.pairs.iter().position(|p| *p == pair).expect("valid pair");
        let f = &self.fields[pos][k];
        ScalarField::from_fn(self.domain, |idx| sign * f.get(idx))
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Max-abs of the final included term over vertices at the given distance
    /// from the boundary, the windowed truncation indicator.
    pub fn last_term_window_max(&self, margin: usize) -> f64 {
        let mut worst = 0.0f64;
        for per_k in &self.last_term {
            for f in per_k {
                for idx in 0..self.domain.vertex_count() {
                    if self.domain.boundary_distance(idx) >= margin {
                        worst = worst.max(f.get(idx).abs());
                    }
                }
            }
        }
        worst
    }
}

pub fn flux_corrector_gradient(
    g: &VectorField,
    t_max: usize,
    tol: f64,
) -> Result<FluxCorrectorGradient> {
    if t_max < 1 {
        return Err(Error::InvalidArgument("t_max must be at least 1".into()));
    }
    let domain = *g.domain();
    let dim = domain.dim();
    let quarter = 1.0 / (4.0 * dim as f64);
    let pairs: Vec<(usize, usize)> =
        (0..dim).flat_map(|i| (i + 1..dim).map(move |j| (i, j))).collect();

    let mut walk: Vec<Vec<f64>> = (0..dim).map(|i| g.comp(i).to_vec()).collect();
    let n = domain.vertex_count();
    let mut sums: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; n]; dim]; pairs.len()];
    let mut last: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; n]; dim]; pairs.len()];
    let mut terms_used = 0;
    let mut last_term_max = 0.0;
    for _t in 0..=t_max {
        let second: Vec<Vec<ScalarField>> = (0..dim)
            .map(|i| {
                let f = ScalarField::from_values(domain, walk[i].clone()).expect("finite walk");
                (0..dim).map(|j| forward_diff(&f, j)).collect()
            })
            .collect();
        let mut term_max = 0.0f64;
        for (pi, &(i, j)) in pairs.iter().enumerate() {
            for k in 0..dim {
                // D_k D_j (P_t g_i) − D_k D_i (P_t g_j)
                let a = forward_diff(&second[i][j], k);
                let b = forward_diff(&second[j][i], k);
                let sum = &mut sums[pi][k];
                let term = &mut last[pi][k];
                for idx in 0..sum.len() {
                    let v = quarter * (a.get(idx) - b.get(idx));
                    sum[idx] += v;
                    term[idx] = v;
                    term_max = term_max.max(v.abs());
                }
            }
        }
        terms_used += 1;
        last_term_max = term_max;
        if term_max < tol {
            break;
        }
        for w in walk.iter_mut() {
            *w = lazy_step(&domain, w);
        }
    }

    let wrap = |data: Vec<Vec<Vec<f64>>>| -> Vec<Vec<ScalarField>> {
        data.into_iter()
            .map(|per_k| {
                per_k
                    .into_iter()
                    .map(|v| ScalarField::from_values(domain, v).expect("finite sums"))
                    .collect()
            })
            .collect()
    };
    Ok(FluxCorrectorGradient {
        domain,
        fields: wrap(sums),
        last_term: wrap(last),
        pairs,
        terms_used,
        last_term_max,
    })
}

/// Max-abs residual of `Σ_j D*_j S_{ij} = g_i` over a centered window,
/// evaluated from the truncated gradients via `D*_j S(x) = −D_j S(x − e_j)`.
pub fn flux_divergence_residual(
    g: &VectorField,
    grads: &FluxCorrectorGradient,
    window_margin: usize,
) -> f64 {
    let domain = *g.domain();
    let dim = domain.dim();
    let mut worst = 0.0f64;
    for i in 0..dim {
        let per_j: Vec<ScalarField> = (0..dim).map(|j| grads.component(i, j, j)).collect();
        for idx in 0..domain.vertex_count() {
            if domain.boundary_distance(idx) < window_margin {
                continue;
            }
            let mut acc = 0.0;
            for (j, dsj) in per_j.iter().enumerate() {
                if i == j {
                    continue;
                }
                let prev = domain.neighbor(idx, j, false).expect("window inside");
                acc -= dsj.get(prev);
            }
            worst = worst.max((acc - g.comp(i)[idx]).abs());
        }
    }
    worst
}

/// Mean of the flux over the whole cube, one entry per direction.
pub fn flux_cube_average(g: &VectorField) -> Vec<f64> {
    let n = g.domain().vertex_count() as f64;
    (0..g.domain().dim()).map(|axis| g.comp(axis).iter().sum::<f64>() / n).collect()
}

/// Max-abs of `D*·g` over vertices at the given distance from the boundary.
pub fn flux_divergence_deep(g: &VectorField, margin: usize) -> f64 {
    let domain = *g.domain();
    let div = lattice::adjoint_divergence(g);
    let mut worst = 0.0f64;
    for idx in 0..domain.vertex_count() {
        if domain.boundary_distance(idx) >= margin {
            worst = worst.max(div.get(idx).abs());
        }
    }
    worst
}

/// Full corrector/flux pipeline for one sampled environment, as used by the
/// diagnostics and tests.
pub struct FluxPipeline {
    pub a_masked: ConductanceField,
    pub labels: ClusterLabels,
    pub phi: ScalarField,
    pub g: VectorField,
    pub abar_energy: f64,
    pub abar_flux: f64,
}

pub fn flux_pipeline(
    law: PercolationLaw,
    dim: usize,
    m: u32,
    seed: u64,
    axis: usize,
    tol: f64,
) -> Result<FluxPipeline> {
    let domain = CubeDomain::new(dim, m)?;
    let a = sample(domain, law, seed);
    let labels = crate::cluster::union_find_clusters(&a);
    if labels.maximal_label().is_none() {
        return Err(Error::SubcriticalSample("no maximal cluster".into()));
    }
    let a_masked = mask_to_cluster(&a, &labels, MaskTarget::Maximal)?;
    let mut p = [0.0; MAX_DIM];
    p[axis] = 1.0;
    let (phi, rep) = localized_corrector(&a_masked, &labels, p, tol)?;
    if !rep.converged {
        return Err(Error::SolverBreakdown("corrector solve did not converge".into()));
    }
    let abar_energy = 2.0 * energy_of(&a_masked, &labels, &phi, p);
    let abar_flux = flux_average(&a_masked, &phi, axis);
    let g = centered_flux(&a_masked, &labels, &phi, abar_energy, p)?;
    Ok(FluxPipeline { a_masked, labels, phi, g, abar_energy, abar_flux })
}

//! Sampling and storage of the i.i.d. random conductance field
//! `a : E_d → {0} ∪ [Λ⁻¹, 1]`, and the mask operations restricting it to
//! clusters.

use rayon::prelude::*;

use crate::cluster::ClusterLabels;
use crate::lattice::{CubeDomain, ScalarField, MAX_DIM};
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawKind {
    /// Open edges get conductance 1.
    Bernoulli,
    /// Open edges get a conductance uniform on `[Λ⁻¹, 1]`.
    Uniform,
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct PercolationLaw {
    pub p_open: f64,
    pub lambda_ell: f64,
    pub kind: LawKind,
}

impl PercolationLaw {
    pub fn new(p_open: f64, lambda_ell: f64, kind: LawKind) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_open) {
            return Err(Error::InvalidLaw(format!("open probability {p_open} outside [0,1]")));
        }
        if lambda_ell <= 1.0 || !lambda_ell.is_finite() {
            return Err(Error::InvalidLaw(format!("ellipticity {lambda_ell} must exceed 1")));
        }
        Ok(Self { p_open, lambda_ell, kind })
    }

    pub fn bernoulli(p_open: f64) -> Result<Self> {
        Self::new(p_open, 2.0, LawKind::Bernoulli)
    }

    /// Supercriticality is the caller's responsibility; warn below the known
    /// thresholds (0.5 in d=2, ~0.2488 in d=3).
    pub fn warn_if_subcritical(&self, dim: usize) {
        let threshold = if dim == 2 { 0.5 } else { 0.2488 };
        if self.p_open <= threshold {
            log::warn!(
                "open probability {} is at or below the critical point for d={dim}; \
                 samples will look subcritical",
                self.p_open
            );
        }
        if self.p_open == 0.0 {
            log::warn!("degenerate law: every edge closed");
        }
    }
}

/// Per-direction edge conductances over a cube domain.  The value of edge
/// `(x, x+e_j)` is a pure function of `(seed, x, j)` in absolute lattice
/// coordinates, so sub-cube samples agree with the parent cube's sample.
#[derive(Clone, PartialEq, Debug)]
pub struct ConductanceField {
    domain: CubeDomain,
    law: PercolationLaw,
    seed: u64,
    dirs: Vec<Vec<f64>>,
}

impl ConductanceField {
    #[inline]
    pub fn domain(&self) -> &CubeDomain {
        &self.domain
    }

    #[inline]
    pub fn law(&self) -> &PercolationLaw {
        &self.law
    }

    #[inline]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn dir(&self, axis: usize) -> &[f64] {
        &self.dirs[axis]
    }

    /// Conductance of edge `(x, x+e_axis)`, zero when the head leaves the domain.
    #[inline]
    pub fn at(&self, idx: usize, axis: usize) -> f64 {
        self.dirs[axis][idx]
    }

    /// Conductance of the edge from `idx` in the given direction, looking both ways.
    #[inline]
    pub fn oriented(&self, idx: usize, axis: usize, forward: bool) -> f64 {
        if forward {
            self.dirs[axis][idx]
        } else {
            match self.domain.neighbor(idx, axis, false) {
                Some(prev) => self.dirs[axis][prev],
                None => 0.0,
            }
        }
    }

    #[inline]
    pub fn is_open(&self, idx: usize, axis: usize) -> bool {
        self.dirs[axis][idx] != 0.0
    }

    /// Assemble a field from raw per-direction arrays (hand-built environments
    /// in tests and custom pipelines).  Slots whose head leaves the domain must
    /// be zero.
    pub fn from_raw(
        domain: CubeDomain,
        law: PercolationLaw,
        seed: u64,
        dirs: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if dirs.len() != domain.dim() || dirs.iter().any(|d| d.len() != domain.vertex_count()) {
            return Err(Error::InvalidArgument("conductance array shape mismatch".into()));
        }
        for axis in 0..domain.dim() {
            for idx in 0..domain.vertex_count() {
                let v = dirs[axis][idx];
                let ok = v == 0.0 || (v >= 1.0 / law.lambda_ell - 1e-12 && v <= 1.0);
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "conductance {v} outside {{0}} ∪ [Λ⁻¹, 1]"
                    )));
                }
                if domain.neighbor(idx, axis, true).is_none() && v != 0.0 {
                    return Err(Error::InvalidArgument("edge leaving the domain".into()));
                }
            }
        }
        Ok(Self { domain, law, seed, dirs })
    }

    pub fn open_edge_fraction(&self) -> f64 {
        let mut open = 0usize;
        let mut total = 0usize;
        for axis in 0..self.domain.dim() {
            for idx in 0..self.domain.vertex_count() {
                if self.domain.neighbor(idx, axis, true).is_some() {
                    total += 1;
                    if self.dirs[axis][idx] != 0.0 {
                        open += 1;
                    }
                }
            }
        }
        open as f64 / total as f64
    }
}

#[inline]
fn mix(mut h: u64, v: u64) -> u64 {
    h = h.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

#[inline]
fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

/// Uniform variate in `[0,1)` keyed by `(seed, edge, stream)`.
#[inline]
fn edge_u01(seed: u64, tail: [i64; MAX_DIM], axis: usize, stream: u64) -> f64 {
    let mut h = mix(seed, stream);
    for c in tail {
        h = mix(h, zigzag(c));
    }
    h = mix(h, axis as u64);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Draw each edge's conductance independently via a counter-based hash of the
/// canonical edge coordinates.
pub fn sample(domain: CubeDomain, law: PercolationLaw, seed: u64) -> ConductanceField {
    law.warn_if_subcritical(domain.dim());
    let n = domain.vertex_count();
    let dirs: Vec<Vec<f64>> = (0..domain.dim())
        .map(|axis| {
            (0..n)
                .into_par_iter()
                .map(|idx| {
                    if domain.neighbor(idx, axis, true).is_none() {
                        return 0.0;
                    }
                    let tail = domain.global_of(domain.local_of(idx));
                    let u = edge_u01(seed, tail, axis, 0);
                    if u >= law.p_open {
                        0.0
                    } else {
                        match law.kind {
                            LawKind::Bernoulli => 1.0,
                            LawKind::Uniform => {
                                let lo = 1.0 / law.lambda_ell;
                                lo + (1.0 - lo) * edge_u01(seed, tail, axis, 1)
                            }
                        }
                    }
                })
                .collect()
        })
        .collect();
    ConductanceField { domain, law, seed, dirs }
}

/// Which cluster the mask keeps.  In this finite-volume setting the maximal
/// cluster of the full cube stands in for the infinite cluster, so both
/// variants mask to `C_*(□_m)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MaskTarget {
    Maximal,
    InfiniteProxy,
}

/// `a_{C,m}(x,y) = a(x,y)` if both endpoints lie in the maximal cluster, else 0.
/// Idempotent.
pub fn mask_to_cluster(
    a: &ConductanceField,
    labels: &ClusterLabels,
    _which: MaskTarget,
) -> Result<ConductanceField> {
    if labels.domain() != a.domain() {
        return Err(Error::DomainMismatch);
    }
    let domain = *a.domain();
    let mut dirs = a.dirs.clone();
    for axis in 0..domain.dim() {
        for idx in 0..domain.vertex_count() {
            if dirs[axis][idx] == 0.0 {
                continue;
            }
            let head = idx + domain.stride(axis);
            if !(labels.on_maximal(idx) && labels.on_maximal(head)) {
                dirs[axis][idx] = 0.0;
            }
        }
    }
    Ok(ConductanceField { domain, law: a.law, seed: a.seed, dirs })
}

/// `λ_{C,m}(x) = λ` on maximal-cluster vertices, 0 elsewhere.
pub fn field_lambda(labels: &ClusterLabels, lambda: f64) -> ScalarField {
    let domain = *labels.domain();
    let m = domain.level();
    let lo = 3f64.powi(-(m as i32));
    if lambda != 0.0 && !(lambda > lo && lambda < 0.5) {
        log::warn!("regularization {lambda} outside (3^-{m}, 1/2)");
    }
    ScalarField::from_fn(domain, |idx| if labels.on_maximal(idx) { lambda } else { 0.0 })
}

/// The boundary-layer width `ℓ(λ)`: `log^{1/2}(1 + λ⁻¹)` in d=2, 1 in d=3.
pub fn ell(lambda: f64, dim: usize) -> f64 {
    if dim == 2 {
        (1.0 + 1.0 / lambda).ln().sqrt()
    } else {
        1.0
    }
}

/// `ℓ(λ)` rounded up to an integer ≥ 1, the form used as a width in lattice units.
pub fn ell_width(lambda: f64, dim: usize) -> usize {
    (ell(lambda, dim).ceil() as usize).max(1)
}

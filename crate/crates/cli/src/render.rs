//! PGM/PPM rasterization: scalar fields as min-max normalized grayscale (P5),
//! cluster labels in the blue maximal / red small-cluster style (P6).
//! One pixel per vertex; d = 3 renders the central slice along the last axis.

use anyhow::Result;
use ph_core::{ClusterLabels, CubeDomain, ScalarField};

const MAXIMAL_RGB: [u8; 3] = [40, 90, 205];
const SMALL_RGB: [u8; 3] = [205, 65, 55];
const EMPTY_RGB: [u8; 3] = [255, 255, 255];

fn slice_indices(domain: &CubeDomain) -> Vec<usize> {
    let side = domain.side();
    let c2 = if domain.dim() == 3 { side / 2 } else { 0 };
    let mut out = Vec::with_capacity(side * side);
    for c0 in 0..side {
        for c1 in 0..side {
            out.push(domain.index_of([c0, c1, c2]));
        }
    }
    out
}

/// Binary PGM (P5), min-max normalized; constant fields render mid-gray and
/// off-cluster pixels go black when labels are supplied.
pub fn field_to_pgm(u: &ScalarField, labels: Option<&ClusterLabels>) -> Result<Vec<u8>> {
    let domain = u.domain();
    if let Some(l) = labels {
        anyhow::ensure!(l.domain() == domain, "labels domain does not match the field");
    }
    let side = domain.side();
    let idxs = slice_indices(domain);
    let shown: Vec<f64> = idxs.iter().map(|&i| u.get(i)).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, &i) in idxs.iter().enumerate() {
        if labels.map_or(true, |l| l.on_maximal(i)) {
            lo = lo.min(shown[k]);
            hi = hi.max(shown[k]);
        }
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for (k, &i) in idxs.iter().enumerate() {
        if let Some(l) = labels {
            if !l.on_maximal(i) {
                out.push(0);
                continue;
            }
        }
        let px = if hi > lo { ((shown[k] - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 };
        out.push(px);
    }
    Ok(out)
}

/// Binary PPM (P6): maximal cluster blue, other clusters red, bare vertices white.
pub fn labels_to_ppm(labels: &ClusterLabels) -> Vec<u8> {
    let domain = labels.domain();
    let side = domain.side();
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    for i in slice_indices(domain) {
        let rgb = if labels.on_maximal(i) {
            MAXIMAL_RGB
        } else if labels.label(i) != ph_core::cluster::NO_CLUSTER {
            SMALL_RGB
        } else {
            EMPTY_RGB
        };
        out.extend_from_slice(&rgb);
    }
    out
}

//! Binary file formats: a one-line ASCII header followed by little-endian
//! payloads in the crate's fixed row-major order, so equal inputs produce
//! byte-identical files.
//!
//! * `PHFIELD v1 d=<d> m=<m> kind=<scalar|edge|vector>` + f64 values
//! * `PHCOND v1 d=<d> m=<m> p=<p> lambda-ell=<Λ> law=<law> seed=<s>` + f64 values
//! * `PHLBL v1 d=<d> m=<m> maximal=<id|none>` + u64 labels
//!
//! Files are always origin-centered; edge and vector payloads are stored one
//! direction array after another.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cluster::{ClusterLabels, NO_CLUSTER};
use crate::lattice::{CubeDomain, EdgeField, ScalarField, VectorField};
use crate::percolation::{ConductanceField, LawKind, PercolationLaw};
use crate::{Error, Result};

fn bad(msg: impl Into<String>) -> Error {
    Error::BadFormat(msg.into())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_header(r: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|_| bad("missing header line"))?;
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 512 {
            return Err(bad("header line too long"));
        }
        line.push(byte[0]);
    }
    String::from_utf8(line).map_err(|_| bad("header is not utf-8"))
}

fn header_fields<'a>(
    header: &'a str,
    magic: &str,
) -> Result<impl Iterator<Item = (&'a str, &'a str)>> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some(magic) || parts.next() != Some("v1") {
        return Err(bad(format!("expected `{magic} v1` header")));
    }
    Ok(parts.filter_map(|kv| kv.split_once('=')))
}

fn parse_domain(pairs: &[(String, String)]) -> Result<CubeDomain> {
    let get = |k: &str| {
        pairs
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad(format!("missing header field {k}")))
    };
    let d: usize = get("d")?.parse().map_err(|_| bad("bad d"))?;
    let m: u32 = get("m")?.parse().map_err(|_| bad("bad m"))?;
    CubeDomain::new(d, m)
}

fn require_origin(domain: &CubeDomain) -> Result<()> {
    if domain.center() != [0; 3] {
        return Err(Error::InvalidArgument(
            "only origin-centered fields are serialized".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FieldKind {
    Scalar,
    Edge,
    Vector,
}

impl FieldKind {
    fn name(&self) -> &'static str {
        match self {
            FieldKind::Scalar => "scalar",
            FieldKind::Edge => "edge",
            FieldKind::Vector => "vector",
        }
    }
}

pub fn write_scalar_field(path: impl AsRef<Path>, u: &ScalarField) -> Result<()> {
    require_origin(u.domain())?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "PHFIELD v1 d={} m={} kind=scalar",
        u.domain().dim(),
        u.domain().level()
    )?;
    write_f64s(&mut w, u.values())?;
    Ok(w.flush()?)
}

pub fn write_edge_field(path: impl AsRef<Path>, f: &EdgeField) -> Result<()> {
    require_origin(f.domain())?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "PHFIELD v1 d={} m={} kind=edge", f.domain().dim(), f.domain().level())?;
    for axis in 0..f.domain().dim() {
        write_f64s(&mut w, f.dir(axis))?;
    }
    Ok(w.flush()?)
}

pub fn write_vector_field(path: impl AsRef<Path>, f: &VectorField) -> Result<()> {
    require_origin(f.domain())?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "PHFIELD v1 d={} m={} kind=vector", f.domain().dim(), f.domain().level())?;
    for axis in 0..f.domain().dim() {
        write_f64s(&mut w, f.comp(axis))?;
    }
    Ok(w.flush()?)
}

fn read_field_header(r: &mut impl Read) -> Result<(CubeDomain, FieldKind)> {
    let header = read_header(r)?;
    let pairs: Vec<(String, String)> =
        header_fields(&header, "PHFIELD")?.map(|(k, v)| (k.into(), v.into())).collect();
    let domain = parse_domain(&pairs)?;
    let kind = match pairs.iter().find(|(k, _)| k == "kind").map(|(_, v)| v.as_str()) {
        Some("scalar") => FieldKind::Scalar,
        Some("edge") => FieldKind::Edge,
        Some("vector") => FieldKind::Vector,
        other => return Err(bad(format!("unknown field kind {other:?}"))),
    };
    Ok((domain, kind))
}

pub fn field_kind(path: impl AsRef<Path>) -> Result<FieldKind> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_field_header(&mut r)?.1)
}

pub fn read_scalar_field(path: impl AsRef<Path>) -> Result<ScalarField> {
    let mut r = BufReader::new(File::open(path)?);
    let (domain, kind) = read_field_header(&mut r)?;
    if kind != FieldKind::Scalar {
        return Err(bad(format!("expected a scalar field, found {}", kind.name())));
    }
    let values = read_f64s(&mut r, domain.vertex_count())?;
    ScalarField::from_values(domain, values).map_err(|e| bad(e.to_string()))
}

pub fn read_edge_field(path: impl AsRef<Path>) -> Result<EdgeField> {
    let mut r = BufReader::new(File::open(path)?);
    let (domain, kind) = read_field_header(&mut r)?;
    if kind != FieldKind::Edge {
        return Err(bad(format!("expected an edge field, found {}", kind.name())));
    }
    let dirs = (0..domain.dim())
        .map(|_| read_f64s(&mut r, domain.vertex_count()))
        .collect::<Result<Vec<_>>>()?;
    EdgeField::from_dirs(domain, dirs).map_err(|e| bad(e.to_string()))
}

pub fn read_vector_field(path: impl AsRef<Path>) -> Result<VectorField> {
    let mut r = BufReader::new(File::open(path)?);
    let (domain, kind) = read_field_header(&mut r)?;
    if kind != FieldKind::Vector {
        return Err(bad(format!("expected a vector field, found {}", kind.name())));
    }
    let comps = (0..domain.dim())
        .map(|_| read_f64s(&mut r, domain.vertex_count()))
        .collect::<Result<Vec<_>>>()?;
    VectorField::from_comps(domain, comps).map_err(|e| bad(e.to_string()))
}

pub fn write_conductance(path: impl AsRef<Path>, a: &ConductanceField) -> Result<()> {
    require_origin(a.domain())?;
    let law = a.law();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "PHCOND v1 d={} m={} p={} lambda-ell={} law={} seed={}",
        a.domain().dim(),
        a.domain().level(),
        law.p_open,
        law.lambda_ell,
        match law.kind {
            LawKind::Bernoulli => "bernoulli",
            LawKind::Uniform => "uniform",
        },
        a.seed()
    )?;
    for axis in 0..a.domain().dim() {
        write_f64s(&mut w, a.dir(axis))?;
    }
    Ok(w.flush()?)
}

pub fn read_conductance(path: impl AsRef<Path>) -> Result<ConductanceField> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let pairs: Vec<(String, String)> =
        header_fields(&header, "PHCOND")?.map(|(k, v)| (k.into(), v.into())).collect();
    let domain = parse_domain(&pairs)?;
    let get = |k: &str| {
        pairs
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad(format!("missing header field {k}")))
    };
    let p: f64 = get("p")?.parse().map_err(|_| bad("bad p"))?;
    let lambda_ell: f64 = get("lambda-ell")?.parse().map_err(|_| bad("bad lambda-ell"))?;
    let kind = match get("law")?.as_str() {
        "bernoulli" => LawKind::Bernoulli,
        "uniform" => LawKind::Uniform,
        other => return Err(bad(format!("unknown law {other}"))),
    };
    let seed: u64 = get("seed")?.parse().map_err(|_| bad("bad seed"))?;
    let law = PercolationLaw::new(p, lambda_ell, kind).map_err(|e| bad(e.to_string()))?;
    let dirs = (0..domain.dim())
        .map(|_| read_f64s(&mut r, domain.vertex_count()))
        .collect::<Result<Vec<_>>>()?;
    ConductanceField::from_raw(domain, law, seed, dirs).map_err(|e| bad(e.to_string()))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &ClusterLabels) -> Result<()> {
    require_origin(labels.domain())?;
    let mut w = BufWriter::new(File::create(path)?);
    let maximal = match labels.maximal_label() {
        Some(l) => l.to_string(),
        None => "none".into(),
    };
    writeln!(
        w,
        "PHLBL v1 d={} m={} maximal={}",
        labels.domain().dim(),
        labels.domain().level(),
        maximal
    )?;
    for &l in labels.labels() {
        w.write_all(&(l as u64).to_le_bytes())?;
    }
    Ok(w.flush()?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<ClusterLabels> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let pairs: Vec<(String, String)> =
        header_fields(&header, "PHLBL")?.map(|(k, v)| (k.into(), v.into())).collect();
    let domain = parse_domain(&pairs)?;
    let mut buf = vec![0u8; domain.vertex_count() * 8];
    r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
    let labels: Vec<usize> = buf
        .chunks_exact(8)
        .map(|c| {
            let v = u64::from_le_bytes(c.try_into().unwrap());
            if v == u64::MAX {
                NO_CLUSTER
            } else {
                v as usize
            }
        })
        .collect();
    ClusterLabels::from_labels(domain, labels).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::union_find_clusters;
    use crate::percolation::{sample, PercolationLaw};
    use proptest::prelude::*;

    #[test]
    fn conductance_and_labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dom = CubeDomain::new(2, 2).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(0.6).unwrap(), 5);
        let path = dir.path().join("a.cond");
        write_conductance(&path, &a).unwrap();
        let back = read_conductance(&path).unwrap();
        assert_eq!(a, back);

        let labels = union_find_clusters(&a);
        let lpath = dir.path().join("a.labels");
        write_labels(&lpath, &labels).unwrap();
        let back = read_labels(&lpath).unwrap();
        assert_eq!(labels, back);
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let dom = CubeDomain::new(2, 2).unwrap();
        let u = ScalarField::from_fn(dom, |i| (i as f64).sin());
        let p1 = dir.path().join("u1.field");
        let p2 = dir.path().join("u2.field");
        write_scalar_field(&p1, &u).unwrap();
        write_scalar_field(&p2, &u).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn edge_and_vector_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dom = CubeDomain::new(3, 1).unwrap();
        let mut e = EdgeField::zeros(dom);
        let mut v = VectorField::zeros(dom);
        for axis in 0..3 {
            for idx in 0..dom.vertex_count() {
                if dom.neighbor(idx, axis, true).is_some() {
                    e.dir_mut(axis)[idx] = (idx * 7 + axis) as f64 / 3.0;
                }
                v.comp_mut(axis)[idx] = (idx * 11 + axis) as f64 / 5.0;
            }
        }
        let ep = dir.path().join("e.field");
        let vp = dir.path().join("v.field");
        write_edge_field(&ep, &e).unwrap();
        write_vector_field(&vp, &v).unwrap();
        assert_eq!(read_edge_field(&ep).unwrap(), e);
        assert_eq!(read_vector_field(&vp).unwrap(), v);
        assert_eq!(field_kind(&ep).unwrap(), FieldKind::Edge);
        assert_eq!(field_kind(&vp).unwrap(), FieldKind::Vector);
    }

    #[test]
    fn rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let dom = CubeDomain::new(2, 1).unwrap();
        let u = ScalarField::zeros(dom);
        let path = dir.path().join("u.field");
        write_scalar_field(&path, &u).unwrap();
        assert!(matches!(read_edge_field(&path), Err(Error::BadFormat(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn scalar_field_roundtrip(values in proptest::collection::vec(-1e12f64..1e12, 81)) {
            let dir = tempfile::tempdir().unwrap();
            let dom = CubeDomain::new(2, 2).unwrap();
            let u = ScalarField::from_values(dom, values).unwrap();
            let path = dir.path().join("roundtrip.field");
            write_scalar_field(&path, &u).unwrap();
            let back = read_scalar_field(&path).unwrap();
            prop_assert_eq!(u.values(), back.values());
        }
    }
}

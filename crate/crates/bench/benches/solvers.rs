use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ph_core::cluster::union_find_clusters;
use ph_core::elliptic::{cg_solve, multigrid_poisson, OperatorSpec};
use ph_core::lattice::{CubeDomain, ScalarField};
use ph_core::percolation::{field_lambda, mask_to_cluster, sample, MaskTarget, PercolationLaw};
use ph_core::scheme::{self, IterationConfig, SourceTerm};

fn bench_sample(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample");
    for m in [3u32, 4, 5] {
        let dom = CubeDomain::new(2, m).unwrap();
        let law = PercolationLaw::bernoulli(0.6).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("m{m}")), &dom, |b, dom| {
            b.iter(|| sample(*dom, law, 42));
        });
    }
    group.finish();
}

fn bench_union_find(c: &mut Criterion) {
    let mut group = c.benchmark_group("union_find");
    for m in [3u32, 4, 5] {
        let dom = CubeDomain::new(2, m).unwrap();
        let a = sample(dom, PercolationLaw::bernoulli(0.6).unwrap(), 42);
        group.bench_with_input(BenchmarkId::from_parameter(format!("m{m}")), &a, |b, a| {
            b.iter(|| union_find_clusters(a));
        });
    }
    group.finish();
}

fn bench_inner_solvers(c: &mut Criterion) {
    let dom = CubeDomain::new(2, 4).unwrap();
    let a = sample(dom, PercolationLaw::bernoulli(0.6).unwrap(), 42);
    let labels = union_find_clusters(&a);
    let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
    let lam = field_lambda(&labels, 0.1);
    let rhs = ScalarField::from_fn(dom, |i| {
        if labels.on_maximal(i) && dom.is_interior(i) {
            ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5
        } else {
            0.0
        }
    });

    let mut group = c.benchmark_group("inner_solvers_m4");
    group.sample_size(10);
    group.bench_function("cg_regularized", |b| {
        b.iter(|| {
            let spec = OperatorSpec::heterogeneous(&am, &lam).unwrap();
            cg_solve(&spec, &rhs, 1e-8, 20_000).unwrap()
        });
    });
    let smooth = ScalarField::from_fn(dom, |i| {
        let l = dom.local_of(i);
        if dom.is_interior(i) {
            (std::f64::consts::PI * l[0] as f64 / 80.0).sin()
                * (std::f64::consts::PI * l[1] as f64 / 80.0).sin()
        } else {
            0.0
        }
    });
    group.bench_function("multigrid", |b| {
        b.iter(|| multigrid_poisson(0.2, &smooth, 1e-8, 50).unwrap());
    });
    group.finish();
}

fn bench_scheme_round(c: &mut Criterion) {
    let dom = CubeDomain::new(2, 4).unwrap();
    let a = sample(dom, PercolationLaw::bernoulli(0.6).unwrap(), 42);
    let labels = union_find_clusters(&a);
    let am = mask_to_cluster(&a, &labels, MaskTarget::Maximal).unwrap();
    let source = SourceTerm::CorrectorProblem { p: [1.0, 0.0, 0.0] };
    let config = IterationConfig::new(0.1, 0.19, 1);
    let zero = ScalarField::zeros(dom);

    let mut group = c.benchmark_group("scheme");
    group.sample_size(10);
    group.bench_function("round_m4", |b| {
        b.iter(|| scheme::iterate_once(&zero, &source, &am, &labels, &config).unwrap());
    });
    group.finish();
}

criterion_group!(benches, bench_sample, bench_union_find, bench_inner_solvers, bench_scheme_round);
criterion_main!(benches);

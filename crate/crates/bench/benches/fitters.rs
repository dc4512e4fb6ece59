use criterion::{criterion_group, criterion_main, Criterion};
use occufit_bench::{covariate_counts, covariate_detections, mixed_counts};
use occufit_core::robust::ht_psi_bar;
use occufit_core::{
    fit, DetectionComponent, Family, Formula, Method, ModelSpec, OccurrenceComponent,
};

fn spec(
    family: Family,
    detection: DetectionComponent,
    occurrence: OccurrenceComponent,
    method: Method,
) -> ModelSpec {
    ModelSpec {
        family,
        detection,
        occurrence,
        method,
    }
}

fn frequency_fits(c: &mut Criterion) {
    let near_poisson = mixed_counts(1e8);
    let overdispersed = mixed_counts(1.0);
    let constant = |method| {
        spec(
            Family::Poisson,
            DetectionComponent::Constant,
            OccurrenceComponent::Constant,
            method,
        )
    };
    let mut group = c.benchmark_group("frequency");
    group.bench_function("zip_constant_ml", |b| {
        let s = constant(Method::Ml);
        b.iter(|| fit(&near_poisson, &s).unwrap())
    });
    group.bench_function("zip_constant_cl", |b| {
        let s = constant(Method::Cl);
        b.iter(|| fit(&near_poisson, &s).unwrap())
    });
    group.bench_function("zip_gamma_ml", |b| {
        let s = spec(
            Family::Poisson,
            DetectionComponent::GammaMixture,
            OccurrenceComponent::Constant,
            Method::Ml,
        );
        b.iter(|| fit(&overdispersed, &s).unwrap())
    });
    group.finish();
}

fn regression_fits(c: &mut Criterion) {
    let counts = covariate_counts();
    let detections = covariate_detections();
    let det = || DetectionComponent::Regression(Formula::parse("1 + x1 + x2").unwrap());
    let mut group = c.benchmark_group("regression");
    group.sample_size(30);
    group.bench_function("zip_ml", |b| {
        let s = spec(
            Family::Poisson,
            det(),
            OccurrenceComponent::Constant,
            Method::Ml,
        );
        b.iter(|| fit(&counts, &s).unwrap())
    });
    group.bench_function("zip_cl", |b| {
        let s = spec(
            Family::Poisson,
            det(),
            OccurrenceComponent::Constant,
            Method::Cl,
        );
        b.iter(|| fit(&counts, &s).unwrap())
    });
    group.bench_function("zib_cl_occupancy", |b| {
        let s = spec(
            Family::Binomial,
            det(),
            OccurrenceComponent::Regression(Formula::parse("1 + x1").unwrap()),
            Method::Cl,
        );
        b.iter(|| fit(&detections, &s).unwrap())
    });
    group.finish();
}

fn weighted_presence(c: &mut Criterion) {
    let detections = covariate_detections();
    let s = spec(
        Family::Binomial,
        DetectionComponent::Regression(Formula::parse("1 + x1 + x2").unwrap()),
        OccurrenceComponent::Constant,
        Method::Cl,
    );
    let cl_fit = fit(&detections, &s).unwrap();
    c.bench_function("ht_psi_bar", |b| {
        b.iter(|| ht_psi_bar(&detections, &cl_fit, Family::Binomial).unwrap())
    });
}

criterion_group!(benches, frequency_fits, regression_fits, weighted_presence);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use dikw_bench::{catalog, dataset, model, run_config};
use dikw_core::canonical::{digest_of, to_canonical_bytes};
use dikw_core::info_agent::evaluate_info_topic;
use dikw_core::simulator::{self, DemographicsMix};
use dikw_core::stats::{two_proportion_test, wilson_interval};
use dikw_core::topic::{GroupDef, InfoTopic, Predicate, QueryKind, Scalar};
use dikw_core::{Run, Workspace};

fn stats(c: &mut Criterion) {
    c.bench_function("wilson_interval", |b| {
        b.iter(|| wilson_interval(black_box(1234), black_box(5000), 0.95))
    });
    c.bench_function("two_proportion_test", |b| {
        b.iter(|| two_proportion_test(black_box(600), 1000, black_box(500), 1000, 0.95))
    });
}

fn canonical(c: &mut Criterion) {
    let ds = dataset(2_000);
    let topic = InfoTopic::new("clicked", QueryKind::Rate);
    let result = evaluate_info_topic(&ds, &topic).unwrap();
    c.bench_function("canonical_bytes_stat_result", |b| b.iter(|| to_canonical_bytes(black_box(&result))));
    c.bench_function("digest_info_topic", |b| b.iter(|| digest_of(black_box(&topic))));
}

fn simulate(c: &mut Criterion) {
    let catalog = catalog();
    let model = model(&catalog);
    let mix = DemographicsMix::default();
    let mut g = c.benchmark_group("simulate");
    g.sample_size(20);
    g.bench_function("generate_20k", |b| {
        b.iter(|| simulator::generate(&model, 20_000, &mix, &catalog).unwrap())
    });
    g.finish();
}

fn info(c: &mut Criterion) {
    let ds = dataset(20_000);
    let rate = InfoTopic::new("clicked", QueryKind::Rate);
    let mut two = InfoTopic::new("clicked", QueryKind::TwoProportionTest);
    two.context.groups = ["salience", "default"]
        .iter()
        .map(|v| GroupDef { label: (*v).into(), predicates: vec![Predicate::eq("variant", Scalar::text(*v))] })
        .collect();
    let mut chi = InfoTopic::new("clicked", QueryKind::ChiSquareIndependence);
    chi.context.group_by = Some("variant".into());

    let mut g = c.benchmark_group("info_20k");
    g.bench_function("rate", |b| b.iter(|| evaluate_info_topic(&ds, &rate).unwrap()));
    g.bench_function("two_proportion", |b| b.iter(|| evaluate_info_topic(&ds, &two).unwrap()));
    g.bench_function("chi_square_by_variant", |b| b.iter(|| evaluate_info_topic(&ds, &chi).unwrap()));
    g.finish();
}

fn end_to_end(c: &mut Criterion) {
    let mut g = c.benchmark_group("run");
    g.sample_size(10);
    g.bench_function("canned_5k_cold", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |dir| {
                let ws = Workspace::open(dir.path()).unwrap();
                let mut run = Run::submit(&ws, run_config(5_000)).unwrap();
                let snap = run.run_auto_approve("bench").unwrap();
                assert!(snap.complete);
                dir
            },
            BatchSize::PerIteration,
        )
    });
    g.finish();
}

criterion_group!(benches, stats, canonical, simulate, info, end_to_end);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use emobench_bench::{busy_matrix, corpus_csv, REPLIES};
use emobench_core::dataset::{load_csv_from_reader, stratified_subsample, LabelFormat};
use emobench_core::metrics::{compute, group_matrix, Averaging, ScoringMode};
use emobench_core::normalize::{cleanup, CleanupRules, Normalizer};
use emobench_core::prompt::{render, DialectKind, ModelDialect, PromptStrategy};
use emobench_core::runner::{execute, plan_from_parts, ExecuteOptions, RunConfig};
use emobench_core::taxonomy::scheme_for;

fn prompts(c: &mut Criterion) {
    let mut g = c.benchmark_group("render");
    let scheme = scheme_for(6).unwrap();
    for dialect in DialectKind::ALL {
        let d = ModelDialect::new(dialect);
        g.bench_function(BenchmarkId::from_parameter(dialect.name()), |b| {
            b.iter(|| {
                render(
                    PromptStrategy::Percent,
                    &d,
                    &scheme,
                    black_box("i feel oddly calm today"),
                )
                .flatten()
            })
        });
    }
    g.finish();
}

fn normalize(c: &mut Criterion) {
    let scheme = scheme_for(6).unwrap();
    let normalizer = Normalizer::default();
    let mut g = c.benchmark_group("normalize");
    g.throughput(Throughput::Elements(REPLIES.len() as u64));
    for strategy in [PromptStrategy::Basic, PromptStrategy::Percent, PromptStrategy::Mask] {
        let prompt = render(strategy, &ModelDialect::new(DialectKind::HeaderDelimited), &scheme, "x");
        g.bench_function(BenchmarkId::from_parameter(strategy.name()), |b| {
            b.iter(|| {
                for reply in REPLIES {
                    black_box(normalizer.normalize(&prompt, reply));
                }
            })
        });
    }
    let rules = CleanupRules::for_dialect(DialectKind::HeaderDelimited);
    g.bench_function("cleanup-only", |b| {
        b.iter(|| {
            for reply in REPLIES {
                black_box(cleanup(reply, &rules));
            }
        })
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let matrix = busy_matrix(16_000);
    let mut g = c.benchmark_group("metrics");
    for averaging in Averaging::ALL {
        g.bench_function(BenchmarkId::new("compute", averaging.name()), |b| {
            b.iter(|| compute(black_box(&matrix), averaging, ScoringMode::Strict).unwrap())
        });
    }
    let two = scheme_for(2).unwrap();
    g.bench_function("group-to-k2", |b| {
        b.iter(|| group_matrix(black_box(&matrix), &two).unwrap())
    });
    g.finish();
}

fn dataset(c: &mut Criterion) {
    let text = corpus_csv(18_000);
    let mut g = c.benchmark_group("dataset");
    g.throughput(Throughput::Elements(18_000));
    g.bench_function("load-18k", |b| {
        b.iter(|| load_csv_from_reader(black_box(text.as_bytes()), LabelFormat::Auto).unwrap())
    });
    let samples = load_csv_from_reader(text.as_bytes(), LabelFormat::Auto)
        .unwrap()
        .samples;
    g.bench_function("subsample-600", |b| {
        b.iter(|| stratified_subsample(black_box(&samples), 600, 7).unwrap())
    });
    g.finish();
}

fn oracle_cell(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.csv"), corpus_csv(600)).unwrap();
    let mut g = c.benchmark_group("runner");
    g.sample_size(10);
    g.throughput(Throughput::Elements(600));
    let mut round = 0u32;
    g.bench_function("oracle-cell-600", |b| {
        b.iter(|| {
            round += 1;
            let config: RunConfig = serde_json::from_value(serde_json::json!({
                "dataset": {"path": "corpus.csv"},
                "backends": [{"name": "oracle", "protocol": "mock", "mock": {"kind": "oracle"}}],
                "strategies": ["percent"],
                "schemes": [6],
                "parallelism": 32,
                "run_dir": format!("run-{round}")
            }))
            .unwrap();
            let plan = plan_from_parts(config, dir.path()).unwrap();
            execute(&plan, &ExecuteOptions::default()).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, prompts, normalize, metrics, dataset, oracle_cell);
criterion_main!(benches);

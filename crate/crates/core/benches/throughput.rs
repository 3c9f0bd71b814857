use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ckcs_core::exec::{self, Execution};
use ckcs_core::protocol::{Op, ProtocolId};
use ckcs_core::security::{audit_many, AuditOptions};
use ckcs_core::sim::{self, corpus, Grid, TraceShape};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corpus_run(c: &mut Criterion) {
    let scenarios = corpus(16, 7, TraceShape::default());
    let mut g = c.benchmark_group("corpus_run");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| exec::map(mode, &scenarios, |s| sim::run(s).expect("corpus runs").events.len()))
        });
    }
    g.finish();
}

fn corpus_audit(c: &mut Criterion) {
    let traces: Vec<_> = corpus(16, 7, TraceShape::default())
        .iter()
        .map(|s| sim::run(s).expect("corpus runs"))
        .collect();
    let mut g = c.benchmark_group("corpus_audit");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| audit_many(&traces, AuditOptions::default(), mode).traces)
        });
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let grid = Grid {
        protocols: ProtocolId::ALL.to_vec(),
        ns: vec![256, 1024],
        ms: vec![16, 64],
        ops: vec![Op::Join, Op::Leave],
        ..Grid::default()
    };
    let mut g = c.benchmark_group("sweep");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| sim::sweep(&grid, mode).expect("grid is valid").rows.len())
        });
    }
    g.finish();
}

criterion_group!(benches, corpus_run, corpus_audit, sweep);
criterion_main!(benches);

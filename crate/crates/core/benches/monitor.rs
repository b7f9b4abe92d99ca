//! Engine overhead and batch-replay throughput, comparing the rayon
//! data-parallel harness entry points with their sequential fallbacks.

use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use wpmon_core::automaton::compose;
use wpmon_core::catalog;
use wpmon_core::engine::{EngineConfig, MonitorContext};
use wpmon_core::harness;
use wpmon_core::http::{parse_url, HttpEvent, HttpRequest, HttpResponse};
use wpmon_core::scenario::Scenario;
use wpmon_core::spec::parse_spec;

fn four_path_automaton() -> Arc<wpmon_core::Automaton> {
    let specs: Vec<_> = [
        "google-authcode-state.xml",
        "google-authcode.xml",
        "google-implicit-state.xml",
        "google-implicit.xml",
    ]
    .iter()
    .map(|n| parse_spec(catalog::builtin_spec_xml(n).unwrap()).unwrap())
    .collect();
    Arc::new(compose(&specs).unwrap())
}

fn benign_trace() -> Vec<HttpEvent> {
    let auth = "https://accounts.google.com/o/oauth2/auth?response_type=code&redirect_uri=https%3A%2F%2Frp.example%2Fcb";
    let code = "benchcode0123456789012345678901234567890123";
    let mut resp = HttpResponse::new(302, parse_url(auth).unwrap()).unwrap();
    resp.headers
        .push("Location", format!("https://rp.example/cb?code={code}"));
    vec![
        HttpEvent::Request(HttpRequest::new("GET", parse_url(auth).unwrap())),
        HttpEvent::Response(resp),
        HttpEvent::Request(HttpRequest::new(
            "GET",
            parse_url(&format!("https://rp.example/cb?code={code}")).unwrap(),
        )),
        HttpEvent::Request(HttpRequest::new(
            "GET",
            parse_url("https://cdn.example/asset.js").unwrap(),
        )),
    ]
}

fn bench_single_event(c: &mut Criterion) {
    let automaton = four_path_automaton();
    let trace = benign_trace();
    let mut group = c.benchmark_group("engine_per_message");
    group.throughput(Throughput::Elements(trace.len() as u64));
    group.bench_function("four_composed_specs", |b| {
        b.iter(|| {
            let mut ctx = MonitorContext::with_seed(
                automaton.clone(),
                EngineConfig::default(),
                "bench",
                1,
            )
            .unwrap();
            for e in &trace {
                criterion::black_box(ctx.on_event(e.clone(), Duration::ZERO));
            }
        })
    });
    group.finish();
}

fn bench_trace_replay(c: &mut Criterion) {
    let automaton = four_path_automaton();
    let config = EngineConfig::default();
    let traces: Vec<Vec<HttpEvent>> = (0..256).map(|_| benign_trace()).collect();

    let mut group = c.benchmark_group("trace_replay_256");
    group.throughput(Throughput::Elements((traces.len() * 4) as u64));
    group.bench_function(BenchmarkId::new("parallel", "rayon"), |b| {
        b.iter(|| criterion::black_box(harness::replay_traces(&automaton, &config, &traces)))
    });
    group.bench_function(BenchmarkId::new("sequential", "fallback"), |b| {
        b.iter(|| {
            criterion::black_box(harness::replay_traces_sequential(&automaton, &config, &traces))
        })
    });
    group.finish();
}

fn bench_scenario_suite(c: &mut Criterion) {
    let scenarios: Vec<Scenario> = catalog::builtin_scenarios().unwrap();
    let mut group = c.benchmark_group("builtin_scenario_suite");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            criterion::black_box(harness::run_scenarios(
                &scenarios,
                &catalog::builtin_resolver,
                7,
            ))
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            criterion::black_box(harness::run_scenarios_sequential(
                &scenarios,
                &catalog::builtin_resolver,
                7,
            ))
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_single_event,
    bench_trace_replay,
    bench_scenario_suite
);
criterion_main!(benches);

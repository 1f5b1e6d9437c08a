use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use forge_core::agents::{AgentRole, MockBackend, ScriptEntry, ScriptedBackend, TranscriptScript};
use forge_core::pipeline::{run_session, Deps, SessionInput, VerificationConfig};
use forge_core::render::MockRenderer;
use forge_core::schema::ApiSchema;
use forge_core::similarity::Providers;

fn deps(scores: &[u32]) -> Deps {
    let schema = Arc::new(ApiSchema::reference());
    let entries = scores
        .iter()
        .enumerate()
        .map(|(i, p)| ScriptEntry::new(AgentRole::Evaluator, format!("SCORE: {p}")).at(i as u32 + 1))
        .collect();
    let backend = ScriptedBackend::new(TranscriptScript::new(entries)).with_fallback(Arc::new(MockBackend::new(schema.clone())));
    let mut d = Deps::new(schema, Arc::new(backend), Arc::new(MockRenderer));
    d.providers = Providers::mock();
    d.render.resolution = (64, 64);
    d
}

fn session(c: &mut Criterion) {
    let mut group = c.benchmark_group("mock-session");
    group.sample_size(20);
    for (name, scores) in [("accept-1", &[95][..]), ("accept-3", &[50, 70, 95][..]), ("exhaust-5", &[10; 5][..])] {
        group.bench_function(name, |b| {
            b.iter(|| run_session(SessionInput::text("A basketball player"), VerificationConfig::default(), &deps(scores)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, session);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use defner_bench::{completion, definition, sentence};
use defner_core::align::ground;
use defner_core::eval::micro_f1;
use defner_core::parse::parse_completion;
use defner_core::promptgen::{render_prompt, PromptConfig};

fn parse(c: &mut Criterion) {
    let mut g = c.benchmark_group("parse_completion");
    for lines in [5, 20, 80] {
        let text = completion(lines);
        g.throughput(Throughput::Elements(lines as u64));
        g.bench_with_input(BenchmarkId::from_parameter(lines), &text, |b, t| {
            b.iter(|| parse_completion(black_box(t)))
        });
    }
    g.finish();
}

fn grounding(c: &mut Criterion) {
    let mut g = c.benchmark_group("ground");
    for len in [20, 60, 200] {
        let ex = sentence(7, len);
        let mut preds: Vec<(String, String)> =
            ex.gold.iter().map(|s| (ex.span_text(s), s.etype.clone())).collect();
        // misses force the slow normalized pass
        preds.push(("Nowhere Town".into(), "LOC".into()));
        preds.push(("\"lisbon\"".into(), "LOC".into()));
        g.bench_with_input(BenchmarkId::from_parameter(len), &(preds, ex), |b, (p, ex)| {
            b.iter(|| ground(black_box(p), black_box(&ex.tokens)))
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let examples: Vec<_> = (0..1000).map(|i| sentence(i, 30)).collect();
    let gold: Vec<_> = examples.iter().map(|e| e.gold.clone()).collect();
    let pred: Vec<_> = gold
        .iter()
        .map(|g| g.iter().skip(1).cloned().collect::<Vec<_>>())
        .collect();
    c.bench_function("micro_f1/1000", |b| {
        b.iter(|| micro_f1(black_box(&pred), black_box(&gold)))
    });
}

fn prompts(c: &mut Criterion) {
    let def = definition();
    let exemplars: Vec<_> = (0..5).map(|i| sentence(100 + i, 25)).collect();
    let query = sentence(1, 30);
    let cfg = PromptConfig::default();
    c.bench_function("render_prompt/k5", |b| {
        b.iter(|| render_prompt(black_box(&cfg), &def, &exemplars, black_box(&query)))
    });
}

criterion_group!(benches, parse, grounding, scoring, prompts);
criterion_main!(benches);

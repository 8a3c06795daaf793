use cfsum_bench::fixture;
use cfsum_core::Vocabulary;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn model(c: &mut Criterion) {
    let f = fixture();
    let sp = Vocabulary::SPECIALS;
    let ex = &f.encoded[0];
    let enc = f.base.encode(&ex.source, sp.pad).unwrap();
    let prefix = &ex.target[..ex.target.len() / 2];

    c.bench_function("encode", |b| b.iter(|| f.base.encode(black_box(&ex.source), sp.pad).unwrap()));
    c.bench_function("decode_step", |b| b.iter(|| f.base.decode_step(&enc, black_box(prefix), sp.bos, None).unwrap()));
    c.bench_function("teacher_forced_forward", |b| {
        b.iter(|| f.base.forward_teacher_forced(&ex.source, &ex.target, sp.bos, sp.eos, sp.pad, None).unwrap())
    });
    c.bench_function("xent_gradients", |b| {
        b.iter(|| f.base.loss_gradients(|m, g| m.xent_graph(g, &ex.source, &ex.target, sp.pad)).unwrap())
    });
}

criterion_group!(benches, model);
criterion_main!(benches);

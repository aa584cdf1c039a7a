use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use flowseq_bench::corpus;
use flowseq_core::eval::{corpus_bleu, pairwise_bleu};

fn bleu(c: &mut Criterion) {
    let pairs = corpus(2000, (4, 30), 7);
    let hyps: Vec<Vec<u32>> = pairs.iter().map(|p| p.src.clone()).collect();
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    c.bench_function("corpus_bleu_2000", |b| b.iter(|| corpus_bleu(black_box(&hyps), black_box(&refs)).unwrap()));

    let sets: Vec<Vec<Vec<u32>>> = pairs.chunks(10).map(|c| c.iter().map(|p| p.tgt.clone()).collect()).collect();
    c.bench_function("pairwise_bleu_200x10", |b| b.iter(|| pairwise_bleu(black_box(&sets), 10).unwrap()));
}

criterion_group!(benches, bleu);
criterion_main!(benches);

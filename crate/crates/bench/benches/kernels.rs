use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hedunet::metrics::edt::squared_edt;
use hedunet::model::{Model, ModelConfig};
use hedunet::Tape;
use hedunet_bench::{random_mask, random_tensor};

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(ch, size) in &[(8usize, 96usize), (32, 24), (128, 6)] {
        let x = random_tensor(&[4, ch, size, size], 1);
        let w = random_tensor(&[ch, ch, 3, 3], 2);
        let label = format!("{ch}ch_{size}px");
        group.bench_with_input(BenchmarkId::new("forward", &label), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), false);
                let wv = tape.leaf(w.clone(), false);
                black_box(tape.conv2d(xv, wv, None, 1, 1).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &label), &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone(), true);
                let wv = tape.leaf(w.clone(), true);
                let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
                let s = tape.sum_all(y).unwrap();
                tape.backward(s).unwrap();
                black_box(tape.grad(wv));
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_forward");
    group.sample_size(10);
    for &base in &[8usize, 16] {
        let model = Model::build(ModelConfig { base_channels: base, ..ModelConfig::default() }).unwrap();
        let x = random_tensor(&[1, 2, 96, 96], 3);
        group.bench_with_input(BenchmarkId::new("predict_96px", base), &(), |b, _| {
            b.iter(|| black_box(model.predict(&x, None).unwrap()))
        });
    }
    group.finish();
}

fn edt(c: &mut Criterion) {
    let mut group = c.benchmark_group("squared_edt");
    for &size in &[96usize, 384] {
        let mask = random_mask(size, 0.01, 4);
        group.bench_with_input(BenchmarkId::from_parameter(size), &mask, |b, m| b.iter(|| black_box(squared_edt(m))));
    }
    group.finish();
}

criterion_group!(benches, conv2d, forward, edt);
criterion_main!(benches);

//! Sequential versus data-parallel execution of the batch workloads.
//!
//! Build with `--no-default-features` to measure the fallback path alone;
//! `Exec::Parallel` then runs sequentially too.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use reqa_core::assessor::{Assessor, AssessorConfig};
use reqa_core::data::{synth_generate, SynthSpec};
use reqa_core::imaging::Image;
use reqa_core::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn predict_batch(c: &mut Criterion) {
    let model = Assessor::new(&AssessorConfig::tiny()).unwrap();
    let spec = SynthSpec {
        n: 16,
        ..SynthSpec::default()
    };
    let images: Vec<Image> = synth_generate(&spec, Exec::Sequential)
        .unwrap()
        .into_iter()
        .map(|it| it.image.pixels)
        .collect();
    let mut group = c.benchmark_group("predict_batch_16");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| model.predict_batch(&images, exec).unwrap())
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let model = Assessor::new(&AssessorConfig::tiny()).unwrap();
    let spec = SynthSpec {
        n: 5,
        ..SynthSpec::default()
    };
    let images: Vec<Image> = synth_generate(&spec, Exec::Sequential)
        .unwrap()
        .into_iter()
        .map(|it| it.image.pixels)
        .collect();
    let d = vec![1.0; model.steps()];
    let mut group = c.benchmark_group("micro_batch_grads");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                exec.map(images.len(), |i| {
                    let pass = model.forward_pass(&model.store, &images[i]).unwrap();
                    pass.param_grads(&model.store, &d)
                })
            })
        });
    }
    group.finish();
}

fn synth(c: &mut Criterion) {
    let spec = SynthSpec {
        n: 64,
        ..SynthSpec::default()
    };
    let mut group = c.benchmark_group("synth_64");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| synth_generate(&spec, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, predict_batch, forward_backward, synth);
criterion_main!(benches);

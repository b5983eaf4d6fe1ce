//! End-to-end costs of the merge paths and the training step on desk-scale
//! models: one SGD step, each static merge, gram collection, and a gated
//! per-image inference (gate, assembly, forward).

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use vitmerge::gate::{self, StaticMethod};
use vitmerge::merge::{self, GramStats, TaskModel};
use vitmerge::train::{generate, loss_and_grads, Family, GateNet, Split, SyntheticTaskSpec};
use vitmerge::{SimilarityStrategy, Tensor, ViTConfig, ViTParams};

fn desk_models(n: usize) -> Vec<TaskModel> {
    let config = ViTConfig::desk_default(4);
    (0..n)
        .map(|i| TaskModel {
            task_id: i + 1,
            params: ViTParams::init(&config, 100 + i as u64).expect("init"),
        })
        .collect()
}

fn pool(seed: u64, n: usize) -> vitmerge::Dataset {
    let spec = SyntheticTaskSpec {
        task_id: 1,
        num_classes: 4,
        family: Family::Stripes,
        noise_std: 0.1,
        seed,
    };
    generate(&spec, Split::Test, n, 1, 16).expect("pool")
}

fn bench_sgd_step(c: &mut Criterion) {
    let config = ViTConfig::desk_default(4);
    let params = ViTParams::init(&config, 11).expect("init");
    let data = pool(21, 16);
    let idx: Vec<usize> = (0..16).collect();
    let (images, labels) = data.batch(&idx);
    c.bench_function("loss and gradients, batch of 16", |bench| {
        bench.iter(|| loss_and_grads(black_box(&params), &images, &labels, 1e-4).unwrap())
    });
}

fn bench_static_merges(c: &mut Criterion) {
    let models = desk_models(3);
    let base = ViTParams::init(&ViTConfig::desk_default(4), 99).expect("init");
    let grams: Vec<GramStats> = models
        .iter()
        .enumerate()
        .map(|(i, m)| merge::collect_grams(m, &pool(30 + i as u64, 16)).expect("grams"))
        .collect();

    c.bench_function("avg_mean, 3 models", |bench| {
        bench.iter(|| merge::avg_mean(black_box(&models), 1).unwrap())
    });
    c.bench_function("task_arithmetic, 3 models", |bench| {
        bench.iter(|| merge::task_arithmetic(black_box(&base), &models, 0.75, 1).unwrap())
    });
    let gram_pool = pool(30, 16);
    c.bench_function("collect_grams, 16 images", |bench| {
        bench.iter(|| merge::collect_grams(black_box(&models[0]), &gram_pool).unwrap())
    });
    c.bench_function("regmean, 3 models", |bench| {
        bench.iter(|| merge::regmean(black_box(&models), &grams, 0.9, 1).unwrap())
    });
}

fn bench_gated_inference(c: &mut Criterion) {
    let models = desk_models(3);
    let report = gate::similarity(&models, SimilarityStrategy::ConcatCombined).expect("scores");
    let plan = gate::plan_from_m(&report, 2, StaticMethod::AvgMean);
    let gate_net = GateNet::new(256, 3, &[32], 12).expect("gate");
    let merged = gate::build(&models, gate_net, &plan, None).expect("build");
    let data = pool(40, 1);
    let mut image = Tensor::zeros(&[1, 16, 16]);
    image.data_mut().copy_from_slice(&data.batch(&[0]).0.data()[..256]);
    c.bench_function("gated inference, one image", |bench| {
        bench.iter(|| merged.infer(black_box(&image)).unwrap())
    });
}

criterion_group!(merging, bench_sgd_step, bench_static_merges, bench_gated_inference);
criterion_main!(merging);

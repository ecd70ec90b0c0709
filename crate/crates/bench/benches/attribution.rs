use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use impactx_bench::{lenet_model, masker, synthetic_images};
use impactx_core::evaluation::{morf_curve, region_ranking};
use impactx_core::explainer::{exact_shapley, partition_shap, BaselineScores, FusedScores};
use impactx_core::Rng;
use std::hint::black_box;

fn partition(c: &mut Criterion) {
    let data = synthetic_images(4);
    let model = lenet_model();
    let masker = masker(&data, 8, 8);
    let x = data.image(0);
    let mut group = c.benchmark_group("partition_shap 8x8");
    group.sample_size(10);
    for budget in [128, 512] {
        group.bench_with_input(
            BenchmarkId::from_parameter(budget),
            &budget,
            |bench, &budget| {
                bench.iter(|| {
                    partition_shap(
                        &BaselineScores(&model),
                        black_box(&x),
                        0,
                        &masker,
                        budget,
                        0,
                    )
                    .unwrap()
                })
            },
        );
    }
    group.finish();
}

fn exact(c: &mut Criterion) {
    let data = synthetic_images(4);
    let model = lenet_model();
    let masker = masker(&data, 2, 4);
    let x = data.image(0);
    let mut group = c.benchmark_group("exact_shapley");
    group.sample_size(10);
    group.bench_function("2x4", |bench| {
        bench.iter(|| exact_shapley(&BaselineScores(&model), black_box(&x), 0, &masker, 0).unwrap())
    });
    group.finish();
}

fn morf(c: &mut Criterion) {
    let data = synthetic_images(4);
    let model = lenet_model();
    let masker = masker(&data, 8, 8);
    let x = data.image(0);
    let batch = x.clone().reshape(vec![1, 3, 32, 32]).unwrap();
    let map = model.predict_impactx(&batch).unwrap().maps.row(0);
    let ranges = data.channel_ranges();
    let mut group = c.benchmark_group("morf");
    group.sample_size(10);
    group.bench_function("ranking 8x8", |bench| {
        bench.iter(|| region_ranking(masker.grid(), black_box(&map)).unwrap())
    });
    group.bench_function("curve 64 steps", |bench| {
        bench.iter(|| {
            let mut rng = Rng::new(0);
            morf_curve(
                &FusedScores(&model),
                black_box(&x),
                &map,
                0,
                masker.grid(),
                1,
                &ranges,
                &mut rng,
                0,
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, partition, exact, morf);
criterion_main!(benches);

//! Throughput of the training inner loop, sequential versus batch-parallel.
//!
//! The parallel samples only exist when the `parallel` feature (default) is
//! on; a `--no-default-features` build benches the sequential fallback
//! alone, which is the honest comparison point for that configuration.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hbridge_core::config::{BridgeSpec, Config, ExpertSpec, FusionMode, TrainSpec, VitSpec};
use hbridge_core::model::{ModelBundle, Phase};
use hbridge_core::trainer::Trainer;

fn bench_config() -> Config {
    Config {
        understanding: ExpertSpec {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: Some(16),
            max_seq: 8,
        },
        generative: ExpertSpec {
            n_layers: 6,
            d_model: 48,
            n_heads: 4,
            d_ff: 96,
            vocab_size: None,
            max_seq: 20,
        },
        bridge: BridgeSpec {
            skip_front: 1,
            skip_back: 1,
            fusion_mode: FusionMode::Deep,
            decoupled: false,
        },
        train: TrainSpec {
            learning_rate: 1e-4,
            steps: 1,
            batch_size: 16,
            grad_accum: 1,
            seed: 7,
            srt_enabled: true,
            n_srt_tokens: 4,
        },
        vit: VitSpec::default(),
    }
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = bench_config();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);

    let worker_counts: &[usize] = if cfg!(feature = "parallel") {
        &[1, 2, 4]
    } else {
        &[1]
    };
    for &threads in worker_counts {
        let label = if threads == 1 {
            "sequential".to_string()
        } else {
            format!("parallel_x{threads}")
        };
        group.bench_function(&label, |b| {
            b.iter_batched(
                || {
                    let (bundle, params) = ModelBundle::new(&cfg).expect("bundle");
                    (bundle, params)
                },
                |(bundle, params)| {
                    let mut trainer =
                        Trainer::new(&bundle, params, Phase::BridgeTrain, threads).expect("trainer");
                    trainer.run_steps(4, None).expect("steps");
                    trainer.params.data[0]
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn bench_forward_only(c: &mut Criterion) {
    let cfg = bench_config();
    let (bundle, params) = ModelBundle::new(&cfg).expect("bundle");
    let cache = bundle
        .und
        .encode(&params, &hbridge_core::data::Attrs::from_index(7).caption())
        .expect("encode");
    let mut rng = hbridge_core::rng::Rng::seeded(3);
    let mut x_t = vec![0.0; 16 * 48];
    rng.fill_normal(&mut x_t, 1.0);
    let ctx = bundle.bridge_ctx();

    c.bench_function("gen_forward_bridged", |b| {
        b.iter(|| {
            let (out, _) = bundle
                .gen
                .forward(&params, &ctx, Some(&cache), &bundle.srt, &x_t, 0.5, None, false)
                .expect("forward");
            out.velocity[0]
        })
    });
}

criterion_group!(benches, bench_train_step, bench_forward_only);
criterion_main!(benches);

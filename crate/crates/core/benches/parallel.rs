//! Throughput of the data-parallel sections against their sequential
//! fallback.
//!
//! Pooled rows run inside `par::with_threads(n, ..)`, the same scoped pool
//! the CLI builds for `--threads n`; the `seq` rows call the plain
//! sequential code path directly. On a single-core host the multi-thread
//! rows mostly expose rayon's scheduling overhead; on multicore hardware
//! they show the attainable speedup. Results are identical across rows by
//! construction (order-preserving maps, fixed-order reductions), which the
//! unit tests assert; these benchmarks only measure time.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use meshgen_core::model::train::{lr_at, train_step, BatchItem, Optimizer};
use meshgen_core::model::{init_model, HourglassConfig, TrainConfig};
use meshgen_core::pointcloud::{sample_surface, visibility_filter};
use meshgen_core::procgen::union_of_boxes_mesh;
use meshgen_core::sequencer::Segment;
use meshgen_core::{mesh, par, sequencer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const THREADS: [usize; 2] = [1, 4];

/// Synthetic per-index kernel heavy enough that one call dominates the
/// scheduling cost: a short deterministic float recurrence.
fn kernel(i: usize) -> f64 {
    let mut x = (i as f64).mul_add(0.618_033_988_749, 1.0);
    for _ in 0..512 {
        x = (x * 1.000_000_1).sin() + 1.5;
    }
    x
}

fn bench_map_range(c: &mut Criterion) {
    let n = 2048;
    let mut g = c.benchmark_group("map_range_kernel");
    g.bench_function("seq", |b| {
        b.iter(|| black_box(par::map_range_seq(black_box(n), kernel)))
    });
    for t in THREADS {
        g.bench_with_input(BenchmarkId::new("pool", t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || black_box(par::map_range(black_box(n), kernel))))
        });
    }
    g.finish();
}

fn bench_visibility(c: &mut Criterion) {
    // A cluttered multi-box scene: enough occlusion that each point's
    // ray casts do real BVH work.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mesh = mesh::triangulate(&union_of_boxes_mesh(6, &mut rng)).0;
    let cloud = sample_surface(&mesh, 512, 11).unwrap();
    let mut g = c.benchmark_group("visibility_filter");
    g.sample_size(20);
    for t in THREADS {
        g.bench_with_input(BenchmarkId::new("pool", t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || black_box(visibility_filter(&cloud, &mesh, 1e-4))))
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = HourglassConfig {
        quant_level: 128,
        depths: (1, 2, 2),
        channels: 32,
        head_channels: 16,
        ffn_hidden: 64,
        window: 144,
        rope_theta: 1e6,
        cross_attention_interval: 4,
        cond: None,
    };
    let tc = TrainConfig {
        steps: 1,
        batch_size: 4,
        window: 144,
        stride: 144,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mesh = union_of_boxes_mesh(6, &mut rng);
    let normalized = mesh::normalize(&mesh::triangulate(&mesh).0).unwrap();
    let (quantized, _) = mesh::quantize(&normalized, cfg.quant_level).unwrap();
    let seq = sequencer::encode(&quantized).unwrap();
    let segments: Vec<Segment> = sequencer::chunk(&seq, tc.window, tc.stride)
        .unwrap()
        .into_iter()
        .take(tc.batch_size)
        .collect();
    assert_eq!(segments.len(), tc.batch_size, "corpus too small for the batch");
    let batch: Vec<BatchItem> = segments
        .iter()
        .map(|s| (s.tokens.as_slice(), s.start, None))
        .collect();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for t in THREADS {
        g.bench_with_input(BenchmarkId::new("pool", t), &t, |b, &t| {
            let mut model = init_model(&cfg, 9);
            let mut opt = Optimizer::new(model.num_params());
            let mut step = 0;
            b.iter(|| {
                par::with_threads(t, || {
                    let m =
                        train_step(&mut model, &mut opt, &batch, lr_at(step, &tc), &tc, step)
                            .unwrap();
                    step += 1;
                    black_box(m.loss)
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_map_range, bench_visibility, bench_train_step);
criterion_main!(benches);

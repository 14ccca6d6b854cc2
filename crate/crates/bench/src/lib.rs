//! Benchmarks for mask smoothing, bias construction and the toy decoder.

use std::hint::black_box;

use anatbias_core::bias::make_layer_bias;
use anatbias_core::harness::{plan_for, synth_instance, ExperimentConfig};
use anatbias_core::mask::{build_mask_stack, gaussian_kernel_1d, smooth_separable, BinaryMask};
use anatbias_core::numerics::conv2d_full;
use anatbias_core::{BiasMode, BiasPlan, CausalMask, DecoderModel, SmoothingSchedule};
use criterion::{BenchmarkId, Criterion};

fn full_mask() -> BinaryMask {
    BinaryMask::from_fn(32, |r, c| {
        let lung = |cx: f64| ((r as f64 - 13.0) / 9.0).powi(2) + ((c as f64 - cx) / 5.0).powi(2) <= 1.0;
        lung(8.5) || lung(23.5) || ((r as f64 - 23.0) / 4.0).powi(2) + ((c as f64 - 17.0) / 5.0).powi(2) <= 1.0
    })
}

pub fn smoothing(c: &mut Criterion) {
    let m = full_mask().to_matrix();
    let mut group = c.benchmark_group("smooth_32x32");
    for k in [5usize, 15, 27] {
        let kernel = gaussian_kernel_1d(k).unwrap();
        let outer = kernel.outer();
        group.bench_with_input(BenchmarkId::new("separable", k), &k, |b, _| {
            b.iter(|| smooth_separable(black_box(&m), &kernel))
        });
        group.bench_with_input(BenchmarkId::new("full", k), &k, |b, _| {
            b.iter(|| conv2d_full(black_box(&m), &outer).unwrap())
        });
    }
    group.finish();

    let fused = full_mask();
    let schedule = SmoothingSchedule::standard();
    c.bench_function("mask_stack_12_layers", |b| {
        b.iter(|| build_mask_stack(black_box(&fused), &schedule, true).unwrap())
    });
}

pub fn bias(c: &mut Criterion) {
    let fused = full_mask();
    let stack = build_mask_stack(&fused, &SmoothingSchedule::standard(), true).unwrap();
    let mut group = c.benchmark_group("layer_bias");
    for (mode, plan) in [
        ("mask", BiasPlan::mask(&stack, 1.0).unwrap()),
        ("hidden", BiasPlan::hidden(&fused, 12).unwrap()),
    ] {
        for total in [1040usize, 2048] {
            let causal = CausalMask::causal(16, total).unwrap();
            group.bench_with_input(BenchmarkId::new(mode, total), &total, |b, _| {
                b.iter(|| make_layer_bias(&plan, 6, black_box(&causal)).unwrap())
            });
        }
    }
    group.finish();
}

pub fn decoder(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let model = DecoderModel::new(cfg.decoder.clone(), 0).unwrap();
    let inst = synth_instance(1, cfg.grid(), 3, 3).unwrap();
    let patches = inst.patches();
    let mut group = c.benchmark_group("toy_decoder");
    for mode in BiasMode::ALL {
        let plan = plan_for(&cfg, &inst, mode).unwrap();
        group.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| {
                let prefix = model.embed_patches(&patches).unwrap();
                model.forward(&prefix, black_box(&inst.target), Some(&plan)).unwrap()
            })
        });
    }
    let plan = plan_for(&cfg, &inst, BiasMode::Mask).unwrap();
    let item = anatbias_core::decoder::TrainItem {
        patches: &patches,
        target: &inst.target,
        plan: Some(&plan),
    };
    group.bench_function("loss_and_grad/mask", |b| {
        b.iter(|| model.loss_and_grad(black_box(&[item])).unwrap())
    });
    group.finish();
}

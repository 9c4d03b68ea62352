use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dsim_core::harness::{sensor_pattern, DOT_DENSITY};
use dsim_core::optim::{record_loss, LossSpec};
use dsim_core::render::{render_capture, render_reference_patterns};
use dsim_core::stereo::cost_volume;
use dsim_core::{
    preset, Image, ParamId, ParameterSet, Plane, Scene, SensorConfig, SimOptions, Simulation,
};

fn setup() -> (SensorConfig, Scene, ParameterSet) {
    let cfg = preset("kinect_v1").unwrap().with_size(160, 120);
    let scene = Scene::with_plane(Plane::tilted(1200.0, 30.0));
    let pattern = sensor_pattern(&cfg, DOT_DENSITY, 1).unwrap();
    let params = ParameterSet::new(&cfg, &scene, pattern);
    (cfg, scene, params)
}

fn bench_render(c: &mut Criterion) {
    let (cfg, scene, params) = setup();
    c.bench_function("render_capture_160x120", |b| {
        b.iter(|| render_capture(black_box(&scene), &cfg, &params.pattern).unwrap())
    });
}

fn bench_cost_volume(c: &mut Criterion) {
    let (cfg, scene, params) = setup();
    let capture = render_capture(&scene, &cfg, &params.pattern).unwrap();
    let range = Simulation::record(&scene, &cfg, &params, &SimOptions::default())
        .unwrap()
        .range;
    let refs = render_reference_patterns(&cfg, &params.pattern, range.min).unwrap();
    c.bench_function("cost_volume_160x120", |b| {
        b.iter(|| {
            cost_volume(
                black_box(&capture.channels),
                &refs,
                cfg.block_size,
                range,
                cfg.subpixel_levels,
            )
            .unwrap()
        })
    });
}

fn bench_backward(c: &mut Criterion) {
    let (cfg, scene, params) = setup();
    let params = params.with_flags(&[
        ParamId::ShadowBias,
        ParamId::NoiseStd,
        ParamId::PlaneAlpha,
        ParamId::Pattern,
    ]);
    let target = Image::filled(cfg.width, cfg.height, 1200.0);
    c.bench_function("simulate_and_backward_160x120", |b| {
        b.iter(|| {
            let mut sim =
                Simulation::record(&scene, &cfg, &params, &SimOptions::default()).unwrap();
            let l = record_loss(
                &mut sim.tape,
                sim.depth,
                &target,
                &sim.valid,
                &LossSpec::l1(),
            )
            .unwrap();
            black_box(sim.gradients(l).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_render, bench_cost_volume, bench_backward
}
criterion_main!(benches);

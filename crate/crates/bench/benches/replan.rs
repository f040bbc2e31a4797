use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use replan_core::approx::{
    homotopy_approx, interpolate, linear_approx, uniform_coords, GridMeta, HomotopyConfig, JacobianGrid,
};
use replan_core::hdsa::{hdsa, HdsaSettings, SensitivityMatrix};
use replan_core::shuttle::{shuttle_problem, ShuttleConfig};
use replan_core::ParametricObjective;
use std::hint::black_box;

const N: usize = 21;

fn synthetic_grid(dims: usize, m: usize) -> JacobianGrid {
    let n_nodes = m.pow(dims as u32);
    let payload = (0..n_nodes)
        .map(|k| {
            let data = (0..N * dims).map(|i| ((k * 31 + i * 7) % 97) as f64 * 1e-3).collect();
            Some(SensitivityMatrix::from_row_major(N, dims, data).unwrap())
        })
        .collect();
    JacobianGrid {
        dims: (0..dims).collect(),
        node_coords: vec![uniform_coords(m); dims],
        payload,
        nominal_u: vec![0.3; N],
        meta: GridMeta::default(),
    }
}

fn grid_lookup(c: &mut Criterion) {
    let mut group = c.benchmark_group("interpolate");
    for dims in [3, 7] {
        let grid = synthetic_grid(dims, if dims == 3 { 5 } else { 2 });
        let theta = vec![0.37; dims];
        group.bench_with_input(BenchmarkId::from_parameter(dims), &theta, |b, t| {
            b.iter(|| interpolate(black_box(&grid), black_box(t)).unwrap())
        });
    }
    group.finish();
}

fn replans(c: &mut Criterion) {
    let grid = synthetic_grid(3, 5);
    let u = vec![0.3; N];
    let zero = vec![0.0; 3];
    let theta = vec![0.8, -0.4, 0.6];
    let d0 = grid.payload[62].clone().unwrap();
    c.bench_function("linear_approx", |b| {
        b.iter(|| linear_approx(&u, &d0, &zero, black_box(&theta), 1.5).unwrap())
    });
    let mut group = c.benchmark_group("homotopy_grid");
    for steps in [1, 16] {
        let cfg = HomotopyConfig {
            steps,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(steps), &cfg, |b, cfg| {
            b.iter(|| homotopy_approx(&u, &zero, black_box(&theta), cfg, &grid).unwrap())
        });
    }
    group.finish();
}

fn shuttle(c: &mut Criterion) {
    let spec = shuttle_problem(&ShuttleConfig::default()).unwrap();
    let u = vec![0.3; spec.n_controls()];
    let theta = vec![0.0; spec.n_params()];
    c.bench_function("shuttle_cost", |b| {
        b.iter(|| ParametricObjective::cost(&spec, black_box(&u), &theta).unwrap())
    });
    c.bench_function("shuttle_cost_and_gradient", |b| {
        b.iter(|| spec.cost_and_gradient(black_box(&u), &theta).unwrap())
    });
    let columns: Vec<usize> = (0..spec.n_params()).collect();
    let mut group = c.benchmark_group("shuttle_hdsa");
    group.sample_size(10);
    group.bench_function("all_params", |b| {
        b.iter(|| hdsa(&spec, black_box(&u), &theta, &columns, &HdsaSettings::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, grid_lookup, replans, shuttle);
criterion_main!(benches);

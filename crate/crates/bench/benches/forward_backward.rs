use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gca_bench::{model, sequences};
use gca_core::checkpoint::to_bytes;
use gca_core::numerics::{InitScheme, ParamStore, RngStream};
use gca_core::stlstm::{lattice_forward, JointOrder, Schedule, StLstmParams};
use gca_core::Variant;

fn lattice(c: &mut Criterion) {
    let mut g = c.benchmark_group("lattice_forward");
    for d in [16, 64, 128] {
        let mut rng = RngStream::new(0);
        let mut store = ParamStore::new();
        let p = StLstmParams::new(&mut store, "l", 3, d, InitScheme::UniformScaled, &mut rng);
        let x: Vec<f64> = (0..15 * 20 * 3).map(|_| rng.normal(0.0, 1.0)).collect();
        let order = JointOrder::identity(15);
        g.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| lattice_forward(&store, &p, &x, 20, &order, None, Schedule::RowMajor).unwrap())
        });
    }
    g.finish();
}

fn variants(c: &mut Criterion) {
    let seqs = sequences(4).unwrap();
    let mut g = c.benchmark_group("loss_and_gradients");
    g.sample_size(10);
    for (name, v) in [
        ("gca", Variant::Gca),
        ("two_stream", Variant::TwoStream),
        ("baseline_global_2", Variant::BaselineGlobal2),
    ] {
        let mut m = model(v, 16, 2).unwrap();
        g.bench_function(name, |b| b.iter(|| m.compute_grads(&seqs).unwrap()));
    }
    g.finish();

    let m = model(Variant::Gca, 128, 2).unwrap();
    c.bench_function("predict_gca_d128", |b| b.iter(|| m.predict(&seqs[0]).unwrap()));
    c.bench_function("checkpoint_serialize_d128", |b| b.iter(|| to_bytes(&m).unwrap()));
}

criterion_group!(benches, lattice, variants);
criterion_main!(benches);

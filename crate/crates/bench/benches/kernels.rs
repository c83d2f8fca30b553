use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use sigspp::metrics::{eer_global, eer_user, ScoreClass};
use sigspp::nn::{conv2d_backward, conv2d_forward, ConvGeometry};
use sigspp::spp::spp_forward;
use sigspp::wd::{train_svm, Kernel, SvmConfig};
use sigspp::{Mode, PyramidSpec};
use sigspp_bench::{desk_model, score_set, svm_problem, tensor, weights};

fn conv(c: &mut Criterion) {
    let geo = ConvGeometry { kernel: 5, filters: 32, stride: 1, padding: 2 };
    let input = tensor([8, 16, 48, 64], 1);
    let w = weights(geo.weight_len(16), 2);
    let b = weights(32, 3);
    let out = conv2d_forward(&input, &geo, &w, &b).unwrap();
    let up = tensor(out.dims(), 4);
    c.bench_function("conv5x5 16->32 forward 8x48x64", |bn| {
        bn.iter(|| conv2d_forward(black_box(&input), &geo, &w, &b).unwrap())
    });
    c.bench_function("conv5x5 16->32 backward 8x48x64", |bn| {
        bn.iter(|| conv2d_backward(black_box(&input), &geo, &w, &up, true).unwrap())
    });
}

fn spp(c: &mut Criterion) {
    let spec = PyramidSpec::default();
    let mut group = c.benchmark_group("spp 128ch");
    for (h, w) in [(8, 12), (20, 40), (64, 96)] {
        let maps = tensor([8, 128, h, w], 5);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{h}x{w}")), &maps, |bn, m| {
            bn.iter(|| spp_forward(black_box(m), &spec).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let model = desk_model(10);
    let batch = tensor([8, 1, 150, 220], 6);
    c.bench_function("desk network forward 8x150x220", |bn| {
        bn.iter(|| model.forward(black_box(&batch), Mode::Eval).unwrap())
    });
}

fn svm(c: &mut Criterion) {
    let (x, y) = svm_problem(12, 180, 128, 7);
    let cfg = SvmConfig { kernel: Kernel::Rbf { gamma: 1.0 / 128.0 }, ..SvmConfig::default() };
    c.bench_function("wd svm 12+180 x 128", |bn| bn.iter(|| train_svm(black_box(&x), &y, &cfg).unwrap()));
}

fn eer(c: &mut Criterion) {
    let set = score_set(100, 50, 8);
    c.bench_function("eer global 10k", |bn| bn.iter(|| eer_global(black_box(&set), ScoreClass::Skilled).unwrap()));
    c.bench_function("eer user 100 writers", |bn| bn.iter(|| eer_user(black_box(&set), ScoreClass::Skilled).unwrap()));
}

criterion_group!(benches, conv, spp, network, svm, eer);
criterion_main!(benches);

//! Finite-difference checks in double precision. Each check draws a random
//! configuration from `seed`, uses the scalar loss `Σ out ⊙ R` for a random
//! `R` (so `R` is the upstream gradient), and returns the worst relative
//! error over the gradient blocks.

use rand::Rng;
use sigspp::nn::{
    build_architecture, conv2d_backward, conv2d_forward, glorot_init, maxpool_backward, maxpool_forward, BatchNorm,
    ConvGeometry, Dense, PoolGeometry,
};
use sigspp::spp::{spp_backward, spp_forward};
use sigspp::trainer::multitask_loss;
use sigspp::{Mode, Model, PyramidSpec, Tensor4};

use super::{distinct, dot, numeric_grad, rel_err, rng, uniform};

const EPS: f64 = 1e-6;

fn tensor(dims: [usize; 4], data: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(dims, data.to_vec()).unwrap()
}

pub fn conv(seed: u64) -> f64 {
    let mut g = rng(seed);
    let geo = ConvGeometry {
        kernel: g.random_range(1..=4),
        filters: g.random_range(1..=3),
        stride: g.random_range(1..=2),
        padding: g.random_range(0..=2),
    };
    let (n, c) = (g.random_range(1..=2), g.random_range(1..=3));
    let h = g.random_range(geo.kernel..geo.kernel + 6);
    let w = g.random_range(geo.kernel..geo.kernel + 6);
    let x = uniform(&mut g, n * c * h * w);
    let wt = uniform(&mut g, geo.weight_len(c));
    let b = uniform(&mut g, geo.filters);
    let dims = [n, c, h, w];
    let out = conv2d_forward(&tensor(dims, &x), &geo, &wt, &b).unwrap();
    let r = uniform(&mut g, out.len());
    let loss =
        |x: &[f64], wt: &[f64], b: &[f64]| dot(conv2d_forward(&tensor(dims, x), &geo, wt, b).unwrap().data(), &r);
    let an = conv2d_backward(&tensor(dims, &x), &geo, &wt, &tensor(out.dims(), &r), true).unwrap();
    let nx = numeric_grad(&x, EPS, |v| loss(v, &wt, &b));
    let nw = numeric_grad(&wt, EPS, |v| loss(&x, v, &b));
    let nb = numeric_grad(&b, EPS, |v| loss(&x, &wt, v));
    rel_err(an.input.unwrap().data(), &nx).max(rel_err(&an.weight, &nw)).max(rel_err(&an.bias, &nb))
}

pub fn maxpool(seed: u64) -> f64 {
    let mut g = rng(seed);
    let size = g.random_range(1..=3);
    let geo = PoolGeometry { size, stride: g.random_range(1..=3), padding: g.random_range(0..size) };
    let dims =
        [g.random_range(1..=2), g.random_range(1..=3), g.random_range(size..size + 6), g.random_range(size..size + 6)];
    let x = distinct(&mut g, dims.iter().product());
    let (out, argmax) = maxpool_forward(&tensor(dims, &x), &geo).unwrap();
    let r = uniform(&mut g, out.len());
    let an = maxpool_backward(&tensor(out.dims(), &r), &argmax, dims).unwrap();
    let nx = numeric_grad(&x, EPS, |v| dot(maxpool_forward(&tensor(dims, v), &geo).unwrap().0.data(), &r));
    rel_err(an.data(), &nx)
}

pub fn batchnorm(seed: u64) -> f64 {
    let mut g = rng(seed);
    let c = g.random_range(1..=3);
    let dims = [g.random_range(2..=4), c, g.random_range(1..=4), g.random_range(1..=4)];
    let x = uniform(&mut g, dims.iter().product());
    let gamma: Vec<f64> = uniform(&mut g, c).iter().map(|v| v + 1.5).collect();
    let beta = uniform(&mut g, c);
    let layer = |gamma: &[f64], beta: &[f64]| {
        let mut bn = BatchNorm::<f64>::new(c);
        bn.gamma = gamma.to_vec();
        bn.beta = beta.to_vec();
        bn
    };
    let bn = layer(&gamma, &beta);
    let (out, cache) = bn.forward_train(&tensor(dims, &x)).unwrap();
    let r = uniform(&mut g, out.len());
    let (dx, dg, db) = bn.backward(&tensor(dims, &r), &cache).unwrap();
    let loss =
        |x: &[f64], gm: &[f64], bt: &[f64]| dot(layer(gm, bt).forward_train(&tensor(dims, x)).unwrap().0.data(), &r);
    let nx = numeric_grad(&x, EPS, |v| loss(v, &gamma, &beta));
    let ng = numeric_grad(&gamma, EPS, |v| loss(&x, v, &beta));
    let nb = numeric_grad(&beta, EPS, |v| loss(&x, &gamma, v));
    rel_err(dx.data(), &nx).max(rel_err(&dg, &ng)).max(rel_err(&db, &nb))
}

pub fn dense(seed: u64) -> f64 {
    let mut g = rng(seed);
    let dims = [g.random_range(1..=4), g.random_range(1..=3), g.random_range(1..=3), g.random_range(1..=3)];
    let k = dims[1] * dims[2] * dims[3];
    let m = g.random_range(1..=5);
    let x = uniform(&mut g, dims.iter().product());
    let layer = |w: &[f64], b: &[f64]| Dense { inputs: k, units: m, weight: w.to_vec(), bias: b.to_vec() };
    let (w, b) = (uniform(&mut g, k * m), uniform(&mut g, m));
    let r = uniform(&mut g, dims[0] * m);
    let (dx, dw, db) = layer(&w, &b).backward(&tensor(dims, &x), &tensor([dims[0], m, 1, 1], &r), true).unwrap();
    let loss = |x: &[f64], w: &[f64], b: &[f64]| dot(layer(w, b).forward(&tensor(dims, x), "fc").unwrap().data(), &r);
    let nx = numeric_grad(&x, EPS, |v| loss(v, &w, &b));
    let nw = numeric_grad(&w, EPS, |v| loss(&x, v, &b));
    let nb = numeric_grad(&b, EPS, |v| loss(&x, &w, v));
    rel_err(dx.unwrap().data(), &nx).max(rel_err(&dw, &nw)).max(rel_err(&db, &nb))
}

pub fn spp(seed: u64) -> f64 {
    let mut g = rng(seed);
    let levels = if g.random_bool(0.5) { vec![4, 2, 1] } else { vec![g.random_range(1..=3), g.random_range(1..=5)] };
    let spec = PyramidSpec::new(levels).unwrap();
    let dims = [g.random_range(1..=2), g.random_range(1..=3), g.random_range(1..=12), g.random_range(1..=12)];
    let x = distinct(&mut g, dims.iter().product());
    let (out, idx) = spp_forward(&tensor(dims, &x), &spec).unwrap();
    let r = uniform(&mut g, out.len());
    let an = spp_backward(&tensor(out.dims(), &r), &idx, dims).unwrap();
    let nx = numeric_grad(&x, EPS, |v| dot(spp_forward(&tensor(dims, v), &spec).unwrap().0.data(), &r));
    rel_err(an.data(), &nx)
}

pub fn loss(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, m) = (g.random_range(1..=6), g.random_range(2..=6));
    let head = g.random_bool(0.7);
    let zu: Vec<f64> = uniform(&mut g, n * m).iter().map(|v| 3.0 * v).collect();
    let zf: Vec<f64> = uniform(&mut g, n).iter().map(|v| 3.0 * v).collect();
    let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..m)).collect();
    let forged: Vec<bool> = (0..n).map(|_| head && g.random_bool(0.4)).collect();
    let lambda = head.then(|| g.random_range(0.0..=1.0));
    let total = |zu: &[f64], zf: &[f64]| {
        let f = tensor([n, 1, 1, 1], zf);
        multitask_loss(&tensor([n, m, 1, 1], zu), head.then_some(&f), &labels, &forged, lambda).unwrap().breakdown.total
    };
    let f = tensor([n, 1, 1, 1], &zf);
    let out = multitask_loss(&tensor([n, m, 1, 1], &zu), head.then_some(&f), &labels, &forged, lambda).unwrap();
    let nu = numeric_grad(&zu, EPS, |v| total(v, &zf));
    let mut err = rel_err(out.d_user.data(), &nu);
    if head {
        let nf = numeric_grad(&zf, EPS, |v| total(&zu, v));
        err = err.max(rel_err(out.d_forgery.unwrap().data(), &nf));
    }
    err
}

/// Relative error, except that a block whose analytic gradient vanishes
/// (a bias feeding batch norm) passes when the numeric one is below 1e-6.
fn block_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm(analytic) < 1e-12 {
        if norm(numeric) < 1e-6 {
            0.0
        } else {
            1.0
        }
    } else {
        rel_err(analytic, numeric)
    }
}

/// Whole desk network, training mode, on a random subset of each parameter
/// block and of the input.
pub fn network(seed: u64) -> f64 {
    let mut g = rng(seed);
    let head = g.random_bool(0.5);
    let users = 3;
    let spec = build_architecture("SigNet-SPP-desk", None, users, head).unwrap();
    let model: Model<f64> = glorot_init(spec, seed).unwrap();
    let dims = [3, 1, g.random_range(20..=28), g.random_range(20..=36)];
    let x = uniform(&mut g, dims.iter().product());
    let labels: Vec<usize> = (0..3).map(|i| i % users).collect();
    let forged: Vec<bool> = (0..3).map(|i| head && i == 1).collect();
    let lambda = head.then_some(0.4);
    let loss_of = |m: &Model<f64>, x: &[f64]| {
        let fwd = m.forward(&tensor(dims, x), Mode::Train).unwrap();
        multitask_loss(&fwd.user_logits, fwd.forgery_logits.as_ref(), &labels, &forged, lambda).unwrap()
    };
    let fwd = model.forward(&tensor(dims, &x), Mode::Train).unwrap();
    let out = multitask_loss(&fwd.user_logits, fwd.forgery_logits.as_ref(), &labels, &forged, lambda).unwrap();
    let grads = model.backward(&fwd, &out.d_user, out.d_forgery.as_ref(), true).unwrap();

    let mut worst = 0.0f64;
    let blocks = model.param_shapes();
    for (b, &len) in blocks.iter().enumerate() {
        let picks: Vec<usize> = (0..len.min(12)).map(|_| g.random_range(0..len)).collect();
        let analytic: Vec<f64> = picks.iter().map(|&i| grads.blocks[b][i]).collect();
        let numeric: Vec<f64> = picks
            .iter()
            .map(|&i| {
                let mut m = model.clone();
                let eval = |m: &mut Model<f64>, delta: f64| {
                    m.params_mut()[b].values[i] += delta;
                    let l = loss_of(m, &x).breakdown.total;
                    m.params_mut()[b].values[i] -= delta;
                    l
                };
                (eval(&mut m, EPS) - eval(&mut m, -EPS)) / (2.0 * EPS)
            })
            .collect();
        worst = worst.max(block_err(&analytic, &numeric));
    }
    let picks: Vec<usize> = (0..12).map(|_| g.random_range(0..x.len())).collect();
    let analytic: Vec<f64> = picks.iter().map(|&i| grads.input.as_ref().unwrap().data()[i]).collect();
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&i| {
            let mut v = x.clone();
            v[i] += EPS;
            let up = loss_of(&model, &v).breakdown.total;
            v[i] -= 2.0 * EPS;
            (up - loss_of(&model, &v).breakdown.total) / (2.0 * EPS)
        })
        .collect();
    worst.max(rel_err(&analytic, &numeric))
}

pub type Check = fn(u64) -> f64;

pub const CHECKS: &[(&str, Check)] = &[
    ("conv", conv),
    ("maxpool", maxpool),
    ("batchnorm", batchnorm),
    ("fc", dense),
    ("spp", spp),
    ("loss", loss),
    ("network", network),
];

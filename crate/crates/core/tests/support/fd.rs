//! Central-difference checks of the hand-written gradients.
#![allow(dead_code)]

use limix_core::nn::{Activation, Dense, DenseGrad};
use limix_core::seed::{self, Rng};
use limix_core::vae::{self, ClassifierView, VaeView};
use ndarray::Array2;
use rand::Rng as _;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-7;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Largest relative error between `grads` and central differences of `f`
/// over every weight and bias of `layers`.
pub fn worst_error(layers: &mut [Dense], grads: &[DenseGrad], f: &dyn Fn(&[Dense]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for l in 0..layers.len() {
        for idx in 0..layers[l].w.len() {
            let (r, c) = (idx / layers[l].w.ncols(), idx % layers[l].w.ncols());
            let orig = layers[l].w[[r, c]];
            layers[l].w[[r, c]] = orig + H;
            let up = f(layers);
            layers[l].w[[r, c]] = orig - H;
            let down = f(layers);
            layers[l].w[[r, c]] = orig;
            worst = worst.max(rel_err(grads[l].w[[r, c]], (up - down) / (2.0 * H)));
        }
        for i in 0..layers[l].b.len() {
            let orig = layers[l].b[i];
            layers[l].b[i] = orig + H;
            let up = f(layers);
            layers[l].b[i] = orig - H;
            let down = f(layers);
            layers[l].b[i] = orig;
            worst = worst.max(rel_err(grads[l].b[i], (up - down) / (2.0 * H)));
        }
    }
    worst
}

pub fn matrix(rng: &mut Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.5..1.5))
}

fn one_hot(labels: &[usize], c: usize) -> Array2<f64> {
    vae::one_hot(labels, c).unwrap()
}

struct Dims {
    d_x: usize,
    d_cond: usize,
    hidden: usize,
    d_z: usize,
}

const DIMS: Dims = Dims {
    d_x: 3,
    d_cond: 2,
    hidden: 5,
    d_z: 2,
};

fn vae_layers(d: &Dims, d_cond: usize, rng: &mut Rng) -> Vec<Dense> {
    vec![
        Dense::random(d.d_x + d_cond, d.hidden, Activation::Tanh, rng),
        Dense::random(d.hidden, 2 * d.d_z, Activation::Identity, rng),
        Dense::random(d.d_z + d_cond, d.hidden, Activation::Tanh, rng),
        Dense::random(d.hidden, d.d_x, Activation::Identity, rng),
    ]
}

fn view(l: &[Dense]) -> VaeView<'_> {
    VaeView {
        enc_in: &l[0],
        enc_head: &l[1],
        dec_trunk: &l[2],
        dec_out: &l[3],
    }
}

pub fn check_vae(draw: u64, conditional: bool) -> f64 {
    let mut rng = seed::rng(draw);
    let d_cond = if conditional { DIMS.d_cond } else { 0 };
    let mut layers = vae_layers(&DIMS, d_cond, &mut rng);
    let b = 6;
    let x = matrix(&mut rng, b, DIMS.d_x);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..DIMS.d_cond)).collect();
    let cond = one_hot(&labels, DIMS.d_cond);
    let noise = vae::draw_noise(&mut rng, 2, b, DIMS.d_z);
    let eval = |l: &[Dense], grad: bool| {
        if conditional {
            vae::conditional_generator_objective(view(l), x.view(), cond.view(), &noise, grad).unwrap()
        } else {
            vae::elbo(view(l), x.view(), None, &noise, grad).unwrap()
        }
    };
    let g = eval(&layers, true).1.unwrap();
    let grads = [g.enc_in, g.enc_head, g.dec_trunk, g.dec_out];
    worst_error(&mut layers, &grads, &|l| eval(l, false).0.report.total)
}

pub fn check_classifier(draw: u64) -> f64 {
    let mut rng = seed::rng(draw);
    let n_classes = DIMS.d_cond;
    let mut layers = vae_layers(&DIMS, n_classes, &mut rng);
    layers.truncate(2);
    layers.push(Dense::random(DIMS.d_x + DIMS.d_z, DIMS.hidden, Activation::Tanh, &mut rng));
    layers.push(Dense::random(DIMS.hidden, n_classes, Activation::Identity, &mut rng));
    let b = 6;
    let x = matrix(&mut rng, b, DIMS.d_x);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n_classes)).collect();
    let cond = one_hot(&labels, n_classes);
    let noise = vae::draw_noise(&mut rng, 2, b, DIMS.d_z);
    let eval = |l: &[Dense], grad: bool| {
        let cls = ClassifierView { hidden: &l[2], out: &l[3] };
        vae::classifier_objective(&l[0], &l[1], cls, x.view(), cond.view(), &labels, &noise, grad).unwrap()
    };
    let g = eval(&layers, true).1.unwrap();
    let grads = [g.enc_in, g.enc_head, g.hidden, g.out];
    worst_error(&mut layers, &grads, &|l| eval(l, false).0.report.total)
}


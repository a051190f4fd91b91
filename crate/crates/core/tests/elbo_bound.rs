//! With a linear decoder and unit observation noise the marginal likelihood
//! is Gaussian, `x ~ N(c, A A^T + I)`, and the ELBO has a closed form.

use std::f64::consts::PI;

use limix_core::nn::{Activation, Dense};
use limix_core::seed;
use limix_core::vae::{self, VaeView};
use ndarray::{Array2, Axis};
use rand::Rng as _;

fn cholesky(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                l[[i, i]] = (m[[i, i]] - s).sqrt();
            } else {
                l[[i, j]] = (m[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    l
}

fn gaussian_log_density(x: &[f64], mean: &[f64], cov: &Array2<f64>) -> f64 {
    let l = cholesky(cov);
    let n = x.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
        y[i] = (x[i] - mean[i] - s) / l[[i, i]];
    }
    let log_det: f64 = (0..n).map(|i| 2.0 * l[[i, i]].ln()).sum();
    -0.5 * (y.iter().map(|v| v * v).sum::<f64>() + log_det + n as f64 * (2.0 * PI).ln())
}

struct Instance {
    layers: [Dense; 4],
    x: Array2<f64>,
}

fn instance(i: u64) -> Instance {
    let mut rng = seed::rng(1000 + i);
    let (d_x, hidden, d_z) = (3, 4, 2);
    let mut trunk = Dense::random(d_z, hidden, Activation::Tanh, &mut rng);
    trunk.act = Activation::Identity;
    trunk.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let layers = [
        Dense::random(d_x, hidden, Activation::Tanh, &mut rng),
        Dense::random(hidden, 2 * d_z, Activation::Identity, &mut rng),
        trunk,
        Dense::random(hidden, d_x, Activation::Identity, &mut rng),
    ];
    let x = Array2::from_shape_simple_fn((4, d_x), || rng.random_range(-2.0..2.0));
    Instance { layers, x }
}

impl Instance {
    fn view(&self) -> VaeView<'_> {
        VaeView {
            enc_in: &self.layers[0],
            enc_head: &self.layers[1],
            dec_trunk: &self.layers[2],
            dec_out: &self.layers[3],
        }
    }

    /// `x_hat = A z + c`.
    fn affine(&self) -> (Array2<f64>, Vec<f64>) {
        let (t, o) = (&self.layers[2], &self.layers[3]);
        let a = o.w.dot(&t.w);
        let c = o.w.dot(&t.b) + &o.b;
        (a, c.to_vec())
    }

    fn log_p(&self, row: usize) -> f64 {
        let (a, c) = self.affine();
        let cov = a.dot(&a.t()) + Array2::<f64>::eye(a.nrows());
        gaussian_log_density(&self.x.row(row).to_vec(), &c, &cov)
    }

    fn closed_form_elbo(&self, row: usize) -> f64 {
        let (a, c) = self.affine();
        let (mu, lv) = vae::encode_posterior(&self.layers[0], &self.layers[1], self.x.view(), None).unwrap();
        let (mu, lv) = (mu.row(row).to_vec(), lv.row(row).to_vec());
        let x = self.x.row(row);
        let d_x = x.len() as f64;
        let mut sq = 0.0;
        for i in 0..a.nrows() {
            let m: f64 = c[i] + (0..mu.len()).map(|k| a[[i, k]] * mu[k]).sum::<f64>();
            sq += (x[i] - m).powi(2);
            sq += (0..mu.len()).map(|k| a[[i, k]].powi(2) * lv[k].exp()).sum::<f64>();
        }
        -0.5 * sq - 0.5 * d_x * (2.0 * PI).ln() - vae::kl_to_standard(&mu, &lv)
    }
}

#[test]
fn closed_form_elbo_never_exceeds_log_likelihood() {
    for i in 0..100 {
        let inst = instance(i);
        for row in 0..inst.x.nrows() {
            let (e, lp) = (inst.closed_form_elbo(row), inst.log_p(row));
            assert!(e <= lp + 1e-12, "instance {i} row {row}: elbo {e} > log p {lp}");
        }
    }
}

#[test]
fn monte_carlo_elbo_matches_closed_form() {
    for i in 0..100 {
        let inst = instance(i);
        let noise = vae::draw_noise(&mut seed::rng(i), 400, inst.x.nrows(), 2);
        let (loss, _) = vae::elbo(inst.view(), inst.x.view(), None, &noise, false).unwrap();
        for row in 0..inst.x.nrows() {
            let want = inst.closed_form_elbo(row);
            let got = loss.per_sample[row];
            // Per-draw spread of the reconstruction term, from the same noise.
            let draws: Vec<f64> = noise
                .iter()
                .map(|eps| {
                    let one = [eps.clone()];
                    vae::elbo(inst.view(), inst.x.view(), None, &one, false).unwrap().0.per_sample[row]
                })
                .collect();
            let m = draws.iter().sum::<f64>() / draws.len() as f64;
            let sd = (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt();
            let se = sd / (draws.len() as f64).sqrt();
            assert!((got - want).abs() <= 4.0 * se + 1e-9, "instance {i} row {row}: {got} vs {want} (se {se})");
            assert!(got <= inst.log_p(row) + 4.0 * se, "instance {i} row {row} exceeds log p");
        }
    }
}

#[test]
fn mean_of_rows_is_the_report_total() {
    let inst = instance(0);
    let noise = vae::draw_noise(&mut seed::rng(0), 3, inst.x.nrows(), 2);
    let (loss, _) = vae::elbo(inst.view(), inst.x.view(), None, &noise, false).unwrap();
    let mean = ndarray::Array1::from(loss.per_sample.clone()).mean_axis(Axis(0)).unwrap()[()];
    assert!((mean - loss.report.total).abs() < 1e-12);
}

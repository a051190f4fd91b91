//! Variational objectives with reparameterised gradients.
//!
//! Three objectives share one encoder `q(z | x, c) = N(mu, diag exp(lv))`:
//!
//! - the unconditional ELBO `E_q[log N(x; g(z), I)] - KL(q || N(0, I))`,
//! - the conditional generator bound, identical but with a one-hot
//!   condition `c` fed to both encoder and decoder,
//! - the classifier bound `E_q[log p(y | x, z)] - KL(q || N(0, I))` where
//!   the encoder is conditioned on the one-hot label.
//!
//! All objectives are averaged over the batch and maximised. The caller
//! supplies the reparameterisation noise, so a forward evaluation and its
//! gradient always see the same draws.

use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Dense, DenseGrad};
use crate::seed;
use crate::task_streams::Sample;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

/// Closed-form `KL(N(mean, diag exp(log_var)) || N(0, I))`.
pub fn kl_to_standard(mean: &[f64], log_var: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .map(|(m, lv)| {
            let lv = lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Self { mean, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn kl(&self) -> f64 {
        kl_to_standard(&self.mean, &self.log_var)
    }
}

/// Batch means of the objective and its terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    /// `E_q[log p(x | z)]`, zero for the classifier objective.
    pub recon_term: f64,
    pub kl_term: f64,
    /// `E_q[log p(y | x, z)]`, classifier objective only.
    pub class_term: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub report: LossReport,
    /// Objective value of each row.
    pub per_sample: Vec<f64>,
}

/// Borrowed encoder/decoder layers of one VAE. In the mixture some of these
/// layers are shared between components.
#[derive(Debug, Clone, Copy)]
pub struct VaeView<'a> {
    /// `[x | c] -> hidden`, tanh.
    pub enc_in: &'a Dense,
    /// `hidden -> [mu | log_var]`.
    pub enc_head: &'a Dense,
    /// `[z | c] -> hidden`, tanh.
    pub dec_trunk: &'a Dense,
    /// `hidden -> x`.
    pub dec_out: &'a Dense,
}

impl VaeView<'_> {
    pub fn d_x(&self) -> usize {
        self.dec_out.n_out()
    }

    pub fn d_z(&self) -> usize {
        self.enc_head.n_out() / 2
    }

    pub fn d_cond(&self) -> usize {
        self.dec_trunk.n_in() - self.d_z()
    }
}

/// `p(y | x, z)`: `[x | z] -> hidden -> logits`.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierView<'a> {
    pub hidden: &'a Dense,
    pub out: &'a Dense,
}

impl ClassifierView<'_> {
    pub fn n_classes(&self) -> usize {
        self.out.n_out()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads {
    pub enc_in: DenseGrad,
    pub enc_head: DenseGrad,
    pub dec_trunk: DenseGrad,
    pub dec_out: DenseGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrads {
    pub enc_in: DenseGrad,
    pub enc_head: DenseGrad,
    pub hidden: DenseGrad,
    pub out: DenseGrad,
}

/// `n_mc` standard-normal matrices of shape `(batch, d_z)`.
pub fn draw_noise(rng: &mut seed::Rng, n_mc: usize, batch: usize, d_z: usize) -> Vec<Array2<f64>> {
    (0..n_mc)
        .map(|_| Array2::from_shape_simple_fn((batch, d_z), || rng.sample(StandardNormal)))
        .collect()
}

pub fn one_hot(labels: &[usize], n: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), n));
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::input(format!("label {y} out of range for {n} classes")));
        }
        out[[i, y]] = 1.0;
    }
    Ok(out)
}

/// Feature matrix of a sample list.
pub fn features(samples: &[Sample]) -> Result<Array2<f64>> {
    let d = samples.first().map_or(0, Sample::dim);
    let mut out = Array2::zeros((samples.len(), d));
    for (i, s) in samples.iter().enumerate() {
        if s.dim() != d {
            return Err(Error::Shape {
                context: "sample features".into(),
                expected: d,
                got: s.dim(),
            });
        }
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&s.features[..]));
    }
    Ok(out)
}

pub fn labels(samples: &[Sample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::input("sample has no label")))
        .collect()
}

fn hcat(a: ArrayView2<f64>, b: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
    match b {
        None => Ok(a.to_owned()),
        Some(b) if b.ncols() == 0 => Ok(a.to_owned()),
        Some(b) => {
            if a.nrows() != b.nrows() {
                return Err(Error::Shape {
                    context: "condition rows".into(),
                    expected: a.nrows(),
                    got: b.nrows(),
                });
            }
            concatenate(Axis(1), &[a, b]).map_err(|e| Error::input(e.to_string()))
        }
    }
}

fn check(tensor: &str, a: &Array2<f64>) -> Result<()> {
    Error::check_finite(tensor, a.iter().copied())
}

struct EncodePass {
    u: Array2<f64>,
    h: Array2<f64>,
    mu: Array2<f64>,
    lv: Array2<f64>,
    /// 1 where the raw log-variance is inside the clamp, else 0.
    lv_mask: Array2<f64>,
}

fn encode(enc_in: &Dense, enc_head: &Dense, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<EncodePass> {
    let u = hcat(x, cond)?;
    let h = enc_in.forward(u.view())?;
    let o = enc_head.forward(h.view())?;
    let dz = o.ncols() / 2;
    let mu = o.slice(s![.., ..dz]).to_owned();
    let raw = o.slice(s![.., dz..]);
    check("encoder mean", &mu)?;
    let lv = raw.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
    check("encoder log-variance", &lv)?;
    let lv_mask = raw.mapv(|v| if v > LOG_VAR_MIN && v < LOG_VAR_MAX { 1.0 } else { 0.0 });
    Ok(EncodePass { u, h, mu, lv, lv_mask })
}

impl EncodePass {
    fn kl_per_row(&self) -> Array1<f64> {
        self.mu
            .rows()
            .into_iter()
            .zip(self.lv.rows())
            .map(|(m, lv)| {
                m.iter()
                    .zip(lv.iter())
                    .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
                    .sum()
            })
            .collect()
    }

    fn reparam(&self, eps: &Array2<f64>) -> Array2<f64> {
        let mut z = self.lv.mapv(|lv| (0.5 * lv).exp());
        z *= eps;
        z += &self.mu;
        z
    }

    /// Adds the gradient of `-mean_b KL_b` to `(g_mu, g_lv)`.
    fn add_kl_grad(&self, g_mu: &mut Array2<f64>, g_lv: &mut Array2<f64>) {
        let inv_b = 1.0 / self.mu.nrows() as f64;
        g_mu.scaled_add(-inv_b, &self.mu);
        g_lv.zip_mut_with(&self.lv, |g, &lv| *g -= inv_b * 0.5 * (lv.exp() - 1.0));
    }

    /// Adds the pathwise gradient for `z = mu + exp(lv/2) eps`.
    fn add_reparam_grad(&self, g_z: ArrayView2<f64>, eps: &Array2<f64>, g_mu: &mut Array2<f64>, g_lv: &mut Array2<f64>) {
        *g_mu += &g_z;
        ndarray::Zip::from(g_lv)
            .and(&g_z)
            .and(eps)
            .and(&self.lv)
            .for_each(|g, &gz, &e, &lv| *g += gz * e * 0.5 * (0.5 * lv).exp());
    }

    fn backward(&self, enc_in: &Dense, enc_head: &Dense, g_mu: Array2<f64>, mut g_lv: Array2<f64>) -> (DenseGrad, DenseGrad) {
        g_lv *= &self.lv_mask;
        let g_o = concatenate(Axis(1), &[g_mu.view(), g_lv.view()]).expect("matching rows");
        let o = concatenate(Axis(1), &[self.mu.view(), self.lv.view()]).expect("matching rows");
        let (g_head, g_h) = enc_head.backward(self.h.view(), o.view(), g_o.view());
        let (g_in, _) = enc_in.backward(self.u.view(), self.h.view(), g_h.view());
        (g_in, g_head)
    }
}

fn check_noise(noise: &[Array2<f64>], batch: usize, d_z: usize) -> Result<()> {
    if noise.is_empty() {
        return Err(Error::input("at least one Monte-Carlo draw is required"));
    }
    for e in noise {
        if e.dim() != (batch, d_z) {
            return Err(Error::Shape {
                context: "reparameterisation noise".into(),
                expected: batch * d_z,
                got: e.len(),
            });
        }
    }
    Ok(())
}

/// Unconditional (`cond = None`) or conditional ELBO.
pub fn elbo(
    vae: VaeView<'_>,
    x: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
    noise: &[Array2<f64>],
    want_grad: bool,
) -> Result<(BatchLoss, Option<VaeGrads>)> {
    let b = x.nrows();
    let d_x = vae.d_x();
    if x.ncols() != d_x {
        return Err(Error::Shape {
            context: "elbo input".into(),
            expected: d_x,
            got: x.ncols(),
        });
    }
    check_noise(noise, b, vae.d_z())?;
    let pass = encode(vae.enc_in, vae.enc_head, x, cond)?;
    let kl = pass.kl_per_row();
    let m = noise.len() as f64;
    let mut recon = Array1::<f64>::zeros(b);
    let mut g_mu = Array2::zeros(pass.mu.raw_dim());
    let mut g_lv = Array2::zeros(pass.lv.raw_dim());
    let mut g_trunk = DenseGrad::zeros_like(vae.dec_trunk);
    let mut g_out = DenseGrad::zeros_like(vae.dec_out);
    let const_term = d_x as f64 * half_ln_2pi();
    for eps in noise {
        let z = pass.reparam(eps);
        let v = hcat(z.view(), cond)?;
        let h = vae.dec_trunk.forward(v.view())?;
        let xhat = vae.dec_out.forward(h.view())?;
        check("decoder mean", &xhat)?;
        let err = &x - &xhat;
        for (i, row) in err.rows().into_iter().enumerate() {
            recon[i] += (-0.5 * row.dot(&row) - const_term) / m;
        }
        if want_grad {
            let g_xhat = &err * (1.0 / (b as f64 * m));
            let (go, g_h) = vae.dec_out.backward(h.view(), xhat.view(), g_xhat.view());
            let (gt, g_v) = vae.dec_trunk.backward(v.view(), h.view(), g_h.view());
            g_out.add_assign(&go);
            g_trunk.add_assign(&gt);
            let dz = z.ncols();
            pass.add_reparam_grad(g_v.slice(s![.., ..dz]), eps, &mut g_mu, &mut g_lv);
        }
    }
    let per_sample: Vec<f64> = recon.iter().zip(kl.iter()).map(|(r, k)| r - k).collect();
    let report = LossReport {
        total: per_sample.iter().sum::<f64>() / b as f64,
        recon_term: recon.mean().unwrap_or(0.0),
        kl_term: kl.mean().unwrap_or(0.0),
        class_term: None,
    };
    Error::check_finite("elbo", [report.total])?;
    let grads = if want_grad {
        pass.add_kl_grad(&mut g_mu, &mut g_lv);
        let (enc_in, enc_head) = pass.backward(vae.enc_in, vae.enc_head, g_mu, g_lv);
        Some(VaeGrads {
            enc_in,
            enc_head,
            dec_trunk: g_trunk,
            dec_out: g_out,
        })
    } else {
        None
    };
    Ok((BatchLoss { report, per_sample }, grads))
}

/// Generator bound conditioned on `cond` (one-hot labels, optionally with
/// extra conditioning columns appended).
pub fn conditional_generator_objective(
    vae: VaeView<'_>,
    x: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    noise: &[Array2<f64>],
    want_grad: bool,
) -> Result<(BatchLoss, Option<VaeGrads>)> {
    elbo(vae, x, Some(cond), noise, want_grad)
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Classifier bound. `cond` is the encoder's conditioning (one-hot label,
/// possibly with extra columns); `labels` are the softmax targets.
pub fn classifier_objective(
    enc_in: &Dense,
    enc_head: &Dense,
    cls: ClassifierView<'_>,
    x: ArrayView2<f64>,
    cond: ArrayView2<f64>,
    labels: &[usize],
    noise: &[Array2<f64>],
    want_grad: bool,
) -> Result<(BatchLoss, Option<ClassifierGrads>)> {
    let b = x.nrows();
    let n_classes = cls.n_classes();
    if labels.len() != b {
        return Err(Error::Shape {
            context: "classifier labels".into(),
            expected: b,
            got: labels.len(),
        });
    }
    let targets = one_hot(labels, n_classes)?;
    let d_z = enc_head.n_out() / 2;
    check_noise(noise, b, d_z)?;
    let pass = encode(enc_in, enc_head, x, Some(cond))?;
    let kl = pass.kl_per_row();
    let m = noise.len() as f64;
    let mut class_ll = Array1::<f64>::zeros(b);
    let mut g_mu = Array2::zeros(pass.mu.raw_dim());
    let mut g_lv = Array2::zeros(pass.lv.raw_dim());
    let mut g_hidden = DenseGrad::zeros_like(cls.hidden);
    let mut g_outl = DenseGrad::zeros_like(cls.out);
    for eps in noise {
        let z = pass.reparam(eps);
        let inp = hcat(x, Some(z.view()))?;
        let h = cls.hidden.forward(inp.view())?;
        let logits = cls.out.forward(h.view())?;
        check("classifier logits", &logits)?;
        let logp = log_softmax_rows(&logits);
        for (i, &y) in labels.iter().enumerate() {
            class_ll[i] += logp[[i, y]] / m;
        }
        if want_grad {
            let probs = logp.mapv(f64::exp);
            let g_logits = (&targets - &probs) * (1.0 / (b as f64 * m));
            let (go, g_h) = cls.out.backward(h.view(), logits.view(), g_logits.view());
            let (gh, g_inp) = cls.hidden.backward(inp.view(), h.view(), g_h.view());
            g_outl.add_assign(&go);
            g_hidden.add_assign(&gh);
            let dx = x.ncols();
            pass.add_reparam_grad(g_inp.slice(s![.., dx..]), eps, &mut g_mu, &mut g_lv);
        }
    }
    let per_sample: Vec<f64> = class_ll.iter().zip(kl.iter()).map(|(c, k)| c - k).collect();
    let class_term = class_ll.mean().unwrap_or(0.0);
    let report = LossReport {
        total: per_sample.iter().sum::<f64>() / b as f64,
        recon_term: 0.0,
        kl_term: kl.mean().unwrap_or(0.0),
        class_term: Some(class_term),
    };
    Error::check_finite("classifier objective", [report.total])?;
    let grads = if want_grad {
        pass.add_kl_grad(&mut g_mu, &mut g_lv);
        let (gi, gh) = pass.backward(enc_in, enc_head, g_mu, g_lv);
        Some(ClassifierGrads {
            enc_in: gi,
            enc_head: gh,
            hidden: g_hidden,
            out: g_outl,
        })
    } else {
        None
    };
    Ok((BatchLoss { report, per_sample }, grads))
}

/// Posterior parameters for each row.
pub fn encode_posterior(
    enc_in: &Dense,
    enc_head: &Dense,
    x: ArrayView2<f64>,
    cond: Option<ArrayView2<f64>>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let pass = encode(enc_in, enc_head, x, cond)?;
    Ok((pass.mu, pass.lv))
}

/// Decoder mean `g(z, c)`.
pub fn decode(dec_trunk: &Dense, dec_out: &Dense, z: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
    let v = hcat(z, cond)?;
    let h = dec_trunk.forward(v.view())?;
    let xhat = dec_out.forward(h.view())?;
    check("decoder mean", &xhat)?;
    Ok(xhat)
}

/// Encode to the posterior mean and decode back.
pub fn reconstruct_mean(vae: VaeView<'_>, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
    let (mu, _) = encode_posterior(vae.enc_in, vae.enc_head, x, cond)?;
    decode(vae.dec_trunk, vae.dec_out, mu.view(), cond)
}

/// Class probabilities `p(y | x, z)` for one latent draw per row.
pub fn classify(cls: ClassifierView<'_>, x: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<Array2<f64>> {
    let inp = hcat(x, Some(z))?;
    let h = cls.hidden.forward(inp.view())?;
    let logits = cls.out.forward(h.view())?;
    check("classifier logits", &logits)?;
    Ok(log_softmax_rows(&logits).mapv(f64::exp))
}

/// `p(y | x) ~ mean_m p(y | x, z_m)` with `z_m ~ N(0, I)` supplied in
/// `noise`.
pub fn predict_proba(cls: ClassifierView<'_>, x: ArrayView2<f64>, noise: &[Array2<f64>]) -> Result<Array2<f64>> {
    let mut acc = Array2::zeros((x.nrows(), cls.n_classes()));
    for z in noise {
        acc += &classify(cls, x, z.view())?;
    }
    Ok(acc / noise.len().max(1) as f64)
}

pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Replay draw: `z ~ N(0, I)`, `x = g(z, onehot(label))`. The label is
/// attached to the sample when given.
pub fn sample_generator(
    vae: VaeView<'_>,
    n: usize,
    label: Option<usize>,
    rng: &mut seed::Rng,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::input("sample_generator needs n >= 1"));
    }
    let z = draw_noise(rng, 1, n, vae.d_z()).pop().expect("one draw");
    let cond = match label {
        Some(y) => Some(one_hot(&vec![y; n], vae.d_cond())?),
        None if vae.d_cond() > 0 => {
            return Err(Error::input("conditional decoder needs a label"));
        }
        None => None,
    };
    let x = decode(vae.dec_trunk, vae.dec_out, z.view(), cond.as_ref().map(|c| c.view()))?;
    Ok(x.rows()
        .into_iter()
        .map(|r| Sample::new(r.to_vec(), label))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;

    struct Net {
        enc_in: Dense,
        enc_head: Dense,
        dec_trunk: Dense,
        dec_out: Dense,
    }

    impl Net {
        fn view(&self) -> VaeView<'_> {
            VaeView {
                enc_in: &self.enc_in,
                enc_head: &self.enc_head,
                dec_trunk: &self.dec_trunk,
                dec_out: &self.dec_out,
            }
        }
    }

    /// 1-d identity-ish network whose encoder emits `N(mu, exp(lv))`
    /// independent of x, and whose decoder returns a constant.
    fn constant_net(mu: f64, lv: f64, out: f64) -> Net {
        let mut enc_head = Dense::zeros(1, 2, Activation::Identity);
        enc_head.b = array![mu, lv];
        let mut dec_out = Dense::zeros(1, 1, Activation::Identity);
        dec_out.b = array![out];
        Net {
            enc_in: Dense::zeros(1, 1, Activation::Tanh),
            enc_head,
            dec_trunk: Dense::zeros(1, 1, Activation::Tanh),
            dec_out,
        }
    }

    #[test]
    fn kl_of_prior_is_zero() {
        let net = constant_net(0.0, 0.0, 0.0);
        let noise = draw_noise(&mut seed::rng(0), 4, 3, 1);
        let x = array![[0.1], [0.2], [0.3]];
        let (loss, _) = elbo(net.view(), x.view(), None, &noise, false).unwrap();
        assert_eq!(loss.report.kl_term, 0.0);
    }

    #[test]
    fn kl_closed_form_unit_mean() {
        let net = constant_net(1.0, 0.0, 0.0);
        let noise = draw_noise(&mut seed::rng(0), 1, 1, 1);
        let (loss, _) = elbo(net.view(), array![[0.0]].view(), None, &noise, false).unwrap();
        assert!((loss.report.kl_term - 0.5).abs() < 1e-15);
        assert!((GaussianPosterior::new(vec![1.0], vec![0.0]).kl() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_reconstruction_gives_gaussian_mode() {
        let net = constant_net(0.0, 0.0, 0.7);
        let noise = draw_noise(&mut seed::rng(1), 3, 1, 1);
        let (loss, _) = elbo(net.view(), array![[0.7]].view(), None, &noise, false).unwrap();
        assert!((loss.report.recon_term + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn log_variance_is_clamped() {
        let p = GaussianPosterior::new(vec![0.0], vec![50.0]);
        assert_eq!(p.log_var, vec![LOG_VAR_MAX]);
        let net = constant_net(0.0, -40.0, 0.0);
        let noise = draw_noise(&mut seed::rng(1), 1, 1, 1);
        let (loss, g) = elbo(net.view(), array![[0.0]].view(), None, &noise, true).unwrap();
        assert!(loss.report.kl_term.is_finite());
        // Raw log-variance outside the clamp receives no gradient.
        assert_eq!(g.unwrap().enc_head.b[1], 0.0);
    }

    #[test]
    fn uniform_classifier_gives_minus_ln_c() {
        let enc_in = Dense::zeros(1 + 3, 2, Activation::Tanh);
        let enc_head = Dense::zeros(2, 2, Activation::Identity);
        let hidden = Dense::zeros(2, 4, Activation::Tanh);
        let out = Dense::zeros(4, 3, Activation::Identity);
        let cls = ClassifierView { hidden: &hidden, out: &out };
        let x = array![[0.5], [-1.0]];
        let cond = one_hot(&[0, 2], 3).unwrap();
        let noise = draw_noise(&mut seed::rng(2), 2, 2, 1);
        let (loss, _) = classifier_objective(&enc_in, &enc_head, cls, x.view(), cond.view(), &[0, 2], &noise, false).unwrap();
        assert!((loss.report.class_term.unwrap() + 3f64.ln()).abs() < 1e-12);
        assert_eq!(loss.report.kl_term, 0.0);
        assert!((loss.report.total - loss.report.class_term.unwrap()).abs() < 1e-15);
        let err = classifier_objective(&enc_in, &enc_head, cls, x.view(), cond.view(), &[0, 3], &noise, false);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn zero_decoder_generates_its_bias() {
        let mut net = constant_net(0.0, 0.0, 0.0);
        net.dec_out = Dense::zeros(1, 2, Activation::Identity);
        net.dec_out.b = array![1.5, -2.0];
        let xs = sample_generator(net.view(), 5, None, &mut seed::rng(3)).unwrap();
        assert!(xs.iter().all(|s| s.features == vec![1.5, -2.0] && s.label.is_none()));
        assert!(sample_generator(net.view(), 0, None, &mut seed::rng(3)).is_err());
    }

    #[test]
    fn non_finite_input_names_the_tensor() {
        let net = constant_net(0.0, 0.0, 0.0);
        let mut n = Net {
            enc_in: Dense::zeros(1, 1, Activation::Tanh),
            ..net
        };
        n.enc_head.w = array![[f64::NAN], [0.0]];
        let noise = draw_noise(&mut seed::rng(0), 1, 1, 1);
        match elbo(n.view(), array![[1.0]].view(), None, &noise, false) {
            Err(Error::Numerical { tensor }) => assert_eq!(tensor, "encoder mean"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! An owned conditional VAE with an optional classifier head, plus the
//! mini-batch trainer shared by the mixture components and the replay
//! baseline.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamState, Dense, ParamSet};
use crate::seed::{self, Rng};
use crate::vae::{self, ClassifierView, VaeView};

/// Layer widths of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub d_x: usize,
    /// Width of the conditioning vector fed to encoder and decoder.
    pub d_cond: usize,
    pub hidden: usize,
    pub d_z: usize,
    pub n_classes: Option<usize>,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.hidden == 0 || self.d_z == 0 {
            return Err(Error::config("d_x, hidden and d_z must be positive"));
        }
        if self.n_classes == Some(0) {
            return Err(Error::config("n_classes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub hidden: Dense,
    pub out: Dense,
}

impl ClassifierHead {
    pub fn random(arch: &Arch, n_classes: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Dense::random(arch.d_x + arch.d_z, arch.hidden, Activation::Tanh, rng),
            out: Dense::random(arch.hidden, n_classes, Activation::Identity, rng),
        }
    }

    pub fn view(&self) -> ClassifierView<'_> {
        ClassifierView {
            hidden: &self.hidden,
            out: &self.out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cvae {
    pub enc_in: Dense,
    pub enc_head: Dense,
    pub dec_trunk: Dense,
    pub dec_out: Dense,
    pub classifier: Option<ClassifierHead>,
}

impl Cvae {
    pub fn random(arch: &Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            enc_in: Dense::random(arch.d_x + arch.d_cond, arch.hidden, Activation::Tanh, rng),
            enc_head: Dense::random(arch.hidden, 2 * arch.d_z, Activation::Identity, rng),
            dec_trunk: Dense::random(arch.d_z + arch.d_cond, arch.hidden, Activation::Tanh, rng),
            dec_out: Dense::random(arch.hidden, arch.d_x, Activation::Identity, rng),
            classifier: arch.n_classes.map(|c| ClassifierHead::random(arch, c, rng)),
        })
    }

    pub fn arch(&self) -> Arch {
        let v = self.vae();
        Arch {
            d_x: v.d_x(),
            d_cond: v.d_cond(),
            hidden: self.enc_in.n_out(),
            d_z: v.d_z(),
            n_classes: self.classifier.as_ref().map(|c| c.out.n_out()),
        }
    }

    pub fn vae(&self) -> VaeView<'_> {
        VaeView {
            enc_in: &self.enc_in,
            enc_head: &self.enc_head,
            dec_trunk: &self.dec_trunk,
            dec_out: &self.dec_out,
        }
    }

    pub fn classifier_view(&self) -> Result<ClassifierView<'_>> {
        self.classifier.as_ref().map(ClassifierHead::view).ok_or(Error::Mode)
    }

    pub fn n_params(&self) -> usize {
        let cls = self
            .classifier
            .as_ref()
            .map_or(0, |c| c.hidden.n_params() + c.out.n_params());
        self.enc_in.n_params() + self.enc_head.n_params() + self.dec_trunk.n_params() + self.dec_out.n_params() + cls
    }

    pub fn is_finite(&self) -> bool {
        let cls = self
            .classifier
            .as_ref()
            .is_none_or(|c| c.hidden.is_finite() && c.out.is_finite());
        cls && self.enc_in.is_finite() && self.enc_head.is_finite() && self.dec_trunk.is_finite() && self.dec_out.is_finite()
    }

    /// Per-row bound: the ELBO, or the conditional generator bound when a
    /// condition is given.
    pub fn log_likelihood(&self, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>, n_mc: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let noise = vae::draw_noise(rng, n_mc, x.nrows(), self.arch().d_z);
        Ok(vae::elbo(self.vae(), x, cond, &noise, false)?.0.per_sample)
    }

    /// `p(y | x)` with `z` from the prior.
    pub fn predict_proba(&self, x: ArrayView2<f64>, n_mc: usize, rng: &mut Rng) -> Result<Array2<f64>> {
        let cls = self.classifier_view()?;
        let noise = vae::draw_noise(rng, n_mc, x.nrows(), self.arch().d_z);
        vae::predict_proba(cls, x, &noise)
    }

    /// Decoder means for `z ~ N(0, I)`, one row per condition row (or `n`
    /// rows when unconditional).
    pub fn generate(&self, n: usize, cond: Option<ArrayView2<f64>>, rng: &mut Rng) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::input("generation needs n >= 1"));
        }
        let z = vae::draw_noise(rng, 1, n, self.arch().d_z).pop().expect("one draw");
        vae::decode(&self.dec_trunk, &self.dec_out, z.view(), cond)
    }

    pub fn write_tensors(&self, prefix: &str, out: &mut ParamSet) {
        self.enc_in.write_tensors(&format!("{prefix}.enc_in"), out);
        self.enc_head.write_tensors(&format!("{prefix}.enc_head"), out);
        self.dec_trunk.write_tensors(&format!("{prefix}.dec_trunk"), out);
        self.dec_out.write_tensors(&format!("{prefix}.dec_out"), out);
        if let Some(c) = &self.classifier {
            c.hidden.write_tensors(&format!("{prefix}.cls_hidden"), out);
            c.out.write_tensors(&format!("{prefix}.cls_out"), out);
        }
    }

    pub fn read_tensors(prefix: &str, from: &ParamSet) -> Result<Self> {
        let classifier = if from.contains(&format!("{prefix}.cls_hidden.w")) {
            Some(ClassifierHead {
                hidden: Dense::read_tensors(&format!("{prefix}.cls_hidden"), from)?,
                out: Dense::read_tensors(&format!("{prefix}.cls_out"), from)?,
            })
        } else {
            None
        };
        Ok(Self {
            enc_in: Dense::read_tensors(&format!("{prefix}.enc_in"), from)?,
            enc_head: Dense::read_tensors(&format!("{prefix}.enc_head"), from)?,
            dec_trunk: Dense::read_tensors(&format!("{prefix}.dec_trunk"), from)?,
            dec_out: Dense::read_tensors(&format!("{prefix}.dec_out"), from)?,
            classifier,
        })
    }
}

/// Rows of training data. `cond` feeds encoder and decoder; `labels` are
/// the classifier targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub cond: Option<Array2<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select(Axis(0), idx),
            cond: self.cond.as_ref().map(|c| c.select(Axis(0), idx)),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| Error::input(format!("batch concat: {e}")))
        };
        let cond = match (&self.cond, &other.cond) {
            (Some(a), Some(b)) => Some(cat(a, b)?),
            (None, None) => None,
            _ => return Err(Error::input("cannot mix conditioned and unconditioned batches")),
        };
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            (None, None) => None,
            _ => return Err(Error::input("cannot mix labelled and unlabelled batches")),
        };
        Ok(Batch {
            x: cat(&self.x, &other.x)?,
            cond,
            labels,
        })
    }
}

/// Source of replay rows drawn alongside each mini-batch.
pub trait ReplaySource {
    fn draw(&self, n: usize, rng: &mut Rng) -> Result<Batch>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: Adam,
    pub n_mc: usize,
    /// Whether `enc_head` and `dec_trunk` receive updates.
    pub train_shared: bool,
    /// Task index reported in divergence errors.
    pub task: usize,
}

struct Optim {
    enc_in: AdamState,
    enc_head: AdamState,
    dec_trunk: AdamState,
    dec_out: AdamState,
    cls: Option<(AdamState, AdamState)>,
}

impl Optim {
    fn new(net: &Cvae) -> Self {
        Self {
            enc_in: AdamState::new(&net.enc_in),
            enc_head: AdamState::new(&net.enc_head),
            dec_trunk: AdamState::new(&net.dec_trunk),
            dec_out: AdamState::new(&net.dec_out),
            cls: net
                .classifier
                .as_ref()
                .map(|c| (AdamState::new(&c.hidden), AdamState::new(&c.out))),
        }
    }
}

fn diverged(task: usize, epoch: usize, e: Error) -> Error {
    match e {
        Error::Numerical { tensor } => Error::Divergence {
            task,
            epoch,
            detail: format!("non-finite `{tensor}`"),
        },
        other => other,
    }
}

fn step(net: &mut Cvae, opt: &mut Optim, b: &Batch, o: &TrainOptions, rng: &mut Rng) -> Result<f64> {
    let d_z = net.arch().d_z;
    let noise = vae::draw_noise(rng, o.n_mc, b.len(), d_z);
    let (loss, g) = vae::elbo(net.vae(), b.x.view(), b.cond.as_ref().map(|c| c.view()), &noise, true)?;
    let g = g.expect("gradients requested");
    opt.enc_in.ascend(&o.adam, &mut net.enc_in, &g.enc_in);
    opt.dec_out.ascend(&o.adam, &mut net.dec_out, &g.dec_out);
    if o.train_shared {
        opt.enc_head.ascend(&o.adam, &mut net.enc_head, &g.enc_head);
        opt.dec_trunk.ascend(&o.adam, &mut net.dec_trunk, &g.dec_trunk);
    }
    if let (Some(labels), Some(cond)) = (&b.labels, &b.cond) {
        let noise = vae::draw_noise(rng, o.n_mc, b.len(), d_z);
        let cls = net.classifier_view()?;
        let (_, g) = vae::classifier_objective(&net.enc_in, &net.enc_head, cls, b.x.view(), cond.view(), labels, &noise, true)?;
        let g = g.expect("gradients requested");
        let head = net.classifier.as_mut().ok_or(Error::Mode)?;
        let (sh, so) = opt.cls.as_mut().ok_or(Error::Mode)?;
        sh.ascend(&o.adam, &mut head.hidden, &g.hidden);
        so.ascend(&o.adam, &mut head.out, &g.out);
        opt.enc_in.ascend(&o.adam, &mut net.enc_in, &g.enc_in);
        if o.train_shared {
            opt.enc_head.ascend(&o.adam, &mut net.enc_head, &g.enc_head);
        }
    }
    if !net.is_finite() {
        return Err(Error::Numerical {
            tensor: "parameters after update".into(),
        });
    }
    Ok(loss.report.total)
}

/// Adam state carried across epochs of one training run.
pub struct Trainer {
    opts: TrainOptions,
    optim: Optim,
    epoch: usize,
}

impl Trainer {
    pub fn new(net: &Cvae, opts: TrainOptions) -> Result<Self> {
        if opts.batch_size == 0 || opts.n_mc == 0 {
            return Err(Error::config("batch_size and n_mc must be positive"));
        }
        Ok(Self {
            opts,
            optim: Optim::new(net),
            epoch: 0,
        })
    }

    /// One shuffled pass over `data`; returns the mean generator objective.
    pub fn epoch(&mut self, net: &mut Cvae, data: &Batch, replay: Option<&dyn ReplaySource>, rng: &mut Rng) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        if data.labels.is_some() && net.classifier.is_none() {
            return Err(Error::Mode);
        }
        let (task, epoch) = (self.opts.task, self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(self.opts.batch_size) {
            let mut b = data.select(chunk);
            if let Some(src) = replay {
                b = b.concat(&src.draw(chunk.len(), rng)?)?;
            }
            let v = step(net, &mut self.optim, &b, &self.opts, rng).map_err(|e| diverged(task, epoch, e))?;
            sum += v * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(sum / data.len() as f64)
    }
}

/// Mini-batch Adam ascent. With labels present, the generator bound and the
/// classifier bound are stepped one after the other on each mini-batch.
/// When `replay` is given, every mini-batch is topped up with as many
/// replayed rows as it has data rows. Returns the mean generator objective
/// of each epoch.
pub fn train(
    net: &mut Cvae,
    data: &Batch,
    opts: &TrainOptions,
    replay: Option<&dyn ReplaySource>,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(usize, &Cvae) -> Result<()>,
) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(net, *opts)?;
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        history.push(trainer.epoch(net, data, replay, rng)?);
        on_epoch(epoch, net)?;
    }
    log::debug!(
        "task {}: {} epochs, final objective {:.4}",
        opts.task,
        opts.epochs,
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(history)
}

/// Fresh RNG for a network initialisation.
pub fn init_rng(base: u64, tags: &[u64]) -> Rng {
    seed::rng_at(base, tags)
}

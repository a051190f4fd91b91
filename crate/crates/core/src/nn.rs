//! Dense layers with hand-written reverse-mode gradients, plain MLPs and an
//! Adam optimiser.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// `y = act(x W^T + b)` over a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Weights, shape `(out, in)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> Self {
        Self {
            w: Array2::zeros(layer.w.raw_dim()),
            b: Array1::zeros(layer.b.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &DenseGrad) {
        self.w += &other.w;
        self.b += &other.b;
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.w.iter().chain(self.b.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Dense {
    /// Weights drawn from `N(0, 1/in)`, zero biases.
    pub fn random(n_in: usize, n_out: usize, act: Activation, rng: &mut seed::Rng) -> Self {
        let scale = 1.0 / (n_in.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((n_out, n_in), |_| {
            let e: f64 = rng.sample(StandardNormal);
            e * scale
        });
        Self {
            w,
            b: Array1::zeros(n_out),
            act,
        }
    }

    pub fn zeros(n_in: usize, n_out: usize, act: Activation) -> Self {
        Self {
            w: Array2::zeros((n_out, n_in)),
            b: Array1::zeros(n_out),
            act,
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_in() {
            return Err(Error::Shape {
                context: "dense input".into(),
                expected: self.n_in(),
                got: x.ncols(),
            });
        }
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        if self.act == Activation::Tanh {
            y.mapv_inplace(f64::tanh);
        }
        Ok(y)
    }

    /// Gradients of a scalar objective given `d obj / d output`.
    /// `input` and `output` are the values recorded by [`Dense::forward`].
    pub fn backward(
        &self,
        input: ArrayView2<f64>,
        output: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
    ) -> (DenseGrad, Array2<f64>) {
        let g_pre = match self.act {
            Activation::Identity => grad_out.to_owned(),
            Activation::Tanh => {
                let mut g = grad_out.to_owned();
                g.zip_mut_with(&output, |g, &y| *g *= 1.0 - y * y);
                g
            }
        };
        let grad = DenseGrad {
            w: g_pre.t().dot(&input),
            b: g_pre.sum_axis(Axis(0)),
        };
        let g_in = g_pre.dot(&self.w);
        (grad, g_in)
    }

    /// Adds `step * grad` to the parameters.
    pub fn apply(&mut self, grad: &DenseGrad, step: f64) {
        self.w.scaled_add(step, &grad.w);
        self.b.scaled_add(step, &grad.b);
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }

    /// FNV-1a over the raw bit patterns; used to assert bit-identity.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.w.iter().chain(self.b.iter()) {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn write_tensors(&self, prefix: &str, out: &mut ParamSet) {
        out.tensors.push(Tensor {
            name: format!("{prefix}.w"),
            shape: vec![self.n_out(), self.n_in()],
            data: self.w.iter().copied().collect(),
        });
        out.tensors.push(Tensor {
            name: format!("{prefix}.b"),
            shape: vec![self.n_out()],
            data: self.b.to_vec(),
        });
        out.tensors.push(Tensor {
            name: format!("{prefix}.act"),
            shape: vec![1],
            data: vec![self.act.code() as f64],
        });
    }

    pub fn read_tensors(prefix: &str, from: &ParamSet) -> Result<Self> {
        let w = from.get(&format!("{prefix}.w"))?;
        let b = from.get(&format!("{prefix}.b"))?;
        let act = from.get(&format!("{prefix}.act"))?;
        if w.shape.len() != 2 || b.shape != [w.shape[0]] || act.data.len() != 1 {
            return Err(Error::Format(format!("inconsistent shapes for layer `{prefix}`")));
        }
        Ok(Self {
            w: Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
                .map_err(|e| Error::Format(e.to_string()))?,
            b: Array1::from(b.data.clone()),
            act: Activation::from_code(act.data[0] as u32)?,
        })
    }
}

/// Feed-forward stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layers `widths[0] -> widths[1] -> ...`, `act` on hidden layers and an
    /// identity output layer.
    pub fn random(widths: &[usize], act: Activation, rng: &mut seed::Rng) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let a = if i + 1 == n { Activation::Identity } else { act };
                Dense::random(widths[i], widths[i + 1], a, rng)
            })
            .collect();
        Self { layers }
    }

    /// All activations, input first.
    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        let mut acts = vec![x.to_owned()];
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty").view())?;
            acts.push(next);
        }
        Ok(acts)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x)?.pop().expect("non-empty"))
    }

    /// Single-vector forward pass.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::input(e.to_string()))?;
        let y = self.forward(x)?;
        Error::check_finite("mlp output", y.iter().copied())?;
        Ok(y.into_raw_vec_and_offset().0)
    }

    pub fn backward(&self, trace: &[Array2<f64>], grad_out: ArrayView2<f64>) -> (Vec<DenseGrad>, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (dg, gi) = layer.backward(trace[i].view(), trace[i + 1].view(), g.view());
            grads.push(dg);
            g = gi;
        }
        grads.reverse();
        (grads, g)
    }

    pub fn to_param_set(&self, role: Role) -> ParamSet {
        let mut ps = ParamSet::new(role);
        for (i, l) in self.layers.iter().enumerate() {
            l.write_tensors(&format!("layer{i}"), &mut ps);
        }
        ps
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        let mut layers = Vec::new();
        while ps.contains(&format!("layer{}.w", layers.len())) {
            layers.push(Dense::read_tensors(&format!("layer{}", layers.len()), ps)?);
        }
        if layers.is_empty() {
            return Err(Error::Format("parameter set holds no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Shape {
                    context: "consecutive layers".into(),
                    expected: pair[0].n_out(),
                    got: pair[1].n_in(),
                });
            }
        }
        Ok(Self { layers })
    }
}

/// Forward pass of the network stored in `params`.
pub fn mlp_forward(params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    Mlp::from_param_set(params)?.forward_one(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Shared,
    Individual,
    Student,
    Baseline,
}

impl Role {
    pub fn code(self) -> u32 {
        match self {
            Role::Shared => 0,
            Role::Individual => 1,
            Role::Student => 2,
            Role::Baseline => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named flat tensors; the unit of checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub role: Role,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            tensors: Vec::new(),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::Shape {
                    context: format!("tensor `{}`", t.name),
                    expected: n,
                    got: t.data.len(),
                });
            }
            Error::check_finite(&t.name, t.data.iter().copied())?;
        }
        Ok(())
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one layer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: DenseGrad,
    v: DenseGrad,
    t: i32,
}

impl AdamState {
    pub fn new(layer: &Dense) -> Self {
        Self {
            m: DenseGrad::zeros_like(layer),
            v: DenseGrad::zeros_like(layer),
            t: 0,
        }
    }

    /// One ascent step on `layer` along `grad` (the objective is maximised).
    pub fn ascend(&mut self, cfg: &Adam, layer: &mut Dense, grad: &DenseGrad) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p += cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
        };
        ndarray::Zip::from(&mut layer.w)
            .and(&mut self.m.w)
            .and(&mut self.v.w)
            .and(&grad.w)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut layer.b)
            .and(&mut self.m.b)
            .and(&mut self.v.b)
            .and(&grad.b)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
}

/// Rows of `samples` as a matrix.
pub fn stack_rows(rows: &[&[f64]]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Shape {
                context: "row stacking".into(),
                expected: d,
                got: r.len(),
            });
        }
        out.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp {
            layers: vec![Dense::zeros(3, 4, Activation::Tanh), Dense::zeros(4, 2, Activation::Identity)],
        };
        assert_eq!(mlp.forward_one(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut l = Dense::zeros(3, 3, Activation::Identity);
        l.w = Array2::eye(3);
        let ps = Mlp { layers: vec![l] }.to_param_set(Role::Individual);
        assert_eq!(mlp_forward(&ps, &[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mlp = Mlp::random(&[3, 4, 2], Activation::Tanh, &mut seed::rng(0));
        assert!(matches!(mlp.forward_one(&[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_squared_error_gradient_closed_form() {
        // obj = ||x W^T + b - t||^2, d obj/dW = 2 err^T x.
        let mut rng = seed::rng(3);
        let l = Dense::random(3, 2, Activation::Identity, &mut rng);
        let x = array![[0.3, -1.2, 0.7]];
        let t = array![[1.0, -0.5]];
        let y = l.forward(x.view()).unwrap();
        let err = &y - &t;
        let (g, _) = l.backward(x.view(), y.view(), (&err * 2.0).view());
        let expected = (&err * 2.0).t().dot(&x);
        assert!((&g.w - &expected).iter().all(|v| v.abs() < 1e-14));
        assert!((&g.b - &(&err * 2.0).row(0)).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn detached_objective_has_zero_gradient() {
        let mut rng = seed::rng(5);
        let mlp = Mlp::random(&[3, 5, 2], Activation::Tanh, &mut rng);
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let trace = mlp.forward_trace(x.view()).unwrap();
        let (grads, gin) = mlp.backward(&trace, Array2::zeros((2, 2)).view());
        assert!(grads.iter().all(DenseGrad::is_zero));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_set_round_trip() {
        let mlp = Mlp::random(&[4, 6, 3], Activation::Tanh, &mut seed::rng(9));
        let ps = mlp.to_param_set(Role::Shared);
        assert_eq!(Mlp::from_param_set(&ps).unwrap(), mlp);
        let mut bad = ps.clone();
        bad.tensors[0].data[0] = f64::NAN;
        assert!(matches!(bad.validate(), Err(Error::Numerical { .. })));
    }

    #[test]
    fn adam_ascends_a_concave_bowl() {
        // obj = -(w - 3)^2
        let mut l = Dense::zeros(1, 1, Activation::Identity);
        let mut st = AdamState::new(&l);
        let cfg = Adam { lr: 0.05, ..Adam::default() };
        for _ in 0..2000 {
            let g = DenseGrad {
                w: array![[-2.0 * (l.w[[0, 0]] - 3.0)]],
                b: array![0.0],
            };
            st.ascend(&cfg, &mut l, &g);
        }
        assert!((l.w[[0, 0]] - 3.0).abs() < 1e-2);
    }
}

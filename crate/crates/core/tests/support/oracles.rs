//! Small enumerable discrepancy instances and their brute-force answers.
#![allow(dead_code)]

use limix_core::risk::{self, Budget, Classifier, Hypothesis, HypothesisClass, Loss};
use limix_core::seed;
use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

/// Two finite point sets and the gridded class enumerated over them.
pub struct PsiInstance {
    pub xa: Array2<f64>,
    pub xb: Array2<f64>,
    pub grid: Vec<Hypothesis>,
}

fn column(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
}

/// Instance `i` of a fixed family: even indices are 1-D two-point
/// distributions under thresholds, odd ones small 2-D clouds under
/// half-planes.
pub fn psi_instance(i: u64) -> PsiInstance {
    let mut rng = seed::rng(7_000 + i);
    if i.is_multiple_of(2) {
        let pts: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let n = 40;
        let wa = rng.random_range(0.05..0.95);
        let wb = rng.random_range(0.05..0.95);
        let draw = |w: f64, lo: usize, rng: &mut seed::Rng| -> Vec<f64> {
            (0..n).map(|_| if rng.random::<f64>() < w { pts[lo] } else { pts[lo + 1] }).collect()
        };
        let a = draw(wa, 0, &mut rng);
        let b = draw(wb, 2, &mut rng);
        PsiInstance {
            grid: risk::threshold_grid(&pts),
            xa: column(&a),
            xb: column(&b),
        }
    } else {
        let cloud = |n: usize, cx: f64, cy: f64, rng: &mut seed::Rng| {
            Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { cx } else { cy } + rng.random_range(-1.0..1.0))
        };
        let (cx, cy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let xa = cloud(30, 0.0, 0.0, &mut rng);
        let xb = cloud(30, cx, cy, &mut rng);
        let offsets: Vec<f64> = (-8..=8).map(|k| k as f64 * 0.25).collect();
        PsiInstance {
            xa,
            xb,
            grid: risk::halfplane_grid(24, &offsets),
        }
    }
}

impl PsiInstance {
    pub fn d(&self) -> usize {
        self.xa.ncols()
    }

    pub fn exhaustive(&self) -> f64 {
        risk::discrepancy_enumerated(self.xa.view(), self.xb.view(), &self.grid, Loss::ZeroOne).unwrap().estimate
    }

    pub fn adversarial(&self, seed: u64) -> risk::Discrepancy {
        let class = HypothesisClass::linear(self.d(), 2);
        risk::discrepancy_on(self.xa.view(), self.xb.view(), &class, &Budget::default(), seed).unwrap()
    }
}

fn mean_tau(p: &[usize], q: &[usize]) -> f64 {
    p.iter().zip(q).filter(|(a, b)| a != b).count() as f64 / p.len() as f64
}

fn predict(h: &Hypothesis, x: ArrayView2<f64>) -> Vec<usize> {
    h.predict(x).unwrap()
}

/// Every term of the three-term bound, computed by hand on finite sets.
#[derive(Debug)]
pub struct BoundInstance {
    pub lhs: f64,
    pub head: f64,
    pub psi: f64,
    pub sigma: f64,
}

impl BoundInstance {
    pub fn rhs(&self) -> f64 {
        self.head + self.psi + self.sigma
    }
}

/// Target set labelled by a half-plane `h*` outside the grid, a source set
/// with its own noisy labels, `h` drawn from the grid and both ideal
/// classifiers taken as the grid's empirical risk minimisers.
pub fn bound_instance(i: u64) -> BoundInstance {
    let mut rng = seed::rng(9_000 + i);
    let inst = psi_instance(2 * i + 1);
    let (xt, xs) = (inst.xa.view(), inst.xb.view());
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let truth = Hypothesis::halfplane(angle, rng.random_range(-0.5..0.5));
    let yt = predict(&truth, xt);
    let flip = rng.random_range(0.0..0.3);
    let ys: Vec<usize> = predict(&truth, xs)
        .into_iter()
        .map(|y| if rng.random::<f64>() < flip { 1 - y } else { y })
        .collect();
    let erm = |x: ArrayView2<f64>, y: &[usize]| -> Hypothesis {
        inst.grid
            .iter()
            .min_by(|a, b| mean_tau(&predict(a, x), y).total_cmp(&mean_tau(&predict(b, x), y)))
            .unwrap()
            .clone()
    };
    let h_t = erm(xt, &yt);
    let h_s = erm(xs, &ys);
    let h = &inst.grid[rng.random_range(0..inst.grid.len())];
    BoundInstance {
        lhs: mean_tau(&predict(h, xt), &yt),
        head: mean_tau(&predict(h, xs), &predict(&h_s, xs)),
        psi: inst.exhaustive(),
        sigma: mean_tau(&predict(&h_t, xt), &yt) + mean_tau(&predict(&h_t, xs), &predict(&h_s, xs)),
    }
}

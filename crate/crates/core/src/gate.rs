//! Knowledge-driven Dirichlet-process gate.
//!
//! For a sample `x_i` and component `j` the knowledge affinity is
//! `K_ij = |F_j(x_i) - F_j(x'_ij)|`, where `F_j` is the component's
//! log-likelihood bound and `x'_ij` one of its own generations. The soft
//! count of component `j` is
//!
//! ```text
//! n_{-i,j} = (n - 1) exp(1/K_ij) / Z,    Z = sum_q exp(1/K_iq) + exp(1/V)
//! ```
//!
//! and the assignment probabilities are `n_{-i,j} / (n - 1 + a)` for an
//! existing component and `(a + (n - 1) exp(1/V) / Z) / (n - 1 + a)` for a
//! new one. Exponents reach `1e6` once `K` is floored, so everything is
//! normalised in log space.

use crate::error::{Error, Result};
use crate::task_streams::Sample;

/// Lower bound applied to every affinity.
pub const EPS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    /// Concentration `a`.
    pub a: f64,
    /// Expansion constant `V`.
    pub v: f64,
    /// Group size used to decide a task's indicator.
    pub n_g: usize,
    /// Running count of training samples seen over the whole stream.
    pub n_total: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            a: 1.0,
            v: 0.5,
            n_g: 64,
            n_total: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::config(format!("gate.a must be positive, got {}", self.a)));
        }
        if self.v.is_nan() || self.v <= 0.0 {
            return Err(Error::config(format!("gate.V must be positive, got {}", self.v)));
        }
        if self.n_g < 1 {
            return Err(Error::config("gate.n_G must be at least 1"));
        }
        Ok(())
    }

    fn n_minus_one(&self) -> Result<f64> {
        if self.n_total < 2 {
            return Err(Error::config(format!(
                "assignment probabilities need n >= 2, got {}",
                self.n_total
            )));
        }
        Ok((self.n_total - 1) as f64)
    }
}

/// `|F(x) - F(x')|`, floored at [`EPS_FLOOR`].
pub fn knowledge_affinity(component_loglik: f64, replay_loglik: f64) -> Result<f64> {
    if !component_loglik.is_finite() || !replay_loglik.is_finite() {
        return Err(Error::Numerical {
            tensor: "knowledge affinity input".into(),
        });
    }
    Ok((component_loglik - replay_loglik).abs().max(EPS_FLOOR))
}

/// Affinities of one sample against every component, with the log of the
/// normaliser `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityRow {
    pub k_values: Vec<f64>,
    log_z: f64,
    expansion_exponent: f64,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

impl AffinityRow {
    /// Affinities below the floor are raised to it.
    pub fn new(k_values: Vec<f64>, v: f64) -> Result<Self> {
        if k_values.iter().any(|k| !k.is_finite() || *k < 0.0) {
            return Err(Error::Numerical {
                tensor: "affinity row".into(),
            });
        }
        let k_values: Vec<f64> = k_values.into_iter().map(|k| k.max(EPS_FLOOR)).collect();
        let expansion_exponent = 1.0 / v;
        let log_z = log_sum_exp(
            k_values
                .iter()
                .map(|k| 1.0 / k)
                .chain(std::iter::once(expansion_exponent)),
        );
        Ok(Self {
            k_values,
            log_z,
            expansion_exponent,
        })
    }

    pub fn len(&self) -> usize {
        self.k_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_values.is_empty()
    }

    /// `ln Z`.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    /// `Z` itself; infinite when it overflows.
    pub fn z_norm(&self) -> f64 {
        self.log_z.exp()
    }

    /// `exp(1/K_j) / Z`.
    pub fn share(&self, j: usize) -> f64 {
        (1.0 / self.k_values[j] - self.log_z).exp()
    }

    /// `exp(1/V) / Z`.
    pub fn expansion_share(&self) -> f64 {
        (self.expansion_exponent - self.log_z).exp()
    }
}

/// Soft count `n_{-i,j}`.
pub fn effective_count(cfg: &GateConfig, row: &AffinityRow, j: usize) -> Result<f64> {
    if j >= row.len() {
        return Err(Error::input(format!("component {j} out of range for K = {}", row.len())));
    }
    Ok(cfg.n_minus_one()? * row.share(j))
}

/// Probabilities of the `K` existing components followed by a new one.
pub fn assignment_probs(cfg: &GateConfig, row: &AffinityRow) -> Result<Vec<f64>> {
    let nm1 = cfg.n_minus_one()?;
    let denom = nm1 + cfg.a;
    let mut p: Vec<f64> = (0..row.len()).map(|j| nm1 * row.share(j) / denom).collect();
    p.push((cfg.a + nm1 * row.expansion_share()) / denom);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Choice {
    Existing(usize),
    New,
}

impl Choice {
    pub fn index(self, k: usize) -> usize {
        match self {
            Choice::Existing(j) => j,
            Choice::New => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorDecision {
    /// Column means of `per_sample_probs`; the last entry is the new
    /// component.
    pub probs: Vec<f64>,
    pub chosen: Choice,
    pub per_sample_probs: Vec<Vec<f64>>,
    /// `K_ij` for every group sample and component.
    pub affinities: Vec<Vec<f64>>,
}

impl IndicatorDecision {
    /// Averages per-sample rows and takes the argmax. Ties go to the lowest
    /// component index; the new component loses every tie.
    pub fn from_rows(per_sample_probs: Vec<Vec<f64>>, affinities: Vec<Vec<f64>>) -> Result<Self> {
        let width = per_sample_probs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::input("indicator needs at least one sample"))?;
        let mut probs = vec![0.0; width];
        for row in &per_sample_probs {
            if row.len() != width {
                return Err(Error::Shape {
                    context: "probability rows".into(),
                    expected: width,
                    got: row.len(),
                });
            }
            probs.iter_mut().zip(row).for_each(|(p, r)| *p += r);
        }
        let n = per_sample_probs.len() as f64;
        probs.iter_mut().for_each(|p| *p /= n);
        let k = width - 1;
        let mut chosen = Choice::New;
        let mut best = probs[k];
        for (j, &p) in probs[..k].iter().enumerate().rev() {
            if p >= best {
                best = p;
                chosen = Choice::Existing(j);
            }
        }
        Ok(Self {
            probs,
            chosen,
            per_sample_probs,
            affinities,
        })
    }

    pub fn mean_affinity(&self) -> Vec<f64> {
        let k = self.probs.len() - 1;
        let mut out = vec![0.0; k];
        for row in &self.affinities {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let n = self.affinities.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// What the gate needs from a frozen component.
pub trait GateComponent {
    /// Log-likelihood bound of each sample (labelled samples use the
    /// conditional bound).
    fn log_likelihood(&self, samples: &[Sample], seed: u64) -> Result<Vec<f64>>;

    /// `n` fresh generations.
    fn replay(&self, n: usize, seed: u64) -> Result<Vec<Sample>>;
}

/// `K_ij` for every sample `i` of `group` and component `j`. Replay pairs
/// are fresh draws paired by index.
pub fn affinity_matrix(group: &[Sample], components: &[&dyn GateComponent], seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut affinities = vec![Vec::with_capacity(components.len()); group.len()];
    for (j, comp) in components.iter().enumerate() {
        let wrap = |e: Error| Error::Component {
            index: j,
            source: Box::new(e),
        };
        let comp_seed = crate::seed::derive(seed, &[j as u64]);
        let f_x = comp.log_likelihood(group, crate::seed::derive(comp_seed, &[0])).map_err(wrap)?;
        let replays = comp.replay(group.len(), crate::seed::derive(comp_seed, &[1])).map_err(wrap)?;
        let f_r = comp
            .log_likelihood(&replays, crate::seed::derive(comp_seed, &[2]))
            .map_err(wrap)?;
        if f_x.len() != group.len() || f_r.len() != group.len() {
            return Err(wrap(Error::Shape {
                context: "component log-likelihoods".into(),
                expected: group.len(),
                got: f_x.len().min(f_r.len()),
            }));
        }
        for (i, (a, b)) in f_x.iter().zip(&f_r).enumerate() {
            affinities[i].push(knowledge_affinity(*a, *b).map_err(wrap)?);
        }
    }
    Ok(affinities)
}

/// Task-level indicator from a group of samples of the incoming task.
/// With no components the decision is a new component.
pub fn task_indicator(
    cfg: &GateConfig,
    group: &[Sample],
    components: &[&dyn GateComponent],
    seed: u64,
) -> Result<IndicatorDecision> {
    cfg.validate()?;
    if group.is_empty() {
        return Err(Error::input("task indicator needs a non-empty group"));
    }
    if components.is_empty() {
        return IndicatorDecision::from_rows(vec![vec![1.0]; group.len()], vec![Vec::new(); group.len()]);
    }
    let affinities = affinity_matrix(group, components, seed)?;
    let rows = affinities
        .iter()
        .map(|ks| assignment_probs(cfg, &AffinityRow::new(ks.clone(), cfg.v)?))
        .collect::<Result<Vec<_>>>()?;
    IndicatorDecision::from_rows(rows, affinities)
}

/// Index of the smallest entry; ties go to the lowest index.
pub fn argmin_affinity(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &k) in row.iter().enumerate() {
        if best.is_none_or(|b| k < row[b]) {
            best = Some(j);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(a: f64, v: f64, n: usize) -> GateConfig {
        GateConfig {
            a,
            v,
            n_g: 4,
            n_total: n,
        }
    }

    #[test]
    fn affinity_examples() {
        assert_eq!(knowledge_affinity(-3.2, -3.2).unwrap(), EPS_FLOOR);
        assert_eq!(knowledge_affinity(-10.0, -4.0).unwrap(), 6.0);
        assert_eq!(knowledge_affinity(-4.0, -10.0).unwrap(), 6.0);
        assert!(knowledge_affinity(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn equal_exponents_split_evenly() {
        let c = cfg(1.0, f64::INFINITY, 101);
        let row = AffinityRow::new(vec![f64::MAX], c.v).unwrap();
        let n1 = effective_count(&c, &row, 0).unwrap();
        assert!((n1 - 50.0).abs() < 1e-9);
        let p = assignment_probs(&c, &row).unwrap();
        assert!((p[0] - 50.0 / 101.0).abs() < 1e-12);
        assert!((p[1] - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_affinity_dominates_without_overflow() {
        let c = cfg(1.0, 0.5, 11);
        let row = AffinityRow::new(vec![0.0, 2.0], c.v).unwrap();
        assert!(row.z_norm().is_infinite());
        let n1 = effective_count(&c, &row, 0).unwrap();
        assert!((n1 - 10.0).abs() < 1e-9);
        let p = assignment_probs(&c, &row).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_concentration_forces_expansion() {
        let c = cfg(1e12, 0.5, 101);
        let row = AffinityRow::new(vec![0.01, 0.02], c.v).unwrap();
        assert!(assignment_probs(&c, &row).unwrap()[2] > 1.0 - 1e-9);
    }

    #[test]
    fn small_group_count_is_rejected() {
        let row = AffinityRow::new(vec![1.0], 1.0).unwrap();
        assert!(assignment_probs(&cfg(1.0, 1.0, 1), &row).is_err());
        assert!(effective_count(&cfg(1.0, 1.0, 5), &row, 1).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index_and_new_loses() {
        let d = IndicatorDecision::from_rows(vec![vec![0.3, 0.3, 0.4]], vec![]).unwrap();
        assert_eq!(d.chosen, Choice::New);
        let d = IndicatorDecision::from_rows(vec![vec![0.4, 0.2, 0.4]], vec![]).unwrap();
        assert_eq!(d.chosen, Choice::Existing(0));
        let d = IndicatorDecision::from_rows(vec![vec![0.2, 0.4, 0.4]], vec![]).unwrap();
        assert_eq!(d.chosen, Choice::Existing(1));
    }

    #[test]
    fn identical_rows_average_to_the_row() {
        let row = vec![0.1, 0.6, 0.3];
        let d = IndicatorDecision::from_rows(vec![row.clone(); 5], vec![]).unwrap();
        for (a, b) in d.probs.iter().zip(&row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    struct Empty;

    impl GateComponent for Empty {
        fn log_likelihood(&self, _: &[Sample], _: u64) -> Result<Vec<f64>> {
            Err(Error::input("broken"))
        }
        fn replay(&self, _: usize, _: u64) -> Result<Vec<Sample>> {
            Ok(Vec::new())
        }
    }

    #[test]
    fn first_task_expands_and_failures_carry_the_index() {
        let group = vec![Sample::unlabeled(vec![0.0, 1.0])];
        let c = cfg(1.0, 0.5, 0);
        let d = task_indicator(&c, &group, &[], 0).unwrap();
        assert_eq!(d.chosen, Choice::New);
        let broken = Empty;
        let err = task_indicator(&cfg(1.0, 0.5, 10), &group, &[&broken], 0).unwrap_err();
        assert!(matches!(err, Error::Component { index: 0, .. }));
    }
}

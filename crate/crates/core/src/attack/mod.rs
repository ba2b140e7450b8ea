//! Gradient inversion attacks.
//!
//! [`opt`] matches gradients by optimizing dummy inputs, [`gen`] routes the
//! reconstruction through a generator or a learned inversion model, and [`ana`]
//! recovers inputs in closed form or after manipulating the model.

pub mod ana;
pub mod gen;
pub mod opt;

use crate::autodiff::{AdamState, Graph, NodeId};
use crate::error::{Error, Result};
use crate::metrics::BatchMetrics;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Distance {
    L2,
    #[default]
    Cosine,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::L2 => "l2",
            Distance::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Distance::L2),
            "cosine" => Ok(Distance::Cosine),
            _ => Err(Error::Invalid(format!("unknown distance '{s}'"))),
        }
    }
}

/// `D(candidate, target)` as a scalar node.
///
/// Cosine distance is `1 − ⟨g, t⟩ / (‖g‖·‖t‖)` over all tensors jointly.
pub fn distance_node(g: &mut Graph, d: Distance, candidate: &[NodeId], target: &[Tensor]) -> Result<NodeId> {
    if candidate.len() != target.len() {
        return Err(Error::Shape(format!(
            "distance: {} candidate tensors against {} targets",
            candidate.len(),
            target.len()
        )));
    }
    let mut terms = Vec::with_capacity(candidate.len());
    let mut norms = Vec::new();
    for (&c, t) in candidate.iter().zip(target) {
        let tn = g.constant(t.clone());
        match d {
            Distance::L2 => {
                let diff = g.sub(c, tn)?;
                terms.push(g.dot(diff, diff)?);
            }
            Distance::Cosine => {
                terms.push(g.dot(c, tn)?);
                norms.push(g.dot(c, c)?);
            }
        }
    }
    let sum_all = |g: &mut Graph, v: &[NodeId]| -> Result<NodeId> {
        let mut acc = v[0];
        for &n in &v[1..] {
            acc = g.add(acc, n)?;
        }
        Ok(acc)
    };
    let total = sum_all(g, &terms)?;
    match d {
        Distance::L2 => Ok(total),
        Distance::Cosine => {
            let tnorm: f64 = target.iter().map(|t| t.dot(t)).sum::<f64>().sqrt();
            if tnorm == 0.0 {
                return Err(Error::Invalid("cosine distance against an all-zero target".into()));
            }
            let nc = sum_all(g, &norms)?;
            let nc = g.affine(nc, 1.0, 1e-30)?;
            let nc = g.sqrt(nc)?;
            let denom = g.scale(nc, tnorm)?;
            let ratio = g.div(total, denom)?;
            g.affine(ratio, -1.0, 1.0)
        }
    }
}

/// Adam schedule with step decay at fractional milestones.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub iterations: usize,
    pub lr: f64,
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl Schedule {
    pub fn new(iterations: usize, lr: f64) -> Self {
        Self { iterations, lr, milestones: vec![3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0], decay: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Invalid("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.decay > 0.0) {
            return Err(Error::Invalid(format!("learning rate {} and decay {} must be positive", self.lr, self.decay)));
        }
        let ok = self.milestones.iter().all(|&m| m > 0.0 && m < 1.0)
            && self.milestones.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Invalid(format!(
                "milestones {:?} must be strictly increasing inside (0, 1)",
                self.milestones
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, it: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| it >= (m * self.iterations as f64).floor() as usize)
            .count();
        self.lr * self.decay.powi(passed as i32)
    }
}

/// Outcome of [`minimize`].
#[derive(Clone, Debug)]
pub struct Minimized {
    /// Variables at the best objective seen.
    pub best: Vec<Tensor>,
    pub best_objective: f64,
    pub trajectory: Vec<f64>,
}

/// Adam on `vars` for the scheduled number of iterations, keeping the best iterate.
///
/// `objective` records the objective for the given variable nodes into a fresh
/// graph; `project` runs after every step.
pub fn minimize<F, P>(mut vars: Vec<Tensor>, sched: &Schedule, mut objective: F, mut project: P) -> Result<Minimized>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
    P: FnMut(&mut [Tensor]),
{
    sched.validate()?;
    let mut adam = AdamState::for_params(&vars);
    let mut best = vars.clone();
    let mut best_objective = f64::INFINITY;
    let mut trajectory = Vec::with_capacity(sched.iterations);
    for it in 0..sched.iterations {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vars.iter().map(|v| g.variable(v.clone())).collect();
        let obj = objective(&mut g, &ids)?;
        let value = g.value(obj).item();
        let lr = sched.lr_at(it);
        if !value.is_finite() {
            return Err(Error::Diverged { iteration: it, lr, detail: format!("objective is {value}") });
        }
        trajectory.push(value);
        if value < best_objective {
            best_objective = value;
            best.clone_from(&vars);
        }
        let mut grads = g.backward(obj)?;
        let gs: Vec<Tensor> = ids.iter().map(|&id| grads.take(id)).collect();
        if gs.iter().any(|t| !t.all_finite()) {
            return Err(Error::Diverged { iteration: it, lr, detail: "gradient is not finite".into() });
        }
        adam.step(&mut vars, &gs, lr)?;
        project(&mut vars);
    }
    Ok(Minimized { best, best_objective, trajectory })
}

/// A reconstructed batch with its provenance.
#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Reconstruction in model (normalized) space.
    pub x_hat: Tensor,
    pub labels: Vec<usize>,
    pub objective: f64,
    pub trajectory: Vec<f64>,
    /// Starting point in model space, when the attack has one.
    pub init: Option<Tensor>,
    pub metrics: Option<BatchMetrics>,
    pub seed: u64,
    pub config: String,
    /// Set by attacks that only recover semantically similar images.
    pub semantic_only: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_milestones() {
        let s = Schedule::new(8, 0.1);
        let lrs: Vec<f64> = (0..8).map(|i| s.lr_at(i)).collect();
        assert_eq!(lrs[2], 0.1);
        assert!((lrs[3] - 0.01).abs() < 1e-15);
        assert!((lrs[5] - 0.001).abs() < 1e-15);
        assert!((lrs[7] - 0.0001).abs() < 1e-15);
        assert!(Schedule { milestones: vec![0.5, 0.4], ..Schedule::new(8, 0.1) }.validate().is_err());
        assert!(Schedule::new(0, 0.1).validate().is_err());
    }

    #[test]
    fn cosine_distance_is_zero_for_parallel_targets() {
        let mut g = Graph::new();
        let c = g.variable(Tensor::from_vec(vec![1.0, 2.0, -1.0]));
        let t = vec![Tensor::from_vec(vec![2.0, 4.0, -2.0])];
        let d = distance_node(&mut g, Distance::Cosine, &[c], &t).unwrap();
        assert!(g.value(d).item().abs() < 1e-12);
        let l2 = distance_node(&mut g, Distance::L2, &[c], &t).unwrap();
        assert!((g.value(l2).item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn minimize_keeps_best_iterate() {
        let sched = Schedule::new(50, 0.5);
        let res = minimize(
            vec![Tensor::from_vec(vec![0.0])],
            &sched,
            |g, ids| {
                let t = g.constant(Tensor::from_vec(vec![3.0]));
                g.mse(ids[0], t)
            },
            |_| {},
        )
        .unwrap();
        assert!(res.trajectory.iter().all(|&v| res.best_objective <= v));
        assert_eq!(res.trajectory.len(), 50);
    }
}

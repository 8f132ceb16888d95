//! Fitting the regularization weight lambda on held-out sequences.
//!
//! The objective is the mean negative log likelihood of the ground-truth label
//! under the two-pass min-sum marginals, averaged per sequence and then across
//! sequences. It is minimized by an exhaustive grid and, independently, by a
//! scalar quasi-Newton descent on `lambda = relu(theta)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{self, Boundary, BoundaryStrength, CostModel, LikelihoodSequence};
use crate::tree::AirwayTree;

pub const DEFAULT_LAMBDA: f64 = 22.43;
pub const DEFAULT_GRID: Grid = Grid {
    lo: 0.0,
    hi: 60.0,
    samples: 240,
};

const NLL_EPS: f64 = 1e-12;
const GD_TOL: f64 = 1e-3;
const GD_MAX_ITER: usize = 100;

/// `samples` evenly spaced points starting at `lo` with step
/// `(hi - lo) / samples`; `hi` itself is not sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo >= 0.0 && self.hi > self.lo && self.hi.is_finite()) {
            return Err(Error::invalid(format!(
                "grid needs 0 <= lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.samples < 2 {
            return Err(Error::invalid("grid needs at least 2 samples"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.samples as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let step = self.step();
        (0..self.samples).map(|i| self.lo + i as f64 * step).collect()
    }
}

impl Default for Grid {
    fn default() -> Self {
        DEFAULT_GRID
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    cost: CostModel,
    truth: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TuningProblem {
    sequences: Vec<Prepared>,
    grid: Grid,
}

impl TuningProblem {
    /// Builds the per-sequence cost models. Data costs must lie in `[0, 1]`
    /// (boundary rows excepted under a hard boundary) and the regularizer in
    /// `[1, e]`, so that lambda weighs terms of comparable range.
    pub fn new(
        tree: &AirwayTree,
        sequences: Vec<(LikelihoodSequence, Vec<usize>)>,
        grid: Grid,
        boundary: Boundary,
    ) -> Result<Self> {
        grid.validate()?;
        if sequences.is_empty() {
            return Err(Error::invalid("tuning needs at least one sequence"));
        }
        let reg = tree.distance_matrix().regularization()?;
        if reg.matrix().iter().any(|&r| !(1.0..=std::f64::consts::E).contains(&r)) {
            return Err(Error::invalid("regularizer outside [1, e]"));
        }
        let prepared = sequences
            .into_iter()
            .enumerate()
            .map(|(i, (p, truth))| {
                if p.classes() != tree.len() {
                    return Err(Error::Dimension(format!(
                        "sequence {i}: {} classes for a {}-label tree",
                        p.classes(),
                        tree.len()
                    )));
                }
                if truth.len() != p.frames() {
                    return Err(Error::Dimension(format!(
                        "sequence {i}: {} labels for {} frames",
                        truth.len(),
                        p.frames()
                    )));
                }
                if let Some(&c) = truth.iter().find(|&&c| c >= tree.len()) {
                    return Err(Error::invalid(format!("sequence {i}: label {c} out of range")));
                }
                let cost = CostModel::from_likelihoods(&p, &reg, 0.0, tree.root(), boundary)?;
                let frames = cost.frames();
                let in_range = cost.data().rows().into_iter().enumerate().all(|(n, row)| {
                    let pinned = boundary.strength == BoundaryStrength::Hard
                        && (n == 0 || n + 1 == frames);
                    pinned || row.iter().all(|v| (0.0..=1.0).contains(v))
                });
                if !in_range {
                    return Err(Error::invalid(format!("sequence {i}: data term outside [0, 1]")));
                }
                Ok(Prepared { cost, truth })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sequences: prepared,
            grid,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn per_sequence<F>(&self, lambda: f64, f: F) -> Result<f64>
    where
        F: Fn(&CostModel, &[usize]) -> f64 + Sync,
    {
        let values = self
            .sequences
            .par_iter()
            .map(|s| Ok(f(&s.cost.with_lambda(lambda)?, &s.truth)))
            .collect::<Result<Vec<f64>>>()?;
        Ok(values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Mean NLL of the truth under the min-sum marginals at `lambda`.
    pub fn objective(&self, lambda: f64) -> Result<f64> {
        self.per_sequence(lambda, |cost, truth| {
            let m = inference::marginals(cost).marginals;
            let total: f64 = truth
                .iter()
                .enumerate()
                .map(|(n, &t)| -m[[n, t]].max(NLL_EPS).ln())
                .sum();
            total / truth.len() as f64
        })
    }

    /// Mean frame accuracy of the MAP path at `lambda`.
    pub fn accuracy(&self, lambda: f64) -> Result<f64> {
        self.per_sequence(lambda, |cost, truth| {
            let path = inference::viterbi_decode(cost).path;
            let hits = path.iter().zip(truth).filter(|(a, b)| a == b).count();
            hits as f64 / truth.len() as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub lambda: f64,
    pub min_nll: f64,
    pub nll_curve: Vec<(f64, f64)>,
    pub acc_curve: Vec<(f64, f64)>,
}

/// Objective and MAP accuracy at every grid point; the argmin goes to the
/// smallest lambda on ties.
pub fn brute_force_lambda(problem: &TuningProblem) -> Result<BruteForce> {
    let points = problem.grid.points();
    let evals = points
        .par_iter()
        .map(|&l| Ok((l, problem.objective(l)?, problem.accuracy(l)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, e) in evals.iter().enumerate() {
        if e.1 < evals[best].1 {
            best = i;
        }
    }
    Ok(BruteForce {
        lambda: evals[best].0,
        min_nll: evals[best].1,
        nll_curve: evals.iter().map(|e| (e.0, e.1)).collect(),
        acc_curve: evals.iter().map(|e| (e.0, e.2)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientDescent {
    pub lambda: f64,
    pub objective: f64,
    pub iterations: usize,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Minimizes the objective over `lambda = relu(theta)` from `theta = init`.
///
/// The derivative in theta is a central difference with
/// `h = 1e-3 * max(1, lambda)`. Steps are secant updates on the derivative
/// when the last two derivatives indicate positive curvature, a
/// finite-difference Newton step when only the local second difference does,
/// and a unit-scale descent step otherwise; every step is halved until the
/// objective does not increase. Stops when lambda moves less than 1e-3 or
/// after 100 iterations.
pub fn gradient_descent_lambda(problem: &TuningProblem, init: f64) -> Result<GradientDescent> {
    if !(init >= 0.0 && init.is_finite()) {
        return Err(Error::invalid(format!("initial lambda must be >= 0, got {init}")));
    }
    let f = |theta: f64| problem.objective(relu(theta));
    let mut theta = init;
    let mut value = f(theta)?;
    if !value.is_finite() {
        return Err(Error::invalid(format!("objective is {value} at lambda = {init}")));
    }
    let mut prev: Option<(f64, f64)> = None;
    let mut iterations = 0;

    while iterations < GD_MAX_ITER {
        iterations += 1;
        let lambda = relu(theta);
        let h = 1e-3 * lambda.max(1.0);
        let (up, down) = (f(theta + h)?, f(theta - h)?);
        let grad = (up - down) / (2.0 * h);
        if grad == 0.0 {
            break;
        }
        let scale = theta.abs().max(1.0);
        let secant = prev.and_then(|(tp, gp)| {
            let curv = (grad - gp) / (theta - tp);
            (curv > 0.0 && curv.is_finite()).then(|| -grad / curv)
        });
        let mut step = secant.unwrap_or_else(|| {
            let curv = (up - 2.0 * value + down) / (h * h);
            if curv > 0.0 {
                -grad / curv
            } else {
                -grad.signum() * 0.5 * scale
            }
        });
        step = step.clamp(-2.0 * scale, 2.0 * scale);

        let mut accepted = None;
        for _ in 0..40 {
            let candidate = theta + step;
            let v = f(candidate)?;
            if v <= value {
                accepted = Some((candidate, v));
                break;
            }
            step *= 0.5;
        }
        let Some((next, next_value)) = accepted else {
            break;
        };
        prev = Some((theta, grad));
        let moved = (relu(next) - lambda).abs();
        theta = next;
        value = next_value;
        if moved < GD_TOL {
            break;
        }
    }

    Ok(GradientDescent {
        lambda: relu(theta),
        objective: value,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Grid,
    Gd,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TuningResult {
    pub lambda_gd: Option<f64>,
    pub lambda_bf: Option<f64>,
    pub nll_gd: Option<f64>,
    pub nll_bf: Option<f64>,
    pub iterations: usize,
    pub grid: Option<Grid>,
    /// Written separately as `lambda,value` tables.
    #[serde(skip)]
    pub nll_curve: Vec<(f64, f64)>,
    #[serde(skip)]
    pub acc_curve: Vec<(f64, f64)>,
}

pub fn tune(problem: &TuningProblem, method: Method, init: f64) -> Result<TuningResult> {
    let mut result = TuningResult::default();
    if matches!(method, Method::Grid | Method::Both) {
        let bf = brute_force_lambda(problem)?;
        result.lambda_bf = Some(bf.lambda);
        result.nll_bf = Some(bf.min_nll);
        result.grid = Some(problem.grid);
        result.nll_curve = bf.nll_curve;
        result.acc_curve = bf.acc_curve;
    }
    if matches!(method, Method::Gd | Method::Both) {
        let gd = gradient_descent_lambda(problem, init)?;
        result.lambda_gd = Some(gd.lambda);
        result.nll_gd = Some(gd.objective);
        result.iterations = gd.iterations;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate_walk, WalkConfig};
    use crate::util::softmin;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn two_label_tree() -> AirwayTree {
        AirwayTree::new(vec!["Trachea".into(), "LMB".into()], 0, vec![(0, 1)]).unwrap()
    }

    fn simulated_problem(seeds: std::ops::Range<u64>, frames: usize, grid: Grid) -> TuningProblem {
        let tree = AirwayTree::phantom();
        let seqs = seeds
            .map(|s| {
                let sim = simulate_walk(&tree, &WalkConfig::new(frames, s)).unwrap();
                (sim.likelihoods, sim.truth)
            })
            .collect();
        TuningProblem::new(&tree, seqs, grid, Boundary::default()).unwrap()
    }

    #[test]
    fn grid_points() {
        let g = DEFAULT_GRID;
        assert_eq!(g.step(), 0.25);
        let pts = g.points();
        assert_eq!(pts.len(), 240);
        assert_eq!(pts[94], 23.5);
        let small = Grid { lo: 0.0, hi: 60.0, samples: 2 };
        assert_eq!(small.points(), vec![0.0, 30.0]);
        assert!(Grid { lo: 1.0, hi: 1.0, samples: 4 }.validate().is_err());
        assert!(Grid { lo: 0.0, hi: 1.0, samples: 1 }.validate().is_err());
    }

    #[test]
    fn two_frame_boundary_objective() {
        let tree = two_label_tree();
        let p = LikelihoodSequence::new(array![[0.3, 0.7], [0.8, 0.2]]).unwrap();
        let problem =
            TuningProblem::new(&tree, vec![(p, vec![0, 0])], DEFAULT_GRID, Boundary::default())
                .unwrap();
        // both rows are boundary rows [0, 1]; at lambda 0 each marginal is softmin
        let expected = -softmin(&[0.0, 1.0])[0].ln();
        assert_relative_eq!(problem.objective(0.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn duplicates_do_not_change_objective() {
        let tree = AirwayTree::phantom();
        let sim = simulate_walk(&tree, &WalkConfig::new(120, 4)).unwrap();
        let one = TuningProblem::new(
            &tree,
            vec![(sim.likelihoods.clone(), sim.truth.clone())],
            DEFAULT_GRID,
            Boundary::default(),
        )
        .unwrap();
        let three = TuningProblem::new(
            &tree,
            vec![(sim.likelihoods.clone(), sim.truth.clone()); 3],
            DEFAULT_GRID,
            Boundary::default(),
        )
        .unwrap();
        for l in [0.0, 1.5, 20.0] {
            assert_relative_eq!(one.objective(l).unwrap(), three.objective(l).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn huge_lambda_is_worse_than_none_on_walks_that_leave_the_root() {
        let tree = AirwayTree::phantom();
        let problem = simulated_problem(0..3, 2000, DEFAULT_GRID);
        for s in &problem.sequences {
            assert!(s.truth.iter().any(|&c| c != tree.root()));
        }
        let (none, huge) = (problem.objective(0.0).unwrap(), problem.objective(1e6).unwrap());
        assert!(huge > none, "{huge} vs {none}");
        assert!(problem.objective(15.0).unwrap() < none);
    }

    #[test]
    fn objective_is_deterministic() {
        let problem = simulated_problem(10..12, 200, DEFAULT_GRID);
        let a = problem.objective(7.3).unwrap();
        let b = problem.objective(7.3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn endpoint_grid_evaluates_two_points() {
        let problem = simulated_problem(20..21, 100, Grid { lo: 0.0, hi: 60.0, samples: 2 });
        let bf = brute_force_lambda(&problem).unwrap();
        assert_eq!(bf.nll_curve.len(), 2);
        assert_eq!(bf.acc_curve.len(), 2);
        assert_eq!(bf.nll_curve[0].0, 0.0);
        assert_eq!(bf.nll_curve[1].0, 30.0);
    }

    #[test]
    fn descent_from_grid_minimum_stays() {
        let problem = simulated_problem(30..32, 200, Grid { lo: 0.0, hi: 20.0, samples: 80 });
        let bf = brute_force_lambda(&problem).unwrap();
        let gd = gradient_descent_lambda(&problem, bf.lambda).unwrap();
        assert!((gd.lambda - bf.lambda).abs() <= problem.grid().step());
        assert!(gd.objective <= bf.min_nll + 1e-12);
    }

    #[test]
    fn relu_clamps_at_zero() {
        // the truth flickers exactly as the likelihoods do, so any smoothing hurts
        let tree = two_label_tree();
        let p = LikelihoodSequence::new(array![
            [0.9, 0.1],
            [0.01, 0.99],
            [0.99, 0.01],
            [0.01, 0.99],
            [0.9, 0.1]
        ])
        .unwrap();
        let problem = TuningProblem::new(
            &tree,
            vec![(p, vec![0, 1, 0, 1, 0])],
            DEFAULT_GRID,
            Boundary::default(),
        )
        .unwrap();
        let f0 = problem.objective(0.0).unwrap();
        assert!(problem.objective(1e-3).unwrap() > f0);
        let gd = gradient_descent_lambda(&problem, 0.0).unwrap();
        assert_eq!(gd.lambda, 0.0);
        assert!(gradient_descent_lambda(&problem, -1.0).is_err());
    }

    #[test]
    fn rejects_mismatched_sequences() {
        let tree = AirwayTree::phantom();
        let p = LikelihoodSequence::new(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(TuningProblem::new(&tree, vec![(p, vec![0, 0])], DEFAULT_GRID, Boundary::default()).is_err());
        let tree = two_label_tree();
        let p = LikelihoodSequence::new(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(TuningProblem::new(&tree, vec![(p.clone(), vec![0])], DEFAULT_GRID, Boundary::default()).is_err());
        assert!(TuningProblem::new(&tree, vec![], DEFAULT_GRID, Boundary::default()).is_err());
    }
}

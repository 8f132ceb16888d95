//! Tree-regularized HMM inference in cost space.
//!
//! The energy of a label path is
//!
//! ```text
//! E(w) = sum_n D_n(w_n) + lambda * sum_{n>=1} R(w_n, w_{n-1})
//! ```
//!
//! where `D_n(w) = (1 - p_n(w)) / (|labels| - 1)` is the per-frame data term
//! and `R` the pairwise transition penalty. [`viterbi_decode`] finds the
//! minimum-energy path by min-sum dynamic programming. [`marginals`] runs the
//! same recursion forwards and backwards; their sum minus the doubly counted
//! data term is the cost of the best path through each (frame, label) cell,
//! which is turned into a per-frame distribution by a softmin.
//! [`exact_posteriors`] is the sum-product counterpart, used to measure how far
//! the min-sum approximation is from true HMM posteriors.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::RegularizationMatrix;
use crate::util::{argmin, log_sum_exp, softmin};

/// Tolerance on likelihood row sums.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Data cost of a non-root class on a hard boundary row.
pub const HARD_BOUNDARY_COST: f64 = 1e12;

/// N x |labels| matrix of per-frame class likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodSequence {
    p: Array2<f64>,
}

impl LikelihoodSequence {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.nrows() < 2 {
            return Err(Error::invalid(format!(
                "a likelihood sequence needs at least 2 frames, got {}",
                p.nrows()
            )));
        }
        if p.ncols() < 2 {
            return Err(Error::invalid("a likelihood sequence needs at least 2 classes"));
        }
        for (n, row) in p.rows().into_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!(
                    "frame {n}: probability {v} outside [0, 1]"
                )));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("frame {n}: row sums to {sum}")));
            }
        }
        Ok(Self { p })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn frames(&self) -> usize {
        self.p.nrows()
    }

    pub fn classes(&self) -> usize {
        self.p.ncols()
    }

    /// Per-frame argmax, lowest index on ties.
    pub fn frame_argmax(&self) -> Vec<usize> {
        self.p
            .rows()
            .into_iter()
            .map(|r| crate::util::argmax(&r.to_vec()))
            .collect()
    }
}

/// `(1 - p) / (|labels| - 1)` entrywise.
pub fn data_term(p: &LikelihoodSequence) -> Array2<f64> {
    let scale = 1.0 / (p.classes() - 1) as f64;
    p.matrix().mapv(|v| (1.0 - v) * scale)
}

/// Which ends of a sequence are pinned to the root label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    #[default]
    BothEnds,
    StartOnly,
    None,
}

/// How strongly a boundary row pins the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryStrength {
    /// Data term of a one-hot root likelihood: 0 at the root, `1/(|labels|-1)`
    /// elsewhere.
    #[default]
    Soft,
    /// 0 at the root, [`HARD_BOUNDARY_COST`] elsewhere.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Boundary {
    pub policy: BoundaryPolicy,
    pub strength: BoundaryStrength,
}

impl Boundary {
    pub const NONE: Boundary = Boundary {
        policy: BoundaryPolicy::None,
        strength: BoundaryStrength::Soft,
    };

    pub fn soft(policy: BoundaryPolicy) -> Self {
        Self {
            policy,
            strength: BoundaryStrength::Soft,
        }
    }

    pub fn hard(policy: BoundaryPolicy) -> Self {
        Self {
            policy,
            strength: BoundaryStrength::Hard,
        }
    }
}

/// Replaces the first and/or last data row with a row that favours `root`.
pub fn apply_boundary(data: &Array2<f64>, root: usize, boundary: Boundary) -> Result<Array2<f64>> {
    let (frames, classes) = data.dim();
    if frames < 2 {
        return Err(Error::invalid("boundary rows need at least 2 frames"));
    }
    if root >= classes {
        return Err(Error::invalid(format!(
            "root {root} out of range for {classes} classes"
        )));
    }
    let off = match boundary.strength {
        BoundaryStrength::Soft => 1.0 / (classes - 1) as f64,
        BoundaryStrength::Hard => HARD_BOUNDARY_COST,
    };
    let mut out = data.clone();
    let rows: &[usize] = match boundary.policy {
        BoundaryPolicy::BothEnds => &[0, frames - 1],
        BoundaryPolicy::StartOnly => &[0],
        BoundaryPolicy::None => &[],
    };
    for &n in rows {
        let mut row = out.row_mut(n);
        row.fill(off);
        row[root] = 0.0;
    }
    Ok(out)
}

/// Unary costs, pairwise transition costs and their relative weight.
///
/// `transition[[cur, prev]]` is the cost of moving from `prev` at frame n-1 to
/// `cur` at frame n.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    data: Array2<f64>,
    transition: Array2<f64>,
    lambda: f64,
}

impl CostModel {
    pub fn new(data: Array2<f64>, transition: Array2<f64>, lambda: f64) -> Result<Self> {
        let (frames, classes) = data.dim();
        if frames < 2 || classes < 1 {
            return Err(Error::invalid(format!(
                "cost model needs at least 2 frames and 1 class, got {frames}x{classes}"
            )));
        }
        if transition.dim() != (classes, classes) {
            return Err(Error::Dimension(format!(
                "transition matrix is {:?}, expected {classes}x{classes}",
                transition.dim()
            )));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("data costs must be finite and non-negative"));
        }
        if transition.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("transition costs must be finite"));
        }
        Ok(Self {
            data,
            transition,
            lambda,
        })
    }

    /// Data term of `likelihoods` with boundary rows at `root`, regularized
    /// by `reg` with weight `lambda`.
    pub fn from_likelihoods(
        likelihoods: &LikelihoodSequence,
        reg: &RegularizationMatrix,
        lambda: f64,
        root: usize,
        boundary: Boundary,
    ) -> Result<Self> {
        let data = apply_boundary(&data_term(likelihoods), root, boundary)?;
        Self::new(data, reg.matrix().clone(), lambda)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.data.clone(), self.transition.clone(), lambda)
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn classes(&self) -> usize {
        self.data.ncols()
    }

    /// Same model with the frame order reversed and the transition transposed.
    pub fn reversed(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(0));
        Self {
            data,
            transition: self.transition.t().to_owned(),
            lambda: self.lambda,
        }
    }

    /// Energy of a label path.
    pub fn path_energy(&self, path: &[usize]) -> Result<f64> {
        if path.len() != self.frames() {
            return Err(Error::Dimension(format!(
                "path of length {} for {} frames",
                path.len(),
                self.frames()
            )));
        }
        if let Some(&c) = path.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::invalid(format!("label {c} out of range")));
        }
        let data: f64 = path
            .iter()
            .enumerate()
            .map(|(n, &w)| self.data[[n, w]])
            .sum();
        let reg: f64 = path
            .windows(2)
            .map(|w| self.transition[[w[1], w[0]]])
            .sum();
        Ok(data + self.lambda * reg)
    }
}

/// Minimum-energy path.
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    pub path: Vec<usize>,
    pub total_cost: f64,
}

/// Forward and backward min-sum message tables and the derived per-frame
/// distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub forward: Array2<f64>,
    pub backward: Array2<f64>,
    /// `forward + backward - data`: cost of the best path through each cell.
    pub combined: Array2<f64>,
    /// Row-wise softmin of `combined`.
    pub marginals: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub path: Vec<usize>,
    pub total_cost: f64,
    pub forward: Array2<f64>,
    pub backward: Array2<f64>,
    pub combined: Array2<f64>,
    pub marginals: Array2<f64>,
}

/// Best predecessor of `cur`: `argmin_prev msg[prev] + lambda * step(prev)`,
/// lowest index on ties.
#[inline]
fn relax(msg: ArrayView1<'_, f64>, lambda: f64, step: impl Fn(usize) -> f64) -> (usize, f64) {
    let mut best = 0;
    let mut best_val = msg[0] + lambda * step(0);
    for prev in 1..msg.len() {
        let v = msg[prev] + lambda * step(prev);
        if v < best_val {
            best = prev;
            best_val = v;
        }
    }
    (best, best_val)
}

fn forward_pass(cost: &CostModel, keep_argmins: bool) -> (Array2<f64>, Vec<usize>) {
    let (frames, classes) = cost.data.dim();
    let mut msg = Array2::zeros((frames, classes));
    let mut back = if keep_argmins {
        vec![0usize; frames * classes]
    } else {
        Vec::new()
    };
    msg.row_mut(0).assign(&cost.data.row(0));
    for n in 1..frames {
        let (done, mut rest) = msg.view_mut().split_at(Axis(0), n);
        let prev = done.row(n - 1);
        let mut cur = rest.row_mut(0);
        for w in 0..classes {
            let t = cost.transition.row(w);
            let (arg, val) = relax(prev, cost.lambda, |p| t[p]);
            cur[w] = cost.data[[n, w]] + val;
            if keep_argmins {
                back[n * classes + w] = arg;
            }
        }
    }
    (msg, back)
}

fn backward_pass(cost: &CostModel) -> Array2<f64> {
    let (frames, classes) = cost.data.dim();
    let mut msg = Array2::zeros((frames, classes));
    msg.row_mut(frames - 1).assign(&cost.data.row(frames - 1));
    for n in (0..frames - 1).rev() {
        let (mut head, done) = msg.view_mut().split_at(Axis(0), n + 1);
        let next = done.row(0);
        let mut cur = head.row_mut(n);
        for w in 0..classes {
            let t = cost.transition.column(w);
            let (_, val) = relax(next, cost.lambda, |p| t[p]);
            cur[w] = cost.data[[n, w]] + val;
        }
    }
    msg
}

/// Min-sum Viterbi decoding with stored argmins for backtracking.
pub fn viterbi_decode(cost: &CostModel) -> ViterbiPath {
    let (frames, classes) = cost.data.dim();
    let (msg, back) = forward_pass(cost, true);
    let last = msg.row(frames - 1);
    let mut w = argmin(last.as_slice().expect("row-major"));
    let total_cost = last[w];
    let mut path = vec![0; frames];
    path[frames - 1] = w;
    for n in (1..frames).rev() {
        w = back[n * classes + w];
        path[n - 1] = w;
    }
    ViterbiPath { path, total_cost }
}

/// Forward/backward min-sum passes and their softmin marginals.
pub fn marginals(cost: &CostModel) -> Marginals {
    let (forward, backward) = rayon::join(|| forward_pass(cost, false).0, || backward_pass(cost));
    let combined = &forward + &backward - &cost.data;
    let mut marginals = Array2::zeros(combined.raw_dim());
    for (src, mut dst) in combined.rows().into_iter().zip(marginals.rows_mut()) {
        let p = softmin(src.as_slice().expect("row-major"));
        dst.iter_mut().zip(p).for_each(|(d, v)| *d = v);
    }
    Marginals {
        forward,
        backward,
        combined,
        marginals,
    }
}

/// MAP path plus message tables and marginals.
pub fn decode(cost: &CostModel) -> DecodeResult {
    let ViterbiPath { path, total_cost } = viterbi_decode(cost);
    let Marginals {
        forward,
        backward,
        combined,
        marginals,
    } = marginals(cost);
    DecodeResult {
        path,
        total_cost,
        forward,
        backward,
        combined,
        marginals,
    }
}

/// Sum-product posteriors of the HMM read off the energy: emissions
/// `normalize(exp(-D_n))`, transitions `normalize(exp(-lambda * R))` per source
/// class, uniform initial distribution. Computed in log space.
pub fn exact_posteriors(cost: &CostModel) -> Array2<f64> {
    let (frames, classes) = cost.data.dim();
    // log_trans[[prev, next]]
    let mut log_trans = Array2::zeros((classes, classes));
    for prev in 0..classes {
        let row: Vec<f64> = (0..classes)
            .map(|next| -cost.lambda * cost.transition[[next, prev]])
            .collect();
        let z = log_sum_exp(&row);
        for next in 0..classes {
            log_trans[[prev, next]] = row[next] - z;
        }
    }
    let mut log_emit = cost.data.mapv(|v| -v);
    for mut row in log_emit.rows_mut() {
        let z = log_sum_exp(row.as_slice().expect("row-major"));
        row.mapv_inplace(|v| v - z);
    }

    let mut alpha = Array2::zeros((frames, classes));
    alpha.row_mut(0).assign(&log_emit.row(0));
    let mut terms = vec![0.0; classes];
    for n in 1..frames {
        for next in 0..classes {
            for prev in 0..classes {
                terms[prev] = alpha[[n - 1, prev]] + log_trans[[prev, next]];
            }
            alpha[[n, next]] = log_emit[[n, next]] + log_sum_exp(&terms);
        }
    }
    let mut beta = Array2::zeros((frames, classes));
    for n in (0..frames - 1).rev() {
        for prev in 0..classes {
            for next in 0..classes {
                terms[next] = log_trans[[prev, next]] + log_emit[[n + 1, next]] + beta[[n + 1, next]];
            }
            beta[[n, prev]] = log_sum_exp(&terms);
        }
    }

    let mut post = &alpha + &beta;
    for mut row in post.rows_mut() {
        let z = log_sum_exp(row.as_slice().expect("row-major"));
        row.mapv_inplace(|v| (v - z).exp());
    }
    post
}

//! Temperature scaling of classifier logits.
//!
//! A single positive scalar divides every logit before the softmax. It is
//! fitted by minimizing the mean negative log likelihood of held-out labels,
//! which leaves each row's argmax untouched while softening (or sharpening)
//! the confidence.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::argmax;

/// Floor added to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

pub const DEFAULT_ECE_BINS: usize = 15;

const LOG_T_MIN: f64 = -3.0;
const LOG_T_MAX: f64 = 3.0;
const LOG_T_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if t.is_finite() && t > 0.0 {
            Ok(Self(t))
        } else {
            Err(Error::invalid(format!("temperature must be positive, got {t}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// N x |labels| matrix of finite logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSequence {
    z: Array2<f64>,
}

impl LogitSequence {
    pub fn new(z: Array2<f64>) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::invalid("logit sequence is empty"));
        }
        if let Some(((n, k), v)) = z.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite logit {v} at frame {n}, class {k}"
            )));
        }
        Ok(Self { z })
    }

    /// Recovers logits from probability rows as `ln(p + eps)`. Softmax is
    /// invariant to the per-row additive constant this leaves behind.
    pub fn from_probabilities(p: &Array2<f64>) -> Result<Self> {
        Self::new(p.mapv(|v| (v + PROB_EPS).ln()))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn frames(&self) -> usize {
        self.z.nrows()
    }

    pub fn classes(&self) -> usize {
        self.z.ncols()
    }

    pub fn scaled_probabilities(&self, t: Temperature) -> Array2<f64> {
        let mut out = Array2::zeros(self.z.raw_dim());
        for (row, mut dst) in self.z.rows().into_iter().zip(out.rows_mut()) {
            let p = softmax_view(row, t);
            dst.iter_mut().zip(p).for_each(|(d, v)| *d = v);
        }
        out
    }
}

/// Softmax of `z / t`, computed with a max shift.
pub fn scaled_softmax(z: &[f64], t: Temperature) -> Result<Vec<f64>> {
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit {v}")));
    }
    Ok(softmax_view(ArrayView1::from(z), t))
}

pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    scaled_softmax(z, Temperature::ONE)
}

fn softmax_view(z: ArrayView1<'_, f64>, t: Temperature) -> Vec<f64> {
    let t = t.value();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / t;
    let mut out: Vec<f64> = z.iter().map(|&v| (v / t - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn check_labels(frames: usize, classes: usize, y: &[usize]) -> Result<()> {
    if y.len() != frames {
        return Err(Error::Dimension(format!(
            "{} labels for {frames} frames",
            y.len()
        )));
    }
    if let Some((n, &c)) = y.iter().enumerate().find(|(_, &c)| c >= classes) {
        return Err(Error::invalid(format!(
            "label {c} at frame {n} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log likelihood of `y` under `softmax(z / t)`.
pub fn mean_nll(z: &LogitSequence, y: &[usize], t: Temperature) -> Result<f64> {
    check_labels(z.frames(), z.classes(), y)?;
    Ok(nll_unchecked(z, y, t))
}

fn nll_unchecked(z: &LogitSequence, y: &[usize], t: Temperature) -> f64 {
    let t = t.value();
    let total: f64 = z
        .z
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &label)| {
            let scaled: Vec<f64> = row.iter().map(|&v| v / t).collect();
            crate::util::log_sum_exp(&scaled) - scaled[label]
        })
        .sum();
    total / z.frames() as f64
}

/// Equal-width confidence binning: weighted mean of |accuracy - confidence|.
pub fn expected_calibration_error(p: &Array2<f64>, y: &[usize], bins: usize) -> Result<f64> {
    if p.nrows() == 0 {
        return Err(Error::invalid("no predictions"));
    }
    if bins == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    check_labels(p.nrows(), p.ncols(), y)?;

    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (row, &label) in p.rows().into_iter().zip(y) {
        let row = row.to_vec();
        let pred = argmax(&row);
        let conf = row[pred];
        // bins are (lo, hi]; confidence 0 falls into the first bin
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == label {
            correct[b] += 1;
        }
    }
    let n = p.nrows() as f64;
    let ece = (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum();
    Ok(ece)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub t_star: Temperature,
    pub nll_before: f64,
    pub nll_after: f64,
    pub ece_before: f64,
    pub ece_after: f64,
    /// Set when every logit row is constant, so the likelihood does not
    /// depend on the temperature and `t_star` stays at 1.
    pub flat: bool,
}

/// Golden-section search for the minimum of `f` on `[lo, hi]`, stopping when
/// the bracket is narrower than `tol`.
pub fn golden_section_minimize(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Fits the temperature on `(z, y)` by golden-section search over `ln T` in
/// `[-3, 3]`, starting from the `T = 1` reference.
pub fn fit_temperature(z: &LogitSequence, y: &[usize], bins: usize) -> Result<CalibrationReport> {
    check_labels(z.frames(), z.classes(), y)?;
    let nll_before = nll_unchecked(z, y, Temperature::ONE);
    let ece_before = expected_calibration_error(&z.scaled_probabilities(Temperature::ONE), y, bins)?;

    let flat = z
        .z
        .rows()
        .into_iter()
        .all(|row| row.iter().all(|&v| v == row[0]));

    let mut t_star = Temperature::ONE;
    let mut nll_after = nll_before;
    if !flat {
        let log_t = golden_section_minimize(
            |s| nll_unchecked(z, y, Temperature(s.exp())),
            LOG_T_MIN,
            LOG_T_MAX,
            LOG_T_TOL,
        );
        let candidate = Temperature(log_t.exp());
        let nll = nll_unchecked(z, y, candidate);
        if nll <= nll_before {
            t_star = candidate;
            nll_after = nll;
        }
    }
    let ece_after = expected_calibration_error(&z.scaled_probabilities(t_star), y, bins)?;

    Ok(CalibrationReport {
        t_star,
        nll_before,
        nll_after,
        ece_before,
        ece_after,
        flat,
    })
}

//! Constant-current plus admittance load model, its least-squares fit from
//! voltage/current samples, and parallel aggregation.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `I = alpha + (g + j b) V`, all per unit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BigLoad {
    pub alpha_r: f64,
    pub alpha_i: f64,
    pub g: f64,
    pub b: f64,
}

impl BigLoad {
    pub const ZERO: BigLoad = BigLoad { alpha_r: 0.0, alpha_i: 0.0, g: 0.0, b: 0.0 };

    pub fn is_finite(&self) -> bool {
        self.alpha_r.is_finite() && self.alpha_i.is_finite() && self.g.is_finite() && self.b.is_finite()
    }

    pub fn scaled(&self, k: f64) -> BigLoad {
        BigLoad { alpha_r: k * self.alpha_r, alpha_i: k * self.alpha_i, g: k * self.g, b: k * self.b }
    }

    /// Complex power drawn at voltage `(vr, vi)`, `S = V conj(I)`.
    pub fn power(&self, v_real: f64, v_imag: f64) -> (f64, f64) {
        let (ir, ii) = big_current(self, v_real, v_imag);
        (v_real * ir + v_imag * ii, v_imag * ir - v_real * ii)
    }
}

pub fn big_current(load: &BigLoad, v_real: f64, v_imag: f64) -> (f64, f64) {
    (
        load.g * v_real - load.b * v_imag + load.alpha_r,
        load.g * v_imag + load.b * v_real + load.alpha_i,
    )
}

pub fn aggregate<'a>(loads: impl IntoIterator<Item = &'a BigLoad>) -> BigLoad {
    loads.into_iter().fold(BigLoad::ZERO, |acc, l| BigLoad {
        alpha_r: acc.alpha_r + l.alpha_r,
        alpha_i: acc.alpha_i + l.alpha_i,
        g: acc.g + l.g,
        b: acc.b + l.b,
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BigLoadError {
    #[error("cannot convert power to a load model at zero voltage")]
    ZeroVoltage,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("under-determined fit: samples do not excite direction {null_direction:?} (alpha_r, alpha_i, g, b)")]
    UnderDetermined { null_direction: [f64; 4] },
    #[error("non-finite sample at t = {t}")]
    NonFinite { t: f64 },
}

/// Load drawing exactly `p + j q` at the operating voltage `(vr, vi)`.
pub fn pq_to_big(p: f64, q: f64, v_real: f64, v_imag: f64) -> Result<BigLoad, BigLoadError> {
    let v2 = v_real * v_real + v_imag * v_imag;
    if !(v2 > 0.0) {
        return Err(BigLoadError::ZeroVoltage);
    }
    // The admittance part alone reproduces S at this voltage, so alpha is zero.
    Ok(BigLoad { alpha_r: 0.0, alpha_i: 0.0, g: p / v2, b: -q / v2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSample {
    pub bus: u32,
    pub t: f64,
    pub v_real: f64,
    pub v_imag: f64,
    pub i_real: f64,
    pub i_imag: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigFit {
    pub load: BigLoad,
    /// Euclidean norm of the current residuals over all samples.
    pub residual_norm: f64,
    pub samples: usize,
    /// `(A^T A)^-1`; multiply by the noise variance for parameter covariance.
    pub unscaled_covariance: [[f64; 4]; 4],
    /// Fitted conductance is negative (behind-the-meter generation).
    pub negative_conductance: bool,
}

impl BigFit {
    /// Standard errors under i.i.d. current noise of standard deviation `sigma`.
    pub fn standard_errors(&self, sigma: f64) -> [f64; 4] {
        std::array::from_fn(|i| sigma * self.unscaled_covariance[i][i].sqrt())
    }
}

fn design(samples: &[MeasurementSample]) -> (DMatrix<f64>, DVector<f64>) {
    let n = samples.len();
    let mut a = DMatrix::zeros(2 * n, 4);
    let mut y = DVector::zeros(2 * n);
    for (k, s) in samples.iter().enumerate() {
        let r = 2 * k;
        a[(r, 0)] = 1.0;
        a[(r, 2)] = s.v_real;
        a[(r, 3)] = -s.v_imag;
        y[r] = s.i_real;
        a[(r + 1, 1)] = 1.0;
        a[(r + 1, 2)] = s.v_imag;
        a[(r + 1, 3)] = s.v_real;
        y[r + 1] = s.i_imag;
    }
    (a, y)
}

/// Sum of squared current residuals of `load` over `samples`.
pub fn residual_norm(load: &BigLoad, samples: &[MeasurementSample]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let (ir, ii) = big_current(load, s.v_real, s.v_imag);
            (ir - s.i_real).powi(2) + (ii - s.i_imag).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Ordinary linear least squares over all samples.
pub fn fit_big(samples: &[MeasurementSample]) -> Result<BigFit, BigLoadError> {
    if samples.len() < 2 {
        return Err(BigLoadError::TooFewSamples(samples.len()));
    }
    if let Some(s) = samples.iter().find(|s| ![s.v_real, s.v_imag, s.i_real, s.i_imag].iter().all(|x| x.is_finite())) {
        return Err(BigLoadError::NonFinite { t: s.t });
    }
    let (a, y) = design(samples);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let (kmin, smin) = svd.singular_values.argmin();
    if smin <= 1e-10 * smax.max(1.0) {
        let vt = svd.v_t.as_ref().expect("requested V^T");
        let row = vt.row(kmin);
        return Err(BigLoadError::UnderDetermined { null_direction: [row[0], row[1], row[2], row[3]] });
    }
    let x = svd.solve(&y, 0.0).expect("U and V^T were computed");
    let load = BigLoad { alpha_r: x[0], alpha_i: x[1], g: x[2], b: x[3] };
    let ata = a.transpose() * &a;
    let inv = ata.try_inverse().ok_or(BigLoadError::UnderDetermined { null_direction: [0.0; 4] })?;
    Ok(BigFit {
        load,
        residual_norm: residual_norm(&load, samples),
        samples: samples.len(),
        unscaled_covariance: std::array::from_fn(|i| std::array::from_fn(|j| inv[(i, j)])),
        negative_conductance: load.g < 0.0,
    })
}

pub const DEFAULT_WINDOW: usize = 256;

/// Most recent samples per bus, deduplicated by timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementWindows {
    pub capacity: usize,
    windows: BTreeMap<u32, VecDeque<MeasurementSample>>,
}

impl Default for MeasurementWindows {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl MeasurementWindows {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(2), windows: BTreeMap::new() }
    }

    /// Returns false for a duplicate or out-of-order timestamp.
    pub fn push(&mut self, s: MeasurementSample) -> bool {
        let w = self.windows.entry(s.bus).or_default();
        if w.back().is_some_and(|last| s.t <= last.t) {
            return false;
        }
        if w.len() == self.capacity {
            w.pop_front();
        }
        w.push_back(s);
        true
    }

    pub fn samples(&self, bus: u32) -> Vec<MeasurementSample> {
        self.windows.get(&bus).map(|w| w.iter().copied().collect()).unwrap_or_default()
    }

    pub fn buses(&self) -> impl Iterator<Item = u32> + '_ {
        self.windows.keys().copied()
    }

    pub fn len(&self, bus: u32) -> usize {
        self.windows.get(&bus).map_or(0, |w| w.len())
    }
}

/// Synthetic measurement stream for a known load: voltages wander around
/// `v0` and currents carry Gaussian noise of standard deviation `sigma`.
pub fn synthetic_samples(
    load: &BigLoad,
    bus: u32,
    v0: (f64, f64),
    count: usize,
    sigma: f64,
    seed: u64,
) -> Vec<MeasurementSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wander = Normal::new(0.0, 0.03).expect("valid normal");
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("valid normal");
    (0..count)
        .map(|k| {
            let vr = v0.0 + wander.sample(&mut rng);
            let vi = v0.1 + wander.sample(&mut rng);
            let (ir, ii) = big_current(load, vr, vi);
            let (nr, ni) = if sigma > 0.0 { (noise.sample(&mut rng), noise.sample(&mut rng)) } else { (0.0, 0.0) };
            MeasurementSample { bus, t: k as f64, v_real: vr, v_imag: vi, i_real: ir + nr, i_imag: ii + ni }
        })
        .collect()
}

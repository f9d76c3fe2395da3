//! Normalized entrywise error metrics and the distributed-vs-serial check.
//!
//! `l1 = |ref - test|_1 / |ref|_1` and `l2 = |ref - test|_2 / |ref|_2` over
//! the flattened tensor. Real and imaginary parts are scored separately.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::index_tensor::{oracle_accumulate, ExperimentShape, GtSlice};
use crate::ring_engine::{run_experiment_with, EngineError, RunOptions};

/// Every metric must stay strictly below this for a run to pass.
pub const THRESHOLD: f64 = 5e-7;

#[derive(Debug, Error)]
pub enum AccuracyError {
    #[error("reference is all zero; the relative error is undefined")]
    ZeroReference,
    #[error("reference has {reference} values, test has {test}")]
    ShapeMismatch { reference: usize, test: usize },
    #[error("at least one run is required")]
    NoRuns,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn check(reference: &[f64], test: &[f64]) -> Result<(), AccuracyError> {
    if reference.len() != test.len() {
        return Err(AccuracyError::ShapeMismatch {
            reference: reference.len(),
            test: test.len(),
        });
    }
    Ok(())
}

pub fn l1_error(reference: &[f64], test: &[f64]) -> Result<f64, AccuracyError> {
    check(reference, test)?;
    let norm: f64 = reference.iter().map(|x| x.abs()).sum();
    if norm == 0.0 {
        return Err(AccuracyError::ZeroReference);
    }
    let diff: f64 = reference.iter().zip(test).map(|(r, t)| (r - t).abs()).sum();
    Ok(diff / norm)
}

pub fn l2_error(reference: &[f64], test: &[f64]) -> Result<f64, AccuracyError> {
    check(reference, test)?;
    let norm: f64 = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(AccuracyError::ZeroReference);
    }
    let diff: f64 = reference
        .iter()
        .zip(test)
        .map(|(r, t)| (r - t) * (r - t))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub l1_real: f64,
    pub l1_imag: f64,
    pub l2_real: f64,
    pub l2_imag: f64,
    pub pass: bool,
}

impl ErrorReport {
    pub fn from_metrics(l1_real: f64, l1_imag: f64, l2_real: f64, l2_imag: f64) -> Self {
        let pass = [l1_real, l1_imag, l2_real, l2_imag]
            .iter()
            .all(|&v| v < THRESHOLD);
        Self {
            l1_real,
            l1_imag,
            l2_real,
            l2_imag,
            pass,
        }
    }
}

/// Score `test` against `reference`, real and imaginary parts separately.
pub fn compare(reference: &GtSlice, test: &GtSlice) -> Result<ErrorReport, AccuracyError> {
    if reference.range() != test.range() || reference.space() != test.space() {
        return Err(AccuracyError::ShapeMismatch {
            reference: reference.entry_count(),
            test: test.entry_count(),
        });
    }
    let parts = |s: &GtSlice| -> (Vec<f64>, Vec<f64>) {
        s.data().iter().map(|e| (e.re, e.im)).unzip()
    };
    let (rr, ri) = parts(reference);
    let (tr, ti) = parts(test);
    Ok(ErrorReport::from_metrics(
        l1_error(&rr, &tr)?,
        l1_error(&ri, &ti)?,
        l2_error(&rr, &tr)?,
        l2_error(&ri, &ti)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2e} ± {:.2e}", self.mean, self.std)
    }
}

/// Verification over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub l1_real: Stat,
    pub l1_imag: Stat,
    pub l2_real: Stat,
    pub l2_imag: Stat,
    /// True when every run passed.
    pub pass: bool,
    pub runs: Vec<ErrorReport>,
}

impl VerifySummary {
    pub fn from_runs(runs: Vec<ErrorReport>) -> Result<Self, AccuracyError> {
        if runs.is_empty() {
            return Err(AccuracyError::NoRuns);
        }
        let col = |f: fn(&ErrorReport) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            l1_real: col(|r| r.l1_real),
            l1_imag: col(|r| r.l1_imag),
            l2_real: col(|r| r.l2_real),
            l2_imag: col(|r| r.l2_imag),
            pass: runs.iter().all(|r| r.pass),
            runs,
        })
    }
}

/// Serial reference for the payloads a run of `config` produces.
pub fn oracle_for(config: &ExperimentConfig) -> Result<GtSlice, AccuracyError> {
    let shape = ExperimentShape {
        subrings: config.subrings() as u32,
        subring_size: config.subring_size as u32,
        lanes: config.lanes as u32,
        measurements: config.measurements,
    };
    let space = config.space().map_err(EngineError::from)?;
    Ok(oracle_accumulate(config.seed, &shape, space, config.value_mode))
}

/// One distributed run against the serial oracle.
pub fn verify_once(config: &ExperimentConfig, options: &RunOptions) -> Result<ErrorReport, AccuracyError> {
    let report = run_experiment_with(config, options)?;
    compare(&oracle_for(config)?, &report.tensor)
}

/// `runs` runs with seeds `seed, seed + 1, ...`.
pub fn verify(config: &ExperimentConfig, runs: usize) -> Result<VerifySummary, AccuracyError> {
    verify_with(config, runs, &RunOptions::default())
}

pub fn verify_with(
    config: &ExperimentConfig,
    runs: usize,
    options: &RunOptions,
) -> Result<VerifySummary, AccuracyError> {
    let reports = (0..runs as u64)
        .map(|i| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(i);
            verify_once(&cfg, options)
        })
        .collect::<Result<Vec<_>, _>>()?;
    VerifySummary::from_runs(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        let v = [1.0, -2.0, 3.5];
        assert_eq!(l1_error(&v, &v).unwrap(), 0.0);
        assert_eq!(l2_error(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn hand_examples() {
        assert_eq!(l1_error(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 0.0]).unwrap(), 0.25);
        assert_eq!(l2_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_reference_rejected() {
        assert!(matches!(l1_error(&[0.0, 0.0], &[1.0, 0.0]), Err(AccuracyError::ZeroReference)));
        assert!(matches!(l2_error(&[0.0], &[0.0]), Err(AccuracyError::ZeroReference)));
        assert!(matches!(
            l1_error(&[1.0], &[1.0, 2.0]),
            Err(AccuracyError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scale_invariant() {
        let r = [1.0, -2.0, 0.5];
        let t = [1.1, -2.0, 0.4];
        let rs: Vec<f64> = r.iter().map(|x| x * -3.0).collect();
        let ts: Vec<f64> = t.iter().map(|x| x * -3.0).collect();
        assert!((l1_error(&r, &t).unwrap() - l1_error(&rs, &ts).unwrap()).abs() < 1e-15);
        assert!((l2_error(&r, &t).unwrap() - l2_error(&rs, &ts).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn pass_gate() {
        assert!(ErrorReport::from_metrics(0.0, 4.9e-7, 0.0, 0.0).pass);
        assert!(!ErrorReport::from_metrics(0.0, 5e-7, 0.0, 0.0).pass);
    }

    #[test]
    fn sample_statistics() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[4.0]).std, 0.0);
    }
}

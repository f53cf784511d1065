//! Normalized incremental performance against an offline reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One testing event: the learner's accuracy and the offline reference at the same point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub t: usize,
    pub alpha: f64,
    pub alpha_offline: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTrace {
    pub events: Vec<EvalEvent>,
}

impl EvalTrace {
    /// Pairs learner accuracies with reference accuracies event by event.
    pub fn pair(alpha: &[f64], alpha_offline: &[f64]) -> Result<Self> {
        if alpha.len() != alpha_offline.len() {
            return Err(Error::DimensionMismatch {
                what: "offline reference",
                expected: alpha.len(),
                actual: alpha_offline.len(),
            });
        }
        Ok(Self {
            events: alpha
                .iter()
                .zip(alpha_offline)
                .enumerate()
                .map(|(t, (&alpha, &alpha_offline))| EvalEvent {
                    t,
                    alpha,
                    alpha_offline,
                })
                .collect(),
        })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.alpha).collect()
    }

    pub fn reference(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.alpha_offline).collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// `(1/T) sum_t alpha_t / alpha_offline_t`. Not clamped: a learner that beats
/// the reference at some events scores above one.
pub fn omega_all(trace: &EvalTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Empty("evaluation trace"));
    }
    let mut total = 0.0;
    for e in &trace.events {
        if e.alpha_offline == 0.0 {
            return Err(Error::ZeroReference { event: e.t });
        }
        total += e.alpha / e.alpha_offline;
    }
    Ok(total / trace.len() as f64)
}

/// Mean offline accuracy over the testing events.
pub fn offline_mean(reference: &[f64]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("offline reference"));
    }
    Ok(reference.iter().sum::<f64>() / reference.len() as f64)
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Empty("value list"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(MeanStd { mean, std, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn omega_hand_values() {
        let same = EvalTrace::pair(&[0.3, 0.7, 0.9], &[0.3, 0.7, 0.9]).unwrap();
        assert_eq!(omega_all(&same).unwrap(), 1.0);
        let half = EvalTrace::pair(&[0.5, 1.0], &[1.0, 1.0]).unwrap();
        assert!((omega_all(&half).unwrap() - 0.75).abs() < 1e-12);
        assert!(omega_all(&EvalTrace::default()).is_err());
    }

    #[test]
    fn zero_reference_is_an_error() {
        let t = EvalTrace::pair(&[0.5, 0.5], &[0.5, 0.0]).unwrap();
        assert!(matches!(omega_all(&t), Err(Error::ZeroReference { event: 1 })));
    }

    #[test]
    fn omega_may_exceed_one() {
        let t = EvalTrace::pair(&[0.9], &[0.6]).unwrap();
        assert!(omega_all(&t).unwrap() > 1.0);
    }

    #[test]
    fn offline_mean_hand_values() {
        assert!((offline_mean(&[0.8; 4]).unwrap() - 0.8).abs() < 1e-15);
        assert!((offline_mean(&[0.6, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(offline_mean(&[0.37]).unwrap(), 0.37);
        assert!(offline_mean(&[]).is_err());
    }

    #[test]
    fn mismatched_pairing_rejected() {
        assert!(EvalTrace::pair(&[0.1], &[]).is_err());
    }

    #[test]
    fn sample_std() {
        let s = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn omega_is_scale_invariant(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.01f64..1.0), 1..20),
            scale in 0.1f64..10.0,
        ) {
            let (a, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let base = omega_all(&EvalTrace::pair(&a, &r).unwrap()).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * scale).collect();
            let sr: Vec<f64> = r.iter().map(|x| x * scale).collect();
            let scaled = omega_all(&EvalTrace::pair(&sa, &sr).unwrap()).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn reference_against_itself_is_one(r in proptest::collection::vec(0.01f64..1.0, 1..30)) {
            prop_assert_eq!(omega_all(&EvalTrace::pair(&r, &r).unwrap()).unwrap(), 1.0);
        }
    }
}

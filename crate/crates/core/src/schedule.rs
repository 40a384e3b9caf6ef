use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Result, SealError};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_TIMESTEPS: usize = 1000;

/// Cumulative signal coefficients `alpha_bar[t]`, strictly decreasing in (0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = SealError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        NoiseSchedule::from_alpha_bar(v)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.alpha_bar
    }
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(SealError::Invalid(
                "schedule needs at least one step".into(),
            ));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(SealError::Invalid(
                "alpha_bar entries must lie in (0, 1)".into(),
            ));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(SealError::Invalid(
                "alpha_bar must be strictly decreasing".into(),
            ));
        }
        Ok(Self { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            SealError::Invalid(format!(
                "timestep {t} outside [0, {})",
                self.alpha_bar.len()
            ))
        })
    }
}

/// Linear beta schedule on `[1e-4, 0.02]`, accumulated into `alpha_bar`.
pub fn make_schedule(timesteps: usize) -> Result<NoiseSchedule> {
    if timesteps < 1 {
        return Err(SealError::Invalid("T must be ≥ 1".into()));
    }
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for i in 0..timesteps {
        let beta = if timesteps == 1 {
            BETA_START
        } else {
            BETA_START + (BETA_END - BETA_START) * i as f64 / (timesteps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// `sqrt(a) * z + sqrt(1 - a) * eps` at the schedule's `alpha_bar[t]`.
pub fn add_noise(z: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(SealError::ShapeMismatch(format!(
            "latent {:?} vs noise {:?}",
            z.shape(),
            eps.shape()
        )));
    }
    let a = schedule.at(t)?;
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(z.zip(eps, |zv, ev| s * zv + n * ev))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousand_step_schedule() {
        let s = make_schedule(1000).unwrap();
        assert_eq!(s.len(), 1000);
        assert_eq!(s.alpha_bar()[0], 1.0 - 1e-4);
        // direct product oracle
        let mut prod = 1.0;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar()[999] - prod).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1).unwrap();
        assert_eq!(s.alpha_bar(), &[0.9999]);
        assert!(make_schedule(0).is_err());
    }

    #[test]
    fn monotone_for_all_lengths() {
        for t in 1..=1000 {
            let s = make_schedule(t).unwrap();
            assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn noising_hand_value() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.25]).unwrap();
        let out = add_noise(&Tensor::scalar(1.0), 0, &Tensor::scalar(2.0), &s).unwrap();
        assert!((out.as_scalar() - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-12);
        assert!((out.as_scalar() - 2.23205).abs() < 1e-5);
    }

    #[test]
    fn noising_limits() {
        let z = Tensor::row(vec![0.3, -0.7]);
        let e = Tensor::row(vec![1.1, 0.4]);
        let near_one = NoiseSchedule::from_alpha_bar(vec![1.0 - 1e-12]).unwrap();
        let out = add_noise(&z, 0, &e, &near_one).unwrap();
        for (o, zv) in out.data().iter().zip(z.data()) {
            assert!((o - zv).abs() < 1e-5);
        }
        let near_zero = NoiseSchedule::from_alpha_bar(vec![1e-12]).unwrap();
        let out = add_noise(&z, 0, &e, &near_zero).unwrap();
        for (o, ev) in out.data().iter().zip(e.data()) {
            assert!((o - ev).abs() < 1e-5);
        }
    }

    #[test]
    fn noising_errors() {
        let s = make_schedule(10).unwrap();
        assert!(add_noise(&Tensor::row(vec![1.0]), 0, &Tensor::row(vec![1.0, 2.0]), &s).is_err());
        assert!(add_noise(&Tensor::scalar(1.0), 10, &Tensor::scalar(1.0), &s).is_err());
    }
}

//! AdamW with bias correction and decoupled weight decay.

use crate::config::OptimizerConfig;
use crate::error::{Result, SealError};

#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// One moment buffer per tensor, sized by `sizes`.
    pub fn new(cfg: &OptimizerConfig, lr: f64, sizes: &[usize]) -> Result<Self> {
        if cfg.kind != "adamw" {
            return Err(SealError::InvalidConfig(vec![format!(
                "unsupported optimizer kind: {}",
                cfg.kind
            )]));
        }
        Ok(Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }

    /// Advances the shared step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        assert!(self.t > 0, "begin_step must precede update");
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(param.len(), m.len());
        assert_eq!(grad.len(), m.len());
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            param[i] -= self.lr * self.weight_decay * param[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            param[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_by_hand() {
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(&cfg, 0.1, &[1]).unwrap();
        let mut p = [1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.5]);
        // decay: 1 - 0.1*0.01 = 0.999; m_hat = 0.5, v_hat = 0.25
        let p1 = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - p1).abs() < 1e-10);

        opt.begin_step();
        opt.update(0, &mut p, &[-1.0]);
        let m = 0.9 * 0.05 + -0.1;
        let v = 0.999 * 0.00025 + 0.001 * 1.0;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64 * 0.999);
        let p2 = p1 * 0.999 - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((p[0] - p2).abs() < 1e-10);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_about_lr() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&cfg, 1e-3, &[3]).unwrap();
        let mut p = [0.0, 0.0, 0.0];
        opt.begin_step();
        opt.update(0, &mut p, &[3.0, -1e-3, 10.0]);
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_unknown_kind() {
        let cfg = OptimizerConfig {
            kind: "sgd".into(),
            ..Default::default()
        };
        assert!(AdamW::new(&cfg, 1e-3, &[1]).is_err());
    }
}

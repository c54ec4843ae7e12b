//! Energy-margin regularization on current-task logits and virtual outliers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{huber, huber_grad, logsumexp, softmax_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossShape {
    #[default]
    Huber,
    /// Plain squared hinge, `r²`.
    Mse,
}

impl LossShape {
    fn value(self, r: f64, delta: f64) -> Result<f64> {
        match self {
            LossShape::Huber => huber(r, delta),
            LossShape::Mse => Ok(r * r),
        }
    }

    fn grad(self, r: f64, delta: f64) -> Result<f64> {
        match self {
            LossShape::Huber => huber_grad(r, delta),
            LossShape::Mse => Ok(2.0 * r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VorConfig {
    pub lambda: f64,
    pub tau_current: f64,
    pub tau_outlier: f64,
    pub delta: f64,
    pub shape: LossShape,
}

impl Default for VorConfig {
    fn default() -> Self {
        VorConfig {
            lambda: 0.1,
            tau_current: -24.0,
            tau_outlier: -3.0,
            delta: 1.0,
            shape: LossShape::Huber,
        }
    }
}

impl VorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(
                "vor.lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::config("vor.delta", format!("must be > 0, got {}", self.delta)));
        }
        if !self.tau_current.is_finite() {
            return Err(Error::config("vor.tau_current", "must be finite"));
        }
        if !self.tau_outlier.is_finite() {
            return Err(Error::config("vor.tau_outlier", "must be finite"));
        }
        Ok(())
    }
}

/// Per-row `−logsumexp`.
pub fn energy(logits: &Tensor) -> Result<Vec<f64>> {
    if logits.shape().len() != 2 {
        return Err(Error::shape(
            "energy",
            format!("expected a matrix, got {:?}", logits.shape()),
        ));
    }
    if logits.cols() == 0 {
        return Err(Error::Empty("energy"));
    }
    (0..logits.rows())
        .map(|i| logsumexp(logits.row(i)).map(|v| -v))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad_current: Tensor,
    pub grad_outlier: Tensor,
}

/// Hinge-shaped energy margins: current energies pushed below `tau_current`,
/// outlier energies pushed above `tau_outlier`. Gradients are w.r.t. the logits.
pub fn vor_loss(current: &Tensor, outlier: &Tensor, cfg: &VorConfig) -> Result<LossGrad> {
    if current.shape().len() != 2 || outlier.shape().len() != 2 || current.cols() != outlier.cols() {
        return Err(Error::shape(
            "vor_loss",
            format!("current {:?} vs outlier {:?}", current.shape(), outlier.shape()),
        ));
    }
    if current.rows() == 0 || outlier.rows() == 0 {
        return Err(Error::Empty("vor_loss"));
    }
    let c = current.cols();
    let mut value = 0.0;
    let mut grad_current = Tensor::zeros(current.shape());
    let mut grad_outlier = Tensor::zeros(outlier.shape());
    let mut p = vec![0.0; c];

    let n = current.rows() as f64;
    let mut part = 0.0;
    for (i, e) in energy(current)?.into_iter().enumerate() {
        let r = e - cfg.tau_current;
        if r <= 0.0 {
            continue;
        }
        part += cfg.shape.value(r, cfg.delta)?;
        // dE/dlogit = −softmax
        let g = cfg.shape.grad(r, cfg.delta)? / n;
        softmax_into(current.row(i), &mut p);
        for (o, &pj) in grad_current.row_mut(i).iter_mut().zip(&p) {
            *o = -g * pj;
        }
    }
    value += part / n;

    let m = outlier.rows() as f64;
    let mut part = 0.0;
    for (i, e) in energy(outlier)?.into_iter().enumerate() {
        let r = cfg.tau_outlier - e;
        if r <= 0.0 {
            continue;
        }
        part += cfg.shape.value(r, cfg.delta)?;
        let g = cfg.shape.grad(r, cfg.delta)? / m;
        softmax_into(outlier.row(i), &mut p);
        for (o, &pj) in grad_outlier.row_mut(i).iter_mut().zip(&p) {
            *o = g * pj;
        }
    }
    value += part / m;

    Ok(LossGrad {
        value,
        grad_current,
        grad_outlier,
    })
}

/// `ce + λ·vor`. The current-logit gradients are added; the outlier gradient is scaled.
pub fn combined_loss(ce: (f64, &Tensor), vor: &LossGrad, lambda: f64) -> Result<LossGrad> {
    let (ce_value, ce_grad) = ce;
    if ce_grad.shape() != vor.grad_current.shape() {
        return Err(Error::shape(
            "combined_loss",
            format!(
                "ce grad {:?} vs vor grad {:?}",
                ce_grad.shape(),
                vor.grad_current.shape()
            ),
        ));
    }
    let mut grad_current = ce_grad.clone();
    grad_current.axpy(lambda, &vor.grad_current)?;
    Ok(LossGrad {
        value: ce_value + lambda * vor.value,
        grad_current,
        grad_outlier: vor.grad_outlier.scale(lambda),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_logits_energy() {
        let e = energy(&Tensor::zeros(&[3, 10])).unwrap();
        for x in e {
            assert!((x + 10f64.ln()).abs() < 1e-12);
        }
        let shifted = energy(&row(&[1.0, 2.0, 3.5])).unwrap()[0] - energy(&row(&[6.0, 7.0, 8.5])).unwrap()[0];
        assert!((shifted - 5.0).abs() < 1e-12);
    }

    /// `−(m + ln Σ exp(x − m))` with the sum compensated and taken in ascending order.
    fn energy_oracle(row: &[f64]) -> f64 {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut terms: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        terms.sort_by(f64::total_cmp);
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for t in terms {
            let y = s + t;
            c += if s.abs() >= t.abs() { (s - y) + t } else { (t - y) + s };
            s = y;
        }
        -(m + (s + c).ln())
    }

    #[test]
    fn energy_matches_compensated_oracle() {
        let mut rng = Rng::new(77);
        for scale in [1.0, 10.0, 300.0] {
            let x = rng.gaussian_tensor(&[5, 8], scale);
            for (i, e) in energy(&x).unwrap().into_iter().enumerate() {
                let o = energy_oracle(x.row(i));
                assert!((e - o).abs() <= 1e-12 * o.abs().max(1.0), "{e} vs {o}");
            }
        }
    }

    #[test]
    fn satisfied_margins_give_zero() {
        let cfg = VorConfig::default();
        // energy ≈ −30 ≤ −24, outlier energy ≈ −log 2 ≥ −3
        let cur = row(&[30.0, 0.0]);
        let out = row(&[0.0, 0.0]);
        let l = vor_loss(&cur, &out, &cfg).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_current.data().iter().all(|&x| x == 0.0));
        assert!(l.grad_outlier.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn quadratic_branch_value() {
        let cfg = VorConfig::default();
        // single logit ℓ gives E = −ℓ; want E = τ_C + 0.5
        let cur = row(&[24.0 - 0.5]);
        let out = row(&[0.0]);
        let l = vor_loss(&cur, &out, &cfg).unwrap();
        assert!((l.value - 0.125).abs() < 1e-12);
    }

    fn fd_check(cfg: &VorConfig, seed: u64) {
        let mut rng = Rng::new(seed);
        // energies straddling both thresholds
        let cur = rng.gaussian_tensor(&[6, 4], 6.0).map(|x| x + 20.0);
        let out = rng.gaussian_tensor(&[5, 4], 2.0);
        let l = vor_loss(&cur, &out, cfg).unwrap();
        let h = 1e-5;
        for (which, base, grad) in [(0, &cur, &l.grad_current), (1, &out, &l.grad_outlier)] {
            for k in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.data_mut()[k] += h;
                minus.data_mut()[k] -= h;
                let f = |t: &Tensor| {
                    if which == 0 {
                        vor_loss(t, &out, cfg).unwrap().value
                    } else {
                        vor_loss(&cur, t, cfg).unwrap().value
                    }
                };
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                let ana = grad.data()[k];
                let rel = (num - ana).abs() / ana.abs().max(num.abs()).max(1e-3);
                assert!(rel < 1e-5, "seed {seed} tensor {which} entry {k}: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            fd_check(&VorConfig::default(), seed);
            fd_check(
                &VorConfig {
                    shape: LossShape::Mse,
                    ..VorConfig::default()
                },
                seed + 10,
            );
        }
    }

    #[test]
    fn combined_arithmetic() {
        let g = Tensor::zeros(&[1, 2]);
        let vor = LossGrad {
            value: 0.5,
            grad_current: g.clone(),
            grad_outlier: g.clone(),
        };
        assert!((combined_loss((2.0, &g), &vor, 0.1).unwrap().value - 2.05).abs() < 1e-15);
        assert_eq!(combined_loss((2.0, &g), &vor, 0.0).unwrap().value, 2.0);
        assert!(combined_loss((2.0, &Tensor::zeros(&[2, 2])), &vor, 0.1).is_err());
    }

    #[test]
    fn raising_max_logit_lowers_energy_and_hinge() {
        let cfg = VorConfig::default();
        let out = row(&[0.0, 0.0]);
        let mut prev = vor_loss(&row(&[3.0, 1.0]), &out, &cfg).unwrap().value;
        for step in 1..10 {
            let v = vor_loss(&row(&[3.0 + step as f64, 1.0]), &out, &cfg).unwrap().value;
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn descent_step_raises_outlier_energy() {
        let cfg = VorConfig::default();
        let cur = row(&[40.0, 0.0, 0.0]);
        let out = row(&[5.0, 4.0, 3.0]);
        let l = vor_loss(&cur, &out, &cfg).unwrap();
        let mut stepped = out.clone();
        stepped.axpy(-0.1, &l.grad_outlier).unwrap();
        assert!(energy(&stepped).unwrap()[0] > energy(&out).unwrap()[0]);
    }

    #[test]
    fn validation() {
        assert!(VorConfig::default().validate().is_ok());
        let bad = VorConfig {
            lambda: -1.0,
            ..VorConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { ref path, .. }) if path == "vor.lambda"));
        assert!(vor_loss(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 3]), &VorConfig::default()).is_err());
    }
}

//! Gaussian blobs placed on a circle, one blob per class.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Split, TaskStream};
use crate::kernel::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Class means sit at this distance from the origin in the first two coordinates.
    pub radius: f64,
    /// Standard deviation of the random angle offset of each mean, in radians.
    pub angular_jitter: f64,
    /// Isotropic standard deviation of every class.
    pub class_std: f64,
    /// Fixed data seed; when absent the run seed is used.
    pub seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 2,
            classes_per_task: 2,
            train_per_class: 100,
            test_per_class: 100,
            dim: 8,
            radius: 4.0,
            angular_jitter: 0.0,
            class_std: 1.0,
            seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn total_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<()> {
        let p = |f: &str| format!("data.{f}");
        if self.tasks == 0 {
            return Err(Error::config(p("tasks"), "must be >= 1"));
        }
        if self.classes_per_task == 0 {
            return Err(Error::config(p("classes_per_task"), "must be >= 1"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config(p("train_per_class"), "both splits need samples"));
        }
        if self.dim < 2 {
            return Err(Error::config(p("dim"), "must be >= 2"));
        }
        if !(self.class_std > 0.0) {
            return Err(Error::config(
                p("class_std"),
                format!("must be > 0, got {}", self.class_std),
            ));
        }
        if !(self.radius > 0.0) && self.total_classes() > 1 {
            return Err(Error::config(p("radius"), "class means would coincide"));
        }
        if !(self.angular_jitter >= 0.0) {
            return Err(Error::config(p("angular_jitter"), "must be >= 0"));
        }
        Ok(())
    }

    /// Class means, one row per class, in class order.
    pub fn means(&self, rng: &mut Rng) -> Result<Tensor> {
        let k = self.total_classes();
        let mut m = Tensor::zeros(&[k, self.dim]);
        for c in 0..k {
            let angle = TAU * c as f64 / k as f64 + self.angular_jitter * rng.normal();
            let row = m.row_mut(c);
            row[0] = self.radius * angle.cos();
            row[1] = self.radius * angle.sin();
        }
        for a in 0..k {
            for b in a + 1..k {
                if m.row(a) == m.row(b) {
                    return Err(Error::InvalidArgument(format!("class means {a} and {b} coincide")));
                }
            }
        }
        Ok(m)
    }
}

fn draw(spec: &SyntheticSpec, means: &Tensor, per_class: usize, rng: &mut Rng) -> Result<Split> {
    let k = means.rows();
    let mut data = Vec::with_capacity(k * per_class * spec.dim);
    let mut labels = Vec::with_capacity(k * per_class);
    for c in 0..k {
        for _ in 0..per_class {
            for &mu in means.row(c) {
                data.push(mu + spec.class_std * rng.normal());
            }
            labels.push(c);
        }
    }
    Split::new(Tensor::from_vec(&[k * per_class, spec.dim], data)?, labels)
}

/// The stream is a pure function of `(spec, seed)`; classes are split into
/// tasks in class order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let root = Rng::new(spec.seed.unwrap_or(seed)).split("synthetic");
    let means = spec.means(&mut root.split("means"))?;
    let train = draw(spec, &means, spec.train_per_class, &mut root.split("train"))?;
    let test = draw(spec, &means, spec.test_per_class, &mut root.split("test"))?;
    let order: Vec<usize> = (0..spec.total_classes()).collect();
    TaskStream::from_labeled(&train, &test, &order, spec.classes_per_task)
}

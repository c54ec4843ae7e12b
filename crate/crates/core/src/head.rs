//! Per-task linear heads and their concatenation for class-incremental inference.

use crate::error::{Error, Result};
use crate::kernel::{softmax_into, Fnv, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    /// `C_t × d`.
    pub weight: Tensor,
    /// `C_t`; stays zero when the bank is built without biases.
    pub bias: Tensor,
    pub task: usize,
    trainable: bool,
}

/// Gradients of a head, same layout as [`TaskHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl TaskHead {
    /// Gaussian weights with standard deviation `std`, zero bias.
    pub fn new(task: usize, classes: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        TaskHead {
            weight: rng.gaussian_tensor(&[classes, dim], std),
            bias: Tensor::zeros(&[classes]),
            task,
            trainable: true,
        }
    }

    pub fn from_parts(task: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.rows()] {
            return Err(Error::shape(
                "task head",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(TaskHead {
            weight,
            bias,
            task,
            trainable: true,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(&self.weight.checksum().to_le_bytes());
        h.write(&self.bias.checksum().to_le_bytes());
        h.finish()
    }

    /// Gradients of a loss given `dL/dlogits` for inputs `z`, plus `dL/dz`.
    pub fn backward(&self, z: &Tensor, dlogits: &Tensor) -> Result<(HeadGrads, Tensor)> {
        if dlogits.shape() != [z.rows(), self.classes()] {
            return Err(Error::shape(
                "head backward",
                format!(
                    "dlogits {:?} for {} inputs, {} classes",
                    dlogits.shape(),
                    z.rows(),
                    self.classes()
                ),
            ));
        }
        let weight = dlogits.transpose()?.matmul(z)?;
        let mut bias = Tensor::zeros(&[self.classes()]);
        for i in 0..dlogits.rows() {
            for (b, g) in bias.data_mut().iter_mut().zip(dlogits.row(i)) {
                *b += g;
            }
        }
        let dz = dlogits.matmul(&self.weight)?;
        Ok((HeadGrads { weight, bias }, dz))
    }
}

/// Affine map `z · Wᵀ + b`.
pub fn head_logits(head: &TaskHead, z: &Tensor) -> Result<Tensor> {
    if z.shape().len() != 2 || z.cols() != head.dim() {
        return Err(Error::shape(
            "head_logits",
            format!("features {:?}, head width {}", z.shape(), head.dim()),
        ));
    }
    let mut out = z.matmul_t(&head.weight)?;
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(head.bias.data()) {
            *o += b;
        }
    }
    out.debug_finite("head_logits")?;
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskHeadBank {
    heads: Vec<TaskHead>,
    offsets: Vec<usize>,
}

impl TaskHeadBank {
    pub fn new() -> Self {
        TaskHeadBank::default()
    }

    /// Appends the head for the next task. Heads must arrive in task order.
    pub fn push(&mut self, head: TaskHead) -> Result<()> {
        if head.task != self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "expected head for task {}, got task {}",
                self.heads.len(),
                head.task
            )));
        }
        if let Some(first) = self.heads.first() {
            if first.dim() != head.dim() {
                return Err(Error::shape("head bank", "feature widths differ"));
            }
        }
        self.offsets.push(self.total_classes());
        self.heads.push(head);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn head(&self, task: usize) -> Result<&TaskHead> {
        self.heads.get(task).ok_or(Error::MissingHead(task))
    }

    pub fn heads(&self) -> &[TaskHead] {
        &self.heads
    }

    /// Mutable access to a head that has not been frozen yet.
    pub fn head_mut(&mut self, task: usize) -> Result<&mut TaskHead> {
        let h = self.heads.get_mut(task).ok_or(Error::MissingHead(task))?;
        if !h.trainable {
            return Err(Error::FrozenHead(task));
        }
        Ok(h)
    }

    pub fn freeze(&mut self, task: usize) -> Result<()> {
        self.heads.get_mut(task).ok_or(Error::MissingHead(task))?.trainable = false;
        Ok(())
    }

    pub fn offset(&self, task: usize) -> Result<usize> {
        self.offsets.get(task).copied().ok_or(Error::MissingHead(task))
    }

    /// Global class id of `(task, local class)`.
    pub fn global_class(&self, task: usize, local: usize) -> Result<usize> {
        let h = self.head(task)?;
        if local >= h.classes() {
            return Err(Error::LabelOutOfRange {
                label: local,
                classes: h.classes(),
            });
        }
        Ok(self.offsets[task] + local)
    }

    /// Inverse of [`TaskHeadBank::global_class`].
    pub fn locate(&self, global: usize) -> Option<(usize, usize)> {
        let t = self.offsets.partition_point(|&o| o <= global).checked_sub(1)?;
        let local = global - self.offsets[t];
        (local < self.heads[t].classes()).then_some((t, local))
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(TaskHead::classes).sum()
    }

    /// Concatenated logits of heads `0..upto` (exclusive), in task order.
    pub fn full_logits(&self, z: &Tensor, upto: usize) -> Result<Tensor> {
        if upto == 0 || upto > self.heads.len() {
            return Err(Error::MissingHead(upto.saturating_sub(1)));
        }
        let parts: Vec<Tensor> = self.heads[..upto]
            .iter()
            .map(|h| head_logits(h, z))
            .collect::<Result<_>>()?;
        let width: usize = parts.iter().map(Tensor::cols).sum();
        let n = z.rows();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            for p in &parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Tensor::from_vec(&[n, width], data)
    }

    /// Global argmax over heads `0..upto`; ties go to the lowest index.
    pub fn predict(&self, z: &Tensor, upto: usize) -> Result<Vec<usize>> {
        let logits = self.full_logits(z, upto)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Argmax restricted to the given task's head (local class ids).
    pub fn task_given_prediction(&self, z: &Tensor, task: usize) -> Result<Vec<usize>> {
        let logits = head_logits(self.head(task)?, z)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

/// Index of the maximum; the first maximal index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross entropy over the batch and its gradient, `(softmax − onehot)/n`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} logit rows, {} labels", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::Empty("cross_entropy"));
    }
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        let row = logits.row(i);
        let g = grad.row_mut(i);
        softmax_into(row, g);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        g[y] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    grad.data_mut().iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_head(task: usize, w: Vec<Vec<f64>>, b: Vec<f64>) -> TaskHead {
        let n = b.len();
        TaskHead::from_parts(task, Tensor::from_rows(&w).unwrap(), Tensor::from_vec(&[n], b).unwrap()).unwrap()
    }

    #[test]
    fn zero_head_zero_logits() {
        let h = fixed_head(0, vec![vec![0.0; 3]; 2], vec![0.0; 2]);
        let z = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(head_logits(&h, &z).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_head() {
        let h = TaskHead::from_parts(0, Tensor::identity(3), Tensor::zeros(&[3])).unwrap();
        let e1 = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(head_logits(&h, &e1).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn logits_match_loop_oracle() {
        let mut rng = Rng::new(4);
        let h = TaskHead {
            bias: rng.gaussian_tensor(&[3], 1.0),
            ..TaskHead::new(0, 3, 5, 1.0, &mut rng)
        };
        let z = rng.gaussian_tensor(&[4, 5], 1.0);
        let got = head_logits(&h, &z).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += h.weight.get(c, k) * z.get(i, k);
                }
                s += h.bias.data()[c];
                assert!((got.get(i, c) - s).abs() <= 1e-12);
            }
        }
        assert!(head_logits(&h, &Tensor::zeros(&[1, 4])).is_err());
    }

    fn two_task_bank() -> TaskHeadBank {
        // task 0 logits [1, 2], task 1 logits [3, 0] for z = [1]
        let mut bank = TaskHeadBank::new();
        bank.push(fixed_head(0, vec![vec![1.0], vec![2.0]], vec![0.0, 0.0]))
            .unwrap();
        bank.push(fixed_head(1, vec![vec![3.0], vec![0.0]], vec![0.0, 0.0]))
            .unwrap();
        bank
    }

    #[test]
    fn concatenation_and_global_argmax() {
        let bank = two_task_bank();
        let z = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert_eq!(bank.full_logits(&z, 2).unwrap().data(), &[1.0, 2.0, 3.0, 0.0]);
        let pred = bank.predict(&z, 2).unwrap();
        assert_eq!(pred, vec![2]);
        assert_eq!(bank.locate(2), Some((1, 0)));
        assert_eq!(bank.global_class(1, 1).unwrap(), 3);
        // single task reduces to its head
        let single = bank.full_logits(&z, 1).unwrap();
        assert_eq!(single, head_logits(bank.head(0).unwrap(), &z).unwrap());
        assert!(bank.full_logits(&z, 3).is_err());
    }

    #[test]
    fn ties_choose_lowest_global_index() {
        let mut bank = TaskHeadBank::new();
        bank.push(fixed_head(0, vec![vec![0.0], vec![1.0]], vec![0.0, 0.0]))
            .unwrap();
        bank.push(fixed_head(1, vec![vec![1.0], vec![1.0]], vec![0.0, 0.0]))
            .unwrap();
        let z = Tensor::from_rows(&[vec![2.0]]).unwrap();
        // logits [0, 2, 2, 2]: three-way tie resolved to global class 1
        assert_eq!(bank.predict(&z, 2).unwrap(), vec![1]);
    }

    #[test]
    fn task_given_recovers_local_class() {
        let bank = two_task_bank();
        let z = Tensor::from_rows(&[vec![1.0]]).unwrap();
        // global argmax lands in task 1, but within task 0 the answer is local class 1
        assert_eq!(bank.predict(&z, 2).unwrap(), vec![2]);
        assert_eq!(bank.task_given_prediction(&z, 0).unwrap(), vec![1]);

        let mut one = TaskHeadBank::new();
        one.push(fixed_head(0, vec![vec![0.1], vec![0.9]], vec![0.0, 0.0]))
            .unwrap();
        assert_eq!(one.task_given_prediction(&z, 0).unwrap(), one.predict(&z, 1).unwrap());
        assert!(bank.task_given_prediction(&z, 5).is_err());
    }

    #[test]
    fn frozen_heads_reject_mutation() {
        let mut bank = two_task_bank();
        bank.freeze(0).unwrap();
        assert!(matches!(bank.head_mut(0), Err(Error::FrozenHead(0))));
        assert!(bank.head_mut(1).is_ok());
    }

    #[test]
    fn cross_entropy_values() {
        let logits = Tensor::zeros(&[2, 4]);
        let (l, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let confident = Tensor::from_rows(&[vec![0.0, 1e6, 0.0]]).unwrap();
        let (l, _) = cross_entropy(&confident, &[1]).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&logits, &[0, 4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_fd() {
        let mut rng = Rng::new(8);
        let logits = rng.gaussian_tensor(&[3, 5], 2.0);
        let labels = [4, 0, 2];
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[k] += h;
            let mut m = logits.clone();
            m.data_mut()[k] -= h;
            let fd = (cross_entropy(&p, &labels).unwrap().0 - cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            let a = g.data()[k];
            assert!((a - fd).abs() / a.abs().max(fd.abs()) < 1e-6, "k={k}: {a} vs {fd}");
        }
    }

    #[test]
    fn shift_keeps_gradient_and_argmax() {
        let row = Tensor::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let shifted = row.map(|x| x + 17.0);
        let (_, g1) = cross_entropy(&row, &[0]).unwrap();
        let (_, g2) = cross_entropy(&shifted, &[0]).unwrap();
        assert!(g1.max_abs_diff(&g2) < 1e-12);
        assert_eq!(argmax(row.data()), argmax(shifted.data()));
    }

    #[test]
    fn head_backward_matches_fd() {
        let mut rng = Rng::new(12);
        let head = TaskHead {
            bias: rng.gaussian_tensor(&[3], 0.5),
            ..TaskHead::new(0, 3, 4, 0.7, &mut rng)
        };
        let z = rng.gaussian_tensor(&[5, 4], 1.0);
        let labels = [0, 1, 2, 1, 0];
        let loss = |h: &TaskHead| cross_entropy(&head_logits(h, &z).unwrap(), &labels).unwrap().0;
        let (_, dl) = cross_entropy(&head_logits(&head, &z).unwrap(), &labels).unwrap();
        let (g, _) = head.backward(&z, &dl).unwrap();
        let h = 1e-6;
        for k in 0..head.weight.len() {
            let mut p = head.clone();
            p.weight.data_mut()[k] += h;
            let mut m = head.clone();
            m.weight.data_mut()[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = g.weight.data()[k];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5);
        }
        for k in 0..3 {
            let mut p = head.clone();
            p.bias.data_mut()[k] += h;
            let mut m = head.clone();
            m.bias.data_mut()[k] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((g.bias.data()[k] - fd).abs() < 1e-8);
        }
    }
}

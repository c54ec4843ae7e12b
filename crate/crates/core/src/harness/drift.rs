//! Representation and accuracy drift between evaluations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cosine, Tensor};

/// `after_final[i] − right_after[i]` for every task but the last, where
/// `history[t][i]` is the task-given accuracy on task `i` after training task `t`.
pub fn drift_table(history: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = history.len();
    if t == 0 {
        return Err(Error::IncompleteHistory("no evaluations recorded".into()));
    }
    for (k, row) in history.iter().enumerate() {
        if row.len() != k + 1 {
            return Err(Error::IncompleteHistory(format!(
                "evaluation after task {} has {} entries",
                k + 1,
                row.len()
            )));
        }
    }
    let last = &history[t - 1];
    Ok((0..t - 1).map(|i| last[i] - history[i][i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepresentationDrift {
    pub cosine: f64,
    pub cka_linear: f64,
    pub cka_kernel: f64,
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
        return Err(Error::shape(
            "representation_drift",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    if x.rows() < 2 {
        return Err(Error::InsufficientPoints("drift needs at least two rows".into()));
    }
    Ok(())
}

pub fn representation_drift(before: &Tensor, after: &Tensor) -> Result<RepresentationDrift> {
    check_pair(before, after)?;
    let mut cos = 0.0;
    for i in 0..before.rows() {
        cos += cosine(before.row(i), after.row(i))?;
    }
    Ok(RepresentationDrift {
        cosine: cos / before.rows() as f64,
        cka_linear: linear_cka(before, after)?,
        cka_kernel: kernel_cka(before, after)?,
    })
}

fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut out = x.clone();
    for i in 0..n {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

fn frob_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// `‖Ycᵀ Xc‖²_F / (‖Xcᵀ Xc‖_F ‖Ycᵀ Yc‖_F)` on column-centered inputs.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xy = yc.transpose()?.matmul(&xc)?;
    let xx = xc.transpose()?.matmul(&xc)?;
    let yy = yc.transpose()?.matmul(&yc)?;
    let denom = frob_sq(&xx).sqrt() * frob_sq(&yy).sqrt();
    if !(denom > 0.0) {
        return Err(Error::Degenerate("linear CKA of a zero-variance representation".into()));
    }
    Ok(frob_sq(&xy) / denom)
}

fn sq_dists(x: &Tensor) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for (a, b) in x.row(i).iter().zip(x.row(j)) {
                s += (a - b) * (a - b);
            }
            d[i * n + j] = s;
        }
    }
    d
}

/// RBF Gram matrix with bandwidth set to the median off-diagonal pairwise distance.
pub fn rbf_gram(x: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    let d2 = sq_dists(x);
    let mut off: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j > i).map(move |j| (i, j)))
        .map(|(i, j)| d2[i * n + j].sqrt())
        .collect();
    off.sort_by(f64::total_cmp);
    let median = if off.len() % 2 == 1 {
        off[off.len() / 2]
    } else {
        0.5 * (off[off.len() / 2 - 1] + off[off.len() / 2])
    };
    if !(median > 0.0) {
        return Err(Error::Degenerate("median pairwise distance is zero".into()));
    }
    let s2 = 2.0 * median * median;
    Tensor::from_vec(&[n, n], d2.iter().map(|v| (-v / s2).exp()).collect())
}

/// Double-centers a Gram matrix: `H K H` with `H = I − 11ᵀ/n`.
fn center_gram(k: &Tensor) -> Tensor {
    let n = k.rows();
    let mut row_mean = vec![0.0; n];
    let mut total = 0.0;
    for (i, m) in row_mean.iter_mut().enumerate() {
        let mut s = 0.0;
        for v in k.row(i) {
            s += v;
        }
        *m = s / n as f64;
        total += s;
    }
    let grand = total / (n * n) as f64;
    let mut out = k.clone();
    for i in 0..n {
        for j in 0..n {
            // symmetric Gram: column mean equals row mean
            out.row_mut(i)[j] = k.get(i, j) - row_mean[i] - row_mean[j] + grand;
        }
    }
    out
}

/// CKA between two Gram matrices via the centered HSIC ratio.
pub fn gram_cka(k: &Tensor, l: &Tensor) -> Result<f64> {
    let kc = center_gram(k);
    let lc = center_gram(l);
    let dot = |a: &Tensor, b: &Tensor| -> f64 { a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum() };
    let denom = (dot(&kc, &kc) * dot(&lc, &lc)).sqrt();
    if !(denom > 0.0) {
        return Err(Error::Degenerate("kernel CKA of a constant Gram matrix".into()));
    }
    Ok(dot(&kc, &lc) / denom)
}

pub fn kernel_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    gram_cka(&rbf_gram(x)?, &rbf_gram(y)?)
}

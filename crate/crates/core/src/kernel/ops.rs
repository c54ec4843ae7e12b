use crate::error::{Error, Result};

/// `log Σ exp(v_j)`, stabilized by subtracting the maximum.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return Ok(m);
    }
    let s = v.iter().fold(0.0, |acc, &x| acc + (x - m).exp());
    Ok(m + s.ln())
}

/// Softmax of one row, written into `out`.
pub fn softmax_into(v: &[f64], out: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

/// Huber loss on a residual: `r²/2` up to `δ`, linear `δ(r − δ/2)` beyond.
pub fn huber(r: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    })
}

/// Derivative of [`huber`] with respect to `r`.
pub fn huber_grad(r: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(r.clamp(-delta, delta))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("huber delta must be > 0, got {delta}")));
    }
    Ok(())
}

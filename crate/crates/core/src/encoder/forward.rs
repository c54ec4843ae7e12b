//! Forward pass with activation caching, and the prompt-only backward pass.
//!
//! Per block (pre-norm):
//!   a = LN1(x);  q, k, v = a·Wq + bq, a·Wk + bk, a·Wv + bv
//!   k' = [P_K; k], v' = [P_V; v]
//!   o_h = softmax(q_h k'_hᵀ / √d_h) v'_h
//!   h = x + o·Wo + bo
//!   y = h + gelu(LN2(h)·W1 + b1)·W2 + b2

use rayon::prelude::*;

use super::backbone::{LayerNorm, LayerWeights, LN_EPS};
use super::{FeatureBatch, FeatureSource, FrozenBackbone, PrefixPrompt};
use crate::error::{Error, Result};
use crate::kernel::{matmul_into, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// `out[r×c] = a[r×k] · bᵀ` where `b` is `c×k`.
fn matmul_bt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in ar.iter().zip(br) {
                s += x * y;
            }
            out[i * c + j] = s;
        }
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], ln: &LayerNorm, out: &mut [f64]) -> LnCache {
    let d = ln.gamma.len();
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let xh = (xr[j] - mean) * inv;
            xhat[r * d + j] = xh;
            out[r * d + j] = ln.gamma[j] * xh + ln.beta[j];
        }
    }
    LnCache { xhat, inv_std }
}

/// Accumulates `dL/dx` into `dx` given `dL/dy`.
fn layer_norm_backward(dy: &[f64], ln: &LayerNorm, cache: &LnCache, dx: &mut [f64]) {
    let d = ln.gamma.len();
    let mut g = vec![0.0; d];
    for (r, &inv) in cache.inv_std.iter().enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..d {
            g[j] = dy[r * d + j] * ln.gamma[j];
            mean_g += g[j];
            mean_gx += g[j] * xh[j];
        }
        mean_g /= d as f64;
        mean_gx /= d as f64;
        for j in 0..d {
            dx[r * d + j] += inv * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    q: Vec<f64>,
    /// `(L + S) × d`, prefix rows first.
    k_full: Vec<f64>,
    v_full: Vec<f64>,
    /// `heads × S × (L + S)` attention probabilities.
    attn: Vec<f64>,
    ln2: LnCache,
    /// MLP pre-activation, `S × mlp_dim`.
    pre: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SampleCache {
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

/// Activations from [`encode_cached`], consumed by [`encode_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    prompt_checksum: u64,
    backbone_checksum: u64,
    samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }

    /// Attention probabilities of one sample at one layer, `heads × S × (L + S)`.
    pub fn attention(&self, sample: usize, layer: usize) -> &[f64] {
        &self.samples[sample].layers[layer].attn
    }
}

impl FrozenBackbone {
    /// Token sequence `S × d` for one input row.
    fn tokens(&self, input: &Tensor, i: usize) -> Vec<f64> {
        let c = &self.config;
        let d = c.model_dim;
        let s = c.token_count;
        if input.shape().len() == 3 {
            return input.row(i).to_vec();
        }
        let mut x = vec![0.0; s * d];
        x[..d].copy_from_slice(&self.cls);
        let pt = c.patch_tokens();
        if pt > 0 {
            matmul_into(input.row(i), self.patch.data(), &mut x[d..], 1, c.input_dim, pt * d);
        }
        for (v, p) in x.iter_mut().zip(self.pos.data()) {
            *v += p;
        }
        x
    }

    fn check_input(&self, prompt: &PrefixPrompt, input: &Tensor) -> Result<()> {
        let c = &self.config;
        if !prompt.matches(c) {
            return Err(Error::shape(
                "encode",
                format!("prompt lengths {:?} vs config {:?}", prompt.lengths(), c.prompt_lengths),
            ));
        }
        let ok = match input.shape() {
            [_, m] => *m == c.input_dim,
            [_, s, d] => *s == c.token_count && *d == c.model_dim,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(
                "encode",
                format!(
                    "input {:?}; expected [n, {}] or [n, {}, {}]",
                    input.shape(),
                    c.input_dim,
                    c.token_count,
                    c.model_dim
                ),
            ));
        }
        Ok(())
    }

    fn layer_forward(&self, w: &LayerWeights, pk: &Tensor, pv: &Tensor, x: &mut [f64]) -> LayerCache {
        let c = &self.config;
        let (d, s, nh, dh, hid) = (c.model_dim, c.token_count, c.num_heads, c.head_dim(), c.mlp_dim);
        let l = pk.rows();
        let t = l + s;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut a = vec![0.0; s * d];
        let ln1 = layer_norm(x, &w.ln1, &mut a);
        let mut q = vec![0.0; s * d];
        matmul_into(&a, w.wq.data(), &mut q, s, d, d);
        add_bias(&mut q, &w.bq);
        let mut k_full = vec![0.0; t * d];
        let mut v_full = vec![0.0; t * d];
        k_full[..l * d].copy_from_slice(pk.data());
        v_full[..l * d].copy_from_slice(pv.data());
        matmul_into(&a, w.wk.data(), &mut k_full[l * d..], s, d, d);
        add_bias(&mut k_full[l * d..], &w.bk);
        matmul_into(&a, w.wv.data(), &mut v_full[l * d..], s, d, d);
        add_bias(&mut v_full[l * d..], &w.bv);

        let mut attn = vec![0.0; nh * s * t];
        let mut o = vec![0.0; s * d];
        for h in 0..nh {
            let off = h * dh;
            for i in 0..s {
                let row = &mut attn[(h * s + i) * t..(h * s + i + 1) * t];
                let qi = &q[i * d + off..i * d + off + dh];
                let mut m = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k_full[j * d + off..j * d + off + dh];
                    let mut sc = 0.0;
                    for (x, y) in qi.iter().zip(kj) {
                        sc += x * y;
                    }
                    *r = sc * scale;
                    m = m.max(*r);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - m).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r /= z;
                }
                let oi = &mut o[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v_full[j * d + off..j * d + off + dh];
                    for (ov, vv) in oi.iter_mut().zip(vj) {
                        *ov += p * vv;
                    }
                }
            }
        }
        let mut proj = vec![0.0; s * d];
        matmul_into(&o, w.wo.data(), &mut proj, s, d, d);
        add_bias(&mut proj, &w.bo);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        let mut b = vec![0.0; s * d];
        let ln2 = layer_norm(x, &w.ln2, &mut b);
        let mut pre = vec![0.0; s * hid];
        matmul_into(&b, w.w1.data(), &mut pre, s, d, hid);
        add_bias(&mut pre, &w.b1);
        let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
        let mut f = vec![0.0; s * d];
        matmul_into(&act, w.w2.data(), &mut f, s, hid, d);
        add_bias(&mut f, &w.b2);
        for (xv, fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }

        LayerCache {
            ln1,
            q,
            k_full,
            v_full,
            attn,
            ln2,
            pre,
        }
    }

    fn forward_sample(&self, prompt: &PrefixPrompt, tokens: Vec<f64>) -> (Vec<f64>, SampleCache) {
        let d = self.config.model_dim;
        let mut x = tokens;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, w) in self.layers.iter().enumerate() {
            layers.push(self.layer_forward(w, prompt.key(li), prompt.value(li), &mut x));
        }
        let mut feat = vec![0.0; d];
        let final_ln = layer_norm(&x[..d], &self.final_ln, &mut feat);
        (feat, SampleCache { layers, final_ln })
    }

    /// Adds prompt gradients of one sample into `grad`.
    fn backward_sample(&self, cache: &SampleCache, upstream: &[f64], grad: &mut PrefixPrompt) {
        let c = &self.config;
        let (d, s, nh, dh, hid) = (c.model_dim, c.token_count, c.num_heads, c.head_dim(), c.mlp_dim);
        let scale = 1.0 / (dh as f64).sqrt();
        let Some(lowest) = c.prompt_lengths.iter().position(|&l| l > 0) else {
            return;
        };

        // gradient w.r.t. the residual stream leaving the last block
        let mut dx = vec![0.0; s * d];
        layer_norm_backward(upstream, &self.final_ln, &cache.final_ln, &mut dx[..d]);

        for li in (lowest..self.layers.len()).rev() {
            let w = &self.layers[li];
            let lc = &cache.layers[li];
            let l = c.prompt_lengths[li];
            let t = l + s;

            // MLP branch: y = h + f(h)
            let mut dh_stream = dx.clone();
            let mut dact = vec![0.0; s * hid];
            matmul_bt(&dx, w.w2.data(), &mut dact, s, d, hid);
            for (g, &u) in dact.iter_mut().zip(&lc.pre) {
                *g *= gelu_grad(u);
            }
            let mut db = vec![0.0; s * d];
            matmul_bt(&dact, w.w1.data(), &mut db, s, hid, d);
            layer_norm_backward(&db, &w.ln2, &lc.ln2, &mut dh_stream);

            // attention branch: h = x + attn(LN1(x))
            let mut do_ = vec![0.0; s * d];
            matmul_bt(&dh_stream, w.wo.data(), &mut do_, s, d, d);
            let mut dq = vec![0.0; s * d];
            let mut dk_full = vec![0.0; t * d];
            let mut dv_full = vec![0.0; t * d];
            let mut da_row = vec![0.0; t];
            for h in 0..nh {
                let off = h * dh;
                for i in 0..s {
                    let a_row = &lc.attn[(h * s + i) * t..(h * s + i + 1) * t];
                    let doi = &do_[i * d + off..i * d + off + dh];
                    let mut dot_ad = 0.0;
                    for j in 0..t {
                        let vj = &lc.v_full[j * d + off..j * d + off + dh];
                        let mut g = 0.0;
                        for (x, y) in doi.iter().zip(vj) {
                            g += x * y;
                        }
                        da_row[j] = g;
                        dot_ad += a_row[j] * g;
                        let dvj = &mut dv_full[j * d + off..j * d + off + dh];
                        for (dv, &dov) in dvj.iter_mut().zip(doi) {
                            *dv += a_row[j] * dov;
                        }
                    }
                    let qi = &lc.q[i * d + off..i * d + off + dh];
                    for j in 0..t {
                        let dsc = a_row[j] * (da_row[j] - dot_ad) * scale;
                        let kj = &lc.k_full[j * d + off..j * d + off + dh];
                        let dqi = &mut dq[i * d + off..i * d + off + dh];
                        for (g, &kv) in dqi.iter_mut().zip(kj) {
                            *g += dsc * kv;
                        }
                        let dkj = &mut dk_full[j * d + off..j * d + off + dh];
                        for (g, &qv) in dkj.iter_mut().zip(qi) {
                            *g += dsc * qv;
                        }
                    }
                }
            }
            if l > 0 {
                for (g, v) in grad.key_mut(li).data_mut().iter_mut().zip(&dk_full[..l * d]) {
                    *g += v;
                }
                for (g, v) in grad.value_mut(li).data_mut().iter_mut().zip(&dv_full[..l * d]) {
                    *g += v;
                }
            }
            if li == lowest {
                break;
            }
            let mut da = vec![0.0; s * d];
            let mut tmp = vec![0.0; s * d];
            matmul_bt(&dq, w.wq.data(), &mut tmp, s, d, d);
            da.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            matmul_bt(&dk_full[l * d..], w.wk.data(), &mut tmp, s, d, d);
            da.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            matmul_bt(&dv_full[l * d..], w.wv.data(), &mut tmp, s, d, d);
            da.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            let mut dx_in = dh_stream;
            layer_norm_backward(&da, &w.ln1, &lc.ln1, &mut dx_in);
            dx = dx_in;
        }
    }
}

fn encode_inner(
    backbone: &FrozenBackbone,
    prompt: &PrefixPrompt,
    inputs: &Tensor,
) -> Result<(FeatureBatch, Vec<SampleCache>)> {
    backbone.check_input(prompt, inputs)?;
    let d = backbone.config.model_dim;
    let n = inputs.rows();
    let results: Vec<(Vec<f64>, SampleCache)> = (0..n)
        .into_par_iter()
        .map(|i| backbone.forward_sample(prompt, backbone.tokens(inputs, i)))
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut caches = Vec::with_capacity(n);
    for (f, c) in results {
        data.extend_from_slice(&f);
        caches.push(c);
    }
    let features = Tensor::from_vec(&[n, d], data)?;
    features.debug_finite("encode")?;
    Ok((
        FeatureBatch {
            features,
            source: FeatureSource::Prompted {
                prompt_checksum: prompt.checksum(),
            },
        },
        caches,
    ))
}

/// `f_{θ⁰, p}(x)` for a batch. Accepts raw `n × input_dim` rows (patchified)
/// or ready-made `n × token_count × d` sequences.
pub fn encode(backbone: &FrozenBackbone, prompt: &PrefixPrompt, inputs: &Tensor) -> Result<FeatureBatch> {
    encode_inner(backbone, prompt, inputs).map(|(f, _)| f)
}

pub fn encode_cached(
    backbone: &FrozenBackbone,
    prompt: &PrefixPrompt,
    inputs: &Tensor,
) -> Result<(FeatureBatch, ForwardCache)> {
    let (f, samples) = encode_inner(backbone, prompt, inputs)?;
    Ok((
        f,
        ForwardCache {
            prompt_checksum: prompt.checksum(),
            backbone_checksum: backbone.checksum(),
            samples,
        },
    ))
}

/// Gradient of `Σ_i upstream_i · feature_i` with respect to every prefix tensor.
pub fn encode_backward(
    backbone: &FrozenBackbone,
    prompt: &PrefixPrompt,
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<PrefixPrompt> {
    if cache.prompt_checksum != prompt.checksum() {
        return Err(Error::StaleCache("prompt changed since the forward pass".into()));
    }
    if cache.backbone_checksum != backbone.checksum() {
        return Err(Error::StaleCache("cache was produced by a different backbone".into()));
    }
    let d = backbone.config.model_dim;
    if upstream.shape() != [cache.samples.len(), d] {
        return Err(Error::shape(
            "encode_backward",
            format!(
                "upstream {:?}, cache holds {} samples of width {d}",
                upstream.shape(),
                cache.samples.len()
            ),
        ));
    }
    let per_sample: Vec<PrefixPrompt> = cache
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, sc)| {
            let mut g = PrefixPrompt::zeros(&backbone.config);
            backbone.backward_sample(sc, upstream.row(i), &mut g);
            g
        })
        .collect();
    // fixed sample-order reduction
    let mut total = PrefixPrompt::zeros(&backbone.config);
    for g in &per_sample {
        total.axpy(1.0, g)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::kernel::{dot, Rng};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            token_count: 4,
            mlp_dim: 12,
            input_dim: 6,
            prompt_lengths: vec![2, 2],
        }
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> (FrozenBackbone, PrefixPrompt, Tensor) {
        let mut rng = Rng::new(seed);
        let bb = FrozenBackbone::random(cfg, &mut rng).unwrap();
        let p = PrefixPrompt::init(cfg, &mut rng);
        let x = rng.gaussian_tensor(&[3, cfg.input_dim], 1.0);
        (bb, p, x)
    }

    /// Plain transformer forward with no notion of prefixes, written independently.
    fn plain_forward(bb: &FrozenBackbone, x: &Tensor) -> Tensor {
        let c = bb.config();
        let empty = EncoderConfig {
            prompt_lengths: vec![0; c.num_layers],
            ..c.clone()
        };
        let mut rows = Vec::new();
        for i in 0..x.rows() {
            let mut t = bb.tokens(x, i);
            for w in &bb.layers {
                let z = PrefixPrompt::zeros(&empty);
                bb.layer_forward(w, z.key(0), z.value(0), &mut t);
            }
            let mut f = vec![0.0; c.model_dim];
            layer_norm(&t[..c.model_dim], &bb.final_ln, &mut f);
            rows.push(f);
        }
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn zero_length_prompt_is_plain_forward() {
        let cfg = EncoderConfig {
            prompt_lengths: vec![0, 0],
            ..tiny()
        };
        let (bb, p, x) = setup(&cfg, 1);
        let f = encode(&bb, &p, &x).unwrap();
        assert!(f.features.max_abs_diff(&plain_forward(&bb, &x)) < 1e-12);
    }

    #[test]
    fn zero_value_prefix_rescales_attention_output() {
        // With P_V = 0 at layer 0, each query's attention output becomes
        // (1 - ε_i) times the unprompted output, where ε_i is the prefix mass.
        let cfg = EncoderConfig {
            prompt_lengths: vec![1, 0],
            ..tiny()
        };
        let (bb, mut p, x) = setup(&cfg, 2);
        p.value_mut(0).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let none = PrefixPrompt::zeros(&EncoderConfig {
            prompt_lengths: vec![0, 0],
            ..tiny()
        });
        let w = &bb.layers[0];
        let t0 = bb.tokens(&x, 0);
        let attn_out = |pk: &Tensor, pv: &Tensor| {
            let mut xs = t0.clone();
            let cache = bb.layer_forward(w, pk, pv, &mut xs);
            (cache, xs)
        };
        let (with_c, _) = attn_out(p.key(0), p.value(0));
        let (plain_c, _) = attn_out(none.key(0), none.value(0));
        let (s, t, nh) = (cfg.token_count, cfg.token_count + 1, cfg.num_heads);
        let dh = cfg.head_dim();
        let d = cfg.model_dim;
        let mut max_eps: f64 = 0.0;
        for h in 0..nh {
            for i in 0..s {
                let row = &with_c.attn[(h * s + i) * t..(h * s + i + 1) * t];
                let eps = row[0];
                max_eps = max_eps.max(eps);
                let plain_row = &plain_c.attn[(h * s + i) * s..(h * s + i + 1) * s];
                for j in 0..s {
                    assert!((row[j + 1] - (1.0 - eps) * plain_row[j]).abs() < 1e-14);
                }
                // outputs: o_i = Σ_j a_ij v_j with v_prefix = 0
                for c in 0..dh {
                    let mut ow = 0.0;
                    let mut op = 0.0;
                    for j in 0..s {
                        ow += row[j + 1] * with_c.v_full[(j + 1) * d + h * dh + c];
                        op += plain_row[j] * plain_c.v_full[j * d + h * dh + c];
                    }
                    assert!((ow - (1.0 - eps) * op).abs() < 1e-12);
                }
            }
        }
        assert!(max_eps > 0.0 && max_eps < 1.0);
        // the prompted forward therefore only deviates through the prefix mass
        let f_with = encode(&bb, &p, &x).unwrap().features;
        let f_plain = plain_forward(&bb, &x);
        assert!(f_with.max_abs_diff(&f_plain) > 0.0);
    }

    #[test]
    fn attention_rows_normalized() {
        let (bb, p, x) = setup(&tiny(), 3);
        let (_, cache) = encode_cached(&bb, &p, &x).unwrap();
        let t = tiny().token_count + 2;
        for s in 0..cache.batch_size() {
            for l in 0..2 {
                for row in cache.attention(s, l).chunks(t) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_inputs_identical_rows() {
        let (bb, p, x) = setup(&tiny(), 4);
        let dup = x.select_rows(&[1, 1]);
        let f = encode(&bb, &p, &dup).unwrap().features;
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn zero_upstream_gives_zero_grad() {
        let (bb, p, x) = setup(&tiny(), 5);
        let (_, cache) = encode_cached(&bb, &p, &x).unwrap();
        let g = encode_backward(&bb, &p, &cache, &Tensor::zeros(&[3, 8])).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    fn loss(bb: &FrozenBackbone, p: &PrefixPrompt, x: &Tensor, w: &Tensor) -> f64 {
        let f = encode(bb, p, x).unwrap().features;
        dot(f.data(), w.data())
    }

    pub(crate) fn max_rel_err_against_fd(seed: u64, cfg: &EncoderConfig) -> f64 {
        let (bb, p, x) = setup(cfg, seed);
        let mut rng = Rng::new(seed + 100);
        let w = rng.gaussian_tensor(&[x.rows(), cfg.model_dim], 1.0);
        let (_, cache) = encode_cached(&bb, &p, &x).unwrap();
        let g = encode_backward(&bb, &p, &cache, &w).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let analytic = g.flatten();
        let mut idx = 0;
        for ti in 0..p.tensors().len() {
            for k in 0..p.tensors()[ti].len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].data_mut()[k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].data_mut()[k] -= h;
                let fd = (loss(&bb, &plus, &x, &w) - loss(&bb, &minus, &x, &w)) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                idx += 1;
            }
        }
        worst
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        for seed in [11, 12, 13] {
            let err = max_rel_err_against_fd(seed, &tiny());
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let (bb, p, x) = setup(&tiny(), 6);
        let one = x.select_rows(&[0]);
        let two = x.select_rows(&[0, 0]);
        let mut rng = Rng::new(9);
        let u = rng.gaussian_tensor(&[1, 8], 1.0);
        let uu = Tensor::vstack(&[&u, &u]).unwrap();
        let (_, c1) = encode_cached(&bb, &p, &one).unwrap();
        let (_, c2) = encode_cached(&bb, &p, &two).unwrap();
        let g1 = encode_backward(&bb, &p, &c1, &u).unwrap().flatten();
        let g2 = encode_backward(&bb, &p, &c2, &uu).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let (bb, mut p, x) = setup(&tiny(), 7);
        let (_, cache) = encode_cached(&bb, &p, &x).unwrap();
        p.key_mut(0).data_mut()[0] += 0.1;
        let up = Tensor::zeros(&[3, 8]);
        assert!(matches!(
            encode_backward(&bb, &p, &cache, &up),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn shape_errors() {
        let (bb, p, _) = setup(&tiny(), 8);
        assert!(encode(&bb, &p, &Tensor::zeros(&[2, 5])).is_err());
        let wrong = PrefixPrompt::zeros(&EncoderConfig {
            prompt_lengths: vec![1, 1],
            ..tiny()
        });
        assert!(encode(&bb, &wrong, &Tensor::zeros(&[2, 6])).is_err());
    }
}

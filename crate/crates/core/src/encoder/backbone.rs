use std::collections::BTreeMap;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::kernel::{Fnv, Rng, Tensor};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub(crate) gamma: Vec<f64>,
    pub(crate) beta: Vec<f64>,
}

impl LayerNorm {
    fn unit(d: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// Weights of one pre-norm transformer block. Matrices are stored
/// `in × out`, so a projection is `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub(crate) ln1: LayerNorm,
    pub(crate) wq: Tensor,
    pub(crate) bq: Vec<f64>,
    pub(crate) wk: Tensor,
    pub(crate) bk: Vec<f64>,
    pub(crate) wv: Tensor,
    pub(crate) bv: Vec<f64>,
    pub(crate) wo: Tensor,
    pub(crate) bo: Vec<f64>,
    pub(crate) ln2: LayerNorm,
    pub(crate) w1: Tensor,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Tensor,
    pub(crate) b2: Vec<f64>,
}

/// Immutable encoder weights. There is no `&mut` access after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    pub(crate) config: EncoderConfig,
    /// `input_dim × (patch_tokens · d)` linear patchifier.
    pub(crate) patch: Tensor,
    /// `token_count × d`.
    pub(crate) pos: Tensor,
    pub(crate) cls: Vec<f64>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) final_ln: LayerNorm,
}

fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

impl FrozenBackbone {
    /// Seeded scaled-Gaussian initialization (`N(0, 1/fan_in)` for projections).
    pub fn random(config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let h = config.mlp_dim;
        let proj = |rng: &mut Rng, fan_in: usize, fan_out: usize| {
            rng.gaussian_tensor(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        let patch = proj(rng, config.input_dim, config.patch_tokens() * d);
        let pos = rng.gaussian_tensor(&[config.token_count, d], 0.1);
        let cls = gaussian_vec(rng, d, 1.0);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerWeights {
                ln1: LayerNorm::unit(d),
                wq: proj(rng, d, d),
                bq: gaussian_vec(rng, d, 0.02),
                wk: proj(rng, d, d),
                bk: gaussian_vec(rng, d, 0.02),
                wv: proj(rng, d, d),
                bv: gaussian_vec(rng, d, 0.02),
                wo: proj(rng, d, d),
                bo: gaussian_vec(rng, d, 0.02),
                ln2: LayerNorm::unit(d),
                w1: proj(rng, d, h),
                b1: gaussian_vec(rng, h, 0.02),
                w2: proj(rng, h, d),
                b2: gaussian_vec(rng, d, 0.02),
            });
        }
        Ok(FrozenBackbone {
            config: config.clone(),
            patch,
            pos,
            cls,
            layers,
            final_ln: LayerNorm::unit(d),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Named tensors in a fixed order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let v = |x: &[f64]| Tensor::from_vec(&[x.len()], x.to_vec()).expect("vector");
        let mut out = vec![
            ("backbone.patch".to_string(), self.patch.clone()),
            ("backbone.pos".to_string(), self.pos.clone()),
            ("backbone.cls".to_string(), v(&self.cls)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("backbone.layer{i}.{s}");
            out.extend([
                (p("ln1.gamma"), v(&l.ln1.gamma)),
                (p("ln1.beta"), v(&l.ln1.beta)),
                (p("wq"), l.wq.clone()),
                (p("bq"), v(&l.bq)),
                (p("wk"), l.wk.clone()),
                (p("bk"), v(&l.bk)),
                (p("wv"), l.wv.clone()),
                (p("bv"), v(&l.bv)),
                (p("wo"), l.wo.clone()),
                (p("bo"), v(&l.bo)),
                (p("ln2.gamma"), v(&l.ln2.gamma)),
                (p("ln2.beta"), v(&l.ln2.beta)),
                (p("w1"), l.w1.clone()),
                (p("b1"), v(&l.b1)),
                (p("w2"), l.w2.clone()),
                (p("b2"), v(&l.b2)),
            ]);
        }
        out.push(("backbone.final_ln.gamma".into(), v(&self.final_ln.gamma)));
        out.push(("backbone.final_ln.beta".into(), v(&self.final_ln.beta)));
        out
    }

    /// Rebuild from named tensors (e.g. a loaded checkpoint), validating shapes.
    pub fn from_named(config: &EncoderConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let h = config.mlp_dim;
        let take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let vec = |name: &str, n: usize| take(name, &[n]).map(Tensor::into_vec);
        let ln = |prefix: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: vec(&format!("{prefix}.gamma"), d)?,
                beta: vec(&format!("{prefix}.beta"), d)?,
            })
        };
        let mut layers = Vec::new();
        for i in 0..config.num_layers {
            let p = |s: &str| format!("backbone.layer{i}.{s}");
            layers.push(LayerWeights {
                ln1: ln(&p("ln1"))?,
                wq: take(&p("wq"), &[d, d])?,
                bq: vec(&p("bq"), d)?,
                wk: take(&p("wk"), &[d, d])?,
                bk: vec(&p("bk"), d)?,
                wv: take(&p("wv"), &[d, d])?,
                bv: vec(&p("bv"), d)?,
                wo: take(&p("wo"), &[d, d])?,
                bo: vec(&p("bo"), d)?,
                ln2: ln(&p("ln2"))?,
                w1: take(&p("w1"), &[d, h])?,
                b1: vec(&p("b1"), h)?,
                w2: take(&p("w2"), &[h, d])?,
                b2: vec(&p("b2"), d)?,
            });
        }
        Ok(FrozenBackbone {
            config: config.clone(),
            patch: take("backbone.patch", &[config.input_dim, config.patch_tokens() * d])?,
            pos: take("backbone.pos", &[config.token_count, d])?,
            cls: vec("backbone.cls", d)?,
            layers,
            final_ln: ln("backbone.final_ln")?,
        })
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in self.named_tensors() {
            h.write(name.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }
}

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::kernel::{cosine, Fnv, Rng, Tensor};

/// Prefix keys and values for every layer. Unprompted layers hold `0 × d` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixPrompt {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
}

impl PrefixPrompt {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let d = config.model_dim;
        let mk = || config.prompt_lengths.iter().map(|&l| Tensor::zeros(&[l, d])).collect();
        PrefixPrompt {
            keys: mk(),
            values: mk(),
        }
    }

    /// Uniform in `[-1/√d, 1/√d]`.
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Self {
        let bound = 1.0 / (config.model_dim as f64).sqrt();
        let mut p = PrefixPrompt::zeros(config);
        for t in p.keys.iter_mut().chain(p.values.iter_mut()) {
            for x in t.data_mut() {
                *x = rng.uniform_range(-bound, bound);
            }
        }
        p
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn length(&self, layer: usize) -> usize {
        self.keys[layer].rows()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.keys.iter().map(Tensor::rows).collect()
    }

    pub fn key(&self, layer: usize) -> &Tensor {
        &self.keys[layer]
    }

    pub fn value(&self, layer: usize) -> &Tensor {
        &self.values[layer]
    }

    pub fn key_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.keys[layer]
    }

    pub fn value_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.values[layer]
    }

    /// Trainable tensors in fixed order: for each layer, key then value.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.keys.iter().zip(&self.values).flat_map(|(k, v)| [k, v]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.keys
            .iter_mut()
            .zip(self.values.iter_mut())
            .flat_map(|(k, v)| [k, v])
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            out.push((format!("prompt.layer{i}.key"), k.clone()));
            out.push((format!("prompt.layer{i}.value"), v.clone()));
        }
        out
    }

    pub fn from_tensors(keys: Vec<Tensor>, values: Vec<Tensor>) -> Result<Self> {
        if keys.len() != values.len() || keys.iter().zip(&values).any(|(k, v)| k.shape() != v.shape()) {
            return Err(Error::shape("prefix prompt", "key/value layers disagree"));
        }
        Ok(PrefixPrompt { keys, values })
    }

    /// Whether shapes agree with an encoder configuration.
    pub fn matches(&self, config: &EncoderConfig) -> bool {
        self.keys.len() == config.num_layers
            && self
                .keys
                .iter()
                .zip(&config.prompt_lengths)
                .all(|(k, &l)| k.shape() == [l, config.model_dim])
    }

    /// All values concatenated layer by layer, key before value.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &PrefixPrompt) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for t in self.tensors() {
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }
}

/// Cosine similarity between two prompts, each flattened into one vector.
pub fn prompt_drift(before: &PrefixPrompt, after: &PrefixPrompt) -> Result<f64> {
    if before.lengths() != after.lengths() || before.parameter_count() != after.parameter_count() {
        return Err(Error::shape("prompt_drift", "prompt shapes differ"));
    }
    cosine(&before.flatten(), &after.flatten())
}

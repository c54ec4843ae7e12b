#![allow(dead_code)]

use ovor::data::{load_stream, parse_run_config_str};
use ovor::harness::{build_backbone, run_stream, RunConfig, RunManifest, RunOutput, TaskStream};
use ovor::kernel::{Rng, Tensor};

pub fn config(json: &str) -> RunConfig {
    parse_run_config_str(json).unwrap()
}

pub fn fig1() -> RunConfig {
    config(r#"{"preset": "fig1"}"#)
}

/// The fig1 preset shortened for quick pipeline checks.
pub fn quick() -> RunConfig {
    config(r#"{"preset": "fig1", "epochs": 5, "seeds": [0]}"#)
}

pub fn stream(cfg: &RunConfig, seed: u64) -> TaskStream {
    load_stream(cfg, seed).unwrap()
}

pub fn run(cfg: &RunConfig, seed: u64) -> RunOutput {
    run_stream(cfg, &stream(cfg, seed), seed, build_backbone(cfg).unwrap()).unwrap()
}

pub fn manifests(cfg: &RunConfig) -> Vec<RunManifest> {
    cfg.seeds.iter().map(|&s| run(cfg, s).manifest).collect()
}

pub fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Tensor {
    let g = rng.gaussian_tensor(&[n, n], 1.0);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| g.get(i, j)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    let mut q = Tensor::zeros(&[n, n]);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            q.row_mut(i)[j] = v;
        }
    }
    q
}

/// Manifest JSON with the config echo blanked, for comparing runs of different configs.
pub fn without_config(m: &RunManifest) -> String {
    let mut m = m.clone();
    m.config = RunConfig::default();
    m.to_json()
}

//! Small decoder-only transformer with explicit forward, backward, and
//! activation extraction.
//!
//! Architecture: byte-level tied embeddings, rotary positions, pre-norm RMS
//! blocks with SiLU-gated MLPs. The whole stack is generic over [`Scalar`] so
//! training runs in f32 while gradient oracles run identical code in f64.

mod backward;
mod forward;
pub mod math;

pub use backward::Gradients;
pub use forward::{ForwardCache, KvCache};
pub use math::Scalar;

use crate::corpus::{TokenId, Vocab};
use crate::rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds context_len {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("layer {0} out of range [1, {1}]")]
    BadLayer(usize, usize),
    #[error("position {0} out of range for sequence of length {1}")]
    BadPosition(usize, usize),
    #[error("token id {0} outside vocabulary")]
    BadToken(u32),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default, ~6M parameters.
        ModelConfig {
            n_layer: 8,
            n_head: 8,
            d_model: 256,
            d_ff: 1024,
            context_len: 512,
            vocab_size: Vocab::SIZE,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layer == 0 || self.n_head == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension".into()));
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if !(self.d_model / self.n_head).is_multiple_of(2) {
            return Err(ModelError::InvalidConfig(format!(
                "head dim {} must be even for rotary positions",
                self.d_model / self.n_head
            )));
        }
        if self.vocab_size != Vocab::SIZE {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size must be {}, got {}",
                Vocab::SIZE,
                self.vocab_size
            )));
        }
        if self.context_len < 2 {
            return Err(ModelError::InvalidConfig("context_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    /// 1-based middle layer: `floor(n_layer / 2) + 1`.
    pub fn middle_layer(&self) -> usize {
        self.n_layer / 2 + 1
    }
}

/// Per-layer weight tensors. Matrices are stored `[in, out]` so the forward
/// product is a plain row-major matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors<S> {
    pub ln1: Vec<S>, // [D]
    pub wq: Vec<S>,  // [D, D]
    pub wk: Vec<S>,  // [D, D]
    pub wv: Vec<S>,  // [D, D]
    pub wo: Vec<S>,  // [D, D]
    pub ln2: Vec<S>, // [D]
    pub wg: Vec<S>,  // [D, F]
    pub wu: Vec<S>,  // [D, F]
    pub wd: Vec<S>,  // [F, D]
}

/// The full set of parameter tensors; also used for gradients and optimizer
/// moments, which share shapes with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    pub emb: Vec<S>, // [V, D], tied with the output head
    pub layers: Vec<LayerTensors<S>>,
    pub lnf: Vec<S>, // [D]
}

impl<S: Scalar> ParamSet<S> {
    pub fn zeros_like_config(config: &ModelConfig) -> Self {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        ParamSet {
            emb: vec![S::zero(); v * d],
            layers: (0..config.n_layer)
                .map(|_| LayerTensors {
                    ln1: vec![S::zero(); d],
                    wq: vec![S::zero(); d * d],
                    wk: vec![S::zero(); d * d],
                    wv: vec![S::zero(); d * d],
                    wo: vec![S::zero(); d * d],
                    ln2: vec![S::zero(); d],
                    wg: vec![S::zero(); d * f],
                    wu: vec![S::zero(); d * f],
                    wd: vec![S::zero(); f * d],
                })
                .collect(),
            lnf: vec![S::zero(); d],
        }
    }

    /// Visit tensors in a stable order with stable names.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a [S])) {
        f("emb".to_string(), &self.emb);
        for (i, layer) in self.layers.iter().enumerate() {
            f(format!("layer{i}.ln1"), &layer.ln1);
            f(format!("layer{i}.wq"), &layer.wq);
            f(format!("layer{i}.wk"), &layer.wk);
            f(format!("layer{i}.wv"), &layer.wv);
            f(format!("layer{i}.wo"), &layer.wo);
            f(format!("layer{i}.ln2"), &layer.ln2);
            f(format!("layer{i}.wg"), &layer.wg);
            f(format!("layer{i}.wu"), &layer.wu);
            f(format!("layer{i}.wd"), &layer.wd);
        }
        f("lnf".to_string(), &self.lnf);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut [S])) {
        f("emb".to_string(), &mut self.emb);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(format!("layer{i}.ln1"), &mut layer.ln1);
            f(format!("layer{i}.wq"), &mut layer.wq);
            f(format!("layer{i}.wk"), &mut layer.wk);
            f(format!("layer{i}.wv"), &mut layer.wv);
            f(format!("layer{i}.wo"), &mut layer.wo);
            f(format!("layer{i}.ln2"), &mut layer.ln2);
            f(format!("layer{i}.wg"), &mut layer.wg);
            f(format!("layer{i}.wu"), &mut layer.wu);
            f(format!("layer{i}.wd"), &mut layer.wd);
        }
        f("lnf".to_string(), &mut self.lnf);
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Borrow every tensor in the same stable order as [`ParamSet::for_each`].
    pub fn tensors(&self) -> Vec<&Vec<S>> {
        let mut v: Vec<&Vec<S>> = vec![&self.emb];
        for layer in &self.layers {
            v.push(&layer.ln1);
            v.push(&layer.wq);
            v.push(&layer.wk);
            v.push(&layer.wv);
            v.push(&layer.wo);
            v.push(&layer.ln2);
            v.push(&layer.wg);
            v.push(&layer.wu);
            v.push(&layer.wd);
        }
        v.push(&self.lnf);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut v: Vec<&mut Vec<S>> = vec![&mut self.emb];
        for layer in &mut self.layers {
            v.push(&mut layer.ln1);
            v.push(&mut layer.wq);
            v.push(&mut layer.wk);
            v.push(&mut layer.wv);
            v.push(&mut layer.wo);
            v.push(&mut layer.ln2);
            v.push(&mut layer.wg);
            v.push(&mut layer.wu);
            v.push(&mut layer.wd);
        }
        v.push(&mut self.lnf);
        v
    }

    pub fn all_finite(&self) -> Result<(), String> {
        let mut bad = None;
        self.for_each(|name, t| {
            if bad.is_none() && t.iter().any(|x| !x.is_finite()) {
                bad = Some(name);
            }
        });
        match bad {
            Some(name) => Err(name),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialization from `config.seed`: normal(0, 0.02) for
    /// matrices, with the residual-writing projections (wo, wd) scaled by
    /// `1/sqrt(2 * n_layer)`; norm weights start at 1.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::substream(config.seed, "model-init");
        let base = Normal::new(0.0f64, 0.02).expect("valid normal");
        let resid_scale = 1.0 / ((2 * config.n_layer) as f64).sqrt();
        let mut params = ParamSet::zeros_like_config(&config);
        let fill = |t: &mut [S], scale: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            for x in t.iter_mut() {
                *x = S::from_f64_c(base.sample(rng) * scale);
            }
        };
        fill(&mut params.emb, 1.0, &mut rng);
        for i in 0..config.n_layer {
            let layer = &mut params.layers[i];
            layer.ln1.fill(S::one());
            fill(&mut layer.wq, 1.0, &mut rng);
            fill(&mut layer.wk, 1.0, &mut rng);
            fill(&mut layer.wv, 1.0, &mut rng);
            fill(&mut layer.wo, resid_scale, &mut rng);
            layer.ln2.fill(S::one());
            fill(&mut layer.wg, 1.0, &mut rng);
            fill(&mut layer.wu, 1.0, &mut rng);
            fill(&mut layer.wd, resid_scale, &mut rng);
        }
        params.lnf.fill(S::one());
        Ok(Model { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    /// Cast every parameter to another scalar type (used by f64 oracles).
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut out = Model {
            config: self.config,
            params: ParamSet::zeros_like_config(&self.config),
        };
        let mut flat: Vec<T> = Vec::new();
        self.params.for_each(|_, t| flat.extend(t.iter().map(|x| T::from_f64_c(x.to_f64_c()))));
        let mut offset = 0;
        out.params.for_each_mut(|_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        out
    }
}

/// Which layer to read activations from, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelect {
    First,
    Middle,
    Final,
    Index(usize),
}

impl LayerSelect {
    pub fn resolve(self, config: &ModelConfig) -> Result<usize, ModelError> {
        let idx = match self {
            LayerSelect::First => 1,
            LayerSelect::Middle => config.middle_layer(),
            LayerSelect::Final => config.n_layer,
            LayerSelect::Index(i) => i,
        };
        if idx == 0 || idx > config.n_layer {
            return Err(ModelError::BadLayer(idx, config.n_layer));
        }
        Ok(idx)
    }

    pub fn label(self) -> String {
        match self {
            LayerSelect::First => "first".into(),
            LayerSelect::Middle => "middle".into(),
            LayerSelect::Final => "final".into(),
            LayerSelect::Index(i) => format!("layer{i}"),
        }
    }
}

/// A request for one activation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationRequest {
    pub layer: LayerSelect,
    /// Token position; `None` means the last non-pad position.
    pub position: Option<usize>,
}

impl ActivationRequest {
    pub fn last_at(layer: LayerSelect) -> Self {
        ActivationRequest { layer, position: None }
    }
}

/// Mean cross-entropy of `logits` against `targets` over unmasked positions.
/// An all-masked batch is defined as loss 0 (with a warning on stderr).
pub fn loss<S: Scalar>(logits: &[S], targets: &[TokenId], mask: &[u8], vocab_size: usize) -> S {
    assert_eq!(logits.len(), targets.len() * vocab_size);
    assert_eq!(targets.len(), mask.len());
    let mut total = S::zero();
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(mask.iter()).enumerate() {
        if m == 0 {
            continue;
        }
        let row = &logits[i * vocab_size..(i + 1) * vocab_size];
        let lse = math::log_sum_exp(row);
        total += lse - row[t as usize];
        count += 1;
    }
    if count == 0 {
        eprintln!("warning: loss over an all-masked batch, defined as 0");
        return S::zero();
    }
    total / S::from_f64_c(count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            n_head: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 16,
            vocab_size: Vocab::SIZE,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_given_seed() {
        let a = Model::<f32>::init(tiny_config(5)).unwrap();
        let b = Model::<f32>::init(tiny_config(5)).unwrap();
        let c = Model::<f32>::init(tiny_config(6)).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_config(0);
        cfg.d_model = 13;
        cfg.n_head = 4;
        assert!(matches!(Model::<f32>::init(cfg), Err(ModelError::InvalidConfig(_))));
        let mut cfg = tiny_config(0);
        cfg.vocab_size = 300;
        assert!(matches!(Model::<f32>::init(cfg), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn middle_layer_rule() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.middle_layer(), 5);
        cfg.n_layer = 24;
        assert_eq!(cfg.middle_layer(), 13);
        cfg.n_layer = 1;
        assert_eq!(cfg.middle_layer(), 1);
    }

    #[test]
    fn params_are_finite_after_init() {
        let m = Model::<f32>::init(tiny_config(1)).unwrap();
        assert!(m.params.all_finite().is_ok());
        assert!(m.n_params() > 0);
    }

    #[test]
    fn loss_uniform_logits_is_log_vocab() {
        let v = Vocab::SIZE;
        let logits = vec![0.5f64; 3 * v];
        let l = loss(&logits, &[1, 2, 3], &[1, 1, 1], v);
        assert!((l - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_one_hot_logits_appoaches_zero() {
        let v = Vocab::SIZE;
        let targets = [7u32, 100];
        let mut logits = vec![0.0f64; 2 * v];
        for (i, &t) in targets.iter().enumerate() {
            logits[i * v + t as usize] = 50.0;
        }
        let l = loss(&logits, &targets, &[1, 1], v);
        assert!(l < 1e-12, "loss {l}");
    }

    #[test]
    fn loss_all_masked_is_zero() {
        let v = Vocab::SIZE;
        let logits = vec![0.1f64; 2 * v];
        assert_eq!(loss(&logits, &[1, 2], &[0, 0], v), 0.0);
    }

    #[test]
    fn layer_select_resolution() {
        let cfg = tiny_config(0);
        assert_eq!(LayerSelect::First.resolve(&cfg).unwrap(), 1);
        assert_eq!(LayerSelect::Middle.resolve(&cfg).unwrap(), 2);
        assert_eq!(LayerSelect::Final.resolve(&cfg).unwrap(), 2);
        assert!(matches!(
            LayerSelect::Index(0).resolve(&cfg),
            Err(ModelError::BadLayer(0, 2))
        ));
        assert!(matches!(
            LayerSelect::Index(3).resolve(&cfg),
            Err(ModelError::BadLayer(3, 2))
        ));
    }
}

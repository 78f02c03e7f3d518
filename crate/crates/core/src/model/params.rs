use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, INIT_STD};
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) const TOKEN_EMBED: usize = 0;
pub(crate) const SEGMENT_EMBED: usize = 1;
pub(crate) const POSITION_EMBED: usize = 2;
pub(crate) const REGION_W: usize = 3;
pub(crate) const REGION_B: usize = 4;
const GLOBAL_PREFIX: usize = 5;
pub(crate) const PER_LAYER: usize = 16;

/// Offsets of one encoder layer's tensors relative to its first index.
pub(crate) mod layer {
    pub const WQ: usize = 0;
    pub const BQ: usize = 1;
    pub const WK: usize = 2;
    pub const BK: usize = 3;
    pub const WV: usize = 4;
    pub const BV: usize = 5;
    pub const WO: usize = 6;
    pub const BO: usize = 7;
    pub const LN1_G: usize = 8;
    pub const LN1_B: usize = 9;
    pub const W1: usize = 10;
    pub const B1: usize = 11;
    pub const W2: usize = 12;
    pub const B2: usize = 13;
    pub const LN2_G: usize = 14;
    pub const LN2_B: usize = 15;
}

pub(crate) fn layer_base(l: usize) -> usize {
    GLOBAL_PREFIX + l * PER_LAYER
}

pub(crate) fn classifier_w(cfg: &ModelConfig) -> usize {
    layer_base(cfg.layers)
}

pub(crate) fn classifier_b(cfg: &ModelConfig) -> usize {
    layer_base(cfg.layers) + 1
}

/// Every parameter tensor, in the fixed order used by checkpoints,
/// averaging and the optimizer.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden_dim;
    let mut specs = vec![
        ParamSpec::new("embeddings.token", &[cfg.vocab_size, cfg.embed_dim], Init::Normal),
        ParamSpec::new("embeddings.segment", &[2, cfg.embed_dim], Init::Normal),
        ParamSpec::new(
            "embeddings.position",
            &[cfg.max_sequence(), cfg.embed_dim],
            Init::Normal,
        ),
        ParamSpec::new("region.weight", &[cfg.region_input_dims(), cfg.embed_dim], Init::Normal),
        ParamSpec::new("region.bias", &[cfg.embed_dim], Init::Zeros),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("encoder.{l}.{s}");
        specs.extend([
            ParamSpec::new(p("attn.query.weight"), &[d, d], Init::Normal),
            ParamSpec::new(p("attn.query.bias"), &[d], Init::Zeros),
            ParamSpec::new(p("attn.key.weight"), &[d, d], Init::Normal),
            ParamSpec::new(p("attn.key.bias"), &[d], Init::Zeros),
            ParamSpec::new(p("attn.value.weight"), &[d, d], Init::Normal),
            ParamSpec::new(p("attn.value.bias"), &[d], Init::Zeros),
            ParamSpec::new(p("attn.output.weight"), &[d, d], Init::Normal),
            ParamSpec::new(p("attn.output.bias"), &[d], Init::Zeros),
            ParamSpec::new(p("attn.norm.gamma"), &[d], Init::Ones),
            ParamSpec::new(p("attn.norm.beta"), &[d], Init::Zeros),
            ParamSpec::new(p("ffn.inner.weight"), &[d, cfg.ff_dim], Init::Normal),
            ParamSpec::new(p("ffn.inner.bias"), &[cfg.ff_dim], Init::Zeros),
            ParamSpec::new(p("ffn.outer.weight"), &[cfg.ff_dim, d], Init::Normal),
            ParamSpec::new(p("ffn.outer.bias"), &[d], Init::Zeros),
            ParamSpec::new(p("ffn.norm.gamma"), &[d], Init::Ones),
            ParamSpec::new(p("ffn.norm.beta"), &[d], Init::Zeros),
        ]);
    }
    specs.push(ParamSpec::new(
        "classifier.weight",
        &[d, cfg.answer_count],
        Init::Normal,
    ));
    specs.push(ParamSpec::new("classifier.bias", &[cfg.answer_count], Init::Zeros));
    specs
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// All learnable values of the fusion model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    config: ModelConfig,
    tensors: Vec<Tensor<S>>,
}

impl<S: Real> ModelParams<S> {
    /// BERT-style initialization from the `init` stream of `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = param_specs(&config)
            .into_iter()
            .map(|spec| {
                let n = spec.numel();
                let data: Vec<S> = match spec.init {
                    Init::Normal => (0..n).map(|_| S::from_f64(normal.sample(&mut rng))).collect(),
                    Init::Zeros => vec![S::zero(); n],
                    Init::Ones => vec![S::one(); n],
                };
                Tensor::new(spec.shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<S>> {
        self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.tensors[i]
    }

    /// Index of a tensor by its declared name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        param_specs(&self.config).iter().position(|s| s.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (spec, t) in param_specs(&self.config).iter().zip(&self.tensors) {
            t.ensure_finite(&spec.name)?;
        }
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

use rand::Rng;

use super::{Adapter, ModelConfig};
use crate::error::{Result, TsdError};
use crate::tensor::{Real, Tensor};

pub(crate) const ADAPTER_KERNEL: usize = 3;
/// Tensors per encoder layer.
pub(crate) const PER_LAYER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Names, shapes and initialisers of every learnable tensor, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, m, l, k) = (cfg.d, cfg.m, cfg.tokens(), ADAPTER_KERNEL);
    let (out_ch, in_ch) = match cfg.adapter {
        Adapter::NoChunks | Adapter::Sum => (d, 1),
        Adapter::Cat => (d / cfg.chunk, 1),
        Adapter::Conv => (d, cfg.chunk),
    };
    let mut specs = vec![
        spec("adapter.conv.weight", &[out_ch, in_ch, k], Init::Uniform { fan_in: in_ch * k }),
        spec("adapter.conv.bias", &[out_ch], Init::Zeros),
    ];
    for i in 0..cfg.layers {
        let p = |s: &str| format!("encoder.{i}.{s}");
        let lin = Init::Uniform { fan_in: d };
        specs.extend([
            spec(p("attn.q"), &[d, d], lin),
            spec(p("attn.k"), &[d, d], lin),
            spec(p("attn.v"), &[d, d], lin),
            spec(p("attn.o"), &[d, d], lin),
            spec(p("norm1.gain"), &[d], Init::Ones),
            spec(p("norm1.bias"), &[d], Init::Zeros),
            spec(p("ff.w1"), &[4 * d, d], lin),
            spec(p("ff.b1"), &[4 * d], Init::Zeros),
            spec(p("ff.w2"), &[d, 4 * d], Init::Uniform { fan_in: 4 * d }),
            spec(p("ff.b2"), &[d], Init::Zeros),
            spec(p("norm2.gain"), &[d], Init::Ones),
            spec(p("norm2.bias"), &[d], Init::Zeros),
        ]);
    }
    let ok = cfg.output_kernel;
    let head = if cfg.zero_init_head {
        Init::Zeros
    } else {
        Init::Uniform { fan_in: d }
    };
    specs.extend([
        spec("head.conv.weight", &[m, l, ok], Init::Uniform { fan_in: l * ok }),
        spec("head.conv.bias", &[m], Init::Zeros),
        spec("head.linear.weight", &[4, d], head),
        spec("head.linear.bias", &[4], Init::Zeros),
    ]);
    specs
}

/// Total number of learnable scalars.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// The learnable tensors of one model, in [`param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for s in specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, T::one()),
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::lit(rng.random_range(-bound..=bound)))
                }
            };
            names.push(s.name);
            tensors.push(t);
        }
        Ok(ModelParams { names, tensors })
    }

    /// Assembles parameters from named tensors, checking them against `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        if specs.len() != named.len() {
            return Err(TsdError::config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        for (s, (name, t)) in specs.iter().zip(&named) {
            if &s.name != name || s.shape != t.shape() {
                return Err(TsdError::config(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(ModelParams { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for the parameters of one forward pass.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-bound..bound)))
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape`; names for which `trainable` is false become constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Randomly initialized encoder, masking embedding and quantizer.
    pub fn init_model(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::new();
        p.add_linear(rng, "fe", cfg.stacked_dim(), cfg.z_dim);
        p.insert("mask_emb", Tensor::from_fn([cfg.z_dim], |_| T::of(rng.gen_range(0.0..1.0))));

        p.add_linear(rng, "ctx.in", cfg.z_dim, cfg.c_dim);
        p.add_norm("ctx.in_norm", cfg.c_dim);
        let cpg = cfg.c_dim / cfg.conv_groups;
        let conv_std = (4.0 / (cfg.conv_kernel * cfg.c_dim) as f64).sqrt();
        p.insert("ctx.pos_conv.w", uniform(rng, &[cfg.c_dim, cpg, cfg.conv_kernel], conv_std * 3f64.sqrt()));
        p.insert("ctx.pos_conv.b", Tensor::zeros([cfg.c_dim]));
        p.add_norm("ctx.pos_norm", cfg.c_dim);
        for l in 0..cfg.num_layers {
            let b = format!("ctx.block{l}");
            p.add_norm(&format!("{b}.norm1"), cfg.c_dim);
            for proj in ["q", "k", "v", "o"] {
                p.add_linear(rng, &format!("{b}.attn.{proj}"), cfg.c_dim, cfg.c_dim);
            }
            p.add_norm(&format!("{b}.norm2"), cfg.c_dim);
            p.add_linear(rng, &format!("{b}.ffn1"), cfg.c_dim, cfg.ffn_dim);
            p.add_linear(rng, &format!("{b}.ffn2"), cfg.ffn_dim, cfg.c_dim);
        }
        p.add_linear(rng, "ctx.out", cfg.c_dim, cfg.proj_dim);

        p.add_linear(rng, "quant.pre", cfg.z_dim, cfg.proj_dim);
        let entries = cfg.codebook_groups * cfg.codebook_entries;
        p.insert("quant.codebook", uniform(rng, &[entries, cfg.codebook_entry_dim()], 3f64.sqrt()));
        p.add_linear(rng, "quant.post", cfg.proj_dim, cfg.proj_dim);
        Ok(p)
    }

    /// Xavier-uniform weight `[fan_in, fan_out]` and zero bias.
    pub fn add_linear(&mut self, rng: &mut impl Rng, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(format!("{prefix}.w"), uniform(rng, &[fan_in, fan_out], bound));
        self.insert(format!("{prefix}.b"), Tensor::zeros([fan_out]));
    }

    fn add_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.g"), Tensor::full([dim], T::one()));
        self.insert(format!("{prefix}.b"), Tensor::zeros([dim]));
    }
}

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Branch, ModelConfig};
use super::tensor::Tensor;

/// Named learnable tensors in a fixed, config-determined order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    He,
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
    Zeros,
    Ones,
}

/// Every parameter of a config: `(name, shape, init)` in canonical order.
pub(crate) fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut cin = 3;
    for (s, stage) in config.backbone.iter().enumerate() {
        for l in 0..config.layers_per_stage {
            let k = kernel_for_stride(if l == 0 { stage.stride } else { 1 });
            out.push((
                format!("backbone.{s}.{l}.weight"),
                vec![stage.channels, cin, k, k],
                Init::He,
            ));
            out.push((
                format!("backbone.{s}.{l}.bias"),
                vec![stage.channels],
                Init::FanIn(cin * k * k),
            ));
            cin = stage.channels;
        }
    }
    for branch in [Branch::Pano, Branch::Pp] {
        let tag = branch_tag(branch);
        for s in 0..config.backbone.len() {
            let ch = config.compress_channels(s);
            for l in 0..3 {
                let kh = config.compress_strides[l];
                out.push((
                    format!("compress.{tag}.{s}.{l}.weight"),
                    vec![ch[l + 1], ch[l], kh, 3],
                    Init::He,
                ));
                out.push((
                    format!("compress.{tag}.{s}.{l}.bias"),
                    vec![ch[l + 1]],
                    Init::FanIn(ch[l] * kh * 3),
                ));
            }
        }
    }
    let c = config.merged_channels;
    let hidden = config.swg.ffn_hidden;
    out.push((
        "pos_embed".into(),
        vec![config.pano_feature_width, c],
        Init::Normal(0.02),
    ));
    for b in 0..config.swg.repeats * 4 {
        let p = format!("swg.{b}");
        out.push((format!("{p}.norm1.gamma"), vec![c], Init::Ones));
        out.push((format!("{p}.norm1.beta"), vec![c], Init::Zeros));
        for name in ["query", "key", "value", "proj"] {
            out.push((format!("{p}.{name}.weight"), vec![c, c], Init::Normal(0.02)));
            out.push((format!("{p}.{name}.bias"), vec![c], Init::Zeros));
        }
        out.push((format!("{p}.norm2.gamma"), vec![c], Init::Ones));
        out.push((format!("{p}.norm2.beta"), vec![c], Init::Zeros));
        out.push((format!("{p}.ffn1.weight"), vec![c, hidden], Init::Normal(0.02)));
        out.push((format!("{p}.ffn1.bias"), vec![hidden], Init::Zeros));
        out.push((format!("{p}.ffn2.weight"), vec![hidden, c], Init::Normal(0.02)));
        out.push((format!("{p}.ffn2.bias"), vec![c], Init::Zeros));
    }
    out.push(("norm.gamma".into(), vec![c], Init::Ones));
    out.push(("norm.beta".into(), vec![c], Init::Zeros));
    out.push(("head.weight".into(), vec![c, 2], Init::Normal(0.02)));
    out.push(("head.bias".into(), vec![2], Init::Zeros));
    out
}

pub(crate) fn branch_tag(branch: Branch) -> &'static str {
    match branch {
        Branch::Pano => "pano",
        Branch::Pp => "pp",
    }
}

/// Square kernel size of a backbone conv with the given stride.
pub(crate) fn kernel_for_stride(stride: usize) -> usize {
    (2 * (stride / 2) + 1).max(3)
}

impl Params {
    /// Seeded initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::He | Init::Normal(_) => {
                    let std = match init {
                        Init::He => (2.0 / shape[1..].iter().product::<usize>() as f64).sqrt(),
                        Init::Normal(s) => s,
                        _ => unreachable!(),
                    };
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::from_vec(&shape, data));
        }
        Self::from_parts(names, tensors)
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self { names, tensors, index }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.id(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.id(name);
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks that names and shapes match what `config` prescribes.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let want = layout(config);
        want.len() == self.len()
            && want
                .iter()
                .zip(self.names.iter().zip(&self.tensors))
                .all(|((n, s, _), (name, t))| n == name && s.as_slice() == t.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let c = ModelConfig::toy();
        let a = Params::init(&c, 7);
        assert_eq!(a, Params::init(&c, 7));
        assert_ne!(a, Params::init(&c, 8));
        assert!(a.matches(&c));
        assert!(!a.matches(&ModelConfig::tiny()));
        assert_eq!(a.get("backbone.0.0.weight").shape(), &[16, 3, 5, 5]);
        assert_eq!(a.get("compress.pp.3.2.weight").shape(), &[16, 64, 1, 3]);
        assert_eq!(a.get("head.weight").shape(), &[64, 2]);
        assert!(a.names().iter().any(|n| n == "swg.7.ffn2.bias"));
    }
}

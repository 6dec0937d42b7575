use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::Result;
use crate::ndtensor::{Graph, Scalar, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Indices of one layer's parameters in [`Model::params`].
#[derive(Debug, Clone, Copy)]
pub struct LayerIndex {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_in: usize,
    pub b_in: usize,
    pub w_out: usize,
    pub b_out: usize,
}

/// Parameter manifest: names, shapes and role indices.
#[derive(Debug, Clone)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIndex>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_u: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut inits = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| {
            names.push(name);
            shapes.push(shape);
            inits.push(init);
            names.len() - 1
        };
        let (d, m, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
        let resid_std = INIT_STD / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let tok_emb = add("tok_emb".into(), vec![v, d], Init::Normal(INIT_STD));
        let pos_emb = add("pos_emb".into(), vec![cfg.max_seq_len, d], Init::Normal(INIT_STD));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerIndex {
                ln1_g: add(p("ln1.g"), vec![d], Init::Ones),
                ln1_b: add(p("ln1.b"), vec![d], Init::Zeros),
                w_q: add(p("attn.w_q"), vec![d, d], Init::Normal(INIT_STD)),
                w_k: add(p("attn.w_k"), vec![d, d], Init::Normal(INIT_STD)),
                w_v: add(p("attn.w_v"), vec![d, d], Init::Normal(INIT_STD)),
                w_o: add(p("attn.w_o"), vec![d, d], Init::Normal(resid_std)),
                ln2_g: add(p("ln2.g"), vec![d], Init::Ones),
                ln2_b: add(p("ln2.b"), vec![d], Init::Zeros),
                w_in: add(p("mlp.w_in"), vec![d, m], Init::Normal(INIT_STD)),
                b_in: add(p("mlp.b_in"), vec![m], Init::Zeros),
                w_out: add(p("mlp.w_out"), vec![m, d], Init::Normal(resid_std)),
                b_out: add(p("mlp.b_out"), vec![d], Init::Zeros),
            });
        }
        let lnf_g = add("ln_f.g".into(), vec![d], Init::Ones);
        let lnf_b = add("ln_f.b".into(), vec![d], Init::Zeros);
        let unembed_init = if cfg.zero_unembed {
            Init::Zeros
        } else {
            Init::Normal(INIT_STD)
        };
        let w_u = add("w_u".into(), vec![d, v], unembed_init);
        Layout {
            names,
            shapes,
            inits,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_u,
        }
    }
}

/// Decoder-only transformer parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization; identical seeds give bit-identical parameters.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data = match *init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut rng))).collect()
                    }
                };
                Tensor::new(shape.clone(), data).expect("layout shape")
            })
            .collect();
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        for (i, (p, s)) in params.iter().zip(&layout.shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    layout.names[i],
                    p.shape(),
                    s
                )));
            }
        }
        if params.len() != layout.shapes.len() {
            return Err(crate::Error::Checkpoint(format!(
                "expected {} parameters, got {}",
                layout.shapes.len(),
                params.len()
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `g` as a leaf, in manifest order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), trainable))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }
}

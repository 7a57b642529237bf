//! Declarative parameter layouts and helpers shared by every network.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::persistence::NamedTensorStore;
use crate::scalar::{lit, Scalar};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Initialization rule for one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±√(6/fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    /// Normal with the given standard deviation, resampled outside ±2σ.
    TruncNormal {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A network described by the parameters it needs.
pub trait NetworkSpec {
    /// Every learnable tensor, in canonical store order.
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn parameter_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Checks that `store` holds every parameter with the right shape.
    fn validate<S: Scalar>(&self, store: &NamedTensorStore<S>) -> Result<()> {
        for spec in self.param_specs() {
            store.expect(&spec.name, &spec.shape)?;
        }
        Ok(())
    }
}

/// Fresh weights for `spec`, reproducible from `seed`.
pub fn build_default_weights<S: Scalar, N: NetworkSpec + ?Sized>(
    spec: &N,
    seed: u64,
) -> NamedTensorStore<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = NamedTensorStore::new();
    for p in spec.param_specs() {
        let n = p.numel();
        let data: Vec<S> = match p.init {
            Init::Zeros => vec![S::zero(); n],
            Init::Ones => vec![S::one(); n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| lit(rng.random_range(-bound..bound)))
                    .collect()
            }
            Init::TruncNormal { std } => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break lit(v);
                        }
                    })
                    .collect()
            }
        };
        store
            .insert(p.name, Tensor::new(p.shape, data).expect("spec shape"))
            .expect("spec names are unique");
    }
    store
}

/// A convolution layer: `{prefix}.w` is `[c_out,c_in,k,k]`, `{prefix}.b` is `[c_out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        ConvLayer {
            name: name.into(),
            c_in,
            c_out,
            k,
        }
    }

    /// Size-preserving padding for an odd kernel.
    pub fn padding(&self) -> usize {
        self.k / 2
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn param_specs(&self) -> [ParamSpec; 2] {
        [
            ParamSpec::new(
                self.weight_name(),
                &[self.c_out, self.c_in, self.k, self.k],
                Init::KaimingUniform {
                    fan_in: self.c_in * self.k * self.k,
                },
            ),
            ParamSpec::new(self.bias_name(), &[self.c_out], Init::Zeros),
        ]
    }

    /// `(k²·c_in + 1)·c_out`
    pub fn parameter_count(&self) -> usize {
        (self.k * self.k * self.c_in + 1) * self.c_out
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &BoundParams<S>,
        x: &Var<S>,
    ) -> Result<Var<S>> {
        let w = params.get(&self.weight_name())?;
        let b = params.get(&self.bias_name())?;
        tape.conv2d(x, w, Some(b), 1, self.padding())
    }
}

/// Store entries registered on a tape, either as trainable leaves or as constants.
pub struct BoundParams<S: Scalar = f64> {
    vars: Vec<(String, Var<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> BoundParams<S> {
    pub fn bind(tape: &mut Tape<S>, store: &NamedTensorStore<S>, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(store.len());
        let mut index = HashMap::with_capacity(store.len());
        for (name, t) in store.iter() {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            index.insert(name.to_string(), vars.len());
            vars.push((name.to_string(), v));
        }
        BoundParams { vars, index }
    }

    /// Wraps already-registered variables under their names.
    pub fn from_vars(named: Vec<(String, Var<S>)>) -> Self {
        let index = named
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        BoundParams { vars: named, index }
    }

    pub fn get(&self, name: &str) -> Result<&Var<S>> {
        self.index
            .get(name)
            .map(|&i| &self.vars[i].1)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Gradients for every bound entry, in store order.
    pub fn gradients(&self, grads: &Gradients<S>) -> NamedTensorStore<S> {
        let mut out = NamedTensorStore::new();
        for (name, v) in &self.vars {
            out.insert(name.clone(), grads.wrt(v))
                .expect("names unique");
        }
        out
    }
}

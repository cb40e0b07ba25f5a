//! Parameterized layers and the named parameter store.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvParams, Real, Shape, Tensor};

/// Position of a tensor inside a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered map from hierarchical names (`body.block3.comb7.conv1.weight`)
/// to tensors. Iteration order is insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate name `{name}`")));
        }
        let (id, _) = self.tensors.insert_full(name, value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).expect("param id").0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a differentiable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var<T>> {
        self.tensors.values().map(|t| tape.var(t.clone())).collect()
    }
}

/// Same-size convolution with bias, stride 1 and padding `(k - 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub ch_in: usize,
    pub ch_out: usize,
    pub kernel: usize,
    pub groups: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    /// Registers zero-initialized `<name>.weight` and `<name>.bias` tensors.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: impl Into<String>,
        ch_in: usize,
        ch_out: usize,
        kernel: usize,
        groups: usize,
    ) -> Result<ConvLayer> {
        let name = name.into();
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::invalid("conv_layer", format!("{name}: kernel {kernel} must be odd")));
        }
        if groups == 0 || ch_in % groups != 0 || ch_out % groups != 0 {
            return Err(Error::invalid(
                "conv_layer",
                format!("{name}: groups {groups} must divide {ch_in} and {ch_out}"),
            ));
        }
        let weight = store.insert(
            format!("{name}.weight"),
            Tensor::zeros(Shape::new(ch_out, ch_in / groups, kernel, kernel)),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(Shape::new(ch_out, 1, 1, 1)))?;
        Ok(ConvLayer {
            name,
            ch_in,
            ch_out,
            kernel,
            groups,
            weight,
            bias,
        })
    }

    pub fn conv_params(&self) -> ConvParams {
        ConvParams::same(self.kernel, self.groups)
    }

    pub fn param_count(&self) -> u64 {
        (self.ch_in / self.groups * self.ch_out * self.kernel * self.kernel + self.ch_out) as u64
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        if x.shape().c != self.ch_in {
            return Err(Error::shape(
                "conv_forward",
                "c",
                format!("{} expects {} channels, got {}", self.name, self.ch_in, x.shape().c),
            ));
        }
        tape.conv2d(
            x,
            &params[self.weight.0],
            Some(&params[self.bias.0]),
            self.conv_params(),
        )
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    KaimingUniform,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FanMode {
    FanIn,
}

/// Weight initialization: uniform in `±gain·√(6 / fan)`, biases zero.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub fan: FanMode,
    pub gain: f64,
    pub seed: u64,
}

impl InitSpec {
    pub fn with_seed(seed: u64) -> Self {
        InitSpec {
            seed,
            ..Self::default()
        }
    }

    pub fn bound(&self, weight_shape: Shape) -> f64 {
        let fan_in = (weight_shape.c * weight_shape.h * weight_shape.w) as f64;
        self.gain * (6.0 / fan_in).sqrt()
    }
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            scheme: InitScheme::KaimingUniform,
            fan: FanMode::FanIn,
            gain: 1.0,
            seed: 0,
        }
    }
}

/// Fills every `*.weight` tensor from the seeded generator in store order
/// and zeroes every `*.bias`.
pub fn init_params<T: Real>(store: &mut ParamStore<T>, spec: &InitSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().fill(T::zero());
            continue;
        }
        let bound = spec.bound(t.shape());
        for v in t.data_mut() {
            *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
        }
    }
}

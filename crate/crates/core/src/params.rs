//! Named parameter storage and per-evaluation binding onto a tape.

use std::collections::HashMap;
use std::fmt;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Whether a parameter feeds the kernel-prediction stack (question
/// dependent) or is trained as an ordinary weight (question independent).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    QdPredictor,
    QiFree,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::QdPredictor => "qd",
            Role::QiFree => "qi",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "qd" => Some(Role::QdPredictor),
            "qi" => Some(Role::QiFree),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

impl ParamMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    KaimingUniform { fan_in: usize },
    Uniform { bound: f64 },
    Zeros,
    Ones,
}

/// Owns every trainable tensor of a model plus non-trainable buffers
/// (normalization running statistics).
///
/// An *abstract* store records names, shapes and roles without allocating
/// values, so the parameter inventory of very large configurations can be
/// enumerated.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    meta: Vec<ParamMeta>,
    values: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    by_name: HashMap<String, usize>,
    materialized: bool,
    rng: Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            meta: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            by_name: HashMap::new(),
            materialized: true,
            rng: Rng::new(seed),
        }
    }

    /// Shape-only store; `value` must not be called on it.
    pub fn new_abstract() -> Self {
        Self {
            materialized: false,
            ..Self::new(0)
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    /// Registers a parameter and draws its initial value.
    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], role: Role, init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.buffer_names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidShape(format!("parameter {name} has shape {shape:?}")));
        }
        if self.materialized {
            let value = match init {
                Init::KaimingUniform { fan_in } => Tensor::kaiming_uniform(shape, fan_in, &mut self.rng)?,
                Init::Uniform { bound } => Tensor::uniform(shape, -bound, bound, &mut self.rng)?,
                Init::Zeros => Tensor::zeros(shape)?,
                Init::Ones => Tensor::ones(shape)?,
            };
            self.values.push(value);
        }
        self.by_name.insert(name.clone(), self.meta.len());
        self.meta.push(ParamMeta {
            name,
            shape: shape.to_vec(),
            role,
        });
        Ok(ParamId(self.meta.len() - 1))
    }

    pub fn declare_buffer(&mut self, name: impl Into<String>, shape: &[usize], fill: f64) -> Result<BufferId> {
        let name = name.into();
        if self.by_name.contains_key(&name) || self.buffer_names.contains(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        if self.materialized {
            self.buffers.push(Tensor::full(shape, T::from_f64(fill))?);
        }
        self.buffer_names.push(name);
        Ok(BufferId(self.buffer_names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.meta.len()).map(ParamId)
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.meta
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        assert!(self.materialized, "abstract parameter store has no values");
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        assert!(self.materialized, "abstract parameter store has no values");
        &mut self.values[id.0]
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total parameter elements (buffers excluded).
    pub fn total_elements(&self) -> usize {
        self.meta.iter().map(ParamMeta::numel).sum()
    }

    /// Same inventory with every value converted to `U`.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            meta: self.meta.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
            materialized: self.materialized,
            rng: self.rng.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) struct BnUpdate<T> {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub momentum: f64,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// A tape bound to a parameter store for one forward evaluation.
pub struct Forward<'s, T: Scalar = f32> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Scalar> Forward<'s, T> {
    /// With `track_grads`, parameters enter the tape as differentiable leaves.
    pub fn new(store: &'s ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The tape node for a parameter, inserted once per evaluation.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.track_grads {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub(crate) fn record_bn(&mut self, update: BnUpdate<T>) {
        self.bn_updates.push(update);
    }

    /// Backward from `loss`, returning one gradient per parameter (zeros for
    /// parameters that were not used).
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let grads = self.tape.backward(loss)?;
        Ok(self.collect(&grads))
    }

    pub fn collect(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        let by_param = self
            .bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Some(v) => grads.get(*v),
                None => Tensor::zeros(&self.store.meta[i].shape).expect("declared shapes are valid"),
            })
            .collect();
        ParamGrads { by_param }
    }

    /// Statistics updates produced by train-mode normalization layers.
    pub fn finish(self) -> BnUpdates<T> {
        BnUpdates(self.bn_updates)
    }
}

/// Running-statistic updates to apply after a training step.
#[derive(Debug)]
pub struct BnUpdates<T>(Vec<BnUpdate<T>>);

impl<T: Scalar> BnUpdates<T> {
    pub fn apply(self, store: &mut ParamStore<T>) {
        for u in self.0 {
            let m = T::from_f64(u.momentum);
            let keep = T::one() - m;
            for (r, &b) in store.buffer_mut(u.mean_buf).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store.buffer_mut(u.var_buf).data_mut().iter_mut().zip(&u.batch_var) {
                *r = keep * *r + m * b;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    by_param: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.by_param[id.0]
    }

    pub fn all(&self) -> &[Tensor<T>] {
        &self.by_param
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

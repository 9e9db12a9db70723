//! Named parameter storage and the small set of layers the model is built
//! from. Layers hold parameter *names*; values live in a [`ParamStore`] and
//! are bound onto a tape lazily through a [`Session`].

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PersonalMask,
    CommonMask,
    Fusion,
    TemporalEncoder,
    SharedEncoder,
    TaskHead,
    SubjectHead,
    TaskClassifier,
    SubjectClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered map of named parameters plus non-learned buffers (batch-norm
/// running statistics). Iteration order is lexicographic by name, which keeps
/// every traversal deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup, decay: bool) {
        self.params.insert(
            name.into(),
            Param {
                value,
                group,
                decay,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown buffer {name}")))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::shape(
                "set_buffer",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            )),
            None => Err(Error::contract(format!("unknown buffer {name}"))),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Copies every parameter and buffer of `other` whose name starts with
    /// `prefix` into `self`.
    pub fn extend_from(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.params.insert(k.clone(), v.clone());
        }
        for (k, v) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.buffers.insert(k.clone(), v.clone());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameter groups receive gradients in a session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trainable(BTreeSet<ParamGroup>);

impl Trainable {
    pub fn nothing() -> Self {
        Self(BTreeSet::new())
    }

    pub fn groups(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        Self(groups.into_iter().collect())
    }

    pub fn all() -> Self {
        use ParamGroup::*;
        Self::groups([
            PersonalMask,
            CommonMask,
            Fusion,
            TemporalEncoder,
            SharedEncoder,
            TaskHead,
            SubjectHead,
            TaskClassifier,
            SubjectClassifier,
        ])
    }

    pub fn without(mut self, group: ParamGroup) -> Self {
        self.0.remove(&group);
        self
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        self.0.contains(&group)
    }
}

/// One forward (and optionally backward) pass: a tape, the parameters bound
/// onto it so far, the dropout stream, and pending running-stat updates.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    trainable: Trainable,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    buffer_updates: Vec<(String, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, trainable: Trainable, rng: Option<ChaCha8Rng>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: BTreeMap::new(),
            mode,
            rng,
            buffer_updates: Vec::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn from_tape(tape: Tape, store: &'a ParamStore, mode: Mode, trainable: Trainable, rng: Option<ChaCha8Rng>) -> Self {
        Self {
            tape,
            ..Self::new(store, mode, trainable, rng)
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Uses `v` for the named parameter instead of the stored value.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        if self.store.get(name).is_none() {
            return Err(Error::contract(format!("unknown parameter {name}")));
        }
        self.bound.insert(name.to_string(), v);
        Ok(())
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, Trainable::nothing(), None)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Binds (once) and returns the tape variable of a named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        let v = if self.trainable.contains(p.group) {
            self.tape.param(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter read during this session.
    pub fn accessed(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Inverted dropout in training mode; the identity (no node) in
    /// evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::contract("training-mode dropout needs a seeded stream"))?;
        let keep = 1.0 - rate;
        let n = self.tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.dropout(x, mask)
    }

    pub(crate) fn push_buffer_update(&mut self, name: &str, value: Tensor) {
        self.buffer_updates.push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradients of `root` for every trainable parameter bound in this
    /// session.
    pub fn gradients(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.tape.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let group = self.store.get(name).expect("bound parameter exists").group;
            if self.trainable.contains(group) {
                out.insert(name.clone(), grads.take(&self.tape, v));
            }
        }
        Ok(out)
    }
}

/// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Affine layer `x [N, in] -> x W + b`, with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    /// Registers the layer. `rng = None` gives all-zero weights.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        group: ParamGroup,
        bias_decay: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Self {
        let w = match rng {
            Some(rng) => fan_in_uniform(&[input, output], input, rng),
            None => Tensor::zeros(&[input, output]),
        };
        let layer = Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
        };
        store.insert(&layer.w, w, group, true);
        store.insert(&layer.b, Tensor::zeros(&[output]), group, bias_decay);
        layer
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.w)?;
        let b = s.param(&self.b)?;
        let y = s.tape.matmul(x, w)?;
        s.tape.add(y, b)
    }
}

/// Stride-1 zero-padded 1-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: String,
    pub b: String,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        pad: usize,
        group: ParamGroup,
        bias_decay: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Self {
        let w = match rng {
            Some(rng) => fan_in_uniform(&[c_out, c_in, kernel], c_in * kernel, rng),
            None => Tensor::zeros(&[c_out, c_in, kernel]),
        };
        let layer = Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            pad,
        };
        store.insert(&layer.w, w, group, true);
        store.insert(&layer.b, Tensor::zeros(&[c_out]), group, bias_decay);
        layer
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(&self.w)?;
        let b = s.param(&self.b)?;
        s.tape.conv1d(x, w, b, self.pad)
    }
}

/// Batch normalisation over axis 1 with learned scale/shift and running
/// statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, name: &str, features: usize, group: ParamGroup, eps: f64, momentum: f64) -> Self {
        let layer = Self {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
            eps,
            momentum,
        };
        store.insert(&layer.gamma, Tensor::ones(&[features]), group, false);
        store.insert(&layer.beta, Tensor::zeros(&[features]), group, false);
        store.insert_buffer(&layer.running_mean, Tensor::zeros(&[features]));
        store.insert_buffer(&layer.running_var, Tensor::ones(&[features]));
        layer
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", format!("{shape:?}")));
        }
        let features = shape[1];
        // Per-feature tensors broadcast as [C] for 2-D input, [C, 1] for 3-D.
        let bshape: Vec<usize> = std::iter::once(features)
            .chain(std::iter::repeat_n(1, shape.len() - 2))
            .collect();
        let normed = match s.mode() {
            Mode::Train => {
                let count = s.tape.value(x).numel() / features;
                if count < 2 {
                    return Err(Error::contract(format!(
                        "training-mode batch norm needs at least 2 values per feature, got {count} \
                         (batch of {})",
                        shape[0]
                    )));
                }
                let (mean, var) = crate::tensor::channel_stats(s.tape.value(x));
                let unbias = count as f64 / (count - 1) as f64;
                let rm = s.store().buffer(&self.running_mean)?.data().to_vec();
                let rv = s.store().buffer(&self.running_var)?.data().to_vec();
                let m = self.momentum;
                let new_rm = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let new_rv = rv.iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b * unbias).collect();
                s.push_buffer_update(&self.running_mean, Tensor::vector(new_rm));
                s.push_buffer_update(&self.running_var, Tensor::vector(new_rv));
                s.tape.batch_norm(x, self.eps)?
            }
            Mode::Eval => {
                let rm = s.store().buffer(&self.running_mean)?;
                let rv = s.store().buffer(&self.running_var)?;
                let shift = Tensor::new(&bshape, rm.data().iter().map(|v| -v).collect())?;
                let scale = Tensor::new(&bshape, rv.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect())?;
                let shift = s.constant(shift);
                let scale = s.constant(scale);
                let centred = s.tape.add(x, shift)?;
                s.tape.mul(centred, scale)?
            }
        };
        let gamma = s.param(&self.gamma)?;
        let beta = s.param(&self.beta)?;
        let gamma = s.tape.reshape(gamma, &bshape)?;
        let beta = s.tape.reshape(beta, &bshape)?;
        let scaled = s.tape.mul(normed, gamma)?;
        s.tape.add(scaled, beta)
    }
}

//! Named parameter storage and the layer wrappers that bind parameters onto
//! a tape for one forward/backward pass.
//!
//! Parameters live in a [`ParamStore`] across passes; a [`Pass`] clones each
//! referenced parameter onto a fresh tape as a leaf, memoized so repeated
//! use of one parameter shares a single node and fan-out gradients
//! accumulate correctly.

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub learnable: bool,
}

pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, learnable: bool) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            learnable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// One forward/backward pass: a fresh tape plus the binding between store
/// parameters and tape leaves.
pub struct Pass<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    pub train: bool,
}

impl<'s, T: Real> Pass<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, train: bool) -> Self {
        let bound = vec![None; store.len()];
        Pass {
            tape: Tape::new(),
            store,
            bound,
            train,
        }
    }

    /// Bind a learnable parameter onto the tape, once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        debug_assert!(entry.learnable, "buffer {:?} bound as parameter", entry.name);
        let value = entry.value.clone();
        let v = if self.train {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn buffer_clone(&self, id: ParamId) -> Tensor<T> {
        self.store.value(id).clone()
    }

    pub fn set_buffer(&mut self, id: ParamId, value: Tensor<T>) {
        debug_assert!(!self.store.entry(id).learnable);
        debug_assert_eq!(self.store.value(id).shape(), value.shape());
        *self.store.value_mut(id) = value;
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients for every learnable parameter bound during this pass.
    /// Parameters on the tape that received no gradient report zeros.
    pub fn grads(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, slot) in self.bound.iter().enumerate() {
            let Some(v) = slot else { continue };
            let id = ParamId(i);
            if !self.store.entry(id).learnable {
                continue;
            }
            let g = self
                .tape
                .take_grad(*v)
                .unwrap_or_else(|| Tensor::zeros(self.store.value(id).shape()));
            out.push((id, g));
        }
        out
    }
}

// ---- initialization ------------------------------------------------------

/// He/Kaiming normal for ReLU-family fan-in.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// 1/sqrt(fan_in), the usual dense-layer scale.
pub fn linear_std(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

// ---- layers ----------------------------------------------------------------

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    c_out: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let mut conv = Self::new_no_bias(store, rng, name, c_in, c_out, k, stride);
        conv.bias = Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out])));
        conv
    }

    /// For convs feeding a batch norm, where a bias would be cancelled by
    /// the mean subtraction and sit at zero gradient forever.
    pub fn new_no_bias<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            Tensor::randn(&[c_out, c_in, k, k], kaiming_std(c_in * k * k), rng),
        );
        Conv2d {
            weight,
            bias: None,
            c_out,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = p.param(self.weight);
        let b = match self.bias {
            Some(id) => p.param(id),
            None => p.tape.constant(Tensor::zeros(&[self.c_out])),
        };
        p.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            Tensor::randn(&[d_in, d_out], linear_std(d_in), rng),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = p.param(self.weight);
        let b = p.param(self.bias);
        p.tape.linear(x, w, b)
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[c])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[c])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let gamma = p.param(self.gamma);
        let beta = p.param(self.beta);
        if p.train {
            let (y, batch_mean, batch_var) = p.tape.batch_norm_train(x, gamma, beta, self.eps)?;
            let keep = T::from_f64(1.0 - self.momentum);
            let mom = T::from_f64(self.momentum);
            let blend = |old: &Tensor<T>, new: &Tensor<T>| {
                Tensor::from_parts(
                    old.shape().to_vec(),
                    old.data()
                        .iter()
                        .zip(new.data())
                        .map(|(&o, &n)| keep * o + mom * n)
                        .collect(),
                )
            };
            let rm = blend(&p.buffer_clone(self.running_mean), &batch_mean);
            let rv = blend(&p.buffer_clone(self.running_var), &batch_var);
            p.set_buffer(self.running_mean, rm);
            p.set_buffer(self.running_var, rv);
            Ok(y)
        } else {
            let rm = p.buffer_clone(self.running_mean);
            let rv = p.buffer_clone(self.running_var);
            p.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps)
        }
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[d])),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let gamma = p.param(self.gamma);
        let beta = p.param(self.beta);
        p.tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Scalar learnable multiplier, initialized to 1.
pub struct ResidualScale {
    pub scale: ParamId,
}

impl ResidualScale {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str) -> Self {
        ResidualScale {
            scale: store.add(name, Tensor::ones(&[1])),
        }
    }

    /// `base + scale * residual`
    pub fn apply<T: Real>(&self, p: &mut Pass<'_, T>, base: Var, residual: Var) -> Result<Var> {
        let s = p.param(self.scale);
        let scaled = p.tape.mul(residual, s)?;
        p.tape.add(base, scaled)
    }
}

impl<T: Real> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.entries.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

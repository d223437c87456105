use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Handle to one named parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

/// Tape variables for every parameter of a store, by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Same binding with parameter `id` read from `var` instead.
    pub fn with(mut self, id: ParamId, var: Var) -> Self {
        self.vars[id.0] = var;
        self
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter on `tape`, as a gradient leaf when
    /// `trainable`, else as a constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.input(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Seeded parameter initialiser.
pub struct Init<'a, T> {
    pub(crate) store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_f64(shape, &data)?;
        self.store.push(name, t)
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.push(name, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.full(name, shape, 0.0)
    }
}

/// Dense layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = init.fan_in(&format!("{name}.weight"), &[input, output], input)?;
        let bias = if bias {
            Some(init.zeros(&format!("{name}.bias"), &[output])?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Zero weight and bias; the layer starts as the constant zero map.
    pub fn zeroed<T: Real>(init: &mut Init<'_, T>, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: init.zeros(&format!("{name}.weight"), &[input, output])?,
            bias: Some(init.zeros(&format!("{name}.bias"), &[output])?),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bind.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_bcast(y, bind.var(b)),
            None => Ok(y),
        }
    }
}

/// Row layer norm with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.full(&format!("{name}.gain"), &[dim], 1.0)?,
            shift: init.zeros(&format!("{name}.shift"), &[dim])?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        self.forward_scaled(tape, bind, x, 1.0)
    }

    /// Normalisation whose gain is further multiplied by `extra_gain`.
    pub fn forward_scaled<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var, extra_gain: f64) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let y = tape.mul_bcast(n, bind.var(self.gain))?;
        let y = if extra_gain == 1.0 {
            y
        } else {
            tape.scale(y, extra_gain)?
        };
        tape.add_bcast(y, bind.var(self.shift))
    }
}

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamTag {
    /// Embedding tables and encoder layers; trained at the backbone learning rate.
    Backbone,
    /// Heads and everything else.
    Other,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamTag::Backbone => "backbone",
            ParamTag::Other => "other",
            ParamTag::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(ParamTag::Backbone),
            "other" => Some(ParamTag::Other),
            "buffer" => Some(ParamTag::Buffer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub tag: ParamTag,
}

/// Named, tagged parameter tensors of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, tag: ParamTag) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, tag });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count of trainable (non-buffer) parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tag != ParamTag::Buffer)
            .map(|p| p.value.len())
            .sum()
    }

    /// Places every parameter on `tape` as a leaf. Buffers never require grad;
    /// the rest do when `train` is set.
    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), train && p.tag != ParamTag::Buffer))
            .collect();
        Bound { vars }
    }

    /// Trainable values in store order, the inputs of a full gradient check.
    pub fn trainable_values(&self) -> Vec<Tensor> {
        self.params.iter().filter(|p| p.tag != ParamTag::Buffer).map(|p| p.value.clone()).collect()
    }

    /// Binds trainable entries to `leaves` (as from [`Self::trainable_values`])
    /// and buffers to constants.
    pub fn bind_leaves(&self, tape: &mut Tape, leaves: &[Var]) -> Result<Bound> {
        let mut next = leaves.iter();
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(match p.tag {
                ParamTag::Buffer => tape.constant(p.value.clone()),
                _ => *next.next().ok_or_else(|| Error::Contract("fewer leaves than trainable parameters".into()))?,
            });
        }
        if next.next().is_some() {
            return Err(Error::Contract("more leaves than trainable parameters".into()));
        }
        Ok(Bound { vars })
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape handles laid out in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of every parameter after a backward pass, in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect()
    }
}

/// AdamW with decoupled weight decay and separate backbone / other learning rates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr_backbone: f64, lr_other: f64, weight_decay: f64) -> Self {
        AdamW {
            lr_backbone,
            lr_other,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Moment buffers, one pair per parameter in store order (empty before the first step).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub(crate) fn restore(&mut self, step_count: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        self.step_count = step_count;
        self.first = first;
        self.second = second;
    }

    /// One update of every trainable parameter. `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "adamw: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.params.iter().zip(grads) {
            if p.tag != ParamTag::Buffer && g.is_none() {
                return Err(Error::Contract(format!("adamw: parameter `{}` has no gradient", p.name)));
            }
        }
        if self.first.len() != store.len() {
            self.first = store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            let lr = match p.tag {
                ParamTag::Buffer => continue,
                ParamTag::Backbone => self.lr_backbone,
                ParamTag::Other => self.lr_other,
            };
            let g = grads[i].as_ref().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= lr * self.weight_decay * *w;
                *w -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

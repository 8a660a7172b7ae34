use indexmap::IndexMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Role of a named tensor; decides weight decay and whether it is trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution or linear weight.
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Running statistics: saved and restored, never differentiated.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::NormScale => 2,
            ParamKind::NormShift => 3,
            ParamKind::RunningMean => 4,
            ParamKind::RunningVar => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::NormScale,
            3 => ParamKind::NormShift,
            4 => ParamKind::RunningMean,
            5 => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S: Real = f32> {
    pub value: Tensor<S>,
    /// Accumulated gradient; same shape as `value` when present.
    pub grad: Option<Tensor<S>>,
    pub requires_grad: bool,
    pub kind: ParamKind,
}

impl<S: Real> Parameter<S> {
    pub fn new(value: Tensor<S>, kind: ParamKind) -> Self {
        Parameter { value, grad: None, requires_grad: !kind.is_buffer(), kind }
    }

    pub(crate) fn accumulate_grad(&mut self, g: &Tensor<S>) -> Result<()> {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                if g.shape() != self.value.shape() {
                    return Err(Error::shape("grad", self.value.shape(), g.shape()));
                }
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }
}

/// Ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Real = f32> {
    entries: IndexMap<String, Parameter<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, kind: ParamKind) {
        self.entries.insert(name.into(), Parameter::new(value, kind));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<S>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<S>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a value, keeping kind and requiring an identical shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter<S>> {
        self.entries.shift_remove(name)
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|p| p.requires_grad).map(|p| p.value.len()).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                            requires_grad: p.requires_grad,
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

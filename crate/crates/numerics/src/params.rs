use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

/// A set of named trainable tensors.
///
/// Parameter structs double as their own gradient containers: a backward
/// pass fills a zeroed copy of the same struct, and [`Grads::collect`] turns
/// it into a name-keyed map that the optimizer and gradient checks share.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit(&mut |_, t| count += t.len());
        count
    }

    fn get_param(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit(&mut |n, t| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    fn set_param(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let mut status = Err(NumericsError::Domain(format!("no parameter named `{name}`")));
        self.visit_mut(&mut |n, t| {
            if n == name {
                status = if t.shape() == value.shape() {
                    *t = value.clone();
                    Ok(())
                } else {
                    Err(NumericsError::Dimension {
                        op: "set_param",
                        lhs: t.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    })
                };
            }
        });
        status
    }
}

/// Visits `inner` with every name prefixed by `prefix.`.
pub fn visit_nested(prefix: &str, inner: &dyn Parameterized, f: &mut dyn FnMut(&str, &Tensor)) {
    inner.visit(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

pub fn visit_nested_mut(
    prefix: &str,
    inner: &mut dyn Parameterized,
    f: &mut dyn FnMut(&str, &mut Tensor),
) {
    inner.visit_mut(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

/// Several parameter sets viewed as one, each under its own name prefix.
#[derive(Default)]
pub struct ParamGroup<'a> {
    parts: Vec<(String, &'a mut dyn Parameterized)>,
}

impl<'a> ParamGroup<'a> {
    pub fn new() -> Self {
        Self { parts: Vec::new() }
    }

    pub fn with(mut self, prefix: &str, part: &'a mut dyn Parameterized) -> Self {
        self.parts.push((prefix.to_string(), part));
        self
    }

    pub fn push(&mut self, prefix: &str, part: &'a mut dyn Parameterized) {
        self.parts.push((prefix.to_string(), part));
    }
}

impl Parameterized for ParamGroup<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (prefix, part) in &self.parts {
            visit_nested(prefix, &**part, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (prefix, part) in &mut self.parts {
            visit_nested_mut(prefix, &mut **part, f);
        }
    }
}

/// Name-keyed gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flattens a gradient-shaped parameter struct into a map.
    pub fn collect(prefix: Option<&str>, grads: &dyn Parameterized) -> Self {
        let mut out = Self::new();
        out.merge_from(prefix, grads);
        out
    }

    /// Adds every tensor of `grads` (optionally prefixed) into the map.
    pub fn merge_from(&mut self, prefix: Option<&str>, grads: &dyn Parameterized) {
        grads.visit(&mut |n, t| {
            let name = match prefix {
                Some(p) => format!("{p}.{n}"),
                None => n.to_string(),
            };
            self.accumulate(&name, t, 1.0);
        });
    }

    /// `self[name] += weight · t`.
    pub fn accumulate(&mut self, name: &str, t: &Tensor, weight: f64) {
        match self.map.get_mut(name) {
            Some(existing) => existing
                .axpy(weight, t)
                .expect("gradient shapes are fixed per parameter name"),
            None => {
                self.map.insert(name.to_string(), t.scaled(weight));
            }
        }
    }

    pub fn merge(&mut self, other: &Grads, weight: f64) {
        for (name, t) in &other.map {
            self.accumulate(name, t, weight);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.map.values_mut() {
            t.scale(alpha);
        }
    }

    pub fn norm(&self, name: &str) -> f64 {
        self.map.get(name).map_or(0.0, Tensor::norm)
    }

    /// Norm over all parameters whose name starts with `prefix`.
    pub fn prefix_norm(&self, prefix: &str) -> f64 {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

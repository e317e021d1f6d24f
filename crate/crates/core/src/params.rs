//! Named parameter storage and per-graph binding.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::tensor::{Graph, Real, Tensor, Var};

/// Ordered map of named parameter tensors.
///
/// Tensors are reference counted so that binding them into a graph does not
/// copy; updates go through [`ParamSet::get_mut`], which clones only if a
/// graph still holds the old value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name).map(|t| t.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    /// Copies every parameter of `other` in under `prefix.`.
    pub fn absorb(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (name, t) in &other.tensors {
            self.tensors
                .insert(format!("{prefix}.{name}"), Arc::clone(t));
        }
    }

    /// Parameters under `prefix.`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamSet<T> {
        let lead = format!("{prefix}.");
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), Arc::clone(v))))
            .collect();
        ParamSet { tensors }
    }

    /// Records every parameter as a leaf of `g`. Trainable parameters track
    /// gradients, frozen ones are constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.bind_where(g, |_| trainable)
    }

    /// Like [`bind`](Self::bind) with per-parameter trainability.
    pub fn bind_where(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.param(Arc::clone(t))
                } else {
                    g.constant(Arc::clone(t))
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Handle for `name`.
    ///
    /// # Panics
    /// If no parameter of that name was bound. Parameter names are fixed by
    /// the model constructors, so a miss is a programming error.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn scope<'a>(&'a self, prefix: &str) -> Scope<'a> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    /// Registers an externally created handle under `name`.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    /// Scope without a prefix.
    pub fn root(&self) -> Scope<'_> {
        self.scope("")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// A name prefix inside a [`Bound`].
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.bound.var(&self.join(name))
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: self.join(name),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_shares_and_get_mut_copies_on_write() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a.w", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        p.get_mut("a.w").unwrap().data_mut()[0] = 5.0;
        assert_eq!(g.value(b.var("a.w")).data(), &[1.0, 1.0]);
        assert_eq!(p.get("a.w").unwrap().data(), &[5.0, 1.0]);
    }

    #[test]
    fn absorb_and_extract_round_trip() {
        let mut inner = ParamSet::<f32>::new();
        inner.insert("x", Tensor::zeros(&[1]));
        inner.insert("y.z", Tensor::ones(&[3]));
        let mut outer = ParamSet::new();
        outer.absorb("enc", &inner);
        assert!(outer.contains("enc.y.z"));
        assert_eq!(outer.extract("enc"), inner);
        assert!(outer.extract("en").is_empty());
    }

    #[test]
    fn scoped_lookup() {
        let mut p = ParamSet::<f64>::new();
        p.insert("m.l0.w", Tensor::zeros(&[1]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let s = b.scope("m").sub("l0");
        assert_eq!(s.var("w"), b.var("m.l0.w"));
        assert!(!g.requires_grad(s.var("w")));
        assert_eq!(b.root().sub("m").var("l0.w"), s.var("w"));
    }
}

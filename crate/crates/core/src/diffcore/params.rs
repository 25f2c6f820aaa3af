use std::collections::BTreeMap;

use super::array::Array;
use crate::error::{Error, Result};

/// Named parameters plus a per-name trainable mask.
///
/// Names are hierarchical (`vision.layer.7.attn.wq`). Iteration order is the
/// lexicographic order of names, which keeps serialization and hashing stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array>,
    trainable: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.trainable.insert(name.clone(), trainable);
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(flag) = self.trainable.get_mut(name) {
            *flag = trainable;
        }
    }

    /// Sets the mask for every name from a predicate.
    pub fn set_trainable_by(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, flag) in self.trainable.iter_mut() {
            *flag = pred(name);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().filter(|(_, &t)| t).map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Plain SGD on the trainable subset: `p -= lr * g`.
    ///
    /// Gradients for frozen or unknown names are rejected.
    pub fn sgd_step(&mut self, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !self.is_trainable(name) {
                return Err(Error::NotTrainable(name.clone()));
            }
            let p = &self.params[name];
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    name.clone(),
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("validated above");
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamStore::new();
        ps.insert("a", Array::scalar(1.0), true).unwrap();
        assert!(matches!(
            ps.insert("a", Array::scalar(2.0), true),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn sgd_skips_nothing_and_rejects_frozen() {
        let mut ps = ParamStore::new();
        ps.insert("w", Array::row(vec![1.0, 2.0]), true).unwrap();
        ps.insert("f", Array::scalar(5.0), false).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Array::row(vec![1.0, -1.0]));
        ps.sgd_step(&g, 0.5).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[0.5, 2.5]);

        g.insert("f".to_string(), Array::scalar(1.0));
        assert!(ps.sgd_step(&g, 0.5).is_err());
    }
}

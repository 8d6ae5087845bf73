use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Element")]
pub struct Param<T> {
    pub name: String,
    /// Freezing works on groups (a layer), never on single tensors.
    pub group: String,
    pub value: Tensor<T>,
}

/// Owned parameters of one network plus its freeze mask.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Element")]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    frozen: BTreeSet<String>,
}

/// Parameters inserted as leaves on a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), frozen: BTreeSet::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), group: group.into(), value });
        ParamId(self.params.len() - 1)
    }

    /// Standard-normal initialisation; runtime scaling happens in the layers.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        self.add(name, group, Tensor::from_vec(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Distinct group names in insertion order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.params
            .iter()
            .filter(|p| seen.insert(p.group.clone()))
            .map(|p| p.group.clone())
            .collect()
    }

    pub fn has_group(&self, group: &str) -> bool {
        self.params.iter().any(|p| p.group == group)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.params[id.0].group)
    }

    pub fn group_frozen(&self, group: &str) -> bool {
        self.frozen.contains(group)
    }

    pub fn frozen_groups(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Marks a group (un)trainable. Returns `false` when the group does not exist.
    pub fn set_group_trainable(&mut self, group: &str, trainable: bool) -> bool {
        if !self.has_group(group) {
            return false;
        }
        if trainable {
            self.frozen.remove(group);
        } else {
            self.frozen.insert(group.to_string());
        }
        true
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Inserts every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.input(p.value.clone())).collect() }
    }

    /// Copy of all values, keyed by parameter name.
    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot { entries: self.params.iter().map(|p| (p.name.clone(), p.group.clone(), p.value.clone())).collect() }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group.clone(), value: p.value.cast() })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Parameter values captured at one point in time, for audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Element")]
pub struct Snapshot<T> {
    entries: Vec<(String, String, Tensor<T>)>,
}

impl<T: Element> Snapshot<T> {
    /// Groups of `self` whose values differ bit-wise from `later`.
    ///
    /// Parameters present only in `later` (added by growth) are ignored.
    pub fn changed_groups(&self, later: &Snapshot<T>) -> BTreeSet<String> {
        let mut changed = BTreeSet::new();
        for (name, group, value) in &self.entries {
            match later.entries.iter().find(|(n, _, _)| n == name) {
                Some((_, _, v)) if bits_equal(v, value) => {}
                _ => {
                    changed.insert(group.clone());
                }
            }
        }
        changed
    }

    /// Max absolute difference over parameters in `groups`.
    pub fn max_abs_diff_in(&self, later: &Snapshot<T>, groups: &BTreeSet<String>) -> f64 {
        let mut worst = 0.0f64;
        for (name, group, value) in &self.entries {
            if !groups.contains(group) {
                continue;
            }
            if let Some((_, _, v)) = later.entries.iter().find(|(n, _, _)| n == name) {
                worst = worst.max(value.max_abs_diff(v));
            }
        }
        worst
    }

    pub fn group_bits_equal(&self, later: &Snapshot<T>, group: &str) -> bool {
        !self.changed_groups(later).contains(group)
    }
}

fn bits_equal<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn freeze_mask_and_snapshot_diff() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let a = store.add_normal("a.w", "a", &[2, 2], &mut rng);
        let b = store.add_zeros("b.w", "b", &[3]);
        assert!(store.set_group_trainable("a", false));
        assert!(!store.set_group_trainable("missing", false));
        assert_eq!(store.trainable_ids(), vec![b]);
        let before = store.snapshot();
        store.value_mut(b).data_mut()[0] = 1.0;
        let changed = before.changed_groups(&store.snapshot());
        assert!(changed.contains("b") && !changed.contains("a"));
        assert!(store.is_frozen(a));
    }
}

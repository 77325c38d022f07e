use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Gradients, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ownership tag used to select parameters per optimizer or training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Conditioning,
    Score,
    Discriminator,
    Mdn,
    Lora,
    Predictor,
}

impl Group {
    /// Parameters updated by the main-stage generator optimizer.
    pub const GENERATOR: [Group; 3] = [Group::Conditioning, Group::Score, Group::Mdn];
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub value: Array,
}

/// Flat, ordered storage for every learnable array of a model.
///
/// A store may be built in shape-only mode, which records names and shapes
/// without allocating, so parameter census of large configurations is cheap.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "StoreRepr")]
pub struct ParamStore {
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, ParamId>,
    shape_only: bool,
}

#[derive(Deserialize)]
struct StoreRepr {
    params: Vec<Param>,
    shape_only: bool,
}

impl From<StoreRepr> for ParamStore {
    fn from(r: StoreRepr) -> Self {
        let mut s = ParamStore {
            params: r.params,
            index: HashMap::new(),
            shape_only: r.shape_only,
        };
        s.rebuild_index();
        s
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            shape_only: false,
        }
    }

    pub fn shape_only() -> Self {
        ParamStore {
            shape_only: true,
            ..ParamStore::new()
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
    }

    /// Registers a parameter. `init` is only invoked when values are allocated.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        init: impl FnOnce() -> Array,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let value = if self.shape_only {
            Array::zeros(IxDyn(&[0]))
        } else {
            let v = init();
            assert_eq!(v.shape(), shape, "initializer shape mismatch for {name}");
            v
        };
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            shape: shape.to_vec(),
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Array) {
        assert_eq!(value.shape(), self.params[id.0].shape.as_slice());
        self.params[id.0].value = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: &[Group]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar parameters in the given groups.
    pub fn count(&self, groups: &[Group]) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Copies values for `ids` from `other`, which must have identical layout.
    pub fn copy_from(&mut self, other: &ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            let src = other.params.get(id.0).ok_or_else(|| {
                Error::Shape(format!("parameter {} missing from source store", id.0))
            })?;
            if src.shape != self.params[id.0].shape || src.name != self.params[id.0].name {
                return Err(Error::Shape(format!(
                    "parameter {} layout differs between stores",
                    src.name
                )));
            }
            self.params[id.0].value = src.value.clone();
        }
        Ok(())
    }

    /// Ordered `(name, shape)` listing, used to detect architecture drift.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect()
    }
}

/// Binds a store to one forward pass.
///
/// Each parameter becomes a single graph leaf per pass (shared by every use),
/// and only parameters whose group is listed as trainable receive gradients.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Vec<Group>,
    leaves: RefCell<BTreeMap<ParamId, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: &[Group]) -> Self {
        Binder {
            store,
            trainable: trainable.to_vec(),
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    /// A binder under which nothing records gradients.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Binder::new(store, &[])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Tensor {
        if let Some(t) = self.leaves.borrow().get(&id) {
            return t.clone();
        }
        let p = self.store.param(id);
        let t = if self.trainable.contains(&p.group) {
            Tensor::leaf(p.value.clone())
        } else {
            Tensor::constant(p.value.clone())
        };
        self.leaves.borrow_mut().insert(id, t.clone());
        t
    }

    /// Gradients of every trainable parameter used in this pass, in id order.
    /// Parameters that did not influence the output get zero gradients.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(ParamId, Array)> {
        self.leaves
            .borrow()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(&id, t)| {
                let g = grads
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(t.value().raw_dim()));
                (id, g)
            })
            .collect()
    }
}

/// Deterministic parameter initialisation.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Array {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Array {
        Array::zeros(IxDyn(shape))
    }

    pub fn constant(shape: &[usize], v: f64) -> Array {
        Array::from_elem(IxDyn(shape), v)
    }
}

use std::collections::{BTreeSet, HashMap};

use super::store::{EntryKind, ParamStore};
use crate::autodiff::{BatchStats, Gradients, Graph, ParamId, Var};
use crate::error::Result;

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are bound into the graph on first use. Only parameters in the
/// trainable set become differentiable leaves; the rest are constants and
/// receive no gradient. A batch-norm layer runs in train mode when the
/// session is training and its scale parameter is trainable, otherwise it
/// uses the stored running statistics.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    trainable: BTreeSet<ParamId>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

/// Batch statistics from a train-mode batch norm, to be folded into the
/// running buffers after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

impl<'a> Session<'a> {
    /// Training session over the given trainable parameters.
    pub fn train(store: &'a ParamStore, trainable: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable: trainable
                .into_iter()
                .filter(|&id| store.entry(id).kind == EntryKind::Param)
                .collect(),
            training: true,
            bn_updates: Vec::new(),
        }
    }

    /// Training session where every parameter is trainable.
    pub fn train_all(store: &'a ParamStore) -> Self {
        Self::train(store, store.trainable_ids().collect::<Vec<_>>())
    }

    /// Inference session: nothing trainable, batch norm on running statistics.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable: BTreeSet::new(),
            training: false,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.contains(&id)
    }

    pub fn bn_train_mode(&self, gamma: ParamId) -> bool {
        self.training && self.is_trainable(gamma)
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable.contains(&id) {
            self.graph.param(id, value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(id, v);
        v
    }

    pub fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.graph.backward(loss)
    }

    pub fn into_bn_updates(self) -> Vec<BnUpdate> {
        self.bn_updates
    }

    pub fn value(&self, v: Var) -> &crate::autodiff::Tensor {
        self.graph.value(v)
    }
}

/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.stats.mean), (u.running_var, &u.stats.var)] {
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

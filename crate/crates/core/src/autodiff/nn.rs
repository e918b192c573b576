//! Neural building blocks: named parameter store, two-layer MLPs and a GRU
//! cell, all expressed as tape operations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, ValueId};
use super::tensor::Tensor;

/// Hidden-layer activation, fixed per experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Selu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: ValueId) -> ValueId {
        match self {
            Activation::Selu => tape.selu(x),
            Activation::LeakyRelu => tape.leaky_relu(x),
        }
    }
}

/// Output head of an MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    Linear,
    /// Strictly positive outputs.
    Softplus,
    Sigmoid,
}

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat store of named parameter tensors plus Adam moment buffers.
///
/// Registration order is fixed by model construction, which makes checkpoint
/// layout and gradient collection deterministic.
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    /// Adam first/second moments, lazily allocated on the first step.
    pub(crate) moment1: Vec<Tensor>,
    pub(crate) moment2: Vec<Tensor>,
    pub(crate) adam_step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            moment1: Vec::new(),
            moment2: Vec::new(),
            adam_step: 0,
        }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.moment1
            .push(Tensor::zeros(tensor.rows(), tensor.cols()));
        self.moment2
            .push(Tensor::zeros(tensor.rows(), tensor.cols()));
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    /// Mutate one scalar coordinate; used by finite-difference checks.
    pub fn nudge(&mut self, id: ParamId, coord: usize, delta: f64) {
        self.tensors[id.0].data_mut()[coord] += delta;
    }

    pub(crate) fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Split borrow of (parameter, moment1, moment2) for optimizer updates.
    pub(crate) fn optim_slots(&mut self, i: usize) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        (&mut self.tensors[i], &mut self.moment1[i], &mut self.moment2[i])
    }

    /// Place every parameter on a tape as a leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        Binding { ids }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Map from [`ParamId`] to the tape leaf holding that parameter's value.
pub struct Binding {
    ids: Vec<ValueId>,
}

impl Binding {
    pub fn value(&self, id: ParamId) -> ValueId {
        self.ids[id.0]
    }

    /// Collect parameter gradients in registration order (zeros where the
    /// loss does not depend on a parameter).
    pub fn collect_grads(
        &self,
        store: &ParamStore,
        grads: &super::tape::Gradients,
    ) -> Vec<Tensor> {
        (0..self.ids.len())
            .map(|i| grads.get_or_zeros(self.ids[i], store.tensors[i].shape()))
            .collect()
    }
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight init.
pub fn init_weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

/// Two-layer perceptron: affine, activation, affine, optional output head.
///
/// Weights are stored input-major (`in × out`), so a batch `x: n×in` maps
/// through `x·W1 + b1` and onward.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub activation: Activation,
    pub head: OutputHead,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_width: usize,
        hidden: usize,
        out_width: usize,
        activation: Activation,
        head: OutputHead,
    ) -> Self {
        let w1 = store.register(&format!("{prefix}.w1"), init_weight(rng, in_width, hidden));
        let b1 = store.register(&format!("{prefix}.b1"), Tensor::zeros(1, hidden));
        let w2 = store.register(&format!("{prefix}.w2"), init_weight(rng, hidden, out_width));
        let b2 = store.register(&format!("{prefix}.b2"), Tensor::zeros(1, out_width));
        Mlp2 {
            w1,
            b1,
            w2,
            b2,
            activation,
            head,
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: ValueId) -> ValueId {
        let h = tape.matmul(x, bind.value(self.w1));
        let h = tape.add_row(h, bind.value(self.b1));
        let h = self.activation.apply(tape, h);
        let y = tape.matmul(h, bind.value(self.w2));
        let y = tape.add_row(y, bind.value(self.b2));
        match self.head {
            OutputHead::Linear => y,
            OutputHead::Softplus => tape.softplus(y),
            OutputHead::Sigmoid => tape.sigmoid(y),
        }
    }
}

/// Standard GRU cell:
/// `z = σ(x·Wz + h·Uz + bz)`, `r = σ(x·Wr + h·Ur + br)`,
/// `c = tanh(x·Wc + (r⊙h)·Uc + bc)`, `h' = (1−z)⊙h + z⊙c`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wc: ParamId,
    pub uc: ParamId,
    pub bc: ParamId,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_width: usize,
        hidden: usize,
    ) -> Self {
        let mut weight = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fi: usize| {
            store.register(&format!("{prefix}.{name}"), init_weight(rng, fi, hidden))
        };
        let wz = weight(store, rng, "wz", in_width);
        let uz = weight(store, rng, "uz", hidden);
        let bz = store.register(&format!("{prefix}.bz"), Tensor::zeros(1, hidden));
        let wr = weight(store, rng, "wr", in_width);
        let ur = weight(store, rng, "ur", hidden);
        let br = store.register(&format!("{prefix}.br"), Tensor::zeros(1, hidden));
        let wc = weight(store, rng, "wc", in_width);
        let uc = weight(store, rng, "uc", hidden);
        let bc = store.register(&format!("{prefix}.bc"), Tensor::zeros(1, hidden));
        GruCell {
            wz,
            uz,
            bz,
            wr,
            ur,
            br,
            wc,
            uc,
            bc,
        }
    }

    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: ValueId, h: ValueId) -> ValueId {
        let gate = |tape: &mut Tape, w, u, b, x, h| {
            let a = tape.matmul(x, bind.value(w));
            let c = tape.matmul(h, bind.value(u));
            let s = tape.add(a, c);
            tape.add_row(s, bind.value(b))
        };
        let z = gate(tape, self.wz, self.uz, self.bz, x, h);
        let z = tape.sigmoid(z);
        let r = gate(tape, self.wr, self.ur, self.br, x, h);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let c = gate(tape, self.wc, self.uc, self.bc, x, rh);
        let c = tape.tanh(c);
        // h' = h + z⊙(c − h)
        let delta = tape.sub(c, h);
        let gated = tape.mul(z, delta);
        tape.add(h, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set_all(store: &mut ParamStore, id: ParamId, v: f64) {
        for x in store.get_mut(id).data_mut() {
            *x = v;
        }
    }

    #[test]
    fn mlp2_zero_params_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp2::new(
            &mut store,
            &mut rng,
            "m",
            3,
            4,
            2,
            Activation::Selu,
            OutputHead::Linear,
        );
        set_all(&mut store, mlp.w1, 0.0);
        set_all(&mut store, mlp.w2, 0.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::row_vector(&[1.0, -2.0, 0.5]));
        let y = mlp.apply(&mut tape, &bind, x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn mlp2_identity_passthrough_on_positive_inputs() {
        // Identity weight matrices with leaky-relu hidden and linear head pass
        // positive inputs straight through.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp2::new(
            &mut store,
            &mut rng,
            "m",
            2,
            2,
            2,
            Activation::LeakyRelu,
            OutputHead::Linear,
        );
        for id in [mlp.w1, mlp.w2] {
            let w = store.get_mut(id);
            for r in 0..2 {
                for c in 0..2 {
                    w.set(r, c, if r == c { 1.0 } else { 0.0 });
                }
            }
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::row_vector(&[0.3, 1.7]));
        let y = mlp.apply(&mut tape, &bind, x);
        assert_eq!(tape.value(y).data(), &[0.3, 1.7]);
    }

    #[test]
    fn gru_gate_closed_keeps_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, &mut rng, "g", 2, 3);
        // Force z = sigmoid(-1000) = 0 exactly.
        set_all(&mut store, gru.wz, 0.0);
        set_all(&mut store, gru.uz, 0.0);
        set_all(&mut store, gru.bz, -1000.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::row_vector(&[0.5, -0.5]));
        let h = tape.leaf(Tensor::row_vector(&[0.1, 0.2, -0.3]));
        let h2 = gru.apply(&mut tape, &bind, x, h);
        assert_eq!(tape.value(h2).data(), &[0.1, 0.2, -0.3]);
    }

    #[test]
    fn gru_gate_open_takes_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let gru = GruCell::new(&mut store, &mut rng, "g", 2, 2);
        // z = 1 exactly, candidate = tanh(x·Wc + (r⊙h)·Uc).
        set_all(&mut store, gru.bz, 1000.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let h = tape.leaf(Tensor::row_vector(&[-0.4, 0.9]));
        let h2 = gru.apply(&mut tape, &bind, x, h);
        // Recompute the candidate by hand from the stored weights.
        let mut tape2 = Tape::new();
        let bind2 = store.bind(&mut tape2);
        let x2 = tape2.leaf(Tensor::row_vector(&[1.0, 2.0]));
        let h0 = tape2.leaf(Tensor::row_vector(&[-0.4, 0.9]));
        let a = tape2.matmul(x2, bind2.value(gru.wr));
        let b = tape2.matmul(h0, bind2.value(gru.ur));
        let r = tape2.add(a, b);
        let r = tape2.add_row(r, bind2.value(gru.br));
        let r = tape2.sigmoid(r);
        let rh = tape2.mul(r, h0);
        let a = tape2.matmul(x2, bind2.value(gru.wc));
        let b = tape2.matmul(rh, bind2.value(gru.uc));
        let c = tape2.add(a, b);
        let c = tape2.add_row(c, bind2.value(gru.bc));
        let c = tape2.tanh(c);
        assert_eq!(tape.value(h2).data(), tape2.value(c).data());
    }

    #[test]
    fn binding_orders_grads_by_registration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.register("a", init_weight(&mut rng, 2, 2));
        let _unused = store.register("b", init_weight(&mut rng, 2, 2));
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::row_vector(&[1.0, 1.0]));
        let y = tape.matmul(x, bind.value(a));
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        let collected = bind.collect_grads(&store, &grads);
        assert_eq!(collected.len(), 2);
        assert!(collected[0].data().iter().any(|&g| g != 0.0));
        assert!(collected[1].data().iter().all(|&g| g == 0.0));
    }
}

//! Named parameter collections shared by the LM, the projectors and LoRA.

use sha2::{Digest, Sha256};

use crate::tensor::{Real, Tape, Tensor, Var};

/// Anything that owns an ordered list of named tensors.
///
/// The order returned by `tensors` and `tensors_mut` must agree; binding,
/// gradient pulls, optimizers and checkpoints all rely on it.
pub trait ParamSet<T: Real> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)>;

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor on `tape` as a leaf, in order.
    fn bind_all(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors().into_iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    fn pull_grads(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for ((_, t), &v) in self.tensors_mut().into_iter().zip(vars) {
            tape.pull_grad(v, t);
        }
    }

    fn zero_grads(&mut self) {
        self.tensors_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }

    fn set_all_trainable(&mut self, trainable: bool) {
        self.tensors_mut()
            .into_iter()
            .for_each(|(_, t)| t.set_requires_grad(trainable));
    }

    fn any_trainable(&self) -> bool {
        self.tensors().iter().any(|(_, t)| t.requires_grad())
    }

    /// SHA-256 over names, shapes and element bits (hex).
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            hash_tensor(&mut h, &name, t);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hash_tensor<T: Real>(h: &mut Sha256, name: &str, t: &Tensor<T>) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((t.shape().len() as u64).to_le_bytes());
    for &s in t.shape() {
        h.update((s as u64).to_le_bytes());
    }
    for x in t.data() {
        h.update(x.as_f64().to_bits().to_le_bytes());
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

//! Key-value memory over the support set.
//!
//! Keys are unit vectors in the `D_m`-dimensional key space; values are
//! episode-local class labels. Writing either merges a projected support
//! feature into its nearest same-label slot or allocates a new slot, and
//! reading returns the softmax-attention-weighted sum of the keys.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct MemorySlot {
    pub key: Var,
    pub value: usize,
}

/// Which branch of the write rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    /// A new slot was appended at this index.
    Allocated(usize),
    /// The nearest slot had the same label and absorbed the key.
    Merged(usize),
    /// The nearest slot had another label but no slot was free, so it
    /// absorbed the key anyway and kept its label.
    CapacityMerged(usize),
}

impl WriteOutcome {
    pub fn slot(self) -> usize {
        match self {
            WriteOutcome::Allocated(i) | WriteOutcome::Merged(i) | WriteOutcome::CapacityMerged(i) => i,
        }
    }
}

/// Slots live on a tape so that gradients reach the stored keys.
#[derive(Debug, Clone)]
pub struct Memory {
    slots: Vec<MemorySlot>,
    capacity: usize,
    key_dim: usize,
}

impl Memory {
    pub fn new(capacity: usize, key_dim: usize) -> Self {
        assert!(capacity > 0 && key_dim > 0, "memory needs positive capacity and key size");
        Self { slots: Vec::with_capacity(capacity), capacity, key_dim }
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn keys(&self) -> Vec<Var> {
        self.slots.iter().map(|s| s.key).collect()
    }

    /// Index of the slot whose key has the largest dot product with `probe`
    /// (lowest index on ties). Treated as a constant by differentiation.
    pub fn nearest<T: Scalar>(&self, tape: &Tape<T>, probe: &[T]) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (i, s) in self.slots.iter().enumerate() {
            let d: T = tape.data(s.key).iter().zip(probe).map(|(&a, &b)| a * b).sum();
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Writes projected key `zk` with label `label`.
    pub fn write<T: Scalar>(&mut self, tape: &mut Tape<T>, zk: Var, label: usize) -> Result<WriteOutcome> {
        if tape.shape(zk) != [self.key_dim] {
            return Err(Error::shape(
                "memory.write",
                format!("key {:?}, memory keys are [{}]", tape.shape(zk), self.key_dim),
            ));
        }
        let unit = tape.l2_normalize(zk)?;
        let nearest = self.nearest(tape, tape.data(unit));
        let outcome = match nearest {
            None => WriteOutcome::Allocated(0),
            Some(i) if self.slots[i].value == label => WriteOutcome::Merged(i),
            Some(_) if self.slots.len() < self.capacity => WriteOutcome::Allocated(self.slots.len()),
            Some(i) => WriteOutcome::CapacityMerged(i),
        };
        match outcome {
            WriteOutcome::Allocated(_) => self.slots.push(MemorySlot { key: unit, value: label }),
            WriteOutcome::Merged(i) | WriteOutcome::CapacityMerged(i) => {
                let sum = tape.add(self.slots[i].key, unit)?;
                self.slots[i].key = tape.l2_normalize(sum)?;
            }
        }
        Ok(outcome)
    }

    /// Softmax attention of `zk` over the occupied slots.
    pub fn attention<T: Scalar>(&self, tape: &mut Tape<T>, zk: Var) -> Result<Var> {
        if self.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let keys = tape.stack(&self.keys())?;
        let scores = tape.matvec(keys, zk)?;
        tape.softmax(scores)
    }

    /// Aggregated memory vector `c = Σᵢ aᵢ kᵢ`.
    pub fn read<T: Scalar>(&self, tape: &mut Tape<T>, zk: Var) -> Result<Var> {
        if self.is_empty() {
            return Err(Error::EmptyMemory);
        }
        if tape.shape(zk) != [self.key_dim] {
            return Err(Error::shape(
                "memory.read",
                format!("query {:?}, memory keys are [{}]", tape.shape(zk), self.key_dim),
            ));
        }
        let a = self.attention(tape, zk)?;
        let keys = tape.stack(&self.keys())?;
        let keys_t = tape.transpose(keys)?;
        tape.matvec(keys_t, a)
    }
}

/// `T_z: [D_m, D_z]` into key space and `T_c: [D_z, D_m]` back out.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryProjections<T> {
    pub t_z: Tensor<T>,
    pub t_c: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionVars {
    pub t_z: Var,
    pub t_c: Var,
}

impl<T: Scalar> MemoryProjections<T> {
    pub fn init<R: Rng + ?Sized>(embed_dim: usize, key_dim: usize, rng: &mut R) -> Self {
        Self {
            t_z: Tensor::uniform(&[key_dim, embed_dim], 1.0 / (embed_dim as f64).sqrt(), rng),
            t_c: Tensor::uniform(&[embed_dim, key_dim], 1.0 / (key_dim as f64).sqrt(), rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, flat: &mut Vec<Var>) -> ProjectionVars {
        let v = ProjectionVars { t_z: tape.param(self.t_z.clone()), t_c: tape.param(self.t_c.clone()) };
        flat.extend([v.t_z, v.t_c]);
        v
    }

    pub fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push(("memory.t_z".into(), &self.t_z));
        out.push(("memory.t_c".into(), &self.t_c));
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.extend([&mut self.t_z, &mut self.t_c]);
    }
}

/// `zᵏ = T_z z`; no normalization here.
pub fn project_key<T: Scalar>(tape: &mut Tape<T>, z: Var, t_z: Var) -> Result<Var> {
    tape.matvec(t_z, z)
}

/// Folds the write rule over the support features in `order`.
///
/// `features[n]` is the raw feature `z_n` of support item `n`, labelled
/// `labels[n]`.
pub fn encode_support<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[Var],
    labels: &[usize],
    order: &[usize],
    t_z: Var,
    capacity: usize,
) -> Result<Memory> {
    if features.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if features.len() != labels.len() || order.len() != features.len() {
        return Err(Error::shape(
            "encode_support",
            format!("{} features, {} labels, {} order entries", features.len(), labels.len(), order.len()),
        ));
    }
    let key_dim = tape.shape(t_z)[0];
    let mut memory = Memory::new(capacity, key_dim);
    for &n in order {
        let zk = project_key(tape, features[n], t_z)?;
        memory.write(tape, zk, labels[n])?;
    }
    Ok(memory)
}

/// Contextual support embedding `g = T_c · read(T_z z) + z`.
pub fn contextual_embed_support<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    memory: &Memory,
    proj: &ProjectionVars,
) -> Result<Var> {
    let zk = project_key(tape, z, proj.t_z)?;
    let c = memory.read(tape, zk)?;
    let mapped = tape.matvec(proj.t_c, c)?;
    tape.add(mapped, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec_var(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn first_write_allocates() {
        let mut tape = Tape::new();
        let mut m = Memory::new(3, 2);
        let e1 = vec_var(&mut tape, &[1.0, 0.0]);
        assert_eq!(m.write(&mut tape, e1, 0).unwrap(), WriteOutcome::Allocated(0));
        assert_eq!(m.len(), 1);
        assert_eq!(tape.data(m.slots()[0].key), &[1.0, 0.0]);
        assert_eq!(m.slots()[0].value, 0);
    }

    #[test]
    fn same_label_merges_and_renormalizes() {
        let mut tape = Tape::new();
        let mut m = Memory::new(3, 2);
        let e1 = vec_var(&mut tape, &[1.0, 0.0]);
        let e2 = vec_var(&mut tape, &[0.0, 1.0]);
        m.write(&mut tape, e1, 0).unwrap();
        assert_eq!(m.write(&mut tape, e2, 0).unwrap(), WriteOutcome::Merged(0));
        assert_eq!(m.len(), 1);
        let k = tape.data(m.slots()[0].key);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(k[0], h, epsilon = 1e-12);
        assert_abs_diff_eq!(k[1], h, epsilon = 1e-12);
    }

    #[test]
    fn other_label_allocates_while_space_remains() {
        let mut tape = Tape::new();
        let mut m = Memory::new(2, 2);
        let e1 = vec_var(&mut tape, &[1.0, 0.0]);
        let e2 = vec_var(&mut tape, &[0.0, 1.0]);
        m.write(&mut tape, e1, 0).unwrap();
        assert_eq!(m.write(&mut tape, e2, 1).unwrap(), WriteOutcome::Allocated(1));
        assert_eq!(tape.data(m.slots()[1].key), &[0.0, 1.0]);
        assert_eq!(m.slots()[1].value, 1);
    }

    #[test]
    fn full_memory_falls_back_to_merge() {
        let mut tape = Tape::new();
        let mut m = Memory::new(1, 2);
        let e1 = vec_var(&mut tape, &[1.0, 0.0]);
        let e2 = vec_var(&mut tape, &[0.2, 1.0]);
        m.write(&mut tape, e1, 0).unwrap();
        assert_eq!(m.write(&mut tape, e2, 1).unwrap(), WriteOutcome::CapacityMerged(0));
        assert_eq!(m.len(), 1);
        assert_eq!(m.slots()[0].value, 0);
    }

    #[test]
    fn zero_key_is_degenerate() {
        let mut tape = Tape::new();
        let mut m = Memory::new(1, 2);
        let z = vec_var(&mut tape, &[0.0, 0.0]);
        assert!(matches!(m.write(&mut tape, z, 0), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn nearest_ties_prefer_lowest_index() {
        let mut tape = Tape::new();
        let mut m = Memory::new(3, 2);
        let a = vec_var(&mut tape, &[1.0, 1.0]);
        let b = vec_var(&mut tape, &[1.0, -1.0]);
        m.write(&mut tape, a, 0).unwrap();
        m.write(&mut tape, b, 1).unwrap();
        assert_eq!(m.nearest(&tape, &[1.0, 0.0]), Some(0));
    }

    #[test]
    fn single_slot_read_returns_the_key() {
        let mut tape = Tape::new();
        let mut m = Memory::new(2, 3);
        let k = vec_var(&mut tape, &[3.0, 0.0, 4.0]);
        m.write(&mut tape, k, 0).unwrap();
        let q = vec_var(&mut tape, &[-7.0, 2.0, 0.5]);
        let c = m.read(&mut tape, q).unwrap();
        let c = tape.data(c);
        assert_abs_diff_eq!(c[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[2], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn orthonormal_read() {
        let mut tape = Tape::new();
        let mut m = Memory::new(2, 2);
        let e1 = vec_var(&mut tape, &[1.0, 0.0]);
        let e2 = vec_var(&mut tape, &[0.0, 1.0]);
        m.write(&mut tape, e1, 0).unwrap();
        m.write(&mut tape, e2, 1).unwrap();
        let c = m.read(&mut tape, e1).unwrap();
        assert_abs_diff_eq!(tape.data(c)[0], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(tape.data(c)[1], 0.26894, epsilon = 1e-5);
    }

    #[test]
    fn empty_memory_read_fails() {
        let mut tape = Tape::<f64>::new();
        let m = Memory::new(2, 2);
        let q = vec_var(&mut tape, &[1.0, 0.0]);
        assert!(matches!(m.read(&mut tape, q), Err(Error::EmptyMemory)));
    }

    #[test]
    fn projection_edge_cases() {
        let mut tape = Tape::new();
        let z = vec_var(&mut tape, &[1.5, -2.0, 0.25]);
        let zero = tape.constant(Tensor::zeros(&[4, 3]));
        let p = project_key(&mut tape, z, zero).unwrap();
        assert!(tape.data(p).iter().all(|&v| v == 0.0));
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let p = project_key(&mut tape, z, eye).unwrap();
        assert_eq!(tape.data(p), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn zero_output_projection_makes_support_embedding_identity() {
        let mut tape = Tape::new();
        let z = vec_var(&mut tape, &[0.3, -1.1, 2.0]);
        let t_z = tape.constant(Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.9).sin()));
        let t_c = tape.constant(Tensor::zeros(&[3, 2]));
        let mem = encode_support(&mut tape, &[z], &[0], &[0], t_z, 1).unwrap();
        assert_eq!(mem.len(), 1);
        let g = contextual_embed_support(&mut tape, z, &mem, &ProjectionVars { t_z, t_c }).unwrap();
        assert_eq!(tape.data(g), &[0.3, -1.1, 2.0]);
    }
}

//! Contextual learner: a bidirectional LSTM over memory keys whose summed
//! final hidden states are mapped to the query network's predicted vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::memory::Memory;
use crate::numcore::{LstmVars, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    /// Uniform `±1/√hidden` weights, zero bias except the forget gate at 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(&[4 * hidden, input], bound, rng),
            w_hh: Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            bias: Tensor::from_fn(
                &[4 * hidden],
                |i| if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() },
            ),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    fn bind(&self, tape: &mut Tape<T>, flat: &mut Vec<Var>) -> LstmVars {
        let v = LstmVars {
            w_ih: tape.param(self.w_ih.clone()),
            w_hh: tape.param(self.w_hh.clone()),
            bias: tape.param(self.bias.clone()),
        };
        flat.extend([v.w_ih, v.w_hh, v.bias]);
        v
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (n, t) in [("w_ih", &self.w_ih), ("w_hh", &self.w_hh), ("bias", &self.bias)] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.extend([&mut self.w_ih, &mut self.w_hh, &mut self.bias]);
    }
}

/// Forward and backward LSTMs plus the output map `T_p: [D_w, D_r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerParams<T> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
    pub t_p: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LearnerVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
    pub t_p: Var,
}

impl<T: Scalar> LearnerParams<T> {
    /// `T_p` starts at zero so the first predicted vector is zero.
    pub fn init<R: Rng + ?Sized>(key_dim: usize, hidden: usize, predicted: usize, rng: &mut R) -> Self {
        Self {
            forward: LstmParams::init(key_dim, hidden, rng),
            backward: LstmParams::init(key_dim, hidden, rng),
            t_p: Tensor::zeros(&[predicted, hidden]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, flat: &mut Vec<Var>) -> LearnerVars {
        let forward = self.forward.bind(tape, flat);
        let backward = self.backward.bind(tape, flat);
        let t_p = tape.param(self.t_p.clone());
        flat.push(t_p);
        LearnerVars { forward, backward, t_p }
    }

    pub fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.forward.named("learner.forward", out);
        self.backward.named("learner.backward", out);
        out.push(("learner.t_p".into(), &self.t_p));
    }

    pub fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        self.forward.tensors_mut(out);
        self.backward.tensors_mut(out);
        out.push(&mut self.t_p);
    }
}

fn run_lstm<T: Scalar>(tape: &mut Tape<T>, keys: impl Iterator<Item = Var>, cell: &LstmVars) -> Result<Var> {
    let hidden = tape.shape(cell.w_hh)[1];
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    for k in keys {
        (h, c) = tape.lstm_cell(k, h, c, cell)?;
    }
    Ok(h)
}

/// `h↔`: final forward hidden state (slots in allocation order) plus final
/// backward hidden state (reverse order).
pub fn encode_memory<T: Scalar>(tape: &mut Tape<T>, memory: &Memory, lv: &LearnerVars) -> Result<Var> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let keys = memory.keys();
    let fwd = run_lstm(tape, keys.iter().copied(), &lv.forward)?;
    let bwd = run_lstm(tape, keys.iter().rev().copied(), &lv.backward)?;
    tape.add(fwd, bwd)
}

/// Predicted vector `W = T_p h↔` of length `D_w`.
pub fn predict_params<T: Scalar>(tape: &mut Tape<T>, memory: &Memory, lv: &LearnerVars) -> Result<Var> {
    let h = encode_memory(tape, memory, lv)?;
    tape.matvec(lv.t_p, h)
}

use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Tape handles of one LSTM cell's weights.
///
/// Gate rows are stacked as `[input; forget; candidate; output]`, each
/// `hidden` rows tall: `w_ih` is `[4·hidden, input]`, `w_hh` is
/// `[4·hidden, hidden]`, `bias` is `[4·hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl<T: Scalar> Tape<T> {
    /// One step of a standard LSTM cell; returns `(h', c')`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var)> {
        let hidden = self.shape(h)[0];
        let gate_rows = self.shape(w.w_ih)[0];
        if gate_rows != 4 * hidden
            || self.shape(w.w_hh) != [4 * hidden, hidden]
            || self.shape(w.bias) != [4 * hidden]
            || self.shape(c) != [hidden]
        {
            return Err(Error::shape(
                "lstm_cell",
                format!(
                    "hidden {hidden}: w_ih {:?}, w_hh {:?}, bias {:?}, c {:?}",
                    self.shape(w.w_ih),
                    self.shape(w.w_hh),
                    self.shape(w.bias),
                    self.shape(c)
                ),
            ));
        }
        let from_x = self.matvec(w.w_ih, x)?;
        let from_h = self.matvec(w.w_hh, h)?;
        let pre = self.add(from_x, from_h)?;
        let pre = self.add(pre, w.bias)?;

        let i = self.slice(pre, 0, hidden)?;
        let i = self.sigmoid(i)?;
        let f = self.slice(pre, hidden, hidden)?;
        let f = self.sigmoid(f)?;
        let g = self.slice(pre, 2 * hidden, hidden)?;
        let g = self.tanh(g)?;
        let o = self.slice(pre, 3 * hidden, hidden)?;
        let o = self.sigmoid(o)?;

        let keep = self.mul(f, c)?;
        let write = self.mul(i, g)?;
        let c_next = self.add(keep, write)?;
        let squashed = self.tanh(c_next)?;
        let h_next = self.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

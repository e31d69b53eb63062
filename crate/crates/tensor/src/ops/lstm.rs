use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::scalar::Scalar;

/// Hidden and cell state of an LSTM.
#[derive(Clone, Copy)]
pub struct LstmState<'g, T: Scalar> {
    pub h: Var<'g, T>,
    pub c: Var<'g, T>,
}

impl<'g, T: Scalar> Var<'g, T> {
    /// One LSTM step. `self` is the input `[B, I]`; `weight` is
    /// `[I + H, 4H]` with gate blocks ordered input, forget, cell, output;
    /// `bias` is `[4H]`.
    pub fn lstm_cell(
        self,
        state: LstmState<'g, T>,
        weight: Var<'g, T>,
        bias: Var<'g, T>,
    ) -> Result<LstmState<'g, T>> {
        let hs = state.h.shape();
        if hs.len() != 2 || weight.shape().get(1) != Some(&(4 * hs[1])) {
            return shape_err("lstm_cell", format!("[_, 4*{}]", hs.get(1).unwrap_or(&0)), weight.shape());
        }
        let hidden = hs[1];
        let gates = Var::concat(&[self, state.h], 1)?.matmul(weight)?.add_row(bias)?;
        let i = gates.slice(1, 0, hidden)?.sigmoid();
        let f = gates.slice(1, hidden, hidden)?.sigmoid();
        let g = gates.slice(1, 2 * hidden, hidden)?.tanh();
        let o = gates.slice(1, 3 * hidden, hidden)?.sigmoid();
        let c = f.mul(state.c)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok(LstmState { h, c })
    }
}

//! Parameterised building blocks composed from tape primitives.

use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// `x·W + b` with `W: d_in×d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: store.uniform(format!("{name}.weight"), &[d_in, d_out], bound),
            bias: store.uniform(format!("{name}.bias"), &[d_out], bound),
            d_in,
            d_out,
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, x: Var) -> Result<Var> {
        tape.affine(x, p[self.weight], p[self.bias])
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), d_in, d_hidden),
            out: Linear::new(store, &format!("{name}.1"), d_hidden, d_out),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }
}

/// Gated recurrent unit.
///
/// Weights are packed with gate blocks in `[update | reset | candidate]`
/// column order: `input: d_in×3h`, `hidden: h×3h`, `bias: 3h`.
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// ĥ  = tanh(x·W_h + (r⊙h)·U_h + b_h)
/// h' = (1 − z)⊙h + z⊙ĥ
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub input: ParamId,
    pub hidden: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_hidden: usize,
}

struct GruStep {
    u_zr: Var,
    u_h: Var,
}

impl Gru {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d_in: usize, d_hidden: usize) -> Self {
        let bound = 1.0 / (d_hidden as f64).sqrt();
        Gru {
            input: store.uniform(format!("{name}.input"), &[d_in, 3 * d_hidden], bound),
            hidden: store.uniform(format!("{name}.hidden"), &[d_hidden, 3 * d_hidden], bound),
            bias: store.uniform(format!("{name}.bias"), &[3 * d_hidden], bound),
            d_in,
            d_hidden,
        }
    }

    fn split_hidden<F: Real>(&self, tape: &mut Tape<F>, p: &Binding) -> Result<GruStep> {
        let h = self.d_hidden;
        Ok(GruStep {
            u_zr: tape.narrow(p[self.hidden], 1, 0, 2 * h)?,
            u_h: tape.narrow(p[self.hidden], 1, 2 * h, h)?,
        })
    }

    /// One update given the projected input row `x·W + b` (`1×3h`).
    fn step<F: Real>(&self, tape: &mut Tape<F>, u: &GruStep, xw: Var, h: Var) -> Result<Var> {
        let d = self.d_hidden;
        let x_zr = tape.narrow(xw, 1, 0, 2 * d)?;
        let x_h = tape.narrow(xw, 1, 2 * d, d)?;
        let h_zr = tape.matmul(h, u.u_zr)?;
        let pre = tape.add(x_zr, h_zr)?;
        let zr = tape.sigmoid(pre)?;
        let z = tape.narrow(zr, 1, 0, d)?;
        let r = tape.narrow(zr, 1, d, d)?;
        let rh = tape.mul(r, h)?;
        let rh_u = tape.matmul(rh, u.u_h)?;
        let pre_h = tape.add(x_h, rh_u)?;
        let cand = tape.tanh(pre_h)?;
        let delta = tape.sub(cand, h)?;
        let gated = tape.mul(z, delta)?;
        tape.add(h, gated)
    }

    /// Single cell update: `x: 1×d_in`, `h_prev: 1×h` → `1×h`.
    pub fn cell<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, x: Var, h_prev: Var) -> Result<Var> {
        let u = self.split_hidden(tape, p)?;
        let xw = tape.affine(x, p[self.input], p[self.bias])?;
        self.step(tape, &u, xw, h_prev)
    }

    /// Runs over the rows of `seq: L×d_in` from a zero state and returns every
    /// hidden state stacked as `L×h`.
    pub fn sequence<F: Real>(&self, tape: &mut Tape<F>, p: &Binding, seq: Var) -> Result<Var> {
        let len = tape.shape(seq)[0];
        let u = self.split_hidden(tape, p)?;
        let xw = tape.affine(seq, p[self.input], p[self.bias])?;
        let zero = Tensor::zeros(&[1, self.d_hidden]);
        let mut h = if tape.is_numeric() {
            tape.constant(&zero)
        } else {
            tape.symbolic_leaf(&[1, self.d_hidden], false)?
        };
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let row = tape.narrow(xw, 0, t, 1)?;
            h = self.step(tape, &u, row, h)?;
            states.push(h);
        }
        tape.concat(&states, 0)
    }
}

//! Gated recurrent unit as a tape composite.
//!
//! Update rule:
//! ```text
//! z  = sigmoid(Wz x + Uz h + bz)
//! r  = sigmoid(Wr x + Ur h + br)
//! h~ = tanh(Wh x + Uh (r . h) + bh)
//! h' = (1 - z) . h + z . h~
//! ```
//! With all-zero parameters and zero state, any input maps to the zero
//! state (z = 0.5, h~ = 0).

use alloc::format;
use alloc::string::String;
use alloc::vec;

use crate::params::{ParamInit, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::KernelError;

/// Tape handles for one GRU cell's nine parameter tensors.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// Registers GRU parameters under `<prefix>.{wz,uz,bz,...}`.
pub fn init_gru(
    init: &mut ParamInit<'_>,
    prefix: &str,
    hidden: usize,
    input: usize,
) -> Result<(), KernelError> {
    for gate in ["z", "r", "h"] {
        init.matrix(&format!("{prefix}.w{gate}"), hidden, input)?;
        init.matrix(&format!("{prefix}.u{gate}"), hidden, hidden)?;
        init.zeros(&format!("{prefix}.b{gate}"), vec![hidden])?;
    }
    Ok(())
}

/// Binds a GRU's parameters onto a tape.
pub fn bind_gru(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<GruVars, KernelError> {
    let mut get = |name: String| tape.param(store, &name);
    Ok(GruVars {
        wz: get(format!("{prefix}.wz"))?,
        uz: get(format!("{prefix}.uz"))?,
        bz: get(format!("{prefix}.bz"))?,
        wr: get(format!("{prefix}.wr"))?,
        ur: get(format!("{prefix}.ur"))?,
        br: get(format!("{prefix}.br"))?,
        wh: get(format!("{prefix}.wh"))?,
        uh: get(format!("{prefix}.uh"))?,
        bh: get(format!("{prefix}.bh"))?,
    })
}

/// One GRU update on the tape; `h` and `x` are vector nodes.
pub fn gru_step(tape: &mut Tape, g: &GruVars, h: Var, x: Var) -> Result<Var, KernelError> {
    let gate = |tape: &mut Tape, w, u, b, act| -> Result<Var, KernelError> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let s = tape.add(wx, uh)?;
        let s = tape.add(s, b)?;
        tape.activation(s, act)
    };
    let z = gate(tape, g.wz, g.uz, g.bz, Activation::Sigmoid)?;
    let r = gate(tape, g.wr, g.ur, g.br, Activation::Sigmoid)?;

    let rh = tape.mul(r, h)?;
    let wx = tape.matvec(g.wh, x)?;
    let urh = tape.matvec(g.uh, rh)?;
    let pre = tape.add(wx, urh)?;
    let pre = tape.add(pre, g.bh)?;
    let cand = tape.activation(pre, Activation::Tanh)?;

    // h' = h - z.h + z.h~
    let zh = tape.mul(z, h)?;
    let zc = tape.mul(z, cand)?;
    let keep = tape.sub(h, zh)?;
    tape.add(keep, zc)
}

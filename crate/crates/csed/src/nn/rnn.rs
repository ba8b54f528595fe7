//! GRU cells composed from tape primitives.
//!
//! Gate convention: update u = sig(Wu x + Uu h + bu), reset r likewise, and
//! candidate n = tanh(Wn x + r * (Un h) + bn), so the reset gate scales the
//! recurrent term before it enters the candidate. The new state is
//! h' = (1 - u) * n + u * h.

use std::collections::BTreeMap;

use rand::Rng;

use super::optim::ParamStore;
use super::tape::{NodeId, Tape};
use super::tensor::{Tensor, TensorError};

/// Parameter name suffixes of one GRU cell, in registration order.
pub const GRU_PARAM_SUFFIXES: [&str; 9] = [
    "w_update", "u_update", "b_update", "w_reset", "u_reset", "b_reset", "w_cand", "u_cand",
    "b_cand",
];

/// Tape nodes of one GRU cell's parameters.
#[derive(Clone, Copy)]
pub struct GruNodes {
    pub w_update: NodeId,
    pub u_update: NodeId,
    pub b_update: NodeId,
    pub w_reset: NodeId,
    pub u_reset: NodeId,
    pub b_reset: NodeId,
    pub w_cand: NodeId,
    pub u_cand: NodeId,
    pub b_cand: NodeId,
}

/// Registers the nine tensors of a GRU cell under `prefix.suffix` names.
/// Input-side tensors use fan_in = input_dim, recurrent ones fan_in = hidden.
pub fn register_gru(
    store: &mut ParamStore,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<(), TensorError> {
    if input_dim == 0 || hidden == 0 {
        return Err(TensorError::Argument(format!(
            "gru {prefix:?}: input_dim and hidden must be positive"
        )));
    }
    for gate in ["update", "reset", "cand"] {
        store.init_uniform(
            &format!("{prefix}.w_{gate}"),
            vec![hidden, input_dim],
            input_dim,
            rng,
        )?;
        store.init_uniform(
            &format!("{prefix}.u_{gate}"),
            vec![hidden, hidden],
            hidden,
            rng,
        )?;
        store.init_uniform(&format!("{prefix}.b_{gate}"), vec![hidden], input_dim, rng)?;
    }
    Ok(())
}

/// Looks up the cell's nodes among bound parameters.
pub fn bind_gru(ids: &BTreeMap<String, NodeId>, prefix: &str) -> Result<GruNodes, TensorError> {
    let pick = |suffix: &str| -> Result<NodeId, TensorError> {
        ids.get(&format!("{prefix}.{suffix}"))
            .copied()
            .ok_or_else(|| TensorError::Usage(format!("gru parameter {prefix}.{suffix} not bound")))
    };
    Ok(GruNodes {
        w_update: pick("w_update")?,
        u_update: pick("u_update")?,
        b_update: pick("b_update")?,
        w_reset: pick("w_reset")?,
        u_reset: pick("u_reset")?,
        b_reset: pick("b_reset")?,
        w_cand: pick("w_cand")?,
        u_cand: pick("u_cand")?,
        b_cand: pick("b_cand")?,
    })
}

/// One GRU update on a batch of rows: x is [n, input_dim], h is [n, hidden].
/// Rows are independent, so the same call serves single frames and whole
/// chunks of frames.
pub fn gru_step(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    p: &GruNodes,
) -> Result<NodeId, TensorError> {
    let xu = tape.linear(x, p.w_update, Some(p.b_update))?;
    let xr = tape.linear(x, p.w_reset, Some(p.b_reset))?;
    let xn = tape.linear(x, p.w_cand, Some(p.b_cand))?;
    gru_step_preprojected(tape, xu, xr, xn, h, p)
}

/// GRU update when the input-side projections (Wx + b per gate) are already
/// on the tape; sequences precompute them for all steps at once.
fn gru_step_preprojected(
    tape: &mut Tape,
    xu: NodeId,
    xr: NodeId,
    xn: NodeId,
    h: NodeId,
    p: &GruNodes,
) -> Result<NodeId, TensorError> {
    let hu = tape.linear(h, p.u_update, None)?;
    let pre_u = tape.add(xu, hu)?;
    let u = tape.sigmoid(pre_u);

    let hr = tape.linear(h, p.u_reset, None)?;
    let pre_r = tape.add(xr, hr)?;
    let r = tape.sigmoid(pre_r);

    let hn = tape.linear(h, p.u_cand, None)?;
    let gated = tape.mul(r, hn)?;
    let pre_n = tape.add(xn, gated)?;
    let n = tape.tanh(pre_n);

    let keep = tape.mul(u, h)?;
    let one_minus_u = tape.scale_offset(u, -1.0, 1.0);
    let take = tape.mul(one_minus_u, n)?;
    tape.add(take, keep)
}

/// Runs a GRU over the rows of xs ([t, input_dim]) starting from a zero
/// state. Returns one [1, hidden] node per frame, indexed by original frame
/// position regardless of direction.
pub fn gru_sequence(
    tape: &mut Tape,
    xs: NodeId,
    p: &GruNodes,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<NodeId>, TensorError> {
    let t = {
        let xt = tape.value(xs);
        if xt.rank() != 2 || xt.rows() == 0 {
            return Err(TensorError::Argument(format!(
                "gru_sequence: need a non-empty [t, d] input, got {:?}",
                xt.shape()
            )));
        }
        xt.rows()
    };
    let xu_all = tape.linear(xs, p.w_update, Some(p.b_update))?;
    let xr_all = tape.linear(xs, p.w_reset, Some(p.b_reset))?;
    let xn_all = tape.linear(xs, p.w_cand, Some(p.b_cand))?;
    let mut h = tape.constant(Tensor::zeros(vec![1, hidden]));
    let mut out: Vec<Option<NodeId>> = vec![None; t];
    let order: Vec<usize> = if reverse {
        (0..t).rev().collect()
    } else {
        (0..t).collect()
    };
    for step in order {
        let xu = tape.row(xu_all, step)?;
        let xr = tape.row(xr_all, step)?;
        let xn = tape.row(xn_all, step)?;
        h = gru_step_preprojected(tape, xu, xr, xn, h, p)?;
        out[step] = Some(h);
    }
    Ok(out.into_iter().map(|o| o.unwrap()).collect())
}

/// Bidirectional GRU: forward and backward passes over time, concatenated per
/// frame into [t, 2 * hidden] with the forward half first.
pub fn bigru(
    tape: &mut Tape,
    xs: NodeId,
    fwd: &GruNodes,
    bwd: &GruNodes,
    hidden: usize,
) -> Result<NodeId, TensorError> {
    let f = gru_sequence(tape, xs, fwd, hidden, false)?;
    let b = gru_sequence(tape, xs, bwd, hidden, true)?;
    let mut rows = Vec::with_capacity(f.len());
    for (ft, bt) in f.iter().zip(&b) {
        rows.push(tape.concat_cols(&[*ft, *bt])?);
    }
    tape.stack_rows(&rows)
}

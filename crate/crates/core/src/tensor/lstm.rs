//! LSTM recurrence built from tape primitives, so back-propagation through
//! time falls out of the graph.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LstmOutput {
    /// Hidden state at every step, `(N, L, H)`.
    Sequence,
    /// Final hidden state, `(N, H)`.
    Last,
}

/// Runs an LSTM over `x` of shape `(N, L, F)` (or unbatched `(L, F)`).
///
/// Weights use the fused gate layout `[input, forget, cell, output]`:
/// `w_input` is `(F, 4H)`, `w_recurrent` is `(H, 4H)`, `bias` is `(4H)`.
/// Initial hidden and cell states are zero. With `train` set and a positive
/// `recurrent_dropout`, one inverted-dropout mask per sequence is applied to
/// the hidden state entering the recurrent product at every step.
#[allow(clippy::too_many_arguments)]
pub fn lstm_forward(
    g: &mut Graph,
    x: Var,
    w_input: Var,
    w_recurrent: Var,
    bias: Var,
    recurrent_dropout: f64,
    train: bool,
    rng: &mut impl rand::Rng,
    output: LstmOutput,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let unbatched = xs.len() == 2;
    let (n, steps, features) = match xs[..] {
        [l, f] => (1, l, f),
        [n, l, f] => (n, l, f),
        _ => return Err(Error::Shape(format!("lstm input {xs:?}"))),
    };
    let rs = g.shape(w_recurrent).to_vec();
    if rs.len() != 2 || rs[1] != 4 * rs[0] {
        return Err(Error::Shape(format!("recurrent weights {rs:?}")));
    }
    let hidden = rs[0];
    if g.shape(w_input) != [features, 4 * hidden] || g.shape(bias) != [4 * hidden] {
        return Err(Error::Shape(format!(
            "lstm weights {:?}/{:?} for {features} features, hidden {hidden}",
            g.shape(w_input),
            g.shape(bias)
        )));
    }
    if !(0.0..1.0).contains(&recurrent_dropout) {
        return Err(Error::Config(format!(
            "recurrent dropout {recurrent_dropout} outside [0, 1)"
        )));
    }
    let x3 = g.reshape(x, &[n, steps, features])?;
    let mask = (train && recurrent_dropout > 0.0).then(|| {
        let keep = 1.0 / (1.0 - recurrent_dropout);
        Tensor::from_fn(&[n, hidden], |_| {
            if rng.gen::<f64>() < recurrent_dropout {
                0.0
            } else {
                keep
            }
        })
    });

    let mut h = g.constant(Tensor::zeros(&[n, hidden]));
    let mut c = g.constant(Tensor::zeros(&[n, hidden]));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.narrow(x3, 1, t, 1)?;
        let xt = g.reshape(xt, &[n, features])?;
        let zx = g.dense(xt, w_input, Some(bias))?;
        let h_in = match &mask {
            Some(m) => g.mul_const(h, m.clone())?,
            None => h,
        };
        let zh = g.matmul(h_in, w_recurrent)?;
        let z = g.add(zx, zh)?;
        let zi = g.narrow(z, 1, 0, hidden)?;
        let zf = g.narrow(z, 1, hidden, hidden)?;
        let zg = g.narrow(z, 1, 2 * hidden, hidden)?;
        let zo = g.narrow(z, 1, 3 * hidden, hidden)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        if output == LstmOutput::Sequence {
            outputs.push(g.reshape(h, &[n, 1, hidden])?);
        }
    }
    match output {
        LstmOutput::Last if unbatched => g.reshape(h, &[hidden]),
        LstmOutput::Last => Ok(h),
        LstmOutput::Sequence => {
            let seq = g.concat(&outputs, 1)?;
            if unbatched {
                g.reshape(seq, &[steps, hidden])
            } else {
                Ok(seq)
            }
        }
    }
}

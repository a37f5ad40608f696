use super::matrix::Matrix;
use super::params::Layout;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity. The final layer is always linear.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Tanh => crate::scalar::tanh(x),
        }
    }
}

/// Number of parameters of a dense MLP with the given layer widths.
pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Appends `{prefix}.w{i}` / `{prefix}.b{i}` segments for each layer.
pub fn push_mlp_layout(layout: &mut Layout, prefix: &str, widths: &[usize]) {
    for (i, w) in widths.windows(2).enumerate() {
        layout.push(format!("{prefix}.w{i}"), w[0], w[1]);
        layout.push(format!("{prefix}.b{i}"), 1, w[1]);
    }
}

/// Untraced forward pass. `params` holds `w0, b0, w1, b1, ...` back to back,
/// each weight stored `in x out` row-major.
pub fn mlp_forward<T: Real>(params: &[T], input: &Matrix<T>, widths: &[usize], act: Activation) -> Result<Matrix<T>> {
    if widths.len() < 2 {
        return Err(Error::Dimension("an MLP needs at least input and output widths".into()));
    }
    if input.cols() != widths[0] {
        return Err(Error::Dimension(format!("input has {} columns, widths[0] = {}", input.cols(), widths[0])));
    }
    let need = mlp_param_count(widths);
    if params.len() != need {
        return Err(Error::Dimension(format!("params segment has {} values, widths need {need}", params.len())));
    }
    let mut h = input.clone();
    let mut off = 0;
    let last = widths.len() - 2;
    for (i, w) in widths.windows(2).enumerate() {
        let weight = Matrix::from_vec(w[0], w[1], params[off..off + w[0] * w[1]].to_vec())?;
        off += w[0] * w[1];
        let bias = &params[off..off + w[1]];
        off += w[1];
        h = h.matmul(&weight)?;
        h.add_row_inplace(bias);
        if i < last {
            h.as_mut_slice().iter_mut().for_each(|x| *x = act.apply(*x));
        }
    }
    Ok(h)
}

/// Traced forward pass over `(weight, bias)` leaves already on the tape.
pub fn mlp_forward_traced<T: Real>(tape: &mut Tape<T>, layers: &[(Var, Var)], input: Var, act: Activation) -> Result<Var> {
    let mut h = input;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if i + 1 < layers.len() {
            h = match act {
                Activation::Tanh => tape.tanh(h),
            };
        }
    }
    Ok(h)
}

//! Affine and recurrent building blocks shared by the encoders.

use rand::Rng;

use crate::autodiff::{Axis, Binder, ParamId, ParamSet, Tensor, Var};
use crate::error::Result;

/// `y = x W + b` with `W: in x out` and a broadcast `1 x out` bias.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = params.insert(format!("{name}.weight"), Tensor::xavier(in_dim, out_dim, rng));
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(b.get(self.weight))?.add(b.get(self.bias))
    }
}

/// One direction of a GRU layer:
///
/// ```text
/// z  = sigmoid(x W_z + h U_z + b_z)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gate = |g: &str| {
            let w = params.insert(format!("{name}.w_{g}"), Tensor::xavier(in_dim, hidden, rng));
            let u = params.insert(format!("{name}.u_{g}"), Tensor::xavier(hidden, hidden, rng));
            let b = params.insert(format!("{name}.b_{g}"), Tensor::zeros(&[1, hidden]));
            (w, u, b)
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        GruCell {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
            in_dim,
            hidden,
        }
    }

    /// Run over the rows of `x` (`m x in_dim`) in forward or reverse order,
    /// returning the hidden states in input row order (`m x hidden`).
    pub fn run<'t>(&self, b: &Binder<'t>, x: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let tape = b.tape();
        let m = x.shape()[0];
        let xz = x.matmul(b.get(self.w_z))?.add(b.get(self.b_z))?;
        let xr = x.matmul(b.get(self.w_r))?.add(b.get(self.b_r))?;
        let xh = x.matmul(b.get(self.w_h))?.add(b.get(self.b_h))?;
        let (u_z, u_r, u_h) = (b.get(self.u_z), b.get(self.u_r), b.get(self.u_h));

        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = vec![h; m];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..m).rev())
        } else {
            Box::new(0..m)
        };
        for s in order {
            let z = xz.slice_rows(s, 1)?.add(h.matmul(u_z)?)?.sigmoid();
            let r = xr.slice_rows(s, 1)?.add(h.matmul(u_r)?)?.sigmoid();
            let cand = xh.slice_rows(s, 1)?.add(r.mul(h)?.matmul(u_h)?)?.tanh();
            h = h.add(z.mul(cand.sub(h)?)?)?;
            states[s] = h;
        }
        tape.concat(&states, Axis::Rows)
    }
}

/// Stacked bidirectional GRU; each layer outputs `[forward ; backward]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(GruCell, GruCell)>,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { 2 * hidden };
                let fwd = GruCell::new(params, &format!("{name}.l{l}.fwd"), d, hidden, rng);
                let bwd = GruCell::new(params, &format!("{name}.l{l}.bwd"), d, hidden, rng);
                (fwd, bwd)
            })
            .collect();
        BiGru { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.hidden
    }

    pub fn forward_layer<'t>(&self, b: &Binder<'t>, layer: usize, x: Var<'t>) -> Result<Var<'t>> {
        let (fwd, bwd) = &self.layers[layer];
        let f = fwd.run(b, x, false)?;
        let r = bwd.run(b, x, true)?;
        b.tape().concat(&[f, r], Axis::Cols)
    }

    /// All layers, applying `between` to the output of every layer but the last.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t>,
        x: Var<'t>,
        mut between: impl FnMut(Var<'t>) -> Result<Var<'t>>,
    ) -> Result<Var<'t>> {
        let mut h = x;
        for l in 0..self.layers.len() {
            h = self.forward_layer(b, l, h)?;
            if l + 1 < self.layers.len() {
                h = between(h)?;
            }
        }
        Ok(h)
    }
}

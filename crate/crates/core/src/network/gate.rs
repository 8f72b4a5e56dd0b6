use serde::{Deserialize, Serialize};

use super::layers::{pointwise_backward, pointwise_forward, upsample_backward, upsample_forward};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How many attention coefficient channels a gate produces before they are
/// broadcast over the skip features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateChannels {
    /// One coefficient per foreground class, averaged.
    PerClass,
    Single,
}

/// Borrowed gate weights: `W_x: F_int x F_l`, `W_g: F_int x F_g`,
/// `psi: A x F_int`.
#[derive(Debug, Clone, Copy)]
pub struct GateView<'a> {
    pub w_x: &'a [f64],
    pub w_g: &'a [f64],
    pub b_g: &'a [f64],
    pub psi: &'a [f64],
    pub b_psi: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGateParams {
    pub f_l: usize,
    pub f_g: usize,
    pub f_int: usize,
    pub w_x: Vec<f64>,
    pub w_g: Vec<f64>,
    pub b_g: Vec<f64>,
    pub psi: Vec<f64>,
    pub b_psi: Vec<f64>,
}

impl AttentionGateParams {
    /// All-zero gate with `alpha_channels` coefficient channels.
    pub fn zeros(f_l: usize, f_g: usize, f_int: usize, alpha_channels: usize) -> Self {
        AttentionGateParams {
            f_l,
            f_g,
            f_int,
            w_x: vec![0.0; f_int * f_l],
            w_g: vec![0.0; f_int * f_g],
            b_g: vec![0.0; f_int],
            psi: vec![0.0; alpha_channels * f_int],
            b_psi: vec![0.0; alpha_channels],
        }
    }

    pub fn alpha_channels(&self) -> usize {
        self.b_psi.len()
    }

    pub fn view(&self) -> GateView<'_> {
        GateView {
            w_x: &self.w_x,
            w_g: &self.w_g,
            b_g: &self.b_g,
            psi: &self.psi,
            b_psi: &self.b_psi,
        }
    }

    fn check(&self) -> Result<()> {
        let a = self.alpha_channels();
        if a == 0
            || self.w_x.len() != self.f_int * self.f_l
            || self.w_g.len() != self.f_int * self.f_g
            || self.b_g.len() != self.f_int
            || self.psi.len() != a * self.f_int
        {
            return Err(Error::shape(
                "attention gate weights have inconsistent shapes",
            ));
        }
        Ok(())
    }
}

pub(crate) struct GateCache {
    /// Pre-activation `W_x x + up(W_g g + b_g)`.
    pub s: Tensor,
    /// Per-channel sigmoids, `A x N`.
    pub sig: Tensor,
    pub alpha: Vec<f64>,
    pub coarse_dims: [usize; 3],
}

pub(crate) struct GateGrads<'a> {
    pub w_x: &'a mut [f64],
    pub w_g: &'a mut [f64],
    pub b_g: &'a mut [f64],
    pub psi: &'a mut [f64],
    pub b_psi: &'a mut [f64],
}

#[inline]
fn sigmoid(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn gate_forward(
    x: &Tensor,
    g: &Tensor,
    p: GateView,
    f_int: usize,
) -> (Tensor, GateCache) {
    let a = p.b_psi.len();
    let mut s = pointwise_forward(x, p.w_x, None, f_int);
    let sg = pointwise_forward(g, p.w_g, Some(p.b_g), f_int);
    s.add_assign(&upsample_forward(&sg, x.dims));
    let mut r = s.clone();
    super::layers::relu_inplace(&mut r);
    let mut sig = pointwise_forward(&r, p.psi, Some(p.b_psi), a);
    for v in &mut sig.data {
        *v = sigmoid(*v);
    }
    let n = x.spatial();
    let mut alpha = vec![0.0; n];
    for c in 0..a {
        for (al, sv) in alpha.iter_mut().zip(sig.channel(c)) {
            *al += sv;
        }
    }
    if a > 1 {
        for al in &mut alpha {
            *al /= a as f64;
        }
    }
    let mut gated = x.clone();
    for c in 0..x.channels {
        for (v, al) in gated.channel_mut(c).iter_mut().zip(&alpha) {
            *v *= al;
        }
    }
    (
        gated,
        GateCache {
            s,
            sig,
            alpha,
            coarse_dims: g.dims,
        },
    )
}

/// Returns `(dx, dg)` and accumulates parameter gradients.
pub(crate) fn gate_backward(
    x: &Tensor,
    g: &Tensor,
    p: GateView,
    cache: &GateCache,
    dgated: &Tensor,
    grads: GateGrads,
) -> (Tensor, Tensor) {
    let n = x.spatial();
    let a = p.b_psi.len();
    let mut dx = dgated.clone();
    let mut dalpha = vec![0.0; n];
    for c in 0..x.channels {
        for (((d, dal), xv), al) in dx
            .channel_mut(c)
            .iter_mut()
            .zip(dalpha.iter_mut())
            .zip(x.channel(c))
            .zip(&cache.alpha)
        {
            *dal += *d * xv;
            *d *= al;
        }
    }
    let mut dq = cache.sig.clone();
    for c in 0..a {
        for (v, dal) in dq.channel_mut(c).iter_mut().zip(&dalpha) {
            *v = dal / a as f64 * *v * (1.0 - *v);
        }
    }
    let mut r = cache.s.clone();
    super::layers::relu_inplace(&mut r);
    let mut ds = pointwise_backward(&r, p.psi, &dq, grads.psi, Some(grads.b_psi), true)
        .expect("dx requested");
    super::layers::relu_backward(&r, &mut ds);
    let dx_lin = pointwise_backward(x, p.w_x, &ds, grads.w_x, None, true).expect("dx requested");
    dx.add_assign(&dx_lin);
    let dsg = upsample_backward(&ds, cache.coarse_dims);
    let dg =
        pointwise_backward(g, p.w_g, &dsg, grads.w_g, Some(grads.b_g), true).expect("dx requested");
    (dx, dg)
}

/// Additive attention gate. Returns the gated skip features and the
/// coefficient map `alpha` (one value per voxel of `x`).
pub fn attention_gate(
    x: &Tensor,
    g: &Tensor,
    params: &AttentionGateParams,
) -> Result<(Tensor, Vec<f64>)> {
    params.check()?;
    if x.channels != params.f_l || g.channels != params.f_g {
        return Err(Error::shape(format!(
            "gate expects {} skip / {} gating channels, got {} / {}",
            params.f_l, params.f_g, x.channels, g.channels
        )));
    }
    if (0..3).any(|a| g.dims[a] > x.dims[a] || g.dims[a] == 0) {
        return Err(Error::shape(format!(
            "gating map {:?} must not be finer than skip map {:?}",
            g.dims, x.dims
        )));
    }
    let (gated, cache) = gate_forward(x, g, params.view(), params.f_int);
    Ok((gated, cache.alpha))
}

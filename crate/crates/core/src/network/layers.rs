//! Layer primitives with hand-written backward passes. Everything works on
//! one sample at a time; batching is done by accumulating gradients.

use super::tensor::{gemm, MatRef, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;
const IM2COL_BUDGET: usize = 1 << 21;

fn slices_per_chunk(rows: usize, plane: usize) -> usize {
    (IM2COL_BUDGET / (rows * plane).max(1)).max(1)
}

/// Patch matrix for output slices `k0..k1` of a 3x3x3 "same" convolution:
/// row `ci * 27 + dz * 9 + dy * 3 + dx`, one column per output voxel.
fn im2col(x: &Tensor, k0: usize, k1: usize, cols: &mut [f64]) {
    let [nx, ny, nz] = x.dims;
    let plane = nx * ny;
    let ncols = plane * (k1 - k0);
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let r = ci * 27 + dz * 9 + dy * 3 + dx;
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    for k in k0..k1 {
                        let kz = k as isize + dz as isize - 1;
                        for j in 0..ny {
                            let jy = j as isize + dy as isize - 1;
                            let dst = &mut row
                                [(k - k0) * plane + j * nx..(k - k0) * plane + (j + 1) * nx];
                            if kz < 0 || kz >= nz as isize || jy < 0 || jy >= ny as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let base = kz as usize * plane + jy as usize * nx;
                            let line = &src[base..base + nx];
                            match dx {
                                0 => {
                                    dst[0] = 0.0;
                                    dst[1..].copy_from_slice(&line[..nx - 1]);
                                }
                                1 => dst.copy_from_slice(line),
                                _ => {
                                    dst[..nx - 1].copy_from_slice(&line[1..]);
                                    dst[nx - 1] = 0.0;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds patch gradients into `dx`.
fn col2im(cols: &[f64], k0: usize, k1: usize, dx_t: &mut Tensor) {
    let [nx, ny, nz] = dx_t.dims;
    let plane = nx * ny;
    let ncols = plane * (k1 - k0);
    for ci in 0..dx_t.channels {
        let dst_all = dx_t.channel_mut(ci);
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let r = ci * 27 + dz * 9 + dy * 3 + dx;
                    let row = &cols[r * ncols..(r + 1) * ncols];
                    for k in k0..k1 {
                        let kz = k as isize + dz as isize - 1;
                        if kz < 0 || kz >= nz as isize {
                            continue;
                        }
                        for j in 0..ny {
                            let jy = j as isize + dy as isize - 1;
                            if jy < 0 || jy >= ny as isize {
                                continue;
                            }
                            let src =
                                &row[(k - k0) * plane + j * nx..(k - k0) * plane + (j + 1) * nx];
                            let base = kz as usize * plane + jy as usize * nx;
                            let line = &mut dst_all[base..base + nx];
                            match dx {
                                0 => {
                                    for (d, s) in line[..nx - 1].iter_mut().zip(&src[1..]) {
                                        *d += s;
                                    }
                                }
                                1 => {
                                    for (d, s) in line.iter_mut().zip(src) {
                                        *d += s;
                                    }
                                }
                                _ => {
                                    for (d, s) in line[1..].iter_mut().zip(&src[..nx - 1]) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3x3 convolution, zero padding 1, no bias. `w` is `cout x cin x 27`.
pub(crate) fn conv3_forward(x: &Tensor, w: &[f64], cout: usize) -> Tensor {
    let kdim = x.channels * 27;
    debug_assert_eq!(w.len(), cout * kdim);
    let plane = x.dims[0] * x.dims[1];
    let n = x.spatial();
    let mut out = Tensor::zeros(cout, x.dims);
    let step = slices_per_chunk(kdim, plane);
    let mut cols = Vec::new();
    let mut k0 = 0;
    while k0 < x.dims[2] {
        let k1 = (k0 + step).min(x.dims[2]);
        let ncols = plane * (k1 - k0);
        cols.resize(kdim * ncols, 0.0);
        im2col(x, k0, k1, &mut cols);
        gemm(
            cout,
            kdim,
            ncols,
            1.0,
            MatRef::row_major(w, kdim),
            MatRef::row_major(&cols, ncols),
            0.0,
            &mut out.data[k0 * plane..],
            n,
            1,
        );
        k0 = k1;
    }
    out
}

/// Accumulates `dw` and returns `dx` when requested.
pub(crate) fn conv3_backward(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    dw: &mut [f64],
    need_dx: bool,
) -> Option<Tensor> {
    let kdim = x.channels * 27;
    let cout = dy.channels;
    let plane = x.dims[0] * x.dims[1];
    let n = x.spatial();
    let step = slices_per_chunk(kdim, plane);
    let mut dx = need_dx.then(|| Tensor::zeros(x.channels, x.dims));
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut k0 = 0;
    while k0 < x.dims[2] {
        let k1 = (k0 + step).min(x.dims[2]);
        let ncols = plane * (k1 - k0);
        cols.resize(kdim * ncols, 0.0);
        im2col(x, k0, k1, &mut cols);
        let dy_chunk = MatRef {
            data: &dy.data[k0 * plane..],
            rs: n,
            cs: 1,
        };
        // dW += dY cols^T
        gemm(
            cout,
            ncols,
            kdim,
            1.0,
            dy_chunk,
            MatRef::transposed(&cols, ncols),
            1.0,
            dw,
            kdim,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            dcols.resize(kdim * ncols, 0.0);
            gemm(
                kdim,
                cout,
                ncols,
                1.0,
                MatRef::transposed(w, kdim),
                dy_chunk,
                0.0,
                &mut dcols,
                ncols,
                1,
            );
            col2im(&dcols, k0, k1, dx);
        }
        k0 = k1;
    }
    dx
}

/// 1x1x1 convolution `y = W x + b`, `w` is `cout x cin`.
pub(crate) fn pointwise_forward(x: &Tensor, w: &[f64], b: Option<&[f64]>, cout: usize) -> Tensor {
    let n = x.spatial();
    let mut out = Tensor::zeros(cout, x.dims);
    if let Some(b) = b {
        for (c, &bc) in b.iter().enumerate() {
            out.channel_mut(c).fill(bc);
        }
    }
    gemm(
        cout,
        x.channels,
        n,
        1.0,
        MatRef::row_major(w, x.channels),
        MatRef::row_major(&x.data, n),
        if b.is_some() { 1.0 } else { 0.0 },
        &mut out.data,
        n,
        1,
    );
    out
}

pub(crate) fn pointwise_backward(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor> {
    let n = x.spatial();
    let cin = x.channels;
    let cout = dy.channels;
    gemm(
        cout,
        n,
        cin,
        1.0,
        MatRef::row_major(&dy.data, n),
        MatRef::transposed(&x.data, n),
        1.0,
        dw,
        cin,
        1,
    );
    if let Some(db) = db {
        for (c, d) in db.iter_mut().enumerate() {
            *d += dy.channel(c).iter().sum::<f64>();
        }
    }
    need_dx.then(|| {
        let mut dx = Tensor::zeros(cin, x.dims);
        gemm(
            cin,
            cout,
            n,
            1.0,
            MatRef::transposed(w, cin),
            MatRef::row_major(&dy.data, n),
            0.0,
            &mut dx.data,
            n,
            1,
        );
        dx
    })
}

pub(crate) struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Instance normalisation with affine `gamma`, `beta` per channel.
pub(crate) fn instance_norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
) -> (Tensor, NormCache) {
    let n = x.spatial() as f64;
    let mut xhat = Tensor::zeros(x.channels, x.dims);
    let mut y = Tensor::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        for (h, v) in xhat.channel_mut(c).iter_mut().zip(src) {
            *h = (v - mean) * is;
        }
        for (o, h) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
            *o = gamma[c] * h + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    dy: &Tensor,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor {
    let n = dy.spatial() as f64;
    let mut dx = Tensor::zeros(dy.channels, dy.dims);
    for c in 0..dy.channels {
        let g = dy.channel(c);
        let h = cache.xhat.channel(c);
        let (mut sum_g, mut sum_gh) = (0.0, 0.0);
        for (gv, hv) in g.iter().zip(h) {
            sum_g += gv;
            sum_gh += gv * hv;
        }
        dgamma[c] += sum_gh;
        dbeta[c] += sum_g;
        // with dxhat = gamma * dy:
        // dx = inv_std / n * (n dxhat - sum(dxhat) - xhat sum(dxhat xhat))
        let k = gamma[c] * cache.inv_std[c] / n;
        for ((d, gv), hv) in dx.channel_mut(c).iter_mut().zip(g).zip(h) {
            *d = k * (n * gv - sum_g - hv * sum_gh);
        }
    }
    dx
}

pub(crate) fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` by the positive part of a ReLU output.
pub(crate) fn relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x2x2 max pooling; dims must be even. Returns the argmax source indices.
pub(crate) fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [nx, ny, nz] = x.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let mut out = Tensor::zeros(x.channels, od);
    let mut arg = vec![0u32; out.data.len()];
    let n = x.spatial();
    let on = out.spatial();
    for c in 0..x.channels {
        for k in 0..od[2] {
            for j in 0..od[1] {
                for i in 0..od[0] {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let p = (2 * i + dx) + nx * ((2 * j + dy) + ny * (2 * k + dz));
                                let v = x.data[c * n + p];
                                if v > best {
                                    best = v;
                                    at = p;
                                }
                            }
                        }
                    }
                    let o = c * on + i + od[0] * (j + od[1] * k);
                    out.data[o] = best;
                    arg[o] = at as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(dy: &Tensor, arg: &[u32], in_dims: [usize; 3]) -> Tensor {
    let mut dx = Tensor::zeros(dy.channels, in_dims);
    let n = dx.spatial();
    let on = dy.spatial();
    for c in 0..dy.channels {
        for o in 0..on {
            dx.data[c * n + arg[c * on + o] as usize] += dy.data[c * on + o];
        }
    }
    dx
}

/// Transposed convolution, kernel 2, stride 2. `w` is `cin x cout x 8`
/// (offset `a + 2b + 4c`), plus bias per output channel.
pub(crate) fn tconv_forward(x: &Tensor, w: &[f64], b: &[f64], cout: usize) -> Tensor {
    let [nx, ny, nz] = x.dims;
    let od = [2 * nx, 2 * ny, 2 * nz];
    let n = x.spatial();
    let mut out = Tensor::zeros(cout, od);
    let on = out.spatial();
    let mut tmp = vec![0.0; cout * n];
    for o in 0..8 {
        let (a, bb, cc) = (o & 1, (o >> 1) & 1, o >> 2);
        let wo = MatRef {
            data: &w[o..],
            rs: 8,
            cs: cout * 8,
        };
        gemm(
            cout,
            x.channels,
            n,
            1.0,
            wo,
            MatRef::row_major(&x.data, n),
            0.0,
            &mut tmp,
            n,
            1,
        );
        for co in 0..cout {
            let src = &tmp[co * n..(co + 1) * n];
            let dst = &mut out.data[co * on..(co + 1) * on];
            for k in 0..nz {
                for j in 0..ny {
                    let row = &src[nx * (j + ny * k)..nx * (j + ny * k) + nx];
                    let base = a + od[0] * ((2 * j + bb) + od[1] * (2 * k + cc));
                    for (i, v) in row.iter().enumerate() {
                        dst[base + 2 * i] = v + b[co];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn tconv_backward(
    x: &Tensor,
    w: &[f64],
    dy: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
) -> Tensor {
    let [nx, ny, nz] = x.dims;
    let od = dy.dims;
    let cout = dy.channels;
    let n = x.spatial();
    let on = dy.spatial();
    for (co, d) in db.iter_mut().enumerate() {
        *d += dy.channel(co).iter().sum::<f64>();
    }
    let mut dx = Tensor::zeros(x.channels, x.dims);
    let mut tmp = vec![0.0; cout * n];
    for o in 0..8 {
        let (a, bb, cc) = (o & 1, (o >> 1) & 1, o >> 2);
        for co in 0..cout {
            let src = &dy.data[co * on..(co + 1) * on];
            let dst = &mut tmp[co * n..(co + 1) * n];
            for k in 0..nz {
                for j in 0..ny {
                    let base = a + od[0] * ((2 * j + bb) + od[1] * (2 * k + cc));
                    for i in 0..nx {
                        dst[i + nx * (j + ny * k)] = src[base + 2 * i];
                    }
                }
            }
        }
        // dW_o^T (cout x cin) += dtmp x^T, stored with strides (8, cout * 8)
        gemm(
            cout,
            n,
            x.channels,
            1.0,
            MatRef::row_major(&tmp, n),
            MatRef::transposed(&x.data, n),
            1.0,
            &mut dw[o..],
            8,
            cout * 8,
        );
        // dx += W_o dtmp
        let wo = MatRef {
            data: &w[o..],
            rs: cout * 8,
            cs: 8,
        };
        gemm(
            x.channels,
            cout,
            n,
            1.0,
            wo,
            MatRef::row_major(&tmp, n),
            1.0,
            &mut dx.data,
            n,
            1,
        );
    }
    dx
}

/// Linear interpolation weights mapping a coarse axis of length `c` onto a
/// fine axis of length `f` with aligned extents (half-voxel centres),
/// clamped at the borders.
fn axis_weights(c: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..f)
        .map(|i| {
            let u = ((i as f64 + 0.5) * c as f64 / f as f64 - 0.5).clamp(0.0, (c - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(c - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

fn resample_axis(x: &Tensor, axis: usize, f: usize, transpose: bool, c: usize) -> Tensor {
    // forward: x has length c on `axis`, result has f; transpose: reverse
    let wts = axis_weights(c, f);
    let mut od = x.dims;
    od[axis] = if transpose { c } else { f };
    let mut out = Tensor::zeros(x.channels, od);
    let [ix, iy, iz] = x.dims;
    let stride_in = [1, ix, ix * iy][axis];
    let stride_out = [1, od[0], od[0] * od[1]][axis];
    let n_in = x.spatial();
    let n_out = out.spatial();
    for ch in 0..x.channels {
        for k in 0..iz {
            for j in 0..iy {
                for i in 0..ix {
                    let pos = [i, j, k];
                    if pos[axis] != 0 {
                        continue;
                    }
                    let base_in = ch * n_in + i + ix * (j + iy * k);
                    let base_out = ch * n_out + i + od[0] * (j + od[1] * k);
                    for (t, &(i0, i1, w)) in wts.iter().enumerate() {
                        if transpose {
                            let g = x.data[base_in + t * stride_in];
                            out.data[base_out + i0 * stride_out] += (1.0 - w) * g;
                            out.data[base_out + i1 * stride_out] += w * g;
                        } else {
                            let a = x.data[base_in + i0 * stride_in];
                            let b = x.data[base_in + i1 * stride_in];
                            out.data[base_out + t * stride_out] = (1.0 - w) * a + w * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Separable trilinear resampling of a coarse map onto `fine` dims.
pub(crate) fn upsample_forward(x: &Tensor, fine: [usize; 3]) -> Tensor {
    let coarse = x.dims;
    let a = resample_axis(x, 0, fine[0], false, coarse[0]);
    let b = resample_axis(&a, 1, fine[1], false, coarse[1]);
    resample_axis(&b, 2, fine[2], false, coarse[2])
}

pub(crate) fn upsample_backward(dy: &Tensor, coarse: [usize; 3]) -> Tensor {
    let fine = dy.dims;
    let a = resample_axis(dy, 2, fine[2], true, coarse[2]);
    let b = resample_axis(&a, 1, fine[1], true, coarse[1]);
    resample_axis(&b, 0, fine[0], true, coarse[0])
}

/// Softmax over channels at each voxel.
pub(crate) fn softmax(logits: &Tensor) -> Tensor {
    let n = logits.spatial();
    let c = logits.channels;
    let mut out = Tensor::zeros(c, logits.dims);
    for p in 0..n {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(logits.data[ch * n + p]);
        }
        let mut s = 0.0;
        for ch in 0..c {
            let e = (logits.data[ch * n + p] - m).exp();
            out.data[ch * n + p] = e;
            s += e;
        }
        for ch in 0..c {
            out.data[ch * n + p] /= s;
        }
    }
    out
}

/// Gradient through softmax: `dz_c = p_c (dp_c - sum_k p_k dp_k)`.
pub(crate) fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let n = probs.spatial();
    let c = probs.channels;
    let mut dz = Tensor::zeros(c, probs.dims);
    for p in 0..n {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += probs.data[ch * n + p] * dprobs.data[ch * n + p];
        }
        for ch in 0..c {
            dz.data[ch * n + p] = probs.data[ch * n + p] * (dprobs.data[ch * n + p] - dot);
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(c: usize, dims: [usize; 3], seed: u64) -> Tensor {
        let mut r = crate::rng::stream(seed, "layers");
        let n = c * dims[0] * dims[1] * dims[2];
        Tensor::new(c, dims, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3_matches_direct_sum() {
        let x = random(2, [5, 4, 3], 1);
        let w = random(3, [2 * 27, 1, 1], 2).data;
        let y = conv3_forward(&x, &w, 3);
        for co in 0..3 {
            for k in 0..3 {
                for j in 0..4 {
                    for i in 0..5 {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for dz in 0..3 {
                                for dy in 0..3 {
                                    for dx in 0..3 {
                                        let (a, b, c) = (i + dx, j + dy, k + dz);
                                        if a == 0 || b == 0 || c == 0 || a > 5 || b > 4 || c > 3 {
                                            continue;
                                        }
                                        s += w[co * 54 + ci * 27 + dz * 9 + dy * 3 + dx]
                                            * x.at(ci, a - 1, b - 1, c - 1);
                                    }
                                }
                            }
                        }
                        assert!((y.at(co, i, j, k) - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv3_backward_is_adjoint() {
        // <conv(x), dy> = <x, conv^T(dy)> and d<conv(x), dy>/dW = dW
        let x = random(2, [4, 3, 5], 3);
        let w = random(3, [54, 1, 1], 4).data;
        let dy = random(3, [4, 3, 5], 5);
        let y = conv3_forward(&x, &w, 3);
        let mut dw = vec![0.0; w.len()];
        let dx = conv3_backward(&x, &w, &dy, &mut dw, true).unwrap();
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-10);
        let lin: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lin - dot(&y, &dy)).abs() < 1e-10);
    }

    #[test]
    fn tconv_backward_is_adjoint() {
        let x = random(3, [2, 3, 2], 6);
        let w = random(3 * 2 * 8, [1, 1, 1], 7).data;
        let b = vec![0.0; 2];
        let dy = random(2, [4, 6, 4], 8);
        let y = tconv_forward(&x, &w, &b, 2);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        let dx = tconv_backward(&x, &w, &dy, &mut dw, &mut db);
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-10);
        let lin: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lin - dot(&y, &dy)).abs() < 1e-10);
        // explicit element
        // output (3, 4, 1) is input (1, 2, 0) at offset 1 + 0 + 4
        let mut s = 0.0;
        for ci in 0..3 {
            s += w[(ci * 2) * 8 + 5] * x.at(ci, 1, 2, 0);
        }
        assert!((y.at(0, 3, 4, 1) - s).abs() < 1e-12);
    }

    #[test]
    fn upsample_backward_is_adjoint_and_preserves_constants() {
        let x = random(2, [2, 3, 2], 9);
        let dy = random(2, [4, 6, 4], 10);
        let y = upsample_forward(&x, [4, 6, 4]);
        let dx = upsample_backward(&dy, [2, 3, 2]);
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-10);
        let c = Tensor::new(1, [2, 2, 2], vec![3.5; 8]).unwrap();
        assert!(upsample_forward(&c, [4, 4, 4])
            .data
            .iter()
            .all(|&v| (v - 3.5).abs() < 1e-15));
        // equal dims is the identity
        assert_eq!(upsample_forward(&x, x.dims), x);
    }

    #[test]
    fn instance_norm_gradient_matches_finite_differences() {
        let x = random(2, [3, 2, 2], 11);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.2];
        let dy = random(2, [3, 2, 2], 12);
        let f = |x: &Tensor| dot(&instance_norm_forward(x, &gamma, &beta).0, &dy);
        let (_, cache) = instance_norm_forward(&x, &gamma, &beta);
        let mut dg = [0.0; 2];
        let mut db = [0.0; 2];
        let dx = instance_norm_backward(&cache, &gamma, &dy, &mut dg, &mut db);
        let h = 1e-6;
        for p in 0..x.data.len() {
            let mut a = x.clone();
            a.data[p] += h;
            let mut b = x.clone();
            b.data[p] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - dx.data[p]).abs() < 1e-6, "{fd} vs {}", dx.data[p]);
        }
    }

    #[test]
    fn maxpool_routes_gradient() {
        let x = random(1, [4, 4, 2], 13);
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.dims, [2, 2, 1]);
        let dy = Tensor::new(1, [2, 2, 1], vec![1.0; 4]).unwrap();
        let dx = maxpool_backward(&dy, &arg, x.dims);
        assert_eq!(dx.data.iter().sum::<f64>(), 4.0);
        for (p, &a) in arg.iter().enumerate() {
            assert_eq!(x.data[a as usize], y.data[p]);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let z = random(3, [3, 3, 3], 14);
        let p = softmax(&z);
        for v in 0..27 {
            let s: f64 = (0..3).map(|c| p.data[c * 27 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

use crate::error::{Error, Result};

/// Dense multi-channel 3D feature map: channel-major, then x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * dims[0] * dims[1] * dims[2] {
            return Err(Error::shape(format!(
                "tensor {channels}x{dims:?} needs {} values, got {}",
                channels * dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        Ok(Tensor {
            channels,
            dims,
            data,
        })
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[c * self.spatial() + i + self.dims[0] * (j + self.dims[1] * k)]
    }

    /// Channel-wise concatenation `[a, b]`.
    pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: first `ca` channels, then the rest.
    pub(crate) fn split(self, ca: usize) -> (Tensor, Tensor) {
        let n = self.spatial();
        let mut data = self.data;
        let rest = data.split_off(ca * n);
        (
            Tensor {
                channels: ca,
                dims: self.dims,
                data,
            },
            Tensor {
                channels: self.channels - ca,
                dims: self.dims,
                data: rest,
            },
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Zero padding to `dims`, `before` voxels on the low side of each axis.
    pub(crate) fn pad(&self, dims: [usize; 3], before: [usize; 3], value: f64) -> Tensor {
        let mut out = Tensor {
            channels: self.channels,
            dims,
            data: vec![value; self.channels * dims[0] * dims[1] * dims[2]],
        };
        let [nx, ny, nz] = self.dims;
        for c in 0..self.channels {
            for k in 0..nz {
                for j in 0..ny {
                    let src = c * self.spatial() + nx * (j + ny * k);
                    let dst = c * out.spatial()
                        + before[0]
                        + dims[0] * (j + before[1] + dims[1] * (k + before[2]));
                    out.data[dst..dst + nx].copy_from_slice(&self.data[src..src + nx]);
                }
            }
        }
        out
    }

    /// Extracts the `dims` window starting at `start`.
    pub(crate) fn crop(&self, dims: [usize; 3], start: [usize; 3]) -> Tensor {
        let mut out = Tensor::zeros(self.channels, dims);
        let [nx, ny, nz] = dims;
        for c in 0..self.channels {
            for k in 0..nz {
                for j in 0..ny {
                    let src = c * self.spatial()
                        + start[0]
                        + self.dims[0] * (j + start[1] + self.dims[1] * (k + start[2]));
                    let dst = c * out.spatial() + nx * (j + ny * k);
                    out.data[dst..dst + nx].copy_from_slice(&self.data[src..src + nx]);
                }
            }
        }
        out
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!(
            (rows - 1) * rs + (cols - 1) * cs < len,
            "matrix view out of bounds"
        );
    }
}

/// `C = alpha * A B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`
/// given as strided views.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef,
    b: MatRef,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    check_extent(a.data.len(), m, k, a.rs, a.cs);
    check_extent(b.data.len(), k, n, b.rs, b.cs);
    check_extent(c.len(), m, n, rsc, csc);
    // SAFETY: the extents above were checked against each slice length and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(
            2,
            3,
            4,
            1.0,
            MatRef::row_major(&a, 3),
            MatRef::row_major(&b, 4),
            2.0,
            &mut c,
            4,
            1,
        );
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 2.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[p * 4 + j];
                }
                assert_eq!(c[i * 4 + j], s);
            }
        }
        // A^T B with A stored 3x2
        let at: Vec<f64> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0];
        let mut c2 = vec![0.0; 8];
        gemm(
            2,
            3,
            4,
            1.0,
            MatRef::transposed(&at, 2),
            MatRef::row_major(&b, 4),
            0.0,
            &mut c2,
            4,
            1,
        );
        for (x, y) in c.iter().zip(&c2) {
            assert_eq!(x - 2.0, *y);
        }
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let t = Tensor::new(2, [3, 2, 1], (0..12).map(|v| v as f64).collect()).unwrap();
        let p = t.pad([4, 4, 2], [1, 1, 0], -5.0);
        assert_eq!(p.at(0, 0, 0, 0), -5.0);
        assert_eq!(p.at(1, 1, 1, 0), 6.0);
        assert_eq!(p.crop([3, 2, 1], [1, 1, 0]), t);
        let (a, b) = Tensor::concat(&t, &t).split(2);
        assert_eq!(a, t);
        assert_eq!(b, t);
    }
}

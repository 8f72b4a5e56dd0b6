use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether a Gaussian warp pushes tissue away from its centre (stretching)
/// or pulls it in (compression).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    Divergent,
    Congruent,
}

impl WarpMode {
    pub fn sign(self) -> f64 {
        match self {
            WarpMode::Divergent => 1.0,
            WarpMode::Congruent => -1.0,
        }
    }
}

/// A localized Gaussian stretch centred at `center = (i_c, j_c)` in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSpec {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
    pub mode: WarpMode,
}

impl DivergenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::invalid(format!(
                "amplitude must be >= 0, got {}",
                self.amplitude
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("centre must be finite"));
        }
        Ok(())
    }
}

/// `g(i, j) = exp(-((i - i_c)^2 + (j - j_c)^2) / (2 sigma^2))`
#[inline]
pub fn gaussian_weight(i: f64, j: f64, spec: &DivergenceSpec) -> f64 {
    let di = i - spec.center[0];
    let dj = j - spec.center[1];
    (-(di * di + dj * dj) / (2.0 * spec.sigma * spec.sigma)).exp()
}

/// Per-pixel in-plane displacement (voxels), x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField2D {
    pub dims: [usize; 2],
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField2D {
    pub fn zeros(dims: [usize; 2]) -> Self {
        let n = dims[0] * dims[1];
        DisplacementField2D {
            dims,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
        }
    }

    pub fn constant(dims: [usize; 2], d: [f64; 2]) -> Self {
        let n = dims[0] * dims[1];
        DisplacementField2D {
            dims,
            dx: vec![d[0]; n],
            dy: vec![d[1]; n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        let p = i + self.dims[0] * j;
        [self.dx[p], self.dy[p]]
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| x.hypot(*y))
            .fold(0.0, f64::max)
    }
}

/// Radial displacement `sign * amplitude * g(p) * u(p)`, with `u` the unit
/// vector from the centre to `p` (zero at the centre itself).
pub fn build_divergence_field(
    dims: [usize; 2],
    spec: &DivergenceSpec,
) -> Result<DisplacementField2D> {
    spec.validate()?;
    let mut field = DisplacementField2D::zeros(dims);
    let s = spec.mode.sign() * spec.amplitude;
    for j in 0..dims[1] {
        for i in 0..dims[0] {
            let (x, y) = (i as f64, j as f64);
            let rx = x - spec.center[0];
            let ry = y - spec.center[1];
            let r = rx.hypot(ry);
            if r == 0.0 {
                continue;
            }
            let m = s * gaussian_weight(x, y, spec);
            let p = i + dims[0] * j;
            field.dx[p] = m * rx / r;
            field.dy[p] = m * ry / r;
        }
    }
    Ok(field)
}

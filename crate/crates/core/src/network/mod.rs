//! Plain and attention-gated 3D U-Nets in double precision with manual
//! backpropagation.

mod checkpoint;
mod gate;
mod layers;
mod model;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use gate::{attention_gate, AttentionGateParams, GateChannels};
pub use model::{
    backward, build_unet, forward_with_tape, unet_forward, ForwardOptions, Gradients, ModelParams,
    Norm, ParamTensor, Tape, UNetSpec,
};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// HU window mapped onto `[0, 1]` before inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for HuWindow {
    fn default() -> Self {
        HuWindow {
            lo: -200.0,
            hi: 500.0,
        }
    }
}

/// Clamps to the window and rescales to `[0, 1]` as a one-channel tensor.
pub fn normalize_input(vol: &Volume3D, window: HuWindow) -> Result<Tensor> {
    if !(window.lo < window.hi) {
        return Err(Error::invalid(format!(
            "window lo {} must be below hi {}",
            window.lo, window.hi
        )));
    }
    let span = window.hi - window.lo;
    let data = vol
        .data()
        .iter()
        .map(|&v| (v.clamp(window.lo, window.hi) - window.lo) / span)
        .collect();
    Tensor::new(1, vol.dims(), data)
}

/// Per-voxel argmax over class channels.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let n = probs.spatial();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..probs.channels {
                if probs.data[c * n + p] > probs.data[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    #[test]
    fn window_mapping() {
        let g = Grid::unit([5, 1, 1]).unwrap();
        let v = Volume3D::new(g, vec![-200.0, 500.0, 150.0, -1000.0, 3000.0]).unwrap();
        let t = normalize_input(&v, HuWindow::default()).unwrap();
        assert_eq!(t.data, vec![0.0, 1.0, 0.5, 0.0, 1.0]);
        assert!(normalize_input(&v, HuWindow { lo: 1.0, hi: 1.0 }).is_err());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::new(3, [2, 1, 1], vec![0.2, 0.5, 0.5, 0.1, 0.3, 0.4]).unwrap();
        assert_eq!(argmax_labels(&t), vec![1, 0]);
    }
}

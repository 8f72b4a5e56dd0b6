use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::gate::{
    gate_backward, gate_forward, AttentionGateParams, GateCache, GateChannels, GateGrads, GateView,
};
use super::layers::*;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    /// Including background.
    pub num_classes: usize,
    /// Number of resolution levels; `depth - 1` poolings.
    pub depth: usize,
    /// Channels at full resolution, doubled per level.
    pub base_channels: usize,
    pub attention: bool,
    pub gate_channels: GateChannels,
    pub norm: Norm,
}

impl UNetSpec {
    pub fn new(num_classes: usize, depth: usize, base_channels: usize, attention: bool) -> Self {
        UNetSpec {
            in_channels: 1,
            num_classes,
            depth,
            base_channels,
            attention,
            gate_channels: GateChannels::PerClass,
            norm: Norm::Instance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidSpec(format!(
                "depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::InvalidSpec("channel counts must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.depth > 12 {
            return Err(Error::InvalidSpec(format!(
                "depth {} is unreasonably large",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn gate_inner(&self, level: usize) -> usize {
        (self.channels(level) / 2).max(1)
    }

    pub fn alpha_channels(&self) -> usize {
        match self.gate_channels {
            GateChannels::PerClass => self.num_classes - 1,
            GateChannels::Single => 1,
        }
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serialises");
        let digest = Sha256::digest(bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

/// Named parameter tensors in a fixed build order plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: UNetSpec,
    pub epoch: u64,
    tensors: Vec<ParamTensor>,
    layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BlockIdx {
    w: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GateIdx {
    w_x: usize,
    w_g: usize,
    b_g: usize,
    psi: usize,
    b_psi: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct DecIdx {
    up_w: usize,
    up_b: usize,
    gate: Option<GateIdx>,
    c1: BlockIdx,
    c2: BlockIdx,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: Vec<(BlockIdx, BlockIdx)>,
    dec: Vec<DecIdx>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Const(f64),
}

fn plan(spec: &UNetSpec) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let mut entries: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        entries.push((name, shape, init));
        entries.len() - 1
    };
    let block = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                 prefix: String,
                 cin: usize,
                 cout: usize| BlockIdx {
        w: push(
            format!("{prefix}.weight"),
            vec![cout, cin, 3, 3, 3],
            Init::Normal((2.0 / (cin * 27) as f64).sqrt()),
        ),
        gamma: push(format!("{prefix}.gamma"), vec![cout], Init::Const(1.0)),
        beta: push(format!("{prefix}.beta"), vec![cout], Init::Const(0.0)),
    };
    let mut enc = Vec::new();
    let mut cin = spec.in_channels;
    for l in 0..spec.depth {
        let c = spec.channels(l);
        let b1 = block(&mut push, format!("enc{l}.conv1"), cin, c);
        let b2 = block(&mut push, format!("enc{l}.conv2"), c, c);
        enc.push((b1, b2));
        cin = c;
    }
    let mut dec = Vec::new();
    for l in 0..spec.depth - 1 {
        let (c, cg) = (spec.channels(l), spec.channels(l + 1));
        let up_w = push(
            format!("dec{l}.up.weight"),
            vec![cg, c, 2, 2, 2],
            Init::Normal((2.0 / cg as f64).sqrt()),
        );
        let up_b = push(format!("dec{l}.up.bias"), vec![c], Init::Const(0.0));
        let gate = spec.attention.then(|| {
            let fi = spec.gate_inner(l);
            let a = spec.alpha_channels();
            GateIdx {
                w_x: push(
                    format!("dec{l}.gate.w_x"),
                    vec![fi, c],
                    Init::Normal((1.0 / c as f64).sqrt()),
                ),
                w_g: push(
                    format!("dec{l}.gate.w_g"),
                    vec![fi, cg],
                    Init::Normal((1.0 / cg as f64).sqrt()),
                ),
                b_g: push(format!("dec{l}.gate.b_g"), vec![fi], Init::Const(0.0)),
                psi: push(
                    format!("dec{l}.gate.psi"),
                    vec![a, fi],
                    Init::Normal((1.0 / fi as f64).sqrt()),
                ),
                b_psi: push(format!("dec{l}.gate.b_psi"), vec![a], Init::Const(0.0)),
            }
        });
        let c1 = block(&mut push, format!("dec{l}.conv1"), 2 * c, c);
        let c2 = block(&mut push, format!("dec{l}.conv2"), c, c);
        dec.push(DecIdx {
            up_w,
            up_b,
            gate,
            c1,
            c2,
        });
    }
    let c0 = spec.channels(0);
    let head_w = push(
        "head.weight".into(),
        vec![spec.num_classes, c0],
        Init::Normal((1.0 / c0 as f64).sqrt()),
    );
    let head_b = push("head.bias".into(), vec![spec.num_classes], Init::Const(0.0));
    (
        entries,
        Layout {
            enc,
            dec,
            head_w,
            head_b,
        },
    )
}

/// Builds a U-Net with deterministic initialisation from `init_seed`.
pub fn build_unet(spec: &UNetSpec, init_seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let (entries, layout) = plan(spec);
    let mut r = rng::stream(init_seed, "network/init");
    let tensors = entries
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Const(v) => vec![v; n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| d.sample(&mut r)).collect()
                }
            };
            ParamTensor { name, shape, data }
        })
        .collect();
    Ok(ModelParams {
        spec: *spec,
        epoch: 0,
        tensors,
        layout,
    })
}

impl ModelParams {
    /// Reassembles parameters from named tensors, checking them against the
    /// layout implied by `spec`.
    pub fn from_tensors(spec: UNetSpec, epoch: u64, tensors: Vec<ParamTensor>) -> Result<Self> {
        spec.validate()?;
        let (entries, layout) = plan(&spec);
        if entries.len() != tensors.len() {
            return Err(Error::shape(format!(
                "expected {} tensors, got {}",
                entries.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in entries.iter().zip(&tensors) {
            if name != &t.name
                || shape != &t.shape
                || t.data.len() != shape.iter().product::<usize>()
            {
                return Err(Error::shape(format!(
                    "tensor {} does not match layout entry {name}",
                    t.name
                )));
            }
        }
        Ok(ModelParams {
            spec,
            epoch,
            tensors,
            layout,
        })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Gate of decoder level `level`, if the model has attention.
    pub fn gate(&self, level: usize) -> Option<AttentionGateParams> {
        let gi = self.layout.dec.get(level)?.gate?;
        Some(AttentionGateParams {
            f_l: self.spec.channels(level),
            f_g: self.spec.channels(level + 1),
            f_int: self.spec.gate_inner(level),
            w_x: self.t(gi.w_x).to_vec(),
            w_g: self.t(gi.w_g).to_vec(),
            b_g: self.t(gi.b_g).to_vec(),
            psi: self.t(gi.psi).to_vec(),
            b_psi: self.t(gi.b_psi).to_vec(),
        })
    }

    /// The same network with its attention gates removed.
    pub fn without_gates(&self) -> ModelParams {
        let spec = UNetSpec {
            attention: false,
            ..self.spec
        };
        let tensors = self
            .tensors
            .iter()
            .filter(|t| !t.name.contains(".gate."))
            .cloned()
            .collect();
        ModelParams::from_tensors(spec, self.epoch, tensors).expect("gate-free layout is a subset")
    }

    /// Content hash over spec and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec.hash().as_bytes());
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    #[inline]
    fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    fn gate_view(&self, gi: &GateIdx) -> GateView<'_> {
        GateView {
            w_x: self.t(gi.w_x),
            w_g: self.t(gi.w_g),
            b_g: self.t(gi.b_g),
            psi: self.t(gi.psi),
            b_psi: self.t(gi.b_psi),
        }
    }
}

/// Gradient buffers aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(
            params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.0.iter_mut().flatten() {
            *v *= s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Bypass every attention gate (alpha = 1).
    pub force_alpha_one: bool,
    /// Pad indivisible inputs with the background value instead of failing.
    pub pad: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            force_alpha_one: false,
            pad: true,
        }
    }
}

struct BlockCache {
    input: Tensor,
    norm: NormCache,
    out: Tensor,
}

struct DecCache {
    g: Tensor,
    gate: Option<GateCache>,
    c1: BlockCache,
    c2: BlockCache,
}

/// Intermediate values recorded by a training forward pass.
pub struct Tape {
    enc: Vec<(BlockCache, BlockCache)>,
    pools: Vec<(Vec<u32>, [usize; 3])>,
    dec: Vec<Option<DecCache>>,
    head_in: Tensor,
    probs: Tensor,
    force_alpha_one: bool,
}

impl Tape {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

fn block_forward(
    p: &ModelParams,
    b: &BlockIdx,
    x: Tensor,
    cout: usize,
    keep: bool,
) -> (Tensor, Option<BlockCache>) {
    let z = conv3_forward(&x, p.t(b.w), cout);
    let (mut y, norm) = instance_norm_forward(&z, p.t(b.gamma), p.t(b.beta));
    drop(z);
    relu_inplace(&mut y);
    if keep {
        let out = y.clone();
        (
            y,
            Some(BlockCache {
                input: x,
                norm,
                out,
            }),
        )
    } else {
        (y, None)
    }
}

fn block_backward(
    p: &ModelParams,
    b: &BlockIdx,
    cache: &BlockCache,
    mut dy: Tensor,
    grads: &mut Gradients,
    need_dx: bool,
) -> Option<Tensor> {
    relu_backward(&cache.out, &mut dy);
    let dz = {
        let (gl, rest) = grads.0.split_at_mut(b.beta);
        instance_norm_backward(
            &cache.norm,
            p.t(b.gamma),
            &dy,
            &mut gl[b.gamma],
            &mut rest[0],
        )
    };
    conv3_backward(&cache.input, p.t(b.w), &dz, &mut grads.0[b.w], need_dx)
}

fn check_input(p: &ModelParams, x: &Tensor) -> Result<()> {
    if x.channels != p.spec.in_channels {
        return Err(Error::shape(format!(
            "model expects {} input channels, got {}",
            p.spec.in_channels, x.channels
        )));
    }
    if x.dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("input has an empty axis"));
    }
    Ok(())
}

fn run(
    p: &ModelParams,
    input: Tensor,
    force_alpha_one: bool,
    keep: bool,
) -> (Tensor, Option<Tape>) {
    let spec = &p.spec;
    let depth = spec.depth;
    let mut enc = Vec::new();
    let mut pools = Vec::new();
    let mut skips = Vec::new();
    let mut cur = input;
    for l in 0..depth {
        let (b1, b2) = p.layout.enc[l];
        let c = spec.channels(l);
        let (a, c1) = block_forward(p, &b1, cur, c, keep);
        let (b, c2) = block_forward(p, &b2, a, c, keep);
        if keep {
            enc.push((c1.expect("kept"), c2.expect("kept")));
        }
        if l + 1 < depth {
            let (pooled, arg) = maxpool_forward(&b);
            pools.push((arg, b.dims));
            skips.push(b);
            cur = pooled;
        } else {
            cur = b;
        }
    }
    let mut dec: Vec<Option<DecCache>> = (0..depth - 1).map(|_| None).collect();
    for l in (0..depth - 1).rev() {
        let d = &p.layout.dec[l];
        let c = spec.channels(l);
        let g = cur;
        let up = tconv_forward(&g, p.t(d.up_w), p.t(d.up_b), c);
        let skip = skips.pop().expect("one skip per level");
        let (gated, gcache) = match (&d.gate, force_alpha_one) {
            (Some(gi), false) => {
                let (gated, cache) = gate_forward(&skip, &g, p.gate_view(gi), spec.gate_inner(l));
                (gated, Some(cache))
            }
            _ => (skip, None),
        };
        let cat = Tensor::concat(&gated, &up);
        drop((gated, up));
        let (a, c1) = block_forward(p, &d.c1, cat, c, keep);
        let (b, c2) = block_forward(p, &d.c2, a, c, keep);
        if keep {
            dec[l] = Some(DecCache {
                g,
                gate: gcache,
                c1: c1.expect("kept"),
                c2: c2.expect("kept"),
            });
        }
        cur = b;
    }
    let logits = pointwise_forward(
        &cur,
        p.t(p.layout.head_w),
        Some(p.t(p.layout.head_b)),
        spec.num_classes,
    );
    let probs = softmax(&logits);
    let tape = keep.then(|| Tape {
        enc,
        pools,
        dec,
        head_in: cur,
        probs: probs.clone(),
        force_alpha_one,
    });
    (probs, tape)
}

/// Class probabilities `num_classes x X x Y x Z` for one normalised input.
pub fn unet_forward(params: &ModelParams, input: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
    check_input(params, input)?;
    let m = params.spec.divisor();
    if input.dims.iter().all(|d| d % m == 0) {
        return Ok(run(params, input.clone(), opts.force_alpha_one, false).0);
    }
    if !opts.pad {
        return Err(Error::invalid(format!(
            "input dims {:?} are not divisible by {m}",
            input.dims
        )));
    }
    let padded = input.dims.map(|d| d.div_ceil(m) * m);
    let before = [0, 1, 2].map(|a| (padded[a] - input.dims[a]) / 2);
    let x = input.pad(padded, before, 0.0);
    let probs = run(params, x, opts.force_alpha_one, false).0;
    Ok(probs.crop(input.dims, before))
}

/// Forward pass that records a [`Tape`] for [`backward`]. Dims must be
/// divisible by `2^(depth - 1)`.
pub fn forward_with_tape(
    params: &ModelParams,
    input: &Tensor,
    opts: ForwardOptions,
) -> Result<Tape> {
    check_input(params, input)?;
    let m = params.spec.divisor();
    if input.dims.iter().any(|d| d % m != 0) {
        return Err(Error::invalid(format!(
            "training input dims {:?} are not divisible by {m}",
            input.dims
        )));
    }
    Ok(run(params, input.clone(), opts.force_alpha_one, true)
        .1
        .expect("tape kept"))
}

/// Gradients of a scalar loss given `dloss/dprobs`.
pub fn backward(p: &ModelParams, tape: &Tape, dprobs: &Tensor) -> Result<Gradients> {
    if dprobs.dims != tape.probs.dims || dprobs.channels != tape.probs.channels {
        return Err(Error::shape(
            "probability gradient does not match the forward output",
        ));
    }
    let spec = &p.spec;
    let depth = spec.depth;
    let mut grads = Gradients::zeros_like(p);
    let dlogits = softmax_backward(&tape.probs, dprobs);
    let mut dcur = {
        let (lo, hi) = grads.0.split_at_mut(p.layout.head_b);
        pointwise_backward(
            &tape.head_in,
            p.t(p.layout.head_w),
            &dlogits,
            &mut lo[p.layout.head_w],
            Some(&mut hi[0]),
            true,
        )
        .expect("dx requested")
    };
    let mut dskips: Vec<Option<Tensor>> = (0..depth - 1).map(|_| None).collect();
    for l in 0..depth - 1 {
        let d = &p.layout.dec[l];
        let dc = tape.dec[l].as_ref().expect("tape has every level");
        let da = block_backward(p, &d.c2, &dc.c2, dcur, &mut grads, true).expect("dx requested");
        let dcat = block_backward(p, &d.c1, &dc.c1, da, &mut grads, true).expect("dx requested");
        let (dgated, dup) = dcat.split(spec.channels(l));
        let mut dg = {
            let (lo, hi) = grads.0.split_at_mut(d.up_b);
            tconv_backward(&dc.g, p.t(d.up_w), &dup, &mut lo[d.up_w], &mut hi[0])
        };
        let skip = &tape.enc[l].1.out;
        let dskip = match (&d.gate, &dc.gate) {
            (Some(gi), Some(gc)) if !tape.force_alpha_one => {
                let mut bufs = [gi.w_x, gi.w_g, gi.b_g, gi.psi, gi.b_psi]
                    .map(|i| std::mem::take(&mut grads.0[i]));
                let (dx, dg2) = {
                    let [w_x, w_g, b_g, psi, b_psi] = &mut bufs;
                    let gg = GateGrads {
                        w_x,
                        w_g,
                        b_g,
                        psi,
                        b_psi,
                    };
                    gate_backward(skip, &dc.g, p.gate_view(gi), gc, &dgated, gg)
                };
                for (i, b) in [gi.w_x, gi.w_g, gi.b_g, gi.psi, gi.b_psi]
                    .into_iter()
                    .zip(bufs)
                {
                    grads.0[i] = b;
                }
                dg.add_assign(&dg2);
                dx
            }
            _ => dgated,
        };
        dskips[l] = Some(dskip);
        dcur = dg;
    }
    for l in (0..depth).rev() {
        let (b1, b2) = p.layout.enc[l];
        let (c1, c2) = &tape.enc[l];
        if l + 1 < depth {
            let (arg, dims) = &tape.pools[l];
            let mut d = maxpool_backward(&dcur, arg, *dims);
            d.add_assign(dskips[l].as_ref().expect("skip gradient"));
            dcur = d;
        }
        let da = block_backward(p, &b2, c2, dcur, &mut grads, true).expect("dx requested");
        match block_backward(p, &b1, c1, da, &mut grads, l > 0) {
            Some(d) => dcur = d,
            None => break,
        }
    }
    Ok(grads)
}

//! Parametric function approximators: a small conditional U-shaped denoiser
//! (two layout-conditioning variants), a segmenter-discriminator with an
//! extra fake class, a plain segmenter and a style probe.

use crate::error::{AldmError, Result};
use crate::tape::{Arr, Tape, Var};
use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const PARAM_TREE_VERSION: &str = "1";

/// Named, nested collection of real-valued arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTree {
    pub version: String,
    arrays: IndexMap<String, ArrayD<f64>>,
}

impl ParameterTree {
    pub fn new() -> Self {
        ParameterTree { version: PARAM_TREE_VERSION.to_string(), arrays: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| AldmError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| AldmError::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// Names and shapes, in insertion order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.arrays.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (name, a) in &self.arrays {
            if !a.iter().all(|v| v.is_finite()) {
                return Err(AldmError::Numerical(format!("non-finite values in `{name}`")));
            }
        }
        Ok(())
    }

    /// A tree with the same manifest, all arrays zeroed.
    pub fn zeros_like(&self) -> ParameterTree {
        let mut t = ParameterTree::new();
        for (k, v) in &self.arrays {
            t.insert(k.clone(), ArrayD::zeros(v.raw_dim()));
        }
        t
    }
}

impl Default for ParameterTree {
    fn default() -> Self {
        Self::new()
    }
}

/// A ParameterTree lifted onto a tape as leaf variables.
pub struct TapedParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> TapedParams<'t> {
    pub fn lift(tape: &'t Tape, params: &ParameterTree) -> Self {
        let mut vars = IndexMap::new();
        for (k, v) in params.iter() {
            vars.insert(k.clone(), tape.leaf(v.clone()));
        }
        TapedParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AldmError::invalid(format!("missing parameter `{name}`")))
    }

    /// Collect gradients from a backward pass into a tree mirroring the manifest.
    pub fn gradients(&self, grads: &[Option<Arr>]) -> ParameterTree {
        let mut t = ParameterTree::new();
        for (k, v) in &self.vars {
            let g = grads[v.id]
                .clone()
                .unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()));
            t.insert(k.clone(), g);
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Concat,
    ControlBranch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub conditioning: Conditioning,
    pub num_styles: usize,
    pub num_classes: usize,
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 8 {
            return Err(AldmError::invalid("denoiser base_width must be >= 8"));
        }
        if self.depth < 2 {
            return Err(AldmError::invalid("denoiser depth must be >= 2"));
        }
        if self.in_channels != 3 {
            return Err(AldmError::invalid("denoiser expects 3 input channels"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        (self.base_width << level).min(self.base_width * 8)
    }

    fn emb_dim(&self) -> usize {
        self.base_width
    }

    fn emb_hidden(&self) -> usize {
        2 * self.base_width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub num_classes: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl DiscriminatorSpec {
    /// N real classes plus one fake class.
    pub fn out_channels(&self) -> usize {
        self.num_classes + 1
    }

    pub fn segnet(&self) -> SegNetSpec {
        SegNetSpec {
            in_channels: 3,
            out_channels: self.out_channels(),
            base_width: self.base_width,
            depth: self.depth,
        }
    }
}

/// Encoder-decoder segmentation net; used for the discriminator (N+1
/// outputs), the evaluation oracle and downstream segmenters (N outputs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
}

impl SegNetSpec {
    fn channels(&self, level: usize) -> usize {
        (self.base_width << level).min(self.base_width * 8)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleProbeSpec {
    pub num_styles: usize,
    pub base_width: usize,
}

/// Spec wrapper for checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "net", rename_all = "snake_case")]
pub enum NetSpec {
    Denoiser(DenoiserSpec),
    Discriminator(DiscriminatorSpec),
    SegNet(SegNetSpec),
    StyleProbe(StyleProbeSpec),
}

struct ParamInit {
    rng: ChaCha8Rng,
    tree: ParameterTree,
}

impl ParamInit {
    fn new(seed: u64) -> Self {
        ParamInit { rng: ChaCha8Rng::seed_from_u64(seed), tree: ParameterTree::new() }
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = Array4::from_shape_simple_fn((cout, cin, k, k), || {
            let v: f64 = StandardNormal.sample(&mut self.rng);
            v * std
        });
        self.tree.insert(format!("{name}.w"), w.into_dyn());
        self.tree.insert(format!("{name}.b"), Array1::<f64>::zeros(cout).into_dyn());
    }

    fn conv_zero(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.tree
            .insert(format!("{name}.w"), Array4::<f64>::zeros((cout, cin, k, k)).into_dyn());
        self.tree.insert(format!("{name}.b"), Array1::<f64>::zeros(cout).into_dyn());
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let std = (2.0 / din as f64).sqrt();
        let w = Array2::from_shape_simple_fn((din, dout), || {
            let v: f64 = StandardNormal.sample(&mut self.rng);
            v * std
        });
        self.tree.insert(format!("{name}.w"), w.into_dyn());
        self.tree.insert(format!("{name}.b"), Array1::<f64>::zeros(dout).into_dyn());
    }

    fn gn(&mut self, name: &str, c: usize) {
        self.tree.insert(format!("{name}.s"), Array1::<f64>::ones(c).into_dyn());
        self.tree.insert(format!("{name}.b"), Array1::<f64>::zeros(c).into_dyn());
    }

    fn table(&mut self, name: &str, rows: usize, cols: usize) {
        let w = Array2::from_shape_simple_fn((rows, cols), || {
            let v: f64 = StandardNormal.sample(&mut self.rng);
            v * 0.1
        });
        self.tree.insert(name.to_string(), w.into_dyn());
    }
}

pub fn init_denoiser(spec: &DenoiserSpec, seed: u64) -> Result<ParameterTree> {
    spec.validate()?;
    let mut p = ParamInit::new(seed);
    let e = spec.emb_dim();
    let h = spec.emb_hidden();
    p.table("style_emb", spec.num_styles, e);
    p.linear("emb.fc1", e, h);
    p.linear("emb.fc2", h, h);
    let cin = match spec.conditioning {
        Conditioning::Concat => 3 + spec.num_classes,
        Conditioning::ControlBranch => 3,
    };
    p.conv("in", spec.channels(0), cin, 3);
    for l in 0..spec.depth {
        let c = spec.channels(l);
        p.conv(&format!("enc{l}.c1"), c, c, 3);
        p.gn(&format!("enc{l}.g1"), c);
        p.linear(&format!("enc{l}.emb"), h, c);
        p.conv(&format!("enc{l}.c2"), c, c, 3);
        p.gn(&format!("enc{l}.g2"), c);
        if l + 1 < spec.depth {
            p.conv(&format!("down{l}"), spec.channels(l + 1), c, 3);
        }
    }
    let cb = spec.channels(spec.depth - 1);
    p.conv("mid.c1", cb, cb, 3);
    p.gn("mid.g1", cb);
    p.linear("mid.emb", h, cb);
    p.conv("mid.c2", cb, cb, 3);
    p.gn("mid.g2", cb);
    for l in (0..spec.depth - 1).rev() {
        let c = spec.channels(l);
        let cu = spec.channels(l + 1);
        p.conv(&format!("up{l}"), c, cu, 3);
        p.conv(&format!("dec{l}.c1"), c, 2 * c, 3);
        p.gn(&format!("dec{l}.g1"), c);
        p.linear(&format!("dec{l}.emb"), h, c);
        p.conv(&format!("dec{l}.c2"), c, c, 3);
        p.gn(&format!("dec{l}.g2"), c);
    }
    p.conv_zero("out", 3, spec.channels(0), 3);
    if spec.conditioning == Conditioning::ControlBranch {
        p.conv("ctrl.in", spec.channels(0), spec.num_classes, 3);
        for l in 0..spec.depth {
            let c = spec.channels(l);
            if l > 0 {
                p.conv(&format!("ctrl.down{}", l - 1), c, spec.channels(l - 1), 3);
            }
            p.conv(&format!("ctrl.enc{l}"), c, c, 3);
            // zero-initialized residual projection into the backbone
            p.conv_zero(&format!("ctrl.proj{l}"), c, c, 1);
        }
    }
    Ok(p.tree)
}

pub fn init_segnet(spec: &SegNetSpec, seed: u64) -> Result<ParameterTree> {
    if spec.base_width < 4 || spec.depth < 2 {
        return Err(AldmError::invalid("segnet needs base_width >= 4 and depth >= 2"));
    }
    let mut p = ParamInit::new(seed);
    p.conv("in", spec.channels(0), spec.in_channels, 3);
    for l in 0..spec.depth {
        let c = spec.channels(l);
        p.conv(&format!("enc{l}.c1"), c, c, 3);
        p.gn(&format!("enc{l}.g1"), c);
        if l + 1 < spec.depth {
            p.conv(&format!("down{l}"), spec.channels(l + 1), c, 3);
        }
    }
    let cb = spec.channels(spec.depth - 1);
    p.conv("mid.c1", cb, cb, 3);
    p.gn("mid.g1", cb);
    for l in (0..spec.depth - 1).rev() {
        let c = spec.channels(l);
        p.conv(&format!("up{l}"), c, spec.channels(l + 1), 3);
        p.conv(&format!("dec{l}.c1"), c, 2 * c, 3);
        p.gn(&format!("dec{l}.g1"), c);
    }
    p.conv("out", spec.out_channels, spec.channels(0), 1);
    Ok(p.tree)
}

pub fn init_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<ParameterTree> {
    init_segnet(&spec.segnet(), seed)
}

pub fn init_style_probe(spec: &StyleProbeSpec, seed: u64) -> Result<ParameterTree> {
    let mut p = ParamInit::new(seed);
    let w = spec.base_width;
    p.conv("c1", w, 3, 3);
    p.conv("c2", 2 * w, w, 3);
    p.linear("fc", 2 * w, spec.num_styles);
    Ok(p.tree)
}

pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ParameterTree> {
    match spec {
        NetSpec::Denoiser(s) => init_denoiser(s, seed),
        NetSpec::Discriminator(s) => init_discriminator(s, seed),
        NetSpec::SegNet(s) => init_segnet(s, seed),
        NetSpec::StyleProbe(s) => init_style_probe(s, seed),
    }
}

const GN_EPS: f64 = 1e-5;

fn gn_groups(c: usize) -> usize {
    if c % 4 == 0 {
        4
    } else {
        1
    }
}

fn check_finite(v: &Var<'_>, path: &str) -> Result<()> {
    if !v.value().iter().all(|x| x.is_finite()) {
        return Err(AldmError::Numerical(format!("non-finite activation at `{path}`")));
    }
    Ok(())
}

fn conv_block<'t>(
    tp: &TapedParams<'t>,
    x: Var<'t>,
    name: &str,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    let w = tp.var(&format!("{name}.w"))?;
    let b = tp.var(&format!("{name}.b"))?;
    Ok(x.conv2d(w, stride, pad).add_bias_chan(b))
}

fn gn_affine<'t>(tp: &TapedParams<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    let c = x.shape()[1];
    let s = tp.var(&format!("{name}.s"))?;
    let b = tp.var(&format!("{name}.b"))?;
    Ok(x.group_norm(gn_groups(c), GN_EPS).mul_chan(s).add_bias_chan(b))
}

fn linear<'t>(tp: &TapedParams<'t>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    let w = tp.var(&format!("{name}.w"))?;
    let b = tp.var(&format!("{name}.b"))?;
    Ok(x.matmul(w).add_bias_row(b))
}

/// Sinusoidal timestep features, (B, dim), computed off-tape.
pub fn sinusoidal_embedding(ts: &[usize], t_max: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((ts.len(), dim));
    for (bi, &t) in ts.iter().enumerate() {
        let tf = t as f64 / t_max as f64;
        for i in 0..half {
            let freq = 10_000f64.powf(i as f64 / half.max(1) as f64);
            out[[bi, i]] = (tf * freq).sin();
            out[[bi, half + i]] = (tf * freq).cos();
        }
    }
    out
}

/// Denoiser forward pass on a tape. `x_t` must already be a var on the tape.
pub fn denoiser_forward<'t>(
    spec: &DenoiserSpec,
    tp: &TapedParams<'t>,
    x_t: Var<'t>,
    y_onehot: &Array4<f64>,
    styles: &[usize],
    ts: &[usize],
    t_max: usize,
) -> Result<Var<'t>> {
    spec.validate()?;
    let xs = x_t.shape();
    let (b, h, w) = (xs[0], xs[2], xs[3]);
    if xs[1] != 3 {
        return Err(AldmError::invalid(format!("denoiser expects 3 channels, got {}", xs[1])));
    }
    let yd = y_onehot.dim();
    if yd != (b, spec.num_classes, h, w) {
        return Err(AldmError::invalid(format!(
            "layout shape {:?} does not match ({b},{},{h},{w})",
            yd, spec.num_classes
        )));
    }
    if styles.len() != b || ts.len() != b {
        return Err(AldmError::invalid("style/timestep count must match batch size"));
    }
    for &s in styles {
        if s >= spec.num_styles {
            return Err(AldmError::invalid(format!("style id {s} out of range")));
        }
    }
    for &t in ts {
        if t < 1 || t > t_max {
            return Err(AldmError::invalid(format!("timestep {t} out of range 1..={t_max}")));
        }
    }

    // conditioning embedding: timestep features + style embedding -> MLP
    let t_feat = x_t.tape_leaf_of(&sinusoidal_embedding(ts, t_max, spec.emb_dim()).into_dyn());
    let style_table = tp.var("style_emb")?;
    let s_feat = style_table.gather_rows(styles);
    let mut e = t_feat.add(s_feat);
    e = linear(tp, e, "emb.fc1")?.silu();
    e = linear(tp, e, "emb.fc2")?.silu();

    // optional control branch features per level
    let mut ctrl: Vec<Option<Var<'t>>> = vec![None; spec.depth];
    if spec.conditioning == Conditioning::ControlBranch {
        let y = x_t.tape_leaf_of(&y_onehot.clone().into_dyn());
        let mut f = conv_block(tp, y, "ctrl.in", 1, 1)?.silu();
        for l in 0..spec.depth {
            if l > 0 {
                f = conv_block(tp, f, &format!("ctrl.down{}", l - 1), 2, 1)?.silu();
            }
            f = conv_block(tp, f, &format!("ctrl.enc{l}"), 1, 1)?.silu();
            let proj = tp.var(&format!("ctrl.proj{l}.w"))?;
            let pb = tp.var(&format!("ctrl.proj{l}.b"))?;
            ctrl[l] = Some(f.conv2d(proj, 1, 0).add_bias_chan(pb));
        }
    }

    let mut x = match spec.conditioning {
        Conditioning::Concat => {
            let y = x_t.tape_leaf_of(&y_onehot.clone().into_dyn());
            x_t.concat_chan(y)
        }
        Conditioning::ControlBranch => x_t,
    };
    x = conv_block(tp, x, "in", 1, 1)?;
    check_finite(&x, "in")?;

    let mut skips: Vec<Var<'t>> = Vec::new();
    for l in 0..spec.depth {
        let proj = linear(tp, e, &format!("enc{l}.emb"))?;
        x = conv_block(tp, x, &format!("enc{l}.c1"), 1, 1)?;
        x = gn_affine(tp, x, &format!("enc{l}.g1"))?;
        x = x.add_embed(proj).silu();
        x = conv_block(tp, x, &format!("enc{l}.c2"), 1, 1)?;
        x = gn_affine(tp, x, &format!("enc{l}.g2"))?.silu();
        if let Some(c) = ctrl[l] {
            x = x.add(c);
        }
        check_finite(&x, &format!("enc{l}"))?;
        skips.push(x);
        if l + 1 < spec.depth {
            x = conv_block(tp, x, &format!("down{l}"), 2, 1)?;
        }
    }

    let proj = linear(tp, e, "mid.emb")?;
    x = conv_block(tp, x, "mid.c1", 1, 1)?;
    x = gn_affine(tp, x, "mid.g1")?;
    x = x.add_embed(proj).silu();
    x = conv_block(tp, x, "mid.c2", 1, 1)?;
    x = gn_affine(tp, x, "mid.g2")?.silu();
    check_finite(&x, "mid")?;

    for l in (0..spec.depth - 1).rev() {
        x = x.upsample2();
        x = conv_block(tp, x, &format!("up{l}"), 1, 1)?;
        x = x.concat_chan(skips[l]);
        let proj = linear(tp, e, &format!("dec{l}.emb"))?;
        x = conv_block(tp, x, &format!("dec{l}.c1"), 1, 1)?;
        x = gn_affine(tp, x, &format!("dec{l}.g1"))?;
        x = x.add_embed(proj).silu();
        x = conv_block(tp, x, &format!("dec{l}.c2"), 1, 1)?;
        x = gn_affine(tp, x, &format!("dec{l}.g2"))?.silu();
        check_finite(&x, &format!("dec{l}"))?;
    }

    let out = conv_block(tp, x, "out", 1, 1)?;
    check_finite(&out, "out")?;
    Ok(out)
}

/// Segmentation net forward pass on a tape.
pub fn segnet_forward<'t>(
    spec: &SegNetSpec,
    tp: &TapedParams<'t>,
    image: Var<'t>,
) -> Result<Var<'t>> {
    let xs = image.shape();
    if xs.len() != 4 || xs[1] != spec.in_channels {
        return Err(AldmError::invalid(format!(
            "segnet expects (B,{},H,W), got {:?}",
            spec.in_channels, xs
        )));
    }
    let mut x = conv_block(tp, image, "in", 1, 1)?.silu();
    let mut skips: Vec<Var<'t>> = Vec::new();
    for l in 0..spec.depth {
        x = conv_block(tp, x, &format!("enc{l}.c1"), 1, 1)?;
        x = gn_affine(tp, x, &format!("enc{l}.g1"))?.silu();
        skips.push(x);
        if l + 1 < spec.depth {
            x = conv_block(tp, x, &format!("down{l}"), 2, 1)?;
        }
    }
    x = conv_block(tp, x, "mid.c1", 1, 1)?;
    x = gn_affine(tp, x, "mid.g1")?.silu();
    for l in (0..spec.depth - 1).rev() {
        x = x.upsample2();
        x = conv_block(tp, x, &format!("up{l}"), 1, 1)?;
        x = x.concat_chan(skips[l]);
        x = conv_block(tp, x, &format!("dec{l}.c1"), 1, 1)?;
        x = gn_affine(tp, x, &format!("dec{l}.g1"))?.silu();
    }
    let out = conv_block(tp, x, "out", 1, 0)?;
    check_finite(&out, "out")?;
    Ok(out)
}

/// Style probe forward pass: (B,3,H,W) -> (B,S) logits.
pub fn probe_forward<'t>(
    _spec: &StyleProbeSpec,
    tp: &TapedParams<'t>,
    image: Var<'t>,
) -> Result<Var<'t>> {
    let x = conv_block(tp, image, "c1", 2, 1)?.silu();
    let x = conv_block(tp, x, "c2", 2, 1)?.silu();
    let pooled = x.mean_spatial();
    linear(tp, pooled, "fc")
}

/// Inference-only denoiser call (no gradients recorded).
pub fn denoise(
    spec: &DenoiserSpec,
    params: &ParameterTree,
    x_t: &Array4<f64>,
    y_onehot: &Array4<f64>,
    styles: &[usize],
    ts: &[usize],
    t_max: usize,
) -> Result<Array4<f64>> {
    let tape = Tape::no_grad();
    let tp = TapedParams::lift(&tape, params);
    let x = tape.leaf(x_t.clone().into_dyn());
    let out = denoiser_forward(spec, &tp, x, y_onehot, styles, ts, t_max)?;
    Ok(out.value().as_ref().clone().into_dimensionality().unwrap())
}

/// Inference-only segmentation: per-pixel logits over `out_channels` classes.
pub fn segment(
    spec: &SegNetSpec,
    params: &ParameterTree,
    image: &Array4<f64>,
) -> Result<Array4<f64>> {
    let tape = Tape::no_grad();
    let tp = TapedParams::lift(&tape, params);
    let x = tape.leaf(image.clone().into_dyn());
    let out = segnet_forward(spec, &tp, x)?;
    Ok(out.value().as_ref().clone().into_dimensionality().unwrap())
}

/// Per-pixel argmax over the channel axis: (B,C,H,W) -> (B,H,W).
pub fn argmax_labels(logits: &Array4<f64>) -> ndarray::Array3<usize> {
    let (b, c, h, w) = logits.dim();
    let mut out = ndarray::Array3::<usize>::zeros((b, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut best = 0;
                let mut bv = f64::NEG_INFINITY;
                for ci in 0..c {
                    let v = logits[[bi, ci, i, j]];
                    if v > bv {
                        bv = v;
                        best = ci;
                    }
                }
                out[[bi, i, j]] = best;
            }
        }
    }
    out
}

/// One-hot encode a batch of label maps into (B,N,H,W).
pub fn onehot_labels(labels: &ndarray::Array3<usize>, n_classes: usize) -> Array4<f64> {
    let (b, h, w) = labels.dim();
    let mut out = Array4::<f64>::zeros((b, n_classes, h, w));
    for ((bi, i, j), &l) in labels.indexed_iter() {
        if l < n_classes {
            out[[bi, l, i, j]] = 1.0;
        }
    }
    out
}

/// Draw `count` random scalar parameter coordinates, for gradient checks.
pub fn sample_coordinates(
    tree: &ParameterTree,
    count: usize,
    seed: u64,
) -> Vec<(String, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<&String> = tree.iter().map(|(k, _)| k).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = names[rng.gen_range(0..names.len())].clone();
        let a = tree.get(&name).unwrap();
        let shape = a.shape().to_vec();
        let idx: Vec<usize> = shape.iter().map(|&d| rng.gen_range(0..d)).collect();
        out.push((name, idx));
    }
    out
}

pub fn get_scalar(tree: &ParameterTree, name: &str, idx: &[usize]) -> f64 {
    tree.get(name).unwrap()[IxDyn(idx)]
}

pub fn set_scalar(tree: &mut ParameterTree, name: &str, idx: &[usize], v: f64) {
    tree.get_mut(name).unwrap()[IxDyn(idx)] = v;
}

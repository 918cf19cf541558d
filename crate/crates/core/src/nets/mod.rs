//! The five mapping functions: content encoder, style encoder, generator,
//! content critic and multi-scale image critic.
//!
//! Layouts follow the architecture contract exactly; see [`audit`] for the
//! layer-by-layer shape tables and the conformance check.

pub mod audit;

use crate::autodiff::{Elem, Tape, Tx};
use crate::error::{ensure_contract, Result};
use crate::latent::{ContentCode, DomainLabel, StyleCode, StyleDistribution, CONTENT_CHANNELS};
use crate::norm::{cbin_tape, NORM_EPS};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Negative slope of every leaky ReLU.
pub const LRELU_SLOPE: f64 = 0.2;

/// Named parameter storage for one network.
#[derive(Debug, Clone)]
pub struct ParamSet<E: Elem> {
    names: Vec<String>,
    values: Vec<ArrayD<E>>,
}

impl<E: Elem> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<E>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, idx: usize) -> &ArrayD<E> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<E> {
        &mut self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<E>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    /// Insert every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Insert every parameter as a frozen (constant) leaf.
    pub fn bind_frozen(&self, tape: &mut Tape<E>) -> Bound {
        Bound(
            self.values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
        )
    }

    /// Pull gradients for a binding out of the tape, parallel to `values`.
    pub fn grads(&self, tape: &Tape<E>, bound: &Bound) -> Vec<Option<ArrayD<E>>> {
        bound.0.iter().map(|&t| tape.grad(t).cloned()).collect()
    }

    /// Convert the element type (f32 <-> f64).
    pub fn convert<F: Elem>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| F::from_f64(x.to_f64())))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<E>)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.values.iter())
    }
}

impl<E: Elem> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for one [`ParamSet`] binding.
pub struct Bound(Vec<Tx>);

impl Bound {
    pub fn tx(&self, idx: usize) -> Tx {
        self.0[idx]
    }
}

/// Records per-layer output shapes during a forward pass.
pub struct ShapeTrace {
    enabled: bool,
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn off() -> Self {
        ShapeTrace {
            enabled: false,
            entries: Vec::new(),
        }
    }

    pub fn on() -> Self {
        ShapeTrace {
            enabled: true,
            entries: Vec::new(),
        }
    }

    fn push<E: Elem>(&mut self, name: &str, tape: &Tape<E>, t: Tx) {
        if self.enabled {
            // Drop the batch axis: the tables are written per instance.
            self.entries
                .push((name.to_string(), tape.shape(t)[1..].to_vec()));
        }
    }
}

fn init_normal<E: Elem, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<E> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let v: Vec<E> = (0..n)
        .map(|_| E::from_f64(dist.sample(rng)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape")
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new<E: Elem, R: Rng>(
        ps: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_normal(rng, &[out_c, in_c, k, k], INIT_STD),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_c])));
        Conv { w, b, stride, pad }
    }

    fn forward<E: Elem>(&self, tape: &mut Tape<E>, bd: &Bound, x: Tx) -> Tx {
        tape.conv2d(x, bd.tx(self.w), Some(bd.tx(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct Deconv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Deconv {
    fn new<E: Elem, R: Rng>(
        ps: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_normal(rng, &[in_c, out_c, k, k], INIT_STD),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_c])));
        Deconv { w, b, stride, pad }
    }

    fn forward<E: Elem>(&self, tape: &mut Tape<E>, bd: &Bound, x: Tx) -> Tx {
        tape.conv_transpose2d(x, bd.tx(self.w), Some(bd.tx(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct Fc {
    w: usize,
    b: usize,
}

impl Fc {
    fn new<E: Elem, R: Rng>(
        ps: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init_normal(rng, &[out_f, in_f], INIT_STD),
        );
        let b = ps.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_f])));
        Fc { w, b }
    }

    fn forward<E: Elem>(&self, tape: &mut Tape<E>, bd: &Bound, x: Tx) -> Tx {
        tape.linear(x, bd.tx(self.w), Some(bd.tx(self.b)))
    }
}

/// Parameters of one CBIN injection site.
#[derive(Debug, Clone, Copy)]
struct CbinSite {
    w: usize,
    b: usize,
}

impl CbinSite {
    fn new<E: Elem, R: Rng>(
        ps: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        channels: usize,
        cond_dim: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.cbin.w"),
            init_normal(rng, &[channels, cond_dim], INIT_STD),
        );
        let b = ps.add(format!("{name}.cbin.b"), ArrayD::zeros(IxDyn(&[channels])));
        CbinSite { w, b }
    }

    fn apply<E: Elem>(&self, tape: &mut Tape<E>, bd: &Bound, x: Tx, cond: Tx) -> Tx {
        cbin_tape(
            tape,
            x,
            cond,
            bd.tx(self.w),
            bd.tx(self.b),
            E::from_f64(NORM_EPS),
        )
    }
}

/// Identity-skip residual block: `x + act(IN(conv(x)))`.
#[derive(Debug, Clone, Copy)]
struct InResBlock {
    conv: Conv,
}

impl InResBlock {
    fn new<E: Elem, R: Rng>(ps: &mut ParamSet<E>, rng: &mut R, name: &str, c: usize) -> Self {
        InResBlock {
            conv: Conv::new(ps, rng, name, c, c, 3, 1, 1),
        }
    }

    fn forward<E: Elem>(&self, tape: &mut Tape<E>, bd: &Bound, x: Tx) -> Tx {
        let y = self.conv.forward(tape, bd, x);
        let y = tape.instance_norm(y, E::from_f64(NORM_EPS));
        let y = tape.leaky_relu(y, E::from_f64(LRELU_SLOPE));
        tape.add(x, y)
    }
}

/// CBIN residual block: `x + act(CBIN(conv(x), cond))`.
#[derive(Debug, Clone, Copy)]
struct CbinResBlock {
    conv: Conv,
    cbin: CbinSite,
    relu: bool, // plain ReLU (generator) vs leaky ReLU (critics)
}

impl CbinResBlock {
    fn new<E: Elem, R: Rng>(
        ps: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        c: usize,
        cond_dim: usize,
        relu: bool,
    ) -> Self {
        CbinResBlock {
            conv: Conv::new(ps, rng, name, c, c, 3, 1, 1),
            cbin: CbinSite::new(ps, rng, name, c, cond_dim),
            relu,
        }
    }

    fn forward<E: Elem>(&self, tape: &mut Tape<E>, bd: &Bound, x: Tx, cond: Tx) -> Tx {
        let y = self.conv.forward(tape, bd, x);
        let y = self.cbin.apply(tape, bd, y, cond);
        let y = if self.relu {
            tape.relu(y)
        } else {
            tape.leaky_relu(y, E::from_f64(LRELU_SLOPE))
        };
        tape.add(x, y)
    }
}

/// Residual down-sampling block: main path `avgpool(act(norm(conv(x))))`,
/// skip path `avgpool(x)` with a 1x1 projection when channels change.
#[derive(Debug, Clone, Copy)]
struct ResDownBlock {
    conv: Conv,
    cbin: Option<CbinSite>, // None -> instance norm
    skip: Option<Conv>,
}

impl ResDownBlock {
    fn new<E: Elem, R: Rng>(
        ps: &mut ParamSet<E>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        cond_dim: Option<usize>,
    ) -> Self {
        let conv = Conv::new(ps, rng, name, in_c, out_c, 3, 1, 1);
        let cbin = cond_dim.map(|cd| CbinSite::new(ps, rng, name, out_c, cd));
        let skip = (in_c != out_c)
            .then(|| Conv::new(ps, rng, &format!("{name}.skip"), in_c, out_c, 1, 1, 0));
        ResDownBlock { conv, cbin, skip }
    }

    fn forward<E: Elem>(&self, tape: &mut Tape<E>, bd: &Bound, x: Tx, cond: Option<Tx>) -> Tx {
        let y = self.conv.forward(tape, bd, x);
        let y = match (&self.cbin, cond) {
            (Some(site), Some(cond)) => site.apply(tape, bd, y, cond),
            (None, _) => tape.instance_norm(y, E::from_f64(NORM_EPS)),
            (Some(_), None) => unreachable!("conditional block without condition"),
        };
        let y = tape.leaky_relu(y, E::from_f64(LRELU_SLOPE));
        let y = tape.avg_pool2(y);
        let s = tape.avg_pool2(x);
        let s = match &self.skip {
            Some(proj) => proj.forward(tape, bd, s),
            None => s,
        };
        tape.add(s, y)
    }
}

// ---------------------------------------------------------------------------
// Content encoder
// ---------------------------------------------------------------------------

/// Fully convolutional encoder to the spatial content map:
/// conv7 s1 + IN + LReLU, two stride-2 convs + IN + LReLU, then four
/// identity residual blocks at 256 channels.
#[derive(Debug, Clone)]
pub struct ContentEncoder<E: Elem> {
    pub params: ParamSet<E>,
    stem: [Conv; 3],
    blocks: [InResBlock; 4],
}

impl<E: Elem> ContentEncoder<E> {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let stem = [
            Conv::new(&mut ps, rng, "stem0", 3, 64, 7, 1, 3),
            Conv::new(&mut ps, rng, "stem1", 64, 128, 4, 2, 1),
            Conv::new(&mut ps, rng, "stem2", 128, 256, 4, 2, 1),
        ];
        let blocks = [
            InResBlock::new(&mut ps, rng, "rb0", 256),
            InResBlock::new(&mut ps, rng, "rb1", 256),
            InResBlock::new(&mut ps, rng, "rb2", 256),
            InResBlock::new(&mut ps, rng, "rb3", 256),
        ];
        ContentEncoder { params: ps, stem, blocks }
    }

    /// `x: [B,3,H,W]` with H, W divisible by 4 -> `[B,256,H/4,W/4]`.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bd: &Bound,
        x: Tx,
        trace: &mut ShapeTrace,
    ) -> Tx {
        let mut y = x;
        for (i, conv) in self.stem.iter().enumerate() {
            y = conv.forward(tape, bd, y);
            y = tape.instance_norm(y, E::from_f64(NORM_EPS));
            y = tape.leaky_relu(y, E::from_f64(LRELU_SLOPE));
            trace.push(&format!("stem{i}"), tape, y);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(tape, bd, y);
            trace.push(&format!("rb{i}"), tape, y);
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Style encoder
// ---------------------------------------------------------------------------

/// Residual down-sampling encoder ending in global average pooling and two
/// fully connected heads for mu and logvar.
#[derive(Debug, Clone)]
pub struct StyleEncoder<E: Elem> {
    pub params: ParamSet<E>,
    pub n_s: usize,
    stem: Conv,
    downs: [ResDownBlock; 3],
    head_mu: Fc,
    head_logvar: Fc,
}

impl<E: Elem> StyleEncoder<E> {
    pub fn new<R: Rng>(n_s: usize, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let stem = Conv::new(&mut ps, rng, "stem", 3, 64, 4, 2, 1);
        let downs = [
            ResDownBlock::new(&mut ps, rng, "down0", 64, 128, None),
            ResDownBlock::new(&mut ps, rng, "down1", 128, 256, None),
            ResDownBlock::new(&mut ps, rng, "down2", 256, 256, None),
        ];
        let head_mu = Fc::new(&mut ps, rng, "mu", 256, n_s);
        let head_logvar = Fc::new(&mut ps, rng, "logvar", 256, n_s);
        StyleEncoder {
            params: ps,
            n_s,
            stem,
            downs,
            head_mu,
            head_logvar,
        }
    }

    /// `x: [B,3,H,W]` with H, W >= 16 -> `(mu, logvar)`, each `[B,n_s]`.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bd: &Bound,
        x: Tx,
        trace: &mut ShapeTrace,
    ) -> (Tx, Tx) {
        let mut y = self.stem.forward(tape, bd, x);
        trace.push("stem", tape, y);
        for (i, block) in self.downs.iter().enumerate() {
            y = block.forward(tape, bd, y, None);
            trace.push(&format!("down{i}"), tape, y);
        }
        let y = tape.leaky_relu(y, E::from_f64(LRELU_SLOPE));
        let pooled = tape.global_avg_pool(y);
        trace.push("gap", tape, pooled);
        let mu = self.head_mu.forward(tape, bd, pooled);
        trace.push("mu", tape, mu);
        let logvar = self.head_logvar.forward(tape, bd, pooled);
        trace.push("logvar", tape, logvar);
        (mu, logvar)
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Style-based decoder: six CBIN residual blocks conditioned on
/// `concat(style, domain)`, two stride-2 deconvolutions with layer norm,
/// and a 7x7 output convolution with tanh.
#[derive(Debug, Clone)]
pub struct Generator<E: Elem> {
    pub params: ParamSet<E>,
    pub cond_dim: usize,
    blocks: [CbinResBlock; 6],
    up1: Deconv,
    ln1: (usize, usize),
    up2: Deconv,
    ln2: (usize, usize),
    out: Conv,
}

impl<E: Elem> Generator<E> {
    pub fn new<R: Rng>(n_s: usize, n_d: usize, rng: &mut R) -> Self {
        let cond_dim = n_s + n_d;
        let mut ps = ParamSet::new();
        let blocks = [
            CbinResBlock::new(&mut ps, rng, "rb0", 256, cond_dim, true),
            CbinResBlock::new(&mut ps, rng, "rb1", 256, cond_dim, true),
            CbinResBlock::new(&mut ps, rng, "rb2", 256, cond_dim, true),
            CbinResBlock::new(&mut ps, rng, "rb3", 256, cond_dim, true),
            CbinResBlock::new(&mut ps, rng, "rb4", 256, cond_dim, true),
            CbinResBlock::new(&mut ps, rng, "rb5", 256, cond_dim, true),
        ];
        let up1 = Deconv::new(&mut ps, rng, "up1", 256, 128, 4, 2, 1);
        let ln1 = (
            ps.add("up1.ln.gain", ArrayD::ones(IxDyn(&[128]))),
            ps.add("up1.ln.shift", ArrayD::zeros(IxDyn(&[128]))),
        );
        let up2 = Deconv::new(&mut ps, rng, "up2", 128, 64, 4, 2, 1);
        let ln2 = (
            ps.add("up2.ln.gain", ArrayD::ones(IxDyn(&[64]))),
            ps.add("up2.ln.shift", ArrayD::zeros(IxDyn(&[64]))),
        );
        let out = Conv::new(&mut ps, rng, "out", 64, 3, 7, 1, 3);
        Generator {
            params: ps,
            cond_dim,
            blocks,
            up1,
            ln1,
            up2,
            ln2,
            out,
        }
    }

    /// `content: [B,256,h,w]`, `cond: [B, n_s+n_d]` -> `[B,3,4h,4w]` in (-1,1).
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bd: &Bound,
        content: Tx,
        cond: Tx,
        trace: &mut ShapeTrace,
    ) -> Tx {
        let mut y = content;
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(tape, bd, y, cond);
            trace.push(&format!("rb{i}"), tape, y);
        }
        let eps = E::from_f64(NORM_EPS);
        y = self.up1.forward(tape, bd, y);
        y = tape.layer_norm(y, bd.tx(self.ln1.0), bd.tx(self.ln1.1), eps);
        y = tape.relu(y);
        trace.push("up1", tape, y);
        y = self.up2.forward(tape, bd, y);
        y = tape.layer_norm(y, bd.tx(self.ln2.0), bd.tx(self.ln2.1), eps);
        y = tape.relu(y);
        trace.push("up2", tape, y);
        y = self.out.forward(tape, bd, y);
        y = tape.tanh(y);
        trace.push("out", tape, y);
        y
    }
}

// ---------------------------------------------------------------------------
// Critics
// ---------------------------------------------------------------------------

/// One conditional patch critic: stride-2 stem, two CBIN residual
/// down-blocks conditioned on the domain label, 1x1 score head.
#[derive(Debug, Clone)]
struct PatchCritic {
    stem: Conv,
    downs: [ResDownBlock; 2],
    head: Conv,
}

impl PatchCritic {
    fn new<E: Elem, R: Rng>(
        ps: &mut ParamSet<E>,
        rng: &mut R,
        prefix: &str,
        in_c: usize,
        n_d: usize,
    ) -> Self {
        let stem = Conv::new(ps, rng, &format!("{prefix}stem"), in_c, 64, 4, 2, 1);
        let downs = [
            ResDownBlock::new(ps, rng, &format!("{prefix}down0"), 64, 128, Some(n_d)),
            ResDownBlock::new(ps, rng, &format!("{prefix}down1"), 128, 256, Some(n_d)),
        ];
        let head = Conv::new(ps, rng, &format!("{prefix}head"), 256, 1, 1, 1, 0);
        PatchCritic { stem, downs, head }
    }

    fn forward<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        bd: &Bound,
        x: Tx,
        d: Tx,
        trace: &mut ShapeTrace,
        prefix: &str,
    ) -> Tx {
        let mut y = self.stem.forward(tape, bd, x);
        trace.push(&format!("{prefix}stem"), tape, y);
        for (i, block) in self.downs.iter().enumerate() {
            y = block.forward(tape, bd, y, Some(d));
            trace.push(&format!("{prefix}down{i}"), tape, y);
        }
        let y = self.head.forward(tape, bd, y);
        trace.push(&format!("{prefix}out"), tape, y);
        y
    }
}

/// Conditional critic over content maps (single scale).
#[derive(Debug, Clone)]
pub struct ContentCritic<E: Elem> {
    pub params: ParamSet<E>,
    critic: PatchCritic,
}

impl<E: Elem> ContentCritic<E> {
    pub fn new<R: Rng>(n_d: usize, rng: &mut R) -> Self {
        let mut ps = ParamSet::new();
        let critic = PatchCritic::new(&mut ps, rng, "", CONTENT_CHANNELS, n_d);
        ContentCritic { params: ps, critic }
    }

    /// `content: [B,256,h,w]`, `d: [B,n_d]` -> score map `[B,1,h/8,w/8]`.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bd: &Bound,
        content: Tx,
        d: Tx,
        trace: &mut ShapeTrace,
    ) -> Tx {
        self.critic.forward(tape, bd, content, d, trace, "")
    }
}

/// Multi-scale conditional critic over images: one independent critic per
/// scale, scale `i` consuming the input average-pooled `i` times.
#[derive(Debug, Clone)]
pub struct ImageCritic<E: Elem> {
    pub params: ParamSet<E>,
    scales: Vec<PatchCritic>,
}

impl<E: Elem> ImageCritic<E> {
    pub fn new<R: Rng>(n_d: usize, scales: usize, rng: &mut R) -> Self {
        assert!(scales >= 1, "need at least one critic scale");
        let mut ps = ParamSet::new();
        let scales = (0..scales)
            .map(|i| PatchCritic::new(&mut ps, rng, &format!("scale{i}."), 3, n_d))
            .collect();
        ImageCritic { params: ps, scales }
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// `x: [B,3,H,W]`, `d: [B,n_d]` -> one score map per scale.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        bd: &Bound,
        x: Tx,
        d: Tx,
        trace: &mut ShapeTrace,
    ) -> Vec<Tx> {
        let mut maps = Vec::with_capacity(self.scales.len());
        let mut input = x;
        for (i, critic) in self.scales.iter().enumerate() {
            if i > 0 {
                input = tape.avg_pool2(input);
            }
            maps.push(critic.forward(tape, bd, input, d, trace, &format!("scale{i}.")));
        }
        maps
    }
}

// ---------------------------------------------------------------------------
// The full model
// ---------------------------------------------------------------------------

/// All five networks plus the latent dimensions they were built for.
#[derive(Debug, Clone)]
pub struct Networks<E: Elem> {
    pub content_encoder: ContentEncoder<E>,
    pub style_encoder: StyleEncoder<E>,
    pub generator: Generator<E>,
    pub content_critic: ContentCritic<E>,
    pub image_critic: ImageCritic<E>,
    pub n_s: usize,
    pub n_d: usize,
}

impl<E: Elem> Networks<E> {
    pub fn new<R: Rng>(n_s: usize, n_d: usize, scales: usize, rng: &mut R) -> Self {
        Networks {
            content_encoder: ContentEncoder::new(rng),
            style_encoder: StyleEncoder::new(n_s, rng),
            generator: Generator::new(n_s, n_d, rng),
            content_critic: ContentCritic::new(n_d, rng),
            image_critic: ImageCritic::new(n_d, scales, rng),
            n_s,
            n_d,
        }
    }

    pub fn convert<F: Elem>(&self) -> Networks<F> {
        Networks {
            content_encoder: ContentEncoder {
                params: self.content_encoder.params.convert(),
                stem: self.content_encoder.stem,
                blocks: self.content_encoder.blocks,
            },
            style_encoder: StyleEncoder {
                params: self.style_encoder.params.convert(),
                n_s: self.style_encoder.n_s,
                stem: self.style_encoder.stem,
                downs: self.style_encoder.downs,
                head_mu: self.style_encoder.head_mu,
                head_logvar: self.style_encoder.head_logvar,
            },
            generator: Generator {
                params: self.generator.params.convert(),
                cond_dim: self.generator.cond_dim,
                blocks: self.generator.blocks,
                up1: self.generator.up1,
                ln1: self.generator.ln1,
                up2: self.generator.up2,
                ln2: self.generator.ln2,
                out: self.generator.out,
            },
            content_critic: ContentCritic {
                params: self.content_critic.params.convert(),
                critic: self.content_critic.critic.clone(),
            },
            image_critic: ImageCritic {
                params: self.image_critic.params.convert(),
                scales: self.image_critic.scales.clone(),
            },
            n_s: self.n_s,
            n_d: self.n_d,
        }
    }
}

fn image_to_batch(x: &Array3<f32>) -> ArrayD<f32> {
    let (c, h, w) = x.dim();
    x.to_shape((1, c, h, w)).expect("contiguous").to_owned().into_dyn()
}

impl Networks<f32> {
    /// Encode an image (values in [-1, 1]) to its content code.
    pub fn content_encode(&self, image: &Array3<f32>) -> Result<ContentCode> {
        let (c, h, w) = image.dim();
        ensure_contract!(c == 3, "content_encode expects 3 channels, got {c}");
        ensure_contract!(
            h % 4 == 0 && w % 4 == 0,
            "content_encode needs dims divisible by 4, got {h}x{w}"
        );
        let mut tape = Tape::new();
        let bd = self.content_encoder.params.bind_frozen(&mut tape);
        let x = tape.constant(image_to_batch(image));
        let y = self
            .content_encoder
            .forward(&mut tape, &bd, x, &mut ShapeTrace::off());
        let v = tape.value(y);
        let s = v.shape();
        let data = v
            .to_shape((s[1], s[2], s[3]))
            .expect("contiguous")
            .to_owned();
        ContentCode::new(data)
    }

    /// Encode an image to its style distribution.
    pub fn style_encode(&self, image: &Array3<f32>) -> Result<StyleDistribution> {
        let (c, h, w) = image.dim();
        ensure_contract!(c == 3, "style_encode expects 3 channels, got {c}");
        ensure_contract!(
            h >= 16 && w >= 16,
            "style_encode needs dims >= 16 (four down-samplings), got {h}x{w}"
        );
        ensure_contract!(
            h % 16 == 0 && w % 16 == 0,
            "style_encode needs dims divisible by 16, got {h}x{w}"
        );
        let mut tape = Tape::new();
        let bd = self.style_encoder.params.bind_frozen(&mut tape);
        let x = tape.constant(image_to_batch(image));
        let (mu, logvar) =
            self.style_encoder
                .forward(&mut tape, &bd, x, &mut ShapeTrace::off());
        StyleDistribution::new(
            tape.value(mu).iter().copied().collect(),
            tape.value(logvar).iter().copied().collect(),
        )
    }

    /// Decode `(content, style, domain)` to an image in (-1, 1).
    pub fn generate(
        &self,
        content: &ContentCode,
        style: &StyleCode,
        domain: &DomainLabel,
    ) -> Result<Array3<f32>> {
        ensure_contract!(
            style.len() == self.n_s,
            "style length {} != n_s {}",
            style.len(),
            self.n_s
        );
        ensure_contract!(
            domain.len() == self.n_d,
            "domain length {} != n_d {}",
            domain.len(),
            self.n_d
        );
        let mut tape = Tape::new();
        let bd = self.generator.params.bind_frozen(&mut tape);
        let (c, h, w) = content.dim();
        let ct = tape.constant(
            content
                .data()
                .to_shape((1, c, h, w))
                .expect("contiguous")
                .to_owned()
                .into_dyn(),
        );
        let mut cond = style.0.clone();
        cond.extend_from_slice(&domain.d);
        let condt = tape.constant(
            Array2::from_shape_vec((1, cond.len()), cond)
                .expect("shape")
                .into_dyn(),
        );
        let y = self
            .generator
            .forward(&mut tape, &bd, ct, condt, &mut ShapeTrace::off());
        let v = tape.value(y);
        let s = v.shape();
        Ok(v.to_shape((s[1], s[2], s[3])).expect("contiguous").to_owned())
    }

    /// Conditional score map over a content code.
    pub fn critic_content(
        &self,
        content: &ContentCode,
        domain: &DomainLabel,
    ) -> Result<Array3<f32>> {
        ensure_contract!(
            domain.len() == self.n_d,
            "domain length {} != n_d {}",
            domain.len(),
            self.n_d
        );
        let mut tape = Tape::new();
        let bd = self.content_critic.params.bind_frozen(&mut tape);
        let (c, h, w) = content.dim();
        ensure_contract!(
            h % 8 == 0 && w % 8 == 0,
            "content critic needs content dims divisible by 8, got {h}x{w}"
        );
        let ct = tape.constant(
            content
                .data()
                .to_shape((1, c, h, w))
                .expect("contiguous")
                .to_owned()
                .into_dyn(),
        );
        let dt = tape.constant(
            Array2::from_shape_vec((1, domain.len()), domain.d.clone())
                .expect("shape")
                .into_dyn(),
        );
        let y = self
            .content_critic
            .forward(&mut tape, &bd, ct, dt, &mut ShapeTrace::off());
        let v = tape.value(y);
        let s = v.shape();
        Ok(v.to_shape((s[1], s[2], s[3])).expect("contiguous").to_owned())
    }

    /// Per-scale conditional score maps over an image.
    pub fn critic_image(
        &self,
        image: &Array3<f32>,
        domain: &DomainLabel,
    ) -> Result<Vec<Array3<f32>>> {
        let (c, h, w) = image.dim();
        ensure_contract!(c == 3, "critic_image expects 3 channels");
        let div = 1 << (self.image_critic.num_scales() - 1 + 3);
        ensure_contract!(
            h % div == 0 && w % div == 0,
            "critic_image needs dims divisible by {div}, got {h}x{w}"
        );
        let mut tape = Tape::new();
        let bd = self.image_critic.params.bind_frozen(&mut tape);
        let x = tape.constant(image_to_batch(image));
        let dt = tape.constant(
            Array2::from_shape_vec((1, domain.len()), domain.d.clone())
                .expect("shape")
                .into_dyn(),
        );
        let maps = self
            .image_critic
            .forward(&mut tape, &bd, x, dt, &mut ShapeTrace::off());
        Ok(maps
            .into_iter()
            .map(|m| {
                let v = tape.value(m);
                let s = v.shape();
                v.to_shape((s[1], s[2], s[3])).expect("contiguous").to_owned()
            })
            .collect())
    }

    /// Batch of domain label rows -> `[B, n_d]` array.
    pub fn domain_rows(labels: &[DomainLabel]) -> Array2<f32> {
        let n_d = labels[0].len();
        let mut rows = Array2::zeros((labels.len(), n_d));
        for (i, l) in labels.iter().enumerate() {
            for (j, &v) in l.d.iter().enumerate() {
                rows[[i, j]] = v;
            }
        }
        rows
    }
}

/// Concatenate style rows `[B,n_s]` and domain rows `[B,n_d]` into the
/// generator conditioning `[B, n_s+n_d]` on the tape.
pub fn gen_condition<E: Elem>(tape: &mut Tape<E>, style: Tx, domain: Tx) -> Tx {
    tape.concat_cols(style, domain)
}

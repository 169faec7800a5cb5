//! The early-fusion change-detection network.
//!
//! ```text
//! pre  ─ Conv_pre ─┐
//!                  ├ concat ─ DW3×3 ─ 1×1 ─ DW3×3 ─ encoder ─ S1..S4 ─ fusion ─ head ─ logits
//! post ─ Conv_post ┘
//! ```
//!
//! The fusion stage is either the parameter-free gated fusion ([`emff_fuse`])
//! or the learned baseline ([`naive_fuse`]).

pub mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{check_input_size, FusionMode, ModelConfig};

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::{self, streams};
use crate::tensor::{Conv2dParams, Real, Shape, Tape, Tensor, Var};

/// Parameter group a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Stem,
    Encoder,
    Fusion,
    Head,
}

impl Section {
    pub const ALL: [Section; 4] = [Section::Stem, Section::Encoder, Section::Fusion, Section::Head];

    pub fn name(&self) -> &'static str {
        match self {
            Section::Stem => "stem",
            Section::Encoder => "encoder",
            Section::Fusion => "fusion",
            Section::Head => "head",
        }
    }
}

/// A convolution in the network, with everything needed to allocate its
/// parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub section: Section,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvLayer {
    fn new(name: impl Into<String>, section: Section, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            section,
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    fn strided(mut self) -> Self {
        self.stride = 2;
        self
    }

    fn depthwise(mut self) -> Self {
        self.groups = self.c_in;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in / self.groups, self.kernel, self.kernel)
    }

    pub fn fan_in(&self) -> usize {
        self.c_in / self.groups * self.kernel * self.kernel
    }

    /// Weight plus bias element count.
    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + self.c_out
    }

    pub fn params(&self) -> Conv2dParams {
        Conv2dParams {
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

/// Every convolution of the model described by `cfg`, in forward order.
pub fn conv_layers(cfg: &ModelConfig) -> Vec<ConvLayer> {
    let s = cfg.stem_channels;
    let f = cfg.stem_out();
    let mut layers = vec![
        ConvLayer::new("stem.pre", Section::Stem, 3, s, 3).strided(),
        ConvLayer::new("stem.post", Section::Stem, 3, s, 3).strided(),
        ConvLayer::new("stem.dw1", Section::Stem, f, f, 3).depthwise(),
        ConvLayer::new("stem.pw", Section::Stem, f, f, 1),
        ConvLayer::new("stem.dw2", Section::Stem, f, f, 3).depthwise(),
    ];
    let mut c_prev = f;
    for (i, (&c, &depth)) in cfg.encoder_widths.iter().zip(&cfg.encoder_depths).enumerate() {
        layers.push(ConvLayer::new(format!("encoder.{i}.down"), Section::Encoder, c_prev, c, 3).strided());
        for j in 0..depth {
            for k in 1..=2 {
                layers.push(ConvLayer::new(
                    format!("encoder.{i}.block{j}.conv{k}"),
                    Section::Encoder,
                    c,
                    c,
                    3,
                ));
            }
        }
        c_prev = c;
    }
    if cfg.fusion_mode == FusionMode::Naive {
        let total: usize = cfg.encoder_widths.iter().sum();
        layers.push(ConvLayer::new("fusion.proj", Section::Fusion, total, cfg.fused_channels(), 1));
    }
    layers.push(ConvLayer::new("head.conv1", Section::Head, cfg.fused_channels(), cfg.head_hidden, 1));
    layers.push(ConvLayer::new("head.conv2", Section::Head, cfg.head_hidden, 2, 1));
    layers
}

/// Named parameter tensors in a fixed (forward) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, Tensor<f32>)>) -> Self {
        Self { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Little-endian bytes of every value, in order. Used to fingerprint
    /// parameters bit-exactly.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Parameters registered on a tape, addressable by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Compat(format!("missing parameter `{name}`")))
    }

    /// `(name, var)` pairs in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }

    fn conv<T: Real>(&self, tape: &mut Tape<T>, x: Var, layer: &ConvLayer) -> Result<Var> {
        let w = self.get(&format!("{}.weight", layer.name))?;
        let b = self.get(&format!("{}.bias", layer.name))?;
        tape.conv2d(x, w, Some(b), layer.params())
    }
}

/// The four encoder stage outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    pub s: [Var; 4],
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// (N,2,H,W) class logits at input resolution.
    pub logits: Var,
    /// Softmax of `logits`.
    pub probs: Var,
    /// Deep-supervision map in (0,1), (N,1,H,W).
    pub s_hat: Var,
    /// Fused features at stride 4.
    pub s_bar: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
}

impl Model {
    /// Fresh model: uniform weights with variance 1/fan_in, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, streams::INIT);
        let mut entries = Vec::new();
        for layer in conv_layers(&config) {
            let bound = (3.0 / layer.fan_in() as f64).sqrt() as f32;
            let w = Tensor::from_fn(layer.weight_shape(), |_| rng.random_range(-bound..bound));
            let b = Tensor::zeros(Shape::new(1, layer.c_out, 1, 1));
            entries.push((format!("{}.weight", layer.name), w));
            entries.push((format!("{}.bias", layer.name), b));
        }
        Ok(Self {
            config,
            params: Params { entries },
        })
    }

    /// Assembles a model from existing tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(Error::Compat(format!(
                "config expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(params.iter()) {
            if name != got_name || *shape != t.shape() {
                return Err(Error::Compat(format!(
                    "expected `{name}` {shape}, got `{got_name}` {}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Total learnable element count.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameter names owned by the fusion stage.
    pub fn fusion_param_names(&self) -> Vec<&str> {
        self.params
            .names()
            .into_iter()
            .filter(|n| n.starts_with("fusion."))
            .collect()
    }

    /// Registers parameters on `tape`; differentiable when `trainable`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = t.cast::<T>();
                let var = if trainable { tape.leaf(v) } else { tape.constant(v) };
                (name.to_string(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Full forward pass on `(pre, post)` image batches (N,3,H,W).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, pre: Var, post: Var) -> Result<ForwardOutput> {
        let s = tape.shape(pre);
        let f = stem_forward(tape, p, &self.config, pre, post)?;
        let feats = encoder_forward(tape, p, &self.config, f)?;
        let (s_bar, s_hat_raw) = match self.config.fusion_mode {
            FusionMode::Emff => emff_fuse(tape, &feats)?,
            FusionMode::Naive => naive_fuse(tape, p, &self.config, &feats)?,
        };
        let head = head_forward(tape, p, s_bar, s_hat_raw, (s.h(), s.w()))?;
        Ok(ForwardOutput {
            logits: head.logits,
            probs: head.probs,
            s_hat: head.s_hat,
            s_bar,
        })
    }

    /// Inference without gradients: class probabilities and the binary mask.
    pub fn predict(&self, pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<(Tensor<f32>, Mask)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let a = tape.constant(pre.clone());
        let b = tape.constant(post.clone());
        let out = self.forward(&mut tape, &p, a, b)?;
        let probs = tape.value(out.probs).clone();
        let mask = predict_mask(&probs)?;
        Ok((probs, mask))
    }
}

/// `(name, shape)` of every parameter `cfg` defines, in order.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Shape)> {
    conv_layers(cfg)
        .into_iter()
        .flat_map(|l| {
            [
                (format!("{}.weight", l.name), l.weight_shape()),
                (format!("{}.bias", l.name), Shape::new(1, l.c_out, 1, 1)),
            ]
        })
        .collect()
}

/// Fixed input shift and scale applied to both dates before the stem,
/// mapping [0,1] pixels to roughly zero-mean unit-range values.
pub const INPUT_SHIFT: f64 = 0.5;
pub const INPUT_SCALE: f64 = 4.0;

fn standardize<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = tape.constant(Tensor::full(tape.shape(x), T::of(-INPUT_SHIFT)));
    let x = tape.add(x, c)?;
    tape.scale(x, T::of(INPUT_SCALE))
}

fn layer(cfg: &ModelConfig, name: &str) -> ConvLayer {
    conv_layers(cfg)
        .into_iter()
        .find(|l| l.name == name)
        .unwrap_or_else(|| panic!("layer `{name}` is not part of this config"))
}

/// Input standardisation, separate 3×3 stride-2 convs per date, channel concat, then
/// DW3×3 → 1×1 → DW3×3. Output F at stride 2 with `2·stem_channels` channels.
pub fn stem_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, pre: Var, post: Var) -> Result<Var> {
    let (a, b) = (tape.shape(pre), tape.shape(post));
    if a != b {
        return Err(Error::Input(format!("pre image {a} and post image {b} differ in shape")));
    }
    if a.c() != 3 {
        return Err(Error::Input(format!("expected 3-channel images, got {a}")));
    }
    let pre = standardize(tape, pre)?;
    let post = standardize(tape, post)?;
    let x_pre = p.conv(tape, pre, &layer(cfg, "stem.pre"))?;
    let x_post = p.conv(tape, post, &layer(cfg, "stem.post"))?;
    let x = tape.concat_channel(&[x_pre, x_post])?;
    let x = p.conv(tape, x, &layer(cfg, "stem.dw1"))?;
    let x = p.conv(tape, x, &layer(cfg, "stem.pw"))?;
    p.conv(tape, x, &layer(cfg, "stem.dw2"))
}

/// Four stages of (3×3 stride-2 conv, residual blocks).
pub fn encoder_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, f: Var) -> Result<PyramidFeatures> {
    let s = tape.shape(f);
    if s.h() < 16 || s.w() < 16 || !s.h().is_multiple_of(16) || !s.w().is_multiple_of(16) {
        return Err(Error::Config(format!(
            "stem output {s} cannot be halved four times (needs extents divisible by 16)"
        )));
    }
    let layers = conv_layers(cfg);
    let find = |name: String| layers.iter().find(|l| l.name == name).expect("layer exists");
    let mut x = f;
    let mut out = Vec::with_capacity(4);
    for (i, &depth) in cfg.encoder_depths.iter().enumerate() {
        x = p.conv(tape, x, find(format!("encoder.{i}.down")))?;
        for j in 0..depth {
            let h = p.conv(tape, x, find(format!("encoder.{i}.block{j}.conv1")))?;
            let h = tape.relu(h)?;
            let h = p.conv(tape, h, find(format!("encoder.{i}.block{j}.conv2")))?;
            let sum = tape.add(x, h)?;
            x = tape.relu(sum)?;
        }
        out.push(x);
    }
    Ok(PyramidFeatures {
        s: [out[0], out[1], out[2], out[3]],
    })
}

fn resize_pyramid<T: Real>(tape: &mut Tape<T>, feats: &PyramidFeatures) -> Result<[Var; 4]> {
    let s1 = tape.shape(feats.s[0]);
    let mut out = feats.s;
    for v in out.iter_mut().skip(1) {
        *v = tape.bilinear_resize(*v, s1.h(), s1.w())?;
    }
    Ok(out)
}

fn check_pyramid_widths(c: [usize; 4]) -> Result<()> {
    let [c1, c2, c3, c4] = c;
    if c1 == 0 || c2 % c1 != 0 || c3 % c2 != 0 || c4 % c3 != 0 {
        return Err(Error::Config(format!(
            "pyramid widths {c:?} must each divide the next"
        )));
    }
    Ok(())
}

/// Intermediate tensors of the parameter-free fusion, all at S_1's resolution.
#[derive(Debug, Clone, Copy)]
pub struct EmffStages {
    /// `tanh(mean_c S_3)`, (N,1,h,w).
    pub gate: Var,
    /// S'_4: S_4 averaged down to C_3 channels.
    pub s4_pooled: Var,
    /// E_4 = gate ⊙ S'_4.
    pub e4: Var,
    /// E'_4 = S_3 + E_4.
    pub e4_sum: Var,
    /// S'_3: E'_4 averaged down to C_2 channels.
    pub s3_pooled: Var,
    /// S'_2: max over groups of S_2 + S'_3, C_1 channels.
    pub s2_pooled: Var,
    pub s_bar: Var,
    pub s_hat_raw: Var,
}

/// Parameter-free multiscale fusion.
///
/// With every level resized to S_1's resolution:
/// `w = tanh(mean_c S_3)`, `E'_4 = S_3 + w ⊙ avg_c(S_4 → C_3)`,
/// `S'_3 = avg_c(E'_4 → C_2)`, `S'_2 = max_c(S_2 + S'_3 → C_1)`,
/// `S̄ = concat(S_1 + S'_2, S_4)`. Returns `(S̄, mean_c S̄)`.
pub fn emff_fuse<T: Real>(tape: &mut Tape<T>, feats: &PyramidFeatures) -> Result<(Var, Var)> {
    let st = emff_stages(tape, feats)?;
    Ok((st.s_bar, st.s_hat_raw))
}

pub fn emff_stages<T: Real>(tape: &mut Tape<T>, feats: &PyramidFeatures) -> Result<EmffStages> {
    let widths = feats.s.map(|v| tape.shape(v).c());
    check_pyramid_widths(widths)?;
    let [c1, c2, c3, _] = widths;
    let [s1, s2, s3, s4] = resize_pyramid(tape, feats)?;

    let s4_pooled = tape.channel_avg_pool(s4, c3)?;
    let gate = tape.channel_mean(s3)?;
    let gate = tape.tanh(gate)?;
    let e4 = tape.mul_broadcast(gate, s4_pooled)?;
    let e4_sum = tape.add(s3, e4)?;
    let s3_pooled = tape.channel_avg_pool(e4_sum, c2)?;
    let s2_sum = tape.add(s2, s3_pooled)?;
    let s2_pooled = tape.channel_max_pool(s2_sum, c1)?;
    let fine = tape.add(s1, s2_pooled)?;
    let s_bar = tape.concat_channel(&[fine, s4])?;
    let s_hat_raw = tape.channel_mean(s_bar)?;
    Ok(EmffStages {
        gate,
        s4_pooled,
        e4,
        e4_sum,
        s3_pooled,
        s2_pooled,
        s_bar,
        s_hat_raw,
    })
}

/// Baseline fusion: resize, concatenate all levels, 1×1 conv to C_1 + C_4.
pub fn naive_fuse<T: Real>(tape: &mut Tape<T>, p: &Bound, cfg: &ModelConfig, feats: &PyramidFeatures) -> Result<(Var, Var)> {
    check_pyramid_widths(feats.s.map(|v| tape.shape(v).c()))?;
    let levels = resize_pyramid(tape, feats)?;
    let cat = tape.concat_channel(&levels)?;
    let s_bar = p.conv(tape, cat, &layer(cfg, "fusion.proj"))?;
    let s_hat_raw = tape.channel_mean(s_bar)?;
    Ok((s_bar, s_hat_raw))
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: Var,
    pub probs: Var,
    pub s_hat: Var,
}

/// 1×1 conv → relu → 1×1 conv to two classes, upsampled to `out_size`.
pub fn head_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    s_bar: Var,
    s_hat_raw: Var,
    out_size: (usize, usize),
) -> Result<HeadOutput> {
    let c = tape.shape(s_bar).c();
    let w1 = p.get("head.conv1.weight")?;
    if tape.shape(w1).0[1] != c {
        return Err(Error::Dimension(format!(
            "head expects {} fused channels, got {c}",
            tape.shape(w1).0[1]
        )));
    }
    let b1 = p.get("head.conv1.bias")?;
    let h = tape.conv2d(s_bar, w1, Some(b1), Conv2dParams::default())?;
    let h = tape.relu(h)?;
    let w2 = p.get("head.conv2.weight")?;
    let b2 = p.get("head.conv2.bias")?;
    let h = tape.conv2d(h, w2, Some(b2), Conv2dParams::default())?;
    let logits = tape.bilinear_resize(h, out_size.0, out_size.1)?;
    let probs = tape.softmax_channel(logits)?;
    let s_hat = tape.bilinear_resize(s_hat_raw, out_size.0, out_size.1)?;
    let s_hat = tape.sigmoid(s_hat)?;
    Ok(HeadOutput { logits, probs, s_hat })
}

/// Per-pixel argmax over the two class channels; ties resolve to no-change.
pub fn predict_mask<T: Real>(probs: &Tensor<T>) -> Result<Mask> {
    let s = probs.shape();
    if s.c() != 2 {
        return Err(Error::Dimension(format!("expected 2-class probabilities, got {s}")));
    }
    let plane = s.plane();
    let d = probs.data();
    let mut out = Vec::with_capacity(s.n() * plane);
    for b in 0..s.n() {
        for p in 0..plane {
            out.push((d[(2 * b + 1) * plane + p] > d[2 * b * plane + p]) as u8);
        }
    }
    Mask::new(s.n(), s.h(), s.w(), out)
}

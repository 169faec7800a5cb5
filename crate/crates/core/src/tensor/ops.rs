use super::kernels::{self, ConvGeom};
use super::{Backward, Real, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

struct Conv2dBackward {
    geom: ConvGeom,
    has_bias: bool,
}

impl<T: Real> Backward<T> for Conv2dBackward {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let mut grads = vec![
            needs[0].then(|| kernels::conv2d_backward_input(&self.geom, grad_out, w)),
            needs[1].then(|| kernels::conv2d_backward_weight(&self.geom, grad_out, x)),
        ];
        if self.has_bias {
            grads.push(needs[2].then(|| kernels::conv2d_backward_bias(&self.geom, grad_out)));
        }
        grads
    }
}

struct ChannelAvgBackward {
    c_out: usize,
}

impl<T: Real> Backward<T> for ChannelAvgBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = inputs[0].shape().0;
        let (plane, group) = (h * w, c / self.c_out);
        let inv = T::one() / T::of(group as f64);
        let mut gx = vec![T::zero(); n * c * plane];
        for b in 0..n {
            for ch in 0..c {
                let src = &grad_out[(b * self.c_out + ch / group) * plane..][..plane];
                let dst = &mut gx[(b * c + ch) * plane..][..plane];
                dst.iter_mut().zip(src).for_each(|(d, &g)| *d = g * inv);
            }
        }
        vec![Some(gx)]
    }
}

struct ChannelMaxBackward {
    argmax: Vec<u32>,
    c_out: usize,
}

impl<T: Real> Backward<T> for ChannelMaxBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = inputs[0].shape().0;
        let plane = h * w;
        let mut gx = vec![T::zero(); n * c * plane];
        for b in 0..n {
            for o in 0..self.c_out {
                let base = (b * self.c_out + o) * plane;
                for p in 0..plane {
                    let ch = self.argmax[base + p] as usize;
                    gx[(b * c + ch) * plane + p] += grad_out[base + p];
                }
            }
        }
        vec![Some(gx)]
    }
}

struct BilinearBackward {
    oh: usize,
    ow: usize,
}

impl<T: Real> Backward<T> for BilinearBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(kernels::bilinear_backward(
            grad_out,
            inputs[0].shape(),
            self.oh,
            self.ow,
        ))]
    }
}

/// Pointwise activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

struct ActivationBackward(Activation);

impl<T: Real> Backward<T> for ActivationBackward {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let one = T::one();
        let gx = match self.0 {
            Activation::Relu => inputs[0]
                .data()
                .iter()
                .zip(grad_out)
                .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            Activation::Tanh => output
                .data()
                .iter()
                .zip(grad_out)
                .map(|(&y, &g)| g * (one - y * y))
                .collect(),
            Activation::Sigmoid => output
                .data()
                .iter()
                .zip(grad_out)
                .map(|(&y, &g)| g * y * (one - y))
                .collect(),
        };
        vec![Some(gx)]
    }
}

struct AddBackward;

impl<T: Real> Backward<T> for AddBackward {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| grad_out.to_vec()),
            needs[1].then(|| grad_out.to_vec()),
        ]
    }
}

struct MulBackward;

impl<T: Real> Backward<T> for MulBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        vec![
            needs[0].then(|| b.iter().zip(grad_out).map(|(&v, &g)| v * g).collect()),
            needs[1].then(|| a.iter().zip(grad_out).map(|(&v, &g)| v * g).collect()),
        ]
    }
}

/// Inputs: gate (N,1,H,W), x (N,C,H,W).
struct GateMulBackward;

impl<T: Real> Backward<T> for GateMulBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (gate, x) = (inputs[0].data(), inputs[1].data());
        let [n, c, h, w] = inputs[1].shape().0;
        let plane = h * w;
        let g_gate = needs[0].then(|| {
            let mut gg = vec![T::zero(); n * plane];
            for b in 0..n {
                let dst = &mut gg[b * plane..][..plane];
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for p in 0..plane {
                        dst[p] += x[off + p] * grad_out[off + p];
                    }
                }
            }
            gg
        });
        let g_x = needs[1].then(|| {
            let mut gx = vec![T::zero(); n * c * plane];
            for b in 0..n {
                let gp = &gate[b * plane..][..plane];
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for p in 0..plane {
                        gx[off + p] = gp[p] * grad_out[off + p];
                    }
                }
            }
            gx
        });
        vec![g_gate, g_x]
    }
}

struct ConcatBackward {
    channels: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatBackward {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c_total, h, w] = output.shape().0;
        let plane = h * w;
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            grads.push(need.then(|| {
                let mut g = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    g.extend_from_slice(&grad_out[(b * c_total + start) * plane..][..c * plane]);
                }
                g
            }));
            start += c;
        }
        grads
    }
}

struct SliceChannelsBackward {
    start: usize,
}

impl<T: Real> Backward<T> for SliceChannelsBackward {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = inputs[0].shape().0;
        let len = output.shape().c();
        let plane = h * w;
        let mut gx = vec![T::zero(); n * c * plane];
        for b in 0..n {
            gx[(b * c + self.start) * plane..][..len * plane]
                .copy_from_slice(&grad_out[b * len * plane..][..len * plane]);
        }
        vec![Some(gx)]
    }
}

struct ChannelMeanBackward;

impl<T: Real> Backward<T> for ChannelMeanBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = inputs[0].shape().0;
        let plane = h * w;
        let inv = T::one() / T::of(c as f64);
        let mut gx = vec![T::zero(); n * c * plane];
        for b in 0..n {
            let src = &grad_out[b * plane..][..plane];
            for ch in 0..c {
                let dst = &mut gx[(b * c + ch) * plane..][..plane];
                dst.iter_mut().zip(src).for_each(|(d, &g)| *d = g * inv);
            }
        }
        vec![Some(gx)]
    }
}

struct SoftmaxBackward;

impl<T: Real> Backward<T> for SoftmaxBackward {
    fn backward(&self, _: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = output.shape().0;
        let plane = h * w;
        let y = output.data();
        let mut gx = vec![T::zero(); y.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let dot: T = (0..c)
                    .map(|ch| y[base + ch * plane + p] * grad_out[base + ch * plane + p])
                    .sum();
                for ch in 0..c {
                    let i = base + ch * plane + p;
                    gx[i] = y[i] * (grad_out[i] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

struct SumBackward;

impl<T: Real> Backward<T> for SumBackward {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad_out[0]; inputs[0].numel()])]
    }
}

struct ScaleBackward<T>(T);

impl<T: Real> Backward<T> for ScaleBackward<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad_out.iter().map(|&g| g * self.0).collect())]
    }
}

impl<T: Real> Tape<T> {
    /// 2-D convolution. `weight` is (C_out, C_in/groups, k, k); `bias`, when
    /// present, is a tensor with C_out elements.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, p: Conv2dParams) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let geom = ConvGeom::new(self.shape(x), self.shape(weight), p.stride, p.padding, p.groups)?;
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).numel() != geom.c_out {
                return Err(Error::Dimension(format!(
                    "bias has {} elements, expected {}",
                    self.value(b).numel(),
                    geom.c_out
                )));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.out_shape(), out)?;
        let bw = Conv2dBackward {
            geom,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.record("conv2d", value, &[x, weight, b], bw),
            None => self.record("conv2d", value, &[x, weight], bw),
        }
    }

    /// Averages contiguous channel groups down to `c_out` channels.
    pub fn channel_avg_pool(&mut self, x: Var, c_out: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        check_channel_groups(s, c_out)?;
        let out = kernels::channel_avg_pool(self.value(x).data(), s, c_out);
        let value = Tensor::new(s.with_c(c_out), out)?;
        self.record("channel_avg_pool", value, &[x], ChannelAvgBackward { c_out })
    }

    /// Max over contiguous channel groups down to `c_out` channels.
    pub fn channel_max_pool(&mut self, x: Var, c_out: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        check_channel_groups(s, c_out)?;
        let (out, argmax) = kernels::channel_max_pool(self.value(x).data(), s, c_out);
        let value = Tensor::new(s.with_c(c_out), out)?;
        self.record("channel_max_pool", value, &[x], ChannelMaxBackward { argmax, c_out })
    }

    /// Mean over the channel axis, producing (N,1,H,W).
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.c() == 0 {
            return Err(Error::Dimension("channel_mean of zero channels".into()));
        }
        let out = kernels::channel_avg_pool(self.value(x).data(), s, 1);
        let value = Tensor::new(s.with_c(1), out)?;
        self.record("channel_mean", value, &[x], ChannelMeanBackward)
    }

    /// Half-pixel bilinear resize with edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if oh == 0 || ow == 0 || s.h() == 0 || s.w() == 0 {
            return Err(Error::Dimension(format!("cannot resize {s} to {oh}x{ow}")));
        }
        let out = if (oh, ow) == (s.h(), s.w()) {
            self.value(x).data().to_vec()
        } else {
            kernels::bilinear_forward(self.value(x).data(), s, oh, ow)
        };
        let value = Tensor::new(Shape::new(s.n(), s.c(), oh, ow), out)?;
        self.record("bilinear_resize", value, &[x], BilinearBackward { oh, ow })
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Result<Var> {
        self.check(x)?;
        let value = match f {
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::Tanh => self.value(x).map(T::tanh),
            Activation::Sigmoid => self.value(x).map(kernels::stable_sigmoid),
        };
        let name = match f {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        };
        self.record(name, value, &[x], ActivationBackward(f))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("add: {sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(sa, data)?;
        self.record("add", value, &[a, b], AddBackward)
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("mul: {sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa, data)?;
        self.record("mul", value, &[a, b], MulBackward)
    }

    /// Multiplies every channel of `x` (N,C,H,W) by a one-channel `gate` (N,1,H,W).
    pub fn mul_broadcast(&mut self, gate: Var, x: Var) -> Result<Var> {
        self.check(gate)?;
        self.check(x)?;
        let (sg, sx) = (self.shape(gate), self.shape(x));
        if sg.c() != 1 || sg.with_c(sx.c()) != sx {
            return Err(Error::Dimension(format!(
                "mul_broadcast: gate {sg} cannot scale {sx}"
            )));
        }
        let plane = sx.plane();
        let (gd, xd) = (self.value(gate).data(), self.value(x).data());
        let mut out = vec![T::zero(); sx.numel()];
        for b in 0..sx.n() {
            let gp = &gd[b * plane..][..plane];
            for ch in 0..sx.c() {
                let off = (b * sx.c() + ch) * plane;
                for p in 0..plane {
                    out[off + p] = gp[p] * xd[off + p];
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        self.record("mul_broadcast", value, &[gate, x], GateMulBackward)
    }

    /// Concatenates along channels, preserving operand order.
    pub fn concat_channel(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        for &v in xs {
            self.check(v)?;
        }
        let s0 = self.shape(first);
        let mut channels = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if (s.n(), s.h(), s.w()) != (s0.n(), s0.h(), s0.w()) {
                return Err(Error::Dimension(format!("concat: {s} vs {s0}")));
            }
            channels.push(s.c());
        }
        let c_total: usize = channels.iter().sum();
        let plane = s0.plane();
        let mut out = Vec::with_capacity(s0.n() * c_total * plane);
        for b in 0..s0.n() {
            for (&v, &c) in xs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[b * c * plane..][..c * plane]);
            }
        }
        let value = Tensor::new(s0.with_c(c_total), out)?;
        self.record("concat_channel", value, xs, ConcatBackward { channels })
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if len == 0 || start + len > s.c() {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for {s}",
                start + len
            )));
        }
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.n() * len * plane);
        for b in 0..s.n() {
            out.extend_from_slice(&self.value(x).data()[(b * s.c() + start) * plane..][..len * plane]);
        }
        let value = Tensor::new(s.with_c(len), out)?;
        self.record("slice_channels", value, &[x], SliceChannelsBackward { start })
    }

    /// Per-pixel softmax over channels.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.c() < 2 {
            return Err(Error::Dimension(format!("softmax needs C >= 2, got {s}")));
        }
        let value = Tensor::new(s, kernels::softmax_channel(self.value(x).data(), s))?;
        self.record("softmax_channel", value, &[x], SoftmaxBackward)
    }

    /// Sum of all elements as a (1,1,1,1) tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total: T = self.value(x).data().iter().copied().sum();
        self.record("sum", Tensor::scalar(total), &[x], SumBackward)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(|v| v * k);
        self.record("scale", value, &[x], ScaleBackward(k))
    }
}

fn check_channel_groups(s: Shape, c_out: usize) -> Result<()> {
    if c_out == 0 || !s.c().is_multiple_of(c_out) {
        return Err(Error::Config(format!(
            "channel pooling from {} to {c_out} channels needs an exact divisor",
            s.c()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_conv_is_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(t(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]));
        let w = tape.leaf(t(Shape::new(1, 1, 1, 1), &[2.]));
        let b = tape.leaf(t(Shape::new(1, 1, 1, 1), &[1.]));
        let y = tape.conv2d(x, w, Some(b), Conv2dParams::default()).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 5., 7., 9.]);
    }

    #[test]
    fn padded_box_filter_counts_overlap() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64));
        let w = tape.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let p = Conv2dParams {
            padding: 1,
            ..Default::default()
        };
        let y = tape.conv2d(x, w, None, p).unwrap();
        assert_eq!(tape.value(y).data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn conv_rejects_bad_groups_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let w = tape.constant(Tensor::zeros(Shape::new(4, 1, 3, 3)));
        let err = tape
            .conv2d(x, w, None, Conv2dParams { groups: 2, ..Default::default() })
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let w = tape.constant(Tensor::zeros(Shape::new(4, 2, 3, 3)));
        let err = tape.conv2d(x, w, None, Conv2dParams::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
        let w = tape.constant(Tensor::zeros(Shape::new(4, 3, 7, 7)));
        let err = tape.conv2d(x, w, None, Conv2dParams::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }

    #[test]
    fn channel_pools_group_contiguously() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 4, 1, 1), &[1., 3., 5., 7.]));
        let avg = tape.channel_avg_pool(x, 2).unwrap();
        let max = tape.channel_max_pool(x, 2).unwrap();
        assert_eq!(tape.value(avg).data(), &[2., 6.]);
        assert_eq!(tape.value(max).data(), &[3., 7.]);
        let same = tape.channel_avg_pool(x, 4).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        assert!(matches!(tape.channel_avg_pool(x, 3), Err(Error::Config(_))));
        assert!(matches!(tape.channel_max_pool(x, 0), Err(Error::Config(_))));
    }

    #[test]
    fn max_pool_ties_route_to_first_channel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 4, 1, 1), 2.0f64));
        let m = tape.channel_max_pool(x, 2).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 0., 1., 0.]);
    }

    #[test]
    fn channel_mean_small_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(Shape::new(1, 2, 1, 1), &[1., 3.]));
        let m = tape.channel_mean(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.]);
        let y = tape.constant(t(Shape::new(1, 1, 1, 3), &[1., -2., 5.]));
        let m = tape.channel_mean(y).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(y).data());
    }

    #[test]
    fn bilinear_half_pixel_upsample() {
        let mut tape = Tape::new();
        let x = tape.constant(t(Shape::new(1, 1, 1, 2), &[0., 2.]));
        let y = tape.bilinear_resize(x, 1, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0.5, 1.5, 2.0]);
    }

    #[test]
    fn bilinear_identity_and_constants() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.37 - 1.0).collect();
        let x = tape.constant(Tensor::new(Shape::new(1, 1, 3, 4), data.clone()).unwrap());
        let y = tape.bilinear_resize(x, 3, 4).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        let c = tape.constant(Tensor::full(Shape::new(2, 3, 3, 5), 0.731f32));
        for (oh, ow) in [(7, 2), (1, 1), (12, 20)] {
            let r = tape.bilinear_resize(c, oh, ow).unwrap();
            assert!(tape.value(r).data().iter().all(|&v| v == 0.731));
        }
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let th = tape.tanh(z).unwrap();
        assert!(tape.value(th).data().iter().all(|&v| v == 0.0f64));
        let sg = tape.sigmoid(z).unwrap();
        assert!(tape.value(sg).data().iter().all(|&v| v == 0.5));

        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 1, 3), &[2.0, -1.0, 0.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_doubles_channels_and_shape_checks() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 8, 4, 4)));
        let c = tape.concat_channel(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), Shape::new(1, 16, 4, 4));
        let d = tape.constant(Tensor::zeros(Shape::new(1, 8, 2, 4)));
        assert!(matches!(tape.concat_channel(&[a, d]), Err(Error::Dimension(_))));
        assert!(matches!(tape.add(a, d), Err(Error::Dimension(_))));
        let gate = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        assert!(matches!(tape.mul_broadcast(gate, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_gate_zeroes_output() {
        let mut tape = Tape::new();
        let gate = tape.constant(Tensor::zeros(Shape::new(2, 1, 3, 3)));
        let x = tape.constant(Tensor::from_fn(Shape::new(2, 4, 3, 3), |i| i as f32 - 20.0));
        let y = tape.mul_broadcast(gate, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_backward_spreads_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(Shape::new(1, 2, 2, 2), |i| i as f64));
        let b = tape.leaf(Tensor::full(Shape::new(1, 2, 2, 2), -3.0));
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).unwrap().data().iter().all(|&g| g == 1.0));
        assert!(tape.grad(b).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        let p = tape.softmax_channel(x).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5f64));
        let one = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.softmax_channel(one).is_err());
    }

    #[test]
    fn backward_rules() {
        // loss = sum(w * x), x constant: grad(w) = x
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(Shape::new(1, 3, 2, 1), |i| i as f64 * 0.5 - 1.0);
        let x = tape.constant(xv.clone());
        let w = tape.leaf(Tensor::full(xv.shape(), 2.0));
        let unused = tape.leaf(Tensor::full(xv.shape(), 1.0));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), xv);
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(unused).is_none());
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
        tape.reset_grads();
        tape.backward(loss).unwrap();

        let mut other = Tape::<f64>::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(foreign), Err(Error::Usage(_))));
        let mut empty = Tape::<f64>::new();
        assert!(matches!(empty.backward(foreign), Err(Error::Usage(_))));
        assert!(matches!(tape.backward(wx), Err(Error::Usage(_)) | Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_then_slice_recovers_operands() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(Shape::new(2, 3, 2, 2), |i| (i as f32).sin()));
        let b = tape.constant(Tensor::from_fn(Shape::new(2, 5, 2, 2), |i| (i as f32).cos()));
        let c = tape.concat_channel(&[a, b]).unwrap();
        let a2 = tape.slice_channels(c, 0, 3).unwrap();
        let b2 = tape.slice_channels(c, 3, 5).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(Shape::scalar(), f32::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }
}

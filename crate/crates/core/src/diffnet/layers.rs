//! The fixed layer set.
//!
//! Image-like tensors are `C x H x W` (one sample). `Linear` acts on the last
//! axis of any tensor. `SinusoidalTimeEmbed` appends an embedding axis.
//! Parameters of a layer are listed in a fixed order (see [`Layer::params`])
//! and [`layer_backward`] returns gradients in that same order.

use super::gemm::{gemm, gemm_new};
use super::param::Param;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const GN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 convolution, zero padding 1, stride 1 or 2.
    Conv3x3 {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
    /// Nearest-neighbour 2x upsampling followed by a stride-1 3x3 convolution.
    Upsample2xConv3x3 { in_ch: usize, out_ch: usize },
    GroupNorm { channels: usize, groups: usize },
    Silu,
    Relu,
    Tanh,
    /// Scales each location's channel vector to unit length
    /// (`x / max(|x|, 1e-8)`).
    ChannelL2Norm,
    Linear { in_dim: usize, out_dim: usize },
    /// `[.., 2i] = sin(t w_i)`, `[.., 2i+1] = cos(t w_i)`, `w_i = 10000^(-i / (dim/2))`.
    SinusoidalTimeEmbed { dim: usize },
    /// `x + conv2(silu(gn2(conv1(silu(gn1(x))) + proj(aux))))`; the projection
    /// exists only when `temb_dim` is set, and then `aux` is required.
    ResidualBlock {
        channels: usize,
        groups: usize,
        temb_dim: Option<usize>,
    },
}

/// A layer: its kind plus owned parameters.
#[derive(Clone, Debug)]
pub struct Layer {
    kind: LayerKind,
    params: Vec<Param>,
    children: Vec<Layer>,
}

/// Values saved by the forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Conv {
        cols: Vec<f64>,
        in_dims: [usize; 3],
        out_hw: (usize, usize),
    },
    Upsample {
        cols: Vec<f64>,
        in_dims: [usize; 3],
    },
    GroupNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        dims: [usize; 3],
    },
    Activation {
        input: Tensor,
    },
    Silu {
        input: Tensor,
        sig: Vec<f64>,
    },
    Tanh {
        output: Tensor,
    },
    L2Norm {
        output: Tensor,
        norms: Vec<f64>,
    },
    Linear {
        input: Tensor,
    },
    Time {
        input: Tensor,
    },
    Residual(Box<ResidualCache>),
}

#[derive(Clone, Debug)]
pub struct ResidualCache {
    gn1: Cache,
    act1: Cache,
    conv1: Cache,
    proj: Option<Cache>,
    gn2: Cache,
    act2: Cache,
    conv2: Cache,
}

/// Gradients from one backward call.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub input: Tensor,
    /// One tensor per parameter, in [`Layer::params`] order.
    pub params: Vec<Tensor>,
    pub aux: Option<Tensor>,
}

fn uniform_tensor(dims: &[usize], bound: f64, rng: &mut RngStream) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(dims, data).expect("dims product matches data length")
}

fn check_groups(channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || channels == 0 || channels % groups != 0 {
        return Err(Error::invalid(
            "groups",
            format!("{groups} groups do not divide {channels} channels"),
        ));
    }
    Ok(())
}

impl Layer {
    /// Creates a layer with PyTorch-style uniform initialisation
    /// (`U(-1/sqrt(fan_in), 1/sqrt(fan_in))`), unit norm scales and zero shifts.
    pub fn new(kind: LayerKind, rng: &mut RngStream) -> Result<Self> {
        let mut params = Vec::new();
        let mut children = Vec::new();
        match kind {
            LayerKind::Conv3x3 {
                in_ch,
                out_ch,
                stride,
            } => {
                if stride != 1 && stride != 2 {
                    return Err(Error::invalid("stride", format!("must be 1 or 2, got {stride}")));
                }
                let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
                params.push(Param::new(uniform_tensor(&[out_ch, in_ch, 3, 3], bound, rng)));
                params.push(Param::new(uniform_tensor(&[out_ch], bound, rng)));
            }
            LayerKind::Upsample2xConv3x3 { in_ch, out_ch } => {
                let bound = 1.0 / ((in_ch * 9) as f64).sqrt();
                params.push(Param::new(uniform_tensor(&[out_ch, in_ch, 3, 3], bound, rng)));
                params.push(Param::new(uniform_tensor(&[out_ch], bound, rng)));
            }
            LayerKind::GroupNorm { channels, groups } => {
                check_groups(channels, groups)?;
                params.push(Param::new(Tensor::full(&[channels], 1.0)));
                params.push(Param::new(Tensor::zeros(&[channels])));
            }
            LayerKind::Linear { in_dim, out_dim } => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                params.push(Param::new(uniform_tensor(&[out_dim, in_dim], bound, rng)));
                params.push(Param::new(uniform_tensor(&[out_dim], bound, rng)));
            }
            LayerKind::SinusoidalTimeEmbed { dim } => {
                if dim == 0 || dim % 2 != 0 {
                    return Err(Error::invalid("dim", format!("must be even and positive, got {dim}")));
                }
            }
            LayerKind::Silu | LayerKind::Relu | LayerKind::Tanh | LayerKind::ChannelL2Norm => {}
            LayerKind::ResidualBlock {
                channels,
                groups,
                temb_dim,
            } => {
                check_groups(channels, groups)?;
                let gn = LayerKind::GroupNorm { channels, groups };
                let conv = LayerKind::Conv3x3 {
                    in_ch: channels,
                    out_ch: channels,
                    stride: 1,
                };
                children.push(Layer::new(gn, rng)?);
                children.push(Layer::new(conv, rng)?);
                children.push(Layer::new(gn, rng)?);
                children.push(Layer::new(conv, rng)?);
                if let Some(td) = temb_dim {
                    children.push(Layer::new(
                        LayerKind::Linear {
                            in_dim: td,
                            out_dim: channels,
                        },
                        rng,
                    )?);
                }
            }
        }
        Ok(Self {
            kind,
            params,
            children,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    /// All parameters, depth first.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.params.iter().collect();
        for c in &self.children {
            out.extend(c.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.params.iter_mut().collect();
        for c in &mut self.children {
            out.extend(c.params_mut());
        }
        out
    }

    pub fn accumulate(&mut self, grads: &[Tensor]) -> Result<()> {
        let mut ps = self.params_mut();
        if ps.len() != grads.len() {
            return Err(Error::invalid(
                "grads",
                format!("expected {} parameter gradients, got {}", ps.len(), grads.len()),
            ));
        }
        for (p, g) in ps.iter_mut().zip(grads) {
            p.accumulate(g)?;
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, aux: Option<&Tensor>) -> Result<(Tensor, Cache)> {
        match self.kind {
            LayerKind::Conv3x3 {
                in_ch,
                out_ch,
                stride,
            } => {
                let (c, h, w) = input.chw()?;
                expect_channels(c, in_ch)?;
                let (ho, wo) = conv_out_hw(h, w, stride);
                let cols = im2col(input.data(), c, h, w, stride, ho, wo);
                let out = conv_from_cols(&cols, &self.params[0].value, &self.params[1].value, out_ch, c, ho * wo);
                Ok((
                    Tensor::new(&[out_ch, ho, wo], out)?,
                    Cache::Conv {
                        cols,
                        in_dims: [c, h, w],
                        out_hw: (ho, wo),
                    },
                ))
            }
            LayerKind::Upsample2xConv3x3 { in_ch, out_ch } => {
                let (c, h, w) = input.chw()?;
                expect_channels(c, in_ch)?;
                let up = upsample2x(input.data(), c, h, w);
                let (h2, w2) = (2 * h, 2 * w);
                let cols = im2col(&up, c, h2, w2, 1, h2, w2);
                let out = conv_from_cols(&cols, &self.params[0].value, &self.params[1].value, out_ch, c, h2 * w2);
                Ok((
                    Tensor::new(&[out_ch, h2, w2], out)?,
                    Cache::Upsample {
                        cols,
                        in_dims: [c, h, w],
                    },
                ))
            }
            LayerKind::GroupNorm { channels, groups } => {
                let (c, h, w) = input.chw()?;
                expect_channels(c, channels)?;
                let (out, xhat, inv_std) = group_norm_forward(
                    input.data(),
                    c,
                    h * w,
                    groups,
                    self.params[0].value.data(),
                    self.params[1].value.data(),
                );
                Ok((
                    Tensor::new(&[c, h, w], out)?,
                    Cache::GroupNorm {
                        xhat,
                        inv_std,
                        dims: [c, h, w],
                    },
                ))
            }
            LayerKind::Silu => {
                let sig: Vec<f64> = input.data().iter().map(|&x| sigmoid(x)).collect();
                let y = input.data().iter().zip(&sig).map(|(x, s)| x * s).collect();
                Ok((
                    Tensor::new(input.dims(), y)?,
                    Cache::Silu {
                        input: input.clone(),
                        sig,
                    },
                ))
            }
            LayerKind::Relu => Ok((
                input.map(|x| x.max(0.0)),
                Cache::Activation {
                    input: input.clone(),
                },
            )),
            LayerKind::Tanh => {
                let out = input.map(f64::tanh);
                Ok((out.clone(), Cache::Tanh { output: out }))
            }
            LayerKind::ChannelL2Norm => {
                let (c, h, w) = input.chw()?;
                let hw = h * w;
                let x = input.data();
                let norms: Vec<f64> = (0..hw)
                    .map(|p| (0..c).map(|ch| x[ch * hw + p].powi(2)).sum::<f64>().sqrt().max(L2_EPS))
                    .collect();
                let out: Vec<f64> = x.iter().enumerate().map(|(i, v)| v / norms[i % hw]).collect();
                let output = Tensor::new(&[c, h, w], out)?;
                Ok((output.clone(), Cache::L2Norm { output, norms }))
            }
            LayerKind::Linear { in_dim, out_dim } => {
                let last = *input.dims().last().expect("tensor has at least one axis");
                if last != in_dim {
                    return Err(Error::invalid(
                        "input",
                        format!("linear expects last axis {in_dim}, got dims {:?}", input.dims()),
                    ));
                }
                let rows = input.len() / in_dim;
                let mut out = Vec::with_capacity(rows * out_dim);
                for _ in 0..rows {
                    out.extend_from_slice(self.params[1].value.data());
                }
                // out (rows x out) += x (rows x in) * W^T
                gemm(rows, in_dim, out_dim, input.data(), false, self.params[0].value.data(), true, 1.0, &mut out);
                let mut dims = input.dims().to_vec();
                *dims.last_mut().expect("non-empty") = out_dim;
                Ok((
                    Tensor::new(&dims, out)?,
                    Cache::Linear {
                        input: input.clone(),
                    },
                ))
            }
            LayerKind::SinusoidalTimeEmbed { dim } => {
                let half = dim / 2;
                let mut out = Vec::with_capacity(input.len() * dim);
                for &t in input.data() {
                    for i in 0..half {
                        let a = t * time_freq(i, half);
                        out.push(a.sin());
                        out.push(a.cos());
                    }
                }
                let mut dims = input.dims().to_vec();
                dims.push(dim);
                Ok((
                    Tensor::new(&dims, out)?,
                    Cache::Time {
                        input: input.clone(),
                    },
                ))
            }
            LayerKind::ResidualBlock { temb_dim, .. } => {
                let [gn1, conv1, gn2, conv2] = [&self.children[0], &self.children[1], &self.children[2], &self.children[3]];
                let (h, c_gn1) = gn1.forward(input, None)?;
                let (h, c_act1) = silu_layer().forward(&h, None)?;
                let (mut h, c_conv1) = conv1.forward(&h, None)?;
                let proj = match temb_dim {
                    Some(td) => {
                        let aux = aux.ok_or_else(|| {
                            Error::invalid("aux", "residual block with time embedding needs aux input")
                        })?;
                        if aux.len() != td {
                            return Err(Error::invalid(
                                "aux",
                                format!("expected {td} embedding values, got {}", aux.len()),
                            ));
                        }
                        let flat = aux.clone().reshape(&[td])?;
                        let (p, c_proj) = self.children[4].forward(&flat, None)?;
                        add_channel_bias(&mut h, p.data())?;
                        Some(c_proj)
                    }
                    None => None,
                };
                let (h, c_gn2) = gn2.forward(&h, None)?;
                let (h, c_act2) = silu_layer().forward(&h, None)?;
                let (h, c_conv2) = conv2.forward(&h, None)?;
                let out = input.add(&h)?;
                Ok((
                    out,
                    Cache::Residual(Box::new(ResidualCache {
                        gn1: c_gn1,
                        act1: c_act1,
                        conv1: c_conv1,
                        proj,
                        gn2: c_gn2,
                        act2: c_act2,
                        conv2: c_conv2,
                    })),
                ))
            }
        }
    }

    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<LayerGrads> {
        match (self.kind, cache) {
            (
                LayerKind::Conv3x3 { in_ch, out_ch, stride },
                Cache::Conv {
                    cols,
                    in_dims,
                    out_hw,
                },
            ) => {
                let [c, h, w] = *in_dims;
                let (ho, wo) = *out_hw;
                expect_grad_dims(grad_out, &[out_ch, ho, wo])?;
                if c != in_ch {
                    return Err(mismatched_cache());
                }
                let (dw, db, dcols) = conv_backward_cols(cols, &self.params[0].value, grad_out.data(), out_ch, c, ho * wo);
                let dx = col2im(&dcols, c, h, w, stride, ho, wo);
                Ok(LayerGrads {
                    input: Tensor::new(&[c, h, w], dx)?,
                    params: vec![Tensor::new(&[out_ch, c, 3, 3], dw)?, Tensor::new(&[out_ch], db)?],
                    aux: None,
                })
            }
            (LayerKind::Upsample2xConv3x3 { in_ch, out_ch }, Cache::Upsample { cols, in_dims }) => {
                let [c, h, w] = *in_dims;
                if c != in_ch {
                    return Err(mismatched_cache());
                }
                let (h2, w2) = (2 * h, 2 * w);
                expect_grad_dims(grad_out, &[out_ch, h2, w2])?;
                let (dw, db, dcols) = conv_backward_cols(cols, &self.params[0].value, grad_out.data(), out_ch, c, h2 * w2);
                let dup = col2im(&dcols, c, h2, w2, 1, h2, w2);
                let dx = downsample_sum2x(&dup, c, h, w);
                Ok(LayerGrads {
                    input: Tensor::new(&[c, h, w], dx)?,
                    params: vec![Tensor::new(&[out_ch, c, 3, 3], dw)?, Tensor::new(&[out_ch], db)?],
                    aux: None,
                })
            }
            (LayerKind::GroupNorm { channels, groups }, Cache::GroupNorm { xhat, inv_std, dims }) => {
                let [c, h, w] = *dims;
                if c != channels {
                    return Err(mismatched_cache());
                }
                expect_grad_dims(grad_out, &[c, h, w])?;
                let (dx, dgamma, dbeta) = group_norm_backward(
                    grad_out.data(),
                    xhat,
                    inv_std,
                    c,
                    h * w,
                    groups,
                    self.params[0].value.data(),
                );
                Ok(LayerGrads {
                    input: Tensor::new(&[c, h, w], dx)?,
                    params: vec![Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?],
                    aux: None,
                })
            }
            (LayerKind::Silu, Cache::Silu { input, sig }) => {
                input.same_dims(grad_out, "grad_out")?;
                let dx: Vec<f64> = input
                    .data()
                    .iter()
                    .zip(sig)
                    .zip(grad_out.data())
                    .map(|((x, s), g)| g * s * (1.0 + x * (1.0 - s)))
                    .collect();
                let dx = Tensor::new(input.dims(), dx)?;
                Ok(LayerGrads {
                    input: dx,
                    params: vec![],
                    aux: None,
                })
            }
            (LayerKind::Relu, Cache::Activation { input }) => {
                let dx = input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })?;
                Ok(LayerGrads {
                    input: dx,
                    params: vec![],
                    aux: None,
                })
            }
            (LayerKind::Tanh, Cache::Tanh { output }) => {
                let dx = output.zip_map(grad_out, |y, g| g * (1.0 - y * y))?;
                Ok(LayerGrads {
                    input: dx,
                    params: vec![],
                    aux: None,
                })
            }
            (LayerKind::ChannelL2Norm, Cache::L2Norm { output, norms }) => {
                let (c, h, w) = output.chw()?;
                expect_grad_dims(grad_out, &[c, h, w])?;
                let hw = h * w;
                let (y, g) = (output.data(), grad_out.data());
                let mut dx = vec![0.0; y.len()];
                for p in 0..hw {
                    let n = norms[p];
                    if n > L2_EPS {
                        let gy: f64 = (0..c).map(|ch| g[ch * hw + p] * y[ch * hw + p]).sum();
                        for ch in 0..c {
                            let i = ch * hw + p;
                            dx[i] = (g[i] - y[i] * gy) / n;
                        }
                    } else {
                        for ch in 0..c {
                            dx[ch * hw + p] = g[ch * hw + p] / n;
                        }
                    }
                }
                Ok(LayerGrads {
                    input: Tensor::new(&[c, h, w], dx)?,
                    params: vec![],
                    aux: None,
                })
            }
            (LayerKind::Linear { in_dim, out_dim }, Cache::Linear { input }) => {
                let rows = input.len() / in_dim;
                if grad_out.len() != rows * out_dim {
                    return Err(mismatched_cache());
                }
                let g = grad_out.data();
                let mut dx = vec![0.0; rows * in_dim];
                gemm(rows, out_dim, in_dim, g, false, self.params[0].value.data(), false, 0.0, &mut dx);
                let mut dw = vec![0.0; out_dim * in_dim];
                gemm(out_dim, rows, in_dim, g, true, input.data(), false, 0.0, &mut dw);
                let mut db = vec![0.0; out_dim];
                for r in 0..rows {
                    for (o, b) in db.iter_mut().enumerate() {
                        *b += g[r * out_dim + o];
                    }
                }
                Ok(LayerGrads {
                    input: Tensor::new(input.dims(), dx)?,
                    params: vec![Tensor::new(&[out_dim, in_dim], dw)?, Tensor::new(&[out_dim], db)?],
                    aux: None,
                })
            }
            (LayerKind::SinusoidalTimeEmbed { dim }, Cache::Time { input }) => {
                if grad_out.len() != input.len() * dim {
                    return Err(mismatched_cache());
                }
                let half = dim / 2;
                let g = grad_out.data();
                let dx = input
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| {
                        (0..half)
                            .map(|i| {
                                let f = time_freq(i, half);
                                let a = t * f;
                                g[k * dim + 2 * i] * f * a.cos() - g[k * dim + 2 * i + 1] * f * a.sin()
                            })
                            .sum()
                    })
                    .collect();
                Ok(LayerGrads {
                    input: Tensor::new(input.dims(), dx)?,
                    params: vec![],
                    aux: None,
                })
            }
            (LayerKind::ResidualBlock { temb_dim, .. }, Cache::Residual(rc)) => {
                let silu = silu_layer();
                let g_conv2 = self.children[3].backward(&rc.conv2, grad_out)?;
                let g_act2 = silu.backward(&rc.act2, &g_conv2.input)?;
                let g_gn2 = self.children[2].backward(&rc.gn2, &g_act2.input)?;
                let (g_proj, aux_grad) = match (temb_dim, &rc.proj) {
                    (Some(td), Some(pc)) => {
                        let dp = channel_sums(&g_gn2.input)?;
                        let gp = self.children[4].backward(pc, &dp)?;
                        let aux = gp.input.clone().reshape(&[td])?;
                        (Some(gp), Some(aux))
                    }
                    (None, None) => (None, None),
                    _ => return Err(mismatched_cache()),
                };
                let g_conv1 = self.children[1].backward(&rc.conv1, &g_gn2.input)?;
                let g_act1 = silu.backward(&rc.act1, &g_conv1.input)?;
                let g_gn1 = self.children[0].backward(&rc.gn1, &g_act1.input)?;
                let input = g_gn1.input.add(grad_out)?;
                let mut params = Vec::new();
                params.extend(g_gn1.params);
                params.extend(g_conv1.params);
                params.extend(g_gn2.params);
                params.extend(g_conv2.params);
                if let Some(gp) = g_proj {
                    params.extend(gp.params);
                }
                Ok(LayerGrads {
                    input,
                    params,
                    aux: aux_grad,
                })
            }
            _ => Err(mismatched_cache()),
        }
    }
}

/// Runs `layer` forward.
pub fn layer_forward(layer: &Layer, input: &Tensor, aux: Option<&Tensor>) -> Result<(Tensor, Cache)> {
    layer.forward(input, aux)
}

/// Runs `layer` backward from a cache produced by [`layer_forward`].
pub fn layer_backward(layer: &Layer, cache: &Cache, output_grad: &Tensor) -> Result<LayerGrads> {
    layer.backward(cache, output_grad)
}

fn silu_layer() -> Layer {
    Layer {
        kind: LayerKind::Silu,
        params: vec![],
        children: vec![],
    }
}

fn mismatched_cache() -> Error {
    Error::invalid("cache", "cache does not match this layer")
}

fn expect_channels(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(
            "input",
            format!("expected {want} channels, got {got}"),
        ));
    }
    Ok(())
}

fn expect_grad_dims(g: &Tensor, dims: &[usize]) -> Result<()> {
    if g.dims() != dims {
        return Err(Error::invalid(
            "output_grad",
            format!("expected dims {dims:?}, got {:?}", g.dims()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn time_freq(i: usize, half: usize) -> f64 {
    (-(10000f64.ln()) * i as f64 / half as f64).exp()
}

fn conv_out_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h - 1) / stride + 1, (w - 1) / stride + 1)
}

/// Rows are `(ci, ky, kx)`, columns are output positions.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) -> Vec<f64> {
    // every element is pushed exactly once, so no zero-filled allocation
    let mut cols = Vec::with_capacity(c * 9 * ho * wo);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        cols.extend(std::iter::repeat(0.0).take(wo));
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // ix = ox + kx - 1
                        if kx == 0 {
                            cols.push(0.0);
                            cols.extend_from_slice(&src[..wo - 1]);
                        } else if kx == 1 {
                            cols.extend_from_slice(&src[..wo]);
                        } else {
                            cols.extend_from_slice(&src[1..wo]);
                            cols.push(0.0);
                        }
                    } else {
                        cols.extend((0..wo).map(|ox| {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            }
                        }));
                    }
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), c * 9 * ho * wo);
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        let lo = if kx == 0 { 1 } else { 0 };
                        let hi = if kx == 2 { wo - 1 } else { wo };
                        for ox in lo..hi {
                            dst[ox + kx - 1] += src[ox];
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_from_cols(cols: &[f64], weight: &Tensor, bias: &Tensor, out_ch: usize, in_ch: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_ch * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat(b).take(n));
    }
    gemm(out_ch, in_ch * 9, n, weight.data(), false, cols, false, 1.0, &mut out);
    out
}

/// Returns `(dW, db, dcols)`.
fn conv_backward_cols(
    cols: &[f64],
    weight: &Tensor,
    g: &[f64],
    out_ch: usize,
    in_ch: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = in_ch * 9;
    let dw = gemm_new(out_ch, n, k, g, false, cols, true);
    let db = g.chunks(n).map(|r| r.iter().sum()).collect();
    let dcols = gemm_new(k, out_ch, n, weight.data(), true, g, false);
    (dw, db, dcols)
}

fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ci in 0..c {
        for y in 0..h2 {
            let src = &x[ci * h * w + (y / 2) * w..][..w];
            let dst = &mut out[ci * h2 * w2 + y * w2..][..w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

fn downsample_sum2x(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h2 {
            let src = &g[ci * h2 * w2 + y * w2..][..w2];
            let dst = &mut out[ci * h * w + (y / 2) * w..][..w];
            for (xx, s) in src.iter().enumerate() {
                dst[xx / 2] += s;
            }
        }
    }
    out
}

fn group_norm_forward(
    x: &[f64],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let n = (cg * hw) as f64;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * cg * hw..(g + 1) * cg * hw;
        let xs = &x[span.clone()];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + GN_EPS).sqrt();
        inv_std.push(is);
        for (i, &v) in xs.iter().enumerate() {
            let ch = g * cg + i / hw;
            let xh = (v - mean) * is;
            xhat[span.start + i] = xh;
            out[span.start + i] = gamma[ch] * xh + beta[ch];
        }
    }
    (out, xhat, inv_std)
}

fn group_norm_backward(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let n = (cg * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        for i in ch * hw..(ch + 1) * hw {
            dgamma[ch] += g[i] * xhat[i];
            dbeta[ch] += g[i];
        }
    }
    let mut dx = vec![0.0; g.len()];
    for grp in 0..groups {
        let span = grp * cg * hw..(grp + 1) * cg * hw;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for i in span.clone() {
            let d = g[i] * gamma[i / hw];
            sum_d += d;
            sum_dx += d * xhat[i];
        }
        let is = inv_std[grp];
        for i in span {
            let d = g[i] * gamma[i / hw];
            dx[i] = is / n * (n * d - sum_d - xhat[i] * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

fn add_channel_bias(t: &mut Tensor, bias: &[f64]) -> Result<()> {
    let (c, h, w) = t.chw()?;
    if bias.len() != c {
        return Err(Error::invalid("aux", "projection width differs from channel count"));
    }
    for (ch, plane) in t.data_mut().chunks_mut(h * w).enumerate() {
        plane.iter_mut().for_each(|v| *v += bias[ch]);
    }
    Ok(())
}

fn channel_sums(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let sums = t.data().chunks(h * w).map(|p| p.iter().sum()).collect();
    Tensor::new(&[c], sums)
}

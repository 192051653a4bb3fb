//! Convolution (cross-correlation), per-pixel channel maps, and instance
//! normalization, with their tape registrations.
//!
//! The 3x3 stride-1 convolution dominates training cost, so the forward and
//! backward kernels keep their inner loops over contiguous row slices.

use super::tape::Var;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::dim("convolution stride must be positive"));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::dim(format!(
            "kernel size {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_shapes(x: Shape, w: Shape, bias: Option<Shape>) -> Result<()> {
    if x.c() != w.c() {
        return Err(Error::dim(format!(
            "input channels {} do not match kernel input channels {}",
            x.c(),
            w.c()
        )));
    }
    if let Some(bs) = bias {
        if bs.numel() != w.b() {
            return Err(Error::dim(format!(
                "bias of {} elements does not match {} output channels",
                bs.numel(),
                w.b()
            )));
        }
    }
    Ok(())
}

/// Cross-correlation with zero padding. `w` is (Cout, Cin, KH, KW),
/// `bias` has Cout elements.
pub fn conv2d_raw(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    check_conv_shapes(xs, ws, bias.map(|b| b.shape()))?;
    let (bsz, ci, h, wd) = (xs.b(), xs.c(), xs.h(), xs.w());
    let (co, kh, kw) = (ws.b(), ws.h(), ws.w());
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(wd, kw, stride, pad)?;
    let out_shape = Shape::new(bsz, co, oh, ow);
    let mut out = vec![0.0; out_shape.numel()];
    let xd = x.data();
    let wdat = w.data();
    for b in 0..bsz {
        for o in 0..co {
            let obase = (b * co + o) * oh * ow;
            if let Some(bias) = bias {
                let bv = bias.data()[o];
                out[obase..obase + oh * ow].fill(bv);
            }
            for c in 0..ci {
                let xbase = (b * ci + c) * h * wd;
                let wbase = (o * ci + c) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[wbase + ky * kw + kx];
                        // Output rows whose sampled input row stays in bounds.
                        let oy_lo = pad.saturating_sub(ky).div_ceil(stride);
                        for oy in oy_lo..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let orow = obase + oy * ow;
                            let xrow = xbase + iy * wd;
                            if stride == 1 {
                                let ox_lo = pad.saturating_sub(kx);
                                let ox_hi = (wd + pad - kx).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - pad;
                                let dst = &mut out[orow + ox_lo..orow + ox_hi];
                                let src = &xd[xrow + ix_lo..xrow + ix_lo + (ox_hi - ox_lo)];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    out[orow + ox] += wv * xd[xrow + ix - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Gradient of `conv2d_raw` with respect to the input.
pub(crate) fn conv2d_grad_input(
    g: &Tensor,
    w: &Tensor,
    x_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (gs, ws) = (g.shape(), w.shape());
    let (bsz, ci, h, wd) = (x_shape.b(), x_shape.c(), x_shape.h(), x_shape.w());
    let (co, kh, kw) = (ws.b(), ws.h(), ws.w());
    let (oh, ow) = (gs.h(), gs.w());
    let mut dx = vec![0.0; x_shape.numel()];
    let gd = g.data();
    let wdat = w.data();
    for b in 0..bsz {
        for o in 0..co {
            let gbase = (b * co + o) * oh * ow;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * wd;
                let wbase = (o * ci + c) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[wbase + ky * kw + kx];
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let grow = gbase + oy * ow;
                            let xrow = xbase + iy * wd;
                            if stride == 1 {
                                let ox_lo = pad.saturating_sub(kx);
                                let ox_hi = (wd + pad - kx).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - pad;
                                let dst = &mut dx[xrow + ix_lo..xrow + ix_lo + (ox_hi - ox_lo)];
                                let src = &gd[grow + ox_lo..grow + ox_hi];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    dx[xrow + ix - pad] += wv * gd[grow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape, dx).expect("shape fixed")
}

/// Gradient of `conv2d_raw` with respect to the kernel.
pub(crate) fn conv2d_grad_weight(
    g: &Tensor,
    x: &Tensor,
    w_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (gs, xs) = (g.shape(), x.shape());
    let (bsz, ci, h, wd) = (xs.b(), xs.c(), xs.h(), xs.w());
    let (co, kh, kw) = (w_shape.b(), w_shape.h(), w_shape.w());
    let (oh, ow) = (gs.h(), gs.w());
    let mut dw = vec![0.0; w_shape.numel()];
    let gd = g.data();
    let xd = x.data();
    for b in 0..bsz {
        for o in 0..co {
            let gbase = (b * co + o) * oh * ow;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * wd;
                let wbase = (o * ci + c) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let grow = gbase + oy * ow;
                            let xrow = xbase + iy * wd;
                            if stride == 1 {
                                let ox_lo = pad.saturating_sub(kx);
                                let ox_hi = (wd + pad - kx).min(ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix_lo = ox_lo + kx - pad;
                                let a = &gd[grow + ox_lo..grow + ox_hi];
                                let bslice = &xd[xrow + ix_lo..xrow + ix_lo + (ox_hi - ox_lo)];
                                for (u, v) in a.iter().zip(bslice) {
                                    acc += u * v;
                                }
                            } else {
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    acc += gd[grow + ox] * xd[xrow + ix - pad];
                                }
                            }
                        }
                        dw[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(w_shape, dw).expect("shape fixed")
}

fn grad_bias(g: &Tensor, co: usize) -> Tensor {
    let gs = g.shape();
    let mut db = vec![0.0; co];
    for b in 0..gs.b() {
        for c in 0..co {
            let base = (b * co + c) * gs.h() * gs.w();
            db[c] += g.data()[base..base + gs.h() * gs.w()].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(Shape::new(1, co, 1, 1), db).expect("shape fixed")
}

/// Per-pixel affine channel map: out[b,:,h,w] = W @ x[b,:,h,w] + bias.
/// `w` is (Cout, Cin, 1, 1). Equivalent to a 1x1 convolution but runs as
/// plane-wise axpy over contiguous rows.
pub fn channel_map_raw(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.h() != 1 || ws.w() != 1 {
        return Err(Error::dim(format!("channel map expects a 1x1 kernel, got {ws}")));
    }
    check_conv_shapes(xs, ws, bias.map(|b| b.shape()))?;
    let (bsz, ci, hw) = (xs.b(), xs.c(), xs.h() * xs.w());
    let co = ws.b();
    let out_shape = Shape::new(bsz, co, xs.h(), xs.w());
    let mut out = vec![0.0; out_shape.numel()];
    let xd = x.data();
    let wd = w.data();
    for b in 0..bsz {
        for o in 0..co {
            let obase = (b * co + o) * hw;
            if let Some(bias) = bias {
                out[obase..obase + hw].fill(bias.data()[o]);
            }
            for c in 0..ci {
                let wv = wd[o * ci + c];
                let xbase = (b * ci + c) * hw;
                let dst = &mut out[obase..obase + hw];
                let src = &xd[xbase..xbase + hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

fn channel_map_grads(g: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (gs, xs, ws) = (g.shape(), x.shape(), w.shape());
    let (bsz, ci, hw) = (xs.b(), xs.c(), xs.h() * xs.w());
    let co = ws.b();
    let mut dx = vec![0.0; xs.numel()];
    let mut dw = vec![0.0; ws.numel()];
    let gd = g.data();
    let xd = x.data();
    let wd = w.data();
    for b in 0..bsz {
        for o in 0..co {
            let gbase = (b * co + o) * hw;
            for c in 0..ci {
                let xbase = (b * ci + c) * hw;
                let wv = wd[o * ci + c];
                let mut acc = 0.0;
                let grow = &gd[gbase..gbase + hw];
                let xrow = &xd[xbase..xbase + hw];
                let drow = &mut dx[xbase..xbase + hw];
                for ((gv, xv), dv) in grow.iter().zip(xrow).zip(drow.iter_mut()) {
                    acc += gv * xv;
                    *dv += wv * gv;
                }
                dw[o * ci + c] += acc;
            }
        }
    }
    let _ = gs;
    (
        Tensor::from_vec(xs, dx).expect("shape fixed"),
        Tensor::from_vec(ws, dw).expect("shape fixed"),
        grad_bias(g, co),
    )
}

/// Instance normalization over each (b, c) slice with optional affine params.
fn instance_norm_forward(
    x: &Tensor,
    gamma: Option<&Tensor>,
    beta: Option<&Tensor>,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let s = x.shape();
    let n = s.h() * s.w();
    if n == 0 {
        return Err(Error::dim("instance norm on an empty spatial extent"));
    }
    if eps <= 0.0 {
        return Err(Error::config(format!("instance norm eps must be positive, got {eps}")));
    }
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if let Some(p) = p {
            if p.shape().numel() != s.c() {
                return Err(Error::dim(format!(
                    "{name} has {} elements for {} channels",
                    p.shape().numel(),
                    s.c()
                )));
            }
        }
    }
    let mut xhat = vec![0.0; s.numel()];
    let mut out = vec![0.0; s.numel()];
    let mut inv_std = vec![0.0; s.b() * s.c()];
    let xd = x.data();
    for b in 0..s.b() {
        for c in 0..s.c() {
            let base = (b * s.c() + c) * n;
            let slice = &xd[base..base + n];
            let mean = slice.iter().sum::<f64>() / n as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[b * s.c() + c] = istd;
            let (gv, bv) = (
                gamma.map_or(1.0, |g| g.data()[c]),
                beta.map_or(0.0, |g| g.data()[c]),
            );
            for i in 0..n {
                let xh = (slice[i] - mean) * istd;
                xhat[base + i] = xh;
                out[base + i] = gv * xh + bv;
            }
        }
    }
    Ok((
        Tensor::from_vec(s, out)?,
        Tensor::from_vec(s, xhat)?,
        inv_std,
    ))
}

fn instance_norm_grad_input(
    g: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: Option<&Tensor>,
) -> Tensor {
    let s = g.shape();
    let n = s.h() * s.w();
    let mut dx = vec![0.0; s.numel()];
    let gd = g.data();
    let xh = xhat.data();
    for b in 0..s.b() {
        for c in 0..s.c() {
            let base = (b * s.c() + c) * n;
            let istd = inv_std[b * s.c() + c];
            let gv = gamma.map_or(1.0, |g| g.data()[c]);
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for i in 0..n {
                g_mean += gd[base + i];
                gx_mean += gd[base + i] * xh[base + i];
            }
            g_mean /= n as f64;
            gx_mean /= n as f64;
            for i in 0..n {
                dx[base + i] = gv * istd * (gd[base + i] - g_mean - xh[base + i] * gx_mean);
            }
        }
    }
    Tensor::from_vec(s, dx).expect("shape fixed")
}

impl Var {
    /// 2D cross-correlation with zero padding.
    pub fn conv2d(&self, w: &Var, bias: &Var, stride: usize, pad: usize) -> Result<Var> {
        self.same_tape(w)?;
        self.same_tape(bias)?;
        let (xv, wv, bv) = (self.value(), w.value(), bias.value());
        let y = conv2d_raw(&xv, &wv, Some(&bv), stride, pad)?;
        let (xs, ws) = (xv.shape(), wv.shape());
        Ok(self.tape().push(
            y,
            vec![self.id(), w.id(), bias.id()],
            Box::new(move |g| {
                vec![
                    conv2d_grad_input(g, &wv, xs, stride, pad),
                    conv2d_grad_weight(g, &xv, ws, stride, pad),
                    grad_bias(g, ws.b()),
                ]
            }),
        ))
    }

    /// 1x1 convolution: per-pixel channel remap.
    pub fn conv1x1(&self, w: &Var, bias: &Var) -> Result<Var> {
        self.same_tape(w)?;
        self.same_tape(bias)?;
        let (xv, wv, bv) = (self.value(), w.value(), bias.value());
        let y = channel_map_raw(&xv, &wv, Some(&bv))?;
        Ok(self.tape().push(
            y,
            vec![self.id(), w.id(), bias.id()],
            Box::new(move |g| {
                let (dx, dw, db) = channel_map_grads(g, &xv, &wv);
                vec![dx, dw, db]
            }),
        ))
    }

    /// Affine map over the channel axis at every pixel; the rank-4 spelling
    /// of a linear layer. Same kernel as `conv1x1`.
    pub fn linear(&self, w: &Var, bias: &Var) -> Result<Var> {
        self.conv1x1(w, bias)
    }

    /// Instance normalization without affine parameters.
    pub fn instance_norm(&self, eps: f64) -> Result<Var> {
        let xv = self.value();
        let (y, xhat, inv_std) = instance_norm_forward(&xv, None, None, eps)?;
        Ok(self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| vec![instance_norm_grad_input(g, &xhat, &inv_std, None)]),
        ))
    }

    /// Instance normalization with per-channel scale and shift.
    pub fn instance_norm_affine(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let (xv, gv, bv) = (self.value(), gamma.value(), beta.value());
        let (y, xhat, inv_std) = instance_norm_forward(&xv, Some(&gv), Some(&bv), eps)?;
        let gshape = gv.shape();
        Ok(self.tape().push(
            y,
            vec![self.id(), gamma.id(), beta.id()],
            Box::new(move |g| {
                let dx = instance_norm_grad_input(g, &xhat, &inv_std, Some(&gv));
                let s = g.shape();
                let n = s.h() * s.w();
                let mut dgamma = vec![0.0; s.c()];
                let mut dbeta = vec![0.0; s.c()];
                for b in 0..s.b() {
                    for c in 0..s.c() {
                        let base = (b * s.c() + c) * n;
                        for i in 0..n {
                            dgamma[c] += g.data()[base + i] * xhat.data()[base + i];
                            dbeta[c] += g.data()[base + i];
                        }
                    }
                }
                vec![
                    dx,
                    Tensor::from_vec(gshape, dgamma).expect("shape fixed"),
                    Tensor::from_vec(gshape, dbeta).expect("shape fixed"),
                ]
            }),
        ))
    }
}

pub use conv_free::*;

mod conv_free {
    use super::*;

    /// Forward-only instance norm, for callers outside the tape.
    pub fn instance_norm_raw(x: &Tensor, eps: f64) -> Result<Tensor> {
        instance_norm_forward(x, None, None, eps).map(|(y, _, _)| y)
    }
}

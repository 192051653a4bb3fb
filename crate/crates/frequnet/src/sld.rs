//! Learnable decoder upsampling: bilinear grid sampling with learned,
//! bounded offsets, computed either in the native feature space or after a
//! channel-to-space exchange, fused per pixel by a learned convex weighting.
//!
//! Offset layers are zero-initialized by the network, so at initialization
//! the native pathway is plain bilinear upsampling and the exchange pathway
//! is a plain sub-pixel shuffle; training deforms from that baseline.
//! Offsets are always bounded by 0.5 in normalized coordinates: a sigmoid
//! gate scaled by one half times a tanh-bounded magnitude.

use std::rc::Rc;

use crate::encoder::{conv_block, ConvBlockParams};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Scale and grouping of one upsampling pathway. One sampling point per
/// output location; the offset field carries exactly one (dy, dx) pair per
/// group.
#[derive(Clone, Copy, Debug)]
pub struct UpsampleConfig {
    pub scale: usize,
    pub groups: usize,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        UpsampleConfig { scale: 2, groups: 4 }
    }
}

fn locate(p: f64, n: usize) -> (usize, f64, f64) {
    if n == 1 {
        return (0, 0.0, 0.0);
    }
    let max = (n - 1) as f64;
    let active = if p > 0.0 && p < max { 1.0 } else { 0.0 };
    let pc = p.clamp(0.0, max);
    let mut i0 = pc.floor() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    (i0, pc - i0 as f64, active)
}

fn to_pixel(coord: f64, n: usize) -> f64 {
    ((coord + 1.0) * n as f64 - 1.0) / 2.0
}

fn check_grid(x: Shape, grid: Shape) -> Result<()> {
    if grid.c() != 2 {
        return Err(Error::dim(format!(
            "sampling grid needs 2 coordinate planes, got {}",
            grid.c()
        )));
    }
    if grid.b() != x.b() {
        return Err(Error::dim(format!(
            "grid batch {} against input batch {}",
            grid.b(),
            x.b()
        )));
    }
    Ok(())
}

/// Bilinear sampling of `x` at the grid's normalized coordinates. Plane 0
/// holds the row coordinate, plane 1 the column coordinate, both in [-1, 1]
/// with pixel centers at (2i+1)/n - 1. Out-of-range positions clamp to the
/// border.
pub fn grid_sample_raw(x: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let gs = grid.shape();
    check_grid(xs, gs)?;
    let (b, c, h, w) = (xs.b(), xs.c(), xs.h(), xs.w());
    let (oh, ow) = (gs.h(), gs.w());
    let out_shape = Shape::new(b, c, oh, ow);
    let mut out = vec![0.0; out_shape.numel()];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let cy = grid.at(bi, 0, oy, ox);
                let cx = grid.at(bi, 1, oy, ox);
                let (y0, fy, _) = locate(to_pixel(cy, h), h);
                let (x0, fx, _) = locate(to_pixel(cx, w), w);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                for ci in 0..c {
                    let plane = &x.data()[xs.idx(bi, ci, 0, 0)..][..h * w];
                    let v = w00 * plane[y0 * w + x0]
                        + w01 * plane[y0 * w + x1]
                        + w10 * plane[y1 * w + x0]
                        + w11 * plane[y1 * w + x1];
                    out[out_shape.idx(bi, ci, oy, ox)] = v;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Cotangents for both inputs of `grid_sample_raw`.
fn grid_sample_vjp(x: &Tensor, grid: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let xs = x.shape();
    let gs = grid.shape();
    let (b, c, h, w) = (xs.b(), xs.c(), xs.h(), xs.w());
    let (oh, ow) = (gs.h(), gs.w());
    let mut gx = vec![0.0; xs.numel()];
    let mut gg = vec![0.0; gs.numel()];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let cy = grid.at(bi, 0, oy, ox);
                let cx = grid.at(bi, 1, oy, ox);
                let (y0, fy, ay) = locate(to_pixel(cy, h), h);
                let (x0, fx, ax) = locate(to_pixel(cx, w), w);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let mut dy = 0.0;
                let mut dx = 0.0;
                for ci in 0..c {
                    let go = g.at(bi, ci, oy, ox);
                    let base = xs.idx(bi, ci, 0, 0);
                    let plane = &x.data()[base..][..h * w];
                    gx[base + y0 * w + x0] += go * w00;
                    gx[base + y0 * w + x1] += go * w01;
                    gx[base + y1 * w + x0] += go * w10;
                    gx[base + y1 * w + x1] += go * w11;
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    dy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    dx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                }
                gg[gs.idx(bi, 0, oy, ox)] = dy * ay * h as f64 / 2.0;
                gg[gs.idx(bi, 1, oy, ox)] = dx * ax * w as f64 / 2.0;
            }
        }
    }
    (
        Tensor::from_vec(xs, gx).expect("shape fixed"),
        Tensor::from_vec(gs, gg).expect("shape fixed"),
    )
}

/// The base sampling grid: output pixel centers in normalized coordinates,
/// i.e. the grid at which sampling reproduces plain bilinear resizing.
pub fn base_grid(b: usize, oh: usize, ow: usize) -> Tensor {
    Tensor::from_fn(Shape::new(b, 2, oh, ow), |_, c, y, x| {
        if c == 0 {
            (2.0 * y as f64 + 1.0) / oh as f64 - 1.0
        } else {
            (2.0 * x as f64 + 1.0) / ow as f64 - 1.0
        }
    })
}

impl Var {
    /// Tape op for bilinear grid sampling; differentiable in the features
    /// and (almost everywhere) in the grid.
    pub fn grid_sample(&self, grid: &Var) -> Result<Var> {
        self.same_tape(grid)?;
        let y = grid_sample_raw(&self.value(), &grid.value())?;
        let xv = self.value();
        let gv = grid.value();
        Ok(self.tape().push(
            y,
            vec![self.id(), grid.id()],
            Box::new(move |g| {
                let (gx, gg) = grid_sample_vjp(&xv, &gv, g);
                vec![gx, gg]
            }),
        ))
    }
}

/// Offset-producing pair of 1x1 maps: a sigmoid gate and a tanh-bounded
/// magnitude, multiplied and halved. Output lies in (-0.5, 0.5).
pub struct OffsetParams {
    pub gate_w: Var,
    pub gate_b: Var,
    pub mag_w: Var,
    pub mag_b: Var,
}

fn offset_field(x: &Var, p: &OffsetParams) -> Result<Var> {
    let gate = x.conv1x1(&p.gate_w, &p.gate_b)?.sigmoid();
    let mag = x.conv1x1(&p.mag_w, &p.mag_b)?.tanh();
    Ok(gate.mul(&mag)?.scale(0.5))
}

fn sample_groups(
    tape: &Rc<Tape>,
    features: &Var,
    offsets: &Var,
    groups: usize,
) -> Result<Var> {
    let fs = features.shape();
    let os = offsets.shape();
    let base = tape.constant(base_grid(fs.b(), os.h(), os.w()));
    let cg = fs.c() / groups;
    let mut parts = Vec::with_capacity(groups);
    for k in 0..groups {
        let grid = offsets.slice_channels(2 * k, 2 * k + 2)?.add(&base)?;
        let group = features.slice_channels(k * cg, (k + 1) * cg)?;
        parts.push(group.grid_sample(&grid)?);
    }
    Var::concat_channel(&parts)
}

/// Upsampling computed in the native feature space: offsets are predicted at
/// input resolution with scale*scale sub-pixel variants per group, moved to
/// output resolution by a sub-pixel shuffle, and applied on top of the base
/// grid.
pub fn native_space_pathway(x: &Var, p: &OffsetParams, cfg: &UpsampleConfig) -> Result<Var> {
    let s = x.shape();
    if cfg.groups == 0 || s.c() % cfg.groups != 0 {
        return Err(Error::dim(format!(
            "native pathway: {} channels not divisible into {} groups",
            s.c(),
            cfg.groups
        )));
    }
    let offsets = offset_field(x, p)?.pixel_shuffle(cfg.scale)?;
    let os = offsets.shape();
    if os.c() != 2 * cfg.groups {
        return Err(Error::dim(format!(
            "native pathway: offset layers produce {} planes, need {}",
            os.c(),
            2 * cfg.groups
        )));
    }
    sample_groups(&x.tape(), x, &offsets, cfg.groups)
}

/// Upsampling computed after a channel-to-space exchange: the features are
/// sub-pixel shuffled first, offsets are predicted at output resolution, and
/// a learned 1x1 map restores the channel width.
pub struct ExchangeParams {
    pub offsets: OffsetParams,
    pub proj_w: Var,
    pub proj_b: Var,
}

pub fn space_channel_pathway(x: &Var, p: &ExchangeParams, cfg: &UpsampleConfig) -> Result<Var> {
    let s = x.shape();
    let s2 = cfg.scale * cfg.scale;
    if s.c() % s2 != 0 {
        return Err(Error::dim(format!(
            "exchange pathway: {} channels not divisible by scale^2 = {s2}",
            s.c()
        )));
    }
    let shuffled_c = s.c() / s2;
    if cfg.groups == 0 || shuffled_c % cfg.groups != 0 {
        return Err(Error::dim(format!(
            "exchange pathway: {shuffled_c} shuffled channels not divisible into {} groups",
            cfg.groups
        )));
    }
    let shuffled = x.pixel_shuffle(cfg.scale)?;
    let offsets = offset_field(&shuffled, &p.offsets)?;
    if offsets.shape().c() != 2 * cfg.groups {
        return Err(Error::dim(format!(
            "exchange pathway: offset layers produce {} planes, need {}",
            offsets.shape().c(),
            2 * cfg.groups
        )));
    }
    let sampled = sample_groups(&x.tape(), &shuffled, &offsets, cfg.groups)?;
    sampled.conv1x1(&p.proj_w, &p.proj_b)
}

/// Per-pixel convex blend of two equally shaped feature maps; the weights
/// come from a 3x3 conv over their concatenation, softmaxed across the two
/// weight planes so they always sum to one.
pub struct FuseParams {
    pub w: Var,
    pub b: Var,
}

pub fn adaptive_fuse(f1: &Var, f2: &Var, p: &FuseParams) -> Result<Var> {
    if f1.shape() != f2.shape() {
        return Err(Error::dim(format!(
            "fuse inputs disagree: {} vs {}",
            f1.shape(),
            f2.shape()
        )));
    }
    let cat = Var::concat_channel(&[f1.clone(), f2.clone()])?;
    let weights = cat.conv2d(&p.w, &p.b, 1, 1)?.softmax_channel();
    let w1 = weights.slice_channels(0, 1)?;
    let w2 = weights.slice_channels(1, 2)?;
    f1.broadcast_mul(&w1)?.add(&f2.broadcast_mul(&w2)?)
}

/// Upsampler weights for one decoder stage; the variant is the ablation
/// switch.
pub enum UpsamplerParams {
    Sld {
        native: OffsetParams,
        exchange: ExchangeParams,
        fuse: FuseParams,
    },
    Nearest,
}

pub struct DecodeStageParams {
    pub up: UpsamplerParams,
    pub up_w: Var,
    pub up_b: Var,
    pub conv: ConvBlockParams,
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeStageConfig {
    pub native: UpsampleConfig,
    pub exchange: UpsampleConfig,
}

/// One decoder stage: upsample the carry, adjust channels with a 1x1 map,
/// concatenate the encoder skip, and run the feature block.
pub fn decode_stage(
    carry: &Var,
    skip: &Var,
    p: &DecodeStageParams,
    cfg: &DecodeStageConfig,
) -> Result<Var> {
    let up_feat = match &p.up {
        UpsamplerParams::Sld { native, exchange, fuse } => {
            let f1 = native_space_pathway(carry, native, &cfg.native)?;
            let f2 = space_channel_pathway(carry, exchange, &cfg.exchange)?;
            adaptive_fuse(&f1, &f2, fuse)?
        }
        UpsamplerParams::Nearest => carry.nearest_upsample2(),
    };
    let up = up_feat.conv1x1(&p.up_w, &p.up_b)?;
    let us = up.shape();
    let ss = skip.shape();
    if us.h() != ss.h() || us.w() != ss.w() {
        return Err(Error::dim(format!(
            "decoder upsample {}x{} does not meet skip {}x{}",
            us.h(),
            us.w(),
            ss.h(),
            ss.w()
        )));
    }
    conv_block(&Var::concat_channel(&[up, skip.clone()])?, &p.conv)
}

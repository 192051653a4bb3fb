//! Single-level 2D Daubechies wavelet analysis and synthesis with periodic
//! boundary handling.
//!
//! The analysis convention is a[i] = sum_n h[n] x[(2i+n) mod N] per axis;
//! synthesis is the literal adjoint scatter. Periodization by an even length
//! only ever introduces even-shift overlaps, which the filters are orthogonal
//! under, so the periodized transform stays orthonormal and the adjoint IS
//! the inverse. Subband names: first letter = filter along height, second =
//! filter along width (lh = low along H, high along W).

use crate::error::{Error, Result};
use crate::tensor::tape::Var;
use crate::tensor::{Shape, Tensor};

/// Orthonormal scaling filters, h0 first. Digits are converged fixed points
/// of the defining equations (even-shift orthonormality + vanishing moments),
/// accurate to the last f64 bit; the self-test below re-checks them.
pub const DB1_LOWPASS: [f64; 2] = [0.7071067811865476, 0.7071067811865476];
pub const DB2_LOWPASS: [f64; 4] = [
    0.4829629131445341,
    0.8365163037378079,
    0.2241438680420134,
    -0.1294095225512604,
];
pub const DB3_LOWPASS: [f64; 6] = [
    0.3326705529500824,
    0.8068915093110924,
    0.459877502118492,
    -0.1350110200102545,
    -0.08544127388202682,
    0.03522629188570958,
];
pub const DB4_LOWPASS: [f64; 8] = [
    0.23037781330889565,
    0.7148465705529146,
    0.6308807679298603,
    -0.02798376941685832,
    -0.187034811719094,
    0.03084138183556047,
    0.03288301166688561,
    -0.010597401785069141,
];

/// Daubechies filter bank of a given order (1..=4).
#[derive(Clone, Debug)]
pub struct WaveletSpec {
    order: usize,
    h: Vec<f64>,
    g: Vec<f64>,
}

impl WaveletSpec {
    pub fn new(order: usize) -> Result<Self> {
        let h: &[f64] = match order {
            1 => &DB1_LOWPASS,
            2 => &DB2_LOWPASS,
            3 => &DB3_LOWPASS,
            4 => &DB4_LOWPASS,
            _ => {
                return Err(Error::config(format!(
                    "wavelet order {order} unsupported (expected 1..=4)"
                )))
            }
        };
        let l = h.len();
        // Quadrature mirror: g[n] = (-1)^n h[L-1-n].
        let g: Vec<f64> = (0..l)
            .map(|n| if n % 2 == 0 { h[l - 1 - n] } else { -h[l - 1 - n] })
            .collect();
        Ok(WaveletSpec { order, h: h.to_vec(), g })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn lowpass(&self) -> &[f64] {
        &self.h
    }

    pub fn highpass(&self) -> &[f64] {
        &self.g
    }

    pub fn taps(&self) -> usize {
        self.h.len()
    }
}

/// The four single-level subbands, each (B, C, H/2, W/2).
#[derive(Clone, Debug)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl SubbandSet {
    /// Channel-stacked view (B, 4C, h, w), groups ordered LL, LH, HL, HH.
    pub fn stack(&self) -> Tensor {
        let s = self.ll.shape();
        let out_shape = Shape::new(s.b(), 4 * s.c(), s.h(), s.w());
        let mut out = vec![0.0; out_shape.numel()];
        let plane = s.h() * s.w();
        for b in 0..s.b() {
            for (gi, band) in [&self.ll, &self.lh, &self.hl, &self.hh].iter().enumerate() {
                for c in 0..s.c() {
                    let src = &band.data()[(b * s.c() + c) * plane..][..plane];
                    let dst_base = out_shape.idx(b, gi * s.c() + c, 0, 0);
                    out[dst_base..dst_base + plane].copy_from_slice(src);
                }
            }
        }
        Tensor::from_vec(out_shape, out).expect("shape fixed")
    }

    /// Splits a channel-stacked tensor back into the four subbands.
    pub fn unstack(stacked: &Tensor) -> Result<SubbandSet> {
        let s = stacked.shape();
        if s.c() % 4 != 0 {
            return Err(Error::dim(format!(
                "stacked subbands need channels divisible by 4, got {}",
                s.c()
            )));
        }
        let c = s.c() / 4;
        let band_shape = Shape::new(s.b(), c, s.h(), s.w());
        let plane = s.h() * s.w();
        let mut bands: Vec<Tensor> = Vec::with_capacity(4);
        for gi in 0..4 {
            let mut out = vec![0.0; band_shape.numel()];
            for b in 0..s.b() {
                for ci in 0..c {
                    let src_base = s.idx(b, gi * c + ci, 0, 0);
                    let dst_base = band_shape.idx(b, ci, 0, 0);
                    out[dst_base..dst_base + plane]
                        .copy_from_slice(&stacked.data()[src_base..src_base + plane]);
                }
            }
            bands.push(Tensor::from_vec(band_shape, out)?);
        }
        let hh = bands.pop().expect("four bands");
        let hl = bands.pop().expect("four bands");
        let lh = bands.pop().expect("four bands");
        let ll = bands.pop().expect("four bands");
        Ok(SubbandSet { ll, lh, hl, hh })
    }
}

fn check_even(s: Shape) -> Result<()> {
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return Err(Error::dim(format!(
            "wavelet transform needs even spatial dims, got {}x{}",
            s.h(),
            s.w()
        )));
    }
    if s.h() == 0 || s.w() == 0 {
        return Err(Error::dim("wavelet transform on an empty plane"));
    }
    Ok(())
}

/// One analysis pass along the width of a plane: left half low, right half high.
fn analyze_rows(src: &[f64], h: usize, w: usize, spec: &WaveletSpec, dst: &mut [f64]) {
    let half = w / 2;
    let taps = spec.taps();
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut dst[y * w..(y + 1) * w];
        for j in 0..half {
            let mut lo = 0.0;
            let mut hi = 0.0;
            for n in 0..taps {
                let mut idx = 2 * j + n;
                while idx >= w {
                    idx -= w;
                }
                let v = row[idx];
                lo += spec.h[n] * v;
                hi += spec.g[n] * v;
            }
            out[j] = lo;
            out[half + j] = hi;
        }
    }
}

/// One analysis pass along the height: top half low, bottom half high.
fn analyze_cols(src: &[f64], h: usize, w: usize, spec: &WaveletSpec, dst: &mut [f64]) {
    let half = h / 2;
    let taps = spec.taps();
    for i in 0..half {
        for x in 0..w {
            let mut lo = 0.0;
            let mut hi = 0.0;
            for n in 0..taps {
                let mut idx = 2 * i + n;
                while idx >= h {
                    idx -= h;
                }
                let v = src[idx * w + x];
                lo += spec.h[n] * v;
                hi += spec.g[n] * v;
            }
            dst[i * w + x] = lo;
            dst[(half + i) * w + x] = hi;
        }
    }
}

/// Adjoint of `analyze_cols` (scatter).
fn synthesize_cols(src: &[f64], h: usize, w: usize, spec: &WaveletSpec, dst: &mut [f64]) {
    let half = h / 2;
    let taps = spec.taps();
    dst.fill(0.0);
    for i in 0..half {
        for x in 0..w {
            let a = src[i * w + x];
            let d = src[(half + i) * w + x];
            for n in 0..taps {
                let mut idx = 2 * i + n;
                while idx >= h {
                    idx -= h;
                }
                dst[idx * w + x] += spec.h[n] * a + spec.g[n] * d;
            }
        }
    }
}

/// Adjoint of `analyze_rows` (scatter).
fn synthesize_rows(src: &[f64], h: usize, w: usize, spec: &WaveletSpec, dst: &mut [f64]) {
    let half = w / 2;
    let taps = spec.taps();
    dst.fill(0.0);
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut dst[y * w..(y + 1) * w];
        for j in 0..half {
            let a = row[j];
            let d = row[half + j];
            for n in 0..taps {
                let mut idx = 2 * j + n;
                while idx >= w {
                    idx -= w;
                }
                out[idx] += spec.h[n] * a + spec.g[n] * d;
            }
        }
    }
}

/// Single-level 2D analysis, channel-stacked output (B, 4C, H/2, W/2) with
/// groups ordered LL, LH, HL, HH.
pub fn dwt2_stacked_raw(x: &Tensor, spec: &WaveletSpec) -> Result<Tensor> {
    let s = x.shape();
    check_even(s)?;
    let (bsz, c, h, w) = (s.b(), s.c(), s.h(), s.w());
    let (hh, hw) = (h / 2, w / 2);
    let out_shape = Shape::new(bsz, 4 * c, hh, hw);
    let mut out = vec![0.0; out_shape.numel()];
    let mut tmp = vec![0.0; h * w];
    let mut quad = vec![0.0; h * w];
    for b in 0..bsz {
        for ci in 0..c {
            let src = &x.data()[(b * c + ci) * h * w..][..h * w];
            analyze_rows(src, h, w, spec, &mut tmp);
            analyze_cols(&tmp, h, w, spec, &mut quad);
            // Quadrants: [LL | LH] on top (low height), [HL | HH] below.
            for (gi, (ro, co)) in [(0, 0), (0, hw), (hh, 0), (hh, hw)].iter().enumerate() {
                let dst_base = out_shape.idx(b, gi * c + ci, 0, 0);
                for i in 0..hh {
                    for j in 0..hw {
                        out[dst_base + i * hw + j] = quad[(ro + i) * w + (co + j)];
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Single-level 2D synthesis from the channel-stacked form, the exact
/// adjoint (hence inverse) of `dwt2_stacked_raw`.
pub fn idwt2_stacked_raw(y: &Tensor, spec: &WaveletSpec) -> Result<Tensor> {
    let s = y.shape();
    if s.c() % 4 != 0 {
        return Err(Error::dim(format!(
            "inverse transform needs channels divisible by 4, got {}",
            s.c()
        )));
    }
    let (bsz, c4, hh, hw) = (s.b(), s.c(), s.h(), s.w());
    let c = c4 / 4;
    let (h, w) = (hh * 2, hw * 2);
    let out_shape = Shape::new(bsz, c, h, w);
    let mut out = vec![0.0; out_shape.numel()];
    let mut quad = vec![0.0; h * w];
    let mut tmp = vec![0.0; h * w];
    for b in 0..bsz {
        for ci in 0..c {
            for (gi, (ro, co)) in [(0, 0), (0, hw), (hh, 0), (hh, hw)].iter().enumerate() {
                let src_base = s.idx(b, gi * c + ci, 0, 0);
                for i in 0..hh {
                    for j in 0..hw {
                        quad[(ro + i) * w + (co + j)] = y.data()[src_base + i * hw + j];
                    }
                }
            }
            synthesize_cols(&quad, h, w, spec, &mut tmp);
            let dst = &mut out[(b * c + ci) * h * w..][..h * w];
            synthesize_rows(&tmp, h, w, spec, dst);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Adjoint of the analysis map. The periodized orthonormal bank makes this
/// identical to the inverse; it exists as its own name so the tape can state
/// VJPs in terms of adjoints.
pub fn adjoint_dwt2_stacked(y: &Tensor, spec: &WaveletSpec) -> Result<Tensor> {
    idwt2_stacked_raw(y, spec)
}

/// Analysis into an explicit subband set.
pub fn dwt2(x: &Tensor, spec: &WaveletSpec) -> Result<SubbandSet> {
    SubbandSet::unstack(&dwt2_stacked_raw(x, spec)?)
}

/// Synthesis from an explicit subband set.
pub fn idwt2(bands: &SubbandSet, spec: &WaveletSpec) -> Result<Tensor> {
    idwt2_stacked_raw(&bands.stack(), spec)
}

impl Var {
    /// Tape op: analysis to the channel-stacked subband layout.
    pub fn dwt2(&self, spec: &WaveletSpec) -> Result<Var> {
        let y = dwt2_stacked_raw(&self.value(), spec)?;
        let spec = spec.clone();
        Ok(self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| {
                vec![adjoint_dwt2_stacked(g, &spec).expect("shape fixed")]
            }),
        ))
    }

    /// Tape op: synthesis from the channel-stacked subband layout.
    pub fn idwt2(&self, spec: &WaveletSpec) -> Result<Var> {
        let y = idwt2_stacked_raw(&self.value(), spec)?;
        let spec = spec.clone();
        Ok(self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| {
                vec![dwt2_stacked_raw(g, &spec).expect("shape fixed")]
            }),
        ))
    }
}

//! Fourier-domain low-pass calibration: centered 2D spectra, the rectangular
//! frequency mask, the low-pass projection, and the composite filter block
//! that sandwiches the projection between wavelet synthesis and analysis.
//!
//! The pass region is centrosymmetric, so the projection maps real signals to
//! real signals and is its own adjoint; the tape exploits that and reuses the
//! forward map as its VJP.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::tape::Var;
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{dwt2_stacked_raw, idwt2_stacked_raw, SubbandSet, WaveletSpec};

/// Unnormalized DFT of one line, in place. Radix-2 when the length allows,
/// direct evaluation otherwise (line lengths here are desk-scale).
fn fft_line(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    if n.is_power_of_two() {
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let ang = sign * std::f64::consts::TAU / len as f64;
            let wlen = Complex64::new(ang.cos(), ang.sin());
            let mut base = 0;
            while base < n {
                let mut w = Complex64::new(1.0, 0.0);
                for k in 0..len / 2 {
                    let u = buf[base + k];
                    let v = buf[base + k + len / 2] * w;
                    buf[base + k] = u + v;
                    buf[base + k + len / 2] = u - v;
                    w *= wlen;
                }
                base += len;
            }
            len <<= 1;
        }
    } else {
        let mut tw = Vec::with_capacity(n);
        for m in 0..n {
            let ang = sign * std::f64::consts::TAU * m as f64 / n as f64;
            tw.push(Complex64::new(ang.cos(), ang.sin()));
        }
        let src = buf.to_vec();
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, v) in src.iter().enumerate() {
                acc += v * tw[(k * i) % n];
            }
            *out = acc;
        }
    }
}

/// Unnormalized 2D DFT of an h-by-w plane; the inverse direction applies the
/// 1/(h*w) normalization so inverse(forward(x)) = x.
fn fft2_complex(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    for y in 0..h {
        fft_line(&mut data[y * w..(y + 1) * w], inverse);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        fft_line(&mut col, inverse);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// Batched complex spectrum in centered layout: the zero-frequency bin sits
/// at (floor(H/2), floor(W/2)) of each (b, c) slice.
#[derive(Clone, Debug)]
pub struct ComplexSpectrum {
    shape: Shape,
    data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn at(&self, b: usize, c: usize, u: usize, v: usize) -> Complex64 {
        self.data[self.shape.idx(b, c, u, v)]
    }

    /// Total squared magnitude split by the mask: (inside, outside).
    pub fn energy_split(&self, mask: &FreqMask) -> Result<(f64, f64)> {
        if mask.h != self.shape.h() || mask.w != self.shape.w() {
            return Err(Error::dim(format!(
                "mask {}x{} against spectrum {}x{}",
                mask.h,
                mask.w,
                self.shape.h(),
                self.shape.w()
            )));
        }
        let mut inside = 0.0;
        let mut outside = 0.0;
        let plane = self.shape.h() * self.shape.w();
        for (i, v) in self.data.iter().enumerate() {
            let p = i % plane;
            let e = v.norm_sqr();
            if mask.bits[p] {
                inside += e;
            } else {
                outside += e;
            }
        }
        Ok((inside, outside))
    }
}

/// Forward unnormalized DFT per (b, c) slice, then center shift.
pub fn fft2_centered(x: &Tensor) -> ComplexSpectrum {
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![Complex64::new(0.0, 0.0); s.numel()];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for slice in 0..s.b() * s.c() {
        let src = &x.data()[slice * h * w..][..h * w];
        for (dst, v) in buf.iter_mut().zip(src) {
            *dst = Complex64::new(*v, 0.0);
        }
        fft2_complex(&mut buf, h, w, false);
        let base = slice * h * w;
        for u in 0..h {
            let k = (u + h - ch) % h;
            for v in 0..w {
                let l = (v + w - cw) % w;
                out[base + u * w + v] = buf[k * w + l];
            }
        }
    }
    ComplexSpectrum { shape: s, data: out }
}

/// Inverse of `fft2_centered`. Returns the real part and the largest
/// imaginary magnitude encountered (a symmetry residue for real signals).
pub fn ifft2_centered(spec: &ComplexSpectrum) -> (Tensor, f64) {
    let s = spec.shape;
    let (h, w) = (s.h(), s.w());
    let (ch, cw) = (h / 2, w / 2);
    let mut out = vec![0.0; s.numel()];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    let mut residue = 0.0f64;
    for slice in 0..s.b() * s.c() {
        let base = slice * h * w;
        for k in 0..h {
            let u = (k + ch) % h;
            for l in 0..w {
                let v = (l + cw) % w;
                buf[k * w + l] = spec.data[base + u * w + v];
            }
        }
        fft2_complex(&mut buf, h, w, true);
        for (dst, v) in out[base..base + h * w].iter_mut().zip(&buf) {
            *dst = v.re;
            residue = residue.max(v.im.abs());
        }
    }
    (Tensor::from_vec(s, out).expect("shape fixed"), residue)
}

/// Binary pass region over centered frequency coordinates: a bin passes iff
/// it lies within tau*extent of the center along both axes.
#[derive(Clone, Debug)]
pub struct FreqMask {
    pub tau: f64,
    pub h: usize,
    pub w: usize,
    bits: Vec<bool>,
}

impl FreqMask {
    pub fn passes(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.w + v]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.ones() as f64 / (self.h * self.w) as f64
    }
}

pub fn build_mask(h: usize, w: usize, tau: f64) -> Result<FreqMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config(format!(
            "mask tau must lie in (0, 1), got {tau}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::dim("mask over an empty plane"));
    }
    let (uc, vc) = (h / 2, w / 2);
    let mut bits = vec![false; h * w];
    for u in 0..h {
        for v in 0..w {
            let du = (u as f64 - uc as f64).abs();
            let dv = (v as f64 - vc as f64).abs();
            bits[u * w + v] = du <= tau * h as f64 && dv <= tau * w as f64;
        }
    }
    Ok(FreqMask { tau, h, w, bits })
}

/// Keeps spectrum bins inside the mask and zeroes the rest, back in the
/// spatial domain. A projection: linear, idempotent, self-adjoint. tau at or
/// above one half passes every bin, so the input is returned untouched.
pub fn lowpass_filter(x: &Tensor, tau: f64) -> Result<Tensor> {
    if tau >= 0.5 {
        return Ok(x.clone());
    }
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let mask = build_mask(h, w, tau)?;
    let (ch, cw) = (h / 2, w / 2);
    // Mask re-indexed to the unshifted bin order the transform works in.
    let mut pass = vec![false; h * w];
    for k in 0..h {
        let u = (k + ch) % h;
        for l in 0..w {
            let v = (l + cw) % w;
            pass[k * w + l] = mask.passes(u, v);
        }
    }
    let mut out = vec![0.0; s.numel()];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for slice in 0..s.b() * s.c() {
        let src = &x.data()[slice * h * w..][..h * w];
        for (dst, v) in buf.iter_mut().zip(src) {
            *dst = Complex64::new(*v, 0.0);
        }
        fft2_complex(&mut buf, h, w, false);
        for (v, keep) in buf.iter_mut().zip(&pass) {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        fft2_complex(&mut buf, h, w, true);
        for (dst, v) in out[slice * h * w..][..h * w].iter_mut().zip(&buf) {
            *dst = v.re;
        }
    }
    Tensor::from_vec(s, out)
}

/// Which subbands survive into the inner synthesis of the filter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubbandPolicy {
    /// Zero the three detail bands; the Fourier stage sees the smooth part.
    LlOnly,
    /// Keep all four; the inner synthesis-of-analysis is then the identity.
    All,
}

impl std::str::FromStr for SubbandPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ll_only" => Ok(SubbandPolicy::LlOnly),
            "all" => Ok(SubbandPolicy::All),
            other => Err(Error::config(format!(
                "unknown subband policy {other:?} (expected ll_only or all)"
            ))),
        }
    }
}

impl std::fmt::Display for SubbandPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SubbandPolicy::LlOnly => "ll_only",
            SubbandPolicy::All => "all",
        })
    }
}

fn keep_ll_only(stacked: &Tensor) -> Tensor {
    let s = stacked.shape();
    let c = s.c() / 4;
    let plane = s.h() * s.w();
    let mut out = stacked.data().to_vec();
    for b in 0..s.b() {
        let lo = s.idx(b, c, 0, 0);
        let hi = s.idx(b, 0, 0, 0) + s.c() * plane;
        out[lo..hi].fill(0.0);
    }
    Tensor::from_vec(s, out).expect("shape fixed")
}

/// The composite frequency-calibration map: analyze, select subbands,
/// synthesize, low-pass in the Fourier domain, analyze again. Returns the
/// half-resolution subband set of the calibrated signal.
pub fn flc_block(
    x: &Tensor,
    tau: f64,
    wspec: &WaveletSpec,
    policy: SubbandPolicy,
) -> Result<SubbandSet> {
    let stacked = dwt2_stacked_raw(x, wspec)?;
    let selected = match policy {
        SubbandPolicy::All => stacked,
        SubbandPolicy::LlOnly => keep_ll_only(&stacked),
    };
    let recon = idwt2_stacked_raw(&selected, wspec)?;
    let filtered = lowpass_filter(&recon, tau)?;
    SubbandSet::unstack(&dwt2_stacked_raw(&filtered, wspec)?)
}

impl Var {
    /// Tape op for the low-pass projection. Self-adjoint, so the VJP applies
    /// the same projection to the cotangent.
    pub fn lowpass(&self, tau: f64) -> Result<Var> {
        if tau >= 0.5 {
            return Ok(self.clone());
        }
        let y = lowpass_filter(&self.value(), tau)?;
        Ok(self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| vec![lowpass_filter(g, tau).expect("shape fixed")]),
        ))
    }

    /// Composite frequency-calibration block on the tape, channel-stacked
    /// output (B, 4C, H/2, W/2). Built from the primitive tape ops, so the
    /// backward pass is their adjoint chain.
    pub fn flc_block(&self, tau: f64, wspec: &WaveletSpec, policy: SubbandPolicy) -> Result<Var> {
        let bands = self.dwt2(wspec)?;
        let selected = match policy {
            SubbandPolicy::All => bands,
            SubbandPolicy::LlOnly => {
                let s = bands.shape();
                let c = s.c() / 4;
                let ll = bands.slice_channels(0, c)?;
                let zeros = self
                    .tape()
                    .constant(Tensor::zeros(Shape::new(s.b(), 3 * c, s.h(), s.w())));
                Var::concat_channel(&[ll, zeros])?
            }
        };
        let recon = selected.idwt2(wspec)?;
        let filtered = recon.lowpass(tau)?;
        filtered.dwt2(wspec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct O(N^4) DFT of one plane, centered layout.
    fn dft_oracle(src: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        let (ch, cw) = (h / 2, w / 2);
        for u in 0..h {
            let k = (u + h - ch) % h;
            for v in 0..w {
                let l = (v + w - cw) % w;
                let mut acc = Complex64::new(0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -std::f64::consts::TAU
                            * (k as f64 * y as f64 / h as f64
                                + l as f64 * x as f64 / w as f64);
                        acc += src[y * w + x] * Complex64::new(ang.cos(), ang.sin());
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        x = Tensor::from_fn(x.shape(), |_, _, h, w| if h == 0 && w == 0 { 1.0 } else { 0.0 });
        let spec = fft2_centered(&x);
        for v in spec.data() {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_concentrates_at_center_bin() {
        let c = 0.3;
        let x = Tensor::filled(Shape::new(1, 1, 4, 4), c);
        let spec = fft2_centered(&x);
        for u in 0..4 {
            for v in 0..4 {
                let val = spec.at(0, 0, u, v);
                if u == 2 && v == 2 {
                    assert!((val.re - 16.0 * c).abs() < 1e-12);
                    assert!(val.im.abs() < 1e-12);
                } else {
                    assert!(val.norm() < 1e-12, "bin ({u},{v}) = {val}");
                }
            }
        }
    }

    #[test]
    fn transform_matches_direct_dft_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for (h, w) in [(4, 4), (6, 6), (8, 8), (6, 8), (10, 4)] {
            let x = random_tensor(&mut rng, Shape::new(1, 2, h, w));
            let spec = fft2_centered(&x);
            for slice in 0..2 {
                let plane = &x.data()[slice * h * w..][..h * w];
                let want = dft_oracle(plane, h, w);
                for (i, expect) in want.iter().enumerate() {
                    let got = spec.data()[slice * h * w + i];
                    assert!((got - expect).norm() < 1e-9, "{h}x{w} bin {i}");
                }
            }
            let (back, residue) = ifft2_centered(&spec);
            assert!(residue < 1e-10);
            let worst = x
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-10, "{h}x{w} roundtrip {worst}");
        }
    }

    #[test]
    fn mask_enumerates_the_pass_block() {
        let m = build_mask(8, 8, 0.125).unwrap();
        assert_eq!(m.ones(), 9);
        for u in 0..8 {
            for v in 0..8 {
                let want = (u as i64 - 4).abs() <= 1 && (v as i64 - 4).abs() <= 1;
                assert_eq!(m.passes(u, v), want, "({u},{v})");
            }
        }
    }

    #[test]
    fn mask_limits_symmetry_and_fraction() {
        let full = build_mask(8, 6, 0.6).unwrap();
        assert_eq!(full.ones(), 48);

        let m = build_mask(12, 10, 0.21).unwrap();
        assert!(m.passes(6, 5), "center bin always passes");
        for a in 0..6i64 {
            for b in 0..5i64 {
                let p = m.passes((6 + a) as usize, (5 + b) as usize);
                let q = m.passes((6 - a) as usize, (5 - b) as usize);
                assert_eq!(p, q, "offset ({a},{b})");
            }
        }

        let big = build_mask(32, 32, 0.25).unwrap();
        let want = 0.25;
        assert!((big.fraction() - want).abs() <= 2.0 / 32.0);

        assert!(build_mask(8, 8, 0.0).is_err());
        assert!(build_mask(8, 8, 1.0).is_err());
        assert!(build_mask(8, 8, -0.2).is_err());
    }

    #[test]
    fn lowpass_is_identity_at_half_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random_tensor(&mut rng, Shape::new(1, 1, 6, 6));
        let y = lowpass_filter(&x, 0.5).unwrap();
        let worst = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10);
    }

    #[test]
    fn lowpass_is_an_idempotent_self_adjoint_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = random_tensor(&mut rng, Shape::new(1, 2, 8, 6));
        let y = random_tensor(&mut rng, Shape::new(1, 2, 8, 6));
        let px = lowpass_filter(&x, 0.25).unwrap();
        let ppx = lowpass_filter(&px, 0.25).unwrap();
        let worst = px
            .data()
            .iter()
            .zip(ppx.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "idempotence {worst}");

        let py = lowpass_filter(&y, 0.25).unwrap();
        let a: f64 = px.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        let b: f64 = x.data().iter().zip(py.data()).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-10, "self-adjoint {a} vs {b}");
    }

    #[test]
    fn nyquist_stripes_are_rejected() {
        let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, h, _| {
            if h % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let y = lowpass_filter(&x, 0.25).unwrap();
        let worst = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-9, "residual {worst}");
    }

    #[test]
    fn filtered_spectrum_has_no_energy_outside_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let x = random_tensor(&mut rng, Shape::new(1, 1, 8, 8));
        let y = lowpass_filter(&x, 0.25).unwrap();
        let spec = fft2_centered(&y);
        let mask = build_mask(8, 8, 0.25).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                if !mask.passes(u, v) {
                    assert!(spec.at(0, 0, u, v).norm() < 1e-9, "bin ({u},{v})");
                }
            }
        }
        let (_inside, outside) = spec.energy_split(&mask).unwrap();
        assert!(outside < 1e-18);
    }

    #[test]
    fn filter_block_collapses_to_analysis_when_all_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let wspec = WaveletSpec::new(2).unwrap();
        let x = random_tensor(&mut rng, Shape::new(1, 2, 8, 8));
        let got = flc_block(&x, 0.5, &wspec, SubbandPolicy::All).unwrap().stack();
        let want = dwt2_stacked_raw(&x, &wspec).unwrap();
        let worst = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "collapse {worst}");
    }

    #[test]
    fn filter_block_on_constant_keeps_only_ll() {
        let wspec = WaveletSpec::new(3).unwrap();
        let x = Tensor::filled(Shape::new(1, 1, 8, 8), 0.9);
        for policy in [SubbandPolicy::LlOnly, SubbandPolicy::All] {
            for tau in [0.1, 0.25, 0.7] {
                let bands = flc_block(&x, tau, &wspec, policy).unwrap();
                for v in bands.ll.data() {
                    assert!((v - 1.8).abs() < 1e-9);
                }
                for band in [&bands.lh, &bands.hl, &bands.hh] {
                    for v in band.data() {
                        assert!(v.abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn filter_block_matches_hand_composed_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let wspec = WaveletSpec::new(1).unwrap();
        let x = random_tensor(&mut rng, Shape::new(1, 1, 8, 8));

        let bands = crate::wavelet::dwt2(&x, &wspec).unwrap();
        let zero = Tensor::zeros(bands.ll.shape());
        let ll_only = SubbandSet {
            ll: bands.ll.clone(),
            lh: zero.clone(),
            hl: zero.clone(),
            hh: zero,
        };
        let recon = crate::wavelet::idwt2(&ll_only, &wspec).unwrap();
        let filtered = lowpass_filter(&recon, 0.25).unwrap();
        let want = dwt2_stacked_raw(&filtered, &wspec).unwrap();

        let got = flc_block(&x, 0.25, &wspec, SubbandPolicy::LlOnly)
            .unwrap()
            .stack();
        let worst = got
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "composition {worst}");
    }

    #[test]
    fn filter_block_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let wspec = WaveletSpec::new(2).unwrap();
        let s = Shape::new(1, 1, 8, 8);
        let x = random_tensor(&mut rng, s);
        let y = random_tensor(&mut rng, s);
        let (a, b) = (0.7, -1.3);
        let mixed = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = flc_block(&mixed, 0.25, &wspec, SubbandPolicy::LlOnly)
            .unwrap()
            .stack();
        let fx = flc_block(&x, 0.25, &wspec, SubbandPolicy::LlOnly).unwrap().stack();
        let fy = flc_block(&y, 0.25, &wspec, SubbandPolicy::LlOnly).unwrap().stack();
        let worst = lhs
            .data()
            .iter()
            .zip(fx.data().iter().zip(fy.data()))
            .map(|(l, (p, q))| (l - (a * p + b * q)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "linearity {worst}");
    }

    #[test]
    fn tape_filter_block_matches_raw_and_backpropagates_its_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let wspec = WaveletSpec::new(2).unwrap();
        let x = random_tensor(&mut rng, Shape::new(1, 1, 8, 8)).with_grad();
        let seed = random_tensor(&mut rng, Shape::new(1, 4, 4, 4));

        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = xv.flc_block(0.25, &wspec, SubbandPolicy::LlOnly).unwrap();
        let raw = flc_block(&x, 0.25, &wspec, SubbandPolicy::LlOnly)
            .unwrap()
            .stack();
        let worst = out
            .value()
            .data()
            .iter()
            .zip(raw.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "tape vs raw {worst}");

        // Linear map: <seed, F(x)> must equal <grad, x>.
        let grads = out.backward_seeded(seed.clone()).unwrap();
        let g = grads.get(&xv).unwrap();
        let lhs: f64 = seed.data().iter().zip(raw.data()).map(|(p, q)| p * q).sum();
        let rhs: f64 = g.data().iter().zip(x.data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}

//! Channel/space rearrangement and fixed-grid resampling ops:
//! pixel shuffle and unshuffle, 2x average pooling, 2x nearest upsampling.

use super::tape::Var;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// (B, C*s^2, H, W) -> (B, C, s*H, s*W); input channel c*s^2 + dy*s + dx
/// lands at output offset (dy, dx) inside each s x s block.
pub fn pixel_shuffle_raw(x: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::dim("pixel_shuffle scale must be positive"));
    }
    let xs = x.shape();
    if xs.c() % (s * s) != 0 {
        return Err(Error::dim(format!(
            "pixel_shuffle: {} channels not divisible by {}",
            xs.c(),
            s * s
        )));
    }
    let out_shape = Shape::new(xs.b(), xs.c() / (s * s), xs.h() * s, xs.w() * s);
    let mut out = vec![0.0; out_shape.numel()];
    for b in 0..xs.b() {
        for c in 0..out_shape.c() {
            for dy in 0..s {
                for dx in 0..s {
                    let ci = c * s * s + dy * s + dx;
                    for h in 0..xs.h() {
                        for w in 0..xs.w() {
                            out[out_shape.idx(b, c, h * s + dy, w * s + dx)] =
                                x.at(b, ci, h, w);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Inverse of `pixel_shuffle_raw`.
pub fn pixel_unshuffle_raw(x: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::dim("pixel_unshuffle scale must be positive"));
    }
    let xs = x.shape();
    if xs.h() % s != 0 || xs.w() % s != 0 {
        return Err(Error::dim(format!(
            "pixel_unshuffle: spatial extent {}x{} not divisible by {s}",
            xs.h(),
            xs.w()
        )));
    }
    let out_shape = Shape::new(xs.b(), xs.c() * s * s, xs.h() / s, xs.w() / s);
    let mut out = vec![0.0; out_shape.numel()];
    for b in 0..xs.b() {
        for c in 0..xs.c() {
            for dy in 0..s {
                for dx in 0..s {
                    let co = c * s * s + dy * s + dx;
                    for h in 0..out_shape.h() {
                        for w in 0..out_shape.w() {
                            out[out_shape.idx(b, co, h, w)] =
                                x.at(b, c, h * s + dy, w * s + dx);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn avg_pool2_raw(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.h() % 2 != 0 || xs.w() % 2 != 0 {
        return Err(Error::dim(format!(
            "avg_pool2 needs even spatial dims, got {}x{}",
            xs.h(),
            xs.w()
        )));
    }
    let os = Shape::new(xs.b(), xs.c(), xs.h() / 2, xs.w() / 2);
    let mut out = vec![0.0; os.numel()];
    for b in 0..xs.b() {
        for c in 0..xs.c() {
            for h in 0..os.h() {
                for w in 0..os.w() {
                    out[os.idx(b, c, h, w)] = 0.25
                        * (x.at(b, c, 2 * h, 2 * w)
                            + x.at(b, c, 2 * h, 2 * w + 1)
                            + x.at(b, c, 2 * h + 1, 2 * w)
                            + x.at(b, c, 2 * h + 1, 2 * w + 1));
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn nearest_upsample2_raw(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let os = Shape::new(xs.b(), xs.c(), xs.h() * 2, xs.w() * 2);
    let mut out = vec![0.0; os.numel()];
    for b in 0..xs.b() {
        for c in 0..xs.c() {
            for h in 0..os.h() {
                for w in 0..os.w() {
                    out[os.idx(b, c, h, w)] = x.at(b, c, h / 2, w / 2);
                }
            }
        }
    }
    Tensor::from_vec(os, out).expect("shape fixed")
}

impl Var {
    pub fn pixel_shuffle(&self, s: usize) -> Result<Var> {
        let y = pixel_shuffle_raw(&self.value(), s)?;
        Ok(self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| vec![pixel_unshuffle_raw(g, s).expect("shape fixed")]),
        ))
    }

    pub fn pixel_unshuffle(&self, s: usize) -> Result<Var> {
        let y = pixel_unshuffle_raw(&self.value(), s)?;
        Ok(self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| vec![pixel_shuffle_raw(g, s).expect("shape fixed")]),
        ))
    }

    pub fn avg_pool2(&self) -> Result<Var> {
        let xs = self.shape();
        let y = avg_pool2_raw(&self.value())?;
        Ok(self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| {
                let mut dx = vec![0.0; xs.numel()];
                for b in 0..xs.b() {
                    for c in 0..xs.c() {
                        for h in 0..xs.h() {
                            for w in 0..xs.w() {
                                dx[xs.idx(b, c, h, w)] = 0.25 * g.at(b, c, h / 2, w / 2);
                            }
                        }
                    }
                }
                vec![Tensor::from_vec(xs, dx).expect("shape fixed")]
            }),
        ))
    }

    pub fn nearest_upsample2(&self) -> Var {
        let xs = self.shape();
        let y = nearest_upsample2_raw(&self.value());
        self.tape().push(
            y,
            vec![self.id()],
            Box::new(move |g| {
                let mut dx = vec![0.0; xs.numel()];
                for b in 0..xs.b() {
                    for c in 0..xs.c() {
                        for h in 0..xs.h() {
                            for w in 0..xs.w() {
                                dx[xs.idx(b, c, h, w)] = g.at(b, c, 2 * h, 2 * w)
                                    + g.at(b, c, 2 * h, 2 * w + 1)
                                    + g.at(b, c, 2 * h + 1, 2 * w)
                                    + g.at(b, c, 2 * h + 1, 2 * w + 1);
                            }
                        }
                    }
                }
                vec![Tensor::from_vec(xs, dx).expect("shape fixed")]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shuffle_arranges_channels_into_blocks() {
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle_raw(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shuffle_then_unshuffle_is_identity_and_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let s = rng.gen_range(1..4usize);
            let shape = Shape::new(
                rng.gen_range(1..3),
                s * s * rng.gen_range(1..4usize),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            let x = Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-2.0..2.0));
            let y = pixel_shuffle_raw(&x, s).unwrap();
            let back = pixel_unshuffle_raw(&y, s).unwrap();
            assert_eq!(back.shape(), x.shape());
            for (a, b) in back.data().iter().zip(x.data()) {
                assert_eq!(a, b);
            }
            let ex: f64 = x.data().iter().map(|v| v * v).sum();
            let ey: f64 = y.data().iter().map(|v| v * v).sum();
            assert!((ex - ey).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffle_divisibility_errors() {
        let x = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(pixel_shuffle_raw(&x, 2).is_err());
        let y = Tensor::zeros(Shape::new(1, 1, 3, 2));
        assert!(pixel_unshuffle_raw(&y, 2).is_err());
    }

    #[test]
    fn avg_pool_averages_blocks() {
        let x = Tensor::from_vec(
            Shape::new(1, 1, 2, 4),
            vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0],
        )
        .unwrap();
        let y = avg_pool2_raw(&x).unwrap();
        assert_eq!(y.data(), &[2.5, 6.5]);
        assert!(avg_pool2_raw(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn nearest_upsample_replicates() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let y = nearest_upsample2_raw(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}

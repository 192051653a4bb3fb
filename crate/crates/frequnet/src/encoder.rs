//! Encoder stages: double-conv feature blocks and frequency-domain
//! downsampling that hands the next stage a channel-doubled, spatially
//! halved carry while keeping the full-resolution features as the skip.

use crate::error::Result;
use crate::spectral::SubbandPolicy;
use crate::tensor::tape::Var;
use crate::wavelet::WaveletSpec;

/// Variance floor inside the normalization layers.
pub const NORM_EPS: f64 = 1e-5;
/// Negative-side slope of the activations.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Weights for one double-conv block: two rounds of
/// 3x3 conv -> instance norm (affine) -> leaky relu.
pub struct ConvBlockParams {
    pub w1: Var,
    pub b1: Var,
    pub gamma1: Var,
    pub beta1: Var,
    pub w2: Var,
    pub b2: Var,
    pub gamma2: Var,
    pub beta2: Var,
}

pub fn conv_block(x: &Var, p: &ConvBlockParams) -> Result<Var> {
    let y = x
        .conv2d(&p.w1, &p.b1, 1, 1)?
        .instance_norm_affine(&p.gamma1, &p.beta1, NORM_EPS)?
        .leaky_relu(LEAKY_SLOPE);
    let y = y
        .conv2d(&p.w2, &p.b2, 1, 1)?
        .instance_norm_affine(&p.gamma2, &p.beta2, NORM_EPS)?
        .leaky_relu(LEAKY_SLOPE);
    Ok(y)
}

/// How a stage downsamples. The two switches are independent ablation
/// toggles: `db_on` selects wavelet-based downsampling at all (off means
/// stride-2 average pooling), `flc_on` adds the Fourier calibration inside
/// the wavelet path.
#[derive(Clone, Debug)]
pub struct EncodeStageConfig {
    pub flc_on: bool,
    pub db_on: bool,
    pub tau: f64,
    pub policy: SubbandPolicy,
    pub wavelet: WaveletSpec,
}

/// Stage weights: the feature block plus the 1x1 projection that maps the
/// stacked subbands (4C) or the pooled features (C) to the carry width (2C).
pub struct EncodeStageParams {
    pub conv: ConvBlockParams,
    pub proj_w: Var,
    pub proj_b: Var,
}

pub struct EncoderStageOutput {
    /// Full-resolution features, consumed by the matching decoder stage.
    pub skip: Var,
    /// Downsampled, channel-doubled features for the next stage.
    pub carry: Var,
}

pub fn encode_stage(
    x: &Var,
    p: &EncodeStageParams,
    cfg: &EncodeStageConfig,
) -> Result<EncoderStageOutput> {
    let skip = conv_block(x, &p.conv)?;
    let carry = if cfg.db_on {
        let stacked = if cfg.flc_on {
            skip.flc_block(cfg.tau, &cfg.wavelet, cfg.policy)?
        } else {
            skip.dwt2(&cfg.wavelet)?
        };
        stacked.conv1x1(&p.proj_w, &p.proj_b)?
    } else {
        skip.avg_pool2()?.conv1x1(&p.proj_w, &p.proj_b)?
    };
    Ok(EncoderStageOutput { skip, carry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::Tape;
    use crate::tensor::{Shape, Tensor};
    use crate::wavelet::dwt2_stacked_raw;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rt(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale)).with_grad()
    }

    fn block_params(tape: &Rc<Tape>, rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvBlockParams {
        ConvBlockParams {
            w1: tape.leaf(rt(rng, Shape::new(cout, cin, 3, 3), 0.4)),
            b1: tape.leaf(rt(rng, Shape::new(1, cout, 1, 1), 0.1)),
            gamma1: tape.leaf(rt(rng, Shape::new(1, cout, 1, 1), 0.9)),
            beta1: tape.leaf(rt(rng, Shape::new(1, cout, 1, 1), 0.1)),
            w2: tape.leaf(rt(rng, Shape::new(cout, cout, 3, 3), 0.4)),
            b2: tape.leaf(rt(rng, Shape::new(1, cout, 1, 1), 0.1)),
            gamma2: tape.leaf(rt(rng, Shape::new(1, cout, 1, 1), 0.9)),
            beta2: tape.leaf(rt(rng, Shape::new(1, cout, 1, 1), 0.1)),
        }
    }

    fn stage_cfg(flc_on: bool, db_on: bool) -> EncodeStageConfig {
        EncodeStageConfig {
            flc_on,
            db_on,
            tau: 0.25,
            policy: SubbandPolicy::LlOnly,
            wavelet: WaveletSpec::new(2).unwrap(),
        }
    }

    #[test]
    fn stage_shape_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let tape = Tape::new();
        let c = 8;
        let p = EncodeStageParams {
            conv: block_params(&tape, &mut rng, c, c),
            proj_w: tape.leaf(rt(&mut rng, Shape::new(2 * c, 4 * c, 1, 1), 0.2)),
            proj_b: tape.leaf(rt(&mut rng, Shape::new(1, 2 * c, 1, 1), 0.1)),
        };
        let x = tape.leaf(rt(&mut rng, Shape::new(1, c, 16, 16), 1.0));
        let out = encode_stage(&x, &p, &stage_cfg(true, true)).unwrap();
        assert_eq!(out.skip.shape(), Shape::new(1, 8, 16, 16));
        assert_eq!(out.carry.shape(), Shape::new(1, 16, 8, 8));
    }

    #[test]
    fn zero_weights_make_conv_block_emit_its_bias_shift() {
        let tape = Tape::new();
        let c = 3;
        let zeros = |s: Shape| tape.leaf(Tensor::zeros(s).with_grad());
        let p = ConvBlockParams {
            w1: zeros(Shape::new(c, c, 3, 3)),
            b1: zeros(Shape::new(1, c, 1, 1)),
            gamma1: zeros(Shape::new(1, c, 1, 1)),
            beta1: zeros(Shape::new(1, c, 1, 1)),
            w2: zeros(Shape::new(c, c, 3, 3)),
            b2: zeros(Shape::new(1, c, 1, 1)),
            gamma2: zeros(Shape::new(1, c, 1, 1)),
            beta2: zeros(Shape::new(1, c, 1, 1)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = tape.leaf(rt(&mut rng, Shape::new(2, c, 6, 6), 1.0));
        let y = conv_block(&x, &p).unwrap();
        for v in y.value().data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn pooled_stage_keeps_constants_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let tape = Tape::new();
        let c = 4;
        // Zero conv weights with a nonzero shift: every skip channel becomes
        // a constant plane, which the pooling path must preserve.
        let zeros = |s: Shape| tape.leaf(Tensor::zeros(s).with_grad());
        let p = EncodeStageParams {
            conv: ConvBlockParams {
                w1: zeros(Shape::new(c, c, 3, 3)),
                b1: zeros(Shape::new(1, c, 1, 1)),
                gamma1: zeros(Shape::new(1, c, 1, 1)),
                beta1: tape.leaf(rt(&mut rng, Shape::new(1, c, 1, 1), 0.5)),
                w2: zeros(Shape::new(c, c, 3, 3)),
                b2: zeros(Shape::new(1, c, 1, 1)),
                gamma2: zeros(Shape::new(1, c, 1, 1)),
                beta2: tape.leaf(rt(&mut rng, Shape::new(1, c, 1, 1), 0.5)),
            },
            proj_w: tape.leaf(rt(&mut rng, Shape::new(2 * c, c, 1, 1), 0.3)),
            proj_b: tape.leaf(rt(&mut rng, Shape::new(1, 2 * c, 1, 1), 0.1)),
        };
        let x = tape.leaf(Tensor::filled(Shape::new(1, c, 8, 8), 0.7).with_grad());
        let out = encode_stage(&x, &p, &stage_cfg(false, false)).unwrap();
        assert_eq!(out.carry.shape(), Shape::new(1, 2 * c, 4, 4));
        let carry = out.carry.value();
        for c_i in 0..2 * c {
            let first = carry.at(0, c_i, 0, 0);
            for h in 0..4 {
                for w in 0..4 {
                    assert!((carry.at(0, c_i, h, w) - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn all_pass_stage_carries_exact_subbands_through_identity_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let tape = Tape::new();
        let c = 2;
        let ident = Tensor::from_fn(Shape::new(4 * c, 4 * c, 1, 1), |o, i, _, _| {
            if o == i {
                1.0
            } else {
                0.0
            }
        })
        .with_grad();
        let p = EncodeStageParams {
            conv: block_params(&tape, &mut rng, c, c),
            proj_w: tape.leaf(ident),
            proj_b: tape.leaf(Tensor::zeros(Shape::new(1, 4 * c, 1, 1)).with_grad()),
        };
        let x = tape.leaf(rt(&mut rng, Shape::new(1, c, 8, 8), 1.0));
        let cfg = EncodeStageConfig {
            flc_on: true,
            db_on: true,
            tau: 0.5,
            policy: SubbandPolicy::All,
            wavelet: WaveletSpec::new(2).unwrap(),
        };
        let out = encode_stage(&x, &p, &cfg).unwrap();
        let want = dwt2_stacked_raw(&out.skip.value(), &cfg.wavelet).unwrap();
        let carry = out.carry.value();
        let worst = carry
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "carry vs subbands {worst}");
    }

    #[test]
    fn switches_leave_the_skip_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let c = 4;
        let x0 = rt(&mut rng, Shape::new(1, c, 8, 8), 1.0);
        let mut skips: Vec<Tensor> = Vec::new();
        let mut carries: Vec<Tensor> = Vec::new();
        for (flc_on, db_on) in [(true, true), (false, true), (false, false)] {
            let tape = Tape::new();
            let mut prng = ChaCha8Rng::seed_from_u64(56);
            let cin_proj = if db_on { 4 * c } else { c };
            let p = EncodeStageParams {
                conv: block_params(&tape, &mut prng, c, c),
                proj_w: tape.leaf(rt(&mut prng, Shape::new(2 * c, cin_proj, 1, 1), 0.2)),
                proj_b: tape.leaf(rt(&mut prng, Shape::new(1, 2 * c, 1, 1), 0.1)),
            };
            let x = tape.leaf(x0.clone());
            let out = encode_stage(&x, &p, &stage_cfg(flc_on, db_on)).unwrap();
            skips.push(out.skip.value());
            carries.push(out.carry.value());
        }
        assert_eq!(skips[0].data(), skips[1].data());
        assert_eq!(skips[1].data(), skips[2].data());
        // The wavelet and Fourier paths genuinely differ.
        assert!(carries[0].data() != carries[1].data());
    }

    #[test]
    fn conv_block_gradient_matches_finite_differences() {
        use crate::tensor::numgrad::{check_op, OpCheck};
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let cin = 2;
        let cout = 3;
        let inputs = vec![
            rt(&mut rng, Shape::new(1, cin, 4, 4), 1.0),
            rt(&mut rng, Shape::new(cout, cin, 3, 3), 0.5),
            rt(&mut rng, Shape::new(1, cout, 1, 1), 0.2),
            rt(&mut rng, Shape::new(1, cout, 1, 1), 0.9),
            rt(&mut rng, Shape::new(1, cout, 1, 1), 0.2),
            rt(&mut rng, Shape::new(cout, cout, 3, 3), 0.5),
            rt(&mut rng, Shape::new(1, cout, 1, 1), 0.2),
            rt(&mut rng, Shape::new(1, cout, 1, 1), 0.9),
            rt(&mut rng, Shape::new(1, cout, 1, 1), 0.2),
        ];
        let check = OpCheck {
            name: "conv_block".into(),
            tol: 1e-3,
            inputs,
            build: Box::new(|tape, vars| {
                let p = ConvBlockParams {
                    w1: vars[1].clone(),
                    b1: vars[2].clone(),
                    gamma1: vars[3].clone(),
                    beta1: vars[4].clone(),
                    w2: vars[5].clone(),
                    b2: vars[6].clone(),
                    gamma2: vars[7].clone(),
                    beta2: vars[8].clone(),
                };
                let _ = tape;
                conv_block(&vars[0], &p)
            }),
        };
        let result = check_op(&check, 1e-4).unwrap();
        assert!(result.pass(), "{}: {}", result.name, result.max_rel_err);
    }
}

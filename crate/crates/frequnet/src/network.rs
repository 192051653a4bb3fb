//! Full network assembly: stem, frequency-domain encoder stages, bottleneck,
//! learnable-upsampling decoder stages, segmentation head, and optional
//! auxiliary heads for deep supervision, plus hard evaluation metrics.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use crate::encoder::{conv_block, encode_stage, ConvBlockParams, EncodeStageConfig, EncodeStageParams};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::sld::{
    decode_stage, DecodeStageConfig, DecodeStageParams, ExchangeParams, FuseParams, OffsetParams,
    UpsampleConfig, UpsamplerParams,
};
use crate::spectral::SubbandPolicy;
use crate::tensor::checkpoint::{read_checkpoint_file, write_checkpoint_file};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{LabelMap, Shape, Tensor};
use crate::wavelet::WaveletSpec;

/// Architecture description. Width doubles per stage; every decoder stage
/// upsamples by 2, so inputs must be divisible by 2^depth.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub depth: usize,
    pub base: usize,
    pub wavelet_order: usize,
    pub tau: f64,
    pub policy: SubbandPolicy,
    /// Requested sampling groups per decoder stage; clamped per stage to a
    /// divisor of the actual channel count.
    pub groups: usize,
    pub flc: bool,
    pub db_down: bool,
    pub sld: bool,
    pub deep_supervision: bool,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.base == 0 || self.in_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.groups == 0 {
            return Err(Error::config("groups must be at least 1"));
        }
        if self.sld && self.base % 2 != 0 {
            return Err(Error::config(
                "learnable upsampling shuffles channel blocks of 4; base width must be even",
            ));
        }
        WaveletSpec::new(self.wavelet_order)?;
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    let (mut a, mut b) = (a, b);
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Named parameter tensors. The key set is a pure function of the
/// architecture config; values round-trip through checkpoints bit-exactly.
#[derive(Clone, Debug, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_records(records: Vec<(String, Tensor)>) -> Self {
        ModelParams { map: records.into_iter().collect() }
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::state(format!("no parameter named {name}")))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                if slot.shape() != t.shape() {
                    return Err(Error::dim(format!(
                        "parameter {name} is {}, refusing {}",
                        slot.shape(),
                        t.shape()
                    )));
                }
                *slot = t;
                Ok(())
            }
            None => Err(Error::state(format!("no parameter named {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count, walking every stored tensor.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.shape().numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint_file(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(ModelParams::from_records(read_checkpoint_file(path)?))
    }
}

/// Tape-bound view of the parameters: every tensor becomes a leaf (trainable)
/// or a constant (inference) on one shared tape.
pub struct BoundParams {
    map: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &Rc<Tape>, params: &ModelParams, trainable: bool) -> Self {
        let map = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t.clone().with_grad())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { map }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::state(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    fn block(&self, prefix: &str) -> Result<ConvBlockParams> {
        Ok(ConvBlockParams {
            w1: self.var(&format!("{prefix}.conv1.weight"))?,
            b1: self.var(&format!("{prefix}.conv1.bias"))?,
            gamma1: self.var(&format!("{prefix}.norm1.gamma"))?,
            beta1: self.var(&format!("{prefix}.norm1.beta"))?,
            w2: self.var(&format!("{prefix}.conv2.weight"))?,
            b2: self.var(&format!("{prefix}.conv2.bias"))?,
            gamma2: self.var(&format!("{prefix}.norm2.gamma"))?,
            beta2: self.var(&format!("{prefix}.norm2.beta"))?,
        })
    }

    fn offsets(&self, prefix: &str) -> Result<OffsetParams> {
        Ok(OffsetParams {
            gate_w: self.var(&format!("{prefix}.gate.weight"))?,
            gate_b: self.var(&format!("{prefix}.gate.bias"))?,
            mag_w: self.var(&format!("{prefix}.mag.weight"))?,
            mag_b: self.var(&format!("{prefix}.mag.bias"))?,
        })
    }
}

enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Shape,
    init: Init,
}

fn conv3x3_spec(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, zero: bool) {
    let init = if zero { Init::Zeros } else { Init::Kaiming { fan_in: cin * 9 } };
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: Shape::new(cout, cin, 3, 3),
        init,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: Shape::new(1, cout, 1, 1),
        init: Init::Zeros,
    });
}

fn conv1x1_spec(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, zero: bool) {
    let init = if zero { Init::Zeros } else { Init::Kaiming { fan_in: cin } };
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: Shape::new(cout, cin, 1, 1),
        init,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: Shape::new(1, cout, 1, 1),
        init: Init::Zeros,
    });
}

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    for (i, c_in) in [(1, cin), (2, cout)] {
        conv3x3_spec(out, &format!("{prefix}.conv{i}"), c_in, cout, false);
        out.push(ParamSpec {
            name: format!("{prefix}.norm{i}.gamma"),
            shape: Shape::new(1, cout, 1, 1),
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: format!("{prefix}.norm{i}.beta"),
            shape: Shape::new(1, cout, 1, 1),
            init: Init::Zeros,
        });
    }
}

/// Effective group counts for the decoder stage whose carry has `c_carry`
/// channels: the requested count clamped to a divisor of what each pathway
/// actually sees.
fn stage_groups(cfg: &NetConfig, c_carry: usize) -> (usize, usize) {
    (gcd(cfg.groups, c_carry), gcd(cfg.groups, c_carry / 4))
}

fn param_specs(cfg: &NetConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut v = Vec::new();
    block_specs(&mut v, "stem", cfg.in_channels, cfg.base);
    let mut c = cfg.base;
    for i in 0..cfg.depth {
        block_specs(&mut v, &format!("enc{i}.block"), c, c);
        let proj_in = if cfg.db_down { 4 * c } else { c };
        conv1x1_spec(&mut v, &format!("enc{i}.proj"), proj_in, 2 * c, false);
        c *= 2;
    }
    block_specs(&mut v, "bottleneck", c, c);
    for j in (0..cfg.depth).rev() {
        let c_skip = cfg.base << j;
        let c_carry = 2 * c_skip;
        let p = format!("dec{j}");
        if cfg.sld {
            let (g_nat, g_ex) = stage_groups(cfg, c_carry);
            conv1x1_spec(&mut v, &format!("{p}.native.gate"), c_carry, 8 * g_nat, true);
            conv1x1_spec(&mut v, &format!("{p}.native.mag"), c_carry, 8 * g_nat, true);
            conv1x1_spec(&mut v, &format!("{p}.exchange.gate"), c_carry / 4, 2 * g_ex, true);
            conv1x1_spec(&mut v, &format!("{p}.exchange.mag"), c_carry / 4, 2 * g_ex, true);
            conv1x1_spec(&mut v, &format!("{p}.exchange.proj"), c_carry / 4, c_carry, false);
            conv3x3_spec(&mut v, &format!("{p}.fuse"), 2 * c_carry, 2, true);
        }
        conv1x1_spec(&mut v, &format!("{p}.up"), c_carry, c_skip, false);
        block_specs(&mut v, &format!("{p}.block"), 2 * c_skip, c_skip);
        if cfg.deep_supervision && j > 0 {
            conv1x1_spec(&mut v, &format!("aux{j}"), c_skip, cfg.classes, false);
        }
    }
    conv1x1_spec(&mut v, "head", cfg.base, cfg.classes, false);
    Ok(v)
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic initialization: uniform Kaiming weights with bound
/// sqrt(6/fan_in), zero biases, unit norm scales, and zero offset and fusion
/// layers so every learnable upsampler starts as its fixed baseline. Each
/// tensor draws from its own stream keyed by name, so the values do not
/// depend on initialization order.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ModelParams> {
    use rand::{Rng, SeedableRng};
    let mut map = BTreeMap::new();
    for spec in param_specs(cfg)? {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(spec.shape),
            Init::Ones => Tensor::filled(spec.shape, 1.0),
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(fnv1a64(&spec.name) ^ seed);
                Tensor::from_fn(spec.shape, |_, _, _, _| rng.gen_range(-bound..bound))
            }
        };
        map.insert(spec.name, t);
    }
    Ok(ModelParams { map })
}

/// Scalar count the architecture should have, from per-block arithmetic
/// independent of the tensors actually allocated.
pub fn expected_param_count(cfg: &NetConfig) -> usize {
    let block = |cin: usize, cout: usize| 9 * cout * (cin + cout) + 6 * cout;
    let conv1 = |cin: usize, cout: usize| cout * cin + cout;
    let mut n = block(cfg.in_channels, cfg.base);
    let mut c = cfg.base;
    for _ in 0..cfg.depth {
        n += block(c, c);
        n += conv1(if cfg.db_down { 4 * c } else { c }, 2 * c);
        c *= 2;
    }
    n += block(c, c);
    for j in (0..cfg.depth).rev() {
        let c_skip = cfg.base << j;
        let c_carry = 2 * c_skip;
        if cfg.sld {
            let (g_nat, g_ex) = stage_groups(cfg, c_carry);
            n += 2 * conv1(c_carry, 8 * g_nat);
            n += 2 * conv1(c_carry / 4, 2 * g_ex);
            n += conv1(c_carry / 4, c_carry);
            n += 9 * 2 * (2 * c_carry) + 2;
        }
        n += conv1(c_carry, c_skip);
        n += block(2 * c_skip, c_skip);
        if cfg.deep_supervision && j > 0 {
            n += conv1(c_skip, cfg.classes);
        }
    }
    n + conv1(cfg.base, cfg.classes)
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Auxiliary logits, coarsest first; empty without deep supervision.
    pub aux: Vec<Var>,
}

pub fn forward(x: &Var, params: &BoundParams, cfg: &NetConfig) -> Result<ForwardOutput> {
    cfg.validate()?;
    let s = x.shape();
    let m = 1usize << cfg.depth;
    if s.h() % m != 0 || s.w() % m != 0 {
        return Err(Error::config(format!(
            "input {}x{} must be a multiple of {m} for depth {}",
            s.h(),
            s.w(),
            cfg.depth
        )));
    }
    if s.c() != cfg.in_channels {
        return Err(Error::config(format!(
            "input has {} channels, config expects {}",
            s.c(),
            cfg.in_channels
        )));
    }
    let wavelet = WaveletSpec::new(cfg.wavelet_order)?;

    let mut cur = conv_block(x, &params.block("stem")?)?;
    let mut skips = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let sp = EncodeStageParams {
            conv: params.block(&format!("enc{i}.block"))?,
            proj_w: params.var(&format!("enc{i}.proj.weight"))?,
            proj_b: params.var(&format!("enc{i}.proj.bias"))?,
        };
        let sc = EncodeStageConfig {
            flc_on: cfg.flc,
            db_on: cfg.db_down,
            tau: cfg.tau,
            policy: cfg.policy,
            wavelet: wavelet.clone(),
        };
        let out = encode_stage(&cur, &sp, &sc)?;
        skips.push(out.skip);
        cur = out.carry;
    }
    cur = conv_block(&cur, &params.block("bottleneck")?)?;

    let mut aux = Vec::new();
    for j in (0..cfg.depth).rev() {
        let p = format!("dec{j}");
        let c_carry = cur.shape().c();
        let up = if cfg.sld {
            UpsamplerParams::Sld {
                native: params.offsets(&format!("{p}.native"))?,
                exchange: ExchangeParams {
                    offsets: params.offsets(&format!("{p}.exchange"))?,
                    proj_w: params.var(&format!("{p}.exchange.proj.weight"))?,
                    proj_b: params.var(&format!("{p}.exchange.proj.bias"))?,
                },
                fuse: FuseParams {
                    w: params.var(&format!("{p}.fuse.weight"))?,
                    b: params.var(&format!("{p}.fuse.bias"))?,
                },
            }
        } else {
            UpsamplerParams::Nearest
        };
        let dp = DecodeStageParams {
            up,
            up_w: params.var(&format!("{p}.up.weight"))?,
            up_b: params.var(&format!("{p}.up.bias"))?,
            conv: params.block(&format!("{p}.block"))?,
        };
        let (g_nat, g_ex) = stage_groups(cfg, c_carry);
        let dc = DecodeStageConfig {
            native: UpsampleConfig { scale: 2, groups: g_nat },
            exchange: UpsampleConfig { scale: 2, groups: g_ex },
        };
        cur = decode_stage(&cur, &skips[j], &dp, &dc)?;
        if cfg.deep_supervision && j > 0 {
            aux.push(cur.conv1x1(
                &params.var(&format!("aux{j}.weight"))?,
                &params.var(&format!("aux{j}.bias"))?,
            )?);
        }
    }
    let logits = cur.conv1x1(&params.var("head.weight")?, &params.var("head.bias")?)?;
    Ok(ForwardOutput { logits, aux })
}

/// Main loss plus the auxiliary terms, weighted 2^-(j+1) in coarse-to-fine
/// order. Auxiliary heads drop the wavelet-detail term and compare against
/// nearest-downsampled labels. The report's term breakdown describes the
/// main head; its total includes the auxiliary sum.
pub fn supervised_loss(
    logits: &Var,
    aux: &[Var],
    labels: &LabelMap,
    weights: &LossWeights,
    wspec: &WaveletSpec,
    labelfree_ce: bool,
) -> Result<(Var, LossReport)> {
    let (mut total, mut report) = total_loss(logits, labels, weights, wspec, labelfree_ce)?;
    if weights.dice > 0.0 || weights.topk > 0.0 {
        let aux_weights = LossWeights { freq: 0.0, ..*weights };
        for (j, a) in aux.iter().enumerate() {
            let (ah, aw) = (a.shape().h(), a.shape().w());
            if ah == 0 || labels.h % ah != 0 || aw == 0 || labels.w % aw != 0 {
                return Err(Error::dim(format!(
                    "auxiliary logits {ah}x{aw} do not divide labels {}x{}",
                    labels.h, labels.w
                )));
            }
            let factor = labels.h / ah;
            if labels.w / aw != factor {
                return Err(Error::dim(format!(
                    "auxiliary logits {ah}x{aw} scale labels {}x{} anisotropically",
                    labels.h, labels.w
                )));
            }
            let small = labels.downsample_nearest(factor)?;
            let (term, _) = total_loss(a, &small, &aux_weights, wspec, labelfree_ce)?;
            total = total.add(&term.scale(0.5f64.powi(j as i32 + 1)))?;
        }
    }
    report.total = total.value().item();
    Ok((total, report))
}

/// Hard per-class Dice over global voxel sums, the gap between the best and
/// worst foreground class, and the voxel counts behind them. A class absent
/// from both maps scores 1 by convention, is flagged, and is left out of the
/// gap.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub per_class_dice: Vec<f64>,
    pub dice_gap: f64,
    pub intersections: Vec<usize>,
    pub pred_voxels: Vec<usize>,
    pub label_voxels: Vec<usize>,
    pub absent: Vec<bool>,
}

impl MetricsReport {
    /// Finish a report from raw per-class counts. Evaluation over many
    /// batches sums counts first and derives Dice once, so the result is the
    /// global score, not an average of per-batch scores.
    pub fn from_counts(inter: Vec<usize>, pred: Vec<usize>, label: Vec<usize>) -> Self {
        let classes = inter.len();
        let mut dice = vec![0.0; classes];
        let mut absent = vec![false; classes];
        for k in 0..classes {
            let denom = pred[k] + label[k];
            if denom == 0 {
                dice[k] = 1.0;
                absent[k] = true;
            } else {
                dice[k] = 2.0 * inter[k] as f64 / denom as f64;
            }
        }
        let live: Vec<f64> =
            (1..classes).filter(|k| !absent[*k]).map(|k| dice[k]).collect();
        let gap = if live.len() >= 2 {
            let hi = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = live.iter().copied().fold(f64::INFINITY, f64::min);
            hi - lo
        } else {
            0.0
        };
        MetricsReport {
            per_class_dice: dice,
            dice_gap: gap,
            intersections: inter,
            pred_voxels: pred,
            label_voxels: label,
            absent,
        }
    }

    /// One-line key=value record.
    pub fn to_record(&self) -> String {
        let mut parts = Vec::new();
        for (k, d) in self.per_class_dice.iter().enumerate() {
            parts.push(format!("dice_{k}={d:.6}"));
        }
        parts.push(format!("gap={:.6}", self.dice_gap));
        for (k, n) in self.pred_voxels.iter().enumerate() {
            parts.push(format!("pred_{k}={n}"));
        }
        for (k, n) in self.label_voxels.iter().enumerate() {
            parts.push(format!("label_{k}={n}"));
        }
        for (k, a) in self.absent.iter().enumerate() {
            if *a {
                parts.push(format!("absent_{k}=1"));
            }
        }
        parts.join(" ")
    }
}

pub fn hard_dice(pred: &LabelMap, labels: &LabelMap, classes: usize) -> Result<MetricsReport> {
    if (pred.b, pred.h, pred.w) != (labels.b, labels.h, labels.w) {
        return Err(Error::dim(format!(
            "prediction {}x{}x{} against labels {}x{}x{}",
            pred.b, pred.h, pred.w, labels.b, labels.h, labels.w
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut pc = vec![0usize; classes];
    let mut lc = vec![0usize; classes];
    for b in 0..pred.b {
        for y in 0..pred.h {
            for x in 0..pred.w {
                let p = pred.at(b, y, x) as usize;
                let l = labels.at(b, y, x) as usize;
                if p >= classes || l >= classes {
                    return Err(Error::data(format!(
                        "label value {} out of range for {classes} classes",
                        p.max(l)
                    )));
                }
                pc[p] += 1;
                lc[l] += 1;
                if p == l {
                    inter[p] += 1;
                }
            }
        }
    }
    Ok(MetricsReport::from_counts(inter, pc, lc))
}

/// Channel argmax of a logit tensor; ties go to the lowest class index.
pub fn argmax_labels(logits: &Tensor) -> LabelMap {
    let s = logits.shape();
    let mut data = Vec::with_capacity(s.b() * s.h() * s.w());
    for b in 0..s.b() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                let mut best = 0usize;
                let mut bv = logits.at(b, 0, y, x);
                for c in 1..s.c() {
                    let v = logits.at(b, c, y, x);
                    if v > bv {
                        bv = v;
                        best = c;
                    }
                }
                data.push(best as u16);
            }
        }
    }
    LabelMap::new(s.b(), s.h(), s.w(), data).expect("counts agree by construction")
}

//! Training harness: synthetic phantom generation with band-controlled
//! class signals, dataset normalization, the Adam optimizer with a
//! plateau-halving learning-rate schedule, the training loop, evaluation,
//! and the switch-ablation runner.
//!
//! Every sample is a pure function of (spec, index), so datasets need no
//! storage; a cache file format exists for exporting them. Phantom
//! generation may fan out across threads; the training loop itself is
//! serial.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Band, PhantomSpec, RunConfig, ShapeKind};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::network::{
    argmax_labels, forward, init_params, supervised_loss, BoundParams, MetricsReport, ModelParams,
};
use crate::spectral::{build_mask, fft2_centered};
use crate::tensor::checkpoint::{read_dataset_file, write_dataset_file};
use crate::tensor::tape::Tape;
use crate::tensor::{LabelMap, Shape, Tensor};
use crate::wavelet::WaveletSpec;

/// Fraction of a high-band class's spectral energy that must fall outside
/// the default tau = 0.25 pass block, checked at generation time.
pub const HIGH_BAND_MIN_OUTSIDE: f64 = 0.8;
const AUDIT_TAU: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub classes: usize,
    pub size: usize,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64 + 1)))
}

/// Pixel membership test for one placed region plus its bounding radius.
struct Region {
    cy: f64,
    cx: f64,
    rmax: f64,
    inside: Box<dyn Fn(f64, f64) -> bool>,
}

fn make_region(rng: &mut ChaCha8Rng, shape: ShapeKind, area: f64) -> (Box<dyn Fn(f64, f64) -> bool>, f64) {
    match shape {
        ShapeKind::Ellipse => {
            let aspect = rng.gen_range(0.6..1.6);
            let a = (area * aspect / std::f64::consts::PI).sqrt();
            let b = area / (std::f64::consts::PI * a);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (sin, cos) = theta.sin_cos();
            let inside = move |dy: f64, dx: f64| {
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            };
            (Box::new(inside), a.max(b))
        }
        ShapeKind::Blob => {
            let r0 = (area / std::f64::consts::PI).sqrt();
            let p2 = rng.gen_range(0.0..std::f64::consts::TAU);
            let p3 = rng.gen_range(0.0..std::f64::consts::TAU);
            let inside = move |dy: f64, dx: f64| {
                let d = (dx * dx + dy * dy).sqrt();
                let phi = dy.atan2(dx);
                let r = r0 * (1.0 + 0.18 * (2.0 * phi + p2).sin() + 0.12 * (3.0 * phi + p3).sin());
                d <= r
            };
            (Box::new(inside), r0 * 1.3)
        }
    }
}

fn place_region(
    rng: &mut ChaCha8Rng,
    size: usize,
    shape: ShapeKind,
    area: f64,
    placed: &[(f64, f64, f64)],
) -> Region {
    let s = size as f64;
    let mut last = None;
    for _ in 0..64 {
        let (inside, rmax) = make_region(rng, shape, area);
        let lo = (rmax + 1.0).min(s / 2.0);
        let hi = (s - 1.0 - rmax).max(s / 2.0);
        let (cy, cx) = if lo < hi {
            (rng.gen_range(lo..hi), rng.gen_range(lo..hi))
        } else {
            (s / 2.0, s / 2.0)
        };
        let clear = placed
            .iter()
            .all(|(py, px, pr)| ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() > pr + rmax + 2.0);
        let region = Region { cy, cx, rmax, inside };
        if clear {
            return region;
        }
        last = Some(region);
    }
    last.expect("at least one placement attempt")
}

/// One deterministic sample. Classes are drawn in label order; earlier
/// regions keep their pixels when shapes collide. Low-band classes add a
/// flat unit signal, high-band classes a zero-mean cosine carrier whose
/// spectral energy is audited to sit outside the tau = 0.25 pass block.
pub fn generate_phantom(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = sample_rng(spec.seed, index);
    let mut image = vec![0.0f64; n * n];
    let mut labels = vec![0u16; n * n];
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();

    for (ci, class) in spec.classes.iter().enumerate() {
        let area = class.fraction * (n * n) as f64;
        let region = place_region(&mut rng, n, class.shape, area, &placed);
        let mut pixels = Vec::new();
        let y0 = ((region.cy - region.rmax - 1.0).floor().max(0.0)) as usize;
        let y1 = ((region.cy + region.rmax + 1.0).ceil().min((n - 1) as f64)) as usize;
        for y in y0..=y1 {
            for x in 0..n {
                let idx = y * n + x;
                if labels[idx] != 0 {
                    continue;
                }
                if (region.inside)(y as f64 - region.cy, x as f64 - region.cx) {
                    labels[idx] = (ci + 1) as u16;
                    pixels.push((y, x));
                }
            }
        }
        if pixels.is_empty() {
            return Err(Error::config(format!(
                "class {} covers no pixels at fraction {} on a {n}x{n} grid",
                ci + 1,
                class.fraction
            )));
        }
        placed.push((region.cy, region.cx, region.rmax));

        match class.band {
            Band::Low => {
                for (y, x) in &pixels {
                    image[y * n + x] += 1.0;
                }
            }
            Band::High => {
                let mask = build_mask(n, n, AUDIT_TAU)?;
                let mut accepted = None;
                for _ in 0..8 {
                    let freq = rng.gen_range(0.35..0.45);
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    let (fy, fx) = (freq * angle.sin(), freq * angle.cos());
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let mut tex = vec![0.0f64; n * n];
                    for (y, x) in &pixels {
                        tex[y * n + x] = 0.9
                            * (std::f64::consts::TAU * (fy * *y as f64 + fx * *x as f64) + phase)
                                .cos();
                    }
                    let t = Tensor::from_vec(Shape::new(1, 1, n, n), tex.clone())?;
                    let (inside, outside) = fft2_centered(&t).energy_split(&mask)?;
                    if outside / (inside + outside) >= HIGH_BAND_MIN_OUTSIDE {
                        accepted = Some(tex);
                        break;
                    }
                }
                let tex = accepted.ok_or_else(|| {
                    Error::data(format!(
                        "class {}: could not keep {:.0}% of texture energy outside the band",
                        ci + 1,
                        HIGH_BAND_MIN_OUTSIDE * 100.0
                    ))
                })?;
                for (y, x) in &pixels {
                    image[y * n + x] += tex[y * n + x];
                }
            }
        }
    }

    if spec.noise > 0.0 {
        let gauss = Normal::new(0.0, spec.noise)
            .map_err(|e| Error::config(format!("noise level: {e}")))?;
        for v in &mut image {
            *v += gauss.sample(&mut rng);
        }
    }

    Ok(Sample {
        image: Tensor::from_vec(Shape::new(1, 1, n, n), image)?,
        labels: LabelMap::new(1, n, n, labels)?,
    })
}

/// Deterministic dataset: indices 0..train go to the training split, the
/// rest to validation. Generation fans out over `threads` when asked.
pub fn build_dataset(
    spec: &PhantomSpec,
    n_train: usize,
    n_val: usize,
    threads: usize,
) -> Result<Dataset> {
    spec.validate()?;
    let total = n_train + n_val;
    let mut samples: Vec<Option<Sample>> = vec![None; total];
    if threads > 1 {
        let chunk = total.div_ceil(threads);
        let results: Vec<Result<Vec<(usize, Sample)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let spec = spec.clone();
                    scope.spawn(move || {
                        let lo = t * chunk;
                        let hi = ((t + 1) * chunk).min(total);
                        let mut out = Vec::with_capacity(hi.saturating_sub(lo));
                        for i in lo..hi {
                            out.push((i, generate_phantom(&spec, i)?));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generator thread panicked"))
                .collect()
        });
        for r in results {
            for (i, s) in r? {
                samples[i] = Some(s);
            }
        }
    } else {
        for (i, slot) in samples.iter_mut().enumerate() {
            *slot = Some(generate_phantom(spec, i)?);
        }
    }
    let mut all: Vec<Sample> = samples.into_iter().map(|s| s.expect("filled")).collect();
    let val = all.split_off(n_train);
    Ok(Dataset { train: all, val, classes: spec.label_count(), size: spec.size })
}

/// Dataset-level z-score parameters, fitted on the training split only.
#[derive(Clone, Copy, Debug)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(samples: &[Sample]) -> Normalizer {
        let mut sum = 0.0;
        let mut count = 0usize;
        for s in samples {
            sum += s.image.data().iter().sum::<f64>();
            count += s.image.shape().numel();
        }
        let mean = if count == 0 { 0.0 } else { sum / count as f64 };
        let mut sq = 0.0;
        for s in samples {
            sq += s.image.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        }
        let std = if count == 0 { 0.0 } else { (sq / count as f64).sqrt() };
        Normalizer { mean, std }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let (m, s) = (self.mean, self.std + 1e-12);
        t.map(|v| (v - m) / s)
    }
}

/// Normalize both splits with training-split statistics.
pub fn normalize_dataset(ds: &mut Dataset) -> Normalizer {
    let norm = Normalizer::fit(&ds.train);
    for s in ds.train.iter_mut().chain(ds.val.iter_mut()) {
        s.image = norm.apply(&s.image);
    }
    norm
}

/// Stack per-image samples into one batch tensor and label map.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, LabelMap)> {
    if samples.is_empty() {
        return Err(Error::dim("cannot stack an empty batch"));
    }
    let s0 = samples[0].image.shape();
    let (h, w) = (s0.h(), s0.w());
    let mut data = Vec::with_capacity(samples.len() * s0.numel());
    let mut lab = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != s0 {
            return Err(Error::dim("batch mixes image shapes"));
        }
        data.extend_from_slice(s.image.data());
        for y in 0..h {
            for x in 0..w {
                lab.push(s.labels.at(0, y, x));
            }
        }
    }
    Ok((
        Tensor::from_vec(Shape::new(samples.len(), s0.c(), h, w), data)?,
        LabelMap::new(samples.len(), h, w, lab)?,
    ))
}

/// Adam with bias correction; state is kept per parameter name.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Adam {
        Adam { beta1, beta2, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update over every parameter. A missing gradient means the
    /// parameter did not influence the loss this step; its moments decay.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Option<Tensor>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            let p = params.get(&name)?.clone();
            let n = p.shape().numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(&name).and_then(|o| o.as_ref());
            let mut out = p.data().to_vec();
            for i in 0..n {
                let gi = g.map_or(0.0, |t| t.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                out[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            params.set(&name, Tensor::from_vec(p.shape(), out)?)?;
        }
        Ok(())
    }
}

/// Halve-on-plateau schedule over an exponential moving average of the
/// observed loss: when the EMA fails to improve on its best value by
/// `min_improvement` for `patience` consecutive observations, the rate
/// halves, floored at `lr_min`.
pub struct PlateauSchedule {
    lr: f64,
    lr_min: f64,
    patience: usize,
    min_improvement: f64,
    decay: f64,
    ema: Option<f64>,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(
        lr0: f64,
        lr_min: f64,
        patience: usize,
        min_improvement: f64,
        decay: f64,
    ) -> PlateauSchedule {
        PlateauSchedule {
            lr: lr0,
            lr_min,
            patience,
            min_improvement,
            decay,
            ema: None,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    /// Feed one loss observation; returns the rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let ema = match self.ema {
            None => loss,
            Some(e) => self.decay * e + (1.0 - self.decay) * loss,
        };
        self.ema = Some(ema);
        if self.best - ema >= self.min_improvement {
            self.best = ema;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr / 2.0).max(self.lr_min);
                self.stale = 0;
            }
        }
        self.lr
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<String>,
    pub val_metrics: MetricsReport,
    pub final_lr: f64,
}

fn require_finite(report: &LossReport, epoch: usize, step: usize) -> Result<()> {
    for (name, v) in [
        ("dice", report.dice_term),
        ("topk", report.topk_term),
        ("freq", report.freq_term),
        ("total", report.total),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "{name} term became {v} at epoch {epoch} step {step}; aborting"
            )));
        }
    }
    Ok(())
}

/// Forward every batch of `samples` without gradients; returns the mean
/// supervised loss per sample and the global hard-Dice metrics.
fn val_pass(
    params: &ModelParams,
    samples: &[Sample],
    cfg: &RunConfig,
    wspec: &WaveletSpec,
) -> Result<(f64, MetricsReport)> {
    let net = cfg.net_config();
    let weights = cfg.loss_weights();
    let mut loss_sum = 0.0;
    let mut inter = vec![0usize; net.classes];
    let mut pc = vec![0usize; net.classes];
    let mut lc = vec![0usize; net.classes];
    for chunk in samples.chunks(cfg.batch) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, labels) = stack_batch(&refs)?;
        let tape = Tape::new();
        let bound = BoundParams::bind(&tape, params, false);
        let x = tape.constant(images);
        let out = forward(&x, &bound, &net)?;
        let (_, report) =
            supervised_loss(&out.logits, &out.aux, &labels, &weights, wspec, cfg.labelfree_ce)?;
        loss_sum += report.total * chunk.len() as f64;
        let pred = argmax_labels(&out.logits.value());
        for b in 0..labels.b {
            for y in 0..labels.h {
                for x in 0..labels.w {
                    let p = pred.at(b, y, x) as usize;
                    let l = labels.at(b, y, x) as usize;
                    pc[p] += 1;
                    lc[l] += 1;
                    if p == l {
                        inter[p] += 1;
                    }
                }
            }
        }
    }
    Ok((
        loss_sum / samples.len() as f64,
        MetricsReport::from_counts(inter, pc, lc),
    ))
}

/// Global hard-Dice metrics of `params` over a sample list.
pub fn evaluate(params: &ModelParams, samples: &[Sample], cfg: &RunConfig) -> Result<MetricsReport> {
    let net = cfg.net_config();
    let head = params.get("head.weight")?;
    if head.shape().b() != net.classes {
        return Err(Error::config(format!(
            "checkpoint predicts {} classes, config expects {}",
            head.shape().b(),
            net.classes
        )));
    }
    let wspec = WaveletSpec::new(cfg.wavelet_order)?;
    Ok(val_pass(params, samples, cfg, &wspec)?.1)
}

/// Train from a fresh initialization.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = init_params(&cfg.net_config(), cfg.seed)?;
    train_with_params(cfg, params)
}

/// Train from given parameters. Emits one `step=` log line per update and
/// one `epoch=` line per epoch; aborts with a numeric error naming the
/// offending term if any loss component stops being finite.
pub fn train_with_params(cfg: &RunConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = cfg.net_config();
    let weights = cfg.loss_weights();
    let wspec = WaveletSpec::new(cfg.wavelet_order)?;
    let mut ds = build_dataset(&cfg.phantom_spec(), cfg.data_train, cfg.data_val, 1)?;
    normalize_dataset(&mut ds);

    let mut adam = Adam::new(cfg.beta1, cfg.beta2);
    let mut sched = PlateauSchedule::new(
        cfg.lr0,
        cfg.lr_min,
        cfg.patience,
        cfg.min_improvement,
        cfg.ema_decay,
    );
    let mut lr = sched.lr();
    let mut train_ema: Option<f64> = None;
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut last_metrics = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(epoch as u64 + 101)));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let refs: Vec<&Sample> = chunk.iter().map(|i| &ds.train[*i]).collect();
            let (images, labels) = stack_batch(&refs)?;
            let tape = Tape::new();
            let bound = BoundParams::bind(&tape, &params, true);
            let x = tape.constant(images);
            let out = forward(&x, &bound, &net)?;
            let (loss, report) = supervised_loss(
                &out.logits,
                &out.aux,
                &labels,
                &weights,
                &wspec,
                cfg.labelfree_ce,
            )?;
            require_finite(&report, epoch, step)?;
            let grads = loss.backward()?;
            let gmap: BTreeMap<String, Option<Tensor>> = bound
                .iter()
                .map(|(name, var)| (name.clone(), grads.get(var).cloned()))
                .collect();
            adam.step(&mut params, &gmap, lr)?;
            epoch_loss += report.total * chunk.len() as f64;
            log.push(format!(
                "step={step} epoch={epoch} lr={lr} total={} dice={} topk={} freq={}",
                report.total, report.dice_term, report.topk_term, report.freq_term
            ));
            step += 1;
        }
        let epoch_mean = epoch_loss / ds.train.len() as f64;
        train_ema = Some(match train_ema {
            None => epoch_mean,
            Some(e) => cfg.ema_decay * e + (1.0 - cfg.ema_decay) * epoch_mean,
        });

        let (val_loss, metrics) = val_pass(&params, &ds.val, cfg, &wspec)?;
        lr = sched.observe(val_loss);
        log.push(format!(
            "epoch={epoch} train_ema={} val_loss={} val_ema={} lr={lr} {}",
            train_ema.unwrap_or(f64::NAN),
            val_loss,
            sched.ema().unwrap_or(f64::NAN),
            metrics.to_record()
        ));
        last_metrics = Some(metrics);
    }

    let val_metrics = match last_metrics {
        Some(m) => m,
        None => val_pass(&params, &ds.val, cfg, &wspec)?.1,
    };
    Ok(TrainOutcome { params, log, val_metrics, final_lr: lr })
}

/// Schema check for one metrics-log line: space-separated key=value pairs,
/// all keys known for the line kind, all values numeric.
pub fn validate_log_line(line: &str) -> Result<()> {
    const STEP_KEYS: &[&str] = &["step", "epoch", "lr", "total", "dice", "topk", "freq"];
    const EPOCH_KEYS: &[&str] = &["epoch", "train_ema", "val_loss", "val_ema", "lr"];
    let mut kind: Option<&str> = None;
    for (i, token) in line.split_whitespace().enumerate() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::data(format!("token '{token}' is not key=value")))?;
        if i == 0 {
            kind = Some(key);
            if key != "step" && key != "epoch" {
                return Err(Error::data(format!("line must start with step= or epoch=, got {key}")));
            }
        }
        let known = match kind {
            Some("step") => STEP_KEYS.contains(&key),
            _ => {
                EPOCH_KEYS.contains(&key)
                    || key.starts_with("dice_")
                    || key == "gap"
                    || key.starts_with("pred_")
                    || key.starts_with("label_")
                    || key.starts_with("absent_")
            }
        };
        if !known {
            return Err(Error::data(format!("unknown log key '{key}'")));
        }
        value
            .parse::<f64>()
            .map_err(|_| Error::data(format!("log value '{value}' for '{key}' is not numeric")))?;
    }
    if kind.is_none() {
        return Err(Error::data("empty log line"));
    }
    Ok(())
}

/// Split a metrics log into plottable numeric series, keyed
/// `<kind>.<field>`; the x coordinate is the line's step or epoch number.
pub fn log_series(text: &str) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in text.lines() {
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else { continue };
        let Some((kind, x)) = first.split_once('=') else { continue };
        let Ok(x) = x.parse::<f64>() else { continue };
        for token in tokens {
            let Some((key, value)) = token.split_once('=') else { continue };
            let Ok(v) = value.parse::<f64>() else { continue };
            series.entry(format!("{kind}.{key}")).or_default().push((x, v));
        }
    }
    series
}

pub struct RunArtifacts {
    pub dir: PathBuf,
    pub outcome: TrainOutcome,
}

/// Train and persist everything under `<out_root>/<run-dir>`: the resolved
/// config, the metrics log, and the final checkpoint.
pub fn run_train(cfg: &RunConfig, out_root: &Path) -> Result<RunArtifacts> {
    let dir = out_root.join(cfg.run_dir_name());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.cfg"), cfg.serialize())?;
    let outcome = train(cfg)?;
    std::fs::write(dir.join("metrics.log"), outcome.log.join("\n") + "\n")?;
    outcome.params.save(&dir.join("model.ckpt"))?;
    Ok(RunArtifacts { dir, outcome })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: String,
    /// Per-class hard Dice on the validation split, background included.
    pub dice: Vec<f64>,
    pub gap: f64,
}

/// The five-configuration switch study: each switch off in turn, then the
/// full model, trained and scored on the same dataset and seed.
pub fn ablate(base: &RunConfig) -> Result<Vec<AblationRow>> {
    let variants: [(&str, fn(&mut RunConfig)); 5] = [
        ("no_flc", |c| c.flc = false),
        ("no_db", |c| c.db_down = false),
        ("no_sld", |c| c.sld = false),
        ("no_fal", |c| c.fal = false),
        ("full", |_| {}),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (name, tweak) in variants {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let outcome = train(&cfg)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            dice: outcome.val_metrics.per_class_dice.clone(),
            gap: outcome.val_metrics.dice_gap,
        });
    }
    Ok(rows)
}

/// Fixed-schema text table over the foreground classes.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let classes = rows.first().map_or(0, |r| r.dice.len());
    let mut out = String::from("variant ");
    for k in 1..classes {
        out.push_str(&format!("{:>8}", format!("dice_{k}")));
    }
    out.push_str(&format!("{:>8}\n", "gap"));
    for row in rows {
        out.push_str(&format!("{:<8}", row.variant));
        for k in 1..classes {
            out.push_str(&format!("{:>8.4}", row.dice[k]));
        }
        out.push_str(&format!("{:>8.4}\n", row.gap));
    }
    out
}

/// Export a dataset to the binary cache container: one meta record, then one
/// image and one label record per sample, named by split and index.
pub fn write_dataset_cache(path: &Path, ds: &Dataset) -> Result<()> {
    let meta = Tensor::from_vec(
        Shape::new(1, 1, 1, 4),
        vec![ds.size as f64, ds.classes as f64, ds.train.len() as f64, ds.val.len() as f64],
    )?;
    let mut images = vec![("meta".to_string(), meta)];
    let mut labels = Vec::new();
    for (split, samples) in [("train", &ds.train), ("val", &ds.val)] {
        for (i, s) in samples.iter().enumerate() {
            images.push((format!("{split}/{i:05}"), s.image.clone()));
            labels.push((format!("{split}/{i:05}"), s.labels.clone()));
        }
    }
    write_dataset_file(path, &images, &labels)
}

pub fn read_dataset_cache(path: &Path) -> Result<Dataset> {
    let (images, labels) = read_dataset_file(path)?;
    let mut meta = None;
    let mut img_map = BTreeMap::new();
    for (name, t) in images {
        if name == "meta" {
            meta = Some(t);
        } else {
            img_map.insert(name, t);
        }
    }
    let meta = meta.ok_or_else(|| Error::data("dataset cache has no meta record"))?;
    let md = meta.data();
    if md.len() != 4 {
        return Err(Error::data("dataset cache meta record has the wrong arity"));
    }
    let (size, classes, n_train, n_val) =
        (md[0] as usize, md[1] as usize, md[2] as usize, md[3] as usize);
    let mut lab_map: BTreeMap<String, LabelMap> = labels.into_iter().collect();
    let mut take = |split: &str, count: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let key = format!("{split}/{i:05}");
            let image = img_map
                .remove(&key)
                .ok_or_else(|| Error::data(format!("dataset cache missing image {key}")))?;
            let labels = lab_map
                .remove(&key)
                .ok_or_else(|| Error::data(format!("dataset cache missing labels {key}")))?;
            out.push(Sample { image, labels });
        }
        Ok(out)
    };
    let train = take("train", n_train)?;
    let val = take("val", n_val)?;
    Ok(Dataset { train, val, classes, size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ClassSpec;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data_size = 16;
        cfg.data_train = 4;
        cfg.data_val = 2;
        cfg.epochs = 2;
        cfg.batch = 2;
        cfg.majority_fraction = 0.15;
        cfg.minority_fraction = 0.04;
        cfg
    }

    #[test]
    fn same_seed_and_index_give_identical_bytes() {
        let spec = RunConfig::default().phantom_spec();
        let a = generate_phantom(&spec, 3).unwrap();
        let b = generate_phantom(&spec, 3).unwrap();
        assert!(a
            .image
            .data()
            .iter()
            .zip(b.image.data().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        for y in 0..spec.size {
            for x in 0..spec.size {
                assert_eq!(a.labels.at(0, y, x), b.labels.at(0, y, x));
            }
        }
        let c = generate_phantom(&spec, 4).unwrap();
        assert!(a.image.data() != c.image.data());
    }

    #[test]
    fn noiseless_single_ellipse_support_equals_labels() {
        let spec = PhantomSpec {
            size: 32,
            noise: 0.0,
            seed: 5,
            classes: vec![ClassSpec {
                fraction: 0.1,
                band: Band::Low,
                shape: ShapeKind::Ellipse,
            }],
        };
        let s = generate_phantom(&spec, 0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let lit = s.image.at(0, 0, y, x) != 0.0;
                assert_eq!(lit, s.labels.at(0, y, x) == 1, "pixel {y},{x}");
            }
        }
    }

    #[test]
    fn area_fractions_are_roughly_honored() {
        let spec = RunConfig::default().phantom_spec();
        for index in 0..4 {
            let s = generate_phantom(&spec, index).unwrap();
            let total = (spec.size * spec.size) as f64;
            for (ci, class) in spec.classes.iter().enumerate() {
                let count = (0..spec.size)
                    .flat_map(|y| (0..spec.size).map(move |x| (y, x)))
                    .filter(|(y, x)| s.labels.at(0, *y, *x) as usize == ci + 1)
                    .count() as f64;
                let got = count / total;
                assert!(
                    (got - class.fraction).abs() < 0.5 * class.fraction,
                    "class {ci} index {index}: fraction {got} wants {}",
                    class.fraction
                );
            }
        }
    }

    #[test]
    fn minority_texture_energy_sits_in_the_high_band() {
        // Noise-free blob-only phantom: the image IS the texture, so the
        // energy split can be recomputed from scratch.
        let spec = PhantomSpec {
            size: 64,
            noise: 0.0,
            seed: 11,
            classes: vec![ClassSpec {
                fraction: 0.02,
                band: Band::High,
                shape: ShapeKind::Blob,
            }],
        };
        let mask = build_mask(64, 64, 0.25).unwrap();
        for index in 0..6 {
            let s = generate_phantom(&spec, index).unwrap();
            let (inside, outside) = fft2_centered(&s.image).energy_split(&mask).unwrap();
            let frac = outside / (inside + outside);
            assert!(frac >= HIGH_BAND_MIN_OUTSIDE, "index {index}: {frac}");
        }
    }

    #[test]
    fn infeasible_fractions_are_rejected() {
        let mut spec = RunConfig::default().phantom_spec();
        spec.classes[0].fraction = 0.99;
        assert!(generate_phantom(&spec, 0).is_err());
    }

    #[test]
    fn normalization_uses_training_statistics_only() {
        let spec = RunConfig::default().phantom_spec();
        let mut ds = build_dataset(&spec, 6, 3, 1).unwrap();
        let raw_val: Vec<Tensor> = ds.val.iter().map(|s| s.image.clone()).collect();
        let norm = normalize_dataset(&mut ds);

        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        for s in &ds.train {
            sum += s.image.data().iter().sum::<f64>();
            sq += s.image.data().iter().map(|v| v * v).sum::<f64>();
            count += s.image.shape().numel();
        }
        let mean = sum / count as f64;
        let std = (sq / count as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 1e-10, "train mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "train std {std}");

        // Validation pixels transformed with the train statistics exactly.
        for (orig, now) in raw_val.iter().zip(ds.val.iter()) {
            for (o, n) in orig.data().iter().zip(now.image.data().iter()) {
                let want = (o - norm.mean) / (norm.std + 1e-12);
                assert!((n - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_dataset_normalizes_to_zeros() {
        let img = Tensor::filled(Shape::new(1, 1, 8, 8), 3.5);
        let samples = vec![
            Sample { image: img.clone(), labels: LabelMap::zeros(1, 8, 8) },
            Sample { image: img, labels: LabelMap::zeros(1, 8, 8) },
        ];
        let norm = Normalizer::fit(&samples);
        let out = norm.apply(&samples[0].image);
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn threaded_generation_matches_serial() {
        let spec = RunConfig::default().phantom_spec();
        let a = build_dataset(&spec, 5, 3, 1).unwrap();
        let b = build_dataset(&spec, 5, 3, 3).unwrap();
        for (sa, sb) in a.train.iter().chain(a.val.iter()).zip(b.train.iter().chain(b.val.iter()))
        {
            assert!(sa
                .image
                .data()
                .iter()
                .zip(sb.image.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn plateau_schedule_halves_exactly_at_patience_boundaries() {
        // Stagnant loss: the EMA never improves, so the rate halves every
        // `patience` observations after the first, flooring at lr_min.
        let mut sched = PlateauSchedule::new(8e-6, 1e-6, 3, 1e-4, 0.95);
        let mut lrs = Vec::new();
        for _ in 0..13 {
            lrs.push(sched.observe(1.0));
        }
        let want = [
            8e-6, 8e-6, 8e-6, 4e-6, 4e-6, 4e-6, 2e-6, 2e-6, 2e-6, 1e-6, 1e-6, 1e-6, 1e-6,
        ];
        assert_eq!(lrs.len(), want.len());
        for (i, (got, want)) in lrs.iter().zip(want.iter()).enumerate() {
            assert_eq!(got, want, "observation {i}");
        }
    }

    #[test]
    fn improving_losses_keep_the_rate() {
        let mut sched = PlateauSchedule::new(1e-3, 1e-6, 2, 1e-4, 0.5);
        // Halving losses improve the EMA by far more than min_improvement.
        for i in 0..10 {
            let lr = sched.observe(1.0 / (1 << i) as f64);
            assert_eq!(lr, 1e-3, "observation {i}");
        }
    }

    #[test]
    fn adam_moves_exactly_the_parameters_with_gradients() {
        let cfg = tiny_cfg().net_config();
        let mut params = init_params(&cfg, 3).unwrap();
        let before = params.clone();
        let mut grads: BTreeMap<String, Option<Tensor>> = BTreeMap::new();
        let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = params.get(name).unwrap();
            if i % 2 == 0 {
                grads.insert(name.clone(), Some(Tensor::filled(t.shape(), 0.5)));
            } else {
                grads.insert(name.clone(), None);
            }
        }
        let mut adam = Adam::new(0.9, 0.999);
        adam.step(&mut params, &grads, 1e-3).unwrap();
        for (i, name) in names.iter().enumerate() {
            let b = before.get(name).unwrap().data().to_vec();
            let a = params.get(name).unwrap().data().to_vec();
            if i % 2 == 0 {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x != y), "{name} unchanged");
            } else {
                assert_eq!(a, b, "{name} moved without a gradient");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_parse() {
        let cfg = tiny_cfg();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert!(!a.log.is_empty());
        for line in &a.log {
            validate_log_line(line).unwrap();
        }
        // Training moved the parameters.
        let init = init_params(&cfg.net_config(), cfg.seed).unwrap();
        let moved = a
            .params
            .iter()
            .zip(init.iter())
            .any(|((_, t1), (_, t0))| t1.data() != t0.data());
        assert!(moved);
    }

    #[test]
    fn poisoned_parameters_abort_naming_a_term() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg.net_config(), cfg.seed).unwrap();
        let bias = params.get("head.bias").unwrap().clone();
        let mut data = bias.data().to_vec();
        data[0] = f64::NAN;
        params
            .set("head.bias", Tensor::from_vec(bias.shape(), data).unwrap())
            .unwrap();
        let err = match train_with_params(&cfg, params) {
            Ok(_) => panic!("expected a numeric abort"),
            Err(e) => e,
        };
        assert!(matches!(err, Error::Numeric(_)));
        let msg = err.to_string();
        assert!(msg.contains("term"), "{msg}");
        assert!(msg.contains("epoch"), "{msg}");
    }

    #[test]
    fn log_series_split_by_kind_and_key() {
        let text = "step=0 epoch=0 lr=0.004 total=1.5\n\
                    step=1 epoch=0 lr=0.004 total=1.25\n\
                    epoch=0 val_loss=1.75 gap=0.5\n";
        let series = log_series(text);
        assert_eq!(series["step.total"], vec![(0.0, 1.5), (1.0, 1.25)]);
        assert_eq!(series["epoch.val_loss"], vec![(0.0, 1.75)]);
        assert_eq!(series["epoch.gap"], vec![(0.0, 0.5)]);
        assert!(!series.contains_key("step.step"));
    }

    #[test]
    fn dataset_cache_roundtrips_bit_exactly() {
        let spec = RunConfig::default().phantom_spec();
        let ds = build_dataset(&spec, 3, 2, 1).unwrap();
        let path = std::env::temp_dir().join("frequnet_cache_roundtrip.ds");
        write_dataset_cache(&path, &ds).unwrap();
        let back = read_dataset_cache(&path).unwrap();
        std::fs::remove_file(&path).ok();
        assert_eq!(back.train.len(), 3);
        assert_eq!(back.val.len(), 2);
        assert_eq!(back.classes, ds.classes);
        assert_eq!(back.size, ds.size);
        for (a, b) in ds.train.iter().chain(ds.val.iter()).zip(back.train.iter().chain(back.val.iter())) {
            assert!(a
                .image
                .data()
                .iter()
                .zip(b.image.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            for y in 0..ds.size {
                for x in 0..ds.size {
                    assert_eq!(a.labels.at(0, y, x), b.labels.at(0, y, x));
                }
            }
        }
    }

    #[test]
    fn schedule_drives_training_rate_from_config() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let out = train(&cfg).unwrap();
        assert_eq!(out.final_lr, cfg.lr0);
        let epoch_lines: Vec<&String> =
            out.log.iter().filter(|l| l.starts_with("epoch=")).collect();
        assert_eq!(epoch_lines.len(), 1);
    }
}

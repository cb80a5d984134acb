//! Discriminator, branch losses and the joint trainer.
//!
//! Each training step runs three branches through the same discriminator:
//! adapted normal features (target 0), globally synthesized features from
//! [`crate::gas`] (target 1) and adapted features of a locally synthesized
//! image from [`crate::las`] (target = downsampled anomaly mask, focal loss
//! with online hard example mining). The unweighted sum of the enabled
//! branch losses updates the adaptor and the discriminator with Adam.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::featpipe::{adapt, AdaptorParams, FeatureMap};
use crate::gas::{fit_hypersphere_at, run_gas, HYPERSPHERE_COVERAGE, GasConfig, GasObjective, Hypothesis};
use crate::image::Mask;
use crate::ndgrad::{sigmoid, Adam, Tape, Tensor, Var};
use crate::rng::{seeded, Rng};

/// Manifold inner radius of the desk profile.
pub const DESK_R1: f64 = 4.0;

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Single-hidden-layer MLP `C -> hidden -> 1` with a leaky rectifier and a
/// sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub slope: f64,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn init(channels: usize, hidden: usize, rng: &mut Rng) -> Self {
        let xavier = |fan_in: usize, fan_out: usize, rng: &mut Rng, shape: &[usize]| {
            let std = libm::sqrt(2.0 / (fan_in + fan_out) as f64);
            let normal = Normal::new(0.0, std).unwrap();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
        };
        Self {
            w1: xavier(channels, hidden, rng, &[channels, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: xavier(hidden, 1, rng, &[hidden, 1]),
            b2: Tensor::zeros(&[1]),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[channels, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    fn check_width(&self, channels: usize) -> Result<()> {
        if channels != self.channels() {
            return Err(shape_err!("discriminator expects {} channels, got {channels}", self.channels()));
        }
        Ok(())
    }

    /// Record the forward pass on `tape` for `x: [n, C]`; returns `[n, 1]`
    /// confidences.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &DiscVars) -> Result<Var> {
        let h = tape.matmul(x, params.w1)?;
        let h = tape.add(h, params.b1)?;
        let h = tape.leaky_relu(h, self.slope)?;
        let o = tape.matmul(h, params.w2)?;
        let o = tape.add(o, params.b2)?;
        tape.sigmoid(o)
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> Result<DiscVars> {
        Ok(DiscVars {
            w1: tape.leaf(self.w1.clone(), trainable)?,
            b1: tape.leaf(self.b1.clone(), trainable)?,
            w2: tape.leaf(self.w2.clone(), trainable)?,
            b2: tape.leaf(self.b2.clone(), trainable)?,
        })
    }

    /// Untracked per-row confidence for an `[n, C]` block.
    pub fn confidence(&self, rows: &[f64], channels: usize) -> Result<Vec<f64>> {
        self.check_width(channels)?;
        let hidden = self.hidden();
        let (w1, b1, w2, b2) = (self.w1.data(), self.b1.data(), self.w2.data(), self.b2.data()[0]);
        let mut out = Vec::with_capacity(rows.len() / channels.max(1));
        let mut h = vec![0.0; hidden];
        for row in rows.chunks(channels) {
            h.copy_from_slice(b1);
            for (i, &x) in row.iter().enumerate() {
                for (hj, w) in h.iter_mut().zip(&w1[i * hidden..(i + 1) * hidden]) {
                    *hj += x * w;
                }
            }
            let mut o = b2;
            for (hj, w) in h.iter().zip(w2) {
                let a = if *hj > 0.0 { *hj } else { self.slope * hj };
                o += a * w;
            }
            out.push(sigmoid(o));
        }
        Ok(out)
    }

    /// Per-location anomaly confidence of a feature map, row-major `H x W`.
    pub fn discriminate(&self, u: &FeatureMap) -> Result<Vec<f64>> {
        self.confidence(&u.grid.data, u.channels())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiscVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// The anomaly branch loss `mean(-ln z)` and its gradient with respect to
/// the input features. Parameters are recorded as constants.
impl GasObjective for Discriminator {
    fn loss_and_grad(&self, g: &[f64], channels: usize) -> Result<(f64, Vec<f64>)> {
        self.check_width(channels)?;
        let mut tape = Tape::new();
        let params = self.vars(&mut tape, false)?;
        let x = tape.leaf(Tensor::new(&[g.len() / channels, channels], g.to_vec())?, true)?;
        let z = self.forward(&mut tape, x, &params)?;
        let loss = bce_mean(&mut tape, z, 1.0)?;
        tape.backward(loss)?;
        let grad = tape.grad(x).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; g.len()]);
        Ok((tape.value(loss).item()?, grad))
    }
}

/// Mean binary cross-entropy of confidences `z` against a constant target.
pub fn bce_mean(tape: &mut Tape, z: Var, target: f64) -> Result<Var> {
    let zc = tape.clamp(z, PROB_EPS, 1.0 - PROB_EPS)?;
    let mut terms = Vec::new();
    if target != 0.0 {
        let l = tape.log(zc)?;
        terms.push(tape.scale(l, -target)?);
    }
    if target != 1.0 {
        let om = tape.one_minus(zc)?;
        let l = tape.log(om)?;
        terms.push(tape.scale(l, -(1.0 - target))?);
    }
    let per = if terms.len() == 2 { tape.add(terms[0], terms[1])? } else { terms[0] };
    tape.mean(per)
}

/// Per-pixel focal loss `-(1 - p_t)^gamma ln p_t` with `p_t = z` on
/// positive pixels and `1 - z` on negatives. Returns a rank-1 tensor.
pub fn focal_per_pixel(tape: &mut Tape, z: Var, mask: &[bool], gamma: f64) -> Result<Var> {
    let n = tape.value(z).len();
    if mask.len() != n {
        return Err(shape_err!("focal target has {} pixels, confidences {n}", mask.len()));
    }
    let z = tape.reshape(z, &[n])?;
    let zc = tape.clamp(z, PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = tape.constant(Tensor::new(&[n], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?)?;
    let neg = tape.constant(Tensor::new(&[n], mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect())?)?;
    let om = tape.one_minus(zc)?;
    let a = tape.mul(zc, pos)?;
    let b = tape.mul(om, neg)?;
    let p_t = tape.add(a, b)?;
    let log_p = tape.log(p_t)?;
    let neg_log = tape.scale(log_p, -1.0)?;
    if gamma == 0.0 {
        return Ok(neg_log);
    }
    let q = tape.one_minus(p_t)?;
    let w = tape.pow(q, gamma)?;
    tape.mul(w, neg_log)
}

/// Indices of the `floor(keep * n)` largest values, ties broken by index.
pub fn hardest_indices(values: &[f64], keep: f64) -> Result<Vec<usize>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(config_err!("OHEM keep fraction must be in (0, 1], got {keep}"));
    }
    let k = libm::floor(keep * values.len() as f64) as usize;
    if k == 0 {
        return Err(data_err!("OHEM keeps no pixels out of {}", values.len()));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Focal loss averaged over the hardest `keep` fraction of pixels.
pub fn loss_las(tape: &mut Tape, z: Var, mask: &[bool], gamma: f64, keep: f64) -> Result<Var> {
    let per = focal_per_pixel(tape, z, mask, gamma)?;
    let idx = hardest_indices(tape.value(per).data(), keep)?;
    let kept = tape.gather(per, &idx)?;
    tape.mean(kept)
}

/// Which branch losses contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branches {
    pub normal: bool,
    pub gas: bool,
    pub las: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self { normal: true, gas: true, las: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_adaptor: f64,
    pub lr_discriminator: f64,
    pub focal_gamma: f64,
    pub ohem_keep: f64,
    /// Hidden width of the discriminator; `None` uses the feature width.
    pub hidden: Option<usize>,
    pub seed: u64,
    pub branches: Branches,
    pub gas: GasConfig,
    /// Refit the hypersphere each epoch from this fraction of the training
    /// images (at least one).
    pub hypersphere_refresh: Option<f64>,
    /// Distance quantile used as the hypersphere inner radius.
    pub hypersphere_coverage: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 640,
            batch_size: 8,
            lr_adaptor: 1e-4,
            lr_discriminator: 2e-4,
            focal_gamma: 2.0,
            ohem_keep: 0.5,
            hidden: None,
            seed: 0,
            branches: Branches::default(),
            gas: GasConfig::default(),
            hypersphere_refresh: None,
            hypersphere_coverage: HYPERSPHERE_COVERAGE,
        }
    }

    /// CPU-sized defaults for the toy extractor: fewer, larger steps, and a
    /// manifold shell wide enough to leave the 8-channel normal cloud.
    pub fn desk() -> Self {
        let mut cfg = Self { epochs: 128, batch_size: 4, lr_adaptor: 3e-3, lr_discriminator: 6e-3, ..Self::paper() };
        cfg.gas.hypothesis = Hypothesis::manifold(DESK_R1);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_adaptor > 0.0 && self.lr_discriminator > 0.0) {
            return Err(config_err!("learning rates must be > 0"));
        }
        if !(self.ohem_keep > 0.0 && self.ohem_keep <= 1.0) {
            return Err(config_err!("model.ohem_keep must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("model.batch_size must be >= 1"));
        }
        if self.focal_gamma < 0.0 {
            return Err(config_err!("model.focal_gamma must be >= 0"));
        }
        if !(self.branches.normal || self.branches.gas || self.branches.las) {
            return Err(config_err!("at least one loss branch must be enabled"));
        }
        if let Some(f) = self.hypersphere_refresh {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err!("hypersphere refresh fraction must be in (0, 1]"));
            }
        }
        if !(self.hypersphere_coverage > 0.0 && self.hypersphere_coverage < 1.0) {
            return Err(config_err!("gas.radius_percentile must be in (0, 100)"));
        }
        self.gas.validate()
    }
}

/// Locally synthesized anomaly in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAnomaly {
    /// Pre-adaptor features of the synthesized image.
    pub features: FeatureMap,
    /// Feature-grid ground truth.
    pub mask: Mask,
}

/// Supplies pre-adaptor features of the normal training images.
pub trait FeatureSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn normal(&mut self, index: usize) -> Result<FeatureMap>;
    /// A fresh local anomaly built from training image `index`; `None` when
    /// the source cannot synthesize images.
    fn local_anomaly(&mut self, index: usize, rng: &mut Rng) -> Result<Option<LocalAnomaly>>;
}

/// Branch losses of one step (or epoch means).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub normal: f64,
    pub gas: f64,
    pub las: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: StepLosses,
}

/// Gradient magnitude per parameter group, for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradNorms {
    pub adaptor: f64,
    pub discriminator: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub adaptor: AdaptorParams,
    pub discriminator: Discriminator,
    pub log: Vec<EpochLog>,
    rng: Rng,
    opt_adaptor: Adam,
    opt_disc: Adam,
}

fn stack(maps: &[&FeatureMap]) -> Result<(Vec<f64>, usize)> {
    let c = maps.first().ok_or_else(|| data_err!("empty batch"))?.channels();
    let mut rows = Vec::new();
    for m in maps {
        if m.channels() != c {
            return Err(shape_err!("batch mixes {c} and {} channels", m.channels()));
        }
        rows.extend_from_slice(&m.grid.data);
    }
    Ok((rows, c))
}

impl Trainer {
    pub fn new(channels: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let adaptor = AdaptorParams::init(channels, &mut rng);
        let discriminator = Discriminator::init(channels, config.hidden.unwrap_or(channels), &mut rng);
        let opt_adaptor = Adam::new(&[&adaptor.weight, &adaptor.bias], config.lr_adaptor);
        let opt_disc = Adam::new(
            &[&discriminator.w1, &discriminator.b1, &discriminator.w2, &discriminator.b2],
            config.lr_discriminator,
        );
        Ok(Self { config, adaptor, discriminator, log: Vec::new(), rng, opt_adaptor, opt_disc })
    }

    /// Current state of the trainer's random stream.
    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    pub fn train(&mut self, source: &mut dyn FeatureSource) -> Result<&[EpochLog]> {
        if source.is_empty() {
            return Err(data_err!("training split is empty"));
        }
        for epoch in 0..self.config.epochs {
            self.run_epoch(epoch, source)?;
        }
        Ok(&self.log)
    }

    pub fn run_epoch(&mut self, epoch: usize, source: &mut dyn FeatureSource) -> Result<StepLosses> {
        if let Some(fraction) = self.config.hypersphere_refresh {
            self.refresh_hypersphere(source, fraction)?;
        }
        let mut order: Vec<usize> = (0..source.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
        let mut sum = StepLosses::default();
        let mut steps = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let (l, _) = self.step(batch, source)?;
            sum.normal += l.normal;
            sum.gas += l.gas;
            sum.las += l.las;
            sum.total += l.total;
            steps += 1.0;
        }
        let mean = StepLosses { normal: sum.normal / steps, gas: sum.gas / steps, las: sum.las / steps, total: sum.total / steps };
        self.log.push(EpochLog { epoch, losses: mean });
        Ok(mean)
    }

    /// Refit center and radii on adapted features of a random subset.
    pub fn refresh_hypersphere(&mut self, source: &mut dyn FeatureSource, fraction: f64) -> Result<()> {
        let n = source.len();
        let take = (libm::ceil(fraction * n as f64) as usize).clamp(1, n);
        let picks = rand::seq::index::sample(&mut self.rng, n, take).into_vec();
        let mut rows = Vec::new();
        let mut channels = 0;
        for i in picks {
            let u = adapt(&source.normal(i)?, &self.adaptor)?;
            channels = u.channels();
            rows.extend_from_slice(&u.grid.data);
        }
        self.config.gas.hypothesis = fit_hypersphere_at(&rows, channels, self.config.hypersphere_coverage)?;
        Ok(())
    }

    /// One optimization step over the given training indices.
    pub fn step(&mut self, batch: &[usize], source: &mut dyn FeatureSource) -> Result<(StepLosses, GradNorms)> {
        let cfg = self.config.clone();
        let normals = batch.iter().map(|&i| source.normal(i)).collect::<Result<Vec<_>>>()?;
        let (t_rows, c) = stack(&normals.iter().collect::<Vec<_>>())?;
        let n = t_rows.len() / c;

        let mut las = Vec::new();
        if cfg.branches.las {
            for &i in batch {
                let sample = source
                    .local_anomaly(i, &mut self.rng)?
                    .ok_or_else(|| data_err!("feature source cannot synthesize local anomalies; disable the las branch"))?;
                las.push(sample);
            }
        }

        let mut tape = Tape::new();
        let wa = tape.leaf(self.adaptor.weight.clone(), true)?;
        let ba = tape.leaf(self.adaptor.bias.clone(), true)?;
        let dv = self.discriminator.vars(&mut tape, true)?;
        let adapt_rows = |tape: &mut Tape, rows: Vec<f64>| -> Result<Var> {
            let t = tape.constant(Tensor::new(&[rows.len() / c, c], rows)?)?;
            let m = tape.matmul(t, wa)?;
            tape.add(m, ba)
        };

        let u = adapt_rows(&mut tape, t_rows)?;
        let mut losses = StepLosses::default();
        let mut terms = Vec::new();

        let mut u_las = None;
        let mut las_mask = Vec::new();
        if cfg.branches.las {
            let refs: Vec<&FeatureMap> = las.iter().map(|s| &s.features).collect();
            let (rows, c2) = stack(&refs)?;
            if c2 != c || rows.len() != n * c {
                return Err(shape_err!("local anomaly features do not match normal features"));
            }
            for s in &las {
                if s.mask.data.len() != s.features.grid.locations() {
                    return Err(shape_err!("local anomaly mask does not match feature grid"));
                }
                las_mask.extend_from_slice(&s.mask.data);
            }
            u_las = Some(adapt_rows(&mut tape, rows)?);
        }

        if cfg.branches.normal {
            let z = self.discriminator.forward(&mut tape, u, &dv)?;
            let l = bce_mean(&mut tape, z, 0.0)?;
            losses.normal = tape.value(l).item()?;
            terms.push(l);
        }

        if cfg.branches.gas {
            let u_vals = tape.value(u).data().to_vec();
            let las_vals = u_las.map(|v| tape.value(v).data().to_vec());
            let batch = run_gas(&u_vals, c, las_vals.as_deref(), &self.discriminator, &cfg.gas, &mut self.rng)?;
            // v = u + (v - u) with the offset held constant, so gradients
            // still reach the adaptor through u.
            let offset: Vec<f64> = batch.output.iter().zip(&u_vals).map(|(v, x)| v - x).collect();
            let off = tape.constant(Tensor::new(&[n, c], offset)?)?;
            let v = tape.add(u, off)?;
            let z = self.discriminator.forward(&mut tape, v, &dv)?;
            let l = bce_mean(&mut tape, z, 1.0)?;
            losses.gas = tape.value(l).item()?;
            terms.push(l);
            if let (Some(reproj), Some(ul), Some(lv)) = (batch.las_reprojected, u_las, las_vals) {
                let offset: Vec<f64> = reproj.iter().zip(&lv).map(|(a, b)| a - b).collect();
                let off = tape.constant(Tensor::new(&[n, c], offset)?)?;
                u_las = Some(tape.add(ul, off)?);
            }
        }

        if let Some(ul) = u_las {
            let z = self.discriminator.forward(&mut tape, ul, &dv)?;
            let l = loss_las(&mut tape, z, &las_mask, cfg.focal_gamma, cfg.ohem_keep)?;
            losses.las = tape.value(l).item()?;
            terms.push(l);
        }

        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        losses.total = tape.value(total).item()?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        tape.backward(total)?;

        let grad_norm = |vars: &[Var]| {
            libm::sqrt(vars.iter().filter_map(|&v| tape.grad(v)).flat_map(|g| g.data().iter().map(|x| x * x)).sum())
        };
        let norms = GradNorms { adaptor: grad_norm(&[wa, ba]), discriminator: grad_norm(&[dv.w1, dv.b1, dv.w2, dv.b2]) };

        let zero_a = [Tensor::zeros(self.adaptor.weight.shape()), Tensor::zeros(self.adaptor.bias.shape())];
        let ga = [tape.grad(wa).unwrap_or(&zero_a[0]), tape.grad(ba).unwrap_or(&zero_a[1])];
        self.opt_adaptor
            .step(&mut [&mut self.adaptor.weight, &mut self.adaptor.bias], &[Some(ga[0]), Some(ga[1])])?;
        let d = &mut self.discriminator;
        self.opt_disc.step(
            &mut [&mut d.w1, &mut d.b1, &mut d.w2, &mut d.b2],
            &[tape.grad(dv.w1), tape.grad(dv.b1), tape.grad(dv.w2), tape.grad(dv.b2)],
        )?;
        Ok((losses, norms))
    }

    pub fn hypothesis(&self) -> &Hypothesis {
        &self.config.gas.hypothesis
    }

    /// Draw a value from the trainer's stream; used to derive child seeds.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

/// Features held in memory, without local anomaly synthesis.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedSource {
    pub maps: Vec<FeatureMap>,
}

impl FeatureSource for PrecomputedSource {
    fn len(&self) -> usize {
        self.maps.len()
    }
    fn normal(&mut self, index: usize) -> Result<FeatureMap> {
        self.maps.get(index).cloned().ok_or_else(|| data_err!("no feature map {index}"))
    }
    fn local_anomaly(&mut self, _index: usize, _rng: &mut Rng) -> Result<Option<LocalAnomaly>> {
        Ok(None)
    }
}

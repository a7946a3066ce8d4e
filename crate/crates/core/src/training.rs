//! Multi-stage angular loss, Adam, and the training regimes.
//!
//! Sample pipeline, per epoch and per record:
//!
//! ```text
//! regime generator → geometric augmentation → gamma encode → model
//! ```
//!
//! Every record draws from its own RNG stream derived from
//! `(seed, epoch, index)`, so runs are reproducible bit for bit.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{
    geometric_augment, make_saf_pair, make_uip_pair_in, sample_uip_illuminant, sie_next, AugmentationConfig, LabelPool, LabeledImage,
    SieStats, TrainingPair,
};
use crate::color::{angular_error, gamma_encode, Domain, GAMMA};
use crate::dataio::UIP_SENSOR;
use crate::error::{Error, Result};
use crate::evaluation::{predict_stages, ModelInputOptions};
use crate::network::{image_batch, CascadeModel, ModelConfig};
use crate::rng;
use crate::tensor::gradcheck::{check, GradCheckOptions, GradCheckReport};
use crate::tensor::{Graph, NodeId, Tensor};

/// Clamp margin keeping `acos` differentiable at perfect predictions.
pub const ACOS_DELTA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Unprocessed sRGB images relit with sampled illuminants.
    Uip,
    /// Labelled raw images corrected, then relit with sampled illuminants.
    Saf,
    /// One sensor's records mixed with reshuffled and randomly relit copies.
    SingleSie,
    /// [`Regime::SingleSie`] starting from a loaded checkpoint.
    Finetune,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uip" => Ok(Self::Uip),
            "saf" => Ok(Self::Saf),
            "single" | "single_sie" => Ok(Self::SingleSie),
            "finetune" => Ok(Self::Finetune),
            other => Err(Error::invalid(format!("unknown regime `{other}` (uip, saf, single, finetune)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is halved; `epochs / 2`
    /// when unset.
    pub lr_halve_at: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub regime: Regime,
    pub seed: u64,
    /// Validate every this many epochs (and always on the last); 0 disables.
    pub val_every: usize,
    /// Side validation images are resized to before inference.
    pub val_input_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            batch_size: 16,
            lr: 3e-4,
            lr_halve_at: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            regime: Regime::SingleSie,
            seed: 0,
            val_every: 1,
            val_input_size: None,
        }
    }
}

impl TrainConfig {
    pub fn halve_at(&self) -> usize {
        self.lr_halve_at.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.halve_at() > self.epochs {
            return Err(Error::invalid(format!("lr_halve_at {} exceeds epochs {}", self.halve_at(), self.epochs)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }

    /// Learning rate used during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.halve_at() {
            self.lr / 2.0
        } else {
            self.lr
        }
    }
}

/// `Σ_i (180/π)·acos(clamp(cos(ℓ, ℓ'_i)))`, averaged over the batch.
/// `preds` are `[N, 3]` nodes, `labels` is `[N, 3]`.
pub fn multistage_angular_loss(g: &mut Graph, preds: &[NodeId], labels: NodeId) -> Result<NodeId> {
    let n = g.shape(labels)[0];
    if preds.is_empty() {
        return Err(Error::invalid("loss needs at least one stage prediction"));
    }
    check_nonzero_rows(g.value(labels), "label")?;
    let lab = g.l2_normalize(labels, 1)?;
    let mut total: Option<NodeId> = None;
    for &p in preds {
        if g.shape(p) != g.shape(labels) {
            return Err(Error::Shape(format!("prediction {:?} vs labels {:?}", g.shape(p), g.shape(labels))));
        }
        check_nonzero_rows(g.value(p), "prediction")?;
        let pn = g.l2_normalize(p, 1)?;
        let prod = g.mul(pn, lab)?;
        let cos = g.sum_axis(prod, 1)?;
        let ang = g.acos_clamped(cos, -1.0 + ACOS_DELTA, 1.0 - ACOS_DELTA)?;
        let s = g.sum(ang)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    g.scale(total.expect("non-empty"), 180.0 / std::f64::consts::PI / n as f64)
}

fn check_nonzero_rows(t: &Tensor, what: &str) -> Result<()> {
    for row in t.data().chunks(3) {
        if row.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-12 {
            return Err(Error::invalid(format!("zero-norm {what}")));
        }
    }
    Ok(())
}

/// Adam with bias correction. Moments are created on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Updates `params` in place from `grads` (same order and lengths).
    /// Nothing is modified when any gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(Error::invalid(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Shape(format!("gradient of `{name}` has {} values, parameter {}", g.len(), p.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault(format!("non-finite gradient for parameter `{name}`")));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (_, p)) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_deg: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mean_deg: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub sie: SieStats,
    /// Channel values clipped to 1 by the gamma encode.
    pub clipped_values: usize,
    pub conf_fallbacks: usize,
}

/// Checks that `samples` suit `regime`.
pub fn check_regime_data(regime: Regime, samples: &[LabeledImage]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::RegimeMismatch("no training samples".into()));
    }
    match regime {
        Regime::Uip => {
            if let Some(s) = samples.iter().find(|s| s.image.domain != Domain::Uip || s.sensor_id != UIP_SENSOR) {
                return Err(Error::RegimeMismatch(format!(
                    "uip regime needs unprocessed sRGB data (sensor `{UIP_SENSOR}`), found sensor `{}`",
                    s.sensor_id
                )));
            }
        }
        Regime::Saf | Regime::SingleSie | Regime::Finetune => {
            if samples.iter().any(|s| s.sensor_id == UIP_SENSOR || s.image.domain == Domain::Uip) {
                return Err(Error::RegimeMismatch(format!("{regime:?} needs labelled raw data, found unprocessed sRGB")));
            }
            if regime != Regime::Saf {
                let mut sensors: Vec<&str> = samples.iter().map(|s| s.sensor_id.as_str()).collect();
                sensors.sort_unstable();
                sensors.dedup();
                if sensors.len() != 1 {
                    return Err(Error::RegimeMismatch(format!("{regime:?} needs exactly one sensor, found {sensors:?}")));
                }
            }
        }
    }
    Ok(())
}

fn regime_pair(
    regime: Regime,
    sample: &LabeledImage,
    pool: &LabelPool,
    rng: &mut rng::Rng,
    aug: &AugmentationConfig,
    stats: &mut SieStats,
) -> Result<TrainingPair> {
    match regime {
        Regime::Uip => make_uip_pair_in(&sample.image, rng, aug.uip_channel_range),
        Regime::Saf => make_saf_pair(sample, rng, aug.uip_channel_range),
        Regime::SingleSie | Regime::Finetune => sie_next(sample, pool, rng, aug, stats),
    }
}

/// Mean stage-M angular error of `model` on `val`.
pub fn validation_error(model: &CascadeModel, val: &[LabeledImage], opts: &ModelInputOptions) -> Result<f64> {
    let images: Vec<_> = val.iter().map(|s| &s.image).collect();
    let preds = predict_stages(model, &images, opts, 32)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(val) {
        total += angular_error(*p.last().expect("stage"), s.label.rgb())?;
    }
    Ok(total / val.len() as f64)
}

/// Trains `model` in place. `on_epoch` sees each log record as it is
/// produced.
pub fn train(
    model: &mut CascadeModel,
    train_set: &[LabeledImage],
    val_set: Option<&[LabeledImage]>,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    aug.validate()?;
    check_regime_data(cfg.regime, train_set)?;
    let pool = LabelPool::from_samples(train_set);
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut report = TrainReport::default();
    let val_opts = ModelInputOptions { half_resolution: false, input_size: cfg.val_input_size };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::child(cfg.seed, epoch as u64, u64::MAX));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len() * 3);
            for &i in chunk {
                let mut r = rng::child(cfg.seed, epoch as u64, i as u64);
                let pair = regime_pair(cfg.regime, &train_set[i], &pool, &mut r, aug, &mut report.sie)?;
                let (img, label) = geometric_augment(&pair.input, pair.label, &mut r, aug)?;
                let enc = gamma_encode(&img, GAMMA)?;
                report.clipped_values += enc.clipped;
                inputs.push(enc.image);
                labels.extend(label.rgb());
            }
            let refs: Vec<_> = inputs.iter().collect();
            let mut g = Graph::new();
            let ids = model.bind(&mut g, true)?;
            let x = g.constant(image_batch(&refs)?)?;
            let y = g.constant(Tensor::new(vec![chunk.len(), 3], labels)?)?;
            let out = model.forward(&mut g, &ids, x)?;
            report.conf_fallbacks += out.conf_fallbacks;
            let loss = multistage_angular_loss(&mut g, &out.stages, y)?;
            loss_sum += g.value(loss).item()? * chunk.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = ids
                .iter()
                .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(id).len()]))
                .collect();
            adam.step(model.params_mut(), &grads, lr)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let val_mean_deg = match val_set {
            Some(v) if !v.is_empty() && cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || last) => {
                Some(validation_error(model, v, &val_opts)?)
            }
            _ => None,
        };
        let log = EpochLog { epoch: epoch + 1, loss_deg: loss_sum / train_set.len() as f64, val_mean_deg, lr };
        on_epoch(&log)?;
        report.epochs.push(log);
    }
    Ok(report)
}

/// Finite-difference check of the multi-stage loss through a toy cascade
/// (fresh weights, small random biases), with respect to every parameter
/// tensor.
pub fn cascade_gradcheck(stages: usize, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut model = CascadeModel::new(ModelConfig { stages, init_seed: seed, ..Default::default() })?;
    let mut r = rng::seeded(seed ^ 0x9e37);
    // Zero biases put every dead unit exactly on a relu kink, where central
    // differences and the subgradient legitimately disagree.
    for (name, t) in model.params_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v += r.random_range(0.02..0.1) * if r.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
    }
    let n = 2 * 3 * 32 * 32;
    let image = Tensor::new(vec![2, 3, 32, 32], (0..n).map(|_| r.random_range(0.05..1.0)).collect())?;
    let labels: Vec<f64> = (0..2).flat_map(|_| sample_uip_illuminant(&mut r).rgb()).collect();
    let labels = Tensor::new(vec![2, 3], labels)?;
    let params: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    check(
        |g, ids| {
            let x = g.constant(image.clone())?;
            let y = g.constant(labels.clone())?;
            let out = model.forward(g, ids, x)?;
            multistage_angular_loss(g, &out.stages, y)
        },
        &params,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::Illuminant;

    fn loss_of(preds: &[[f64; 3]], label: [f64; 3]) -> f64 {
        let mut g = Graph::new();
        let ps: Vec<NodeId> = preds.iter().map(|p| g.constant(Tensor::new(vec![1, 3], p.to_vec()).unwrap()).unwrap()).collect();
        let l = g.constant(Tensor::new(vec![1, 3], label.to_vec()).unwrap()).unwrap();
        let loss = multistage_angular_loss(&mut g, &ps, l).unwrap();
        g.value(loss).item().unwrap()
    }

    /// Unit vector at `deg` degrees from `(1,0,0)` in the x-y plane.
    fn at_angle(deg: f64) -> [f64; 3] {
        let r = deg.to_radians();
        [r.cos(), r.sin(), 0.0]
    }

    #[test]
    fn loss_examples() {
        let l = Illuminant::new([0.3, 0.6, 0.2]).unwrap().rgb();
        assert!(loss_of(&[l], l) < 0.05);
        // The clamp floor is paid once per stage.
        let floor = (1.0 - ACOS_DELTA).acos().to_degrees();
        assert!((loss_of(&[l, l, l], l) - 3.0 * floor).abs() < 1e-6);
        let orth = loss_of(&[[1.0, 0.0, 0.0]], [0.0, 1.0, 0.0]);
        assert!((orth - 90.0).abs() < 1e-4);
        let stages = [at_angle(10.0), at_angle(5.0), at_angle(2.0)];
        let got = loss_of(&stages, [1.0, 0.0, 0.0]);
        let oracle: f64 = stages.iter().map(|s| angular_error(*s, [1.0, 0.0, 0.0]).unwrap()).sum();
        // The 1e-12 guard inside the normalization costs ~1e-9 degrees near 0°.
        assert!((got - oracle).abs() < 1e-8 && (got - 17.0).abs() < 1e-8, "{got}");
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let l = g.constant(Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(multistage_angular_loss(&mut g, &[p], l).is_err());
    }

    #[test]
    fn loss_is_stage_additive() {
        let label = [0.4, 0.8, 0.3];
        let preds = [[0.5, 0.7, 0.2], [0.45, 0.75, 0.3], [0.41, 0.8, 0.29]];
        let whole = loss_of(&preds, label);
        let parts: f64 = preds.iter().map(|p| loss_of(&[*p], label)).sum();
        assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::{check, GradCheckOptions};
        let inputs = vec![
            Tensor::new(vec![2, 3], vec![0.5, 0.7, 0.2, 0.3, 0.3, 0.9]).unwrap(),
            Tensor::new(vec![2, 3], vec![0.45, 0.75, 0.3, 0.6, 0.2, 0.5]).unwrap(),
        ];
        let r = check(
            |g, ids| {
                let l = g.constant(Tensor::new(vec![2, 3], vec![0.4, 0.8, 0.3, 0.5, 0.5, 0.5])?)?;
                multistage_angular_loss(g, ids, l)
            },
            &inputs,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{}", r.max_rel_err);
    }

    fn scalar(v: f64) -> Vec<(String, Tensor)> {
        vec![("x".to_string(), Tensor::new(vec![1], vec![v]).unwrap())]
    }

    fn step(adam: &mut Adam, p: &mut [(String, Tensor)], g: f64, lr: f64) -> Result<()> {
        adam.step(p.iter_mut().map(|(n, t)| (n.as_str(), t)), &[vec![g]], lr)
    }

    #[test]
    fn adam_examples() {
        let mut p = scalar(2.0);
        let mut a = Adam::new(0.9, 0.999, 1e-8);
        step(&mut a, &mut p, 0.0, 0.1).unwrap();
        assert_eq!(p[0].1.data()[0], 2.0);
        assert!(a.moments().0[0][0] == 0.0 && a.moments().1[0][0] == 0.0);

        let mut p = scalar(0.0);
        let mut a = Adam::new(0.9, 0.999, 1e-8);
        step(&mut a, &mut p, 1.0, 1e-3).unwrap();
        let want = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p[0].1.data()[0] - want).abs() < 1e-15);

        let err = step(&mut a, &mut p, f64::NAN, 1e-3).unwrap_err();
        assert!(matches!(&err, Error::NumericFault(m) if m.contains("`x`")));
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut p = scalar(5.0);
        let mut a = Adam::new(0.9, 0.999, 1e-8);
        let mut steps = 0;
        while p[0].1.data()[0].abs() >= 1e-3 && steps < 2000 {
            let x = p[0].1.data()[0];
            step(&mut a, &mut p, 2.0 * x, 0.1).unwrap();
            steps += 1;
        }
        assert!(p[0].1.data()[0].abs() < 1e-3, "x = {} after {steps} steps", p[0].1.data()[0]);
    }

    #[test]
    fn adam_odd_symmetry() {
        let (mut p, mut q) = (scalar(0.7), scalar(-0.7));
        let (mut a, mut b) = (Adam::new(0.9, 0.999, 1e-8), Adam::new(0.9, 0.999, 1e-8));
        for g in [0.3, -1.2, 0.5, 2.0] {
            step(&mut a, &mut p, g, 0.01).unwrap();
            step(&mut b, &mut q, -g, 0.01).unwrap();
            assert_eq!(p[0].1.data()[0], -q[0].1.data()[0]);
        }
    }

    #[test]
    fn schedule_halves_once() {
        let cfg = TrainConfig { epochs: 10, ..Default::default() };
        assert_eq!(cfg.lr_at(4), 3e-4);
        assert_eq!(cfg.lr_at(5), 1.5e-4);
        assert_eq!(cfg.lr_at(9), 1.5e-4);
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 4, lr_halve_at: Some(5), ..Default::default() }.validate().is_err());
    }

    fn scenes(n: usize, sensor: &str, seed: u64) -> Vec<LabeledImage> {
        use crate::dataio::{synth_scenes, MondrianConfig};
        let cfg = MondrianConfig { n_scenes: n, size: 24, bias: 0.4, sensor_id: sensor.into(), seed, ..Default::default() };
        synth_scenes(&cfg)
            .unwrap()
            .into_iter()
            .map(|s| LabeledImage { image: s.raw.with_sensor(sensor), label: s.label, sensor_id: sensor.into() })
            .collect()
    }

    #[test]
    fn regime_data_checks() {
        let a = scenes(2, "a", 1);
        let mut mixed = a.clone();
        mixed.extend(scenes(2, "b", 2));
        assert!(check_regime_data(Regime::SingleSie, &a).is_ok());
        assert!(matches!(check_regime_data(Regime::SingleSie, &mixed), Err(Error::RegimeMismatch(_))));
        assert!(check_regime_data(Regime::Saf, &mixed).is_ok());
        assert!(matches!(check_regime_data(Regime::Uip, &a), Err(Error::RegimeMismatch(_))));
        assert!(check_regime_data(Regime::SingleSie, &[]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = scenes(8, "cam", 3);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 11, val_input_size: Some(32), ..Default::default() };
        let aug = AugmentationConfig { output_size: 32, ..Default::default() };
        let run = || {
            let mut m = CascadeModel::new(ModelConfig { stages: 2, init_seed: 5, ..Default::default() }).unwrap();
            let mut logs = Vec::new();
            train(&mut m, &data, Some(&data[..2]), &cfg, &aug, &mut |l| {
                logs.push(serde_json::to_string(l).unwrap());
                Ok(())
            })
            .unwrap();
            (logs, crate::tensor::encode_checkpoint(m.params()))
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.0[0].contains("\"val_mean_deg\""));
    }

    #[test]
    fn uip_and_saf_regimes_run() {
        use crate::color::Domain;
        let aug = AugmentationConfig { output_size: 32, ..Default::default() };
        let cfg = TrainConfig { epochs: 1, batch_size: 4, regime: Regime::Saf, val_every: 0, ..Default::default() };
        let mut data = scenes(3, "a", 1);
        data.extend(scenes(3, "b", 2));
        let mut m = CascadeModel::new(ModelConfig { stages: 1, ..Default::default() }).unwrap();
        let r = train(&mut m, &data, None, &cfg, &aug, &mut |_| Ok(())).unwrap();
        assert_eq!(r.epochs.len(), 1);

        let uip: Vec<LabeledImage> = scenes(4, UIP_SENSOR, 3)
            .into_iter()
            .map(|mut s| {
                s.image = crate::color::correct(&s.image, &s.label).unwrap();
                s.image.domain = Domain::Uip;
                s.label = Illuminant::white();
                s
            })
            .collect();
        let cfg = TrainConfig { regime: Regime::Uip, ..cfg };
        train(&mut m, &uip, None, &cfg, &aug, &mut |_| Ok(())).unwrap();
    }
}

//! Adam with step decay and a deterministic toy-scale training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backend, Eager, Tape, Var};
use crate::degrade::Pair;
use crate::error::{ModelError, TrainError};
use crate::kirsch::EdgeOperator;
use crate::losses::{psnr, ssim, total_loss_with, LossTerms, LossWeights, SsimParams};
use crate::model::{eranet_forward, forward_with, BlockKind, EraNetModel, Model, ModelConfig};
use crate::tensor::{Real, Tensor4};

/// `lr(e) = base · decay^⌊e / period⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            decay: 0.1,
            period: 30,
        }
    }
}

impl Schedule {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi((epoch / self.period.max(1)) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments mirroring the parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor4<T>], config: AdamConfig) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor4::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn update(
        &mut self,
        params: &mut [Tensor4<T>],
        grads: &[Tensor4<T>],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(crate::error::TensorError::LengthMismatch {
                what: "adam parameter list",
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            }
            .into());
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            g.expect_shape(p.shape(), "adam_step")?;
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { index: i });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one, lr_t, eps_t) = (T::one(), T::lit(lr), T::lit(eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                let mk = b1 * m.data()[k] + (one - b1) * gk;
                let vk = b2 * v.data()[k] + (one - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                data[k] = data[k] - lr_t * mhat / (vhat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor4<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub ssim: SsimParams,
    /// Global-norm gradient clip.
    pub clip: Option<f64>,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 4,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            ssim: SsimParams::default(),
            clip: None,
            max_steps: None,
            seed: 7,
        }
    }
}

/// One row of the loss curve: means over the epoch's batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: LossTerms<f64>,
}

impl EpochRecord {
    /// `epoch=… lr=… total=… ms_ssim=… l1=… tv=…`
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} lr={:e} steps={} total={:.9} ms_ssim={:.9} l1={:.9} tv={:.9}",
            self.epoch,
            self.lr,
            self.steps,
            self.loss.total,
            self.loss.ms_ssim,
            self.loss.l1,
            self.loss.tv
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: EraNetModel<T>,
    pub curve: Vec<EpochRecord>,
    pub steps: usize,
}

fn batch<T: Real>(
    pairs: &[Pair<T>],
    idx: &[usize],
) -> Result<(Tensor4<T>, Tensor4<T>), TrainError> {
    let x: Vec<_> = idx.iter().map(|&i| pairs[i].degraded.clone()).collect();
    let y: Vec<_> = idx.iter().map(|&i| pairs[i].clean.clone()).collect();
    Ok((Tensor4::stack_batch(&x)?, Tensor4::stack_batch(&y)?))
}

fn terms_value<T: Real, B: Backend<T>>(b: &B, t: &LossTerms<B::V>) -> LossTerms<f64> {
    let v = |x: &B::V| b.value(x).data()[0].as_f64();
    LossTerms {
        ms_ssim: v(&t.ms_ssim),
        l1: v(&t.l1),
        tv: v(&t.tv),
        total: v(&t.total),
    }
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_gradients<T: Real>(
    model: &EraNetModel<T>,
    x: &Tensor4<T>,
    y: &Tensor4<T>,
    weights: &LossWeights,
    ssim: &SsimParams,
) -> Result<(LossTerms<f64>, Vec<Tensor4<T>>), TrainError> {
    let mut tape = Tape::new();
    let mut leaves: Vec<Var> = Vec::new();
    let vars: Model<Var> = model.map(&mut |p| {
        let v = tape.leaf(p.clone());
        leaves.push(v.clone());
        v
    });
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let out = forward_with(&mut tape, &xv, &vars)?;
    let terms = total_loss_with(&mut tape, &out, &yv, weights, ssim)?;
    let values = terms_value(&tape, &terms);
    let grads = tape.backward(&terms.total)?;
    let params = model.parameters();
    let g = leaves
        .iter()
        .zip(&params)
        .map(|(v, p)| grads.get_or_zeros(v, p))
        .collect();
    Ok((values, g))
}

/// Mean loss terms of the unclamped network output over a whole dataset.
pub fn dataset_loss<T: Real>(
    model: &EraNetModel<T>,
    pairs: &[Pair<T>],
    weights: &LossWeights,
    ssim: &SsimParams,
    batch_size: usize,
) -> Result<LossTerms<f64>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut acc = LossTerms {
        ms_ssim: 0.0,
        l1: 0.0,
        tv: 0.0,
        total: 0.0,
    };
    let mut batches = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = batch(pairs, chunk)?;
        let mut e = Eager;
        let out = forward_with(&mut e, &x, model)?;
        let t = total_loss_with(&mut e, &out, &y, weights, ssim)?;
        let t = terms_value(&e, &t);
        acc.ms_ssim += t.ms_ssim;
        acc.l1 += t.l1;
        acc.tv += t.tv;
        acc.total += t.total;
        batches += 1.0;
    }
    Ok(LossTerms {
        ms_ssim: acc.ms_ssim / batches,
        l1: acc.l1 / batches,
        tv: acc.tv / batches,
        total: acc.total / batches,
    })
}

fn dump(model: &EraNetModel<impl Real>) -> String {
    model
        .named_parameters()
        .iter()
        .map(|(n, p)| format!("{n}:max|w|={:.3e}", p.max_abs().as_f64()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Trains in training mode. Batches are reshuffled every epoch from a
/// generator seeded with `config.seed`; a trailing partial batch is kept.
pub fn train<T: Real>(
    model: &EraNetModel<T>,
    pairs: &[Pair<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.mode != crate::model::Mode::Training {
        return Err(ModelError::Config("fused models cannot be trained".into()).into());
    }
    let mut model = model.clone();
    let mut params = model.parameters();
    let mut adam = AdamState::new(&params, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::new();
    let mut steps = 0;
    'epochs: for epoch in 0..config.epochs {
        if config.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
        let lr = config.schedule.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossTerms {
            ms_ssim: 0.0,
            l1: 0.0,
            tv: 0.0,
            total: 0.0,
        };
        let mut taken = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            if config.max_steps.is_some_and(|m| steps >= m) {
                if taken > 0 {
                    curve.push(record(epoch, lr, taken, &sum));
                }
                break 'epochs;
            }
            let (x, y) = batch(pairs, chunk)?;
            let (terms, mut grads) =
                loss_and_gradients(&model, &x, &y, &config.weights, &config.ssim)?;
            if !terms.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: steps,
                    detail: format!(
                        "total={} ms_ssim={} l1={} tv={}; {}",
                        terms.total,
                        terms.ms_ssim,
                        terms.l1,
                        terms.tv,
                        dump(&model)
                    ),
                });
            }
            if let Some(c) = config.clip {
                clip_global_norm(&mut grads, c);
            }
            adam.update(&mut params, &grads, lr)?;
            model = model.with_parameters(&params)?;
            sum.ms_ssim += terms.ms_ssim;
            sum.l1 += terms.l1;
            sum.tv += terms.tv;
            sum.total += terms.total;
            taken += 1;
            steps += 1;
        }
        let rec = record(epoch, lr, taken, &sum);
        log::info!("{}", rec.to_line());
        curve.push(rec);
    }
    Ok(TrainOutcome {
        model,
        curve,
        steps,
    })
}

fn record(epoch: usize, lr: f64, steps: usize, sum: &LossTerms<f64>) -> EpochRecord {
    let n = steps.max(1) as f64;
    EpochRecord {
        epoch,
        lr,
        steps,
        loss: LossTerms {
            ms_ssim: sum.ms_ssim / n,
            l1: sum.l1 / n,
            tv: sum.tv / n,
            total: sum.total / n,
        },
    }
}

/// Initializes from `config.seed` and trains.
pub fn init_and_train<T: Real>(
    model_config: ModelConfig,
    pairs: &[Pair<T>],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = EraNetModel::init(model_config, &mut rng)?;
    train(&model, pairs, config)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetrics {
    pub index: usize,
    pub psnr_in: f64,
    pub ssim_in: f64,
    pub psnr_out: f64,
    pub ssim_out: f64,
}

fn delta(out: f64, base: f64) -> f64 {
    if out == base {
        0.0
    } else {
        out - base
    }
}

impl PairMetrics {
    pub fn psnr_delta(&self) -> f64 {
        delta(self.psnr_out, self.psnr_in)
    }

    pub fn ssim_delta(&self) -> f64 {
        delta(self.ssim_out, self.ssim_in)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: Vec<PairMetrics>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&PairMetrics) -> f64) -> f64 {
        self.pairs.iter().map(f).sum::<f64>() / self.pairs.len().max(1) as f64
    }

    pub fn mean_psnr_in(&self) -> f64 {
        self.mean(|p| p.psnr_in)
    }

    pub fn mean_psnr_out(&self) -> f64 {
        self.mean(|p| p.psnr_out)
    }

    pub fn mean_ssim_in(&self) -> f64 {
        self.mean(|p| p.ssim_in)
    }

    pub fn mean_ssim_out(&self) -> f64 {
        self.mean(|p| p.ssim_out)
    }

    pub fn mean_psnr_delta(&self) -> f64 {
        self.mean(PairMetrics::psnr_delta)
    }

    pub fn mean_ssim_delta(&self) -> f64 {
        self.mean(PairMetrics::ssim_delta)
    }
}

/// Mean SSIM with the default window, shrunk for small images.
pub fn ssim_index<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64, TrainError> {
    Ok(ssim(a, b, &SsimParams::default())?.value)
}

/// PSNR/SSIM of the degraded input and of the clamped model output, per pair.
pub fn evaluate<T: Real>(
    model: &EraNetModel<T>,
    pairs: &[Pair<T>],
) -> Result<EvalReport, TrainError> {
    let mut out = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        let y = eranet_forward(&p.degraded, model)?;
        out.push(PairMetrics {
            index,
            psnr_in: psnr(&p.degraded, &p.clean, 1.0)?,
            ssim_in: ssim_index(&p.degraded, &p.clean)?,
            psnr_out: psnr(&y, &p.clean, 1.0)?,
            ssim_out: ssim_index(&y, &p.clean)?,
        });
    }
    Ok(EvalReport { pairs: out })
}

/// One ablation setting.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
    pub weights: LossWeights,
}

/// Module on/off, operator substitution and loss-subset variants of `base`.
pub fn ablation_variants(base: ModelConfig, weights: LossWeights) -> Vec<Variant> {
    let v = |label: &str, model: ModelConfig, weights: LossWeights| Variant {
        label: label.into(),
        model,
        weights,
    };
    let mut out = vec![
        v("full", base, weights),
        v(
            "no-cam",
            ModelConfig {
                use_cam: false,
                ..base
            },
            weights,
        ),
        v(
            "no-sam",
            ModelConfig {
                use_sam: false,
                ..base
            },
            weights,
        ),
        v(
            "plain-conv",
            ModelConfig {
                block_kind: BlockKind::Plain,
                ..base
            },
            weights,
        ),
    ];
    for op in EdgeOperator::ALL {
        if op != base.operator {
            out.push(v(
                &format!("op-{op}"),
                ModelConfig {
                    operator: op,
                    ..base
                },
                weights,
            ));
        }
    }
    let subsets = [
        (
            "loss-l1",
            LossWeights {
                ms_ssim: 0.0,
                l1: 1.0,
                tv: 0.0,
            },
        ),
        (
            "loss-msssim",
            LossWeights {
                ms_ssim: 1.0,
                l1: 0.0,
                tv: 0.0,
            },
        ),
        ("loss-msssim-l1", LossWeights { tv: 0.0, ..weights }),
    ];
    for (label, w) in subsets {
        out.push(v(label, base, w));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub params: usize,
}

/// Retrains every variant from the same seed and evaluates on `test`.
pub fn run_ablation<T: Real>(
    variants: &[Variant],
    train_pairs: &[Pair<T>],
    test_pairs: &[Pair<T>],
    config: &TrainConfig,
) -> Result<Vec<AblationRow>, TrainError> {
    variants
        .iter()
        .map(|v| {
            let cfg = TrainConfig {
                weights: v.weights,
                ..config.clone()
            };
            let out = init_and_train(v.model, train_pairs, &cfg)?;
            let report = evaluate(&out.model, test_pairs)?;
            Ok(AblationRow {
                label: v.label.clone(),
                final_loss: out.curve.last().map_or(f64::NAN, |r| r.loss.total),
                psnr: report.mean_psnr_out(),
                ssim: report.mean_ssim_out(),
                params: crate::model::fuse_model(&out.model)?.param_count(),
            })
        })
        .collect()
}

//! Flow-matching training of [`TransformerNet`] and the direct-prediction
//! baseline, optimised with Adam.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dit::{Gradients, Parameters, TransformerNet};
use crate::error::{check_dim, Error, Result};
use crate::flow::VideoLatentFlow;
use crate::sig17;

/// Loss above which training is aborted.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    FlowMatching,
    DirectPrediction,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::FlowMatching => "flow_matching",
            TrainMode::DirectPrediction => "direct_prediction",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow_matching" => Ok(TrainMode::FlowMatching),
            "direct_prediction" => Ok(TrainMode::DirectPrediction),
            _ => Err(Error::Domain(format!("unknown training mode {s:?}"))),
        }
    }
}

/// Which tensors the optimiser may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    ReadoutOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub trainable: Trainable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            steps: 2000,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            mode: TrainMode::FlowMatching,
            trainable: Trainable::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Domain(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain("Adam moments must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn write_loss_csv<W: Write>(out: &mut W, records: &[LossRecord]) -> Result<()> {
    writeln!(out, "step,loss,grad_norm")?;
    for r in records {
        writeln!(out, "{},{},{}", r.step, sig17(r.loss), sig17(r.grad_norm))?;
    }
    Ok(())
}

/// One training trajectory: its flow (fitted on observed frames only) and
/// its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub flow: VideoLatentFlow,
    pub caption: DVector<f64>,
}

/// A vector field `F(y, c, t)`.
pub trait ConditionalField: Sync {
    fn latent_dim(&self) -> usize;
    fn eval(&self, y: &DVector<f64>, caption: &DVector<f64>, t: f64) -> Result<DVector<f64>>;
}

impl ConditionalField for TransformerNet {
    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn eval(&self, y: &DVector<f64>, caption: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.forward(y, caption, t)
    }
}

/// The closed-form minimiser, dispatched on the caption.
pub struct AnalyticField<'a> {
    items: &'a [TrainingItem],
}

impl<'a> AnalyticField<'a> {
    pub fn new(items: &'a [TrainingItem]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Domain("analytic field needs at least one flow".into()));
        }
        Ok(Self { items })
    }

    fn lookup(&self, caption: &DVector<f64>) -> Result<&VideoLatentFlow> {
        self.items
            .iter()
            .find(|it| it.caption == *caption)
            .map(|it| &it.flow)
            .ok_or_else(|| Error::Domain("caption not present in the analytic field".into()))
    }
}

impl ConditionalField for AnalyticField<'_> {
    fn latent_dim(&self) -> usize {
        self.items[0].flow.latent_dim()
    }

    fn eval(&self, y: &DVector<f64>, caption: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        self.lookup(caption)?.closed_form_field(y, t)
    }
}

/// One draw `(trajectory, z, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub item: usize,
    pub z: DVector<f64>,
    pub t: f64,
}

/// `item` uniform over the dataset, `z ~ N(0, I)`, `t ~ U[0, T]`.
pub fn draw_samples(rng: &mut ChaCha8Rng, items: &[TrainingItem], size: usize) -> Vec<Sample> {
    (0..size)
        .map(|_| {
            let item = rng.random_range(0..items.len());
            let flow = &items[item].flow;
            let z = DVector::from_fn(flow.latent_dim(), |_, _| StandardNormal.sample(rng));
            let t = rng.random_range(0.0..=flow.schedule().horizon());
            Sample { item, z, t }
        })
        .collect()
}

/// Network input state and regression target for one sample.
pub fn regression_pair(items: &[TrainingItem], s: &Sample, mode: TrainMode) -> Result<(DVector<f64>, DVector<f64>)> {
    let flow = &items
        .get(s.item)
        .ok_or_else(|| Error::Domain(format!("sample refers to missing item {}", s.item)))?
        .flow;
    match mode {
        TrainMode::FlowMatching => {
            let fs = flow.sample(&s.z, s.t)?;
            Ok((fs.psi, fs.dpsi_dt))
        }
        // The baseline regresses the observed-data reconstruction μ_t, which
        // interpolates the latent patches at the observed nodes.
        TrainMode::DirectPrediction => {
            check_dim("direct noise", flow.latent_dim(), s.z.len())?;
            Ok((s.z.clone(), flow.mu(s.t)?))
        }
    }
}

fn mean_squared<F: ConditionalField + ?Sized>(
    field: &F,
    items: &[TrainingItem],
    samples: &[Sample],
    mode: TrainMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let (y, target) = regression_pair(items, s, mode)?;
        let out = field.eval(&y, &items[s.item].caption, s.t)?;
        let e = (out - target).norm_squared();
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("loss at sample {i}")));
        }
        total += e;
    }
    Ok(total / samples.len() as f64)
}

/// `mean ‖F(ψ_t, c, t) − dψ_t/dt‖²`.
pub fn fm_loss<F: ConditionalField + ?Sized>(field: &F, items: &[TrainingItem], samples: &[Sample]) -> Result<f64> {
    mean_squared(field, items, samples, TrainMode::FlowMatching)
}

/// `mean ‖F(z, c, t) − μ_t‖²`.
pub fn direct_loss<F: ConditionalField + ?Sized>(field: &F, items: &[TrainingItem], samples: &[Sample]) -> Result<f64> {
    mean_squared(field, items, samples, TrainMode::DirectPrediction)
}

/// An assembled network input with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: DVector<f64>,
    pub target: DVector<f64>,
}

/// Source of training batches.
pub trait Objective: Sync {
    fn draw(&self, net: &TransformerNet, rng: &mut ChaCha8Rng, size: usize) -> Result<Vec<Example>>;
}

pub struct FlowObjective<'a> {
    pub items: &'a [TrainingItem],
    pub mode: TrainMode,
}

impl Objective for FlowObjective<'_> {
    fn draw(&self, net: &TransformerNet, rng: &mut ChaCha8Rng, size: usize) -> Result<Vec<Example>> {
        if self.items.is_empty() {
            return Err(Error::Domain("training set is empty".into()));
        }
        draw_samples(rng, self.items, size)
            .iter()
            .map(|s| {
                let (y, target) = regression_pair(self.items, s, self.mode)?;
                let input = net.assemble_input(&y, &self.items[s.item].caption, s.t)?;
                Ok(Example { input, target })
            })
            .collect()
    }
}

/// The same examples every step, whatever the batch size.
pub struct FixedObjective {
    pub examples: Vec<Example>,
}

impl Objective for FixedObjective {
    fn draw(&self, _: &TransformerNet, _: &mut ChaCha8Rng, _: usize) -> Result<Vec<Example>> {
        Ok(self.examples.clone())
    }
}

/// Mean squared error over `examples` and its gradient. Per-example work runs
/// in parallel; the reduction is sequential so results do not depend on the
/// thread count.
pub fn loss_and_gradient(net: &TransformerNet, examples: &[Example]) -> Result<(f64, Gradients)> {
    if examples.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let scale = 2.0 / examples.len() as f64;
    let parts: Vec<Result<(f64, Gradients)>> = examples
        .par_iter()
        .map(|ex| {
            let (out, cache) = net.forward_cached(&ex.input)?;
            let r = out - &ex.target;
            let (g, _) = net.backward(&cache, &(&r * scale))?;
            Ok((r.norm_squared(), g))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = Parameters::zeros(net.config());
    for (i, p) in parts.into_iter().enumerate() {
        let (l, g) = p?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss at sample {i}")));
        }
        total += l;
        grad.add_scaled(&g, 1.0);
    }
    Ok((total / examples.len() as f64, grad))
}

pub fn mean_loss(net: &TransformerNet, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let losses: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| Ok((net.forward_input(&ex.input)? - &ex.target).norm_squared()))
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len() as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Parameters,
    v: Parameters,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(like: &Parameters, cfg: &TrainConfig) -> Self {
        let mut zero = like.clone();
        zero.scale(0.0);
        Self {
            m: zero.clone(),
            v: zero,
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients, trainable: Trainable) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let count = params.tensors().len();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .enumerate();
        for (i, (((p, g), m), v)) in tensors {
            if trainable == Trainable::ReadoutOnly && i + 1 != count {
                continue;
            }
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// Runs `config.steps` Adam steps on batches drawn from `objective`. The
/// returned records hold the batch loss before each update.
pub fn train_loop<O: Objective + ?Sized>(
    mut net: TransformerNet,
    objective: &O,
    config: &TrainConfig,
) -> Result<(TransformerNet, Vec<LossRecord>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net.params(), config);
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = objective.draw(&net, &mut rng, config.batch)?;
        let (loss, grad) = match loss_and_gradient(&net, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::INFINITY }),
            Err(e) => return Err(e),
        };
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(Error::Diverged { step, loss });
        }
        records.push(LossRecord {
            step,
            loss,
            grad_norm: grad.norm(),
        });
        adam.step(net.params_mut(), &grad, config.trainable);
    }
    Ok((net, records))
}

/// Fixed evaluation batch for comparing losses before and after training.
pub fn evaluation_examples(
    net: &TransformerNet,
    items: &[TrainingItem],
    mode: TrainMode,
    seed: u64,
    size: usize,
) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowObjective { items, mode }.draw(net, &mut rng, size)
}

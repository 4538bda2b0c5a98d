//! End-to-end glue shared by the command-line driver and the acceptance
//! suite: dataset → flows → training → generation and scoring.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, DatasetEntry, DecoderKind, DecoderSpec, GenSpec};
use crate::dit::{NetConfig, TransformerNet};
use crate::error::{Error, Result};
use crate::evaluate::{frame_range, psnr, Generator};
use crate::flow::{BasisConfig, FlowSchedule, VideoLatentFlow, DEFAULT_ALPHA, DEFAULT_SIGMA_MIN};
use crate::legs::{LegSOperator, Normalization};
use crate::train::{
    evaluation_examples, mean_loss, train_loop, ConditionalField, FlowObjective, LossRecord, TrainConfig, TrainMode,
    TrainingItem,
};
use crate::world::{SyntheticDecoder, TrajectoryConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub order: usize,
    pub sigma_min: f64,
    pub alpha: f64,
    pub normalization: Normalization,
    pub origin_correction: bool,
}

impl FlowParams {
    pub fn new(order: usize) -> Self {
        Self {
            order,
            sigma_min: DEFAULT_SIGMA_MIN,
            alpha: DEFAULT_ALPHA,
            normalization: Normalization::Hippo,
            origin_correction: true,
        }
    }
}

/// The default toy dataset: four 4-dimensional trajectories with 2-dim
/// captions on `T = 1`, eight frames of which every fourth is observed,
/// decoded to 16-dim frames. Ground truth extends to `4T` for extrapolation.
pub fn default_gen_spec(seed: u64) -> GenSpec {
    let mut trajectory = TrajectoryConfig::new(4, 2, 1.0);
    trajectory.support = 4.0;
    GenSpec {
        count: 4,
        seed,
        trajectory,
        dt: 0.125,
        stride: 4,
        decoder: DecoderSpec {
            kind: DecoderKind::Random,
            seed: 7,
            frame_dim: 16,
        },
    }
}

/// Flow for one dataset entry, fitted on its observed frames only. The
/// schedule uses the observed count as `N` and the entry's horizon as `T`.
pub fn build_flow(entry: &DatasetEntry, decoder: &SyntheticDecoder, params: &FlowParams) -> Result<VideoLatentFlow> {
    let op = LegSOperator::new(params.order)?;
    let observed = entry.observed_latents(decoder)?;
    let horizon = entry.config.horizon;
    let schedule = FlowSchedule::new(params.sigma_min, params.alpha, observed.len(), horizon)?;
    let basis = BasisConfig {
        normalization: params.normalization,
        window: horizon,
        origin_correction: params.origin_correction,
    };
    VideoLatentFlow::from_observed(&op, &observed, schedule, basis)
}

pub fn build_items(dataset: &Dataset, params: &FlowParams) -> Result<Vec<TrainingItem>> {
    let decoder = dataset.build_decoder()?;
    dataset
        .entries
        .iter()
        .map(|e| {
            Ok(TrainingItem {
                flow: build_flow(e, &decoder, params)?,
                caption: e.trajectory()?.caption().clone(),
            })
        })
        .collect()
}

/// Noise draw used for generation from trajectory `index`.
pub fn generation_noise(seed: u64, index: usize, d: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64));
    DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng))
}

/// Mean PSNR over the dataset of the generated frames at each entry's
/// observed times against the stored frames.
pub fn recovery_psnr(
    generator: &Generator<'_>,
    dataset: &Dataset,
    items: &[TrainingItem],
    noise_seed: u64,
) -> Result<f64> {
    let decoder = dataset.build_decoder()?;
    let mut total = 0.0;
    for (i, (entry, item)) in dataset.entries.iter().zip(items).enumerate() {
        let times = entry.observed_times();
        let z = generation_noise(noise_seed, i, item.flow.latent_dim());
        let latents = generator.generate(&z, &item.caption, &times)?;
        let mut generated = Vec::new();
        let mut truth = Vec::new();
        for (row, u_hat) in entry.plan.indices().iter().zip(&latents) {
            generated.extend(decoder.decode(u_hat)?.iter());
            truth.extend(entry.frames.row(*row).iter());
        }
        total += psnr(&generated, &truth, frame_range(entry.config.bound, &decoder))?;
    }
    Ok(total / dataset.entries.len() as f64)
}

pub fn generator_for<'a>(
    mode: TrainMode,
    field: &'a dyn ConditionalField,
    ode_steps: usize,
    breakpoints: &'a [f64],
) -> Generator<'a> {
    match mode {
        TrainMode::FlowMatching => Generator::Flow {
            field,
            steps: ode_steps,
            breakpoints,
        },
        TrainMode::DirectPrediction => Generator::Direct { field },
    }
}

/// Clamp breakpoints of every flow on `[0, end]`, merged and sorted.
pub fn all_breakpoints(items: &[TrainingItem], end: f64) -> Vec<f64> {
    let mut b: Vec<f64> = items
        .iter()
        .flat_map(|it| it.flow.schedule().clamp_breakpoints(end))
        .collect();
    b.sort_by(f64::total_cmp);
    b.dedup();
    b
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: TransformerNet,
    pub records: Vec<LossRecord>,
    /// Loss on a fixed evaluation batch before and after training.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

pub const EVAL_BATCH: usize = 1024;

pub fn train_on_items(
    items: &[TrainingItem],
    net_cfg: &NetConfig,
    net_seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if items.is_empty() {
        return Err(Error::Domain("no training items".into()));
    }
    let net = TransformerNet::new(*net_cfg, net_seed)?;
    let eval = evaluation_examples(&net, items, cfg.mode, cfg.seed ^ 0x5EED, EVAL_BATCH)?;
    let initial_eval_loss = mean_loss(&net, &eval)?;
    let objective = FlowObjective { items, mode: cfg.mode };
    let (net, records) = train_loop(net, &objective, cfg)?;
    let final_eval_loss = mean_loss(&net, &eval)?;
    Ok(TrainOutcome {
        net,
        records,
        initial_eval_loss,
        final_eval_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: TrainMode,
    pub initial_psnr: f64,
    pub final_psnr: f64,
}

/// Trains one net per mode from the same initialisation and budget and
/// scores recovery of the observed training frames before and after.
pub fn ablation(
    dataset: &Dataset,
    items: &[TrainingItem],
    net_cfg: &NetConfig,
    net_seed: u64,
    cfg: &TrainConfig,
    ode_steps: usize,
    noise_seed: u64,
) -> Result<Vec<AblationRow>> {
    let end = dataset
        .entries
        .iter()
        .map(|e| e.config.horizon)
        .fold(0.0, f64::max);
    let breakpoints = all_breakpoints(items, end);
    [TrainMode::FlowMatching, TrainMode::DirectPrediction]
        .into_iter()
        .map(|mode| {
            let initial = TransformerNet::new(*net_cfg, net_seed)?;
            let initial_psnr = recovery_psnr(
                &generator_for(mode, &initial, ode_steps, &breakpoints),
                dataset,
                items,
                noise_seed,
            )?;
            let outcome = train_on_items(items, net_cfg, net_seed, &TrainConfig { mode, ..*cfg })?;
            let final_psnr = recovery_psnr(
                &generator_for(mode, &outcome.net, ode_steps, &breakpoints),
                dataset,
                items,
                noise_seed,
            )?;
            Ok(AblationRow {
                mode,
                initial_psnr,
                final_psnr,
            })
        })
        .collect()
}

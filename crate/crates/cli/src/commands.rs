use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use latent_flow::dataset::{Dataset, DecoderKind, DecoderSpec, GenSpec};
use nalgebra::DMatrix;
use latent_flow::dit::{NetConfig, TransformerNet};
use latent_flow::evaluate::{
    error_decomposition, interpolation_harness, masked_lsq_oracle, basis_matrix, write_harness_csv,
    DecompositionInput, HarnessSpec, HARNESS_CSV_HEADER,
};
use latent_flow::legs::Normalization;
use latent_flow::pipeline::{
    ablation, all_breakpoints, build_flow, build_items, generation_noise, generator_for, train_on_items, FlowParams,
};
use latent_flow::train::{write_loss_csv, AnalyticField, ConditionalField, TrainConfig, TrainMode, Trainable};
use latent_flow::world::{frame_count, TrajectoryConfig};
use latent_flow::{sig17, Error};

use crate::config::Settings;
use crate::CliError;

pub const DATASET_DIR: &str = "dataset";
pub const FIT_DIR: &str = "fit";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVAL_DIR: &str = "eval";
pub const TRAIN_SUMMARY: &str = "train.txt";
pub const LOSS_CSV: &str = "loss.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const REPORT: &str = "report.md";

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn load_dataset(out: &Path) -> Result<Dataset, CliError> {
    let dir = out.join(DATASET_DIR);
    if !dir.join(latent_flow::dataset::MANIFEST).is_file() {
        return Err(CliError::Missing(format!(
            "no dataset under {}; run `lfl gen` first",
            dir.display()
        )));
    }
    Ok(Dataset::load(&dir)?)
}

fn flow_params(s: &Settings) -> Result<FlowParams, CliError> {
    let normalization = match s.get::<String>("normalization")?.as_str() {
        "hippo" => Normalization::Hippo,
        "paper_literal" => Normalization::PaperLiteral,
        other => return Err(CliError::Validation(format!("unknown normalization {other:?}"))),
    };
    Ok(FlowParams {
        order: s.get("s")?,
        sigma_min: s.get("sigma_min")?,
        alpha: s.get("alpha")?,
        normalization,
        origin_correction: s.get("origin_correction")?,
    })
}

fn net_config(s: &Settings, dataset: &Dataset) -> Result<NetConfig, CliError> {
    let first = &dataset.entries[0].config;
    let cfg = NetConfig {
        width: s.get("width")?,
        blocks: s.get("blocks")?,
        heads: s.get("heads")?,
        head_dim: s.get("head_dim")?,
        ff_width: s.get("ff_width")?,
        ..NetConfig::new(first.latent_dim, first.caption_dim)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &Settings, seed: u64, steps_key: &str) -> Result<TrainConfig, CliError> {
    let trainable = match s.get::<String>("trainable")?.as_str() {
        "all" => Trainable::All,
        "readout" => Trainable::ReadoutOnly,
        other => return Err(CliError::Validation(format!("unknown trainable set {other:?}"))),
    };
    let mode: TrainMode = s
        .get::<String>("mode")?
        .parse()
        .map_err(|e: Error| CliError::Validation(e.to_string()))?;
    let cfg = TrainConfig {
        batch: s.get("batch")?,
        steps: s.get(steps_key)?,
        learning_rate: s.get("lr")?,
        beta1: s.get("beta1")?,
        beta2: s.get("beta2")?,
        epsilon: s.get("epsilon")?,
        seed,
        mode,
        trainable,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen(s: &Settings, out: &Path, force: bool) -> Result<(), CliError> {
    let seed = s.seed()?;
    let horizon: f64 = s.get("T")?;
    let dt: f64 = s.get("dt")?;
    let observed: usize = s.get("N")?;
    let total = frame_count(horizon, dt)?;
    if observed == 0 || observed > total {
        return Err(CliError::Validation(format!(
            "invalid plan: N = {observed} must lie in 1..=T/dt = {total}"
        )));
    }
    if total % observed != 0 {
        return Err(CliError::Validation(format!(
            "invalid plan: N = {observed} must divide T/dt = {total}"
        )));
    }
    let trajectory = TrajectoryConfig {
        latent_dim: s.get("d")?,
        caption_dim: s.get("ell")?,
        smoothness: s.get("smoothness")?,
        bound: s.get("bound")?,
        horizon,
        support: s.get_or("support", 4.0 * horizon)?,
        harmonics: s.get("harmonics")?,
        amplitude: s.get("amplitude")?,
        offset: s.get("offset")?,
    };
    trajectory.validate()?;
    let kind = match s.get::<String>("decoder")?.as_str() {
        "identity" => DecoderKind::Identity,
        "random" => DecoderKind::Random,
        other => return Err(CliError::Validation(format!("unknown decoder {other:?}"))),
    };
    let frame_dim = if kind == DecoderKind::Identity && !s.is_set("D") {
        trajectory.latent_dim
    } else {
        s.get("D")?
    };
    let spec = GenSpec {
        count: s.get("count")?,
        seed,
        trajectory,
        dt,
        stride: total / observed,
        decoder: DecoderSpec {
            kind,
            seed: s.get("decoder_seed")?,
            frame_dim,
        },
    };
    let dir = out.join(DATASET_DIR);
    if dir.exists() {
        if !force {
            return Err(CliError::Validation(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(Error::from)?;
    }
    let dataset = Dataset::generate(&spec)?;
    dataset.save(&dir)?;
    write(&dir.join("config.txt"), &s.render())?;
    println!(
        "wrote {} trajectories ({} of {} frames observed) to {}",
        dataset.entries.len(),
        observed,
        total,
        dir.display()
    );
    Ok(())
}

pub const SWEEP_HEADER: &str = "s,eps1,eps3,node_error";

pub fn fit(s: &Settings, out: &Path) -> Result<(), CliError> {
    let dataset = load_dataset(out)?;
    let decoder = dataset.build_decoder()?;
    let params = flow_params(s)?;
    let delta: f64 = s.get("delta")?;
    let samples: usize = s.get("eps2_samples")?;
    let seed = s.get_or("seed", 0u64)?;
    let dir = out.join(FIT_DIR);

    let mut bound_csv = String::from("time,residual,bound_rhs,satisfied,trajectory\n");
    let mut reports = String::from("trajectory,eps1,eps2,eps3,lambda_star,bound_rhs,satisfaction,streaming_gap\n");
    for (i, entry) in dataset.entries.iter().enumerate() {
        let flow = build_flow(entry, &decoder, &params)?;
        let traj = entry.trajectory()?;
        let estimates = (1..=entry.plan.total())
            .map(|tau| flow.mu(tau as f64 * entry.dt))
            .collect::<latent_flow::Result<Vec<_>>>()?;
        let report = error_decomposition(&DecompositionInput {
            flow: &flow,
            trajectory: &traj,
            decoder: &decoder,
            plan: &entry.plan,
            dt: entry.dt,
            delta,
            samples,
            seed: seed.wrapping_add(i as u64),
            eps0: 0.0,
            estimates: &estimates,
        })?;
        for row in &report.rows {
            writeln!(
                bound_csv,
                "{},{},{},{},{i}",
                sig17(row.time),
                sig17(row.residual),
                sig17(report.bound_rhs),
                u8::from(row.satisfied)
            )
            .unwrap();
        }
        writeln!(
            reports,
            "{i},{},{},{},{},{},{},{}",
            sig17(report.eps1),
            sig17(report.eps2),
            sig17(report.eps3),
            sig17(report.lambda_star),
            sig17(report.bound_rhs),
            sig17(report.satisfaction),
            sig17(report.streaming_gap)
        )
        .unwrap();
        write(&dir.join(format!("report_{i:04}.txt")), &report.to_key_value())?;
    }
    write(&dir.join("bound.csv"), &bound_csv)?;
    write(&dir.join("reports.csv"), &reports)?;

    let mut sweep = format!("{SWEEP_HEADER}\n");
    for order in s.get_list::<usize>("s_sweep")? {
        let row = sweep_row(&dataset, &FlowParams { order, ..params })?;
        writeln!(
            sweep,
            "{order},{},{},{}",
            sig17(row.0),
            sig17(row.1),
            sig17(row.2)
        )
        .unwrap();
    }
    write(&dir.join("s_sweep.csv"), &sweep)?;
    print!("{sweep}");
    Ok(())
}

/// Worst-case `ε1`, `ε3` and streaming node error over the dataset for one
/// order. `ε3` is NaN when the observed rows cannot determine `s`
/// coefficients.
fn sweep_row(dataset: &Dataset, params: &FlowParams) -> Result<(f64, f64, f64), CliError> {
    let decoder = dataset.build_decoder()?;
    let (mut eps1, mut eps3, mut node): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for entry in &dataset.entries {
        let flow = build_flow(entry, &decoder, params)?;
        let traj = entry.trajectory()?;
        let frames = entry.plan.total();
        let g = basis_matrix(&flow, entry.dt, frames)?;
        let mut u = DMatrix::zeros(frames, traj.latent_dim());
        for r in 0..frames {
            u.set_row(r, &traj.eval((r + 1) as f64 * entry.dt)?.transpose());
        }
        let full = &g * masked_lsq_oracle(&g, &vec![true; frames], &u)?.transpose();
        eps1 = eps1.max(row_max(&(&full - &u)));
        match masked_lsq_oracle(&g, &entry.plan.mask(), &u) {
            Ok(h) => eps3 = eps3.max(row_max(&(&g * h.transpose() - &full))),
            Err(Error::RankDeficient { .. }) => eps3 = f64::NAN,
            Err(e) => return Err(e.into()),
        }
        for (&row, t) in entry.plan.indices().iter().zip(entry.observed_times()) {
            node = node.max((flow.mu(t)? - u.row(row).transpose()).norm());
        }
    }
    Ok((eps1, eps3, node))
}

fn row_max(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

fn read_summary(out: &Path) -> Result<std::collections::HashMap<String, String>, CliError> {
    let path = out.join(TRAIN_SUMMARY);
    let text = fs::read_to_string(&path)
        .map_err(|_| CliError::Missing(format!("no training summary at {}", path.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

pub fn train(s: &Settings, out: &Path) -> Result<(), CliError> {
    let seed = s.seed()?;
    let dataset = load_dataset(out)?;
    let items = build_items(&dataset, &flow_params(s)?)?;
    let net_cfg = net_config(s, &dataset)?;
    let cfg = train_config(s, seed, "steps")?;
    let outcome = train_on_items(&items, &net_cfg, s.get_or("net_seed", seed)?, &cfg)?;
    outcome.net.save(&out.join(CHECKPOINT_DIR))?;
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &outcome.records)?;
    fs::write(out.join(LOSS_CSV), csv).map_err(Error::from)?;
    let ratio = outcome.final_eval_loss / outcome.initial_eval_loss;
    let summary = format!(
        "mode={}\nsteps={}\ninitial_eval_loss={}\nfinal_eval_loss={}\nloss_ratio={}\n",
        cfg.mode,
        cfg.steps,
        sig17(outcome.initial_eval_loss),
        sig17(outcome.final_eval_loss),
        sig17(ratio)
    );
    write(&out.join(TRAIN_SUMMARY), &summary)?;
    println!(
        "{} steps of {}: eval loss {:.6} -> {:.6} (ratio {:.4})",
        cfg.steps, cfg.mode, outcome.initial_eval_loss, outcome.final_eval_loss, ratio
    );
    Ok(())
}

pub fn eval(s: &Settings, out: &Path, analytic: bool) -> Result<(), CliError> {
    let dataset = load_dataset(out)?;
    let decoder = dataset.build_decoder()?;
    let params = flow_params(s)?;
    let items = build_items(&dataset, &params)?;
    let first = &dataset.entries[0];
    let eval_fps: f64 = s.get_or("eval_fps", 1.0 / first.dt)?;
    let eval_horizon: f64 = s.get_or("eval_horizon", first.config.horizon)?;
    let ode_steps: usize = s.get("ode_steps")?;
    let noise_scale: f64 = s.get("eval_noise")?;
    let noise_seed = s.get_or("noise_seed", s.get_or("seed", 0u64)?)?;
    let delta: f64 = s.get("delta")?;
    let samples: usize = s.get("eps2_samples")?;

    let analytic_field;
    let net;
    let (field, mode, eps0): (&dyn ConditionalField, TrainMode, f64) = if analytic {
        analytic_field = AnalyticField::new(&items)?;
        (&analytic_field, TrainMode::FlowMatching, 0.0)
    } else {
        let dir = out.join(CHECKPOINT_DIR);
        if !dir.join(latent_flow::dit::CHECKPOINT_MANIFEST).is_file() {
            return Err(CliError::Missing(format!(
                "no checkpoint under {}; run `lfl train` or pass --analytic-field",
                dir.display()
            )));
        }
        net = TransformerNet::load(&dir)?;
        let summary = read_summary(out)?;
        let mode: TrainMode = summary
            .get("mode")
            .ok_or_else(|| CliError::Validation("training summary lacks mode".into()))?
            .parse()?;
        let loss: f64 = summary
            .get("final_eval_loss")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Validation("training summary lacks final_eval_loss".into()))?;
        (&net, mode, loss.sqrt())
    };

    let end = eval_horizon.max(first.config.horizon);
    let breakpoints = all_breakpoints(&items, end);
    let generator = generator_for(mode, field, ode_steps, &breakpoints);
    let dir = out.join(EVAL_DIR);
    let mut harness = format!("{HARNESS_CSV_HEADER}\n");
    let mut bound_csv = String::from("time,residual,bound_rhs,satisfied,trajectory\n");
    let mut psnr_sum = 0.0;
    let mut psnr_count = 0usize;
    for (i, (entry, item)) in dataset.entries.iter().zip(&items).enumerate() {
        let traj = entry.trajectory()?;
        let z = generation_noise(noise_seed, i, item.flow.latent_dim()) * noise_scale;
        let grid: Vec<f64> = (1..=entry.plan.total()).map(|tau| tau as f64 * entry.dt).collect();
        let estimates = generator.generate(&z, &item.caption, &grid)?;
        let report = error_decomposition(&DecompositionInput {
            flow: &item.flow,
            trajectory: &traj,
            decoder: &decoder,
            plan: &entry.plan,
            dt: entry.dt,
            delta,
            samples,
            seed: noise_seed.wrapping_add(i as u64),
            eps0,
            estimates: &estimates,
        })?;
        for row in &report.rows {
            writeln!(
                bound_csv,
                "{},{},{},{},{i}",
                sig17(row.time),
                sig17(row.residual),
                sig17(report.bound_rhs),
                u8::from(row.satisfied)
            )
            .unwrap();
        }
        write(&dir.join(format!("report_{i:04}.txt")), &report.to_key_value())?;
        let observed = entry.observed_times();
        let rows = interpolation_harness(
            &generator,
            &HarnessSpec {
                trajectory: &traj,
                decoder: &decoder,
                observed_times: &observed,
                eval_fps,
                eval_horizon,
                bound_rhs: report.bound_rhs,
                z: &z,
            },
        )?;
        psnr_sum += rows.iter().map(|r| r.psnr_db).sum::<f64>();
        psnr_count += rows.len();
        let mut buf = Vec::new();
        write_harness_csv(&mut buf, i, &rows)?;
        harness.push_str(&String::from_utf8(buf).expect("csv is ascii"));
    }
    write(&dir.join("harness.csv"), &harness)?;
    write(&dir.join("bound.csv"), &bound_csv)?;
    println!(
        "{} query rows over {} trajectories, mean PSNR {:.2} dB",
        psnr_count,
        dataset.entries.len(),
        psnr_sum / psnr_count.max(1) as f64
    );
    Ok(())
}

pub const ABLATION_HEADER: &str = "mode,initial_psnr,final_psnr";

pub fn ablate(s: &Settings, out: &Path) -> Result<(), CliError> {
    let seed = s.seed()?;
    let dataset = load_dataset(out)?;
    let items = build_items(&dataset, &flow_params(s)?)?;
    let net_cfg = net_config(s, &dataset)?;
    let cfg = train_config(s, seed, "ablate_steps")?;
    let rows = ablation(
        &dataset,
        &items,
        &net_cfg,
        s.get_or("net_seed", seed)?,
        &cfg,
        s.get("ode_steps")?,
        s.get_or("noise_seed", seed)?,
    )?;
    let mut table = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        writeln!(table, "{},{},{}", r.mode, sig17(r.initial_psnr), sig17(r.final_psnr)).unwrap();
    }
    write(&out.join(ABLATION_CSV), &table)?;
    println!("{:<20} {:>12} {:>12}", "mode", "initial dB", "final dB");
    for r in &rows {
        println!("{:<20} {:>12.2} {:>12.2}", r.mode.to_string(), r.initial_psnr, r.final_psnr);
    }
    Ok(())
}

fn csv_rows(path: &Path) -> Option<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).ok()?;
    Some(
        text.lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect(),
    )
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Collects whatever artifacts exist under `out` into a markdown summary.
pub fn report(out: &Path) -> Result<(), CliError> {
    let mut md = String::from("# Run report\n\n");
    let mut found = 0;
    if let Ok(ds) = load_dataset(out) {
        found += 1;
        let e = &ds.entries[0];
        writeln!(
            md,
            "## Dataset\n\n{} trajectories, d={}, ell={}, T={}, dt={}, {} of {} frames observed, frame dim {}.\n",
            ds.entries.len(),
            e.config.latent_dim,
            e.config.caption_dim,
            e.config.horizon,
            e.dt,
            e.plan.observed(),
            e.plan.total(),
            ds.decoder.frame_dim
        )
        .unwrap();
    }
    if let Some(rows) = csv_rows(&out.join(FIT_DIR).join("s_sweep.csv")) {
        found += 1;
        md.push_str("## Projection order sweep\n\n| s | eps1 | eps3 | node error |\n|---|---|---|---|\n");
        for r in rows.iter().filter(|r| r.len() == 4) {
            writeln!(md, "| {} | {} | {} | {} |", r[0], r[1], r[2], r[3]).unwrap();
        }
        md.push('\n');
    }
    if let Ok(summary) = read_summary(out) {
        found += 1;
        md.push_str("## Training\n\n");
        for key in ["mode", "steps", "initial_eval_loss", "final_eval_loss", "loss_ratio"] {
            if let Some(v) = summary.get(key) {
                writeln!(md, "- {key}: {v}").unwrap();
            }
        }
        md.push('\n');
    }
    if let Some(rows) = csv_rows(&out.join(EVAL_DIR).join("harness.csv")) {
        found += 1;
        let psnr = |window: &str, observed: Option<&str>| {
            mean(
                rows.iter()
                    .filter(|r| r.len() == 8 && r[6] == window && observed.is_none_or(|o| r[7] == o))
                    .filter_map(|r| r[1].parse::<f64>().ok()),
            )
        };
        let satisfied = mean(rows.iter().filter_map(|r| r.get(4)?.parse::<f64>().ok()));
        writeln!(
            md,
            "## Evaluation\n\n- mean PSNR at observed times: {:.2} dB\n- mean PSNR at unobserved in-window times: {:.2} dB\n\
             - mean PSNR outside the window: {:.2} dB\n- bound satisfied at {:.1}% of query rows\n",
            psnr("in", Some("1")),
            psnr("in", Some("0")),
            psnr("out", None),
            100.0 * satisfied
        )
        .unwrap();
    }
    if let Some(rows) = csv_rows(&out.join(ABLATION_CSV)) {
        found += 1;
        md.push_str("## Ablation\n\n| Mode | Initial PSNR | Final PSNR |\n|---|---|---|\n");
        for r in rows.iter().filter(|r| r.len() == 3) {
            let f = |v: &str| v.parse::<f64>().map(|x| format!("{x:.2}")).unwrap_or_else(|_| v.into());
            writeln!(md, "| {} | {} | {} |", r[0], f(&r[1]), f(&r[2])).unwrap();
        }
        md.push('\n');
    }
    if found == 0 {
        return Err(CliError::Missing(format!("no artifacts under {}", out.display())));
    }
    let path: PathBuf = out.join(REPORT);
    write(&path, &md)?;
    print!("{md}");
    Ok(())
}

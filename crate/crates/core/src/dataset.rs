//! On-disk synthetic datasets: a text manifest with one `key=value` line per
//! trajectory and one raw little-endian `f64` frame table per trajectory.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sig17;
use crate::world::{
    discretize, frame_count, gen_trajectory, invert_frames, observe, LatentTrajectory, ObservationPlan,
    SyntheticDecoder, TrajectoryConfig,
};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Identity,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub seed: u64,
    pub frame_dim: usize,
}

impl DecoderSpec {
    pub fn build(&self, latent_dim: usize) -> Result<SyntheticDecoder> {
        match self.kind {
            DecoderKind::Identity => {
                if self.frame_dim != latent_dim {
                    return Err(Error::Domain(format!(
                        "identity decoder needs frame dim {latent_dim}, got {}",
                        self.frame_dim
                    )));
                }
                SyntheticDecoder::identity(latent_dim)
            }
            DecoderKind::Random => SyntheticDecoder::random(self.seed, latent_dim, self.frame_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub seed: u64,
    pub config: TrajectoryConfig,
    pub dt: f64,
    pub plan: ObservationPlan,
    /// `T/Δt × D`, row `τ-1` is the frame at time `τ Δt`.
    pub frames: DMatrix<f64>,
}

impl DatasetEntry {
    pub fn trajectory(&self) -> Result<LatentTrajectory> {
        gen_trajectory(self.seed, &self.config)
    }

    /// Latents recovered from the observed frames only, in time order.
    pub fn observed_latents(&self, decoder: &SyntheticDecoder) -> Result<Vec<DVector<f64>>> {
        invert_frames(decoder, &observe(&self.frames, &self.plan)?)
    }

    pub fn observed_times(&self) -> Vec<f64> {
        self.plan.observed_times(self.dt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub decoder: DecoderSpec,
    pub entries: Vec<DatasetEntry>,
}

/// Inputs for [`Dataset::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    pub seed: u64,
    pub trajectory: TrajectoryConfig,
    pub dt: f64,
    /// Observe every `stride`-th frame, ending on the last one.
    pub stride: usize,
    pub decoder: DecoderSpec,
}

impl Dataset {
    /// Trajectory `i` uses seed `seed + i`.
    pub fn generate(spec: &GenSpec) -> Result<Self> {
        if spec.count == 0 {
            return Err(Error::Domain("trajectory count must be positive".into()));
        }
        let frames = frame_count(spec.trajectory.horizon, spec.dt)?;
        let plan = ObservationPlan::every_aligned(frames, spec.stride)?;
        let decoder = spec.decoder.build(spec.trajectory.latent_dim)?;
        let entries = (0..spec.count as u64)
            .map(|i| {
                let seed = spec.seed.wrapping_add(i);
                let traj = gen_trajectory(seed, &spec.trajectory)?;
                Ok(DatasetEntry {
                    seed,
                    config: spec.trajectory,
                    dt: spec.dt,
                    plan: plan.clone(),
                    frames: discretize(&traj, &decoder, spec.dt)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            decoder: spec.decoder,
            entries,
        })
    }

    pub fn build_decoder(&self) -> Result<SyntheticDecoder> {
        let d = self
            .entries
            .first()
            .map(|e| e.config.latent_dim)
            .ok_or_else(|| Error::Domain("dataset is empty".into()))?;
        self.decoder.build(d)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("traj_{i:04}.f64");
            let c = &e.config;
            let plan: Vec<String> = e.plan.indices().iter().map(|v| v.to_string()).collect();
            let kind = match self.decoder.kind {
                DecoderKind::Identity => "identity",
                DecoderKind::Random => "random",
            };
            manifest.push_str(&format!(
                "seed={} d={} ell={} k={} U={} T={} support={} harmonics={} amplitude={} offset={} dt={} \
                 frames_total={} N={} plan={} decoder={kind} decoder_seed={} D={} frames={file}\n",
                e.seed,
                c.latent_dim,
                c.caption_dim,
                c.smoothness,
                sig17(c.bound),
                sig17(c.horizon),
                sig17(c.support),
                c.harmonics,
                sig17(c.amplitude),
                sig17(c.offset),
                sig17(e.dt),
                e.plan.total(),
                e.plan.observed(),
                plan.join(","),
                self.decoder.seed,
                self.decoder.frame_dim,
            ));
            let mut bytes = Vec::with_capacity(8 * e.frames.len());
            for r in 0..e.frames.nrows() {
                for col in 0..e.frames.ncols() {
                    bytes.extend_from_slice(&e.frames[(r, col)].to_le_bytes());
                }
            }
            fs::write(dir.join(&file), bytes)?;
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut entries = Vec::new();
        let mut decoder: Option<DecoderSpec> = None;
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |detail: String| Error::Format {
                what: "dataset manifest",
                detail: format!("line {}: {detail}", lineno + 1),
            };
            let mut kv = HashMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("token {tok:?}")))?;
                kv.insert(k, v);
            }
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing key {k}")));
            let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("bad number for {k}"))) };
            let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("bad integer for {k}"))) };
            let config = TrajectoryConfig {
                latent_dim: int("d")? as usize,
                caption_dim: int("ell")? as usize,
                smoothness: int("k")? as u32,
                bound: num("U")?,
                horizon: num("T")?,
                support: num("support")?,
                harmonics: int("harmonics")? as usize,
                amplitude: num("amplitude")?,
                offset: num("offset")?,
            };
            config.validate()?;
            let indices = get("plan")?
                .split(',')
                .map(|v| v.parse().map_err(|_| bad(format!("bad plan index {v:?}"))))
                .collect::<Result<Vec<usize>>>()?;
            let plan = ObservationPlan::from_indices(int("frames_total")? as usize, indices)?;
            if plan.observed() != int("N")? as usize {
                return Err(bad("N disagrees with the plan".into()));
            }
            let kind = match get("decoder")? {
                "identity" => DecoderKind::Identity,
                "random" => DecoderKind::Random,
                other => return Err(bad(format!("unknown decoder {other:?}"))),
            };
            let spec = DecoderSpec {
                kind,
                seed: int("decoder_seed")?,
                frame_dim: int("D")? as usize,
            };
            match decoder {
                None => decoder = Some(spec),
                Some(prev) if prev != spec => return Err(bad("decoder differs between trajectories".into())),
                _ => {}
            }
            let dt = num("dt")?;
            let rows = frame_count(config.horizon, dt)?;
            if rows != plan.total() {
                return Err(bad("frames_total disagrees with T/dt".into()));
            }
            let file = get("frames")?;
            if file.contains('/') || file.contains("..") {
                return Err(bad(format!("frame file {file:?} must be a plain name")));
            }
            let bytes = fs::read(dir.join(file))?;
            let cols = spec.frame_dim;
            if bytes.len() != 8 * rows * cols {
                return Err(Error::Format {
                    what: "frame table",
                    detail: format!("{file}: expected {} bytes, found {}", 8 * rows * cols, bytes.len()),
                });
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(DatasetEntry {
                seed: int("seed")?,
                config,
                dt,
                plan,
                frames: DMatrix::from_row_slice(rows, cols, &values),
            });
        }
        let decoder = decoder.ok_or_else(|| Error::Format {
            what: "dataset manifest",
            detail: "no trajectories".into(),
        })?;
        Ok(Self { decoder, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GenSpec {
        GenSpec {
            count: 3,
            seed: 11,
            trajectory: TrajectoryConfig::new(3, 2, 1.0),
            dt: 1.0 / 16.0,
            stride: 2,
            decoder: DecoderSpec {
                kind: DecoderKind::Random,
                seed: 5,
                frame_dim: 8,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&spec()).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.decoder, ds.decoder);
        for (a, b) in back.entries.iter().zip(&ds.entries) {
            assert_eq!(a.config, b.config);
            assert_eq!(a.plan, b.plan);
            assert_eq!(a.dt.to_bits(), b.dt.to_bits());
            assert!(a.frames.iter().zip(b.frames.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        Dataset::generate(&spec()).unwrap().save(d1.path()).unwrap();
        Dataset::generate(&spec()).unwrap().save(d2.path()).unwrap();
        for name in [MANIFEST, "traj_0000.f64", "traj_0002.f64"] {
            assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d2.path().join(name)).unwrap());
        }
    }

    #[test]
    fn observed_latents_match_trajectory() {
        let ds = Dataset::generate(&spec()).unwrap();
        let dec = ds.build_decoder().unwrap();
        let e = &ds.entries[1];
        let traj = e.trajectory().unwrap();
        let lat = e.observed_latents(&dec).unwrap();
        assert_eq!(lat.len(), 8);
        for (x, t) in lat.iter().zip(e.observed_times()) {
            assert!((x - traj.eval(t).unwrap()).amax() < 1e-10);
        }
    }

    #[test]
    fn corrupted_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Dataset::generate(&spec()).unwrap().save(dir.path()).unwrap();
        fs::write(dir.path().join("traj_0001.f64"), [0u8; 12]).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Io(_))));
    }
}

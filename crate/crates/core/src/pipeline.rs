//! End-to-end glue: demonstration -> latent embedding -> aligned source -> fitted map.

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::demo::{self, Demonstration};
use crate::diffeo::{self, DiffeoModel, FitParams};
use crate::dynamics::{self, LatentDs, RolloutSettings, RolloutTrace};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_DTW_RADIUS;
use crate::spectral::{self, GraphSpec, LatentEmbedding};

/// How many copies past the requested `K` the embedding may add when eigenvalues run short.
pub const MAX_EXTRA_COPIES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    UnstableSpiral,
    StableSpiral,
    Archimedean,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unstable-spiral" => Ok(Self::UnstableSpiral),
            "stable-spiral" => Ok(Self::StableSpiral),
            "archimedean" | "archimedean-spiral" => Ok(Self::Archimedean),
            other => Err(Error::InvalidParameter(format!("unknown generator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_samples")]
    pub n: usize,
}

fn default_c() -> f64 {
    1.0
}

fn default_samples() -> usize {
    500
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Demonstration> {
        match self.kind {
            GeneratorKind::UnstableSpiral => demo::unstable_spiral(self.c, self.n),
            GeneratorKind::StableSpiral => demo::stable_spiral(self.c),
            GeneratorKind::Archimedean => demo::archimedean_spiral(self.n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    Generator(GeneratorSpec),
    Csv(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub dt: f64,
    pub t_max: Option<f64>,
    pub eps: f64,
    pub rate: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            dt: dynamics::DEFAULT_DT,
            t_max: None,
            eps: dynamics::DEFAULT_EPS,
            rate: dynamics::DEFAULT_RATE,
        }
    }
}

impl RolloutConfig {
    pub fn settings(&self) -> RolloutSettings {
        RolloutSettings {
            dt: self.dt,
            t_max: self.t_max.unwrap_or(50.0 / self.rate),
            eps: self.eps,
        }
    }
}

/// Everything one experiment needs; serialisable so runs can be replayed from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub demo: Option<DemoSource>,
    /// Resample the demonstration to this many points before embedding.
    pub resample: Option<usize>,
    pub n_copies: Option<usize>,
    pub fit: FitParams,
    pub rollout: RolloutConfig,
    pub dtw_radius: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            demo: None,
            resample: None,
            n_copies: None,
            fit: FitParams::default(),
            rollout: RolloutConfig::default(),
            dtw_radius: DEFAULT_DTW_RADIUS,
            seed: 0,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn load_demo(&self) -> Result<Demonstration> {
        let demo = match &self.demo {
            Some(DemoSource::Generator(g)) => g.generate()?,
            Some(DemoSource::Csv(path)) => demo::load_csv(path)?,
            None => return Err(Error::InvalidParameter("no demonstration source configured".into())),
        };
        match self.resample {
            Some(n) if n != demo.n_points() => demo.resampled(n),
            _ => Ok(demo),
        }
    }
}

/// Embedding with `K = n + 1` copies unless overridden; adds copies if eigenvalues run short.
pub fn embed(n_points: usize, n_dims: usize, n_copies: Option<usize>) -> Result<LatentEmbedding> {
    let spec = GraphSpec::new(n_points, n_dims, n_copies.unwrap_or(n_dims + 1))?;
    let selection = spectral::repeating_eigenvalues_growing(&spec, MAX_EXTRA_COPIES)?;
    Ok(spectral::embedding_from_selection(n_points, selection))
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub embedding: LatentEmbedding,
    pub aligned: DMatrix<f64>,
    pub model: DiffeoModel,
}

/// Builds the latent embedding for `demo`, aligns it and fits the latent-to-demo map.
pub fn fit_demo(demo: &Demonstration, n_copies: Option<usize>, params: &FitParams) -> Result<FitOutcome> {
    let embedding = embed(demo.n_points(), demo.n_dims(), n_copies)?;
    let aligned = embedding.align_to_demo(demo)?;
    let provenance = format!(
        "chebyshev latent N={} n={} K={}",
        demo.n_points(),
        demo.n_dims(),
        embedding.selection.n_copies
    );
    let model = diffeo::fit_labeled(&aligned, &demo.points, params, &provenance, &demo.label)?;
    Ok(FitOutcome {
        embedding,
        aligned,
        model,
    })
}

/// Rolls out the learned system from `y0`.
pub fn rollout_from(model: &DiffeoModel, rate: f64, y0: &[f64], settings: &RolloutSettings) -> Result<RolloutTrace> {
    let ds = LatentDs::for_model(model, rate)?;
    dynamics::rollout(model, &ds, y0, settings)
}

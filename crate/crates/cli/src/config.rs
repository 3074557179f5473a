use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mvk_core::experiment::{CovarianceSource, FusionMode, MapSpec};
use mvk_core::multiview::{KernelConvention, KernelFusion, RankGate};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionArg {
    Min,
    Max,
    Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConventionArg {
    Half,
    Full,
}

impl From<ConventionArg> for KernelConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Half => KernelConvention::Half,
            ConventionArg::Full => KernelConvention::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentName {
    BrownianConsensus,
    HelixSingleview,
    FlowerMultiview,
    Custom,
}

impl ExperimentName {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::BrownianConsensus => "brownian_consensus",
            ExperimentName::HelixSingleview => "helix_singleview",
            ExperimentName::FlowerMultiview => "flower_multiview",
            ExperimentName::Custom => "custom",
        }
    }
}

/// Every key a run config may set. Absent keys fall back to per-command defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub views: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_c: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Pseudoinverse threshold as a multiple of the largest covariance eigenvalue.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram_bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convention: Option<ConventionArg>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectral_lines: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densities: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locality: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_gate: Option<RankGate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion_time: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intrinsic_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maps: Option<Vec<MapSpec>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovarianceSource>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        RunConfig { $($field: $top.$field.or($base.$field)),* }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Keys set in `top` win over keys set in `self`.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        overlay!(
            self, top, experiment, seed, out, n, views, n_c, dt, epsilon, gamma, fusion, histogram_bins, convention,
            workers, repetitions, spectral_lines, radii, densities, pairs, neighbors, locality, rank_gate,
            diffusion_time, compare, intrinsic_dim, maps, covariance
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("mvk_out"))
    }

    pub fn fusion_mode(&self, default: FusionMode) -> FusionMode {
        match self.fusion {
            None => default,
            Some(FusionArg::Min) => FusionMode::Min,
            Some(FusionArg::Max) => FusionMode::Max,
            Some(FusionArg::Histogram) => FusionMode::Histogram {
                bins: self.histogram_bins.unwrap_or(20),
            },
        }
    }

    pub fn kernel_fusion(&self) -> KernelFusion {
        self.fusion_mode(FusionMode::Max).kernel_fusion()
    }

    pub fn convention(&self, default: KernelConvention) -> KernelConvention {
        self.convention.map_or(default, KernelConvention::from)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.workers == Some(0) {
            return Err(CliError::config("workers must be positive"));
        }
        if self.histogram_bins == Some(0) {
            return Err(CliError::config("histogram_bins must be positive"));
        }
        for (name, v) in [("epsilon", self.epsilon), ("dt", self.dt), ("gamma", self.gamma)] {
            if let Some(v) = v {
                let ok = if name == "gamma" { v >= 0.0 && v.is_finite() } else { v > 0.0 && v.is_finite() };
                if !ok {
                    return Err(CliError::config(format!("{name} out of range: {v}")));
                }
            }
        }
        for (name, v) in [
            ("n", self.n),
            ("views", self.views),
            ("n_c", self.n_c),
            ("repetitions", self.repetitions),
            ("pairs", self.pairs),
            ("neighbors", self.neighbors),
            ("intrinsic_dim", self.intrinsic_dim),
        ] {
            if v == Some(0) {
                return Err(CliError::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

//! Experiment configuration: JSON schema, defaults, overrides, validation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hyperfed_core::dataset::{derive_seed, InstitutionConfig, Task};
use hyperfed_core::federation::{StrategyConfig, StrategyKind};
use hyperfed_core::nets::{ImagingNet, PostProcNet, UnrolledNet};
use hyperfed_core::physics::{FanBeamGeometry, FilterKind};
use hyperfed_core::presets;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Acquisition parameters at the reference grid, as tabulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub n_views: usize,
    pub n_bins: usize,
    pub pixel_length_mm: f64,
    pub bin_length_mm: f64,
    pub source_to_center_mm: f64,
    pub detector_to_center_mm: f64,
    pub incident_intensity: f64,
}

impl GeometrySpec {
    pub fn at_grid(&self, image_size: usize) -> FanBeamGeometry {
        FanBeamGeometry {
            n_views: self.n_views,
            n_bins: self.n_bins,
            pixel_length_mm: self.pixel_length_mm,
            bin_length_mm: self.bin_length_mm,
            source_to_center_mm: self.source_to_center_mm,
            detector_to_center_mm: self.detector_to_center_mm,
            incident_intensity: self.incident_intensity,
            image_size,
        }
    }
}

impl From<&FanBeamGeometry> for GeometrySpec {
    fn from(g: &FanBeamGeometry) -> Self {
        Self {
            n_views: g.n_views,
            n_bins: g.n_bins,
            pixel_length_mm: g.pixel_length_mm,
            bin_length_mm: g.bin_length_mm,
            source_to_center_mm: g.source_to_center_mm,
            detector_to_center_mm: g.detector_to_center_mm,
            incident_intensity: g.incident_intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstitutionSpec {
    pub id: u32,
    pub geometry: GeometrySpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Dataset seed; derived from the experiment seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Views kept after noise insertion, counted on the simulation grid.
    #[serde(default)]
    pub sparse_views: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_unrolled_channels")]
    pub unrolled_channels: usize,
    #[serde(default = "d_hyper_hidden")]
    pub hyper_hidden: usize,
}

fn d_channels() -> usize {
    32
}
fn d_depth() -> usize {
    4
}
fn d_iterations() -> usize {
    8
}
fn d_unrolled_channels() -> usize {
    16
}
fn d_hyper_hidden() -> usize {
    64
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: d_channels(),
            depth: d_depth(),
            iterations: d_iterations(),
            unrolled_channels: d_unrolled_channels(),
            hyper_hidden: d_hyper_hidden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_schema")]
    pub schema_version: u32,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    /// Simulation grid side in pixels.
    #[serde(default = "d_grid")]
    pub grid_size: usize,
    /// Grid the tabulated geometries refer to.
    #[serde(default = "d_reference_grid")]
    pub reference_grid: usize,
    /// Worker threads; `null` uses every core.
    #[serde(default)]
    pub threads: Option<usize>,
    /// Test-set evaluation period in rounds (0: final round only).
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub fbp_filter: FilterKind,
    #[serde(default)]
    pub network: NetworkConfig,
    pub strategy: StrategyConfig,
    pub institutions: Vec<InstitutionSpec>,
}

fn d_schema() -> u32 {
    SCHEMA_VERSION
}
fn d_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn d_grid() -> usize {
    64
}
fn d_reference_grid() -> usize {
    presets::REFERENCE_GRID
}
fn d_eval_every() -> usize {
    1
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub strategy: Option<StrategyKind>,
    pub threads: Option<usize>,
}

fn invalid(path: impl Into<String>, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.into()))
}

impl ExperimentConfig {
    /// Parses without resolving defaults that depend on other fields.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(k) = o.strategy {
            self.strategy.strategy = k;
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
    }

    /// Fills the dataset seeds from the experiment seed, then validates.
    pub fn resolve(mut self) -> CliResult<Self> {
        let dataset_seed = derive_seed(self.seed, "dataset");
        for inst in &mut self.institutions {
            inst.seed.get_or_insert(dataset_seed);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.grid_size < 8 {
            return Err(invalid("grid_size", format!("must be at least 8, got {}", self.grid_size)));
        }
        if self.reference_grid == 0 {
            return Err(invalid("reference_grid", "must be positive"));
        }
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be positive"));
        }
        self.strategy.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.network_for_task()
            .validate()
            .map_err(|e| invalid("network", e))?;
        if self.network.hyper_hidden == 0 {
            return Err(invalid("network.hyper_hidden", "must be positive"));
        }
        if self.institutions.is_empty() {
            return Err(invalid("institutions", "at least one institution is required"));
        }
        let mut ids = BTreeSet::new();
        let other = match self.task {
            Task::PostProcessing => presets::reconstruction(),
            Task::Reconstruction => presets::post_processing(),
        };
        for (i, inst) in self.institutions.iter().enumerate() {
            let at = format!("institutions[{i}]");
            if !ids.insert(inst.id) {
                return Err(invalid(format!("{at}.id"), format!("duplicate institution id {}", inst.id)));
            }
            if inst.n_train == 0 {
                return Err(invalid(format!("{at}.n_train"), "must be positive"));
            }
            if other.iter().any(|g| GeometrySpec::from(g) == inst.geometry) {
                return Err(invalid(
                    format!("{at}.geometry"),
                    "is a preset of the other task; check `task`",
                ));
            }
            self.institution_config(inst)
                .and_then(|c| c.validate().map_err(|e| CliError::Config(e.to_string())))
                .map_err(|e| invalid(&at, e))?;
        }
        Ok(())
    }

    pub fn network_for_task(&self) -> ImagingNet {
        match self.task {
            Task::PostProcessing => ImagingNet::PostProc(PostProcNet {
                channels: self.network.channels,
                depth: self.network.depth,
            }),
            Task::Reconstruction => ImagingNet::Unrolled(UnrolledNet {
                iterations: self.network.iterations,
                channels: self.network.unrolled_channels,
            }),
        }
    }

    /// Simulation settings of one institution on the desk grid.
    pub fn institution_config(&self, inst: &InstitutionSpec) -> CliResult<InstitutionConfig> {
        let geometry = inst
            .geometry
            .at_grid(self.reference_grid)
            .desk_scaled(self.reference_grid, self.grid_size)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(InstitutionConfig {
            id: inst.id,
            geometry,
            task: self.task,
            n_train: inst.n_train,
            n_test: inst.n_test,
            seed: inst.seed.unwrap_or_else(|| derive_seed(self.seed, "dataset")),
            sparse_views: inst.sparse_views,
            fbp_filter: self.fbp_filter,
        })
    }

    pub fn institution_configs(&self) -> CliResult<Vec<InstitutionConfig>> {
        self.institutions.iter().map(|i| self.institution_config(i)).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Reads, overrides and resolves a config file.
pub fn parse_config(path: &Path, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    cfg.apply(overrides);
    cfg.resolve()
}

/// A config over the five tabulated institutions of `task`.
pub fn preset_experiment(task: Task, strategy: StrategyConfig, n_train: usize, n_test: usize) -> ExperimentConfig {
    let geoms = match task {
        Task::PostProcessing => presets::post_processing(),
        Task::Reconstruction => presets::reconstruction(),
    };
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        task,
        seed: 0,
        output_dir: d_output_dir(),
        grid_size: d_grid(),
        reference_grid: d_reference_grid(),
        threads: None,
        eval_every: d_eval_every(),
        fbp_filter: FilterKind::default(),
        network: NetworkConfig::default(),
        strategy,
        institutions: geoms
            .iter()
            .enumerate()
            .map(|(i, g)| InstitutionSpec {
                id: i as u32 + 1,
                geometry: g.into(),
                n_train,
                n_test,
                seed: None,
                sparse_views: None,
            })
            .collect(),
    }
}

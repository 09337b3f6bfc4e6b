//! Experiment configuration: a TOML schema with explicit defaults, unknown-key
//! rejection, and built-in presets. See docs/config-schema.md for the full
//! schema reference.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XrelError};
use crate::physics::{build_m, MChoice, ReferenceTensor};
use crate::tensor_space::{read_matrices, Subspace, TensorSpaceSpec, DEFAULT_RANK_TOL};
use crate::transforms::{dykhne_manifold, ManifoldSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub spec: SpecBlock,
    pub manifold: ManifoldBlock,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    pub experiment: ExperimentBlock,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecBlock {
    pub d: usize,
    pub m: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldBlock {
    /// "dykhne" (built-in) or "file".
    pub kind: String,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    /// Basis of K0 in the block text format (kind = "file").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0_file: Option<String>,
    /// L0 matrix in the block text format (kind = "file").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0_file: Option<String>,
    /// "sphere_average" (default), "single_direction", or "custom".
    #[serde(default = "default_m_choice")]
    pub m_choice: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_file: Option<String>,
}

fn default_sigma0() -> f64 {
    1.0
}

fn default_m_choice() -> String {
    "sphere_average".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub sizes: Vec<usize>,
    /// Total axis lengths (cell spacing = length / size).
    pub lengths: Vec<f64>,
}

impl Default for GridBlock {
    fn default() -> Self {
        Self {
            sizes: vec![64, 64],
            lengths: vec![1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    pub tol: f64,
    pub max_iters: usize,
    pub schedule: Vec<f64>,
    pub damping: f64,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let o = crate::solver::SolveOptions::default();
        Self {
            tol: o.tol,
            max_iters: o.max_iters,
            schedule: o.lambda_schedule,
            damping: o.damping,
        }
    }
}

/// One flat block with kind-specific keys; required keys are validated per
/// kind so unknown keys are still rejected by serde.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    /// check-algebra | laminate | solve | greens | embed | milgrom | bfe-check
    pub kind: String,

    // -- shared numeric knobs --
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,

    // -- check-algebra --
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,

    // -- laminate --
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l0_sweep: Option<Vec<f64>>,

    // -- solve / greens / embed / bfe-check --
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub membership_tol: Option<f64>,
    /// Apply a random nonsingular basis change D (sources in S·D, membership
    /// in K·D).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_d: Option<bool>,

    // -- greens --
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_cells: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<bool>,

    // -- embed / bfe-check --
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_cells: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flux_tol: Option<f64>,

    // -- milgrom --
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
}

pub const EXPERIMENT_KINDS: &[&str] = &[
    "check-algebra",
    "laminate",
    "solve",
    "greens",
    "embed",
    "milgrom",
    "bfe-check",
];

impl Config {
    /// Parses TOML, rejecting unknown keys with the parser's line/column
    /// anchor in the message.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(text).map_err(|e| XrelError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        TensorSpaceSpec::new(self.spec.d, self.spec.m)?;
        if !EXPERIMENT_KINDS.contains(&self.experiment.kind.as_str()) {
            return Err(XrelError::Config(format!(
                "unknown experiment kind {:?}; expected one of {:?}",
                self.experiment.kind, EXPERIMENT_KINDS
            )));
        }
        match self.manifold.kind.as_str() {
            "dykhne" => {
                if self.spec.d != 2 || self.spec.m != 1 {
                    return Err(XrelError::Config(
                        "manifold kind \"dykhne\" requires d = 2, m = 1".into(),
                    ));
                }
            }
            "file" => {
                if self.manifold.k0_file.is_none() || self.manifold.l0_file.is_none() {
                    return Err(XrelError::Config(
                        "manifold kind \"file\" requires k0_file and l0_file".into(),
                    ));
                }
            }
            "none" => {
                if self.experiment.kind != "milgrom" {
                    return Err(XrelError::Config(
                        "manifold kind \"none\" is only valid for the milgrom experiment".into(),
                    ));
                }
            }
            other => {
                return Err(XrelError::Config(format!(
                    "unknown manifold kind {other:?}; expected \"dykhne\", \"file\", or \"none\""
                )));
            }
        }
        if self.grid.sizes.len() != self.spec.d || self.grid.lengths.len() != self.spec.d {
            return Err(XrelError::Config(format!(
                "grid blocks need {} axes",
                self.spec.d
            )));
        }
        Ok(())
    }

    pub fn tensor_spec(&self) -> TensorSpaceSpec {
        TensorSpaceSpec::new(self.spec.d, self.spec.m).expect("validated")
    }

    pub fn grid(&self) -> Result<crate::grid::Grid> {
        let spec = self.tensor_spec();
        let spacings: Vec<f64> = self
            .grid
            .sizes
            .iter()
            .zip(&self.grid.lengths)
            .map(|(&n, &l)| l / n as f64)
            .collect();
        crate::grid::Grid::new(spec, &self.grid.sizes, &spacings)
    }

    pub fn solve_options(&self) -> crate::solver::SolveOptions {
        crate::solver::SolveOptions {
            tol: self.solver.tol,
            max_iters: self.solver.max_iters,
            lambda_schedule: self.solver.schedule.clone(),
            damping: self.solver.damping,
        }
    }

    /// Builds the manifold pieces (K0, L0, M) from the config, resolving file
    /// references relative to `base`.
    pub fn manifold(&self, base: &std::path::Path) -> Result<ManifoldSpec> {
        let spec = self.tensor_spec();
        match self.manifold.kind.as_str() {
            "dykhne" => {
                let mut ms = dykhne_manifold(self.manifold.sigma0)?;
                // Allow a non-default M choice on the built-in manifold.
                ms.m = self.build_m_choice(&spec, &ms.l0, base)?;
                Ok(ms)
            }
            "file" => {
                let read = |rel: &str| -> Result<Vec<crate::tensor_space::EndoMatrix>> {
                    let path = base.join(rel);
                    let file = std::fs::File::open(&path).map_err(|e| {
                        XrelError::Config(format!("cannot open {}: {e}", path.display()))
                    })?;
                    read_matrices(std::io::BufReader::new(file))
                };
                let k0_mats = read(self.manifold.k0_file.as_ref().unwrap())?;
                let l0_mats = read(self.manifold.l0_file.as_ref().unwrap())?;
                let l0
                    = l0_mats.first().ok_or_else(|| XrelError::Config("empty l0 file".into()))?;
                let l0 = ReferenceTensor::new(l0.clone())?;
                let k0 = Subspace::from_span(&k0_mats, DEFAULT_RANK_TOL)?;
                let m = self.build_m_choice(&spec, &l0, base)?;
                ManifoldSpec::new(spec, k0, l0, m)
            }
            "none" => Err(XrelError::Config(
                "this experiment requires a manifold block".into(),
            )),
            _ => unreachable!("validated"),
        }
    }

    fn build_m_choice(
        &self,
        spec: &TensorSpaceSpec,
        l0: &ReferenceTensor,
        base: &std::path::Path,
    ) -> Result<crate::tensor_space::EndoMatrix> {
        let choice = match self.manifold.m_choice.as_str() {
            "sphere_average" => MChoice::SphereAverage { order: None },
            "single_direction" => {
                let dir = self.manifold.direction.clone().ok_or_else(|| {
                    XrelError::Config("m_choice \"single_direction\" needs direction".into())
                })?;
                MChoice::SingleDirection(dir)
            }
            "custom" => {
                let rel = self.manifold.m_file.as_ref().ok_or_else(|| {
                    XrelError::Config("m_choice \"custom\" needs m_file".into())
                })?;
                let path = base.join(rel);
                let file = std::fs::File::open(&path).map_err(|e| {
                    XrelError::Config(format!("cannot open {}: {e}", path.display()))
                })?;
                let mats = read_matrices(std::io::BufReader::new(file))?;
                let m = mats.first().ok_or_else(|| XrelError::Config("empty m file".into()))?;
                MChoice::Custom(m.clone())
            }
            other => {
                return Err(XrelError::Config(format!(
                    "unknown m_choice {other:?}"
                )));
            }
        };
        build_m(spec, l0, &choice)
    }

    /// Resolved TOML echo with all defaults made explicit.
    pub fn to_resolved_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_else(|e| format!("# serialization error: {e}"))
    }
}

/// Built-in presets shipped with the crate (also present under presets/).
pub fn preset(name: &str) -> Option<&'static str> {
    match name {
        "dykhne-algebra" => Some(include_str!("../presets/dykhne-algebra.toml")),
        "dykhne-laminate" => Some(include_str!("../presets/dykhne-laminate.toml")),
        "dykhne-central" => Some(include_str!("../presets/dykhne-central.toml")),
        "dykhne-greens" => Some(include_str!("../presets/dykhne-greens.toml")),
        "dykhne-embed" => Some(include_str!("../presets/dykhne-embed.toml")),
        "dykhne-bfe" => Some(include_str!("../presets/dykhne-bfe.toml")),
        "milgrom-64" => Some(include_str!("../presets/milgrom-64.toml")),
        _ => None,
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "dykhne-algebra",
    "dykhne-laminate",
    "dykhne-central",
    "dykhne-greens",
    "dykhne-embed",
    "dykhne-bfe",
    "milgrom-64",
];

//! Run configuration: TOML with one table per concern, overridable by
//! `ACMORSE_<SECTION>__<KEY>` environment variables.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ConnectionOptions, FlowOptions};
use crate::grid::{MetricField, TorusGrid};
use crate::operator::Problem;
use crate::potential::Potential;
use crate::solver::{SearchOptions, StepControl};

use super::io::{read_field_csv, read_tensor_csv};

pub const ENV_PREFIX: &str = "ACMORSE_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub search: SearchSpec,
    #[serde(default)]
    pub continuation: StepControl,
    #[serde(default)]
    pub flow: FlowOptions,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub connections: ConnectionOptions,
    #[serde(default)]
    pub spectrum: SpectrumSpec,
    #[serde(default)]
    pub homology: HomologySpec,
    #[serde(default)]
    pub output: OutputSpec,
    /// Directory that relative field-file and output paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Redundant with the lengths of `lengths` and `sizes`; checked when set.
    pub dim: Option<usize>,
    pub lengths: Vec<f64>,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    #[default]
    Euclidean,
    /// Node values of a positive factor `φ` with `g = φ I`.
    ConformalFile { path: PathBuf },
    /// Row-major `d x d` tensor blocks per node.
    TensorFile { path: PathBuf },
    /// `g = exp(a ξ) I` with `ξ` uniform per node, or a random
    /// trigonometric field with wavenumbers up to `max_wavenumber`.
    RandomConformal {
        amplitude: f64,
        seed: u64,
        max_wavenumber: Option<u32>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `f(t) = t³ - t`.
    #[default]
    Cubic,
    /// `f(t) = t(t² - 1)(t² - 4)`.
    Quintic,
    /// `f(t) = sum c_k t^k`.
    Polynomial { coefficients: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub epsilon: Option<f64>,
    pub window: Option<[f64; 2]>,
    pub seed: u64,
    /// Parameter values of a `sweep`, evenly spaced over the window.
    pub sweep_points: usize,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            epsilon: None,
            window: None,
            seed: 0,
            sweep_points: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpec {
    pub seeds: usize,
    pub continuation: bool,
}

impl Default for SearchSpec {
    fn default() -> Self {
        let d = SearchOptions::default();
        Self {
            seeds: d.seeds,
            continuation: d.continuation,
        }
    }
}

/// Initial condition of the `flow` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Uniform nodal noise of the given amplitude, seeded by `run.seed`.
    Random {
        amplitude: f64,
    },
    Constant {
        value: f64,
    },
    File {
        path: PathBuf,
    },
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::Random { amplitude: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumSpec {
    pub count: usize,
}

impl Default for SpectrumSpec {
    fn default() -> Self {
        Self { count: 10 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomologySpec {
    /// Build the complex from the constant solutions only; refused unless
    /// `ε` is large enough that no other solutions exist.
    pub constants_only: bool,
    /// Compute homology from sampled (index ≥ 2) boundary matrices too.
    pub accept_heuristic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Write a field file for every solution and branch point.
    pub fields: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            fields: true,
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, std::env::vars())
    }

    /// Parses TOML text, applies `ACMORSE_SECTION__KEY=value` overrides
    /// from `env` and validates. Field files are resolved against `base`.
    pub fn parse(
        text: &str,
        base: PathBuf,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let syntax = |e: toml::de::Error| Error::Config(e.to_string());
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
            .filter(|(k, _)| k.contains("__"))
            .collect();
        overrides.sort();
        // Deserializing the text itself keeps line numbers in diagnostics.
        let mut cfg: RunConfig = if overrides.is_empty() {
            toml::from_str(text).map_err(syntax)?
        } else {
            let mut table: toml::Table = text.parse().map_err(syntax)?;
            for (key, value) in &overrides {
                apply_override(&mut table, key, value)?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| {
                    Error::Config(format!("after environment overrides: {e}"))
                })?
        };
        cfg.base_dir = base;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.lengths.len() != g.sizes.len() || g.dim.is_some_and(|d| d != g.sizes.len()) {
            return Err(Error::Config(format!(
                "grid: dim {:?}, {} lengths and {} sizes disagree",
                g.dim,
                g.lengths.len(),
                g.sizes.len()
            )));
        }
        if let Some(e) = self.run.epsilon {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config(format!(
                    "run.epsilon must be positive, got {e}"
                )));
            }
        }
        if let Some([a, b]) = self.run.window {
            if !(a.is_finite() && b.is_finite() && 0.0 < a && a < b) {
                return Err(Error::Config(format!(
                    "run.window must satisfy 0 < a < b, got [{a}, {b}]"
                )));
            }
        }
        let c = &self.continuation;
        let positive = [
            ("continuation.initial", c.initial),
            ("continuation.min", c.min),
            ("continuation.max", c.max),
            ("continuation.event_tol", c.event_tol),
            ("continuation.switch_delta", c.switch_delta),
            ("flow.residual_tol", self.flow.residual_tol),
            ("flow.match_tol", self.flow.match_tol),
            ("connections.angle_tol", self.connections.angle_tol),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if !(c.min <= c.initial && c.initial <= c.max) {
            return Err(Error::Config(
                "continuation: need min <= initial <= max".into(),
            ));
        }
        for (key, v) in [
            ("flow.dt_max", self.flow.dt_max),
            ("connections.delta", self.connections.delta),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Config(format!("{key} must be positive, got {v}")));
                }
            }
        }
        for path in [self.metric_path(), self.initial_path()]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "field file {} does not exist",
                    path.display()
                )));
            }
        }
        let grid = self.build_grid()?;
        if let Some(path) = self.metric_path() {
            let width = if matches!(self.metric, MetricSpec::TensorFile { .. }) {
                grid.dim() * grid.dim()
            } else {
                1
            };
            read_field_csv(&path, &grid, width)?;
        }
        if let Some(path) = self.initial_path() {
            read_field_csv(&path, &grid, 1)?;
        }
        Ok(())
    }

    /// `p` relative to the config file directory unless absolute.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn metric_path(&self) -> Option<PathBuf> {
        match &self.metric {
            MetricSpec::ConformalFile { path } | MetricSpec::TensorFile { path } => {
                Some(self.resolve(path))
            }
            _ => None,
        }
    }

    fn initial_path(&self) -> Option<PathBuf> {
        match &self.initial {
            InitialSpec::File { path } => Some(self.resolve(path)),
            _ => None,
        }
    }

    pub fn build_grid(&self) -> Result<Arc<TorusGrid>> {
        Ok(Arc::new(TorusGrid::new(
            self.grid.lengths.clone(),
            self.grid.sizes.clone(),
        )?))
    }

    pub fn build_metric(&self) -> Result<MetricField> {
        let grid = self.build_grid()?;
        match &self.metric {
            MetricSpec::Euclidean => Ok(MetricField::euclidean(grid)),
            MetricSpec::ConformalFile { .. } => {
                let factor = read_field_csv(&self.metric_path().unwrap(), &grid, 1)?;
                MetricField::conformal(grid, &factor)
            }
            MetricSpec::TensorFile { .. } => {
                let d = grid.dim();
                let tensors = read_tensor_csv(&self.metric_path().unwrap(), &grid, d * d)?;
                MetricField::from_tensors(grid, tensors)
            }
            MetricSpec::RandomConformal {
                amplitude,
                seed,
                max_wavenumber,
            } => MetricField::random_conformal(grid, *amplitude, *seed, *max_wavenumber),
        }
    }

    pub fn build_potential(&self) -> Result<Potential> {
        match &self.potential {
            PotentialSpec::Cubic => Ok(Potential::cubic()),
            PotentialSpec::Quintic => Ok(Potential::quintic()),
            PotentialSpec::Polynomial { coefficients } => {
                Potential::from_coeffs(coefficients.clone())
            }
        }
    }

    pub fn epsilon(&self) -> Result<f64> {
        self.run
            .epsilon
            .ok_or_else(|| Error::Config("run.epsilon is required for this subcommand".into()))
    }

    pub fn window(&self) -> Result<(f64, f64)> {
        self.run
            .window
            .map(|[a, b]| (a, b))
            .ok_or_else(|| Error::Config("run.window is required for this subcommand".into()))
    }

    /// The problem at `epsilon`.
    pub fn build_problem(&self, epsilon: f64) -> Result<Problem> {
        Problem::new(epsilon, self.build_metric()?, self.build_potential()?)
    }

    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            seeds: self.search.seeds,
            rng_seed: self.run.seed,
            continuation: self.search.continuation,
            step: self.continuation,
        }
    }

    pub fn connection_options(&self) -> ConnectionOptions {
        ConnectionOptions {
            rng_seed: self.run.seed,
            ..self.connections
        }
    }

    pub fn initial_field(&self, grid: &Arc<TorusGrid>) -> Result<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        match &self.initial {
            InitialSpec::Random { amplitude } => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.run.seed);
                Ok((0..grid.node_count())
                    .map(|_| amplitude * rng.gen_range(-1.0..=1.0))
                    .collect())
            }
            InitialSpec::Constant { value } => Ok(vec![*value; grid.node_count()]),
            InitialSpec::File { .. } => read_field_csv(&self.initial_path().unwrap(), grid, 1),
        }
    }
}

/// Sets `SECTION.KEY` (from `SECTION__KEY`, lower-cased) to `value`, read
/// as a TOML value when it parses as one and as a string otherwise.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, sections) = path.split_last().expect("split yields at least one part");
    let mut node = table;
    for s in sections {
        let entry = node
            .entry(s.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{ENV_PREFIX}{key}: {s} is not a table")))?;
    }
    node.insert(last.clone(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CIRCLE: &str = r#"
[grid]
lengths = [6.283185307179586]
sizes = [64]

[run]
epsilon = 0.4
"#;

    fn parse(text: &str, env: &[(&str, &str)]) -> Result<RunConfig> {
        RunConfig::parse(
            text,
            PathBuf::new(),
            env.iter().map(|(k, v)| (k.to_string(), v.to_string())),
        )
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = parse(CIRCLE, &[]).unwrap();
        assert!(matches!(cfg.metric, MetricSpec::Euclidean));
        assert!(matches!(cfg.potential, PotentialSpec::Cubic));
        assert_eq!(cfg.spectrum.count, 10);
        assert_eq!(cfg.epsilon().unwrap(), 0.4);
        assert!(cfg.window().is_err());
        let p = cfg.build_problem(0.4).unwrap();
        assert_eq!(p.node_count(), 64);
    }

    #[test]
    fn environment_overrides() {
        let cfg = parse(
            CIRCLE,
            &[
                ("ACMORSE_RUN__EPSILON", "0.7"),
                ("ACMORSE_RUN__WINDOW", "[0.2, 1.5]"),
                ("ACMORSE_OUTPUT__DIR", "elsewhere"),
                ("ACMORSE_CONTINUATION__MAX_STEPS", "7"),
                ("OTHER__X", "1"),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run.epsilon, Some(0.7));
        assert_eq!(cfg.run.window, Some([0.2, 1.5]));
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.continuation.max_steps, 7);
    }

    #[test]
    fn unknown_key_names_the_key_and_line() {
        let text = format!("{CIRCLE}\n[flow]\nresidual_tolerance = 1e-8\n");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("residual_tolerance"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse(&CIRCLE.replace("0.4", "-1"), &[]).is_err());
        assert!(parse(CIRCLE, &[("ACMORSE_RUN__WINDOW", "[1.0, 0.5]")]).is_err());
        assert!(parse(CIRCLE, &[("ACMORSE_FLOW__MATCH_TOL", "0")]).is_err());
        assert!(parse(&CIRCLE.replace("[64]", "[64, 64]"), &[]).is_err());
        let missing =
            format!("{CIRCLE}\n[metric]\nkind = \"conformal_file\"\npath = \"nope.csv\"\n");
        assert!(parse(&missing, &[])
            .unwrap_err()
            .to_string()
            .contains("nope.csv"));
    }

    #[test]
    fn field_files_must_match_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.csv");
        std::fs::write(&path, "i0,value\n0,1.0\n1,1.0\n2,1.0\n3,1.0\n").unwrap();
        let text = format!("{CIRCLE}\n[metric]\nkind = \"conformal_file\"\npath = \"phi.csv\"\n");
        let short = RunConfig::parse(&text, dir.path().to_path_buf(), [])
            .unwrap_err()
            .to_string();
        assert!(short.contains("missing"), "{short}");
        let fits = text.replace("[64]", "[4]");
        let cfg = RunConfig::parse(&fits, dir.path().to_path_buf(), []).unwrap();
        assert_eq!(cfg.build_metric().unwrap().weights().len(), 4);
    }

    #[test]
    fn random_metric_and_polynomial_potential() {
        let text = format!(
            "{CIRCLE}\n[metric]\nkind = \"random_conformal\"\namplitude = 0.3\nseed = 2\n\n[potential]\nkind = \"polynomial\"\ncoefficients = [0.0, -1.0, 0.0, 1.0]\n"
        );
        let cfg = parse(&text, &[]).unwrap();
        let p = cfg.build_problem(0.5).unwrap();
        assert_eq!(p.potential().coeffs(), Potential::cubic().coeffs());
        assert!(p
            .weights()
            .iter()
            .any(|&w| (w - p.weights()[0]).abs() > 1e-6));
    }
}

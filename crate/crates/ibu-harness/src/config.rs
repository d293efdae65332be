//! Flat key-value experiment configuration.
//!
//! One `key = value` per line, `#` starts a comment. Unknown or duplicate
//! keys are errors. See the README for the key reference.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ibu_core::mechanisms::Grid;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`")]
    Malformed(usize),
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("{0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceSpec {
    /// Binomial over `{0..space_size-1}` with `space_size - 1` trials and
    /// success probability 1/2.
    Binomial { space_size: usize },
    /// Uniform on an inclusive index interval, zero elsewhere.
    UniformInterval { space_size: usize, lo: usize, hi: usize },
    /// Explicit weights.
    Custom { weights: Vec<f64> },
    /// Check-in coordinates tallied onto a grid.
    Gowalla { path: PathBuf, lat_col: usize, lon_col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismSpec {
    Krr,
    TruncatedGeometric,
    PlanarGeometric,
    Rappor,
    Identity,
}

impl MechanismSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Krr => "krr",
            Self::TruncatedGeometric => "geometric",
            Self::PlanarGeometric => "planar",
            Self::Rappor => "rappor",
            Self::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Em,
    InvN,
    InvP,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Em => "em",
            Self::InvN => "invn",
            Self::InvP => "invp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Tv,
    Emd,
    Kl,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Tv => "tv",
            Self::Emd => "emd",
            Self::Kl => "kl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: SourceSpec,
    pub mechanism: MechanismSpec,
    pub grid: Option<Grid>,
    pub epsilons: Vec<f64>,
    pub samples: usize,
    pub repetitions: usize,
    pub estimators: Vec<EstimatorKind>,
    pub metrics: Vec<MetricKind>,
    pub seed: u64,
    pub em_delta: f64,
    pub em_max_iters: usize,
    pub planar_tail_tol: f64,
    /// Observable indices for the surface and uniqueness subcommands.
    pub observations: Option<Vec<usize>>,
}

impl std::str::FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or(ConfigError::Malformed(lineno + 1))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey(key));
            }
        }
        Self::from_map(map)
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        std::fs::read_to_string(path)?.parse()
    }

    fn from_map(mut map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        fn take(map: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
            map.remove(key)
        }
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.into(),
                message: format!("cannot parse `{value}`"),
            })
        }
        fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
            value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse(key, s))
                .collect()
        }

        let grid = if map.contains_key("grid_rows") {
            let lat_min: f64 = parse("grid_lat_min", &take(&mut map, "grid_lat_min").ok_or(ConfigError::MissingKey("grid_lat_min".into()))?)?;
            let lat_max: f64 = parse("grid_lat_max", &take(&mut map, "grid_lat_max").ok_or(ConfigError::MissingKey("grid_lat_max".into()))?)?;
            let lon_min: f64 = parse("grid_lon_min", &take(&mut map, "grid_lon_min").ok_or(ConfigError::MissingKey("grid_lon_min".into()))?)?;
            let lon_max: f64 = parse("grid_lon_max", &take(&mut map, "grid_lon_max").ok_or(ConfigError::MissingKey("grid_lon_max".into()))?)?;
            let rows: usize = parse("grid_rows", &take(&mut map, "grid_rows").unwrap())?;
            let cols: usize = parse("grid_cols", &take(&mut map, "grid_cols").ok_or(ConfigError::MissingKey("grid_cols".into()))?)?;
            let cell: f64 = parse("grid_cell_km", &take(&mut map, "grid_cell_km").ok_or(ConfigError::MissingKey("grid_cell_km".into()))?)?;
            Some(
                Grid::new(lat_min, lat_max, lon_min, lon_max, rows, cols, cell)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            )
        } else {
            None
        };

        let source_kind = take(&mut map, "source")
            .ok_or(ConfigError::MissingKey("source".into()))?;
        let source = match source_kind.as_str() {
            "binomial" => {
                let space: usize = parse(
                    "space_size",
                    &take(&mut map, "space_size")
                        .ok_or(ConfigError::MissingKey("space_size".into()))?,
                )?;
                SourceSpec::Binomial { space_size: space }
            }
            "uniform" => {
                let space: usize = parse(
                    "space_size",
                    &take(&mut map, "space_size")
                        .ok_or(ConfigError::MissingKey("space_size".into()))?,
                )?;
                let lo: usize = parse(
                    "uniform_lo",
                    &take(&mut map, "uniform_lo")
                        .ok_or(ConfigError::MissingKey("uniform_lo".into()))?,
                )?;
                let hi: usize = parse(
                    "uniform_hi",
                    &take(&mut map, "uniform_hi")
                        .ok_or(ConfigError::MissingKey("uniform_hi".into()))?,
                )?;
                if lo > hi || hi >= space {
                    return Err(ConfigError::Invalid(format!(
                        "uniform interval [{lo}, {hi}] does not fit in space of size {space}"
                    )));
                }
                SourceSpec::UniformInterval { space_size: space, lo, hi }
            }
            "custom" => {
                let weights: Vec<f64> = parse_list(
                    "custom_weights",
                    &take(&mut map, "custom_weights")
                        .ok_or(ConfigError::MissingKey("custom_weights".into()))?,
                )?;
                SourceSpec::Custom { weights }
            }
            "gowalla" => {
                let path = PathBuf::from(
                    take(&mut map, "gowalla_path")
                        .ok_or(ConfigError::MissingKey("gowalla_path".into()))?,
                );
                let lat_col: usize = match take(&mut map, "gowalla_lat_col") {
                    Some(v) => parse("gowalla_lat_col", &v)?,
                    None => 2,
                };
                let lon_col: usize = match take(&mut map, "gowalla_lon_col") {
                    Some(v) => parse("gowalla_lon_col", &v)?,
                    None => 3,
                };
                if grid.is_none() {
                    return Err(ConfigError::Invalid(
                        "source = gowalla requires the grid_* keys".into(),
                    ));
                }
                SourceSpec::Gowalla { path, lat_col, lon_col }
            }
            other => {
                return Err(ConfigError::BadValue {
                    key: "source".into(),
                    message: format!("unknown source `{other}`"),
                })
            }
        };

        let mechanism = match take(&mut map, "mechanism")
            .ok_or(ConfigError::MissingKey("mechanism".into()))?
            .as_str()
        {
            "krr" => MechanismSpec::Krr,
            "geometric" => MechanismSpec::TruncatedGeometric,
            "planar" => MechanismSpec::PlanarGeometric,
            "rappor" => MechanismSpec::Rappor,
            "identity" => MechanismSpec::Identity,
            other => {
                return Err(ConfigError::BadValue {
                    key: "mechanism".into(),
                    message: format!("unknown mechanism `{other}`"),
                })
            }
        };

        let mut epsilons: Vec<f64> = match take(&mut map, "epsilons") {
            Some(v) => parse_list("epsilons", &v)?,
            None if mechanism == MechanismSpec::Identity => vec![0.0],
            None => return Err(ConfigError::MissingKey("epsilons".into())),
        };
        epsilons.sort_by(|a, b| a.partial_cmp(b).expect("epsilons are finite"));
        epsilons.dedup();

        let samples: usize = match take(&mut map, "samples") {
            Some(v) => parse("samples", &v)?,
            None => return Err(ConfigError::MissingKey("samples".into())),
        };
        let repetitions: usize = match take(&mut map, "repetitions") {
            Some(v) => parse("repetitions", &v)?,
            None => 1,
        };
        let estimators = match take(&mut map, "estimators") {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "em" => Ok(EstimatorKind::Em),
                    "invn" => Ok(EstimatorKind::InvN),
                    "invp" => Ok(EstimatorKind::InvP),
                    other => Err(ConfigError::BadValue {
                        key: "estimators".into(),
                        message: format!("unknown estimator `{other}`"),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => vec![EstimatorKind::Em, EstimatorKind::InvN, EstimatorKind::InvP],
        };
        let metrics = match take(&mut map, "metrics") {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s {
                    "tv" => Ok(MetricKind::Tv),
                    "emd" => Ok(MetricKind::Emd),
                    "kl" => Ok(MetricKind::Kl),
                    other => Err(ConfigError::BadValue {
                        key: "metrics".into(),
                        message: format!("unknown metric `{other}`"),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => vec![MetricKind::Tv],
        };
        let seed: u64 = match take(&mut map, "seed") {
            Some(v) => parse("seed", &v)?,
            None => 0,
        };
        let em_delta: f64 = match take(&mut map, "em_delta") {
            Some(v) => parse("em_delta", &v)?,
            None => 1e-10,
        };
        let em_max_iters: usize = match take(&mut map, "em_max_iters") {
            Some(v) => parse("em_max_iters", &v)?,
            None => 1_000_000,
        };
        let planar_tail_tol: f64 = match take(&mut map, "planar_tail_tol") {
            Some(v) => parse("planar_tail_tol", &v)?,
            None => 1e-9,
        };
        let observations: Option<Vec<usize>> = match take(&mut map, "observations") {
            Some(v) => Some(parse_list("observations", &v)?),
            None => None,
        };

        if let Some(key) = map.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }

        let cfg = Self {
            source,
            mechanism,
            grid,
            epsilons,
            samples,
            repetitions,
            estimators,
            metrics,
            seed,
            em_delta,
            em_max_iters,
            planar_tail_tol,
            observations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.samples < 1 {
            return Err(ConfigError::Invalid("samples must be at least 1".into()));
        }
        if self.repetitions < 1 {
            return Err(ConfigError::Invalid("repetitions must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(ConfigError::Invalid("estimator set must be non-empty".into()));
        }
        if self.metrics.is_empty() {
            return Err(ConfigError::Invalid("metric set must be non-empty".into()));
        }
        if self.epsilons.is_empty() {
            return Err(ConfigError::Invalid("epsilon sweep must be non-empty".into()));
        }
        if self.mechanism == MechanismSpec::PlanarGeometric && self.grid.is_none() {
            return Err(ConfigError::Invalid("mechanism = planar requires the grid_* keys".into()));
        }
        if matches!(self.source, SourceSpec::Gowalla { .. }) && self.grid.is_none() {
            return Err(ConfigError::Invalid("source = gowalla requires the grid_* keys".into()));
        }
        Ok(())
    }

    /// Canonical rendering of every field, the input to [`Self::hash`].
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        match &self.source {
            SourceSpec::Binomial { space_size } => {
                out.push_str(&format!("source=binomial;space={space_size};"))
            }
            SourceSpec::UniformInterval { space_size, lo, hi } => {
                out.push_str(&format!("source=uniform;space={space_size};lo={lo};hi={hi};"))
            }
            SourceSpec::Custom { weights } => {
                out.push_str("source=custom;w=");
                for w in weights {
                    out.push_str(&format!("{w},"));
                }
                out.push(';');
            }
            SourceSpec::Gowalla { path, lat_col, lon_col } => out.push_str(&format!(
                "source=gowalla;path={};lat={lat_col};lon={lon_col};",
                path.display()
            )),
        }
        out.push_str(&format!("mechanism={};", self.mechanism.name()));
        if let Some(grid) = &self.grid {
            out.push_str(&format!(
                "grid={},{},{},{},{}x{},{};",
                grid.lat_min,
                grid.lat_max,
                grid.lon_min,
                grid.lon_max,
                grid.rows,
                grid.cols,
                grid.cell_side_km
            ));
        }
        out.push_str("eps=");
        for e in &self.epsilons {
            out.push_str(&format!("{e},"));
        }
        out.push_str(&format!(
            ";samples={};reps={};seed={};em_delta={};em_max_iters={};tail={};",
            self.samples,
            self.repetitions,
            self.seed,
            self.em_delta,
            self.em_max_iters,
            self.planar_tail_tol
        ));
        out.push_str("estimators=");
        for e in &self.estimators {
            out.push_str(e.name());
            out.push(',');
        }
        out.push_str(";metrics=");
        for m in &self.metrics {
            out.push_str(m.name());
            out.push(',');
        }
        if let Some(obs) = &self.observations {
            out.push_str(";obs=");
            for o in obs {
                out.push_str(&format!("{o},"));
            }
        }
        out
    }

    /// FNV-1a hash of the canonical string, used in output filenames.
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical_string().as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

//! Run configuration schema and the builders that turn it into library
//! objects. Unknown keys are rejected everywhere so a typo fails loudly
//! instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use sandtable::dynamics::SchemeParams;
use sandtable::geometry::{BoundaryArc, Domain, GammaGeometry};
use sandtable::grid::Grid;
use sandtable::geometry::Point;
use sandtable::source::{RadialBump, SourceSpec};

use crate::csvio;
use crate::CliError;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub domain: DomainConfig,
    pub gamma: Vec<ArcConfig>,
    pub source: SourceConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub scheme: SchemeConfig,
    pub outputs: OutputsConfig,
    pub compare: Option<CompareConfig>,
    #[serde(default)]
    pub weak_bumps: Vec<BumpConfig>,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Rectangle { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArcConfig {
    /// Straight open stretch between two points on a rectangle side.
    Segment { a: [f64; 2], b: [f64; 2] },
    /// Open angular range of a circle.
    Arc { center: [f64; 2], radius: f64, start: f64, end: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Constant { rate: f64 },
    Bumps { bumps: Vec<BumpConfig> },
    Sampled { file: PathBuf },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpConfig {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub h: f64,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub c: f64,
    pub steady_tol: f64,
    pub max_steps: Option<usize>,
    pub wall_policy: WallPolicyConfig,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        let p = SchemeParams::default();
        SchemeConfig {
            c: p.c,
            steady_tol: p.steady_tol,
            max_steps: p.max_steps,
            wall_policy: WallPolicyConfig { threshold: p.wall_threshold },
        }
    }
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WallPolicyConfig {
    pub threshold: f64,
}

impl Default for WallPolicyConfig {
    fn default() -> Self {
        WallPolicyConfig { threshold: SchemeParams::default().wall_threshold }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    pub directory: PathBuf,
    /// Subset of field names to write; everything when absent.
    pub fields: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Built-in reference: "dist", "standing" or "rolling".
    pub oracle: Option<String>,
    /// Reference field file, used when no oracle is named.
    pub field: Option<PathBuf>,
    #[serde(default)]
    pub exclusion: ExclusionConfig,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExclusionConfig {
    #[serde(default)]
    pub disks: Vec<DiskExclusion>,
    #[serde(default)]
    pub x_bands: Vec<BandExclusion>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskExclusion {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandExclusion {
    pub x: f64,
    pub half_width: f64,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn geometry(&self) -> Result<GammaGeometry, CliError> {
        let cfg = |e: sandtable::SandtableError| CliError::Config(e.to_string());
        let domain = match self.domain {
            DomainConfig::Rectangle { x0, y0, x1, y1 } => Domain::rect(x0, y0, x1, y1),
            DomainConfig::Disk { cx, cy, r } => Domain::disk(cx, cy, r),
        }
        .map_err(cfg)?;
        let arcs = self
            .gamma
            .iter()
            .map(|a| match *a {
                ArcConfig::Segment { a, b } => BoundaryArc::Segment {
                    a: Point::new(a[0], a[1]),
                    b: Point::new(b[0], b[1]),
                },
                ArcConfig::Arc { center, radius, start, end } => BoundaryArc::CircleArc {
                    center: Point::new(center[0], center[1]),
                    radius,
                    start,
                    end,
                },
            })
            .collect();
        GammaGeometry::new(domain, arcs).map_err(cfg)
    }

    /// Grid step after an optional command-line override.
    pub fn h(&self, override_h: Option<f64>) -> Result<f64, CliError> {
        let h = override_h.unwrap_or(self.grid.h);
        if h > 0.0 && h.is_finite() {
            Ok(h)
        } else {
            Err(CliError::Config(format!("grid.h = {h} is not a positive step")))
        }
    }

    /// Node lattice over the domain's bounding box.
    pub fn node_grid(&self, h: f64) -> Result<Grid, CliError> {
        let (x0, y0, x1, y1) = self.bbox();
        Grid::nodes(x0, y0, x1, y1, h).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Cell-center lattice over the same box, for quadrature reports.
    pub fn center_grid(&self, h: f64) -> Result<Grid, CliError> {
        let (x0, y0, x1, y1) = self.bbox();
        Grid::centers(x0, y0, x1, y1, h).map_err(|e| CliError::Config(e.to_string()))
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match self.domain {
            DomainConfig::Rectangle { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            DomainConfig::Disk { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
        }
    }

    pub fn source(&self) -> Result<SourceSpec, CliError> {
        let cfg = |e: sandtable::SandtableError| CliError::Config(format!("source: {e}"));
        match &self.source {
            SourceConfig::Constant { rate } => SourceSpec::constant(*rate).map_err(cfg),
            SourceConfig::Bumps { bumps } => {
                let bumps = bumps
                    .iter()
                    .map(|b| RadialBump::new(Point::new(b.center[0], b.center[1]), b.radius, b.amplitude))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(cfg)?;
                SourceSpec::bumps(bumps).map_err(cfg)
            }
            SourceConfig::Sampled { file } => {
                let field = csvio::read_field(file)?;
                SourceSpec::sampled(field).map_err(cfg)
            }
        }
    }

    pub fn params(&self) -> Result<SchemeParams, CliError> {
        let params = SchemeParams {
            c: self.scheme.c,
            steady_tol: self.scheme.steady_tol,
            max_steps: self.scheme.max_steps,
            wall_threshold: self.scheme.wall_policy.threshold,
        };
        params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(params)
    }
}

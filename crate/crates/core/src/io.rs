//! Problem files, run configuration, field export/import and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checker::Thresholds;
use crate::error::{Error, Result};
use crate::grid::{mass, torus_delta, Field, Location, SpaceTimeGrid, SpatialField, TimeLoc};
use crate::model::{PowerCoupling, PowerHamiltonian, ProblemData};
use crate::nash::GameConfig;
use crate::solver::SolverConfig;

// ---------------------------------------------------------------------------
// Problem description

/// A scalar function on the torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Zero,
    /// The constant `1`.
    Uniform,
    Constant {
        value: f64,
    },
    /// `exp(-|x - center|^2 / (2 width^2))` with the torus distance;
    /// rescaled to unit mass when `normalize` is set.
    GaussianBump {
        center: Vec<f64>,
        width: f64,
        #[serde(default)]
        normalize: bool,
    },
    /// `offset + amplitude * prod_a cos(2 pi frequency x_a)`.
    Cosine {
        amplitude: f64,
        frequency: u32,
        #[serde(default)]
        offset: f64,
    },
    /// Node values, axis 0 major.
    Values {
        values: Vec<f64>,
    },
}

impl FieldSpec {
    pub fn sample(&self, grid: &SpaceTimeGrid) -> Result<SpatialField> {
        let d = grid.dim();
        match self {
            FieldSpec::Zero => Ok(SpatialField::constant(grid, 0.0)),
            FieldSpec::Uniform => Ok(SpatialField::constant(grid, 1.0)),
            FieldSpec::Constant { value } => Ok(SpatialField::constant(grid, *value)),
            FieldSpec::GaussianBump {
                center,
                width,
                normalize,
            } => {
                if center.len() != d {
                    return Err(Error::Parse(format!(
                        "gaussian_bump center has {} coordinates on a {d}-dimensional grid",
                        center.len()
                    )));
                }
                if !(*width > 0.0) {
                    return Err(Error::Parse(format!("gaussian_bump width must be positive, got {width}")));
                }
                let raw = SpatialField::from_fn(grid, |p| {
                    let s: f64 = (0..d).map(|a| torus_delta(p[a] - center[a]).powi(2)).sum();
                    (-s / (2.0 * width * width)).exp()
                });
                if *normalize {
                    let total = mass(grid, raw.values());
                    SpatialField::new(grid, raw.values().iter().map(|v| v / total).collect())
                } else {
                    Ok(raw)
                }
            }
            FieldSpec::Cosine {
                amplitude,
                frequency,
                offset,
            } => {
                let k = 2.0 * std::f64::consts::PI * *frequency as f64;
                Ok(SpatialField::from_fn(grid, |p| {
                    offset + amplitude * (0..d).map(|a| (k * p[a]).cos()).product::<f64>()
                }))
            }
            FieldSpec::Values { values } => SpatialField::new(grid, values.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub nx: usize,
    pub nt: usize,
    #[serde(default = "unit")]
    pub horizon: f64,
}

fn unit() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn zero_spec() -> FieldSpec {
    FieldSpec::Zero
}

fn uniform_spec() -> FieldSpec {
    FieldSpec::Uniform
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSpec {
    #[serde(default = "two")]
    pub r: f64,
    #[serde(default = "zero_spec")]
    pub potential: FieldSpec,
    /// Declared Lipschitz constant of the potential; measured on the grid
    /// when omitted.
    pub potential_lipschitz: Option<f64>,
}

impl Default for HamiltonianSpec {
    fn default() -> Self {
        Self {
            r: 2.0,
            potential: FieldSpec::Zero,
            potential_lipschitz: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    #[serde(default = "two")]
    pub q: f64,
    #[serde(default = "uniform_spec")]
    pub weight: FieldSpec,
    pub weight_lipschitz: Option<f64>,
}

impl Default for CouplingSpec {
    fn default() -> Self {
        Self {
            q: 2.0,
            weight: FieldSpec::Uniform,
            weight_lipschitz: None,
        }
    }
}

/// Problem file. Every omitted section takes the homogeneous default
/// (`r = q = 2`, `c = 1`, `l = 0`, `m0 = 1`, `phi_T = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub hamiltonian: HamiltonianSpec,
    #[serde(default)]
    pub coupling: CouplingSpec,
    #[serde(default = "uniform_spec")]
    pub m0: FieldSpec,
    #[serde(default = "zero_spec")]
    pub phi_terminal: FieldSpec,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<ProblemData> {
        let g = &self.grid;
        let grid = SpaceTimeGrid::new(g.dim, g.nx, g.nt, g.horizon)?;
        let potential = self.hamiltonian.potential.sample(&grid)?;
        let pot_lip = self
            .hamiltonian
            .potential_lipschitz
            .unwrap_or_else(|| potential.observed_lipschitz(&grid).0);
        let weight = self.coupling.weight.sample(&grid)?;
        let weight_lip = self
            .coupling
            .weight_lipschitz
            .unwrap_or_else(|| weight.observed_lipschitz(&grid).0);
        Ok(ProblemData {
            hamiltonian: PowerHamiltonian::new(self.hamiltonian.r, potential, pot_lip)?,
            coupling: PowerCoupling::new(self.coupling.q, weight, weight_lip)?,
            m0: self.m0.sample(&grid)?,
            phi_terminal: self.phi_terminal.sample(&grid)?,
            grid,
        })
    }

    pub fn homogeneous(dim: usize, nx: usize, nt: usize) -> Self {
        Self {
            grid: GridSpec {
                dim,
                nx,
                nt,
                horizon: 1.0,
            },
            hamiltonian: HamiltonianSpec::default(),
            coupling: CouplingSpec::default(),
            m0: FieldSpec::Uniform,
            phi_terminal: FieldSpec::Zero,
        }
    }

    /// Homogeneous data with a normalized gaussian initial density at the
    /// torus centre.
    pub fn gaussian(dim: usize, nx: usize, nt: usize, width: f64) -> Self {
        Self {
            m0: FieldSpec::GaussianBump {
                center: vec![0.5; dim],
                width,
                normalize: true,
            },
            ..Self::homogeneous(dim, nx, nt)
        }
    }
}

/// Solver, checker and game settings of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub thresholds: Thresholds,
    pub game: GameConfig,
}

pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse(format!("{origin}: {e}")))
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_toml(&text, &path.display().to_string())
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Parse(e.to_string()))
}

// ---------------------------------------------------------------------------
// Field export

fn time_coordinate(grid: &SpaceTimeGrid, loc: TimeLoc, k: usize) -> f64 {
    match loc {
        TimeLoc::Node => grid.time_node(k),
        TimeLoc::Cell => (k as f64 + 0.5) * grid.ht(),
    }
}

/// CSV with columns `t,x[,y][,component],value`. Cell and face values are
/// reported at their owning node; floats use 17 significant digits.
pub fn field_to_csv(grid: &SpaceTimeGrid, field: &Field) -> String {
    let d = grid.dim();
    let n = grid.n_space();
    let comps = field.components();
    let mut out = String::from("t,x");
    if d == 2 {
        out.push_str(",y");
    }
    if comps > 1 {
        out.push_str(",component");
    }
    out.push_str(",value\n");
    let loc = field.location();
    for k in 0..field.slices() {
        let t = time_coordinate(grid, loc.time, k);
        for c in 0..comps {
            for i in 0..n {
                let p = grid.position(i);
                let _ = write!(out, "{t:.16e},{:.16e}", p[0]);
                if d == 2 {
                    let _ = write!(out, ",{:.16e}", p[1]);
                }
                if comps > 1 {
                    let _ = write!(out, ",{c}");
                }
                let _ = writeln!(out, ",{:.16e}", field.get(k, c, i));
            }
        }
    }
    out
}

pub fn field_from_csv(
    grid: &SpaceTimeGrid,
    loc: Location,
    components: usize,
    text: &str,
    origin: &str,
) -> Result<Field> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{origin}: empty file")))?
        .1;
    let columns = header.split(',').count();
    let expected_cols = 2 + grid.dim() + usize::from(components > 1);
    if columns != expected_cols {
        return Err(Error::Parse(format!(
            "{origin}: header has {columns} columns, expected {expected_cols}"
        )));
    }
    let mut values = Vec::with_capacity(grid.slices(loc.time) * components * grid.n_space());
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let last = line
            .rsplit(',')
            .next()
            .ok_or_else(|| Error::Parse(format!("{origin}:{}: empty row", no + 1)))?;
        let v: f64 = last
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("{origin}:{}: bad value {last:?}: {e}", no + 1)))?;
        values.push(v);
    }
    Field::from_vec(grid, loc, components, values)
        .map_err(|e| Error::Parse(format!("{origin}: {e}")))
}

/// Little-endian dump: a header of four `u64` (slices, components, spatial
/// dimension, nodes per axis) followed by the field data as `f64`.
pub fn field_to_bytes(grid: &SpaceTimeGrid, field: &Field) -> Vec<u8> {
    let header = [field.slices(), field.components(), grid.dim(), grid.nx()];
    let mut out: Vec<u8> = header.iter().flat_map(|v| (*v as u64).to_le_bytes()).collect();
    out.extend(field.data().iter().flat_map(|v| v.to_le_bytes()));
    out
}

pub fn field_from_bytes(
    grid: &SpaceTimeGrid,
    loc: Location,
    components: usize,
    bytes: &[u8],
) -> Result<Field> {
    if bytes.len() < 32 || bytes.len() % 8 != 0 {
        return Err(Error::Parse("binary field is truncated".into()));
    }
    let word = |c: &[u8]| u64::from_le_bytes(c.try_into().expect("chunk of 8"));
    let header: Vec<u64> = bytes[..32].chunks_exact(8).map(word).collect();
    let expected = [
        grid.slices(loc.time) as u64,
        components as u64,
        grid.dim() as u64,
        grid.nx() as u64,
    ];
    if header != expected {
        return Err(Error::Parse(format!(
            "binary field header {header:?} does not match the grid, expected {expected:?}"
        )));
    }
    let values = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_bits(word(c)))
        .collect();
    Field::from_vec(grid, loc, components, values)
}

// ---------------------------------------------------------------------------
// Manifest

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub problem_sha256: String,
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch when the run started and finished.
    pub started: u64,
    pub finished: u64,
    pub artifacts: Vec<Artifact>,
}

/// Writes artifacts into a directory and records their hashes.
pub struct ArtifactWriter {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.artifacts.retain(|a| a.path != name);
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Record the artifacts in `manifest` and write it as `name`.
    pub fn finish(self, mut manifest: RunManifest, name: &str) -> Result<RunManifest> {
        manifest.artifacts = self.artifacts;
        let mut text =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        Ok(manifest)
    }
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

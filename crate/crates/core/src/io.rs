//! Instance configs, marginal files and coupling artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Conditioning, Direction, InstanceOptions, MarginalSystem, Payoff, VmotInstance, DEFAULT_PATH_BUDGET};
use crate::marginals::{quantize, DiscreteMarginal};
use crate::payoff::Expr;
use crate::solver_exact::Coupling;

pub const CONFIG_SCHEMA: u32 = 1;

/// Where one marginal comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MarginalSource {
    /// JSON `{"points": [...], "weights": [...]}` or CSV `point,weight`,
    /// relative to the config file.
    File(String),
    Inline(DiscreteMarginal),
    /// Empirical sample quantized to at most `atoms` atoms.
    Samples { samples: SampleSource, atoms: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleSource {
    /// CSV with a single `sample` column.
    File(String),
    Inline(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub schema: u32,
    /// `marginals[t][i]` for maturity `t` and asset `i`.
    pub marginals: Vec<Vec<MarginalSource>>,
    pub payoff: String,
    pub direction: Direction,
    /// Optional `v_{t,i}` expressions in the scalar `x`, one per marginal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_budget: Option<u128>,
}

/// How a config is turned into an instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Mixture weight of the irreducibility perturbation.
    pub perturb: Option<f64>,
    pub conditioning: Conditioning,
    pub direction: Option<Direction>,
}

/// A parsed config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: InstanceConfig,
    pub base_dir: PathBuf,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let config: InstanceConfig = serde_json::from_reader(BufReader::new(file))?;
    if config.schema != CONFIG_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported config schema {} (expected {CONFIG_SCHEMA})",
            config.schema
        )));
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig { config, base_dir })
}

impl LoadedConfig {
    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_marginals(&self) -> Result<Vec<Vec<DiscreteMarginal>>> {
        self.config
            .marginals
            .iter()
            .map(|row| {
                row.iter()
                    .map(|src| match src {
                        MarginalSource::File(p) => read_marginal(self.resolve(p)),
                        MarginalSource::Inline(m) => Ok(m.clone()),
                        MarginalSource::Samples { samples, atoms } => {
                            let xs = match samples {
                                SampleSource::File(p) => read_samples(self.resolve(p))?,
                                SampleSource::Inline(v) => v.clone(),
                            };
                            quantize(&xs, *atoms)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// The marginal system without the convex-order check.
    pub fn system(&self) -> Result<MarginalSystem> {
        MarginalSystem::new_unchecked(self.load_marginals()?)
    }

    pub fn build(&self, opts: BuildOptions) -> Result<VmotInstance> {
        let mut system = self.system()?;
        system.check_order()?;
        if let Some(eps) = opts.perturb {
            system = system.perturbed(eps)?;
        }
        let (n, d) = (system.periods(), system.assets());
        let mut payoff = Payoff::parse(&self.config.payoff, n, d)?;
        if let Some(b) = &self.config.bounds {
            let exprs = b
                .iter()
                .map(|row| row.iter().map(|s| Expr::parse_scalar(s)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            payoff = payoff.with_bounds(exprs);
        }
        VmotInstance::build(
            system,
            payoff,
            opts.direction.unwrap_or(self.config.direction),
            InstanceOptions {
                path_budget: self.config.path_budget.unwrap_or(DEFAULT_PATH_BUDGET),
                enforce_convex_order: true,
                conditioning: opts.conditioning,
            },
        )
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Reads a marginal from JSON or, for a `.csv` extension, from a
/// `point,weight` table with a header row.
pub fn read_marginal(path: impl AsRef<Path>) -> Result<DiscreteMarginal> {
    let path = path.as_ref();
    if !is_csv(path) {
        let file = File::open(path)?;
        return serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    }
    #[derive(Deserialize)]
    struct Row {
        point: f64,
        weight: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        points.push(row.point);
        weights.push(row.weight);
    }
    DiscreteMarginal::new(points, weights)
}

/// Reads a one-column CSV of samples with a `sample` header.
pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    #[derive(Deserialize)]
    struct Row {
        sample: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    rdr.deserialize::<Row>()
        .map(|r| r.map(|r| r.sample).map_err(|e| csv_err(path, e)))
        .collect()
}

pub fn write_marginal_json(path: impl AsRef<Path>, mu: &DiscreteMarginal) -> Result<()> {
    write_json(path, mu)
}

pub fn write_marginal_csv(path: impl AsRef<Path>, mu: &DiscreteMarginal) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["point", "weight"]).map_err(|e| csv_err(path, e))?;
    for (p, q) in mu.points().iter().zip(mu.weights()) {
        w.write_record([p.to_string(), q.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub index: usize,
    pub path: Vec<Vec<f64>>,
    pub mass: f64,
}

/// On-disk coupling. Paths are stored next to their flat grid index so the
/// file is readable on its own; loading checks that they agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFile {
    pub instance_hash: String,
    pub direction: Direction,
    pub periods: usize,
    pub assets: usize,
    pub masses: Vec<CouplingEntry>,
}

impl CouplingFile {
    pub fn new(coupling: &Coupling, instance: &VmotInstance) -> Self {
        let grid = instance.grid();
        Self {
            instance_hash: coupling.instance_hash().to_string(),
            direction: instance.direction(),
            periods: instance.periods(),
            assets: instance.assets(),
            masses: coupling
                .masses()
                .iter()
                .map(|&(k, m)| CouplingEntry {
                    index: k,
                    path: grid.nested_values(k),
                    mass: m,
                })
                .collect(),
        }
    }

    pub fn into_coupling(self, instance: &VmotInstance) -> Result<Coupling> {
        if self.instance_hash != instance.hash() {
            return Err(Error::MismatchedInstance {
                expected: instance.hash(),
                found: self.instance_hash,
            });
        }
        let grid = instance.grid();
        let mut masses = Vec::with_capacity(self.masses.len());
        for e in self.masses {
            if e.index >= instance.n_paths() || grid.nested_values(e.index) != e.path {
                return Err(Error::Format(format!("coupling entry {} does not match the grid", e.index)));
            }
            if !(e.mass.is_finite() && e.mass >= 0.0) {
                return Err(Error::Format(format!("invalid mass {} at entry {}", e.mass, e.index)));
            }
            masses.push((e.index, e.mass));
        }
        Ok(Coupling::new(masses, self.instance_hash))
    }
}

pub fn save_coupling(path: impl AsRef<Path>, coupling: &Coupling, instance: &VmotInstance) -> Result<()> {
    write_json(path, &CouplingFile::new(coupling, instance))
}

pub fn load_coupling(path: impl AsRef<Path>, instance: &VmotInstance) -> Result<Coupling> {
    read_json::<CouplingFile>(path)?.into_coupling(instance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver_exact::solve_instance;
    use std::fs;

    fn inst_b_config(dir: &Path) -> PathBuf {
        fs::write(dir.join("m1.json"), r#"{"points":[-1,1],"weights":[0.5,0.5]}"#).unwrap();
        fs::write(dir.join("m2.csv"), "point,weight\n-2,0.5\n2,0.5\n").unwrap();
        let cfg = dir.join("inst.json");
        fs::write(
            &cfg,
            r#"{"schema":1,"marginals":[["m1.json"],["m2.csv"]],"payoff":"abs(x[2][1]-x[1][1])","direction":"min"}"#,
        )
        .unwrap();
        cfg
    }

    #[test]
    fn config_with_json_and_csv_marginals() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(inst_b_config(dir.path())).unwrap();
        let inst = cfg.build(BuildOptions::default()).unwrap();
        assert_eq!(inst.n_paths(), 4);
        assert!((solve_instance(&inst).unwrap().value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn inline_and_sample_sources() {
        let src = r#"{"schema":1,"marginals":[[{"samples":[-1,1,-1,1],"atoms":2}],[{"points":[-2,2],"weights":[0.5,0.5]}]],
            "payoff":"x[2][1]","direction":"max","bounds":[["1"],["abs(x)"]]}"#;
        let cfg = LoadedConfig {
            config: serde_json::from_str(src).unwrap(),
            base_dir: PathBuf::new(),
        };
        let mu = cfg.load_marginals().unwrap();
        assert_eq!(mu[0][0].points(), &[-1.0, 1.0]);
        assert!(cfg.build(BuildOptions::default()).is_ok());
    }

    #[test]
    fn bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_config(dir.path().join("none.json")), Err(Error::Io(_))));
        let p = dir.path().join("v2.json");
        fs::write(&p, r#"{"schema":2,"marginals":[],"payoff":"0","direction":"min"}"#).unwrap();
        assert!(matches!(load_config(&p), Err(Error::Format(_))));
        let m = dir.path().join("m.csv");
        fs::write(&m, "point,weight\n1,abc\n").unwrap();
        assert!(matches!(read_marginal(&m), Err(Error::Format(_))));
        fs::write(&m, "point,weight\n1,0.4\n").unwrap();
        assert!(matches!(read_marginal(&m), Err(Error::InvalidMarginal(_))));
    }

    #[test]
    fn marginal_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mu = DiscreteMarginal::new(vec![-0.1, 0.3, 2.5], vec![0.25, 0.5, 0.25]).unwrap();
        write_marginal_csv(dir.path().join("a.csv"), &mu).unwrap();
        write_marginal_json(dir.path().join("a.json"), &mu).unwrap();
        assert_eq!(read_marginal(dir.path().join("a.csv")).unwrap(), mu);
        assert_eq!(read_marginal(dir.path().join("a.json")).unwrap(), mu);
    }

    #[test]
    fn coupling_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(inst_b_config(dir.path())).unwrap();
        let inst = cfg.build(BuildOptions::default()).unwrap();
        let sol = solve_instance(&inst).unwrap();
        let p = dir.path().join("coupling.json");
        save_coupling(&p, &sol.coupling, &inst).unwrap();
        assert_eq!(load_coupling(&p, &inst).unwrap(), sol.coupling);
        let max = cfg
            .build(BuildOptions {
                direction: Some(Direction::Max),
                ..Default::default()
            })
            .unwrap();
        assert!(matches!(load_coupling(&p, &max), Err(Error::MismatchedInstance { .. })));
    }
}

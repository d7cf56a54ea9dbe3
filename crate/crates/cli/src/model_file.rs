//! JSON model file: the fitted LPV-DS, the DAMM components behind its
//! mixing function, and what is needed to continue learning incrementally.

use std::io::Write;
use std::path::Path;

use damm_ds::lpvds::{LpvDsModel, MixingComponent};
use damm_ds::{DammComponent, Error, Learned, MixtureState, NiwPrior, Result, SamplerConfig, UnitVector};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub attractor: Vec<f64>,
    pub components: Vec<ComponentRecord>,
    pub provenance: Provenance,
    /// Component label of each clustered observation, in data order.
    pub assignments: Vec<usize>,
}

/// Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRecord {
    pub weight: f64,
    pub count: usize,
    pub mean_pos: Vec<f64>,
    pub cov_pos: Vec<f64>,
    pub dir_mean: Vec<f64>,
    pub dir_var: f64,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// Sampler iterations run so far, including earlier incremental runs.
    pub iterations: u64,
    pub launch_scans: usize,
    pub velocity_floor: f64,
    pub prior: PriorRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_cluster_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_fit_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRecord {
    pub mu0_pos: Vec<f64>,
    pub kappa: f64,
    pub nu: f64,
    pub psi_pos: Vec<f64>,
    pub dir_var_shape: f64,
    pub dir_var_scale: f64,
    pub alpha: f64,
}

/// Everything a model file decodes into.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub lpvds: LpvDsModel,
    pub state: MixtureState<DammComponent>,
    pub prior: NiwPrior,
    pub velocity_floor: f64,
    pub launch_scans: usize,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn matrix(d: usize, v: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if v.len() != d * d {
        return Err(Error::Usage(format!("{what} must have {} entries, found {}", d * d, v.len())));
    }
    Ok(DMatrix::from_row_slice(d, d, v))
}

fn vector(d: usize, v: &[f64], what: &str) -> Result<DVector<f64>> {
    if v.len() != d {
        return Err(Error::Usage(format!("{what} must have {d} entries, found {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

impl ModelFile {
    pub fn from_learned(learned: &Learned, config: &SamplerConfig, timings: bool) -> Self {
        let model = &learned.lpvds;
        let components = learned
            .state
            .components()
            .iter()
            .zip(model.a().iter().zip(model.b()))
            .map(|(c, (a, b))| ComponentRecord {
                weight: c.weight,
                count: c.count,
                mean_pos: c.mean_pos().as_slice().to_vec(),
                cov_pos: row_major(c.cov_pos()),
                dir_mean: c.dir_mean().as_slice().to_vec(),
                dir_var: c.dir_var(),
                a: row_major(a),
                b: b.as_slice().to_vec(),
            })
            .collect();
        let p = &learned.prior;
        ModelFile {
            schema_version: SCHEMA_VERSION,
            d: model.dim(),
            k: model.num_components(),
            attractor: model.attractor().as_slice().to_vec(),
            components,
            provenance: Provenance {
                seed: config.seed,
                iterations: learned.state.iteration,
                launch_scans: config.launch_scans,
                velocity_floor: learned.velocity_floor,
                prior: PriorRecord {
                    mu0_pos: p.mu0_pos.as_slice().to_vec(),
                    kappa: p.kappa,
                    nu: p.nu,
                    psi_pos: row_major(&p.psi_pos),
                    dir_var_shape: p.dir_var_shape,
                    dir_var_scale: p.dir_var_scale,
                    alpha: p.alpha,
                },
                wall_time_cluster_s: timings.then_some(learned.wall_time_cluster_s),
                wall_time_fit_s: timings.then_some(learned.wall_time_fit_s),
            },
            assignments: learned.state.assignments().to_vec(),
        }
    }

    /// Rebuild and validate every object the file describes.
    pub fn decode(&self) -> Result<LoadedModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Usage(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = self.d;
        if d == 0 || self.k == 0 || self.components.len() != self.k {
            return Err(Error::Usage(format!(
                "K is {} but the file lists {} components",
                self.k,
                self.components.len()
            )));
        }
        let attractor = vector(d, &self.attractor, "attractor")?;
        let mut damm = Vec::with_capacity(self.k);
        let mut a = Vec::with_capacity(self.k);
        for (k, c) in self.components.iter().enumerate() {
            let what = |field: &str| format!("component {k} {field}");
            let comp = DammComponent::new(
                vector(d, &c.mean_pos, &what("mean_pos"))?,
                matrix(d, &c.cov_pos, &what("cov_pos"))?,
                UnitVector::from_slice(&c.dir_mean)?,
                c.dir_var,
                c.weight,
                c.count,
            )?;
            let ak = matrix(d, &c.a, &what("A"))?;
            let b = vector(d, &c.b, &what("b"))?;
            let expected = -(&ak * &attractor);
            if (&b - &expected).amax() > 1e-9 * (1.0 + expected.amax()) {
                return Err(Error::Usage(format!("{} is not -A x*", what("b"))));
            }
            damm.push(comp);
            a.push(ak);
        }
        let mixing = damm.iter().map(MixingComponent::from_damm).collect::<Result<Vec<_>>>()?;
        let lpvds = LpvDsModel::new(a, mixing, attractor)?;
        let prov = &self.provenance;
        let p = &prov.prior;
        let prior = NiwPrior {
            psi_pos: matrix(d, &p.psi_pos, "prior psi_pos")?,
            nu: p.nu,
            mu0_pos: vector(d, &p.mu0_pos, "prior mu0_pos")?,
            kappa: p.kappa,
            dir_var_shape: p.dir_var_shape,
            dir_var_scale: p.dir_var_scale,
            alpha: p.alpha,
        };
        prior.validate()?;
        let state = MixtureState::new(self.assignments.clone(), damm, prov.seed, prov.iterations)?;
        for (k, (comp, &n)) in state.components().iter().zip(state.counts()).enumerate() {
            if comp.count != n {
                return Err(Error::Usage(format!(
                    "component {k} records {} members but the assignments give {n}",
                    comp.count
                )));
            }
        }
        state.check()?;
        if !(prov.velocity_floor >= 0.0 && prov.velocity_floor.is_finite()) {
            return Err(Error::Usage("velocity_floor must be finite and nonnegative".into()));
        }
        Ok(LoadedModel {
            lpvds,
            state,
            prior,
            velocity_floor: prov.velocity_floor,
            launch_scans: prov.launch_scans,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Write through a temporary file in the target directory and rename it
/// into place, so a failed command leaves no partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

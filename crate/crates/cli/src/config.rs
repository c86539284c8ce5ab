//! JSON run configuration.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gnshoot::bench::{self, Benchmark, ContractionConfig};
use gnshoot::cost::DiagonalCostSpec;
use gnshoot::solver::LineSearch;
use gnshoot::{InitStrategy, Integrator, OcProblem, Scheme, SolverSettings, Variant, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in system name.
    pub system: String,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default, rename = "N")]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub x_init: Option<Vec<f64>>,
    #[serde(default)]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default)]
    pub cost: Option<DiagonalCostSpec>,
    #[serde(default)]
    pub variant: Option<VariantConfig>,
    #[serde(default)]
    pub init: Option<InitConfig>,
    #[serde(default)]
    pub termination: TerminationConfig,
    #[serde(default)]
    pub line_search: LineSearchConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub contraction: ContractionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantType {
    Ss,
    Ilqr,
    Gnms,
    GnmsM,
    IlqrGnmsM,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    #[serde(rename = "type")]
    pub kind: VariantType,
    #[serde(default, rename = "M")]
    pub intervals: Option<usize>,
    /// Optional consistency check against `type`.
    #[serde(default)]
    pub closed_loop: Option<bool>,
}

impl VariantConfig {
    pub fn resolve(&self) -> anyhow::Result<Variant> {
        let v = match (self.kind, self.intervals) {
            (VariantType::Ss, None) => Variant::SS,
            (VariantType::Ilqr, None) => Variant::ILQR,
            (VariantType::Gnms, None) => Variant::GNMS,
            (VariantType::GnmsM, Some(m)) => Variant::gnms_m(m),
            (VariantType::IlqrGnmsM, Some(m)) => Variant::ilqr_gnms_m(m),
            (VariantType::GnmsM | VariantType::IlqrGnmsM, None) => {
                bail!("variant.M: required for variant type {:?}", self.kind)
            }
            (_, Some(_)) => bail!("variant.M: not allowed for variant type {:?}", self.kind),
        };
        if let Some(cl) = self.closed_loop {
            if cl != v.closed_loop && v.intervals.is_some() {
                bail!("variant.closed_loop: {cl} contradicts variant type {:?}", self.kind);
            }
        }
        Ok(v)
    }

    pub fn from_variant(v: Variant) -> Self {
        let kind = match (v.intervals, v.closed_loop) {
            (None, _) => VariantType::Gnms,
            (Some(1), false) => VariantType::Ss,
            (Some(1), true) => VariantType::Ilqr,
            (Some(_), false) => VariantType::GnmsM,
            (Some(_), true) => VariantType::IlqrGnmsM,
        };
        let intervals = match kind {
            VariantType::GnmsM | VariantType::IlqrGnmsM => v.intervals,
            _ => None,
        };
        Self {
            kind,
            intervals,
            closed_loop: Some(v.closed_loop),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    SteadyState {},
    Interpolate {
        #[serde(default)]
        x_goal: Option<Vec<f64>>,
    },
    Provided {
        states: Vec<Vec<f64>>,
        controls: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminationConfig {
    pub j_rel_min: f64,
    pub d_max: f64,
    pub max_iters: usize,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        let s = SolverSettings::default();
        Self {
            j_rel_min: s.j_rel_min,
            d_max: s.d_max,
            max_iters: s.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineSearchConfig {
    pub enabled: bool,
    pub rho: f64,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        let ls = LineSearch::default();
        Self {
            enabled: ls.enabled,
            rho: ls.rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub duration: f64,
    pub shift: bool,
    /// Standard deviation of the plant's additive state noise.
    pub noise_std: f64,
    /// Warm start from a converged offline solve instead of the raw
    /// initial guess.
    pub warm_start_converged: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            duration: 5.0,
            shift: false,
            noise_std: 0.0,
            warm_start_converged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionSection {
    pub samples: usize,
    pub scale: f64,
    pub last_k: usize,
    pub variants: Vec<String>,
}

impl Default for ContractionSection {
    fn default() -> Self {
        let c = ContractionConfig::default();
        Self {
            samples: c.samples,
            scale: c.scale,
            last_k: c.last_k,
            variants: ["iLQR", "GNMS", "GNMS(5)", "iLQR-GNMS(5)"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| anyhow!("invalid config {}: {e}", path.display()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn benchmark(&self) -> anyhow::Result<Benchmark> {
        let base = match self.system.as_str() {
            "linear_random" => bench::linear_random(self.seed, 3, 2, 40)?,
            name => bench::by_name(name).map_err(|e| anyhow!("system: {e}"))?,
        };
        let p = &base.problem;
        let m = p.state_dim();
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                bail!("dt: must be positive, got {dt}");
            }
        }
        if self.horizon == Some(0) {
            bail!("N: must be at least 1");
        }
        let integrator = match &self.integrator {
            Some(ic) => Integrator::new(ic.scheme, self.dt.unwrap_or(p.dt()), ic.substeps)
                .map_err(|e| anyhow!("integrator: {e}"))?,
            None => Integrator {
                dt: self.dt.unwrap_or(p.dt()),
                ..p.integrator
            },
        };
        let x_init = match &self.x_init {
            Some(v) if v.len() != m => bail!("x_init: expected {m} entries, got {}", v.len()),
            Some(v) => Vector::from_column_slice(v),
            None => p.x_init.clone(),
        };
        let cost: std::sync::Arc<dyn gnshoot::CostModel> = match &self.cost {
            Some(spec) => {
                let pdim = p.control_dim();
                for (field, len, want) in [
                    ("cost.q", spec.q.len(), m),
                    ("cost.r", spec.r.len(), pdim),
                    ("cost.q_final", spec.q_final.len(), m),
                    ("cost.x_goal", spec.x_goal.len(), m),
                ] {
                    if len != want {
                        bail!("{field}: expected {want} entries, got {len}");
                    }
                }
                std::sync::Arc::new(spec.build().map_err(|e| anyhow!("cost: {e}"))?)
            }
            None => p.cost.clone(),
        };
        let x_goal = match &self.cost {
            Some(spec) => Vector::from_column_slice(&spec.x_goal),
            None => base.x_goal.clone(),
        };
        let problem = OcProblem::new(
            p.dynamics.clone(),
            cost,
            integrator,
            self.horizon.unwrap_or(p.horizon),
            x_init,
        )?;
        Ok(Benchmark {
            problem,
            x_goal,
            ..base
        })
    }

    pub fn variant(&self, default: Variant) -> anyhow::Result<Variant> {
        self.variant.as_ref().map_or(Ok(default), VariantConfig::resolve)
    }

    pub fn init_strategy(&self, bench: &Benchmark) -> anyhow::Result<InitStrategy> {
        let m = bench.problem.state_dim();
        Ok(match &self.init {
            None => bench.default_init.clone(),
            Some(InitConfig::SteadyState {}) => InitStrategy::SteadyState,
            Some(InitConfig::Interpolate { x_goal }) => InitStrategy::Interpolate {
                x_goal: match x_goal {
                    Some(v) if v.len() != m => {
                        bail!("init.x_goal: expected {m} entries, got {}", v.len())
                    }
                    Some(v) => Vector::from_column_slice(v),
                    None => bench.x_goal.clone(),
                },
            },
            Some(InitConfig::Provided { states, controls }) => InitStrategy::Provided {
                states: states.iter().map(|v| Vector::from_column_slice(v)).collect(),
                controls: controls.iter().map(|v| Vector::from_column_slice(v)).collect(),
            },
        })
    }

    pub fn solver_settings(&self) -> anyhow::Result<SolverSettings> {
        let t = &self.termination;
        if !(t.d_max > 0.0) {
            bail!("termination.d_max: must be positive, got {}", t.d_max);
        }
        if !(t.j_rel_min > 0.0) {
            bail!("termination.j_rel_min: must be positive, got {}", t.j_rel_min);
        }
        if t.max_iters == 0 {
            bail!("termination.max_iters: must be at least 1");
        }
        if !(self.line_search.rho >= 0.0) {
            bail!("line_search.rho: must be nonnegative, got {}", self.line_search.rho);
        }
        Ok(SolverSettings {
            d_max: t.d_max,
            j_rel_min: t.j_rel_min,
            max_iters: t.max_iters,
            line_search: LineSearch {
                enabled: self.line_search.enabled,
                rho: self.line_search.rho,
                ..LineSearch::default()
            },
            ..SolverSettings::default()
        })
    }

    /// Checks the variant against the horizon, naming the offending field.
    pub fn check_variant(&self, variant: Variant, horizon: usize) -> anyhow::Result<()> {
        if let Some(m) = variant.intervals {
            if m == 0 || m > horizon {
                bail!("variant.M: must be in 1..={horizon} (N), got {m}");
            }
        }
        Ok(())
    }
}

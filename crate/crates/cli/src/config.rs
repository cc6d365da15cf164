//! JSON scenario documents, named presets and their resolution into a
//! runnable [`Scenario`].

use std::path::Path;

use fxdist::graph::{SwitchRule, Topology, TopologyKind, TopologySchedule};
use fxdist::objective::{team_minimize, team_value, LocalObjective, SvmDataset, DEFAULT_SMOOTHING};
use fxdist::protocol::{Deadzone, Mode, ProtocolParams};
use fxdist::sim::{InitialState, Scenario, StopTolerances};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const PRESETS: [&str; 4] = ["example1", "example1_scaled", "example2", "pl_least_squares"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectivesSpec {
    /// Agent `i` (1-based) gets `1/4 (x - i)^4` in every coordinate.
    ShiftedQuarticRange { n_agents: usize, dim: usize },
    ShiftedQuartic { shifts: Vec<Vec<f64>> },
    Quadratic { agents: Vec<QuadraticSpec> },
    Svm {
        n_agents: usize,
        m: usize,
        data_seed: u64,
        #[serde(default = "one")]
        reg: f64,
        #[serde(default = "default_smoothing")]
        mu_s: f64,
        /// Load points from a `z1,z2,label,agent` CSV instead of generating.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        csv: Option<String>,
    },
    LeastSquares { agents: Vec<LeastSquaresSpec> },
}

fn explicit_null<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

fn one() -> f64 {
    1.0
}

fn default_smoothing() -> f64 {
    DEFAULT_SMOOTHING
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub q: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(default)]
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeastSquaresSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Line,
    Ring,
    Star,
    /// Undirected edges between 0-based agent indices.
    Custom { edges: Vec<(usize, usize)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub graphs: Vec<GraphSpec>,
    pub dwell: f64,
    pub switching: SwitchRule,
}

/// Optional optimum handling: computed by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimumSpec {
    Compute,
    Given(Vec<f64>),
    None,
}

/// A scenario document. With `preset` set, the remaining fields override
/// the preset; without it every field except the optional ones is required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectives: Option<ObjectivesSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<TopologySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ProtocolParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_x: Option<InitialState>,
    /// `null` disables early stopping.
    #[serde(default, deserialize_with = "explicit_null", skip_serializing_if = "Option::is_none")]
    pub stop: Option<Option<StopTolerances>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimum: Option<OptimumSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_objective_gap: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_states: Option<bool>,
}

/// Fully specified scenario document, as written next to run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub objectives: ObjectivesSpec,
    pub topology: TopologySpec,
    pub params: ProtocolParams,
    pub dt: f64,
    pub horizon: f64,
    pub initial_x: InitialState,
    pub stop: Option<StopTolerances>,
    pub record_stride: usize,
    pub seed: u64,
    pub optimum: OptimumSpec,
    pub track_objective_gap: bool,
    pub record_states: bool,
}

impl From<ResolvedConfig> for ScenarioConfig {
    fn from(r: ResolvedConfig) -> Self {
        Self {
            preset: None,
            objectives: Some(r.objectives),
            topology: Some(r.topology),
            params: Some(r.params),
            dt: Some(r.dt),
            horizon: Some(r.horizon),
            initial_x: Some(r.initial_x),
            stop: Some(r.stop),
            record_stride: Some(r.record_stride),
            seed: Some(r.seed),
            optimum: Some(r.optimum),
            track_objective_gap: Some(r.track_objective_gap),
            record_states: Some(r.record_states),
        }
    }
}

fn round_robin_line_ring_star(dwell: f64) -> TopologySpec {
    TopologySpec { graphs: vec![GraphSpec::Line, GraphSpec::Ring, GraphSpec::Star], dwell, switching: SwitchRule::RoundRobin }
}

pub fn preset(name: &str) -> Result<ResolvedConfig, CliError> {
    let cfg = match name {
        "example1" => {
            let mut params = ProtocolParams::uniform(Mode::SecondOrderStrict, 10.0, 1.2, 0.8);
            params.p = 1010.0;
            params.rho = 20.0;
            params.deadzone = Deadzone::StepScaled;
            ResolvedConfig {
                objectives: ObjectivesSpec::ShiftedQuarticRange { n_agents: 101, dim: 1 },
                topology: round_robin_line_ring_star(2.5),
                params,
                dt: 1e-4,
                horizon: 268.85,
                initial_x: InitialState::RandomBox { lo: 1.0, hi: 101.0 },
                stop: Some(StopTolerances { grad_sum_tol: 1e-7, disagreement_tol: 1e-6 }),
                record_stride: 1000,
                seed: 1,
                optimum: OptimumSpec::Compute,
                track_objective_gap: false,
                record_states: false,
            }
        }
        "example1_scaled" => {
            let mut params = ProtocolParams::uniform(Mode::SecondOrderStrict, 10.0, 1.2, 0.8);
            params.p = 80.0;
            params.rho = 15.0;
            params.deadzone = Deadzone::StepScaled;
            ResolvedConfig {
                objectives: ObjectivesSpec::ShiftedQuarticRange { n_agents: 11, dim: 1 },
                topology: round_robin_line_ring_star(2.5),
                params,
                dt: 1e-4,
                horizon: 15.0,
                initial_x: InitialState::RandomBox { lo: 1.0, hi: 11.0 },
                stop: Some(StopTolerances { grad_sum_tol: 1e-7, disagreement_tol: 1e-6 }),
                record_stride: 100,
                seed: 1,
                optimum: OptimumSpec::Compute,
                track_objective_gap: false,
                record_states: false,
            }
        }
        "example2" => {
            let mut params = ProtocolParams::uniform(Mode::FirstOrderStrong { k: 1.0 }, 1.0, 1.2, 0.8);
            params.p = 50.0;
            params.q = 50.0;
            params.delta = 10.0;
            params.deadzone = Deadzone::StepScaled;
            ResolvedConfig {
                objectives: ObjectivesSpec::Svm { n_agents: 5, m: 100, data_seed: 4, reg: 1.0, mu_s: DEFAULT_SMOOTHING, csv: None },
                topology: TopologySpec {
                    graphs: vec![GraphSpec::Line, GraphSpec::Ring, GraphSpec::Star],
                    dwell: 2.5,
                    switching: SwitchRule::SeededRandom(11),
                },
                params,
                dt: 1e-4,
                horizon: 10.62,
                initial_x: InitialState::RandomBox { lo: -5.0, hi: 5.0 },
                stop: Some(StopTolerances { grad_sum_tol: 1e-8, disagreement_tol: 1e-6 }),
                record_stride: 100,
                seed: 1,
                optimum: OptimumSpec::Compute,
                track_objective_gap: false,
                record_states: false,
            }
        }
        "pl_least_squares" => {
            let agents = pl_least_squares_agents();
            let mu = pl_constant(&agents)?;
            let mut params = ProtocolParams::uniform(Mode::FirstOrderPl { mu }, 2.0, 1.2, 0.8);
            params.deadzone = Deadzone::StepScaled;
            ResolvedConfig {
                objectives: ObjectivesSpec::LeastSquares { agents },
                topology: round_robin_line_ring_star(2.5),
                params,
                dt: 1e-4,
                horizon: 20.0,
                initial_x: InitialState::RandomBox { lo: -2.0, hi: 2.0 },
                stop: Some(StopTolerances { grad_sum_tol: 1e-9, disagreement_tol: 1e-8 }),
                record_stride: 100,
                seed: 1,
                optimum: OptimumSpec::Compute,
                track_objective_gap: true,
                record_states: false,
            }
        }
        other => {
            return Err(CliError::Config(format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", "))))
        }
    };
    Ok(cfg)
}

/// Four agents, three unknowns, stacked rank two: the third column is the
/// sum of the first two for every agent.
fn pl_least_squares_agents() -> Vec<LeastSquaresSpec> {
    let rows: [[f64; 2]; 8] =
        [[1.0, 0.5], [0.2, -1.0], [-0.7, 0.3], [0.4, 0.9], [1.1, -0.2], [-0.3, -0.6], [0.8, 0.1], [0.0, 0.7]];
    let b = [1.0, -0.5, 0.3, 0.8, -1.2, 0.4, 0.6, -0.1];
    (0..4)
        .map(|i| {
            let a = (0..2)
                .map(|r| {
                    let [u, v] = rows[2 * i + r];
                    vec![u, v, u + v]
                })
                .collect();
            LeastSquaresSpec { a, b: b[2 * i..2 * i + 2].to_vec() }
        })
        .collect()
}

/// `2 * smallest positive eigenvalue of sum_i A_i'A_i`.
pub fn pl_constant(agents: &[LeastSquaresSpec]) -> Result<f64, CliError> {
    let mut ata: Option<DMatrix<f64>> = None;
    for ag in agents {
        let a = matrix(&ag.a)?;
        let g = a.transpose() * &a;
        ata = Some(match ata {
            Some(m) if m.shape() == g.shape() => m + g,
            Some(_) => return Err(CliError::Config("least-squares agents disagree on dimension".into())),
            None => g,
        });
    }
    let ata = ata.ok_or_else(|| CliError::Config("no least-squares agents".into()))?;
    let ev = nalgebra::SymmetricEigen::new(ata).eigenvalues;
    let scale = ev.amax();
    let min_pos = ev.iter().copied().filter(|v| *v > 1e-10 * scale).fold(f64::INFINITY, f64::min);
    if !min_pos.is_finite() {
        return Err(CliError::Config("least-squares team has A = 0".into()));
    }
    Ok(2.0 * min_pos)
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Config("matrix rows must be non-empty and of equal length".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_preset(name: &str) -> Result<Self, CliError> {
        Ok(Self { preset: Some(name.to_string()), ..Self::default() })
    }

    /// Overlays explicit fields on the preset, if any.
    pub fn resolve(&self) -> Result<ResolvedConfig, CliError> {
        let base = self.preset.as_deref().map(preset).transpose()?;
        macro_rules! pick {
            ($field:ident) => {
                match (&self.$field, &base) {
                    (Some(v), _) => v.clone(),
                    (None, Some(b)) => b.$field.clone(),
                    (None, None) => {
                        return Err(CliError::Config(format!("missing field `{}`", stringify!($field))))
                    }
                }
            };
        }
        Ok(ResolvedConfig {
            objectives: pick!(objectives),
            topology: pick!(topology),
            params: pick!(params),
            dt: pick!(dt),
            horizon: pick!(horizon),
            initial_x: pick!(initial_x),
            stop: match (&self.stop, &base) {
                (Some(v), _) => *v,
                (None, Some(b)) => b.stop,
                (None, None) => None,
            },
            record_stride: self.record_stride.or(base.as_ref().map(|b| b.record_stride)).unwrap_or(1),
            seed: self.seed.or(base.as_ref().map(|b| b.seed)).unwrap_or(0),
            optimum: self.optimum.clone().or(base.as_ref().map(|b| b.optimum.clone())).unwrap_or(OptimumSpec::Compute),
            track_objective_gap: self
                .track_objective_gap
                .or(base.as_ref().map(|b| b.track_objective_gap))
                .unwrap_or(false),
            record_states: self.record_states.or(base.as_ref().map(|b| b.record_states)).unwrap_or(false),
        })
    }
}

impl ObjectivesSpec {
    pub fn build(&self, base_dir: Option<&Path>) -> Result<Vec<LocalObjective>, CliError> {
        let objs = match self {
            ObjectivesSpec::ShiftedQuarticRange { n_agents, dim } => (1..=*n_agents)
                .map(|i| LocalObjective::shifted_quartic(vec![i as f64; *dim]))
                .collect::<Result<Vec<_>, _>>()?,
            ObjectivesSpec::ShiftedQuartic { shifts } => shifts
                .iter()
                .map(|s| LocalObjective::shifted_quartic(s.clone()))
                .collect::<Result<Vec<_>, _>>()?,
            ObjectivesSpec::Quadratic { agents } => agents
                .iter()
                .map(|a| LocalObjective::quadratic(matrix(&a.q)?, DVector::from_vec(a.b.clone()), a.c).map_err(CliError::from))
                .collect::<Result<Vec<_>, _>>()?,
            ObjectivesSpec::Svm { n_agents, m, data_seed, reg, mu_s, csv } => {
                let ds = match csv {
                    Some(path) => {
                        let p = match base_dir {
                            Some(dir) if Path::new(path).is_relative() => dir.join(path),
                            _ => Path::new(path).to_path_buf(),
                        };
                        let f = std::fs::File::open(&p)
                            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                        let ds = SvmDataset::read_csv(f)?;
                        if ds.n_agents != *n_agents || ds.m != *m {
                            return Err(CliError::Config(format!(
                                "dataset holds {} agents x {} points, config says {n_agents} x {m}",
                                ds.n_agents, ds.m
                            )));
                        }
                        ds
                    }
                    None => SvmDataset::generate(*n_agents, *m, *data_seed)?,
                };
                ds.objectives(*reg, *mu_s)?
            }
            ObjectivesSpec::LeastSquares { agents } => agents
                .iter()
                .map(|a| LocalObjective::least_squares(matrix(&a.a)?, DVector::from_vec(a.b.clone())).map_err(CliError::from))
                .collect::<Result<Vec<_>, _>>()?,
        };
        if objs.is_empty() {
            return Err(CliError::Config("no agents".into()));
        }
        Ok(objs)
    }
}

impl TopologySpec {
    pub fn build(&self, n: usize) -> Result<TopologySchedule, CliError> {
        let graphs = self
            .graphs
            .iter()
            .map(|g| match g {
                GraphSpec::Line => Topology::build(TopologyKind::Line, n),
                GraphSpec::Ring => Topology::build(TopologyKind::Ring, n),
                GraphSpec::Star => Topology::build(TopologyKind::Star, n),
                GraphSpec::Custom { edges } => Topology::from_edges(n, edges),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TopologySchedule::new(graphs, self.dwell, self.switching)?)
    }
}

impl ResolvedConfig {
    /// Builds the runnable scenario. Relative dataset paths resolve against
    /// `base_dir`.
    pub fn scenario(&self, base_dir: Option<&Path>) -> Result<Scenario, CliError> {
        let objectives = self.objectives.build(base_dir)?;
        let schedule = self.topology.build(objectives.len())?;
        let d = objectives[0].dim();
        let x_star = match &self.optimum {
            OptimumSpec::None => None,
            OptimumSpec::Given(x) => Some(x.clone()),
            OptimumSpec::Compute => Some(team_minimize(&objectives, &vec![0.0; d], 1e-11, 500)?.into_inner()),
        };
        let f_star = match (&x_star, self.track_objective_gap) {
            (Some(x), true) => Some(team_value(&objectives, x)?),
            (None, true) => return Err(CliError::Config("track_objective_gap needs an optimum".into())),
            _ => None,
        };
        Ok(Scenario {
            objectives,
            schedule,
            params: self.params.clone(),
            dt: self.dt,
            horizon: self.horizon,
            initial_x: self.initial_x.clone(),
            stop: self.stop,
            record_stride: self.record_stride,
            seed: self.seed,
            x_star,
            f_star,
            record_states: self.record_states,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example2_data_seed_is_first_without_stiffness_warning() {
        let base = preset("example2").unwrap();
        let stiff = |seed: u64| {
            let mut c = base.clone();
            if let ObjectivesSpec::Svm { data_seed, .. } = &mut c.objectives {
                *data_seed = seed;
            }
            let s = c.scenario(None).unwrap();
            fxdist::sim::euler_stiffness(&s).unwrap()
        };
        for seed in 0..4 {
            assert!(stiff(seed) > fxdist::sim::STIFFNESS_WARNING, "seed {seed}");
        }
        assert!(stiff(4) <= fxdist::sim::STIFFNESS_WARNING);
        let s = base.scenario(None).unwrap();
        assert!(fxdist::sim::validate(&s).unwrap().warnings.is_empty());
    }

    #[test]
    fn presets_resolve_and_build() {
        for name in PRESETS {
            let cfg = ScenarioConfig::from_preset(name).unwrap().resolve().unwrap();
            let s = cfg.scenario(None).unwrap();
            fxdist::sim::validate(&s).unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioConfig::from_json(r#"{"preset":"example2","dtt":1}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"preset":"example2","dt":1e-4}"#).is_ok());
        assert!(ScenarioConfig::from_json("{not json").is_err());
    }

    #[test]
    fn missing_fields_reported() {
        let err = ScenarioConfig::from_json("{}").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("objectives"));
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = ScenarioConfig::from_json(r#"{"preset":"example1_scaled","dt":5e-5,"seed":9}"#).unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.dt, 5e-5);
        assert_eq!(r.seed, 9);
        assert_eq!(r.params.p, 80.0);
    }

    #[test]
    fn resolved_config_round_trips() {
        for name in PRESETS {
            let r = preset(name).unwrap();
            let text = serde_json::to_string_pretty(&r).unwrap();
            let back = ScenarioConfig::from_json(&text).unwrap().resolve().unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn pl_preset_is_rank_deficient() {
        let agents = pl_least_squares_agents();
        let mut stacked = Vec::new();
        for a in &agents {
            stacked.extend(a.a.iter().cloned());
        }
        let m = matrix(&stacked).unwrap();
        assert_eq!(m.rank(1e-10), 2);
        assert!(pl_constant(&agents).unwrap() > 0.0);
    }
}

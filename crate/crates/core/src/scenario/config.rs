use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::control::{InitialError, SmcGains};
use crate::error::{Result, SmsError};
use crate::kinematics::forward_kinematics;
use crate::model::{BodyParams, SmsModel, SmsState};
use crate::planner::PlannerConfig;

/// Scenario file as written on disk. Every section and most fields are optional; missing
/// values take the reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub case: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub target: TargetSpec,
    pub initial: InitialSpec,
    pub model: ModelSpec,
    pub planner: PlannerSpec,
    pub controller: ControllerSpec,
    pub tracking: TrackingSpec,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        ScenarioFile {
            case: "scenario".into(),
            seed: 0,
            output_dir: None,
            target: TargetSpec::default(),
            initial: InitialSpec::default(),
            model: ModelSpec::default(),
            planner: PlannerSpec::default(),
            controller: ControllerSpec::default(),
            tracking: TrackingSpec::default(),
        }
    }
}

/// Goal position. Exactly one form may be given; none means `offset = [-0.05, 0.08, 0]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSpec {
    /// Absolute inertial position, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_d: Option<[f64; 3]>,
    /// Offset from the initial end-effector position, m.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<[f64; 3]>,
    /// End-effector position of this joint pose with the initial base pose, deg.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_deg: Option<Vec<f64>>,
}

pub const DEFAULT_TARGET_OFFSET: [f64; 3] = [-0.05, 0.08, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSpec {
    pub r_b: [f64; 3],
    /// Scalar-last quaternion.
    pub eps: [f64; 4],
    pub q_deg: Vec<f64>,
}

impl Default for InitialSpec {
    fn default() -> Self {
        let s = SmsState::reference_initial();
        InitialSpec {
            r_b: s.r_b.into(),
            eps: s.eps.into(),
            q_deg: s.q.iter().map(|v| v.to_degrees()).collect(),
        }
    }
}

/// Mass properties of one body. Give either principal `moments` or a full `inertia` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<[[f64; 3]; 3]>,
    pub dims: [f64; 3],
}

impl BodySpec {
    fn principal(mass: f64, moments: [f64; 3], dims: [f64; 3]) -> Self {
        BodySpec {
            mass,
            moments: Some(moments),
            inertia: None,
            dims,
        }
    }

    fn resolve(&self, field: &str) -> Result<BodyParams> {
        let inertia = match (&self.moments, &self.inertia) {
            (Some(m), None) => Matrix3::from_diagonal(&Vector3::from(*m)),
            (None, Some(rows)) => Matrix3::from_fn(|i, j| rows[i][j]),
            _ => {
                return Err(SmsError::validation(
                    format!("{field}.inertia"),
                    "give exactly one of `moments` or `inertia`",
                ))
            }
        };
        Ok(BodyParams {
            mass: self.mass,
            inertia,
            dims: Vector3::from(self.dims),
        })
    }
}

/// Planar chain mounted on the base's +x face; see [`SmsModel::planar`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub base: BodySpec,
    pub links: Vec<BodySpec>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let link = BodySpec::principal(0.569, [0.0001, 0.0043, 0.0043], [0.3, 0.03, 0.03]);
        ModelSpec {
            base: BodySpec::principal(31.015, [1.1594, 1.1594, 1.1129], [0.464, 0.464, 0.483]),
            links: vec![link; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSpec {
    pub dt_plan: f64,
    pub horizon: f64,
    pub kappa: f64,
    pub q_max_deg: Vec<f64>,
    pub qd_max_deg_s: Vec<f64>,
    pub qdd_max_deg_s2: Vec<f64>,
    pub d_safe: f64,
    pub r_th: f64,
    pub terminal_window_fraction: f64,
    pub base_margin: f64,
    pub literal_box_constraint: bool,
    pub candidates: usize,
    pub sweeps: usize,
    pub line_points: usize,
    pub approach_gain: f64,
    pub hold_radius: f64,
    pub max_approach_speed: f64,
    pub approach_decel: f64,
    pub monotone_approach: bool,
    pub substeps: usize,
}

impl Default for PlannerSpec {
    fn default() -> Self {
        let c = PlannerConfig::reference();
        PlannerSpec {
            dt_plan: c.dt_plan,
            horizon: c.horizon,
            kappa: c.kappa,
            q_max_deg: vec![81.0, 162.0, 162.0],
            qd_max_deg_s: vec![22.92; 3],
            qdd_max_deg_s2: vec![28.65; 3],
            d_safe: c.d_safe,
            r_th: c.r_th,
            terminal_window_fraction: c.terminal_window_fraction,
            base_margin: c.base_margin,
            literal_box_constraint: c.literal_box_constraint,
            candidates: c.candidates,
            sweeps: c.sweeps,
            line_points: c.line_points,
            approach_gain: c.approach_gain,
            hold_radius: c.hold_radius,
            max_approach_speed: c.max_approach_speed,
            approach_decel: c.approach_decel,
            monotone_approach: c.monotone_approach,
            substeps: c.substeps,
        }
    }
}

/// Diagonal gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSpec {
    pub gamma: Vec<f64>,
    pub k_s: Vec<f64>,
    pub lambda: f64,
    pub tau_max: Vec<f64>,
    pub dt_ctrl: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let g = SmcGains::reference();
        ControllerSpec {
            gamma: g.gamma.diagonal().iter().copied().collect(),
            k_s: g.k_s.diagonal().iter().copied().collect(),
            lambda: g.lambda,
            tau_max: g.tau_max.iter().copied().collect(),
            dt_ctrl: g.dt_ctrl,
        }
    }
}

/// Initial tracking error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSpec {
    /// Empty means no joint error.
    pub initial_error_deg: Vec<f64>,
    /// Absent means start on the sliding surface.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_rate_error_deg_s: Option<Vec<f64>>,
}

/// Validated scenario with every quantity in SI units.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// The file with defaults filled in, echoed into the run manifest.
    pub file: ScenarioFile,
    pub model: SmsModel,
    pub initial: SmsState,
    pub r_d: Vector3<f64>,
    pub planner: PlannerConfig,
    pub gains: SmcGains,
    pub initial_error: InitialError,
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dt_plan: Option<f64>,
    pub dt_ctrl: Option<f64>,
}

fn expect_len(field: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(SmsError::validation(field, format!("expected {n} entries, got {}", v.len())));
    }
    Ok(())
}

fn radians(v: &[f64]) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|d| d.to_radians()))
}

/// Renames planner field errors to the names used in the file.
fn planner_field(field: &str) -> String {
    let (base, index) = match field.find('[') {
        Some(i) => field.split_at(i),
        None => (field, ""),
    };
    let renamed = match base {
        "q_max" => "q_max_deg",
        "qd_max" => "qd_max_deg_s",
        "qdd_max" => "qdd_max_deg_s2",
        other => other,
    };
    format!("planner.{renamed}{index}")
}

fn prefixed(prefix: &str, err: SmsError) -> SmsError {
    match err {
        SmsError::Validation { field, message } => SmsError::Validation {
            field: format!("{prefix}{field}"),
            message,
        },
        other => other,
    }
}

impl ScenarioConfig {
    pub fn resolve(file: ScenarioFile) -> Result<Self> {
        let base = file.model.base.resolve("model.base")?;
        let links = file
            .model
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| l.resolve(&format!("model.links[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let model = SmsModel::planar(base, links).map_err(|e| prefixed("model.", e))?;
        let n = model.dof();

        let init = &file.initial;
        expect_len("initial.q_deg", &init.q_deg, n)?;
        let initial = SmsState::at_rest(Vector3::from(init.r_b), Vector4::from(init.eps), radians(&init.q_deg));
        initial.validate(&model).map_err(|e| match e {
            SmsError::InvalidState(m) => SmsError::validation("initial", m),
            other => other,
        })?;

        let r_d = resolve_target(&file.target, &model, &initial)?;

        let p = &file.planner;
        expect_len("planner.q_max_deg", &p.q_max_deg, n)?;
        expect_len("planner.qd_max_deg_s", &p.qd_max_deg_s, n)?;
        expect_len("planner.qdd_max_deg_s2", &p.qdd_max_deg_s2, n)?;
        let planner = PlannerConfig {
            dt_plan: p.dt_plan,
            horizon: p.horizon,
            kappa: p.kappa,
            q_max: radians(&p.q_max_deg),
            qd_max: radians(&p.qd_max_deg_s),
            qdd_max: radians(&p.qdd_max_deg_s2),
            d_safe: p.d_safe,
            r_th: p.r_th,
            terminal_window_fraction: p.terminal_window_fraction,
            base_margin: p.base_margin,
            literal_box_constraint: p.literal_box_constraint,
            candidates: p.candidates,
            seed: file.seed,
            sweeps: p.sweeps,
            line_points: p.line_points,
            approach_gain: p.approach_gain,
            hold_radius: p.hold_radius,
            max_approach_speed: p.max_approach_speed,
            approach_decel: p.approach_decel,
            monotone_approach: p.monotone_approach,
            substeps: p.substeps,
        };
        planner.validate(n).map_err(|e| match e {
            SmsError::Validation { field, message } => SmsError::Validation {
                field: planner_field(&field),
                message,
            },
            other => other,
        })?;

        let c = &file.controller;
        expect_len("controller.gamma", &c.gamma, n)?;
        expect_len("controller.k_s", &c.k_s, n)?;
        let gains = SmcGains {
            gamma: DMatrix::from_diagonal(&DVector::from_column_slice(&c.gamma)),
            k_s: DMatrix::from_diagonal(&DVector::from_column_slice(&c.k_s)),
            lambda: c.lambda,
            tau_max: DVector::from_column_slice(&c.tau_max),
            dt_ctrl: c.dt_ctrl,
        };
        gains.validate(n).map_err(|e| prefixed("controller.", e))?;
        if gains.dt_ctrl > planner.dt_plan {
            return Err(SmsError::validation(
                "controller.dt_ctrl",
                format!("must not exceed planner.dt_plan = {}", planner.dt_plan),
            ));
        }

        let t = &file.tracking;
        let q_e = if t.initial_error_deg.is_empty() {
            DVector::zeros(n)
        } else {
            expect_len("tracking.initial_error_deg", &t.initial_error_deg, n)?;
            radians(&t.initial_error_deg)
        };
        let qd_e = match &t.initial_rate_error_deg_s {
            Some(v) => {
                expect_len("tracking.initial_rate_error_deg_s", v, n)?;
                Some(radians(v))
            }
            None => None,
        };

        Ok(ScenarioConfig {
            file,
            model,
            initial,
            r_d,
            planner,
            gains,
            initial_error: InitialError { q_e, qd_e },
        })
    }

    /// Parses TOML text; `origin` names the source in parse errors.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| SmsError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::resolve(file)
    }

    /// One of the bundled scenarios, `"case1"` or `"case2"`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "case1" => CASE1_TOML,
            "case2" => CASE2_TOML,
            other => return Err(SmsError::validation("case", format!("no bundled scenario named `{other}`"))),
        };
        Self::from_toml_str(text, Path::new(&format!("{name}.toml")))
    }

    pub fn with_overrides(self, o: Overrides) -> Result<Self> {
        let mut file = self.file;
        if let Some(seed) = o.seed {
            file.seed = seed;
        }
        if let Some(dt) = o.dt_plan {
            file.planner.dt_plan = dt;
        }
        if let Some(dt) = o.dt_ctrl {
            file.controller.dt_ctrl = dt;
        }
        Self::resolve(file)
    }

    pub fn case(&self) -> &str {
        &self.file.case
    }

    pub fn seed(&self) -> u64 {
        self.file.seed
    }
}

pub const CASE1_TOML: &str = include_str!("../../scenarios/case1.toml");
pub const CASE2_TOML: &str = include_str!("../../scenarios/case2.toml");

fn resolve_target(t: &TargetSpec, model: &SmsModel, initial: &SmsState) -> Result<Vector3<f64>> {
    let given = [t.r_d.is_some(), t.offset.is_some(), t.joint_deg.is_some()];
    if given.iter().filter(|&&g| g).count() > 1 {
        return Err(SmsError::validation("target", "give at most one of `r_d`, `offset`, `joint_deg`"));
    }
    let r_d = if let Some(r) = t.r_d {
        Vector3::from(r)
    } else if let Some(q) = &t.joint_deg {
        expect_len("target.joint_deg", q, model.dof())?;
        let mut pose = initial.clone();
        pose.q = radians(q);
        forward_kinematics(model, &pose).r_e
    } else {
        let r_e0 = forward_kinematics(model, initial).r_e;
        r_e0 + Vector3::from(t.offset.unwrap_or(DEFAULT_TARGET_OFFSET))
    };
    if r_d.iter().any(|v| !v.is_finite()) {
        return Err(SmsError::validation("target", "must be finite"));
    }
    Ok(r_d)
}

/// Reads and validates a scenario file.
pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| SmsError::io(path, e))?;
    ScenarioConfig::from_toml_str(&text, path)
}

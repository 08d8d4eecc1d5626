//! Human-editable scenario files (TOML) and the built-in experiments.
//!
//! A scenario file has the sections `[plant]`, `[model]`, optional
//! `[prefilter]`, `[reference]`, `[controller]` (with optional
//! `[controller.sigma]`) and `[integration]`, plus a top-level `label`.
//! Unknown keys are rejected.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{Integration, Scenario};
use crate::controller::{sign_d_from_minors, Controller, Dims, FilterBank, Law, SigmaMod};
use crate::dynamics::{Prefilter, RefModel, SignalSpec, StateSpace, Term};
use crate::factorization::leading_minors;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error{}: {message}", location(.line, .column))]
    Parse {
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown built-in scenario `{0}`")]
    UnknownBuiltin(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn location(line: &Option<usize>, column: &Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l}, column {c}"),
        (Some(l), None) => format!(" at line {l}"),
        _ => String::new(),
    }
}

fn invalid(key: &str, message: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        key: key.to_string(),
        message: message.to_string(),
    }
}

/// A scalar or a per-channel list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrList {
    Scalar(f64),
    List(Vec<f64>),
}

impl ScalarOrList {
    fn expand(&self, m: usize, key: &str) -> Result<Vec<f64>, ScenarioError> {
        match self {
            ScalarOrList::Scalar(v) => Ok(vec![*v; m]),
            ScalarOrList::List(v) if v.len() == m => Ok(v.clone()),
            ScalarOrList::List(v) => Err(invalid(key, format!("expected {m} entries, got {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Pole magnitudes: `Am = diag{-a_i}`.
    pub a: ScalarOrList,
    /// Diagonal of `Bm`; defaults to `a` (unity DC gain).
    #[serde(rename = "Bm", default, skip_serializing_if = "Option::is_none")]
    pub bm: Option<ScalarOrList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ym0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefilterSection {
    /// Common zero `a` of `(s + a) / (s + a_i)`; the loop then runs the
    /// reference model `Am = -aI` on the filtered reference.
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub channels: Vec<Vec<Term>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawName {
    Ls,
    Mmrac,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSection {
    pub enabled: bool,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
    #[serde(rename = "M0")]
    pub m0: f64,
}

fn default_sigma_max() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub law: LawName,
    pub nu: usize,
    pub ell0: f64,
    /// `(nu - 1) x (nu - 1)` rows; defaults to `-2I`.
    #[serde(rename = "Lambda", default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<Vec<f64>>>,
    /// Defaults to all ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(rename = "Gamma_scalar", default, skip_serializing_if = "Option::is_none")]
    pub gamma_scalar: Option<f64>,
    #[serde(rename = "R0_scalar", default, skip_serializing_if = "Option::is_none")]
    pub r0_scalar: Option<f64>,
    #[serde(rename = "R0_blocks", default, skip_serializing_if = "Option::is_none")]
    pub r0_blocks: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(rename = "Theta0", default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<Vec<f64>>>,
    /// Signs of the leading principal minors of `Kp`; derived from the plant
    /// realization when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minor_signs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<SigmaSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    pub h: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Magnitude every recorded signal must stay below.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    /// Integrate `∫ Ξ_i Ξ_i^T` alongside the loop (least squares only).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub track_information: bool,
}

fn default_stride() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub label: String,
    pub plant: PlantSection,
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter: Option<PrefilterSection>,
    pub reference: ReferenceSection,
    pub controller: ControllerSection,
    pub integration: IntegrationSection,
}

fn rows_to_matrix(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<f64>, ScenarioError> {
    if rows.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(invalid(key, "rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn compact(v: &[f64]) -> ScalarOrList {
    if v.iter().all(|x| *x == v[0]) {
        ScalarOrList::Scalar(v[0])
    } else {
        ScalarOrList::List(v.to_vec())
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
                    (Some(line), Some(column))
                }
                None => (None, None),
            };
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario file serializes")
    }

    /// Validates the file and builds the runnable scenario.
    pub fn to_scenario(&self) -> Result<Scenario, ScenarioError> {
        let p = &self.plant;
        let a = rows_to_matrix(&p.a, "plant.A")?;
        let b = rows_to_matrix(&p.b, "plant.B")?;
        let c = rows_to_matrix(&p.c, "plant.C")?;
        let n = a.nrows();
        let x0 = DVector::from_vec(p.x0.clone().unwrap_or_else(|| vec![0.0; n]));
        let plant = StateSpace::new(a, b, c, x0).map_err(|e| invalid("plant", e))?;
        let m = plant.inputs();

        let model_a = self.model.a.expand(m, "model.a")?;
        let bm = match &self.model.bm {
            Some(v) => v.expand(m, "model.Bm")?,
            None => model_a.clone(),
        };
        let ym0 = self.model.ym0.clone().unwrap_or_else(|| vec![0.0; m]);
        if ym0.len() != m {
            return Err(invalid("model.ym0", format!("expected {m} entries")));
        }
        let (model, prefilter) = match &self.prefilter {
            Some(pf) => {
                let pre = Prefilter::new(pf.a, model_a.clone()).map_err(|e| invalid("prefilter.a", e))?;
                let model = RefModel::new(vec![pf.a; m], bm, ym0).map_err(|e| invalid("model", e))?;
                (model, Some(pre))
            }
            None => (RefModel::new(model_a, bm, ym0).map_err(|e| invalid("model", e))?, None),
        };

        let signal = SignalSpec::new(self.reference.channels.clone()).map_err(|e| invalid("reference", e))?;
        if signal.channels.len() != m {
            return Err(invalid("reference.channels", format!("expected {m} channels")));
        }

        let cs = &self.controller;
        let dims = Dims::new(m, cs.nu).map_err(|e| invalid("controller.nu", e))?;
        let k = dims.filter_order();
        let lambda = match &cs.lambda {
            Some(rows) => rows_to_matrix(rows, "controller.Lambda")?,
            None => DMatrix::identity(k, k) * -2.0,
        };
        let g = DVector::from_vec(cs.g.clone().unwrap_or_else(|| vec![1.0; k]));
        let filters = FilterBank::new(lambda, g, dims).map_err(|e| invalid("controller.Lambda", e))?;

        let identity_blocks = |v: f64| -> Vec<DMatrix<f64>> {
            (0..m).map(|i| DMatrix::identity(dims.block_len(i), dims.block_len(i)) * v).collect()
        };
        let (law, r0) = match cs.law {
            LawName::Ls => {
                let gamma = cs.gamma.ok_or_else(|| invalid("controller.gamma", "required by law = \"ls\""))?;
                let r0 = match (&cs.r0_blocks, cs.r0_scalar) {
                    (Some(blocks), _) => {
                        if blocks.len() != m {
                            return Err(invalid("controller.R0_blocks", format!("expected {m} blocks")));
                        }
                        blocks
                            .iter()
                            .map(|b| rows_to_matrix(b, "controller.R0_blocks"))
                            .collect::<Result<Vec<_>, _>>()?
                    }
                    (None, Some(v)) => identity_blocks(v),
                    (None, None) => return Err(invalid("controller.R0_scalar", "R0_scalar or R0_blocks required")),
                };
                for (i, r) in r0.iter().enumerate() {
                    if r.nrows() != dims.block_len(i) || !crate::factorization::is_spd(r) {
                        return Err(invalid(
                            "controller.R0",
                            format!("block {} must be a {}x{} positive definite matrix", i + 1, dims.block_len(i), dims.block_len(i)),
                        ));
                    }
                }
                (Law::LeastSquares { gamma }, r0)
            }
            LawName::Mmrac | LawName::Gradient => {
                let gs = cs
                    .gamma_scalar
                    .ok_or_else(|| invalid("controller.Gamma_scalar", "required by constant-gain laws"))?;
                let gain = identity_blocks(gs);
                let law = if cs.law == LawName::Mmrac {
                    Law::MMrac { gain }
                } else {
                    Law::Gradient { gain }
                };
                (law, Vec::new())
            }
        };

        let minor_signs = match &cs.minor_signs {
            Some(s) if s.len() == m => s.clone(),
            Some(_) => return Err(invalid("controller.minor_signs", format!("expected {m} entries"))),
            None => leading_minors(&plant.high_freq_gain()).iter().map(|d| d.signum()).collect(),
        };
        if minor_signs.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(invalid("controller.minor_signs", "leading minors must be nonzero"));
        }
        let sign_d = sign_d_from_minors(&minor_signs);

        let sigma = match &cs.sigma {
            Some(s) => SigmaMod {
                enabled: s.enabled,
                sigma_max: s.sigma_max,
                m0: s.m0,
            },
            None => SigmaMod::default(),
        };
        let controller = Controller::new(dims, filters, cs.ell0, law, sign_d, sigma).map_err(|e| invalid("controller", e))?;

        let theta0 = match &cs.theta0 {
            Some(blocks) => {
                if blocks.len() != m || blocks.iter().enumerate().any(|(i, b)| b.len() != dims.block_len(i)) {
                    return Err(invalid("controller.Theta0", "block lengths must be 2*m*nu + m - i"));
                }
                blocks.iter().map(|b| DVector::from_vec(b.clone())).collect()
            }
            None => (0..m).map(|i| DVector::zeros(dims.block_len(i))).collect(),
        };

        let is = &self.integration;
        let integration = Integration {
            h: is.h,
            duration: is.t,
            stride: is.stride,
            bound: is.bound,
            track_information: is.track_information,
        };

        let scenario = Scenario {
            label: self.label.clone(),
            plant,
            model,
            prefilter,
            signal,
            controller,
            r0,
            theta0,
            minor_signs,
            integration,
        };
        scenario.validate().map_err(|e| invalid("scenario", e))?;
        Ok(scenario)
    }

    /// Inverse of [`ScenarioFile::to_scenario`].
    pub fn from_scenario(s: &Scenario) -> Self {
        let c = &s.controller;
        let (model_a, prefilter) = match &s.prefilter {
            Some(pf) => (pf.poles.clone(), Some(PrefilterSection { a: pf.zero })),
            None => (s.model.a.clone(), None),
        };
        let (law, gamma, gamma_scalar) = match &c.law {
            Law::LeastSquares { gamma } => (LawName::Ls, Some(*gamma), None),
            Law::MMrac { gain } => (LawName::Mmrac, None, Some(gain[0][(0, 0)])),
            Law::Gradient { gain } => (LawName::Gradient, None, Some(gain[0][(0, 0)])),
        };
        let (r0_scalar, r0_blocks) = if s.r0.is_empty() {
            (None, None)
        } else {
            let v = s.r0[0][(0, 0)];
            let uniform = s
                .r0
                .iter()
                .all(|r| *r == DMatrix::identity(r.nrows(), r.ncols()) * v);
            if uniform {
                (Some(v), None)
            } else {
                (None, Some(s.r0.iter().map(matrix_to_rows).collect()))
            }
        };
        let theta_nonzero = s.theta0.iter().any(|b| b.iter().any(|v| *v != 0.0));
        ScenarioFile {
            label: s.label.clone(),
            plant: PlantSection {
                a: matrix_to_rows(&s.plant.a),
                b: matrix_to_rows(&s.plant.b),
                c: matrix_to_rows(&s.plant.c),
                x0: Some(s.plant.x.iter().copied().collect()),
            },
            model: ModelSection {
                a: compact(&model_a),
                bm: Some(compact(&s.model.bm)),
                ym0: Some(s.model.ym.clone()),
            },
            prefilter,
            reference: ReferenceSection {
                channels: s.signal.channels.clone(),
            },
            controller: ControllerSection {
                law,
                nu: c.dims.nu,
                ell0: c.ell0,
                lambda: (c.dims.nu > 1).then(|| matrix_to_rows(&c.filters.lambda)),
                g: (c.dims.nu > 1).then(|| c.filters.g.iter().copied().collect()),
                gamma,
                gamma_scalar,
                r0_scalar,
                r0_blocks,
                theta0: theta_nonzero.then(|| s.theta0.iter().map(|b| b.iter().copied().collect()).collect()),
                minor_signs: Some(s.minor_signs.clone()),
                sigma: c.sigma.enabled.then_some(SigmaSection {
                    enabled: true,
                    sigma_max: c.sigma.sigma_max,
                    m0: c.sigma.m0,
                }),
            },
            integration: IntegrationSection {
                h: s.integration.h,
                t: s.integration.duration,
                stride: s.integration.stride,
                bound: s.integration.bound,
                track_information: s.integration.track_information,
            },
        }
    }
}

/// Camera-misalignment gain `[cos φ, sin φ; -h sin φ, h cos φ]`.
pub fn visual_servo_gain(phi: f64, h: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[phi.cos(), phi.sin(), -h * phi.sin(), h * phi.cos()])
}

fn two_tone_reference(square: bool) -> ReferenceSection {
    let osc = |amplitude: f64, frequency: f64| {
        if square {
            Term::Square { amplitude, frequency }
        } else {
            Term::Sine {
                amplitude,
                frequency,
                phase: 0.0,
            }
        }
    };
    ReferenceSection {
        channels: vec![
            vec![Term::Constant { value: 1.0 }, osc(10.0, 5.0)],
            vec![Term::Constant { value: -1.0 }, osc(5.0, 3.0)],
        ],
    }
}

fn first_order_plant(y0: [f64; 2]) -> PlantSection {
    PlantSection {
        a: vec![vec![-2.0, 0.0], vec![0.0, -2.0]],
        b: matrix_to_rows(&visual_servo_gain(1.0, 0.5)),
        c: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        x0: Some(y0.to_vec()),
    }
}

fn third_order_plant(x0: [f64; 3]) -> PlantSection {
    PlantSection {
        a: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, -1.0]],
        b: vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, -1.0]],
        c: vec![vec![1.0, 1.0, -1.0], vec![2.0, -5.0, 1.0]],
        x0: Some(x0.to_vec()),
    }
}

fn controller_section(law: LawName, nu: usize, ell0: f64) -> ControllerSection {
    ControllerSection {
        law,
        nu,
        ell0,
        lambda: (nu > 1).then(|| vec![vec![-2.0]]),
        g: (nu > 1).then(|| vec![1.0]),
        gamma: None,
        gamma_scalar: None,
        r0_scalar: None,
        r0_blocks: None,
        theta0: None,
        minor_signs: Some(vec![1.0, 1.0]),
        sigma: None,
    }
}

fn integration(t: f64) -> IntegrationSection {
    IntegrationSection {
        h: 1e-4,
        t,
        stride: 10,
        bound: Some(1e6),
        track_information: false,
    }
}

/// First-order visual-servoing plant family: gradient baseline.
fn sim1() -> ScenarioFile {
    let mut c = controller_section(LawName::Gradient, 1, 2.0);
    c.gamma_scalar = Some(10.0);
    ScenarioFile {
        label: "sim1".into(),
        plant: first_order_plant([1.0, 1.0]),
        model: ModelSection {
            a: ScalarOrList::Scalar(2.0),
            bm: Some(ScalarOrList::Scalar(2.0)),
            ym0: Some(vec![0.0, 0.0]),
        },
        prefilter: None,
        reference: two_tone_reference(false),
        controller: c,
        integration: integration(20.0),
    }
}

/// `M(s) = 2/(s+2)` reached through the prefilter `(s+3)/(s+2)` so that the
/// loop model pole matches `ell0 = 3`.
fn first_order_with_prefilter(label: &str, c: ControllerSection) -> ScenarioFile {
    ScenarioFile {
        label: label.into(),
        plant: first_order_plant([1.0, 1.0]),
        model: ModelSection {
            a: ScalarOrList::Scalar(2.0),
            bm: Some(ScalarOrList::Scalar(2.0)),
            ym0: Some(vec![0.0, 0.0]),
        },
        prefilter: Some(PrefilterSection { a: 3.0 }),
        reference: two_tone_reference(false),
        controller: c,
        integration: integration(20.0),
    }
}

fn sim2() -> ScenarioFile {
    let mut c = controller_section(LawName::Mmrac, 1, 3.0);
    c.gamma_scalar = Some(500.0);
    first_order_with_prefilter("sim2", c)
}

fn sim3() -> ScenarioFile {
    let mut c = controller_section(LawName::Ls, 1, 3.0);
    c.gamma = Some(50.0);
    c.r0_scalar = Some(20.0);
    first_order_with_prefilter("sim3", c)
}

/// Third-order plant, `M(s) = diag{1/(s+1), 2/(s+2)}` realized as the loop
/// model `-2I` behind the prefilter `diag{(s+2)/(s+1), 1}`.
fn third_order(label: &str, x0: [f64; 3], gamma: f64, r0: f64, sigma: Option<SigmaSection>) -> ScenarioFile {
    let mut c = controller_section(LawName::Ls, 2, 2.0);
    c.gamma = Some(gamma);
    c.r0_scalar = Some(r0);
    c.sigma = sigma;
    ScenarioFile {
        label: label.into(),
        plant: third_order_plant(x0),
        model: ModelSection {
            a: ScalarOrList::List(vec![1.0, 2.0]),
            bm: Some(ScalarOrList::List(vec![1.0, 2.0])),
            ym0: Some(vec![0.0, 0.0]),
        },
        prefilter: Some(PrefilterSection { a: 2.0 }),
        reference: two_tone_reference(true),
        controller: c,
        integration: IntegrationSection {
            bound: Some(1e8),
            ..integration(30.0)
        },
    }
}

/// Threshold `M0` for the switched leakage in `sim6-sigma`.
pub const SIM6_SIGMA_M0: f64 = 10.0;

/// All built-in scenario files in presentation order.
pub fn builtin_files() -> Vec<ScenarioFile> {
    vec![
        sim1(),
        sim2(),
        sim3(),
        third_order("sim4", [0.65, 1.0, -0.37], 10.0, 1.0, None),
        third_order("sim5", [0.65, 1.0, -0.37], 10.0, 10.0, None),
        third_order("sim6", [0.65, 100.0, -0.37], 10.0, 20.0, None),
        third_order(
            "sim6-sigma",
            [0.65, 100.0, -0.37],
            10.0,
            20.0,
            Some(SigmaSection {
                enabled: true,
                sigma_max: 10.0,
                m0: SIM6_SIGMA_M0,
            }),
        ),
    ]
}

pub fn builtin_file(name: &str) -> Result<ScenarioFile, ScenarioError> {
    builtin_files()
        .into_iter()
        .find(|f| f.label == name)
        .ok_or_else(|| ScenarioError::UnknownBuiltin(name.to_string()))
}

pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
    builtin_file(name)?.to_scenario()
}

/// Built-in name or path to a scenario file.
pub fn resolve(name_or_path: &str) -> Result<Scenario, ScenarioError> {
    match builtin_file(name_or_path) {
        Ok(f) => f.to_scenario(),
        Err(_) => ScenarioFile::load(std::path::Path::new(name_or_path))?.to_scenario(),
    }
}

//! Per-op cost functions: analytic defaults and fitted linear regressions.

mod calibrate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::registry::CollectiveKind;
use crate::ir::{CostClass, DeviceId, OpRegistry, Type};
use crate::sim::Topology;

pub use calibrate::{calibrate, parse_bench_csv, write_bench_csv, BenchSample, CalibrationError, Fit};

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("no cost function for unknown op `{0}`")]
    UnknownOp(String),
    #[error("`{op}`: {message}")]
    Shape { op: String, message: String },
    #[error("unknown feature variable `{0}` (expected m, k, n, N, bytes or g)")]
    UnknownFeature(String),
    #[error("`{op}`: {coef} coefficients for {features} features")]
    CoefficientCount { op: String, coef: usize, features: usize },
    #[error("invalid costs JSON: {0}")]
    Json(String),
}

/// Regression feature: a product of shape variables and constants, written
/// like `m*k*n` or `2*N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    text: String,
    factors: Vec<Factor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Factor {
    Var(Var),
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Var {
    M,
    K,
    N,
    Numel,
    Bytes,
    Group,
}

impl Feature {
    pub fn parse(text: &str) -> Result<Feature, CostError> {
        let factors = text
            .split('*')
            .map(|t| {
                let t = t.trim();
                Ok(match t {
                    "m" => Factor::Var(Var::M),
                    "k" => Factor::Var(Var::K),
                    "n" => Factor::Var(Var::N),
                    "N" => Factor::Var(Var::Numel),
                    "bytes" => Factor::Var(Var::Bytes),
                    "g" => Factor::Var(Var::Group),
                    other => match other.parse::<f64>() {
                        Ok(c) if c.is_finite() => Factor::Const(c),
                        _ => return Err(CostError::UnknownFeature(other.to_string())),
                    },
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Feature {
            text: text.to_string(),
            factors,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn eval(&self, v: &ShapeVars) -> f64 {
        self.factors
            .iter()
            .map(|f| match f {
                Factor::Const(c) => *c,
                Factor::Var(Var::M) => v.m,
                Factor::Var(Var::K) => v.k,
                Factor::Var(Var::N) => v.n,
                Factor::Var(Var::Numel) => v.numel,
                Factor::Var(Var::Bytes) => v.bytes,
                Factor::Var(Var::Group) => v.group,
            })
            .product()
    }
}

/// Shape variables an op exposes to cost functions. Variables that do not
/// apply to an op's class are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ShapeVars {
    pub m: f64,
    pub k: f64,
    pub n: f64,
    /// Largest element count among inputs and outputs.
    pub numel: f64,
    /// Message size of a communication op.
    pub bytes: f64,
    /// Number of participating devices.
    pub group: f64,
}

impl ShapeVars {
    /// `shapes` are the input shapes, `outputs` the output shapes (possibly
    /// empty), `width` the element width in bytes.
    pub fn from_shapes(class: CostClass, inputs: &[(&[usize], usize)], outputs: &[&[usize]], group: usize) -> Result<ShapeVars, String> {
        let numel = |s: &[usize]| s.iter().product::<usize>() as f64;
        let mut v = ShapeVars {
            numel: inputs
                .iter()
                .map(|(s, _)| numel(s))
                .chain(outputs.iter().map(|s| numel(s)))
                .fold(0.0, f64::max),
            group: group as f64,
            ..ShapeVars::default()
        };
        match class {
            CostClass::MatMul | CostClass::MatMulGrad => {
                let (a, b) = match inputs {
                    [(a, _), (b, _), ..] if a.len() == 2 && b.len() == 2 => (a, b),
                    _ => return Err("matmul cost needs two matrix inputs".to_string()),
                };
                v.m = a[0] as f64;
                v.k = a[1] as f64;
                v.n = b[1] as f64;
            }
            CostClass::Send | CostClass::Collective(_) => {
                let bytes_of = |(s, w): &(&[usize], usize)| numel(s) * *w as f64;
                v.bytes = match class {
                    CostClass::Collective(CollectiveKind::Gather | CollectiveKind::Allgather) => inputs.iter().map(bytes_of).sum(),
                    _ => inputs.first().map(bytes_of).unwrap_or(0.0),
                };
            }
            CostClass::Elementwise | CostClass::Metadata => {}
        }
        Ok(v)
    }

    pub fn from_types(class: CostClass, inputs: &[Type], outputs: &[Type], group: usize) -> Result<ShapeVars, String> {
        let flat_in: Vec<(Vec<usize>, usize)> = inputs.iter().flat_map(flatten).collect();
        let flat_out: Vec<(Vec<usize>, usize)> = outputs.iter().flat_map(flatten).collect();
        let ins: Vec<(&[usize], usize)> = flat_in.iter().map(|(s, w)| (s.as_slice(), *w)).collect();
        let outs: Vec<&[usize]> = flat_out.iter().map(|(s, _)| s.as_slice()).collect();
        ShapeVars::from_shapes(class, &ins, &outs, group)
    }
}

fn flatten(t: &Type) -> Vec<(Vec<usize>, usize)> {
    match t {
        Type::Tuple(items) => items.iter().flat_map(flatten).collect(),
        _ => vec![(
            t.shape().map(<[usize]>::to_vec).unwrap_or_default(),
            t.dtype().map_or(0, |d| d.width()),
        )],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OpCostSpec {
    Analytic,
    Regression {
        features: Vec<String>,
        coef: Vec<f64>,
        intercept: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r2: Option<f64>,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    floor: Option<f64>,
    #[serde(default)]
    ops: BTreeMap<String, OpCostSpec>,
}

#[derive(Clone, Debug, PartialEq)]
struct Regression {
    features: Vec<Feature>,
    coef: Vec<f64>,
    intercept: f64,
}

/// Cost functions per op type. Ops without an entry use the analytic
/// default of their cost class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostModel {
    regressions: BTreeMap<String, Regression>,
    r2: BTreeMap<String, f64>,
    /// Lower bound for regression predictions; defaults to the launch
    /// overhead of the op's device.
    pub floor: Option<f64>,
}

/// Everything a cost function sees of one op instance.
pub struct OpInstance<'a> {
    pub op_type: &'a str,
    pub inputs: &'a [Type],
    pub outputs: &'a [Type],
    pub devices: &'a [DeviceId],
}

impl CostModel {
    /// All ops analytic.
    pub fn analytic() -> CostModel {
        CostModel::default()
    }

    pub fn with_regression(mut self, op: &str, features: &[&str], coef: Vec<f64>, intercept: f64) -> Result<CostModel, CostError> {
        let spec = OpCostSpec::Regression {
            features: features.iter().map(|s| s.to_string()).collect(),
            coef,
            intercept,
            r2: None,
        };
        self.set(op, &spec)?;
        Ok(self)
    }

    fn set(&mut self, op: &str, spec: &OpCostSpec) -> Result<(), CostError> {
        match spec {
            OpCostSpec::Analytic => {
                self.regressions.remove(op);
                self.r2.remove(op);
            }
            OpCostSpec::Regression {
                features,
                coef,
                intercept,
                r2,
            } => {
                if features.len() != coef.len() {
                    return Err(CostError::CoefficientCount {
                        op: op.to_string(),
                        coef: coef.len(),
                        features: features.len(),
                    });
                }
                let features = features.iter().map(|f| Feature::parse(f)).collect::<Result<_, _>>()?;
                self.regressions.insert(
                    op.to_string(),
                    Regression {
                        features,
                        coef: coef.clone(),
                        intercept: *intercept,
                    },
                );
                if let Some(r2) = r2 {
                    self.r2.insert(op.to_string(), *r2);
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<CostModel, CostError> {
        let file: CostFile = serde_json::from_str(text).map_err(|e| CostError::Json(e.to_string()))?;
        let mut m = CostModel {
            floor: file.floor,
            ..CostModel::default()
        };
        for (op, spec) in &file.ops {
            m.set(op, spec)?;
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let file = CostFile {
            floor: self.floor,
            ops: self
                .regressions
                .iter()
                .map(|(op, r)| {
                    (
                        op.clone(),
                        OpCostSpec::Regression {
                            features: r.features.iter().map(|f| f.text.clone()).collect(),
                            coef: r.coef.clone(),
                            intercept: r.intercept,
                            r2: self.r2.get(op).copied(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("cost model serializes")
    }

    pub fn regression(&self, op: &str) -> Option<(Vec<&str>, &[f64], f64)> {
        self.regressions
            .get(op)
            .map(|r| (r.features.iter().map(|f| f.text()).collect(), r.coef.as_slice(), r.intercept))
    }

    pub fn r2(&self, op: &str) -> Option<f64> {
        self.r2.get(op).copied()
    }

    /// Seconds that `op` occupies each of its devices.
    pub fn cost(&self, registry: &OpRegistry, op: &OpInstance<'_>, topo: &Topology) -> Result<f64, CostError> {
        let entry = registry.lookup(op.op_type).map_err(|_| CostError::UnknownOp(op.op_type.to_string()))?;
        self.cost_for_class(entry.cost_class, op, topo)
    }

    pub fn cost_for_class(&self, class: CostClass, op: &OpInstance<'_>, topo: &Topology) -> Result<f64, CostError> {
        let vars = ShapeVars::from_types(class, op.inputs, op.outputs, op.devices.len()).map_err(|message| CostError::Shape {
            op: op.op_type.to_string(),
            message,
        })?;
        let overhead = op
            .devices
            .iter()
            .map(|&d| topo.device(d).kernel_launch_overhead)
            .fold(0.0, f64::max);
        if let Some(r) = self.regressions.get(op.op_type) {
            let y = r.intercept + r.features.iter().zip(&r.coef).map(|(f, c)| c * f.eval(&vars)).sum::<f64>();
            return Ok(y.max(self.floor.unwrap_or(overhead)).max(0.0));
        }
        Ok(analytic_cost(class, &vars, op.devices, topo))
    }
}

/// Default cost formulas.
pub fn analytic_cost(class: CostClass, v: &ShapeVars, devices: &[DeviceId], topo: &Topology) -> f64 {
    let Some(&d0) = devices.first() else { return 0.0 };
    let dev = topo.device(d0);
    match class {
        CostClass::Elementwise => v.numel / dev.flops + dev.kernel_launch_overhead,
        CostClass::MatMul => 2.0 * v.m * v.k * v.n / dev.flops + dev.kernel_launch_overhead,
        CostClass::MatMulGrad => 4.0 * v.m * v.k * v.n / dev.flops + dev.kernel_launch_overhead,
        CostClass::Metadata => dev.kernel_launch_overhead,
        CostClass::Send | CostClass::Collective(_) => {
            let g = devices.len();
            if g < 2 {
                return 0.0;
            }
            let mut min_bw = f64::INFINITY;
            let mut max_lat: f64 = 0.0;
            for (i, &a) in devices.iter().enumerate() {
                for &b in &devices[i + 1..] {
                    min_bw = min_bw.min(topo.bandwidth(a, b));
                    max_lat = max_lat.max(topo.latency(a, b));
                }
            }
            match class {
                CostClass::Send => v.bytes / min_bw + max_lat,
                _ => {
                    let gf = g as f64;
                    let factor = if class == CostClass::Collective(CollectiveKind::Allreduce) { 2.0 } else { 1.0 };
                    factor * (gf - 1.0) / gf * v.bytes / min_bw + (gf - 1.0) * max_lat
                }
            }
        }
    }
}

/// Default regression features of a cost class.
pub fn default_features(class: CostClass) -> Vec<String> {
    let f: &[&str] = match class {
        CostClass::MatMul | CostClass::MatMulGrad => &["m*k*n", "m*n"],
        CostClass::Elementwise | CostClass::Metadata => &["N"],
        CostClass::Send | CostClass::Collective(_) => &["bytes"],
    };
    f.iter().map(|s| s.to_string()).collect()
}

use std::collections::BTreeMap;
use std::io;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::{default_features, CostError, CostModel, Feature, OpCostSpec, ShapeVars};
use crate::ir::{CostClass, OpRegistry};

/// One microbenchmark measurement. Element width is taken as 4 bytes (F32).
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSample {
    pub op_type: String,
    pub shapes: Vec<Vec<usize>>,
    pub seconds: f64,
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("unknown op `{0}` in benchmark data")]
    UnknownOp(String),
    #[error("`{op}`: {samples} samples cannot determine {params} parameters (rank-deficient design matrix)")]
    RankDeficient { op: String, samples: usize, params: usize },
    #[error("`{op}`: {message}")]
    BadSample { op: String, message: String },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("benchmark CSV: {0}")]
    Csv(String),
}

/// Result of fitting one op.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub op_type: String,
    pub features: Vec<String>,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
    pub samples: usize,
}

fn sample_vars(class: CostClass, s: &BenchSample) -> Result<ShapeVars, String> {
    let ins: Vec<(&[usize], usize)> = s.shapes.iter().map(|v| (v.as_slice(), 4)).collect();
    let group = match class {
        CostClass::Send => 2,
        CostClass::Collective(_) => s.shapes.len(),
        _ => 1,
    };
    ShapeVars::from_shapes(class, &ins, &[], group)
}

/// Ordinary least squares with an intercept. Columns are scaled to unit
/// maximum before the SVD so that features of very different magnitude
/// (`m*k*n` next to `m*n`) keep their precision.
fn ols(op: &str, rows: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, f64, f64), CalibrationError> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len) + 1;
    let deficient = || CalibrationError::RankDeficient {
        op: op.to_string(),
        samples: n,
        params: p,
    };
    if n < p {
        return Err(deficient());
    }
    let mut x = DMatrix::from_fn(n, p, |i, j| if j + 1 == p { 1.0 } else { rows[i][j] });
    let mut scale = vec![1.0; p];
    for (j, s) in scale.iter_mut().enumerate() {
        let m = x.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m == 0.0 {
            return Err(deficient());
        }
        *s = m;
        x.column_mut(j).iter_mut().for_each(|v| *v /= m);
    }
    let yv = DVector::from_column_slice(y);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10;
    if svd.singular_values.iter().filter(|&&s| s > tol).count() < p {
        return Err(deficient());
    }
    let beta = svd.solve(&yv, tol).map_err(|e| CalibrationError::BadSample {
        op: op.to_string(),
        message: e.to_string(),
    })?;
    let pred = &x * &beta;
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_res: f64 = pred.iter().zip(y).map(|(p, y)| (y - p).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|y| (y - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let coef: Vec<f64> = (0..p).map(|j| beta[j] / scale[j]).collect();
    Ok((coef[..p - 1].to_vec(), coef[p - 1], r2))
}

/// Fits one regression per op type present in `samples`. `features`
/// overrides the default feature list of an op.
pub fn calibrate(
    samples: &[BenchSample],
    features: &BTreeMap<String, Vec<String>>,
    registry: &OpRegistry,
) -> Result<(CostModel, Vec<Fit>), CalibrationError> {
    let mut by_op: BTreeMap<&str, Vec<&BenchSample>> = BTreeMap::new();
    for s in samples {
        by_op.entry(s.op_type.as_str()).or_default().push(s);
    }
    let mut model = CostModel::analytic();
    let mut fits = Vec::new();
    for (op, group) in by_op {
        let entry = registry.lookup(op).map_err(|_| CalibrationError::UnknownOp(op.to_string()))?;
        let names = features.get(op).cloned().unwrap_or_else(|| default_features(entry.cost_class));
        let feats: Vec<Feature> = names.iter().map(|f| Feature::parse(f)).collect::<Result<_, _>>()?;
        let mut rows = Vec::with_capacity(group.len());
        let mut y = Vec::with_capacity(group.len());
        for s in &group {
            if !(s.seconds > 0.0 && s.seconds.is_finite()) {
                return Err(CalibrationError::BadSample {
                    op: op.to_string(),
                    message: format!("measured time must be positive, got {}", s.seconds),
                });
            }
            let vars = sample_vars(entry.cost_class, s).map_err(|message| CalibrationError::BadSample {
                op: op.to_string(),
                message,
            })?;
            rows.push(feats.iter().map(|f| f.eval(&vars)).collect());
            y.push(s.seconds);
        }
        let (coef, intercept, r2) = ols(op, &rows, &y)?;
        model.set(
            op,
            &OpCostSpec::Regression {
                features: names.clone(),
                coef: coef.clone(),
                intercept,
                r2: Some(r2),
            },
        )?;
        fits.push(Fit {
            op_type: op.to_string(),
            features: names,
            coef,
            intercept,
            r2,
            samples: group.len(),
        });
    }
    Ok((model, fits))
}

fn format_shape(s: &[usize]) -> String {
    s.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|_| format!("bad dimension `{d}` in shape `{s}`")))
        .collect()
}

/// Reads `op,shapes,seconds` rows; shapes are `;`-separated, dimensions
/// `x`-separated (`64x32;32x16`).
pub fn parse_bench_csv(r: impl io::Read) -> Result<Vec<BenchSample>, CalibrationError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers().map_err(|e| CalibrationError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["op", "shapes", "seconds"] {
        return Err(CalibrationError::Csv(format!("expected header `op,shapes,seconds`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CalibrationError::Csv(e.to_string()))?;
        let line = i + 2;
        let bad = |m: String| CalibrationError::Csv(format!("line {line}: {m}"));
        let shapes = rec[1].split(';').map(parse_shape).collect::<Result<Vec<_>, _>>().map_err(bad)?;
        let seconds = rec[2].parse::<f64>().map_err(|_| bad(format!("bad time `{}`", &rec[2])))?;
        out.push(BenchSample {
            op_type: rec[0].to_string(),
            shapes,
            seconds,
        });
    }
    Ok(out)
}

pub fn write_bench_csv(w: impl io::Write, samples: &[BenchSample]) -> Result<(), CalibrationError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| CalibrationError::Csv(e.to_string());
    wtr.write_record(["op", "shapes", "seconds"]).map_err(err)?;
    for s in samples {
        let shapes = s.shapes.iter().map(|v| format_shape(v)).collect::<Vec<_>>().join(";");
        wtr.write_record([s.op_type.as_str(), &shapes, &format!("{:?}", s.seconds)]).map_err(err)?;
    }
    wtr.flush().map_err(|e| CalibrationError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::default_registry;

    fn matmul_samples(f: impl Fn(f64, f64) -> f64) -> Vec<BenchSample> {
        let mut out = Vec::new();
        for &m in &[16usize, 64, 256] {
            for &k in &[32usize, 128] {
                for &n in &[8usize, 64, 512] {
                    let mkn = (m * k * n) as f64;
                    out.push(BenchSample {
                        op_type: "MatMul".to_string(),
                        shapes: vec![vec![m, k], vec![k, n]],
                        seconds: f(mkn, (m * n) as f64),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn exact_fit_has_unit_r2() {
        let s = matmul_samples(|mkn, mn| 3e-12 * mkn + 2e-10 * mn + 5e-6);
        let (model, fits) = calibrate(&s, &BTreeMap::new(), default_registry()).unwrap();
        assert!((fits[0].r2 - 1.0).abs() < 1e-9);
        let (_, coef, b) = model.regression("MatMul").unwrap();
        assert!((coef[0] / 3e-12 - 1.0).abs() < 1e-6);
        assert!((coef[1] / 2e-10 - 1.0).abs() < 1e-6);
        assert!((b / 5e-6 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_sample_is_rank_deficient() {
        let s = &matmul_samples(|mkn, _| 3e-12 * mkn)[..1];
        let err = calibrate(s, &BTreeMap::new(), default_registry()).unwrap_err();
        assert!(matches!(err, CalibrationError::RankDeficient { ref op, .. } if op == "MatMul"));
    }

    #[test]
    fn csv_round_trip() {
        let s = matmul_samples(|mkn, _| 3e-12 * mkn + 5e-6);
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &s).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("op,shapes,seconds\nMatMul,16x32;32x8,"));
        assert_eq!(parse_bench_csv(buf.as_slice()).unwrap(), s);
    }
}

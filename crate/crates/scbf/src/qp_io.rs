//! Plain JSON QP files for the `solve-qp` command.
//!
//! ```json
//! { "P": [[2.0]], "q": [-4.0], "A": [[1.0]], "ub": [1.0], "lo": [null], "hi": [null] }
//! ```
//!
//! `null` in `ub` or `hi` means +∞ and in `lo` means −∞. `A`, `ub`, `lo`
//! and `hi` may be omitted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use scbf_core::qp::{ConstraintId, KktReport, QpProblem, QpSolution, QpStatus};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpFile {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    #[serde(rename = "A", default)]
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub ub: Vec<Option<f64>>,
    #[serde(default)]
    pub lo: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub hi: Option<Vec<Option<f64>>>,
}

fn matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Format(format!("every row of {what} needs {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn bounds(v: &Option<Vec<Option<f64>>>, k: usize, missing: f64, what: &str) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::from_element(k, missing)),
        Some(v) if v.len() == k => Ok(DVector::from_iterator(k, v.iter().map(|x| x.unwrap_or(missing)))),
        Some(v) => Err(CliError::Format(format!(
            "{what} has {} entries, expected {k}",
            v.len()
        ))),
    }
}

impl QpFile {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Format(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn to_problem(&self) -> Result<QpProblem> {
        let k = self.q.len();
        let p = matrix(&self.p, k, "P")?;
        if p.nrows() != k {
            return Err(CliError::Format(format!("P has {} rows, expected {k}", p.nrows())));
        }
        let a = matrix(&self.a, k, "A")?;
        if self.ub.len() != a.nrows() {
            return Err(CliError::Format(format!(
                "ub has {} entries, expected {}",
                self.ub.len(),
                a.nrows()
            )));
        }
        let ub = DVector::from_iterator(self.ub.len(), self.ub.iter().map(|x| x.unwrap_or(f64::INFINITY)));
        let lo = bounds(&self.lo, k, f64::NEG_INFINITY, "lo")?;
        let hi = bounds(&self.hi, k, f64::INFINITY, "hi")?;
        Ok(QpProblem::new(p, DVector::from_vec(self.q.clone()), a, ub, lo, hi)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualsReport {
    pub rows: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub min_violation: f64,
    pub ray: Vec<f64>,
}

/// What `solve-qp` prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpReport {
    pub status: QpStatus,
    pub z: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt: KktReport,
    pub kkt_max: f64,
    pub duals: DualsReport,
    pub active: Vec<ConstraintId>,
    pub certificate: Option<CertificateReport>,
}

impl From<&QpSolution> for QpReport {
    fn from(s: &QpSolution) -> Self {
        Self {
            status: s.status,
            z: s.z.iter().copied().collect(),
            objective: s.objective,
            iterations: s.iterations,
            kkt: s.kkt,
            kkt_max: s.kkt.max(),
            duals: DualsReport {
                rows: s.duals.rows.iter().copied().collect(),
                lower: s.duals.lower.iter().copied().collect(),
                upper: s.duals.upper.iter().copied().collect(),
            },
            active: s.active.clone(),
            certificate: s.certificate.as_ref().map(|c| CertificateReport {
                min_violation: c.min_violation,
                ray: c.ray.iter().copied().collect(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scbf_core::qp::{qp_solve, QpSettings};

    #[test]
    fn nulls_are_infinite_bounds() {
        let f = QpFile::parse(r#"{"P": [[2.0]], "q": [-4.0], "A": [[1.0]], "ub": [null], "lo": [null], "hi": [1.0]}"#)
            .unwrap();
        let p = f.to_problem().unwrap();
        assert_eq!(p.ub[0], f64::INFINITY);
        assert_eq!(p.lo[0], f64::NEG_INFINITY);
        assert_eq!(p.hi[0], 1.0);
    }

    #[test]
    fn box_clip_solves_to_the_bound() {
        let f = QpFile::parse(r#"{"P": [[2.0]], "q": [-4.0], "A": [[1.0]], "ub": [1.0]}"#).unwrap();
        let sol = qp_solve(&f.to_problem().unwrap(), &QpSettings::default()).unwrap();
        let rep = QpReport::from(&sol);
        assert_eq!(rep.status, QpStatus::Optimal);
        assert!((rep.z[0] - 1.0).abs() < 1e-12);
        assert!((rep.duals.rows[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn shape_errors_are_reported() {
        assert!(QpFile::parse(r#"{"P": [[1.0, 0.0]], "q": [0.0]}"#)
            .unwrap()
            .to_problem()
            .is_err());
        assert!(QpFile::parse(r#"{"P": [[1.0]], "q": [0.0], "A": [[1.0]], "ub": []}"#)
            .unwrap()
            .to_problem()
            .is_err());
        assert!(QpFile::parse(r#"{"P": [[1.0]], "q": [0.0], "x": 1}"#).is_err());
        // Not positive semidefinite.
        assert!(QpFile::parse(r#"{"P": [[-1.0]], "q": [0.0]}"#)
            .unwrap()
            .to_problem()
            .is_err());
    }
}

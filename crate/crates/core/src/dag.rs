//! DAG loss over deductive outputs, as a training term and as an
//! inference-time diagnostic.
//!
//! For a square matrix `M` of side `d`, the loss is `|ln(tr(exp(M ⊙ M)) / d)|`.
//! It is zero exactly when `M` is the weighted adjacency matrix of a directed
//! acyclic graph, because then `M ⊙ M` is nilpotent. The logarithm is natural.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::expm::expm_raw;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-matrix DAG loss with what its gradient needs.
#[derive(Debug, Clone)]
pub(crate) struct DagTerm<T> {
    pub value: T,
    /// `sign(ln r) / trace`, zero when the loss is flat or overflowed.
    pub slope: T,
    /// `exp(M ⊙ M)`, row-major.
    pub exp: Vec<T>,
    pub overflow: bool,
}

pub(crate) fn dag_term<T: Scalar>(m: &[T], d: usize) -> DagTerm<T> {
    let sq: Vec<T> = m.iter().map(|&x| x * x).collect();
    let e = expm_raw(&sq, d);
    if e.overflow {
        return DagTerm { value: T::infinity(), slope: T::zero(), exp: e.exp, overflow: true };
    }
    let log_ratio = (e.trace / T::from_f64(d as f64)).ln();
    let sign = if log_ratio > T::zero() {
        T::one()
    } else if log_ratio < T::zero() {
        -T::one()
    } else {
        T::zero()
    };
    DagTerm { value: log_ratio.abs(), slope: sign / e.trace, exp: e.exp, overflow: false }
}

/// Mean DAG loss over a collection of equally sized square matrices.
/// Returns `(+inf, true)` when any trace overflows.
pub fn dag_loss<T: Scalar>(ms: &[Tensor<T>]) -> Result<(T, bool)> {
    let first = ms.first().ok_or_else(|| Error::Input("DAG loss of an empty collection".into()))?;
    let d = first.square_side()?;
    let mut total = 0.0f64;
    for m in ms {
        if m.shape() != first.shape() {
            return Err(dim_err!("DAG loss over mixed shapes {:?} and {:?}", first.shape(), m.shape()));
        }
        m.ensure_finite("DAG loss argument")?;
        let term = dag_term(m.data(), d);
        if term.overflow {
            return Ok((T::infinity(), true));
        }
        total += term.value.as_f64();
    }
    Ok((T::from_f64(total / ms.len() as f64), false))
}

/// DAG loss over a stacked tensor `[.., d, d]` (one term per trailing matrix).
pub fn dag_loss_stacked<T: Scalar>(stack: &Tensor<T>) -> Result<(T, bool)> {
    let s = stack.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(dim_err!("expected stacked square matrices, got {:?}", s));
    }
    let d = s[s.len() - 1];
    if stack.numel() == 0 {
        return Err(Error::Input("DAG loss of an empty collection".into()));
    }
    stack.ensure_finite("DAG loss argument")?;
    let mut total = 0.0f64;
    let n = stack.numel() / (d * d);
    for m in stack.data().chunks(d * d) {
        let term = dag_term(m, d);
        if term.overflow {
            return Ok((T::infinity(), true));
        }
        total += term.value.as_f64();
    }
    Ok((T::from_f64(total / n as f64), false))
}

/// Regularization strengths for the metric, potential and energy-curvature
/// tensors. `None` switches a term off: it adds nothing to the loss and an
/// overflow in it is only reported.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagCoefficients {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
}

impl DagCoefficients {
    pub const OFF: Self = Self { lambda1: None, lambda2: None, lambda3: None };

    pub fn uniform(lambda: f64) -> Self {
        Self { lambda1: Some(lambda), lambda2: Some(lambda), lambda3: Some(lambda) }
    }

    pub fn as_array(&self) -> [Option<f64>; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }

    pub fn any_active(&self) -> bool {
        self.as_array().iter().any(Option::is_some)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.as_array().iter().enumerate() {
            if let Some(v) = l {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::Config(format!("dag.lambda{} must be finite and >= 0, got {v}", i + 1)));
                }
            }
        }
        Ok(())
    }
}

/// The three deductive tensor kinds, in regularizer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeductiveKind {
    Metric,
    Potential,
    EnergyCurvature,
}

impl DeductiveKind {
    pub const ALL: [DeductiveKind; 3] =
        [DeductiveKind::Metric, DeductiveKind::Potential, DeductiveKind::EnergyCurvature];

    pub fn label(self) -> &'static str {
        match self {
            DeductiveKind::Metric => "A_LM",
            DeductiveKind::Potential => "A_P",
            DeductiveKind::EnergyCurvature => "G_LM",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }
}

/// A DAG loss value, or the overflow sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DagValue {
    Finite(f64),
    Overflow,
}

impl DagValue {
    pub fn from_pair(value: f64, overflow: bool) -> Self {
        if overflow || !value.is_finite() {
            DagValue::Overflow
        } else {
            DagValue::Finite(value)
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            DagValue::Finite(v) => Some(v),
            DagValue::Overflow => None,
        }
    }

    pub fn is_overflow(self) -> bool {
        matches!(self, DagValue::Overflow)
    }

    /// Values below 1e-30 in magnitude print as `0`.
    pub fn render(self) -> String {
        match self {
            DagValue::Overflow => "overflow".to_string(),
            DagValue::Finite(v) if v.abs() < 1e-30 => "0".to_string(),
            DagValue::Finite(v) => format!("{v:e}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "overflow" => Ok(DagValue::Overflow),
            _ => s.parse::<f64>().map(DagValue::Finite).map_err(|_| Error::Input(format!("bad DAG value `{s}`"))),
        }
    }
}

/// `λ1·DL(A_LM) + λ2·DL(A_P) + λ3·DL(G_LM)` over finished loss values;
/// inactive terms are skipped. An overflowed active term is an error.
pub fn dag_regularizer_from_values(values: [DagValue; 3], coefficients: &DagCoefficients) -> Result<f64> {
    let mut total = 0.0;
    for ((lambda, value), kind) in coefficients.as_array().iter().zip(values).zip(DeductiveKind::ALL) {
        if let Some(l) = lambda {
            match value {
                DagValue::Finite(v) => total += l * v,
                DagValue::Overflow => return Err(Error::RegularizerOverflow { step: 0, tensor: kind.label() }),
            }
        }
    }
    Ok(total)
}

/// Column header of the CSV report.
pub const REPORT_HEADER: &str = "model_id,tensor,lambda,dl_value";

/// One row of a DAG report.
#[derive(Debug, Clone, PartialEq)]
pub struct DagReportRow {
    pub tensor: String,
    pub lambda: Option<f64>,
    pub value: DagValue,
}

/// DAG losses of the deductive outputs of one model at inference, plus the
/// aggregate regularizer over the regularized terms (row `DLR`).
///
/// Deductive outputs come from a single forward pass over the completed
/// sequence, read at its final position.
#[derive(Debug, Clone, PartialEq)]
pub struct DagReport {
    pub model_id: String,
    pub rows: Vec<DagReportRow>,
}

fn render_lambda(l: Option<f64>) -> String {
    match l {
        Some(v) => format!("{v}"),
        None => "NA".to_string(),
    }
}

impl DagReport {
    /// Builds the per-tensor rows and the `DLR` aggregate row.
    pub fn new(model_id: &str, values: [DagValue; 3], coefficients: &DagCoefficients) -> Self {
        let mut rows: Vec<DagReportRow> = DeductiveKind::ALL
            .iter()
            .zip(values)
            .zip(coefficients.as_array())
            .map(|((k, value), lambda)| DagReportRow { tensor: k.label().to_string(), lambda, value })
            .collect();
        if coefficients.any_active() {
            let aggregate = match dag_regularizer_from_values(values, coefficients) {
                Ok(v) => DagValue::Finite(v),
                Err(_) => DagValue::Overflow,
            };
            rows.push(DagReportRow { tensor: "DLR".into(), lambda: None, value: aggregate });
        }
        Self { model_id: model_id.to_string(), rows }
    }

    pub fn value(&self, kind: DeductiveKind) -> Option<DagValue> {
        self.rows.iter().find(|r| r.tensor == kind.label()).map(|r| r.value)
    }

    pub fn aggregate(&self) -> Option<DagValue> {
        self.rows.iter().find(|r| r.tensor == "DLR").map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", self.model_id, r.tensor, render_lambda(r.lambda), r.value.render());
        }
        out
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != REPORT_HEADER {
            return Err(Error::Input(format!("unexpected DAG report header `{header}`")));
        }
        let mut model_id = None;
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [id, tensor, lambda, value] = fields[..] else {
                return Err(Error::Input(format!("malformed DAG report row `{line}`")));
            };
            model_id.get_or_insert_with(|| id.to_string());
            let lambda = match lambda {
                "NA" => None,
                s => Some(s.parse::<f64>().map_err(|_| Error::Input(format!("bad lambda `{s}`")))?),
            };
            rows.push(DagReportRow { tensor: tensor.to_string(), lambda, value: DagValue::parse(value)? });
        }
        Ok(Self { model_id: model_id.unwrap_or_default(), rows })
    }

    /// Single human-readable line shaped like a results-table row.
    pub fn table_row(&self) -> String {
        let lambdas: Vec<String> = self.rows.iter().take(3).map(|r| render_lambda(r.lambda)).collect();
        let values: Vec<String> = self.rows.iter().take(3).map(|r| r.value.render()).collect();
        let agg = self.aggregate().map(|v| v.render()).unwrap_or_else(|| "NA".into());
        format!(
            "{} | λ = {} | DL(A_LM) = {} | DL(A_P) = {} | DL(G_LM) = {} | DLR = {}",
            self.model_id,
            lambdas.join(", "),
            values[0],
            values[1],
            values[2],
            agg
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_cases() {
        let (v, of) = dag_loss(&[Tensor::<f64>::zeros(&[64, 64])]).unwrap();
        assert_eq!((v, of), (0.0, false));
        let (v, _) = dag_loss(&[Tensor::<f64>::eye(64)]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let lower = Tensor::<f64>::from_fn(&[6, 6], |i| if i / 6 > i % 6 { 2.0 + i as f64 } else { 0.0 });
        assert_eq!(dag_loss(&[lower]).unwrap().0, 0.0);
        assert!(dag_loss::<f64>(&[]).is_err());
    }

    #[test]
    fn overflow_propagates() {
        let big = Tensor::<f64>::full(&[3, 3], 40.0);
        let (v, of) = dag_loss(&[Tensor::zeros(&[3, 3]), big]).unwrap();
        assert!(of && v.is_infinite());
    }

    #[test]
    fn regularizer_skips_inactive_terms() {
        let vals = [DagValue::Finite(2.0), DagValue::Overflow, DagValue::Finite(4.0)];
        let c = DagCoefficients { lambda1: Some(0.5), lambda2: None, lambda3: Some(0.25) };
        assert_eq!(dag_regularizer_from_values(vals, &c).unwrap(), 2.0);
        assert_eq!(dag_regularizer_from_values(vals, &DagCoefficients::OFF).unwrap(), 0.0);
        assert!(dag_regularizer_from_values(vals, &DagCoefficients::uniform(0.05)).is_err());
    }

    #[test]
    fn value_rendering() {
        assert_eq!(DagValue::Finite(0.0).render(), "0");
        assert_eq!(DagValue::Finite(3e-31).render(), "0");
        assert_eq!(DagValue::Overflow.render(), "overflow");
        assert_eq!(DagValue::Finite(8.61e-3).render(), "8.61e-3");
        assert_eq!(DagValue::parse("8.61e-3").unwrap(), DagValue::Finite(8.61e-3));
    }

    #[test]
    fn report_csv_round_trip() {
        let c = DagCoefficients::uniform(0.05);
        let r =
            DagReport::new("toy", [DagValue::Finite(0.0), DagValue::Finite(8.61e-3), DagValue::Finite(1.43e-2)], &c);
        let csv = r.to_csv();
        assert!(csv.starts_with("model_id,tensor,lambda,dl_value\n"));
        let back = DagReport::read_csv(csv.as_bytes()).unwrap();
        assert_eq!(back.to_csv(), csv);
        // matches the aggregate arithmetic of a regularized row: 0.05 * (8.61e-3 + 1.43e-2)
        let agg = r.aggregate().unwrap().finite().unwrap();
        assert!((agg - 1.1455e-3).abs() < 1e-12);
    }
}

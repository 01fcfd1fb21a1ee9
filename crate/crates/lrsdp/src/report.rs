//! Structured result reports.
//!
//! Reports are JSON with a fixed field order. Residuals are formatted to two
//! significant digits in scientific notation and objective values to eight,
//! so reports diff cleanly; serialize-parse-serialize is byte-identical.

use crate::error::{Error, Result};
use crate::palm::{RunHistory, SolveStatus, StageKind, SwitchReason};
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA: u32 = 1;

/// `d.dddde+XX` scientific formatting with the given significant digits.
pub fn sci(x: f64, sig_digits: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let digits = sig_digits.max(1) - 1;
    let raw = format!("{:.*e}", digits, x);
    // pad the exponent to at least two digits with an explicit sign
    let (mant, exp) = raw.split_once('e').expect("exponent in {:e} output");
    let (sign, abs) = match exp.strip_prefix('-') {
        Some(a) => ('-', a),
        None => ('+', exp),
    };
    format!("{mant}e{sign}{abs:0>2}")
}

fn status_str(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::BudgetExhausted => "budget-exhausted",
        SolveStatus::Stalled => "stalled",
        SolveStatus::Failed => "failed",
    }
}

fn reason_str(r: SwitchReason) -> &'static str {
    match r {
        SwitchReason::None => "none",
        SwitchReason::FillTooLarge => "fill-too-large",
        SwitchReason::RetractionFailed => "retraction-failed",
        SwitchReason::Degenerate => "degenerate",
    }
}

/// Solver configuration echoed into the report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConfigEcho {
    pub tol: f64,
    pub max_iters: usize,
    pub max_time_secs: f64,
    pub precond: String,
    pub stage: String,
    pub seed: u64,
    pub verbose: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SwitchEventReport {
    pub at_iter: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub stage: String,
    pub fval: String,
    pub pfeas: String,
    pub dfeas: String,
    pub comp: String,
    pub max_kkt: String,
    pub inner_iters: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultReport {
    pub schema: u32,
    pub status: String,
    pub fval: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dfval: Option<String>,
    pub iters: usize,
    pub ttime_secs: f64,
    pub pfeas: String,
    pub dfeas: String,
    pub comp: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pdgap: Option<String>,
    pub max_kkt: String,
    pub num_chol: usize,
    pub num_cg_iter: usize,
    pub singular: bool,
    pub min_pivot: String,
    pub switch_events: Vec<SwitchEventReport>,
    pub config: ConfigEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceRow>>,
}

impl ResultReport {
    pub fn from_history(hist: &RunHistory, config: ConfigEcho, with_trace: bool) -> Self {
        ResultReport {
            schema: REPORT_SCHEMA,
            status: status_str(hist.status).to_string(),
            fval: sci(hist.fval, 8),
            dfval: hist.dfval.map(|v| sci(v, 8)),
            iters: hist.iter,
            ttime_secs: hist.ttime,
            pfeas: sci(hist.kkt.pfeas, 2),
            dfeas: sci(hist.kkt.dfeas, 2),
            comp: sci(hist.kkt.comp, 2),
            pdgap: hist.kkt.pdgap.map(|v| sci(v, 2)),
            max_kkt: sci(hist.kkt.max_kkt, 2),
            num_chol: hist.num_chol,
            num_cg_iter: hist.num_cg_iter,
            singular: hist.singular,
            min_pivot: sci(hist.min_pivot, 2),
            switch_events: hist
                .switch_events
                .iter()
                .map(|e| SwitchEventReport {
                    at_iter: e.at_iter,
                    reason: reason_str(e.reason).to_string(),
                })
                .collect(),
            config,
            trace: with_trace.then(|| {
                hist.trace
                    .iter()
                    .map(|r| TraceRow {
                        iter: r.iter,
                        stage: match r.stage {
                            StageKind::Feasible => "feasible".into(),
                            StageKind::Palm => "palm".into(),
                        },
                        fval: sci(r.fval, 8),
                        pfeas: sci(r.pfeas, 2),
                        dfeas: sci(r.dfeas, 2),
                        comp: sci(r.comp, 2),
                        max_kkt: sci(r.max_kkt, 2),
                        inner_iters: r.inner_iters,
                        rank: r.max_rank,
                    })
                    .collect()
            }),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("bad report: {e}")))
    }

    /// CLI exit code for this outcome.
    pub fn exit_code(&self) -> i32 {
        match self.status.as_str() {
            "converged" => 0,
            "budget-exhausted" | "stalled" => 2,
            _ => 1,
        }
    }
}

/// Report for the dense reference solver, with full-precision values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OracleReport {
    pub schema: u32,
    pub fval: String,
    pub pfeas: String,
    pub dfeas: String,
    pub comp: String,
    pub max_kkt: String,
    pub tol: f64,
}

impl OracleReport {
    pub fn new(sol: &crate::oracle::DenseSolution, tol: f64) -> Self {
        OracleReport {
            schema: REPORT_SCHEMA,
            // 17 significant digits: enough to reproduce the f64 exactly
            fval: sci(sol.fval, 17),
            pfeas: sci(sol.certified_kkt.pfeas, 2),
            dfeas: sci(sol.certified_kkt.dfeas, 2),
            comp: sci(sol.certified_kkt.comp, 2),
            max_kkt: sci(sol.certified_kkt.max_kkt, 2),
            tol,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scientific_formatting_matches_table_style() {
        assert_eq!(sci(-2.2360679774997896, 8), "-2.2360680e+00");
        assert_eq!(sci(4.67e-7, 2), "4.7e-07");
        assert_eq!(sci(-3.4899975e2, 8), "-3.4899975e+02");
        assert_eq!(sci(0.0, 2), "0.0e+00");
        assert_eq!(sci(2.3e1, 2), "2.3e+01");
        assert_eq!(sci(f64::INFINITY, 2), "inf");
    }

    #[test]
    fn seventeen_digit_values_round_trip_exactly() {
        for &x in &[
            -2.2360679774997896_f64,
            1.0 / 3.0,
            6.02e23,
            -1.7976931348623157e308,
        ] {
            let s = sci(x, 17);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn report_round_trip_is_byte_identical() {
        let cfg = ConfigEcho {
            tol: 1e-6,
            max_iters: 50_000,
            max_time_secs: 3600.0,
            precond: "auto".into(),
            stage: "auto".into(),
            seed: 0,
            verbose: false,
        };
        let report = ResultReport {
            schema: REPORT_SCHEMA,
            status: "converged".into(),
            fval: sci(-2.2360679774997896, 8),
            dfval: Some(sci(-2.23606797, 8)),
            iters: 12,
            ttime_secs: 0.125,
            pfeas: sci(4.67e-7, 2),
            dfeas: sci(9.59e-7, 2),
            comp: sci(2.36e-9, 2),
            pdgap: Some(sci(1.1e-9, 2)),
            max_kkt: sci(9.59e-7, 2),
            num_chol: 12,
            num_cg_iter: 1840,
            singular: false,
            min_pivot: sci(3.2e-4, 2),
            switch_events: vec![SwitchEventReport {
                at_iter: 4,
                reason: "degenerate".into(),
            }],
            config: cfg,
            trace: None,
        };
        let one = report.to_json();
        let parsed = ResultReport::from_json(&one).unwrap();
        let two = parsed.to_json();
        assert_eq!(one, two);
        assert_eq!(parsed, report);
    }
}

use serde::Serialize;

use super::Method;
use crate::error::{Error, Result};

/// Operation counts for a selection run.
///
/// `T_t` training tasks, `T_e` evaluation tasks, `k` instructions per task,
/// `n` data samples per instruction. Instruction-based selection encodes
/// `(T_t + T_e)·k` texts and scores `T_t·T_e·k²` pairs; sample-based
/// selection multiplies those by `n` and `n²`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub method: Method,
    #[serde(rename = "T_t")]
    pub t_t: u64,
    #[serde(rename = "T_e")]
    pub t_e: u64,
    pub k: u64,
    pub n: u64,
    pub encode_ops: u128,
    pub sim_ops: u128,
}

pub fn cost_report(method: Method, t_t: u64, t_e: u64, k: u64, n: u64) -> Result<CostReport> {
    if t_t == 0 || t_e == 0 || k == 0 || n == 0 {
        return Err(Error::Config("cost model inputs must be positive".into()));
    }
    let (tt, te, k2, n2) = (t_t as u128, t_e as u128, k as u128, n as u128);
    let (encode_ops, sim_ops) = match method {
        Method::Insta | Method::InstaAligned => ((tt + te) * k2, tt * te * k2 * k2),
        Method::Dsta => ((tt + te) * k2 * n2, tt * te * k2 * k2 * n2 * n2),
        Method::Random => (0, 0),
    };
    Ok(CostReport {
        method,
        t_t,
        t_e,
        k,
        n,
        encode_ops,
        sim_ops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostComparison {
    pub insta: CostReport,
    pub dsta: CostReport,
    /// dsta / insta encode operations (equals `n`).
    pub encode_ratio: f64,
    /// dsta / insta similarity operations (equals `n²`).
    pub sim_ratio: f64,
}

impl CostComparison {
    pub fn new(t_t: u64, t_e: u64, k: u64, n: u64) -> Result<Self> {
        let insta = cost_report(Method::Insta, t_t, t_e, k, n)?;
        let dsta = cost_report(Method::Dsta, t_t, t_e, k, n)?;
        Ok(CostComparison {
            encode_ratio: dsta.encode_ops as f64 / insta.encode_ops as f64,
            sim_ratio: dsta.sim_ops as f64 / insta.sim_ops as f64,
            insta,
            dsta,
        })
    }
}

//! Per-round CSV traces with a `#`-prefixed header block.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::engine::RoundRecord;
use crate::error::{Error, Result};

pub const COLUMNS: &str =
    "round,beta,E_err_rel,sq_param_err,grad_norm,zeta_sum_norm,max_gap,total_local_iters";

/// One trace row; missing values are NaN and written as `nan`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub beta: f64,
    pub energy_err: f64,
    pub sq_param_err: f64,
    pub grad_norm: f64,
    pub zeta_sum_norm: f64,
    pub max_gap: f64,
    pub total_local_iters: usize,
}

impl From<&RoundRecord> for TraceRow {
    fn from(r: &RoundRecord) -> Self {
        let (e, p, g) = r.errors.map_or((f64::NAN, f64::NAN, f64::NAN), |e| {
            (e.energy_err, e.sq_param_err, e.grad_norm)
        });
        TraceRow {
            round: r.round,
            beta: r.beta,
            energy_err: e,
            sq_param_err: p,
            grad_norm: g,
            zeta_sum_norm: r.zeta_sum_norm,
            max_gap: r.max_gap(),
            total_local_iters: r.total_local_iters(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// Header lines without the leading `#`.
    pub header: Vec<String>,
    pub rows: Vec<TraceRow>,
}

fn real(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.16e}")
    }
}

impl Trace {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            let _ = writeln!(s, "# {h}");
        }
        let _ = writeln!(s, "{COLUMNS}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.round,
                real(r.beta),
                real(r.energy_err),
                real(r.sq_param_err),
                real(r.grad_norm),
                real(r.zeta_sum_norm),
                real(r.max_gap),
                r.total_local_iters
            );
        }
        s
    }
}

pub fn emit_trace(trace: &Trace, path: &Path) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(trace.render().as_bytes())?;
        f.flush()
    };
    write().map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

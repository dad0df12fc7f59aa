use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, HarnessError};
use crate::perfmodel::{
    bandwidth_budget, latency_csv, latency_text, llm_latency, max_inference_rate, overhead_csv,
    overhead_table, overhead_text, reference_scenarios,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TableFiles {
    pub table3: PathBuf,
    pub table4: PathBuf,
    /// Both tables formatted for a terminal.
    pub text: String,
}

/// Writes `table3.csv` (LLM latency per scenario) and `table4.csv`
/// (mixnet overhead) into `out_dir`.
pub fn emit_tables(out_dir: &Path, mu: f64, delta: f64, echoes: u32) -> Result<TableFiles, HarnessError> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(HarnessError::Config(format!("mu: must be > 0, got {mu}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(HarnessError::Config(format!("delta: must be > 0, got {delta}")));
    }
    let scenarios = reference_scenarios();
    let rows = overhead_table(&scenarios, mu, delta, echoes);
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let table3 = out_dir.join("table3.csv");
    let table4 = out_dir.join("table4.csv");
    fs::write(&table3, latency_csv(&scenarios)).map_err(io_err(&table3))?;
    fs::write(&table4, overhead_csv(&rows)).map_err(io_err(&table4))?;
    Ok(TableFiles {
        table3,
        table4,
        text: format!("{}\n{}", latency_text(&scenarios), overhead_text(&rows)),
    })
}

/// Compares the reference tables and bandwidth figures against the
/// published values. Returns one `(name, passed)` pair per check.
pub fn check_tables() -> Vec<(String, bool)> {
    let scenarios = reference_scenarios();
    let want_llm = [3.85, 19.41, 38.59, 10.34];
    let llm_ok = scenarios
        .iter()
        .zip(want_llm)
        .all(|(s, w)| (llm_latency(s) - w).abs() <= 0.01);
    let rows = overhead_table(&scenarios, 0.2, 0.2, 5);
    let want = [(4.00, 13.00, 69), (19.60, 28.60, 31), (38.60, 47.60, 19), (10.40, 19.40, 46)];
    let table4_ok = rows.iter().zip(want).all(|(r, (rounded, total, pct))| {
        (r.t_llm_rounded - rounded).abs() < 1e-9 && (r.total - total).abs() < 1e-9 && r.mix_pct == pct
    });
    let gb = bandwidth_budget(2.5, 31_000.0, 86_400.0) / 1e9;
    let bw_ok = (6.69..=6.70).contains(&gb) && max_inference_rate(2.5, 3, 86_400.0) == 72_000;
    vec![
        ("llm latency".into(), llm_ok),
        ("overhead table".into(), table4_ok),
        ("bandwidth".into(), bw_ok),
    ]
}

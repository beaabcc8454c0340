//! CSV emission for the three report table shapes: method comparison with
//! ablations, template study and threshold study.

use std::io::Write;

use crate::error::Result;
use crate::harness::eval::EvalReport;

fn write_rows<W: Write>(out: W, key: &str, rows: &[(String, &EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([key, "acc", "spe", "sens", "auc", "cost", "auc_cost_ratio"])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{:.1}", r.acc),
            format!("{:.1}", r.spe),
            format!("{:.1}", r.sens),
            format!("{:.1}", r.auc),
            format!("{:.2}", r.cost),
            format!("{:.2}", r.ratio),
        ])?;
    }
    w.flush().map_err(|e| crate::error::Error::io("<csv>", e))?;
    Ok(())
}

/// Method / ablation rows.
pub fn write_method_table<W: Write>(out: W, rows: &[(String, EvalReport)]) -> Result<()> {
    let rows: Vec<(String, &EvalReport)> = rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    write_rows(out, "method", &rows)
}

/// One row per textualization template id.
pub fn write_template_table<W: Write>(out: W, rows: &[(u8, EvalReport)]) -> Result<()> {
    let rows: Vec<(String, &EvalReport)> = rows.iter().map(|(t, r)| (t.to_string(), r)).collect();
    write_rows(out, "template", &rows)
}

/// One row per confidence threshold.
pub fn write_threshold_table<W: Write>(out: W, rows: &[EvalReport]) -> Result<()> {
    let rows: Vec<(String, &EvalReport)> = rows.iter().map(|r| (format!("{}", r.thresholds[0]), r)).collect();
    write_rows(out, "theta", &rows)
}

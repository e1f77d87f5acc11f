//! Per-step pretraining metrics and their CSV form.

use crate::train::StepReport;

pub const METRICS_HEADER: &str = "step,loss_total,loss_clam_v,loss_clam_t,loss_gs,masking_objective_pre,\
masking_objective_post,mask_entropy_v,mask_entropy_t,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_clam_v: f64,
    pub loss_clam_t: f64,
    pub loss_gs: f64,
    pub masking_objective_pre: f64,
    pub masking_objective_post: f64,
    pub mask_entropy_v: f64,
    pub mask_entropy_t: f64,
    /// Step wall time; 0 unless wall-time recording is enabled.
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn from_report(r: &StepReport, wall_ms: f64) -> Self {
        Self {
            step: r.step,
            loss_total: r.loss.total,
            loss_clam_v: r.loss.l_clam_v,
            loss_clam_t: r.loss.l_clam_t,
            loss_gs: r.loss.l_gs,
            masking_objective_pre: r.masking_pre,
            masking_objective_post: r.masking_post,
            mask_entropy_v: r.entropy_v,
            mask_entropy_t: r.entropy_t,
            wall_ms,
        }
    }

    /// One CSV line without the trailing newline. Floats use the shortest
    /// representation that round-trips.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_clam_v,
            self.loss_clam_t,
            self.loss_gs,
            self.masking_objective_pre,
            self.masking_objective_post,
            self.mask_entropy_v,
            self.mask_entropy_t,
            self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let v = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            step: f[0].parse().ok()?,
            loss_total: v(1)?,
            loss_clam_v: v(2)?,
            loss_clam_t: v(3)?,
            loss_gs: v(4)?,
            masking_objective_pre: v(5)?,
            masking_objective_post: v(6)?,
            mask_entropy_v: v(7)?,
            mask_entropy_t: v(8)?,
            wall_ms: v(9)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        [
            self.loss_total,
            self.loss_clam_v,
            self.loss_clam_t,
            self.loss_gs,
            self.masking_objective_pre,
            self.masking_objective_post,
            self.mask_entropy_v,
            self.mask_entropy_t,
            self.wall_ms,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Header plus one line per row.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

use serde::Serialize;

use super::{block_bandwidth, ncr_discrete, plan_blocks, BlockFlowError};
use crate::modelir::{intrinsic_complexity, CountMode, ModelIR};

pub const CSV_HEADER: &str = "model,x_i,D,NCR,NBR,GB/s,KOP/pixel";

/// One row of the `analyze` table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeRow {
    pub model: String,
    pub x_i: usize,
    pub depth: usize,
    pub ncr: f64,
    pub nbr: f64,
    pub gb_per_s: f64,
    pub kop_per_pixel: f64,
}

impl AnalyzeRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.3}",
            self.model, self.x_i, self.depth, self.ncr, self.nbr, self.gb_per_s, self.kop_per_pixel
        )
    }
}

/// Block-flow summary of a model at a frame size and rate. `bytes_per_pixel`
/// applies to model-input and model-output pixels (3 for RGB).
pub fn analyze_row(
    m: &ModelIR,
    frame: (usize, usize),
    fps: f64,
    x_i: usize,
    bytes_per_pixel: f64,
) -> Result<AnalyzeRow, BlockFlowError> {
    let plan = plan_blocks(m, frame, x_i)?;
    // the host unshuffle packs 4 pixels per program-domain pixel
    let pack = if plan.input_unshuffled { 4.0 } else { 1.0 };
    let bw = block_bandwidth(&plan, fps, bytes_per_pixel * pack, bytes_per_pixel);
    let ncr = ncr_discrete(m, x_i)?;
    let kop = intrinsic_complexity(m, CountMode::Hardware).intrinsic_kop_per_pixel * ncr;
    Ok(AnalyzeRow {
        model: m.name(),
        x_i,
        depth: m.depth(),
        ncr,
        nbr: bw.nbr,
        gb_per_s: bw.gb_per_s,
        kop_per_pixel: kop,
    })
}

//! Decoding, matching, average precision, true-positive errors, the
//! detection score and range-binned evaluation.

mod decode;
mod matching;
mod metrics;

pub use decode::{decode_detections, encode_targets};
pub use matching::{match_detections, score_order, Match, MatchResult};
pub use metrics::{
    aligned_iou_3d, ap_from_ranked, ap_from_scored, average_precision, distance_binned_eval, nds,
    tp_errors, yaw_error, BinReport, ClassMetrics, EvalAccumulator, Evaluator, MetricsReport,
    Summary, TpErrors, DISTANCE_BINS, DISTANCE_THRESHOLDS, TP_THRESHOLD,
};

use serde::{Deserialize, Serialize};

use crate::dataio::Sequence;
use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::network::Model;
use crate::numerics::{FlushDenormals, ForwardCtx, Mode, ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Divide translation errors by the ground truth's range.
    pub range_normalized_ate: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            score_threshold: 0.05,
            nms_iou: 0.5,
            range_normalized_ate: false,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(
                "score_threshold and nms_iou must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Detections for the core frame of `seq`, starting from an empty state.
pub fn detect<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    seq: &Sequence,
    opts: &EvalOptions,
) -> Result<Vec<RotatedBox>> {
    let _ftz = FlushDenormals::new();
    let mut ctx = ForwardCtx::new(Mode::Infer);
    let (head, _) = model.forward_sequence(store, seq, None, &mut ctx)?;
    Ok(decode_detections(
        &head,
        &model.cfg.grid,
        opts.score_threshold,
        opts.nms_iou,
    ))
}

/// Runs the model over every sequence and scores the core-frame detections
/// against the annotations, overall and per range bin.
pub fn evaluate_model<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    data: &[Sequence],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    opts.validate()?;
    let mut ev = Evaluator::new(&DISTANCE_BINS, opts.range_normalized_ate);
    for seq in data {
        let dets = detect(model, store, seq, opts)?;
        ev.add_frame(&dets, &seq.annotations);
    }
    Ok(ev.report())
}

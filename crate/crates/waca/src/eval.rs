//! Contest-protocol evaluation: normalize with the checkpoint's stats,
//! optionally resample to the model's working resolution, run inference,
//! resample the prediction back to the case's native resolution, and score
//! it (MAE in millivolts, hotspot F1). Wall-clock runtime of the inference
//! path is recorded per case.

use std::time::Instant;

use waca_core::augment::apply_zscore;
use waca_core::backbone::unet_forward;
use waca_core::metrics::{f1, hotspot_mask, mae, mean_and_pop_std, HotspotConfig};
use waca_core::pdn::CaseBundle;
use waca_core::{Tape, Tensor};

use crate::checkpoint::ModelCheckpoint;
use crate::error::WacaError;
use crate::lanczos;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub case_id: String,
    pub mae_mv: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSummary {
    pub mean_mae_mv: f64,
    pub mean_f1: f64,
    pub f1_std: f64,
    pub mean_runtime_s: f64,
    pub tp: u64,
    pub fp: u64,
    pub fneg: u64,
}

/// Runs the full inference path for one case and returns the prediction at
/// the case's native resolution.
pub fn predict_case(
    ck: &ModelCheckpoint,
    case: &CaseBundle,
    model_res: Option<usize>,
) -> Result<Tensor, WacaError> {
    let cfg = &ck.model.config;
    if case.features.shape()[0] != cfg.in_channels {
        return Err(WacaError::Data(format!(
            "case has {} feature channels but the checkpoint expects {}",
            case.features.shape()[0],
            cfg.in_channels
        )));
    }
    let (h, w) = (case.meta.h, case.meta.w);
    let mut features = apply_zscore(&case.features, &ck.norm_stats).map_err(WacaError::Data)?;
    let div = cfg.spatial_divisor();
    let run_res = match model_res {
        Some(r) => {
            if r % div != 0 {
                return Err(WacaError::Config(format!(
                    "model resolution {r} is not divisible by the spatial divisor {div}"
                )));
            }
            Some((r, r))
        }
        None => {
            if h % div != 0 || w % div != 0 {
                return Err(WacaError::Data(format!(
                    "native resolution {h}x{w} is not divisible by {div}; pass a model resolution"
                )));
            }
            None
        }
    };
    if let Some((rh, rw)) = run_res {
        if (rh, rw) != (h, w) {
            features = lanczos::resize(&features, rh, rw)?;
        }
    }

    let mut tape = Tape::new();
    let shape = [&[1], features.shape()].concat();
    let x = tape.leaf(
        Tensor::from_vec(&shape, features.data().to_vec())
            .map_err(|e| WacaError::Data(e.to_string()))?,
    );
    let mv = ck.model.bind(&mut tape);
    let y = unet_forward(&mut tape, x, &mv).map_err(|e| WacaError::Data(e.to_string()))?;
    let y_shape = tape.shape(y).to_vec();
    let pred = Tensor::from_vec(&y_shape[1..], tape.values(y).to_vec())
        .map_err(|e| WacaError::Data(e.to_string()))?;
    if pred.shape()[1] != h || pred.shape()[2] != w {
        return lanczos::resize(&pred, h, w);
    }
    Ok(pred)
}

pub fn evaluate_case(
    ck: &ModelCheckpoint,
    case_id: &str,
    case: &CaseBundle,
    hc: HotspotConfig,
    model_res: Option<usize>,
) -> Result<(EvalReport, Tensor), WacaError> {
    let start = Instant::now();
    let pred = predict_case(ck, case, model_res)?;
    let runtime_s = start.elapsed().as_secs_f64();
    let mae_mv = mae(&pred, &case.target).map_err(|e| WacaError::Data(e.to_string()))?;
    let pm = hotspot_mask(&pred, hc);
    let tm = hotspot_mask(&case.target, hc);
    let (score, tp, fp, fneg) = f1(&pm, &tm).map_err(|e| WacaError::Data(e.to_string()))?;
    Ok((
        EvalReport { case_id: case_id.to_string(), mae_mv, f1: score, tp, fp, fneg, runtime_s },
        pred,
    ))
}

pub fn summarize(reports: &[EvalReport]) -> SuiteSummary {
    assert!(!reports.is_empty(), "empty report set");
    let n = reports.len() as f64;
    let f1s: Vec<f64> = reports.iter().map(|r| r.f1).collect();
    let (mean_f1, f1_std) = mean_and_pop_std(&f1s);
    SuiteSummary {
        mean_mae_mv: reports.iter().map(|r| r.mae_mv).sum::<f64>() / n,
        mean_f1,
        f1_std,
        mean_runtime_s: reports.iter().map(|r| r.runtime_s).sum::<f64>() / n,
        tp: reports.iter().map(|r| r.tp).sum(),
        fp: reports.iter().map(|r| r.fp).sum(),
        fneg: reports.iter().map(|r| r.fneg).sum(),
    }
}

pub fn evaluate_suite(
    ck: &ModelCheckpoint,
    cases: &[(String, CaseBundle)],
    hc: HotspotConfig,
    model_res: Option<usize>,
) -> Result<(Vec<EvalReport>, SuiteSummary), WacaError> {
    if cases.is_empty() {
        return Err(WacaError::Data("evaluation set is empty".into()));
    }
    let mut reports = Vec::with_capacity(cases.len());
    for (id, case) in cases {
        let (report, _) = evaluate_case(ck, id, case, hc, model_res)?;
        reports.push(report);
    }
    let summary = summarize(&reports);
    Ok((reports, summary))
}

/// Report CSV: per-case rows, one trailing aggregate row (mean MAE/F1/
/// runtime, summed counts), and comment lines for provenance.
pub fn render_report(reports: &[EvalReport], summary: &SuiteSummary, hardware: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!("# hardware: {hardware}\n"));
    out.push_str("case,mae_mv,f1,tp,fp,fn,runtime_s\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.case_id, r.mae_mv, r.f1, r.tp, r.fp, r.fneg, r.runtime_s
        ));
    }
    out.push_str(&format!(
        "aggregate,{},{},{},{},{},{}\n",
        summary.mean_mae_mv, summary.mean_f1, summary.tp, summary.fp, summary.fneg,
        summary.mean_runtime_s
    ));
    out.push_str(&format!("# f1_std: {}\n", summary.f1_std));
    out
}

/// Scatter data for external plotting: one `target,pred` row per pixel.
pub fn render_scatter(pred: &Tensor, target: &Tensor) -> String {
    let mut out = String::from("target_mv,pred_mv\n");
    for (t, p) in target.data().iter().zip(pred.data()) {
        out.push_str(&format!("{t},{p}\n"));
    }
    out
}

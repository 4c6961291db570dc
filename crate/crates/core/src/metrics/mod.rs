//! SSIM, FID and the F²BT tournament, plus the test-split evaluation driver.

mod eval;
mod f2bt;
mod fid;
mod ssim;

pub use eval::{
    complete_outfit, eval_mask, eval_silhouettes, evaluate_run, feature_network, load_models, score_table, tournament, CollocationPredictor,
    EvalOptions, MetricReport, OracleSynthesizer, Predictor, RunEvaluation, SettingResult, Synthesizer,
};
pub use f2bt::{f2bt, ScoreTable};
pub use fid::{feature_stats, fid, FeatureStats};
pub use ssim::{ssim, ssim_planes, SsimParts};

//! Metrics and experiment harnesses.

pub mod desk;
mod harness;
mod metrics;
pub mod report;
mod selection;

pub use harness::{
    run_ai_detection_eval, run_information_hiding_eval, BerRow, DetectionOptions, Embedded, EvalReport, Extracted,
    HidingOptions, ModelWatermarker, QualityMetric, SweepPoint, UtteranceRates, Watermarker,
};
pub use metrics::{aligned_ber, ber, bps, rtf, snr, snr_db, spectral_distance, RunningMean, SNR_CAP_DB};
pub use selection::{best_of_prefixes, candidate_seed, select_positions_best_of_n, BestOfN};

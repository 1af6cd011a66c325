// SPDX-License-Identifier: MIT OR Apache-2.0

//! The experiment chain: behavioral characterization, layer drift,
//! falsification, boundary analysis and patching.

mod behavioral;
mod boundary;
mod campaign;
mod config;
mod drift;
mod falsify;
mod patching;
mod report;
mod run;

pub use behavioral::{
    aggregate, run_behavioral, run_pair, run_pairs, top_kl_prompts, write_behavioral, BehavioralReport, ConditionSummary,
    RunKey, RunPairReport, Stability, StabilityRow, CONDITIONS_HEADER,
};
pub use boundary::{
    boundary_from_pairs, run_boundary_analysis, synthetic_campaign, write_boundary, BoundaryReport, PartialCorrelation,
};
pub use campaign::{load_runs, write_csv, CampaignDir, CONFIG_FILE, METRICS_DIR, PARTIAL_FILE, RUNS_FILE, STATS_DIR};
pub use config::{
    BoundaryParams, CampaignConfig, CorpusSpec, DecodeSpec, FalsifyParams, LayerDriftParams, ModelSpec, PatchingParams,
    StatsParams, Toggles,
};
pub use drift::{
    example_drift, gqa_ablation, layer_drift_rows, run_layer_drift, step1_records, write_layer_drift, ExampleDrift,
    GqaAblation, LayerDriftReport, LayerDriftRow, LAYER_DRIFT_HEADER, MIN_RANK_TEST_N,
};
pub use falsify::{
    flatness_ratio, flip_kl_correlation, kv_projection_gap, kv_projection_gap_from_inputs, run_falsification,
    write_falsify, FalsifyReport, FlipRateRow, KvGap, PropagationCurve,
};
pub use patching::{run_patching, self_patch, write_patching, PatchMode, PatchOutcome, PatchingReport, PATCHING_HEADER};
pub use report::{run_report, TABLE_BEHAVIORAL, TABLE_BOUNDARY, TABLE_PRECISION};
pub use run::{run_experiment, EXPERIMENTS};

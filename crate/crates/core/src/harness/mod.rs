//! Campaign harness: configuration, execution over model pools, metric
//! aggregation, report persistence, and plot rendering.

mod campaign;
mod config;
mod records;
mod render;

pub use campaign::{
    run_campaign, score_sample, BuiltHead, Campaign, PreparedModel, SweepReport,
};
pub use config::{
    AttackConfig, CampaignConfig, DiConfig, Fraction, HeadConfig, HeadScheme, ModelConfig,
    OutputConfig, PoolConfig, TaskConfig, TiConfig, CONFIG_SCHEMA_VERSION,
};
pub use records::{
    read_report, snapshot_digest, verify_report, write_report, MetricRow, Provenance,
    ReportBundle, ScoreRecord, Scope, ThresholdRow, REPORT_SCHEMA_VERSION,
};
pub use render::{render_adv_grid, render_histograms};

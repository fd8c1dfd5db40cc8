//! Probes for external covariate shift, weight-norm spread across devices
//! and the scale-invariance identities of normalized layers.

pub mod props;
pub mod shift;
pub mod trace;

pub use props::{run_property_suite, PropertyOutcome};
pub use shift::{
    channel_stats, external_shift_report, toy_shift_experiment, ShiftReport, ToyShiftConfig, ToyShiftOutcome,
};
pub use trace::{weight_norm_trace, NormTrace};

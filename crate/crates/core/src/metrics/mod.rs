//! Evaluation suite: ROUGE-L, top-1 agreement, uncertainty, exposure-bias
//! error, and uncertainty-bucketed difficulty analysis.

mod agreement;
mod buckets;
mod cases;
mod exposure;
mod report;
mod rouge;

pub use agreement::{logit_std, sentence_agreements, top1_agreement, unc};
pub use cases::{dump_token_cases, write_token_cases, TokenCase};
pub use buckets::{assign_buckets, bucketed_analysis, BucketSpec, BucketStats};
pub use exposure::{exaccerr_percent, exposure_metrics, BigramLm, ExposureReport, EXPOSURE_GUARD};
pub use report::{evaluate, EvalConfig, MetricReport};
pub use rouge::{lcs_len, rouge_l, RougeScore};

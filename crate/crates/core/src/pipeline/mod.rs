//! Synthetic scenes, simulated LIDAR, CSS predictors and the autolabeling
//! loop with curriculum gating and verification.

mod css;
mod curriculum;
mod label;
mod lidar;
mod run;
mod scene;

pub use css::{
    oracle_css, write_predictions, CssPrediction, CssPredictor, FilePredictor, OracleConfig, OracleCss, OracleNoise,
    PredictContext, PREDICTIONS_SCHEMA,
};
pub use curriculum::{box_iou, classify_difficulty, CurriculumConfig, Difficulty};
pub use label::{
    derive_cuboid, verify, Autolabel, DerivedCuboid, LabelPool, Verification, VerificationConfig, LABEL_POOL_SCHEMA,
};
pub use lidar::{trace_lidar, LidarConfig};
pub use run::{
    label_instance, loop_stage, run_autolabel, run_loop, write_records, AutolabelConfig, AutolabelRun, InstanceLabel,
    InstanceRecord, LoopOutcome, Status,
};
pub use scene::{
    generate_dataset, generate_scene, Dataset, InstanceId, LabelMask, Scene, SceneConfig, SceneInstance, SCENE_SCHEMA,
};

/// SplitMix64 finalizer folded over `parts`; used to derive independent
/// per-item RNG seeds that do not depend on processing order.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

use aspire_core::data::{generate, SyntheticSpec};
use aspire_core::engine::RunConfig;
use aspire_core::lagrangian::Schedules;
use aspire_core::models::LabeledDataset;

/// Constant step sizes under which the protocol settles on the synthetic
/// tasks below within a few thousand iterations.
pub fn tuned_schedules() -> Schedules {
    Schedules { eta_w: 0.5, eta_z: 0.1, eta_h: 0.05, rho1: 1.0, rho2: 0.3, c1: 3e-4, c2: 1e-3, ..Schedules::default() }
}

pub fn tuned_config(seed: u64) -> RunConfig {
    RunConfig { seed, schedules: tuned_schedules(), stop_at_eps: false, metric_every: 250, ..RunConfig::default() }
}

/// Four workers with near-identical label mixes.
pub fn convex_task(seed: u64) -> Vec<LabeledDataset> {
    let spec = SyntheticSpec { alpha: 10.0, shift: 0.1, separation: 0.5, seed, ..SyntheticSpec::default() };
    generate(&spec).unwrap()
}

/// Four workers with skewed label mixes and shifted features.
pub fn heterogeneous_task(seed: u64) -> Vec<LabeledDataset> {
    let spec = SyntheticSpec { alpha: 0.1, shift: 0.5, separation: 0.5, seed, ..SyntheticSpec::default() };
    generate(&spec).unwrap()
}

use lifelong_depth::runner::{Method, RunConfig};

/// A benchmark small enough for integration tests: 2 domains per
/// distribution, 40 frames each, 24×32 images.
pub fn small_config(seed: u64, method: Method) -> RunConfig {
    RunConfig {
        seed,
        method,
        height: 24,
        width: 32,
        frames_per_domain: 40,
        domains_per_distribution: 2,
        eval_every: 20,
        checkpoint_every: 25,
        pretrain_epochs: 1,
        ..RunConfig::default()
    }
}

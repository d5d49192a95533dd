//! Fixtures shared by the benchmarks.

use moe_ecology::data::{generate, DatasetSpec, LabeledBatch};
use moe_ecology::model::{ModelDims, MoeModel, TierConfig};

/// A freshly initialized model and a test batch of `samples_per_class * 8` rows.
pub fn fixture(tier_sizes: &[usize], samples_per_class: usize) -> (MoeModel, LabeledBatch) {
    let spec = DatasetSpec {
        n_classes: 8,
        n_features: 16,
        samples_per_class,
        n_superclasses: 4,
        intra_spread: 1.0,
        inter_spread: 1.0,
        seed: 7,
    };
    let dims = ModelDims {
        n_features: 16,
        feature_dim: 64,
        router_hidden: 32,
        n_classes: 8,
    };
    let tiers = TierConfig::new(tier_sizes.to_vec()).expect("valid tiers");
    let model = MoeModel::init(tiers, dims, 7).expect("valid dims");
    (model, generate(&spec).expect("valid spec").train)
}

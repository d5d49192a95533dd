//! Central finite differences against the analytic gradient of `total_loss`.

use moe_ecology::data::LabeledBatch;
use moe_ecology::gradcheck::check_gradients;
use moe_ecology::hyperparams::HyperParams;
use moe_ecology::losses::OracleAssignment;
use moe_ecology::model::{ModelDims, MoeModel, TierConfig};
use moe_ecology::rng::{self, Purpose};
use rand::Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

fn batch(seed: u64) -> LabeledBatch {
    let mut r = rng::stream(seed + 1000, Purpose::Data);
    LabeledBatch {
        n_features: 3,
        n_classes: 3,
        features: (0..15).map(|_| r.random_range(-1.5..1.5)).collect(),
        labels: (0..5).map(|_| r.random_range(0..3)).collect(),
    }
}

fn settings() -> [(&'static str, HyperParams); 4] {
    let zero = HyperParams {
        entropy: 0.0,
        oracle: 0.0,
        balance: 0.0,
        ortho: 0.0,
        ..HyperParams::default()
    };
    let h = HyperParams {
        entropy: 0.3,
        ..zero
    };
    let hb = HyperParams { balance: 0.7, ..h };
    let all = HyperParams {
        oracle: 0.4,
        ortho: 0.25,
        ..hb
    };
    [("task", zero), ("+H", h), ("+B", hb), ("+O+ortho", all)]
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let dims = ModelDims {
        n_features: 3,
        feature_dim: 4,
        router_hidden: 4,
        n_classes: 3,
    };
    // Three classes over four experts: class 0 has two teachers.
    let assignment = OracleAssignment::round_robin(3, 4);
    for (label, hp) in settings() {
        for warmup in [false, true] {
            let mut total_checked = 0;
            for seed in 0..20 {
                let tiers = TierConfig::new(vec![2, 2]).unwrap();
                let mut model = MoeModel::init(tiers, dims, seed).unwrap();
                let t = 0.5 + (seed % 5) as f64 * 0.4;
                let rng = warmup.then(|| rng::stream(seed, Purpose::Routing));
                let r = check_gradients(
                    &mut model,
                    &batch(seed),
                    &hp,
                    t,
                    &assignment,
                    rng.as_ref(),
                    STEP,
                    ABS_FLOOR,
                )
                .unwrap();
                assert!(
                    r.passes(REL_TOL),
                    "{label} warmup={warmup} seed {seed}: rel err {:e} at {}",
                    r.max_rel_err,
                    r.worst
                );
                assert!(
                    r.skipped * 10 <= r.checked,
                    "too many skipped entries: {}",
                    r.skipped
                );
                total_checked += r.checked;
            }
            assert!(total_checked > 20 * 100);
        }
    }
}

use jrn_core::gradcheck::{check, GradCase};

const SEEDS: u64 = 20;
const TOLERANCE: f64 = 1e-3;

#[test]
fn every_case_matches_finite_differences() {
    for case in GradCase::ALL {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let r = check(case, seed).unwrap();
            assert!(r.coordinates > 0, "{case}: nothing checked");
            worst = worst.max(r.relative_error);
        }
        assert!(worst < TOLERANCE, "{case}: relative error {worst:.3e}");
    }
}

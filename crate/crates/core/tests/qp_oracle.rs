mod common;

use common::{enumerate_optimum, random_qp};
use proptest::prelude::*;
use scbf_core::qp::{qp_solve, qp_solve_warm, QpSettings, QpStatus, WarmStart};

#[test]
fn matches_enumeration_on_random_instances() {
    let settings = QpSettings::default();
    for seed in 0..300u64 {
        let k = 2 + (seed % 3) as usize;
        let m = 2 + (seed % 5) as usize;
        let prob = random_qp(seed, k, m, seed % 2 == 0);
        let sol = qp_solve(&prob, &settings).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "seed {seed}");
        let (f_star, _) = enumerate_optimum(&prob);
        assert!(
            (sol.objective - f_star).abs() <= 1e-6 * f_star.abs().max(1.0),
            "seed {seed}: {} vs {}",
            sol.objective,
            f_star
        );
        assert!(sol.kkt.max() <= 1e-8, "seed {seed}: {:?}", sol.kkt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warm_start_reaches_same_optimum(seed in 0u64..10_000, k in 2usize..5, m in 1usize..6) {
        let prob = random_qp(seed, k, m, true);
        let cold = qp_solve(&prob, &QpSettings::default()).unwrap();
        prop_assert_eq!(cold.status, QpStatus::Optimal);
        let warm = qp_solve_warm(&prob, &QpSettings::default(), &WarmStart::from(&cold)).unwrap();
        prop_assert_eq!(warm.status, QpStatus::Optimal);
        prop_assert!((warm.objective - cold.objective).abs() <= 1e-9 * cold.objective.abs().max(1.0));
    }

    #[test]
    fn optimal_solutions_are_feasible(seed in 0u64..10_000, k in 1usize..6, m in 0usize..8) {
        let prob = random_qp(seed, k, m, seed % 3 != 0);
        let sol = qp_solve(&prob, &QpSettings::default()).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(sol.kkt.primal <= 1e-8);
        prop_assert!(sol.kkt.dual <= 1e-8);
    }
}

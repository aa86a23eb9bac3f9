use fedlr_core::ajive::{ajive, sync_second_moments, AjiveConfig, InitialRanks};
use fedlr_core::tasks::{gen_ajive_validation, AjiveValidationConfig};
use fedlr_core::Matrix;
use proptest::prelude::*;

fn small_views(seed: u64, clients: usize) -> Vec<Matrix> {
    let cfg = AjiveValidationConfig {
        rows: 30,
        cols: 20,
        clients,
        shared_rank: 3,
        ..AjiveValidationConfig::default()
    };
    gen_ajive_validation(&cfg, seed).unwrap().views
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn parts_reassemble_every_view(seed in any::<u64>(), clients in 2usize..6) {
        let views = small_views(seed, clients);
        let mut config = AjiveConfig::new(InitialRanks::Auto { cap: 12 });
        config.joint_rank = Some(6);
        config.center = false;
        let r = ajive(&views, &config).unwrap();
        for (k, x) in views.iter().enumerate() {
            let sum = &(&r.joint[k] + &r.individual[k]) + &r.noise[k];
            prop_assert!((&sum - x).max_abs() <= 1e-9 * (1.0 + x.max_abs()));
        }
        let gram = r.joint_basis.tr_dot(&r.joint_basis);
        prop_assert!((&gram - &Matrix::identity(r.joint_rank)).max_abs() < 1e-10);
    }

    #[test]
    fn sync_ignores_client_order(seed in any::<u64>(), shift in 1usize..4) {
        let views = small_views(seed, 4);
        let weights = [0.1, 0.2, 0.3, 0.4];
        let mut rotated = views.clone();
        rotated.rotate_left(shift);
        let mut rotated_weights = weights;
        rotated_weights.rotate_left(shift);
        let a = sync_second_moments(&views, 6, &weights).unwrap();
        let b = sync_second_moments(&rotated, 6, &rotated_weights).unwrap();
        prop_assert!((&a - &b).max_abs() <= 1e-8 * (1.0 + a.max_abs()));
        prop_assert!(a.min_entry() >= 0.0);
    }
}

#[test]
fn more_clients_estimate_the_shared_moment_better() {
    let cfg = |clients| AjiveValidationConfig {
        clients,
        ..AjiveValidationConfig::default()
    };
    let mean_error = |clients: usize| {
        (0..4)
            .map(|seed| {
                let data = gen_ajive_validation(&cfg(clients), seed).unwrap();
                let w = vec![1.0 / clients as f64; clients];
                let synced = sync_second_moments(&data.views, 15, &w).unwrap();
                (&synced - &data.v_star).frobenius_norm() / data.v_star.frobenius_norm()
            })
            .sum::<f64>()
            / 4.0
    };
    assert!(mean_error(30) < mean_error(5));
}

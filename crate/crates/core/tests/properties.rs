use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qrp_core::design::{build_idealised_map, condition_number, DisplacementSet};
use qrp_core::dynamics::{sample_observable, ReadoutErrorModel};
use qrp_core::fock::{displacement, fidelity, ginibre_state, DensityMatrix, ParamVector};
use qrp_core::learn::{map_mse, ridge_fit, TrainingEntry, TrainingSet};
use qrp_core::linalg::{c, min_eigenvalue, CMatrix};
use qrp_core::reconstruct::project_to_physical;

fn state(dim: usize, seed: u64) -> DensityMatrix {
    ginibre_state(dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parameters_round_trip(dim in 2usize..7, seed in any::<u64>()) {
        let rho = state(dim, seed);
        let y = ParamVector::of_state(&rho).unwrap();
        prop_assert_eq!(y.values().len(), dim * dim - 1);
        prop_assert!((y.to_matrix() - rho.matrix()).norm() < 1e-12);
    }

    #[test]
    fn fidelity_is_symmetric_and_bounded(dim in 2usize..6, a in any::<u64>(), b in any::<u64>()) {
        let (r, s) = (state(dim, a), state(dim, b));
        let f = fidelity(&r, &s).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-9).contains(&f));
        prop_assert!((f - fidelity(&s, &r).unwrap()).abs() < 1e-8);
        prop_assert!((fidelity(&r, &r).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn displacement_inverse(re in -2.0f64..2.0, im in -2.0f64..2.0) {
        let dim = 6;
        let pad = 40;
        let fwd = displacement(c(re, im), dim + pad, 0);
        let back = displacement(c(-re, -im), dim + pad, 0);
        let prod = back * fwd;
        let block = prod.view((0, 0), (dim, dim)).into_owned();
        prop_assert!((block - CMatrix::identity(dim, dim)).norm() < 1e-8);
    }

    #[test]
    fn projection_is_physical_and_idempotent(dim in 2usize..6, seed in any::<u64>(), noise in 0.0f64..0.5) {
        let rho = state(dim, seed);
        let other = state(dim, seed ^ 0x9e37);
        let raw = rho.matrix() + (other.matrix() - CMatrix::identity(dim, dim).unscale(dim as f64)).scale(noise * 3.0);
        let p = project_to_physical(&raw).unwrap();
        prop_assert!(min_eigenvalue(p.matrix()) >= -1e-12);
        prop_assert!((p.matrix().trace().re - 1.0).abs() < 1e-12);
        let again = project_to_physical(p.matrix()).unwrap();
        prop_assert!((again.matrix() - p.matrix()).norm() < 1e-10);
    }

    #[test]
    fn estimates_stay_in_range(x in -1.0f64..=1.0, shots in 1u64..5000, seed in any::<u64>()) {
        let r = sample_observable(x, shots, &ReadoutErrorModel::default(), seed).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r.x));
        prop_assert_eq!(r.shots, shots);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ridge_interpolates_exact_affine_data(dim in 2usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = DisplacementSet::random(dim, &mut rng).unwrap();
        let beta = build_idealised_map(&set, None).unwrap();
        let entries: Vec<TrainingEntry> = (0..dim * dim + 2)
            .map(|i| {
                let y = ParamVector::of_state(&ginibre_state(dim, &mut rng)).unwrap();
                TrainingEntry { id: format!("s{i}"), x: beta.predict(&y).unwrap(), y }
            })
            .collect();
        let fit = ridge_fit(&TrainingSet::new(dim, entries).unwrap(), 0.0).unwrap();
        prop_assert!(map_mse(&fit, &beta).unwrap() < 1e-18);
        prop_assert!(map_mse(&beta, &beta).unwrap() == 0.0);
    }

    #[test]
    fn condition_number_is_scale_invariant(dim in 2usize..4, seed in any::<u64>(), scale in 0.01f64..100.0) {
        let set = DisplacementSet::random(dim, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let m = build_idealised_map(&set, None).unwrap().m().clone();
        let k = condition_number(&m);
        prop_assert!(k >= 1.0);
        if k.is_finite() {
            prop_assert!((condition_number(&m.scale(scale)) / k - 1.0).abs() < 1e-9);
        }
    }
}

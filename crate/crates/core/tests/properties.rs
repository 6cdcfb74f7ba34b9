//! Randomized properties across modules.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use opfree::compression::{build_v_space, eta_power_compression, eta_power_cumulant};
use opfree::correspondence::PointedCorrespondence;
use opfree::cumulants::{cumulants_to_moments, moment_from_partitions, moments_to_cumulants};
use opfree::laws::{BLaw, Realization};
use opfree::linalg::{max_abs, op_norm, r, random_admissible_eta, random_complex, random_hermitian, random_unit_vector, Tolerances};

fn law(seed: u64, d: usize, s: usize, degree: usize) -> BLaw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corr = PointedCorrespondence::new(d, random_unit_vector(&mut rng, s)).unwrap();
    let x = random_hermitian(&mut rng, s * d);
    let x = &x * r(1.0 / op_norm(&x));
    BLaw::from_realization(Realization::new(corr, x, &Tolerances::default()).unwrap(), degree)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cumulants_round_trip(seed in any::<u64>(), d in 1usize..=2, s in 1usize..=3) {
        let mu = law(seed, d, s, 5);
        let kappa = moments_to_cumulants(&mu);
        let back = cumulants_to_moments(&kappa, mu.radius()).unwrap();
        prop_assert!(back.moments().max_diff(mu.moments(), 5) < 1e-12);
        // the partition sum agrees with the recursion
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let bs: Vec<_> = (0..3).map(|_| random_complex(&mut rng, d, d)).collect();
        let direct = mu.moments().eval(4, &bs).unwrap();
        let via = moment_from_partitions(kappa.seq(), &bs).unwrap();
        prop_assert!(max_abs(&(direct - via)) < 1e-12);
    }

    #[test]
    fn compression_matches_cumulants(seed in any::<u64>(), d in 1usize..=2) {
        let tol = Tolerances::default();
        let mu = law(seed, d, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let eta = random_admissible_eta(&mut rng, d, 1, 0.7);
        prop_assert!(build_v_space(&eta, &tol).is_ok());
        let a = eta_power_cumulant(&mu, &eta, 4, &tol).unwrap();
        let b = eta_power_compression(&mu, &eta, 4, 14, &tol).unwrap();
        prop_assert!(a.moments().max_rel_diff(b.moments(), 4) < 1e-9);
    }
}

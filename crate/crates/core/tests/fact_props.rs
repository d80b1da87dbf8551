use emshape::fact::{
    apply_increment, fit_tt_core, numerical_rank, reconstruct_delta, trainable_param_count,
    FactCores, FactIncrement, FactMode, SiteId, WeightSite,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn sites(n: usize) -> Vec<SiteId> {
    (0..n)
        .map(|i| SiteId::new(i / 2, if i % 2 == 0 { "q" } else { "v" }))
        .collect()
}

fn base(rng: &mut impl Rng, id: SiteId, d: usize) -> WeightSite {
    WeightSite::new(id, DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0))).unwrap()
}

/// Element-by-element sum over both rank indices (and the Tucker mode index).
fn dense_delta(inc: &FactIncrement, site: &SiteId) -> Vec<Vec<f64>> {
    let (d, r) = (inc.dim(), inc.rank());
    let core = |a: usize, b: usize| -> f64 {
        match &inc.cores {
            FactCores::TensorTrain { cores } => cores[site][(a, b)],
            FactCores::Tucker { core, selectors } => {
                let p = &selectors[site];
                (0..core.len()).map(|k| p[k] * core[k][(a, b)]).sum()
            }
        }
    };
    let mut out = vec![vec![0.0; d]; d];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for a in 0..r {
                for b in 0..r {
                    acc += inc.u[(i, a)] * core(a, b) * inc.v[(j, b)];
                }
            }
            *cell = inc.scale * acc;
        }
    }
    out
}

fn mode_strategy() -> impl Strategy<Value = FactMode> {
    prop_oneof![Just(FactMode::TensorTrain), Just(FactMode::Tucker)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruction_matches_dense_sum(
        seed in any::<u64>(), mode in mode_strategy(),
        d in 1usize..12, r in 1usize..6, rt in 1usize..4, n_sites in 1usize..5,
        scale in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = sites(n_sites);
        let inc = FactIncrement::random(&mut rng, mode, d, r, rt, &ids, scale).unwrap();
        for id in &ids {
            let w = base(&mut rng, id.clone(), d);
            let delta = reconstruct_delta(&inc, &w).unwrap();
            let dense = dense_delta(&inc, id);
            let applied = apply_increment(&inc, &w).unwrap();
            for i in 0..d {
                for j in 0..d {
                    prop_assert!((delta[(i, j)] - dense[i][j]).abs() <= TOL);
                    prop_assert!((applied[(i, j)] - w.weight[(i, j)] - dense[i][j]).abs() <= TOL);
                }
            }
            prop_assert!(numerical_rank(&delta, 1e-9) <= r.min(d));
        }
    }

    #[test]
    fn scale_enters_linearly(seed in any::<u64>(), mode in mode_strategy(), s in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = sites(3);
        let mut inc = FactIncrement::random(&mut rng, mode, 8, 3, 2, &ids, 1.0).unwrap();
        let w = base(&mut rng, ids[1].clone(), 8);
        let unit = reconstruct_delta(&inc, &w).unwrap();
        inc.scale = s;
        let scaled = reconstruct_delta(&inc, &w).unwrap();
        prop_assert!((scaled - unit * s).abs().max() <= TOL);
    }

    #[test]
    fn all_sites_share_the_factor_subspaces(seed in any::<u64>(), mode in mode_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = sites(4);
        let (d, r) = (10, 3);
        let inc = FactIncrement::random(&mut rng, mode, d, r, 2, &ids, 0.7).unwrap();
        // projectors onto span(U) and span(V)
        let pu = &inc.u * inc.u.clone().pseudo_inverse(1e-12).unwrap();
        let pv = &inc.v * inc.v.clone().pseudo_inverse(1e-12).unwrap();
        for id in &ids {
            let w = base(&mut rng, id.clone(), d);
            let delta = reconstruct_delta(&inc, &w).unwrap();
            prop_assert!((&pu * &delta - &delta).abs().max() <= TOL);
            prop_assert!((&delta * &pv - &delta).abs().max() <= TOL);
        }
    }

    #[test]
    fn counts_match_stored_scalars(
        seed in any::<u64>(), mode in mode_strategy(),
        d in 1usize..20, r in 1usize..6, rt in 1usize..5, n_sites in 1usize..7,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inc = FactIncrement::random(&mut rng, mode, d, r, rt, &sites(n_sites), 1.0).unwrap();
        let count = trainable_param_count(mode, n_sites, d, r, rt).unwrap();
        prop_assert_eq!(count.trainable, inc.stored_scalar_count() as u128);
        prop_assert_eq!(count.full, (n_sites * d * d) as u128);
    }
}

#[test]
fn full_rank_fit_recovers_any_delta() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in [1, 4, 9] {
        let ids = sites(2);
        let mut inc =
            FactIncrement::random(&mut rng, FactMode::TensorTrain, d, d, 1, &ids, 0.5).unwrap();
        let target = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let core = fit_tt_core(&inc.u, &inc.v, inc.scale, &target).unwrap();
        if let FactCores::TensorTrain { cores } = &mut inc.cores {
            cores.insert(ids[0].clone(), core);
        }
        let w = base(&mut rng, ids[0].clone(), d);
        let delta = reconstruct_delta(&inc, &w).unwrap();
        assert!((delta - &target).abs().max() <= TOL, "d = {d}");
    }
}

#[test]
fn unknown_site_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inc = FactIncrement::random(&mut rng, FactMode::Tucker, 4, 2, 2, &sites(1), 1.0).unwrap();
    let w = base(&mut rng, SiteId::new(9, "o"), 4);
    assert!(reconstruct_delta(&inc, &w).is_err());
}

use deud::association::{associate, rsrp, Policy};
use deud::interference::LinkSystem;
use deud::model::{Association, Direction, OverlapModel, OverlapScheme};
use deud::optimizer::{resplit_downlinks, solve, InitialPsd, PowerMode, SolveOptions};
use deud::pf::{pf_allocate, Split};
use deud::scenario::{generate, ScenarioConfig};
use deud::sif::{normalized_fixed_point, yates_iteration, FnNorm, FnSif, MaxNorm, SifMap};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn small_config() -> impl Strategy<Value = ScenarioConfig> {
    (1usize..=2, 0usize..=3, 2usize..=10)
        .prop_map(|(cols, picos, ues)| ScenarioConfig::new(1, cols, picos, ues))
}

/// Positive affine map `x ↦ Mx + c`.
fn affine() -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>)> {
    (2usize..=5).prop_flat_map(|k| {
        (
            prop::collection::vec(0.0..0.2f64, k * k),
            prop::collection::vec(0.01..1.0f64, k),
        )
            .prop_map(move |(m, c)| (DMatrix::from_vec(k, k, m), DVector::from_vec(c)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_fixed_point_hits_the_level((m, c) in affine(), theta in 0.1..10.0f64) {
        let k = c.len();
        let f = FnSif::new(k, |x: &DVector<f64>| &m * x + &c);
        let r = normalized_fixed_point(&f, &MaxNorm(k), theta, &DVector::from_element(k, 1.0), 1e-12, 10_000);
        prop_assert!(r.converged);
        let x = &r.x_star;
        prop_assert!((x.max() - theta).abs() < 1e-9 * theta);
        let rho = r.eigenvalue.unwrap();
        let gap = (x - rho * f.eval(x)).amax();
        prop_assert!(gap < 1e-8 * theta, "x - ρf(x) = {gap}");
    }

    #[test]
    fn yates_reaches_the_affine_solution((m, c) in affine()) {
        let k = c.len();
        let f = FnSif::new(k, |x: &DVector<f64>| &m * x + &c);
        let r = yates_iteration(&f, &DVector::zeros(k), 1e-13, 10_000);
        prop_assert!(r.converged);
        let exact = (DMatrix::identity(k, k) - &m).lu().solve(&c).unwrap();
        prop_assert!((&r.x_star - exact).amax() < 1e-10);
    }

    #[test]
    fn normalized_fixed_point_respects_a_weighted_norm((m, c) in affine(), seed in 0.5..2.0f64) {
        let k = c.len();
        let weights = DVector::from_fn(k, |i, _| seed + i as f64);
        let f = FnSif::new(k, |x: &DVector<f64>| &m * x + &c);
        let g = FnNorm::new(k, |x: &DVector<f64>| x.component_div(&weights).max());
        let r = normalized_fixed_point(&f, &g, 1.0, &DVector::from_element(k, 1.0), 1e-12, 10_000);
        prop_assert!(r.converged);
        prop_assert!((r.x_star.component_div(&weights).max() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn associations_follow_their_metrics(cfg in small_config(), seed in any::<u64>()) {
        let s = generate(&cfg, seed).unwrap();
        let power = rsrp(&s);
        let pl = &s.file().pathloss_db.bs_ue;
        let coud = associate(&Policy::Coud, &s);
        let deud_p = associate(&Policy::DeudP, &s);
        for u in 0..s.ue_count() {
            let b = coud.serving_dl()[u];
            prop_assert!((0..s.bs_count()).all(|n| power[(n, u)] <= power[(b, u)]));
            let b = deud_p.serving_ul()[u];
            prop_assert!((0..s.bs_count()).all(|n| pl[n][u] >= pl[b][u]));
        }
        prop_assert_eq!(deud_p.serving_dl(), coud.serving_dl());
        prop_assert_eq!(coud.serving_ul(), coud.serving_dl());
        prop_assert_eq!(&associate(&Policy::DeudO { offset_db: 0.0 }, &s), &coud);
        let gap = cfg.macro_power_dbm - cfg.pico_power_dbm;
        prop_assert_eq!(&associate(&Policy::DeudO { offset_db: gap }, &s), &deud_p);
    }

    #[test]
    fn overlap_only_removes_interference(
        cfg in small_config(),
        seed in any::<u64>(),
        loads in prop::collection::vec(0.0..=1.0f64, 10),
        specific in any::<bool>(),
    ) {
        let s = generate(&cfg, seed).unwrap();
        let a = associate(&Policy::DeudP, &s);
        let n = s.bs_count();
        let scheme = if specific { OverlapScheme::CellSpecific } else { OverlapScheme::CellPairwise };
        let model = OverlapModel::new(scheme, loads[..n].to_vec(), loads[5..5 + n].to_vec()).unwrap();
        let full = LinkSystem::new(&s, &a, &OverlapModel::none()).unwrap().0;
        let partial = LinkSystem::new(&s, &a, &model).unwrap().0;
        let (v, pv) = (&full.coupling.v_tilde, &partial.coupling.v_tilde);
        prop_assert!(pv.iter().zip(v.iter()).all(|(p, f)| *p >= 0.0 && *p <= *f));
        let dirs = [Direction::Ul, Direction::Dl];
        for &x in &dirs {
            for &y in &dirs {
                for i in 0..n {
                    for j in 0..n {
                        let (f, _) = model.factor(x, y, i, j);
                        prop_assert!((0.0..=1.0).contains(&f));
                    }
                }
            }
        }
    }

    #[test]
    fn generated_gains_are_positive_and_reciprocal(cfg in small_config(), seed in any::<u64>()) {
        let s = generate(&cfg, seed).unwrap();
        prop_assert!(s.h0().iter().all(|g| *g > 0.0 && g.is_finite()));
        prop_assert!(s.h1().iter().all(|g| *g > 0.0 && g.is_finite()));
        let h2 = s.h2();
        prop_assert!(h2.iter().all(|g| *g > 0.0 && g.is_finite()));
        prop_assert!((h2 - h2.transpose()).amax() == 0.0);
        prop_assert!(s.demands().iter().all(|d| *d > 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solutions_are_feasible_and_tight(cfg in small_config(), seed in any::<u64>(), cell in any::<bool>()) {
        let s = generate(&cfg, seed).unwrap();
        let sys = LinkSystem::new(&s, &associate(&Policy::DeudP, &s), &OverlapModel::none()).unwrap().0;
        let opts = SolveOptions {
            mode: if cell { PowerMode::CellSpecific } else { PowerMode::PerLink },
            ..Default::default()
        };
        let sol = solve(&sys, &opts).unwrap();
        let (w, p) = (&sol.allocation.w, &sol.allocation.p);
        prop_assert!(sol.lambda > 0.0);
        prop_assert!(sol.g1 <= 1.0 + 1e-6 && sol.g2 <= 1.0 + 1e-6);
        prop_assert!(sol.g1.max(sol.g2) >= 1.0 - 1e-6);
        prop_assert!((sys.utility(w, p) - sol.lambda).abs() <= 1e-6 * sol.lambda);
        prop_assert!(sol.trace.max_lambda_drop() <= 1e-12 * sol.lambda.max(1.0));
    }

    #[test]
    fn resplit_keeps_cell_loads(cfg in small_config(), seed in any::<u64>()) {
        let s = generate(&cfg, seed).unwrap();
        let sys = LinkSystem::new(&s, &associate(&Policy::Coud, &s), &OverlapModel::none()).unwrap().0;
        let pb = InitialPsd::default().per_transmitter(&sys);
        let p = sys.assoc.expand_transmitter_psd(&pb);
        let w = DVector::from_fn(sys.link_count(), |i, _| 0.01 + 0.003 * i as f64);
        let re = resplit_downlinks(&sys, &w, &p);
        let (ul0, dl0) = sys.assoc.cell_loads(&w);
        let (ul1, dl1) = sys.assoc.cell_loads(&re);
        prop_assert_eq!(ul0, ul1);
        prop_assert!(dl0.iter().zip(&dl1).all(|(a, b)| (a - b).abs() < 1e-12));
        prop_assert!((sys.g2(&re, &p) - sys.g2(&w, &p)).abs() < 1e-9 * sys.g2(&w, &p));
    }

    #[test]
    fn pf_respects_the_split_and_budgets(
        cfg in small_config(),
        seed in any::<u64>(),
        ul in 1usize..24,
        rounds in 1usize..4,
    ) {
        let s = generate(&cfg, seed).unwrap();
        let sys = LinkSystem::new(&s, &associate(&Policy::DeudP, &s), &OverlapModel::none()).unwrap().0;
        let split = Split { ul_rbs: ul, dl_rbs: 25 - ul };
        let pf = pf_allocate(&sys, split, &InitialPsd::default(), rounds).unwrap();
        let k = sys.ue_count();
        let assoc: &Association = &sys.assoc;
        for b in 0..sys.bs_count() {
            let ul_sum: usize = (0..k).filter(|&u| assoc.serving_ul()[u] == b).map(|u| pf.rbs[u]).sum();
            let dl_sum: usize = (0..k).filter(|&u| assoc.serving_dl()[u] == b).map(|u| pf.rbs[k + u]).sum();
            prop_assert!(ul_sum <= split.ul_rbs && dl_sum <= split.dl_rbs);
        }
        let w = &pf.allocation.w;
        prop_assert!(sys.g1(w) <= 1.0 + 1e-12);
        prop_assert!(sys.g2(w, &pf.allocation.p) <= 1.0 + 1e-9);
        prop_assert!(pf.lambda_ul >= 0.0 && pf.lambda_dl >= 0.0);
    }
}

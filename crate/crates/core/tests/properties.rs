//! Invariants checked over generated inputs.

use proptest::prelude::*;

use tcmc_core::driver::{run_program, PassKind, PipelineSpec, VerifyMode};
use tcmc_core::mathlib::{exp_approx, inv_sqrt_fast, tanh_approx};
use tcmc_core::oracles::{gen_random_program, output_coverage, RandomProgramSpec, SHAPES};
use tcmc_core::passes::threading::Distribution;
use tcmc_core::perf::{simulate, size_sweep, MachineConfig, Rung, TimingReport, SWEEP_SIZES};
use tcmc_core::shipped::KERNELS;

fn config_strategy() -> impl Strategy<Value = MachineConfig> {
    (0.5f64..64.0, 0.0f64..500.0, 0.0f64..4.0, 0.05f64..=1.0, 1usize..8, 0.0f64..5000.0, 0.0f64..2000.0, 1.0f64..4.0).prop_map(
        |(bw, lat, access, eff, ctx, spawn, barrier, spill)| MachineConfig {
            dma_bandwidth_bytes_per_cycle: bw,
            dma_latency_cycles: lat,
            access_cycles: access,
            vector_width_effect: eff,
            num_hvx_contexts: ctx,
            thread_spawn_cycles: spawn,
            barrier_cycles: barrier,
            spill_factor: spill,
            ..MachineConfig::default()
        },
    )
}

fn dist_strategy() -> impl Strategy<Value = Distribution> {
    prop_oneof![Just(Distribution::Block), (1usize..64).prop_map(Distribution::Cyclic)]
}

fn check_report(r: &TimingReport) {
    let parts = r.compute_cycles + r.transfer_cycles + r.overhead_cycles;
    let eps = 1e-9 * parts.max(1.0);
    assert!(r.total_cycles >= 0.0 && r.compute_cycles >= 0.0 && r.transfer_cycles >= 0.0 && r.overhead_cycles >= 0.0);
    assert!(r.total_cycles <= parts + eps, "{r}");
    assert!((r.overlapped_cycles - (parts - r.total_cycles).max(0.0)).abs() <= eps, "{r}");
    assert!((0.0..=1.0).contains(&r.memory_fraction), "{r}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn random_programs_survive_every_pass(
        seed in any::<u64>(),
        len in 1usize..=5,
        shape in 0usize..SHAPES.len(),
        tcm in prop_oneof![Just(16usize << 10), Just(64 << 10), Just(8 << 20)],
        threads in 1usize..=6,
        dist in dist_strategy(),
        threshold in prop_oneof![Just(64usize), Just(4096)],
    ) {
        let program = gen_random_program(&RandomProgramSpec::new(seed, len, SHAPES[shape]));
        let mut spec = PipelineSpec { verify: VerifyMode::BitExact, ..PipelineSpec::default() };
        spec.options.tcm_bytes = tcm;
        spec.options.threading.threads = threads;
        spec.options.threading.dist = dist;
        spec.options.threading.threshold = threshold;
        let r = run_program(program, &spec, None).unwrap();
        for s in &r.stages {
            prop_assert!(s.check.as_ref().is_none_or(|c| c.passed()), "{}: {:?}", s.dump_name, s.check);
        }
        for c in output_coverage(r.final_program()).unwrap() {
            prop_assert!(c.exact(), "{c:?}");
        }
    }

    #[test]
    fn timing_reports_are_consistent(
        seed in any::<u64>(),
        cfg in config_strategy(),
        db in any::<bool>(),
        threads in 1usize..=6,
    ) {
        let program = gen_random_program(&RandomProgramSpec::from_seed(seed));
        let mut passes = vec![PassKind::Fuse, PassKind::Tile, PassKind::Vectorize, PassKind::Mt, PassKind::Async];
        if db {
            passes.push(PassKind::Db);
        }
        let mut spec = PipelineSpec::new(passes);
        spec.options.threading.threads = threads;
        spec.options.threading.threshold = 64;
        let r = run_program(program, &spec, None).unwrap();
        let a = simulate(r.final_program(), &cfg).unwrap();
        check_report(&a);
        prop_assert_eq!(a, simulate(r.final_program(), &cfg).unwrap());
    }

    #[test]
    fn config_text_round_trips(cfg in config_strategy()) {
        prop_assert_eq!(cfg.to_string().parse::<MachineConfig>().unwrap(), cfg);
    }

    #[test]
    fn exp_approx_relative_error(x in -87.0f32..88.0) {
        let want = (x as f64).exp();
        let got = exp_approx(x) as f64;
        prop_assert!(((got - want) / want).abs() <= 1e-6, "exp({x}) = {got}, want {want}");
    }

    #[test]
    fn tanh_approx_is_odd_and_bounded(x in -20.0f32..20.0) {
        let t = tanh_approx(x);
        prop_assert!(t.abs() <= 1.0);
        prop_assert_eq!(tanh_approx(-x), -t);
        prop_assert!((t as f64 - (x as f64).tanh()).abs() <= 2e-6, "tanh({x}) = {t}");
    }

    #[test]
    fn inv_sqrt_error_shrinks_with_newton_steps(x in 1e-30f32..1e30) {
        let want = 1.0 / (x as f64).sqrt();
        let e1 = ((inv_sqrt_fast(x, 1).unwrap() as f64 - want) / want).abs();
        let e2 = ((inv_sqrt_fast(x, 2).unwrap() as f64 - want) / want).abs();
        prop_assert!(e1 <= 2e-3 && e2 <= 6e-6 && e2 <= e1, "{x}: {e1} {e2}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    /// A bigger problem never takes fewer cycles under the same pass set.
    #[test]
    fn cycles_grow_with_size(
        k in 0usize..KERNELS.len(),
        rung in prop::sample::select(vec!["scalar", "vec", "vec+db", "vec+mt", "vec+mt+db"]),
        i in 0usize..SWEEP_SIZES.len() - 1,
    ) {
        let sizes = [SWEEP_SIZES[i], SWEEP_SIZES[i + 1]];
        let rows = size_sweep(&KERNELS[k], &sizes, &[Rung::named(rung).unwrap()], &MachineConfig::default()).unwrap();
        prop_assert!(rows[0].report.total_cycles <= rows[1].report.total_cycles, "{}: {} {:?}", KERNELS[k].name, rung, rows.iter().map(|r| r.report.total_cycles).collect::<Vec<_>>());
    }
}

//! Acceptance criteria 1–9. Each test prints one `criterion N: PASS|FAIL`
//! line (run with `--nocapture` to see them) and fails when the criterion
//! does not hold. The tests take a shared lock so that each runtime budget
//! is measured without competing for the thread pool.

use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use fts_trend::baselines::{default_bandwidths, fit_kernel};
use fts_trend::evaluation::{
    ise_beta, ise_trend, median, run_benchmark, BenchmarkConfig, BenchmarkReport, EstimatorId,
    KernelRegression,
};
use fts_trend::forecast_pipeline::{compare_forecasts, fpca, PipelineConfig};
use fts_trend::fts_sim::{calibrate_c1, simulate_far1, simulate_scenario, FARProcessSpec, FarKernel, TrendSurfaceId};
use fts_trend::quadrature::linspace;
use fts_trend::series::rescaled_time;
use fts_trend::smoothing::{reml_select, Margin, MarginalProfile, RemlCriterion};
use fts_trend::{fit_trend, BSplineBasis, GridFunctionSeries};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn report(id: &str, pass: bool, elapsed: Duration, budget_secs: f64, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {id}: {verdict} ({:.1}s, budget {budget_secs}s) {detail}",
        elapsed.as_secs_f64()
    );
}

fn random_series(rng: &mut ChaCha8Rng, m: usize, n: usize) -> GridFunctionSeries {
    let values = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    GridFunctionSeries::on_grid_span(values, linspace(0.0, 1.0, m)).unwrap()
}

/// Normal equations assembled from the full `mN × k₁k₂` design matrix.
fn brute_force(data: &GridFunctionSeries, k1: usize, k2: usize, ls: f64, lt: f64) -> DVector<f64> {
    let (lo, hi) = data.s_domain();
    let bs = BSplineBasis::cubic(lo, hi, k1).unwrap();
    let bt = BSplineBasis::cubic(0.0, 1.0, k2).unwrap();
    let v = bs.evaluate(data.s_grid(), 0).unwrap();
    let z = bt.evaluate(data.t_grid(), 0).unwrap();
    let (m, n) = data.values().shape();
    let design = DMatrix::from_fn(m * n, k1 * k2, |row, col| {
        z[(row / m, col / k1)] * v[(row % m, col % k1)]
    });
    let ms = bs.gram_and_penalty().unwrap();
    let mt = bt.gram_and_penalty().unwrap();
    let penalty = DMatrix::from_fn(k1 * k2, k1 * k2, |r, c| {
        let (a, i) = (r / k1, r % k1);
        let (b, j) = (c / k1, c % k1);
        ls * mt.gram[(a, b)] * ms.penalty[(i, j)] + lt * mt.penalty[(a, b)] * ms.gram[(i, j)]
    });
    let y = DVector::from_column_slice(data.values().as_slice());
    let lhs = design.transpose() * &design + penalty;
    lhs.lu().solve(&(design.transpose() * y)).unwrap()
}

#[test]
fn criterion_1_structured_solve_matches_brute_force() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(8..=40);
        let n = rng.random_range(8..=40);
        let k1 = rng.random_range(4..=8);
        let k2 = rng.random_range(4..=8);
        let ls = rng.random_range(0.0..10.0);
        let lt = rng.random_range(0.0..10.0);
        let data = random_series(&mut rng, m, n);
        let fit = fit_trend(&data, k1, k2, ls, lt).unwrap();
        let got = DVector::from_column_slice(fit.theta().as_slice());
        let oracle = brute_force(&data, k1, k2, ls, lt);
        worst = worst.max((&got - &oracle).norm() / oracle.norm());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-8 && elapsed.as_secs_f64() < 10.0;
    report("1", pass, elapsed, 10.0, &format!("worst relative error {worst:.2e}"));
    assert!(pass);
}

fn max_second_difference(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_2_large_lambda_gives_linear_slices() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_s: f64 = 0.0;
    let mut worst_t: f64 = 0.0;
    for _ in 0..5 {
        let data = random_series(&mut rng, 25, 35);
        let stiff_s = fit_trend(&data, 10, 12, 1e10, 1.0).unwrap().fitted_values(&data).unwrap();
        let range = stiff_s.max() - stiff_s.min();
        for col in stiff_s.column_iter() {
            worst_s = worst_s.max(max_second_difference(col.iter().copied()) / range);
        }
        let stiff_t = fit_trend(&data, 10, 12, 1.0, 1e10).unwrap().fitted_values(&data).unwrap();
        let range = stiff_t.max() - stiff_t.min();
        for row in stiff_t.row_iter() {
            worst_t = worst_t.max(max_second_difference(row.iter().copied()) / range);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_s <= 1e-6 && worst_t <= 1e-6 && elapsed.as_secs_f64() < 5.0;
    report(
        "2",
        pass,
        elapsed,
        5.0,
        &format!("relative second differences: s {worst_s:.2e}, t {worst_t:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_exact_recovery_in_span() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let k1 = rng.random_range(4..=10);
        let k2 = rng.random_range(4..=12);
        let bs = BSplineBasis::cubic(0.0, 1.0, k1).unwrap();
        let bt = BSplineBasis::cubic(0.0, 1.0, k2).unwrap();
        let s = linspace(0.0, 1.0, 25);
        let t = rescaled_time(30);
        let truth = DMatrix::from_fn(k1, k2, |_, _| rng.random_range(-5.0..5.0));
        let y = bs.evaluate(&s, 0).unwrap() * &truth * bt.evaluate(&t, 0).unwrap().transpose();
        let data = GridFunctionSeries::new(y, s, (0.0, 1.0)).unwrap();
        let fit = fit_trend(&data, k1, k2, 0.0, 0.0).unwrap();
        worst = worst.max((fit.theta() - &truth).norm() / truth.norm());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-8 && elapsed.as_secs_f64() < 5.0;
    report("3", pass, elapsed, 5.0, &format!("worst relative error {worst:.2e}"));
    assert!(pass);
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn criterion_4_simulation_study_ordering() {
    let _guard = serial();
    use EstimatorId::{Ker, Lin, Naiv, Tps};
    use TrendSurfaceId::*;
    let start = Instant::now();
    let cfg = BenchmarkConfig::default();
    let report_data: BenchmarkReport = run_benchmark(&cfg).unwrap();
    let elapsed = start.elapsed();
    let n = 300;
    let cell = |t, e| report_data.cell(t, e, n).expect("cell present");
    let mean_t = |t, e| cell(t, e).ise_t_mean;
    let mean_b = |t, e| cell(t, e).ise_beta_mean;

    println!("  mean ISE_T / ISE_beta over {} replications, N = {n}", cfg.replications);
    for t in TrendSurfaceId::ALL {
        let line: Vec<String> = [Tps, Lin, Naiv, Ker]
            .iter()
            .map(|&e| format!("{e} {:.4}/{:.4}", mean_t(t, e), mean_b(t, e)))
            .collect();
        println!("  {t}: {}", line.join(", "));
    }

    let mut ok_a = true;
    for t in [T3, T4, T5, T6] {
        let tps = mean_t(t, Tps);
        let pass = [Lin, Naiv, Ker].iter().all(|&e| tps < mean_t(t, e));
        println!("  4(a) {t}: {}", if pass { "holds" } else { "violated" });
        ok_a &= pass;
    }
    let mut ok_b = true;
    for t in [T1, T2] {
        let (tps, lin) = (mean_t(t, Tps), mean_t(t, Lin));
        let others = mean_t(t, Naiv).min(mean_t(t, Ker));
        let pass = lin <= tps && tps < others;
        println!("  4(b) {t}: {}", if pass { "holds" } else { "violated" });
        ok_b &= pass;
    }
    let (b1, b3) = (mean_b(T1, Tps), mean_b(T3, Tps));
    let ok_c = b1 <= 0.10 && b3 <= 0.15;
    println!("  4(c) ISE_beta(TPS): T1 {b1:.4} (<= 0.10), T3 {b3:.4} (<= 0.15)");
    let lin_b3 = mean_b(T3, Lin);
    let ok_d = lin_b3 >= 0.3;
    println!("  4(d) ISE_beta(Lin, T3) {lin_b3:.4} (>= 0.3)");

    let rows = report_data.rows.len();
    let failures = report_data.failures().count();
    println!("  rows {rows} (expected 2400), failed rows {failures}");
    let lin_tps_t1 = mean_b(T1, Lin) < mean_b(T1, Tps) && mean_b(T1, Tps) < 0.1;
    println!("  T1 ISE_beta: Lin < TPS < 0.1 {}", if lin_tps_t1 { "holds" } else { "violated" });
    let mut ts = Vec::new();
    let mut bs = Vec::new();
    for t in [T1, T2, T3, T4, T5] {
        for e in [Tps, Lin, Naiv, Ker] {
            ts.push(mean_t(t, e));
            bs.push(mean_b(t, e));
        }
    }
    let rho = spearman(&ts, &bs);
    println!("  Spearman(ISE_T, ISE_beta) over T1-T5 cells: {rho:.3} (>= 0.7)");

    let pass = ok_a && ok_b && ok_c && ok_d && rows == 2400 && elapsed.as_secs_f64() < 1800.0;
    report(
        "4",
        pass,
        elapsed,
        1800.0,
        &format!("(a) {ok_a}, (b) {ok_b}, (c) {ok_c}, (d) {ok_d}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_consistency_in_n() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = BenchmarkConfig {
        trends: vec![TrendSurfaceId::T5],
        estimators: vec![EstimatorId::Tps],
        n_values: vec![100, 300, 500],
        ..BenchmarkConfig::default()
    };
    let rep = run_benchmark(&cfg).unwrap();
    let medians: Vec<f64> = cfg
        .n_values
        .iter()
        .map(|&n| rep.cell(TrendSurfaceId::T5, EstimatorId::Tps, n).unwrap().ise_t_median)
        .collect();
    let elapsed = start.elapsed();
    let pass = medians[0] > medians[1] && medians[1] > medians[2] && elapsed.as_secs_f64() < 2700.0;
    report(
        "5",
        pass,
        elapsed,
        2700.0,
        &format!(
            "median ISE_T(TPS, T5) at N = 100/300/500: {:.4} / {:.4} / {:.4}",
            medians[0], medians[1], medians[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_reml_close_to_truth_oracle() {
    let _guard = serial();
    let start = Instant::now();
    let basis = BSplineBasis::cubic(0.0, 1.0, 20).unwrap();
    let x = linspace(0.0, 1.0, 200);
    let truth: Vec<f64> = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin()).collect();
    let design = basis.evaluate(&x, 0).unwrap();
    let results: Vec<(f64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.3).unwrap();
            let y: Vec<f64> = truth.iter().map(|t| t + noise.sample(&mut rng)).collect();
            let profile = MarginalProfile {
                responses: y,
                locations: x.clone(),
                which: Margin::S,
            };
            let crit = RemlCriterion::new(&profile, &basis).unwrap();
            let mse = |lambda: f64| {
                let fitted = &design * crit.coefficients(lambda).unwrap();
                fitted.iter().zip(&truth).map(|(f, t)| (f - t).powi(2)).sum::<f64>() / truth.len() as f64
            };
            let chosen = mse(reml_select(&profile, &basis).unwrap().lambda);
            let best = (0..=480)
                .map(|i| mse((-12.0 + 0.05 * i as f64).exp()))
                .fold(f64::INFINITY, f64::min);
            (chosen, best)
        })
        .collect();
    let within = results.iter().filter(|(c, b)| *c <= 1.2 * b).count();
    let elapsed = start.elapsed();
    let pass = within >= 45 && elapsed.as_secs_f64() < 120.0;
    let ratio = median(&results.iter().map(|(c, b)| c / b).collect::<Vec<_>>());
    report(
        "6",
        pass,
        elapsed,
        120.0,
        &format!("{within}/50 seeds within 20% of the oracle MSE (median ratio {ratio:.3})"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_trend_improves_forecasts() {
    let _guard = serial();
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let l1: Vec<(f64, f64)> = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let data = simulate_scenario(TrendSurfaceId::T3, &FARProcessSpec::new(seed), 300).unwrap();
            let cmp = compare_forecasts(&data, 4, &cfg).unwrap();
            (cmp.l1_with, cmp.l1_without)
        })
        .collect();
    let with = median(&l1.iter().map(|p| p.0).collect::<Vec<_>>());
    let without = median(&l1.iter().map(|p| p.1).collect::<Vec<_>>());
    let elapsed = start.elapsed();
    let pass = with < without && elapsed.as_secs_f64() < 1200.0;
    report(
        "7",
        pass,
        elapsed,
        1200.0,
        &format!("median summed L1: with trend {with:.4}, without {without:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_far_calibration() {
    let _guard = serial();
    let start = Instant::now();
    let spec = FARProcessSpec::new(0);
    let kernel = FarKernel::Gaussian;
    // 1000 x 1000 midpoint rule
    let k = 1000;
    let h = 1.0 / k as f64;
    let oracle: f64 = (0..k)
        .into_par_iter()
        .map(|i| {
            let u = (i as f64 + 0.5) * h;
            (0..k)
                .map(|j| kernel.eval(u, (j as f64 + 0.5) * h).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        * h
        * h;
    let norm = kernel.hilbert_schmidt_norm();
    let rel = (norm * norm - oracle).abs() / oracle;
    let c1 = calibrate_c1(&spec);
    let c1_err = (c1 - 0.7 / norm).abs();
    let elapsed = start.elapsed();
    let pass = rel <= 1e-6 && c1_err <= 1e-15 && spec.c1 == c1 && elapsed.as_secs_f64() < 1.0;
    report(
        "8",
        pass,
        elapsed,
        1.0,
        &format!("HS^2 relative error {rel:.2e}, C1 = {c1:.12}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_property_suites() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    for _ in 0..20 {
        let lo = rng.random_range(-5.0..5.0);
        let hi = lo + rng.random_range(0.5..10.0);
        let k = rng.random_range(4..=20);
        let basis = BSplineBasis::cubic(lo, hi, k).unwrap();
        let pts: Vec<f64> = (0..100).map(|_| rng.random_range(lo..=hi)).collect();
        let b = basis.evaluate(&pts, 0).unwrap();
        let unity = b.row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12);
        let nonneg = b.iter().all(|v| *v >= -1e-15);
        check("partition of unity", unity && nonneg);

        let mats = basis.gram_and_penalty().unwrap();
        let scale = mats.penalty.amax();
        let ones = DVector::from_element(k, 1.0);
        let lin = DVector::from_vec(basis.greville());
        let null_c = (mats.penalty.transpose() * &ones).amax() / scale;
        let null_l = (mats.penalty.transpose() * &lin).amax() / scale;
        check("penalty null space", null_c < 1e-10 && null_l < 1e-10);

        let knots = basis.knots();
        let rows_ok = (0..k).all(|i| {
            let integral = (knots[i + 4] - knots[i]) / 4.0;
            (mats.gram.row(i).sum() - integral).abs() < 1e-12 * (hi - lo)
        });
        let total_ok = (mats.gram.sum() - (hi - lo)).abs() < 1e-12 * (hi - lo);
        let band_ok = (0..k).all(|i| (0..k).all(|j| i.abs_diff(j) < 4 || mats.gram[(i, j)] == 0.0));
        let sym_ok = (&mats.gram - mats.gram.transpose()).amax() < 1e-14 * mats.gram.amax();
        check("Gram identities", rows_ok && total_ok && band_ok && sym_ok);
    }

    for seed in 0..5u64 {
        let x = simulate_far1(&FARProcessSpec::new(seed), 80).unwrap();
        let fit = fit_kernel(&x, &default_bandwidths(x.len())).unwrap();
        let surface = fit.eval_rescaled_grid(x.t_grid()).unwrap();
        let bounded = (0..x.num_points()).all(|i| {
            let row = x.values().row(i);
            let (mn, mx) = (row.min(), row.max());
            surface.row(i).iter().all(|v| *v >= mn - 1e-12 && *v <= mx + 1e-12)
        });
        check("kernel baseline convex combination", bounded);
    }

    let a = simulate_scenario(TrendSurfaceId::T4, &FARProcessSpec::new(5), 60).unwrap();
    let b = simulate_scenario(TrendSurfaceId::T4, &FARProcessSpec::new(5), 60).unwrap();
    check("simulation determinism", a == b);
    let small = BenchmarkConfig {
        trends: vec![TrendSurfaceId::T2],
        replications: 2,
        n_values: vec![80],
        kernel: KernelRegression::default(),
        ..BenchmarkConfig::default()
    };
    check(
        "benchmark determinism",
        run_benchmark(&small).unwrap() == run_benchmark(&small).unwrap(),
    );
    let pcfg = PipelineConfig::default();
    check(
        "forecast determinism",
        compare_forecasts(&a, 3, &pcfg).unwrap() == compare_forecasts(&b, 3, &pcfg).unwrap(),
    );

    let model = fpca(&a, 4).unwrap();
    let w = DMatrix::from_diagonal(&DVector::from_vec(model.weights.clone()));
    let gram = model.components.transpose() * w * &model.components;
    check("FPCA orthonormality", (gram - DMatrix::identity(4, 4)).amax() < 1e-8);

    let t1 = |s: f64, t: f64| TrendSurfaceId::T1.eval(s, t);
    let t3 = |s: f64, t: f64| TrendSurfaceId::T3.eval(s, t);
    let t5 = |s: f64, t: f64| TrendSurfaceId::T5.eval(s, t);
    let d13 = ise_trend(t1, t3, 101).sqrt();
    let d31 = ise_trend(t3, t1, 101).sqrt();
    let d15 = ise_trend(t1, t5, 101).sqrt();
    let d35 = ise_trend(t3, t5, 101).sqrt();
    check("ISE symmetry", (d13 - d31).abs() < 1e-12);
    check("ISE triangle inequality", d15 <= d13 + d35 + 1e-6);
    let kx = fts_trend::evaluation::fit_far_kernel_with(&a, &KernelRegression::default()).unwrap();
    check("ISE_beta self distance", ise_beta(&kx, &kx, 101).unwrap() == 0.0);

    let elapsed = start.elapsed();
    failures.sort();
    failures.dedup();
    let pass = failures.is_empty() && elapsed.as_secs_f64() < 120.0;
    let detail = if failures.is_empty() {
        "all property checks hold".to_string()
    } else {
        format!("failed: {}", failures.join(", "))
    };
    report("9", pass, elapsed, 120.0, &detail);
    assert!(pass);
}

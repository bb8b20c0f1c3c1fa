//! End-to-end acceptance criteria. Each test writes one `PASS`/`FAIL` line
//! straight to stdout (bypassing the harness capture) before asserting.

use std::io::Write;
use std::time::{Duration, Instant};

use stackstep::experiments::{
    frozen_tdc_study, landscape_study, stationarity_study, three_arm_study, toy_rate_study, BenchmarkInstance, FrozenTdcConfig,
    LandscapeStudyConfig, StationarityConfig, ThreeArmConfig, ToyRateConfig,
};
use stackstep::gradcheck::{gradcheck_suite, GradcheckConfig};
use stackstep::numcore::{fd_grad_mat, Mat, Rng, Vector};
use stackstep::problems::{
    estimate_constants, toy_hessian, toy_phi, toy_phi_minimizer, Activation, ClassificationProblem, ConstraintSet,
    EstimateOptions, LayeredParams, MinibatchSample, Objective, RegressionProblem, SyntheticClassification, SyntheticRegression,
    ToyProblem, TOY_HI, TOY_LO,
};
use stackstep::stackelberg::{best_response, moreau_prox, phi, phi_subgrad, phi_woodbury};
use stackstep::tdc::{increments, MdpContext, TabularMdp, ValueFeatures};

fn report(n: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "acceptance {n:>2} {} {name} ({:.1}s): {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn finish(n: u32, name: &str, start: Instant, limit: Duration, pass: bool, detail: String) {
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let detail = if in_time { detail } else { format!("{detail}; over the {}s budget", limit.as_secs()) };
    report(n, name, pass && in_time, elapsed, &detail);
    assert!(pass && in_time, "criterion {n} ({name}): {detail}");
}

#[allow(clippy::too_many_arguments)]
fn regression(seed: u64, n: usize, m: usize, h: usize, lambda: f64, act: Activation, body: ConstraintSet, head: ConstraintSet) -> RegressionProblem {
    let gen = SyntheticRegression {
        n_samples: n,
        n_features: m,
        hidden: h,
        noise_std: 0.5,
        lambda,
    };
    let (d, _) = gen.generate(act, &mut Rng::new(seed)).unwrap();
    RegressionProblem::new(d, act, h, body, head).unwrap()
}

#[test]
fn c01_gradient_oracles() {
    let t = Instant::now();
    let r = gradcheck_suite(&GradcheckConfig::default()).unwrap();
    let worst = r.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let detail = format!(
        "{} checks x {} points, worst rel err {worst:.2e}, failing {:?}",
        r.checks.len(),
        r.config.points,
        r.failures()
    );
    finish(1, "gradient oracles vs central differences", t, Duration::from_secs(30), r.passed() && r.config.tol <= 1e-5, detail);
}

#[test]
fn c02_woodbury() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, lambda) in [0.01, 0.1, 1.0].into_iter().enumerate() {
        for seed in 0..17u64 {
            let act = if seed % 2 == 0 { Activation::Relu } else { Activation::Tanh };
            let p = regression(1000 * i as u64 + seed, 30, 5, 4, lambda, act, ConstraintSet::Free, ConstraintSet::Free);
            let body = Mat::new(5, 4, Rng::new(seed + 77).normals(20)).unwrap();
            let a = phi(&p, &body, 1e-12).unwrap();
            let b = phi_woodbury(&p.data, act, &body).unwrap();
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
            count += 1;
        }
    }
    finish(
        2,
        "Woodbury value equals the normal-equation value",
        t,
        Duration::from_secs(5),
        count >= 50 && worst <= 1e-9,
        format!("{count} instances, worst |diff|/max(1,|phi|) {worst:.2e}"),
    );
}

#[test]
fn c03_danskin() {
    let t = Instant::now();
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let p = regression(seed, 20, 4, 3, 0.3, Activation::Tanh, ConstraintSet::Free, ConstraintSet::Free);
        let body = Mat::new(4, 3, rng.normals(12)).unwrap();
        let g = phi_subgrad(&p, &body, 1e-12).unwrap();
        let fd = fd_grad_mat(|m: &Mat| phi(&p, m, 1e-12), &body, 1e-5).unwrap();
        worst = worst.max(g.frob_dist(&fd) / g.frob_norm().max(1.0));
    }
    finish(
        3,
        "Danskin gradient of the reduced objective",
        t,
        Duration::from_secs(60),
        worst <= 1e-4,
        format!("50 tanh points, worst rel err {worst:.2e}"),
    );
}

#[test]
fn c04_convexification() {
    let t = Instant::now();
    let h = toy_hessian(0.5, 0.5);
    let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
    let n = 10_000;
    let step = (TOY_HI - TOY_LO) / (n - 1) as f64;
    let vals: Vec<f64> = (0..n).map(|i| toy_phi(TOY_LO + step * i as f64).unwrap()).collect();
    let min_second = vals.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]) / (step * step)).fold(f64::INFINITY, f64::min);
    let det_ok = (det + 0.65).abs() <= 1e-12;
    let convex_ok = min_second >= 0.05 - 1e-6;
    finish(
        4,
        "toy instance: indefinite joint Hessian, strongly convex reduced objective",
        t,
        Duration::from_secs(1),
        det_ok && convex_ok,
        format!("det {det:.15}, min second difference {min_second:.6}"),
    );
}

#[test]
fn c05_toy_rate() {
    let t = Instant::now();
    let r = toy_rate_study(&ToyRateConfig::default()).unwrap();
    let s = r.fit.slope;
    finish(
        5,
        "toy rate slope of the seed-averaged squared error",
        t,
        Duration::from_secs(300),
        (-0.9..=-0.5).contains(&s) && r.config.seeds.len() == 20 && r.config.iters == 100_000,
        format!(
            "slope {s:.3} +/- {:.3} over k in [{}, {}], h = {}",
            r.fit.stderr, r.fit.k_first, r.fit.k_last, r.schedule.h
        ),
    );
}

#[test]
fn c06_stationarity_decay() {
    let t = Instant::now();
    let cfg = StationarityConfig::default();
    let r = stationarity_study(&cfg).unwrap();
    let monotone = r.rows.iter().all(|row| row.min_so_far.windows(2).all(|w| w[1] <= w[0]));
    let below = r.count_below(0.1);
    let ratios: Vec<String> = r.rows.iter().map(|row| format!("{:.1e}", row.ratio)).collect();
    let failures: usize = r.rows.iter().map(|row| row.prox_failures).sum();
    finish(
        6,
        "stationarity surrogate decays to 10% of its start",
        t,
        Duration::from_secs(600),
        monotone && below >= 8 && cfg.checkpoints == 100 && cfg.iters == 10_000,
        format!("{below}/10 seeds below 10%, ratios [{}], {failures} failed prox solves", ratios.join(", ")),
    );
}

#[test]
fn c07_three_arms() {
    let t = Instant::now();
    let r = three_arm_study(&ThreeArmConfig::default()).unwrap();
    let shared = r.rows.iter().all(|row| row.init_hash == BenchmarkInstance::new(row.seed).unwrap().init_hash());
    finish(
        7,
        "non-uniform rates against both uniform arms",
        t,
        Duration::from_secs(300),
        shared && r.nonuniform_beats_alpha >= 8 && r.beta_worse >= 6,
        format!(
            "non-uniform <= uniform-alpha in {}/10, uniform-beta worse in {}/10, shared init {shared}",
            r.nonuniform_beats_alpha, r.beta_worse
        ),
    );
}

#[test]
fn c08_landscape() {
    let t = Instant::now();
    let r = landscape_study(&LandscapeStudyConfig::default()).unwrap();
    let early_ok = r.early.iter().all(|e| e.sharper * 10 >= 7 * e.of);
    let counts: Vec<String> = r.early.iter().map(|e| format!("k={}: {}/{}", e.k, e.sharper, e.of)).collect();
    finish(
        8,
        "reduced objective sharper early, aligned at the end",
        t,
        Duration::from_secs(600),
        early_ok && r.final_gap <= 0.25,
        format!(
            "sharper [{}]; final lambda_max {:.1} vs {:.1} (gap {:.3})",
            counts.join(", "),
            r.final_lambda_stackelberg,
            r.final_lambda_joint,
            r.final_gap
        ),
    );
}

#[test]
fn c09_tdc_consistency() {
    let t = Instant::now();
    // (a) both MSPBE forms
    let mut worst_a: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = Rng::new(seed);
        let ns = 3 + (seed % 4) as usize;
        let mdp = TabularMdp::random(ns, 2, rng.uniform_in(0.3, 0.95), &mut rng).unwrap();
        let psi = Mat::new(ns, 3, rng.normals(3 * ns)).unwrap();
        let m = Mat::new(3, 2, rng.normals(6)).unwrap();
        let w = Vector::new(rng.normals(2)).unwrap();
        let ctx = MdpContext::new(mdp).unwrap();
        let feat = ValueFeatures::new(psi, Activation::Tanh, m, w).unwrap();
        let a = ctx.mspbe_projected(&feat).unwrap();
        let b = ctx.mspbe_bcb(&feat).unwrap();
        worst_a = worst_a.max((a - b).abs() / a.abs().max(1.0));
    }
    // (b) exhaustive expectations of the three increments
    let mut worst_b: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = Rng::new(500 + seed);
        let ns = 2 + (seed % 2) as usize;
        let mdp = TabularMdp::random(ns, 2, 0.8, &mut rng).unwrap();
        let psi = Mat::new(ns, 2, rng.normals(2 * ns)).unwrap();
        let m = Mat::new(2, 2, rng.normals(4)).unwrap();
        let feat = ValueFeatures::new(psi, Activation::Tanh, m, Vector::new(rng.normals(2)).unwrap()).unwrap();
        let mu = Vector::new(rng.normals(2)).unwrap();
        let ctx = MdpContext::new(mdp).unwrap();
        let mut em = Mat::zeros(2, 2);
        let mut ew = Vector::zeros(2);
        let mut emu = Vector::zeros(2);
        for s in 0..ns {
            for a in 0..2 {
                for s2 in 0..ns {
                    let p = ctx.transition_prob(s, a, s2);
                    let inc = increments(&ctx.mdp, &feat, &mu, s, a, s2).unwrap();
                    em.axpy(p, &inc.dm);
                    ew.axpy(p, &inc.dw);
                    emu.axpy(p, &inc.dmu);
                }
            }
        }
        let gm = ctx.grad_m(&feat, &mu).unwrap();
        let gw = ctx.grad_w(&feat, &mu).unwrap();
        let gmu = ctx.mu_residual(&feat, &mu).unwrap();
        worst_b = worst_b
            .max(em.frob_dist(&gm) / gm.frob_norm().max(1.0))
            .max(ew.dist(&gw) / gw.norm().max(1.0))
            .max(emu.dist(&gmu) / gmu.norm().max(1.0));
    }
    // (c) frozen body on the golden chain
    let frozen = frozen_tdc_study(&FrozenTdcConfig::default()).unwrap();
    let err_c = frozen.rows.iter().map(|r| r.error).fold(0.0, f64::max);
    finish(
        9,
        "TDC forms, increment expectations and frozen-body fixed point",
        t,
        Duration::from_secs(120),
        worst_a <= 1e-9 && worst_b <= 1e-12 && err_c < 1e-2,
        format!("(a) {worst_a:.2e} (b) {worst_b:.2e} (c) |w - w_TD| = {err_c:.2e}"),
    );
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

#[test]
fn c10_lemma_properties() {
    let t = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    // Best-response and reduced-objective Lipschitz ratios against the
    // estimated constants on the same compact sets.
    let p = regression(
        4,
        16,
        3,
        2,
        0.5,
        Activation::Tanh,
        ConstraintSet::FrobeniusBall { radius: 2.0 },
        ConstraintSet::FrobeniusBall { radius: 5.0 },
    );
    let mut rng = Rng::new(40);
    let c = estimate_constants(&p, &EstimateOptions::default(), &mut rng).unwrap();
    let (mut ratio_w, mut ratio_phi): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let a = Mat::new(3, 2, ConstraintSet::FrobeniusBall { radius: 2.0 }.sample(6, &mut rng).unwrap()).unwrap();
        let b = Mat::new(3, 2, ConstraintSet::FrobeniusBall { radius: 2.0 }.sample(6, &mut rng).unwrap()).unwrap();
        let d = a.frob_dist(&b);
        let wa = best_response(&p, &a, 1e-12).unwrap().w_star;
        let wb = best_response(&p, &b, 1e-12).unwrap().w_star;
        ratio_w = ratio_w.max(wa.dist(&wb) / d);
        ratio_phi = ratio_phi.max((phi(&p, &a, 1e-12).unwrap() - phi(&p, &b, 1e-12).unwrap()).abs() / d);
    }
    let w_ok = ratio_w <= c.l / c.lambda;
    let phi_ok = ratio_phi <= c.l_phi;
    ok &= w_ok && phi_ok;
    notes.push(format!("w* ratio {ratio_w:.2} <= {:.2}: {w_ok}", c.l / c.lambda));
    notes.push(format!("phi ratio {ratio_phi:.2} <= {:.2}: {phi_ok}", c.l_phi));

    // Envelope sandwich: exact minimizer on the toy, prox-point lower bound
    // on relu regression.
    let toy = ToyProblem::new(0.0).unwrap();
    let phi_star = toy_phi(toy_phi_minimizer()).unwrap();
    let mut sandwich = true;
    for i in 0..20 {
        let m = TOY_LO + (TOY_HI - TOY_LO) * i as f64 / 19.0;
        let probe = moreau_prox(&toy, &Mat::scalar(m), 1.0, 1e-10).unwrap();
        let pm = toy_phi(m).unwrap();
        sandwich &= phi_star <= probe.envelope_value + 1e-9 && probe.envelope_value <= pm + 1e-9;
    }
    let relu = regression(
        6,
        16,
        3,
        2,
        0.1,
        Activation::Relu,
        ConstraintSet::FrobeniusBall { radius: 10.0 },
        ConstraintSet::Free,
    );
    for i in 0..10u64 {
        let m = Mat::new(3, 2, Rng::new(60 + i).normals(6)).unwrap();
        let probe = moreau_prox(&relu, &m, 1e3, 1e-7).unwrap();
        let pm = phi(&relu, &m, 1e-12).unwrap();
        let at_hat = phi(&relu, &probe.m_hat, 1e-12).unwrap();
        sandwich &= at_hat <= probe.envelope_value + 1e-9 && probe.envelope_value <= pm + 1e-9;
    }
    ok &= sandwich;
    notes.push(format!("envelope sandwich {sandwich}"));

    // Projections never expand distances.
    let mut nonexp = true;
    for set in [
        ConstraintSet::Box { lo: -1.0, hi: 2.0 },
        ConstraintSet::FrobeniusBall { radius: 1.5 },
        ConstraintSet::Free,
    ] {
        for _ in 0..1000 {
            let a = Vector::new(rng.normals(6).iter().map(|v| 3.0 * v).collect()).unwrap();
            let b = Vector::new(rng.normals(6).iter().map(|v| 3.0 * v).collect()).unwrap();
            nonexp &= set.project_vec(&a).dist(&set.project_vec(&b)) <= a.dist(&b) * (1.0 + 1e-12);
        }
    }
    ok &= nonexp;
    notes.push(format!("projection non-expansive {nonexp}"));

    // Minibatch estimators average to the full gradient over every batch.
    let n = 7;
    let reg = regression(8, n, 3, 2, 0.2, Activation::Relu, ConstraintSet::Free, ConstraintSet::Free);
    let clf = {
        let gen = SyntheticClassification {
            n_samples: n,
            n_features: 3,
            hidden: 2,
            lambda: 0.2,
        };
        let (d, _) = gen.generate(Activation::Tanh, &mut Rng::new(9)).unwrap();
        ClassificationProblem::new(d, Activation::Tanh, 2, ConstraintSet::Free, ConstraintSet::Free).unwrap()
    };
    let at = LayeredParams::new(Mat::new(3, 2, rng.normals(6)).unwrap(), Vector::new(rng.normals(2)).unwrap()).unwrap();
    let mut worst: f64 = 0.0;
    for size in 1..=n {
        let batches = subsets(n, size);
        let count = batches.len() as f64;
        let (mut rm, mut rw) = (Mat::zeros(3, 2), Vector::zeros(2));
        let (mut cm, mut cw) = (Mat::zeros(3, 2), Vector::zeros(2));
        for b in batches {
            let batch = MinibatchSample::new(b, n).unwrap();
            let (gm, gw) = reg.data.stoch_grads(reg.act, &at, &batch).unwrap();
            rm.axpy(1.0 / count, &gm);
            rw.axpy(1.0 / count, &gw);
            let (gm, gw) = clf.data.stoch_grads(clf.act, &at, &batch).unwrap();
            cm.axpy(1.0 / count, &gm);
            cw.axpy(1.0 / count, &gw);
        }
        let fm = reg.subgrad_body(&at).unwrap();
        let fw = reg.grad_head(&at).unwrap();
        worst = worst.max(rm.frob_dist(&fm) / fm.frob_norm().max(1.0)).max(rw.dist(&fw) / fw.norm().max(1.0));
        let fm = clf.subgrad_body(&at).unwrap();
        let fw = clf.grad_head(&at).unwrap();
        worst = worst.max(cm.frob_dist(&fm) / fm.frob_norm().max(1.0)).max(cw.dist(&fw) / fw.norm().max(1.0));
    }
    let unbiased = worst <= 1e-12;
    ok &= unbiased;
    notes.push(format!("minibatch bias {worst:.1e}"));

    finish(10, "lemma-level properties", t, Duration::from_secs(60), ok, notes.join("; "));
}

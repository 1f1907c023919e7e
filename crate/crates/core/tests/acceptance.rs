//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use randmarkov::builders::build_jump_kernel;
use randmarkov::experiments::{
    fit_value, run_fig1, run_fig2, run_lemma_suite, run_rate, ExperimentConfig, ExperimentKind,
    ExperimentOutput, Verdict,
};
use randmarkov::metrics::{chernoff_bound, empirical_lower_tail};
use randmarkov::solvers::{pi_from_jump, DEFAULT_MAX_ITER, DEFAULT_TOL};
use randmarkov::{
    build_adjacency, build_generator, build_kernel, exit_rates, sample_edge_matrix,
    sample_vertex_weights, stationary_direct, stationary_generator, stationary_kernel_power,
    stationary_tree_oracle, GeneratorMethod, Matrix, MarkovMatrix, ProbabilityVector, RngStream,
    TreeMode, VertexWeightSpec, WeightLaw, WeightedDigraph,
};

/// Master seed used for the pilot that froze the trend thresholds.
const PILOT_SEED: u64 = 42;
/// Mean TV(π_P, u) and TV(π_Q̂, u) at n = 1600; pilot values were 0.0099 to
/// 0.0100 over seeds 1..=8 and 42.
const UNIFORM_TV_AT_1600: f64 = 0.02;
const RATE_SLOPE_MAX: f64 = -0.35;
const RATE_R2_MIN: f64 = 0.9;
const HEAVY_TAIL_RATIO: f64 = 0.5;

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn linf(a: &ProbabilityVector, b: &ProbabilityVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn exp1() -> WeightLaw {
    WeightLaw::exponential(1.0).unwrap()
}

fn draw(tag: &str, trial: u64, n: usize, theta: &VertexWeightSpec) -> WeightedDigraph {
    let s = RngStream::new(PILOT_SEED, tag, trial, n as u64);
    let x = sample_edge_matrix(&exp1(), n, &s.lane(0)).unwrap();
    let t = sample_vertex_weights(theta, n, &s.lane(1)).unwrap();
    build_adjacency(&t, x).unwrap()
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn means(out: &ExperimentOutput, panel: &str, metric: &str) -> Vec<f64> {
    out.panel(panel)
        .unwrap()
        .series(metric)
        .into_iter()
        .map(|(_, _, v)| v)
        .collect()
}

fn oracle_agreement<M: MarkovMatrix>(m: &M, power: ProbabilityVector) -> f64 {
    let direct = stationary_direct(m).unwrap().pi;
    let cof = stationary_tree_oracle(m, TreeMode::Cofactor).unwrap().pi;
    let enu = stationary_tree_oracle(m, TreeMode::Enumeration).unwrap().pi;
    let all = [power, direct, cof, enu];
    let mut worst = 0.0_f64;
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            worst = worst.max(linf(&all[i], &all[j]));
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let theta = VertexWeightSpec::Iid(exp1());
    let mut worst = 0.0_f64;
    for n in 2..=6 {
        for trial in 0..50 {
            let g = draw("acceptance/oracle", trial, n, &theta);
            let q = build_generator(&g);
            let via = stationary_generator(&q, GeneratorMethod::ViaJump).unwrap().pi;
            worst = worst.max(oracle_agreement(&q, via));
            let p = build_kernel(&g).unwrap();
            let pw = stationary_kernel_power(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().pi;
            worst = worst.max(oracle_agreement(&p, pw));
            let j = build_jump_kernel(&g).unwrap();
            let jw = stationary_kernel_power(&j, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().pi;
            worst = worst.max(oracle_agreement(&j, jw));
        }
    }
    Outcome {
        pass: worst <= 1e-9,
        detail: format!("max pairwise linf {worst:.3e} over Q, P, Q-hat (limit 1e-9)"),
    }
}

fn criterion_2() -> Outcome {
    let theta = VertexWeightSpec::Iid(exp1());
    let mut worst = 0.0_f64;
    for n in [10, 100] {
        for trial in 0..20 {
            let g = draw("acceptance/jump", trial, n, &theta);
            let jump = build_jump_kernel(&g).unwrap();
            let pj = stationary_kernel_power(&jump, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().pi;
            let via = pi_from_jump(&pj, &exit_rates(&g)).unwrap();
            let direct = stationary_direct(&build_generator(&g)).unwrap().pi;
            worst = worst.max(linf(&via, &direct));
        }
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("max linf {worst:.3e} (limit 1e-10)"),
    }
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0_f64;
    for n in [10, 500] {
        let s = RngStream::new(PILOT_SEED, "acceptance/eulerian", 0, n as u64);
        let x = sample_edge_matrix(&exp1(), n, &s).unwrap();
        let mut sym = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                sym[(i, j)] = if j >= i { x[(i, j)] } else { x[(j, i)] };
            }
        }
        let g = build_adjacency(&vec![1.0; n], sym).unwrap();
        let rows = g.row_sums();
        let expected = ProbabilityVector::from_weights(rows).unwrap();
        let p = build_kernel(&g).unwrap();
        let power = stationary_kernel_power(&p, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().pi;
        let direct = stationary_direct(&p).unwrap().pi;
        worst = worst.max(linf(&power, &expected)).max(linf(&direct, &expected));
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("max linf to normalized row sums {worst:.3e} (limit 1e-12)"),
    }
}

fn criterion_4() -> Outcome {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Rate);
    cfg.master_seed = PILOT_SEED;
    let out = run_rate(&cfg).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for metric in ["tv_piQ_nuq", "tv_piQ_nutheta"] {
        let v = means(&out, "curves", metric);
        let slope = fit_value(&out, &format!("slope:{metric}")).unwrap();
        let r2 = fit_value(&out, &format!("r2:{metric}")).unwrap();
        let ok = strictly_decreasing(&v) && slope <= RATE_SLOPE_MAX && r2 >= RATE_R2_MIN;
        pass &= ok;
        parts.push(format!("{metric}: slope {slope:.3} r2 {r2:.3} decreasing {}", strictly_decreasing(&v)));
    }
    Outcome {
        pass,
        detail: format!("{} (need slope <= {RATE_SLOPE_MAX}, r2 >= {RATE_R2_MIN})", parts.join("; ")),
    }
}

fn criterion_5() -> Outcome {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Fig2);
    cfg.master_seed = PILOT_SEED;
    cfg.alpha_grid = vec![1.0];
    let out = run_fig2(&cfg).unwrap();
    let p = means(&out, "b", "tv_piP_u");
    let h = means(&out, "b", "tv_piQhat_u");
    let q = means(&out, "b", "tv_piQ_u");
    let pass = strictly_decreasing(&p)
        && strictly_decreasing(&h)
        && strictly_decreasing(&q)
        && *p.last().unwrap() < UNIFORM_TV_AT_1600
        && *h.last().unwrap() < UNIFORM_TV_AT_1600;
    Outcome {
        pass,
        detail: format!(
            "at n=1600: piP {:.4}, piQhat {:.4}, piQ {:.4} (limit {UNIFORM_TV_AT_1600})",
            p.last().unwrap(),
            h.last().unwrap(),
            q.last().unwrap()
        ),
    }
}

fn criterion_6() -> Outcome {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Fig2);
    cfg.master_seed = PILOT_SEED;
    cfg.n_grid = vec![100];
    cfg.alpha_grid = vec![0.5, 1.0, 2.0, 4.0];
    let out = run_fig2(&cfg).unwrap();
    let v = means(&out, "c", "tv_piP_u");
    let ratio = v[3] / v[0];
    Outcome {
        pass: strictly_decreasing(&v) && ratio < HEAVY_TAIL_RATIO,
        detail: format!(
            "TV by alpha {:?}, ratio {ratio:.3} (limit {HEAVY_TAIL_RATIO})",
            v.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    }
}

fn criterion_7() -> Outcome {
    let law = exp1();
    let m = law.moments();
    let trials = 100_000;
    let mut pass = true;
    let mut worst_margin = f64::INFINITY;
    for n in [50, 100, 200] {
        for eps in [0.3, 0.5, 0.7] {
            let s = RngStream::new(PILOT_SEED, &format!("acceptance/tail/eps={eps}"), 0, n as u64);
            let freq = empirical_lower_tail(&law, n, eps, trials, &s).unwrap();
            let bound = chernoff_bound(m.mean, m.variance, n, eps).unwrap();
            let limit = bound + 3.0 * (bound / trials as f64).sqrt();
            pass &= freq <= limit;
            worst_margin = worst_margin.min(limit - freq);
        }
    }
    Outcome {
        pass,
        detail: format!("smallest margin limit - frequency {worst_margin:.3e} over 9 grid points"),
    }
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Lemmas);
    cfg.master_seed = PILOT_SEED;
    cfg.tail_n_grid = vec![50];
    cfg.tail_eps_grid = vec![0.5];
    cfg.tail_trials = 1000;
    let out = run_lemma_suite(&cfg).unwrap();
    let table = out.lemma_table.unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for lemma in [
        "row_l2_spread",
        "two_step_min_times_n",
        "jump_linf_gap_scaled",
        "centered_rowsum_over_n",
    ] {
        let rows = table.rows_for(lemma);
        let ok = !rows.is_empty() && rows.iter().all(|r| r.verdict == Verdict::Pass);
        pass &= ok;
        let stats: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.statistic)).collect();
        parts.push(format!("{lemma} [{}] {}", stats.join(" "), if ok { "ok" } else { "bad" }));
    }
    Outcome {
        pass,
        detail: parts.join("; "),
    }
}

fn strip_wall_time(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes)
        .lines()
        .filter(|l| !l.contains("\"wall_time_s\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn outputs_in_pool(threads: usize, cfgs: &[ExperimentConfig]) -> BTreeMap<String, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut files = BTreeMap::new();
        for cfg in cfgs {
            let out = match cfg.experiment {
                ExperimentKind::Fig1 => run_fig1(cfg),
                ExperimentKind::Fig2 => run_fig2(cfg),
                ExperimentKind::Rate => run_rate(cfg),
                ExperimentKind::Lemmas => run_lemma_suite(cfg),
            }
            .unwrap();
            for (name, bytes) in out.files().unwrap() {
                files.insert(name, String::from_utf8(bytes).unwrap());
            }
            files.insert(
                format!("{}_manifest.json", cfg.experiment),
                strip_wall_time(&out.manifest(0.0).unwrap()),
            );
        }
        files
    })
}

fn criterion_9() -> Outcome {
    let cfgs: Vec<ExperimentConfig> = [
        ExperimentKind::Fig1,
        ExperimentKind::Fig2,
        ExperimentKind::Rate,
        ExperimentKind::Lemmas,
    ]
    .into_iter()
    .map(|k| {
        let mut c = ExperimentConfig::defaults(k);
        c.n_grid = vec![20, 40, 80];
        c.panel_n = 30;
        c.trials = 4;
        c.tail_n_grid = vec![30];
        c.tail_eps_grid = vec![0.5];
        c.tail_trials = 5000;
        c
    })
    .collect();
    let reference = outputs_in_pool(1, &cfgs);
    let mut pass = true;
    for threads in [1, 2, 4] {
        pass &= outputs_in_pool(threads, &cfgs) == reference;
    }
    Outcome {
        pass,
        detail: format!("{} files identical across 1, 2 and 4 threads", reference.len()),
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", Duration::from_secs(5), criterion_1),
        ("jump identity", Duration::from_secs(10), criterion_2),
        ("eulerian exactness", Duration::from_secs(5), criterion_3),
        ("generator TV rate", Duration::from_secs(180), criterion_4),
        ("kernel uniformity", Duration::from_secs(180), criterion_5),
        ("heavy-tail contrast", Duration::from_secs(30), criterion_6),
        ("lower-tail bound", Duration::from_secs(30), criterion_7),
        ("concentration envelopes", Duration::from_secs(240), criterion_8),
        ("determinism", Duration::from_secs(60), criterion_9),
    ];
    let mut failures = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= *budget;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {} {name}: {} ({:.2}s of {}s) {}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            outcome.detail
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use stochcirc::compiler::{color_interaction_graph, compile, is_proper_coloring, CompileOptions};
use stochcirc::dpmm::{ambiguous_fixture, canonical_partition, run_dpmm, separated_fixture, DpmmParams, DpmmRunConfig};
use stochcirc::entropy::EntropyStream;
use stochcirc::factorgraph::{Factor, FactorGraph, Variable};
use stochcirc::fixtures;
use stochcirc::gates::total_variation;
use stochcirc::lowprec::{precision_sweep, EnergyFormat, Precision, SweepConfig};
use stochcirc::mrf::{evidence_from_images, random_dot_stereogram, solve, square_disparity, LatticeMrf, MatchMode, SolveConfig};
use stochcirc::spiking::{race_energies, simulate_spiking_assembly, SpikeConfig};
use stochcirc::transition::{
    fault_kl_curve, run, validate_schedule, FaultModel, RunConfig, ScheduleKind, TransitionAssembly,
};

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn criterion(number: u32, name: &str, budget: Duration, body: fn() -> Outcome) -> bool {
    let start = Instant::now();
    let result = std::panic::catch_unwind(body).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let passed = result.passed && in_time;
    println!(
        "criterion {number} [{}] {name}: {} ({:.1}s of {}s budget)",
        if passed { "PASS" } else { "FAIL" },
        result.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    passed
}

/// 1. Low-precision curve.
fn low_precision_curve() -> Outcome {
    let formats: Vec<EnergyFormat> = [(4, 2), (6, 3), (8, 4), (10, 5)]
        .iter()
        .map(|&(b, f)| EnergyFormat::new(b, f).unwrap())
        .collect();
    let (four, eight) = (0, 2);
    let per_bin = 10_000;
    let cfg = SweepConfig::new(1000, per_bin, formats);
    let rows = precision_sweep(&cfg, &EntropyStream::new(0xACCE_0001)).unwrap();
    let groups: Vec<_> = rows.chunks(cfg.formats.len()).collect();
    let interior = &groups[1..groups.len() - 1];
    let full = interior.len() == cfg.entropy_edges.len() - 1 && interior.iter().all(|c| c[0].n == per_bin);
    let worst_8 = groups.iter().map(|c| c[eight].mean_kl).fold(0.0, f64::max);
    let min_ratio = interior
        .iter()
        .filter(|c| c[eight].mean_kl > 0.0 || c[four].mean_kl > 0.0)
        .map(|c| c[four].mean_kl / c[eight].mean_kl)
        .fold(f64::INFINITY, f64::min);
    outcome(
        full && worst_8 < 1e-2 && min_ratio >= 10.0,
        format!(
            "{} bins x {per_bin}; max mean KL at (8,4) {worst_8:.2e} bits; min 4-bit/8-bit ratio {min_ratio:.0}x",
            interior.len()
        ),
    )
}

fn three_var(evidence: &[(String, usize)], schedule: ScheduleKind) -> (TransitionAssembly, Vec<f64>) {
    let g = FactorGraph::parse(fixtures::THREE_VAR)
        .unwrap()
        .with_evidence(evidence)
        .unwrap();
    let exact = g.enumerate_joint().unwrap().probs().to_vec();
    let options = CompileOptions {
        schedule,
        ..CompileOptions::default()
    };
    (compile(&g, &options).unwrap(), exact)
}

fn retained(a: &TransitionAssembly, sweeps: usize) -> RunConfig {
    RunConfig {
        sweeps,
        ..RunConfig::new(a, 1)
    }
}

/// 2. Three-variable oracle.
fn three_variable_oracle() -> Outcome {
    let all = [0, 1, 2];
    let mut tvs = Vec::new();
    for (k, ev) in [vec![], vec![("C".to_string(), 1)]].into_iter().enumerate() {
        let (par, exact) = three_var(&ev, ScheduleKind::Parallel);
        let (ser, _) = three_var(&ev, ScheduleKind::Serial);
        let tp = run(&par, &retained(&par, 100_000), &EntropyStream::new(20 + k as u64)).unwrap();
        let ts = run(&ser, &retained(&ser, 100_000), &EntropyStream::new(30 + k as u64)).unwrap();
        let (jp, js) = (tp.joint_histogram(&all), ts.joint_histogram(&all));
        tvs.push(total_variation(&jp, &exact));
        tvs.push(total_variation(&js, &exact));
        tvs.push(total_variation(&jp, &js));
    }
    let worst = tvs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst < 0.02,
        format!(
            "joint TV unclamped {:.4}, C=1 {:.4}; serial vs parallel {:.4} / {:.4}",
            tvs[0], tvs[3], tvs[2], tvs[5]
        ),
    )
}

/// 3. MRF oracle and stereogram.
fn mrf_oracle() -> Outcome {
    let mut s = EntropyStream::new(0xACCE_0003);
    let ev: Vec<f64> = (0..27).map(|_| s.uniform() * 3.0).collect();
    let m = LatticeMrf::new(3, 3, 3, ev, 1.0, 2.0).unwrap();
    let exact = m.to_factor_graph().unwrap().enumerate_joint().unwrap();
    let a = m.assembly(Precision::default(), ScheduleKind::Parallel).unwrap();
    let checker = a.schedule().groups().len() == 2 && validate_schedule(&a).is_empty();
    let t = run(&a, &retained(&a, 100_000), &EntropyStream::new(31)).unwrap();
    let worst = (0..9)
        .map(|p| total_variation(&t.marginal(p), &exact.marginal(p)))
        .fold(0.0, f64::max);

    let (h, w, d) = (32, 32, 5);
    let truth = square_disparity(h, w, 1, 3);
    let (l, r) = random_dot_stereogram(&truth, h, w, &mut EntropyStream::new(32)).unwrap();
    let ev = evidence_from_images(&l, &r, d, MatchMode::Stereo).unwrap();
    let stereo = LatticeMrf::new(h, w, d, ev, 1.0, 2.0).unwrap();
    let sol = solve(&stereo, &SolveConfig::default(), &EntropyStream::new(33)).unwrap();
    let (mut ok, mut total) = (0, 0);
    for i in 1..h - 1 {
        for j in d..w - 1 {
            total += 1;
            ok += (sol.labels[i * w + j] == truth[i * w + j]) as usize;
        }
    }
    let recovered = ok as f64 / total as f64;
    let descended = sol.energy_trace.last() < sol.energy_trace.first();
    outcome(
        checker && worst < 0.03 && recovered >= 0.95 && descended,
        format!(
            "3x3 worst pixel TV {worst:.4}; checkerboard valid {checker}; stereogram interior recovery {:.1}%",
            100.0 * recovered
        ),
    )
}

fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for label in 0..=next {
            prefix.push(label);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

fn partition_posterior(data: &[Vec<bool>], p: &DpmmParams) -> (Vec<Vec<usize>>, Vec<f64>) {
    use statrs::function::beta::ln_beta;
    use statrs::function::gamma::ln_gamma;
    let parts = set_partitions(data.len());
    let n = data.len() as f64;
    let lps: Vec<f64> = parts
        .iter()
        .map(|part| {
            let k = part.iter().max().unwrap() + 1;
            let mut lp = k as f64 * p.alpha.ln() + ln_gamma(p.alpha) - ln_gamma(p.alpha + n);
            for block in 0..k {
                let members: Vec<&Vec<bool>> =
                    part.iter().zip(data).filter(|(&b, _)| b == block).map(|(_, x)| x).collect();
                let size = members.len() as f64;
                lp += ln_gamma(size);
                for pix in 0..data[0].len() {
                    let on = members.iter().filter(|x| x[pix]).count() as f64;
                    lp += ln_beta(on + p.beta_on, size - on + p.beta_off) - ln_beta(p.beta_on, p.beta_off);
                }
            }
            lp
        })
        .collect();
    let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lps.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    (parts, w.into_iter().map(|x| x / z).collect())
}

/// 4. DPMM partition oracle and cluster-count behaviour.
fn dpmm_oracle() -> Outcome {
    let data = vec![vec![true, true], vec![true, false], vec![false, false], vec![true, true]];
    let params = DpmmParams::default();
    let (parts, exact) = partition_posterior(&data, &params);
    let cfg = DpmmRunConfig {
        sweeps: 100_000,
        ..DpmmRunConfig::default()
    };
    let (_, trace) = run_dpmm(&data, params, &cfg, &EntropyStream::new(41)).unwrap();
    let index: BTreeMap<&Vec<usize>, usize> = parts.iter().enumerate().map(|(i, q)| (q, i)).collect();
    let mut emp = vec![0.0; parts.len()];
    for p in &trace.partitions {
        let canon = canonical_partition(&p.iter().map(|&x| x as u64).collect::<Vec<_>>());
        emp[index[&canon]] += 1.0 / trace.partitions.len() as f64;
    }
    let tv = total_variation(&emp, &exact);

    let cfg = DpmmRunConfig {
        sweeps: 5000,
        ..DpmmRunConfig::default()
    };
    let (_, sep) = run_dpmm(&separated_fixture(10, 16), params, &cfg, &EntropyStream::new(42)).unwrap();
    let counts = sep.cluster_counts();
    let two = counts.iter().filter(|&&k| k == 2).count() as f64 / counts.len() as f64;

    let cfg = DpmmRunConfig {
        sweeps: 20_000,
        ..DpmmRunConfig::default()
    };
    let (_, amb) = run_dpmm(&ambiguous_fixture(), params, &cfg, &EntropyStream::new(43)).unwrap();
    let counts = amb.cluster_counts();
    let freq = |k: usize| counts.iter().filter(|&&c| c == k).count() as f64 / counts.len() as f64;
    let (three, four) = (freq(3), freq(4));
    outcome(
        tv < 0.02 && two >= 0.9 && three > 0.05 && four > 0.05,
        format!(
            "15-partition TV {tv:.4}; separated K=2 in {:.1}%; ambiguous K=3 {:.1}% / K=4 {:.1}%",
            100.0 * two,
            100.0 * three,
            100.0 * four
        ),
    )
}

/// 5. Spiking equivalence.
fn spiking_equivalence() -> Outcome {
    let mut g = EntropyStream::new(0xACCE_0005);
    let mut worst_race: f64 = 0.0;
    let mut vectors: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![0.0, 1.0]];
    for _ in 0..8 {
        vectors.push((0..6).map(|_| g.uniform() * 5.0).collect());
    }
    for (k, e) in vectors.iter().enumerate() {
        let rates: Vec<f64> = e.iter().map(|x| (-x).exp2()).collect();
        let z: f64 = rates.iter().sum();
        let analytic: Vec<f64> = rates.iter().map(|r| r / z).collect();
        let mut s = EntropyStream::new(50 + k as u64);
        let mut c = vec![0.0; e.len()];
        for _ in 0..100_000 {
            c[race_energies(e, &mut s).unwrap().0] += 1e-5;
        }
        worst_race = worst_race.max(total_variation(&c, &analytic));
    }
    let (a, exact) = three_var(&[], ScheduleKind::Parallel);
    let spikes = simulate_spiking_assembly(&a, &SpikeConfig::new(100_000), &EntropyStream::new(51)).unwrap();
    let tv = total_variation(&spikes.trace.joint_histogram(&[0, 1, 2]), &exact);
    outcome(
        worst_race < 0.01 && tv < 0.02,
        format!("worst race TV {worst_race:.4} over {} energy vectors; spiking joint TV {tv:.4}", vectors.len()),
    )
}

fn lattice_graph(h: usize, w: usize) -> (Vec<String>, Vec<Vec<usize>>) {
    let names = (0..h * w).map(|p| format!("x_{:03}_{:03}", p / w, p % w)).collect();
    let mut nb = vec![Vec::new(); h * w];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if j + 1 < w {
                nb[p].push(p + 1);
                nb[p + 1].push(p);
            }
            if i + 1 < h {
                nb[p].push(p + w);
                nb[p + w].push(p);
            }
        }
    }
    (names, nb)
}

/// 6. Compiler schedule properties.
fn compiler_schedules() -> Outcome {
    let mut s = EntropyStream::new(0xACCE_0006);
    let mut proper = 0;
    let mut within_bound = 0;
    let mut valid = 0;
    for _ in 0..100 {
        let n = 1 + s.below(50) as usize;
        let density = s.uniform() * 0.3;
        let variables: Vec<Variable> = (0..n)
            .map(|i| Variable {
                name: format!("v{i:02}"),
                arity: 2 + s.below(2) as usize,
            })
            .collect();
        let mut factors = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if s.uniform() < density {
                    let size = variables[a].arity * variables[b].arity;
                    factors.push(Factor {
                        name: format!("f{a}_{b}"),
                        vars: vec![a, b],
                        table: (0..size).map(|_| 0.5 + s.uniform()).collect(),
                    });
                }
            }
        }
        let g = FactorGraph::new(variables, factors, BTreeMap::new()).unwrap();
        let nb: Vec<Vec<usize>> = g.interaction_neighbors().into_iter().map(|set| set.into_iter().collect()).collect();
        let c = color_interaction_graph(&g.names(), &nb);
        proper += is_proper_coloring(&nb, &c) as usize;
        let max_deg = nb.iter().map(Vec::len).max().unwrap_or(0);
        within_bound += (c.iter().max().map_or(0, |m| m + 1) <= max_deg + 1) as usize;
        let a = compile(&g, &CompileOptions::default()).unwrap();
        valid += validate_schedule(&a).is_empty() as usize;
    }
    let lattices_two = [(2, 2), (3, 3), (5, 5), (8, 13), (32, 32), (64, 64)]
        .iter()
        .all(|&(h, w)| {
            let (names, nb) = lattice_graph(h, w);
            let c = color_interaction_graph(&names, &nb);
            is_proper_coloring(&nb, &c) && c.iter().max() == Some(&1)
        });
    let fixtures_valid = fixtures::ALL.iter().all(|(name, doc)| {
        let base = FactorGraph::parse(doc).unwrap();
        fixtures::evidence_suite(name).iter().all(|ev| {
            let a = compile(&base.with_evidence(ev).unwrap(), &CompileOptions::default()).unwrap();
            validate_schedule(&a).is_empty()
        })
    });
    outcome(
        proper == 100 && within_bound == 100 && valid == 100 && lattices_two && fixtures_valid,
        format!(
            "random graphs: {proper}/100 proper, {within_bound}/100 within degree bound, {valid}/100 valid schedules; \
             lattices 2-colored {lattices_two}; fixtures valid {fixtures_valid}"
        ),
    )
}

/// 7. Fault baseline.
fn fault_baseline() -> Outcome {
    let (a, _) = three_var(&[], ScheduleKind::Parallel);
    let mut cfg = retained(&a, 100_000);
    let clean = run(&a, &cfg, &EntropyStream::new(71)).unwrap();
    cfg.fault = Some(FaultModel::new(0.0).unwrap());
    let zero = run(&a, &cfg, &EntropyStream::new(71)).unwrap();
    cfg.fault = None;
    let g = FactorGraph::parse(fixtures::THREE_VAR).unwrap();
    let exact = g.enumerate_joint().unwrap();
    let marginals: Vec<Vec<f64>> = (0..3).map(|v| exact.marginal(v)).collect();
    let rates = [0.0, 1e-4, 1e-3, 1e-2];
    let curve = fault_kl_curve(&a, &rates, &cfg, &EntropyStream::new(71), &marginals).unwrap();
    let identical = clean == zero;
    let complete = curve.len() == 4 && curve.iter().all(|p| p.kl.is_finite());
    let kls: Vec<String> = curve.iter().map(|p| format!("{:.1e}", p.kl)).collect();
    outcome(
        identical && complete,
        format!("rate 0 bit-identical {identical}; KL(bits) at 0/1e-4/1e-3/1e-2 = {}", kls.join(" / ")),
    )
}

fn cli(out: &Path, threads: usize, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_stochcirc"))
        .args(["--seed", "0xACCE0008", "--threads", &threads.to_string(), "--out-dir"])
        .arg(out)
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

/// 8. Reproducibility across worker counts.
fn reproducibility() -> Outcome {
    let commands: [&[&str]; 7] = [
        &["precision-sweep", "--bits", "4,6,8,10", "--per-bin", "2000"],
        &["query", "builtin:three_var", "--evidence", "C=1"],
        &["run", "builtin:three_var", "--sweeps", "20000", "--fault-curve"],
        &["stereo", "--size", "32x32"],
        &["motion", "--size", "24x24"],
        &["dpmm", "run", "--fixture", "ambiguous", "--sweeps", "5000"],
        &["spike", "run", "builtin:three_var", "--sweeps", "20000"],
    ];
    let root = tempfile::tempdir().unwrap();
    let mut mismatched = Vec::new();
    let mut failed = 0;
    let mut compared = 0;
    for (k, args) in commands.iter().enumerate() {
        let mut outputs = Vec::new();
        for (run, threads) in [(0, 1), (1, 4), (2, 4)] {
            let dir = root.path().join(format!("c{k}_r{run}"));
            if !cli(&dir, threads, args) {
                failed += 1;
            }
            outputs.push(csv_files(&dir));
        }
        for other in &outputs[1..] {
            compared += outputs[0].len();
            if other != &outputs[0] || outputs[0].is_empty() {
                mismatched.push(args[0].to_string());
            }
        }
    }
    mismatched.dedup();
    outcome(
        failed == 0 && mismatched.is_empty(),
        format!(
            "{} commands x (1, 4, 4 threads): {compared} CSV comparisons, {failed} failed runs, mismatches {:?}",
            commands.len(),
            mismatched
        ),
    )
}

fn main() {
    let m = |s: u64| Duration::from_secs(60 * s);
    let criteria: [Criterion; 8] = [
        ("low-precision curve", m(5), low_precision_curve),
        ("three-variable oracle", m(1), three_variable_oracle),
        ("MRF oracle", m(5), mrf_oracle),
        ("DPMM partition oracle", m(5), dpmm_oracle),
        ("spiking equivalence", m(2), spiking_equivalence),
        ("compiler schedule properties", m(1), compiler_schedules),
        ("fault baseline", m(2), fault_baseline),
        ("reproducibility", m(5), reproducibility),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, budget, body)) in criteria.into_iter().enumerate() {
        let number = i as u32 + 1;
        if !filter.is_empty() && !filter.contains(&number) {
            continue;
        }
        failures += !criterion(number, name, budget, body) as usize;
    }
    if failures > 0 {
        println!("acceptance: {failures} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

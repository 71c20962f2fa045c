//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use perfagent_core::agent::{run_agent, AgentConfig, AgentContext, MetricCatalog, StopReason, TimingOnlyProfile};
use perfagent_core::experiments::{aggregate, emit_report, AttemptRecord, GroupBy, MeanKind, ReportFormat, ResultsTable};
use perfagent_core::llm::{classify_explanation, Experiment, ReplayProvider};
use perfagent_core::manifest::{Motif, Preprocessor, ValidationMode, ValidationPolicy};
use perfagent_core::patch::{extract_function, replace_function};
use perfagent_core::profile::{hotspot, import_profile};
use perfagent_core::toolchain::{measure_speedup, RunSample, SpeedupStat};
use perfagent_core::verify::{category_counts, compare_outputs, pass_at_1, CorrectnessCategory};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn sample(t: f64) -> RunSample {
    RunSample { wall_times_s: vec![t], stdout: vec![], stderr: vec![], thread_count: None }
}

fn c1_speedup_arithmetic() -> Outcome {
    let mut shown = Vec::new();
    for (base, cand, display) in [(25.00, 4.58, "5.46"), (25.00, 3.04, "8.22")] {
        let s = measure_speedup(&sample(base), &sample(cand)).map_err(|e| e.to_string())?;
        let oracle = base / cand;
        ensure!((s.speedup - oracle).abs() <= 1e-9, "speedup {} vs oracle {oracle}", s.speedup);
        let text = format!("{:.2}", s.speedup);
        ensure!(text == display, "({base}, {cand}) displayed {text}, expected {display}");
        shown.push(text);
    }
    let doc = fs::read(common::fixtures().join("profiles/xsbench.json")).map_err(|e| e.to_string())?;
    let tree = import_profile(&doc).map_err(|e| e.to_string())?;
    let h = hotspot(&tree, "time_excl").map_err(|e| e.to_string())?;
    let oracle = 28.3 / 39.5;
    ensure!((h.share - oracle).abs() <= 1e-9, "share {} vs oracle {oracle}", h.share);
    ensure!((0.716..=0.717).contains(&h.share), "share {} outside 0.716-0.717", h.share);
    Ok(format!("speedups {} and share {:.4}", shown.join(", "), h.share))
}

fn column(correct: usize, compile: usize, no_code: usize, mismatch: usize, failed: usize) -> Vec<CorrectnessCategory> {
    use CorrectnessCategory::*;
    [(Correct, correct), (CompilationError, compile), (NoGeneratedCode, no_code), (OutputMismatch, mismatch), (FailedToFollowInstructions, failed)]
        .into_iter()
        .flat_map(|(c, n)| std::iter::repeat_n(c, n))
        .collect()
}

fn c2_pass_at_1() -> Outcome {
    // (tool/experiment, correct, compile, no code, mismatch, failed to follow)
    let table = [
        ("Codee/EX1", 20, 0, 0, 0, 0),
        ("O1/EX1", 18, 0, 1, 1, 0),
        ("L3.2/EX1", 14, 0, 3, 3, 0),
        ("C3.5/EX1", 14, 0, 2, 3, 1),
        ("Codee/EX2", 20, 0, 0, 0, 0),
        ("O1/EX2", 17, 0, 1, 2, 0),
        ("L3.2/EX2", 12, 0, 6, 2, 0),
        ("C3.5/EX2", 13, 0, 5, 2, 0),
        ("Codee/EX3", 20, 0, 0, 0, 0),
        ("O1/EX3", 19, 0, 0, 0, 1),
        ("L3.2/EX3", 13, 1, 1, 5, 0),
        ("C3.5/EX3", 12, 2, 0, 6, 0),
    ];
    let mut all_correct = 0;
    let mut all = 0;
    for (name, ok, ce, nc, om, ff) in table {
        let cats = column(ok, ce, nc, om, ff);
        ensure!(cats.len() == 20, "{name} has {} attempts", cats.len());
        let p = pass_at_1(&cats).map_err(|e| e.to_string())?;
        ensure!(p == ok as f64 / 20.0, "{name}: pass@1 {p}");
        let counted: usize = category_counts(&cats).iter().map(|(_, n)| n).sum();
        ensure!(counted == 20, "{name}: counts sum to {counted}");
        all_correct += ok;
        all += cats.len();
    }
    let o1 = pass_at_1(&column(18, 0, 1, 1, 0)).unwrap();
    let c35 = pass_at_1(&column(12, 2, 0, 6, 0)).unwrap();
    ensure!(o1 == 0.90 && c35 == 0.60, "O1/EX1 {o1}, C3.5/EX3 {c35}");
    ensure!((all_correct, all) == (192, 240), "totals {all_correct}/{all}");
    Ok(format!("O1/EX1 {o1:.2}, C3.5/EX3 {c35:.2}, 192/240 correct overall"))
}

fn c3_ex1_pipeline() -> Outcome {
    let tc = common::toolchain();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let provider = ReplayProvider::from_responses("replay", [common::response("matmul_interchange.md")]);
    let table = common::harness(&tc, work.path()).run_ex1(&[common::spec("matmul")], &provider).map_err(|e| e.to_string())?;
    ensure!(table.failures.is_empty(), "not attempted: {:?}", table.failures);
    let row = &table.rows[0];
    ensure!(row.category == CorrectnessCategory::Correct, "category {}", row.category);
    let stat = row.speedup_stat.ok_or("no speedup measured")?;
    ensure!(stat.speedup >= 1.5, "speedup {:.3} below 1.5", stat.speedup);
    Ok(format!(
        "Correct, {:.2}x ({:.3} s -> {:.3} s, 10 reps)",
        stat.speedup, stat.baseline_mean_s, stat.candidate_mean_s
    ))
}

fn c4_ex2_selection() -> Outcome {
    use common::*;
    let tc = toolchain();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let replies = [sleeper_reply(150), sleeper_reply(60), sleeper_wrong_output(40), sleeper_reply(100), sleeper_reply(80)];
    let provider = ReplayProvider::from_responses("replay", replies);
    let h = harness(&tc, work.path());
    let table = h.run_ex2(&[spec("sleeper")], &provider).map_err(|e| e.to_string())?;
    let row = table.rows.first().ok_or("no row")?;
    ensure!(row.turns.len() == 5, "{} turns", row.turns.len());
    // oracle: fastest Correct turn, first on ties
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in row.turns.iter().enumerate() {
        if let (CorrectnessCategory::Correct, Some(s)) = (t.category, t.speedup) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    let (bi, bs) = best.ok_or("no Correct turn")?;
    ensure!(row.turns[2].category == CorrectnessCategory::OutputMismatch, "turn 3 is {}", row.turns[2].category);
    ensure!(row.variant_tag == row.turns[bi].variant_tag && !row.na && row.speedup == bs, "row {} vs oracle turn {}", row.variant_tag, bi + 1);
    ensure!(row.variant_tag == "ex2-turn2", "selected {} instead of the 60 ms variant", row.variant_tag);

    let bad = ReplayProvider::from_responses("replay-bad", (0..5).map(|_| sleeper_syntax_error()));
    let table = h.run_ex2(&[spec("sleeper")], &bad).map_err(|e| e.to_string())?;
    let row = table.rows.first().ok_or("no row")?;
    ensure!(row.na && row.speedup == 1.0, "all-incorrect row: na={} speedup={}", row.na, row.speedup);
    Ok(format!("picked {} at {:.2}x; all-incorrect gives NA 1.0", row_tag(bi), bs))
}

fn row_tag(i: usize) -> String {
    format!("turn {}", i + 1)
}

fn c5_ex3_sweep() -> Outcome {
    let tc = common::toolchain();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let h = common::harness(&tc, work.path());
    let spec = common::spec("matmul");
    let provider = ReplayProvider::from_responses("replay", [common::response("matmul_omp.md")]);
    let table = h.run_ex3(std::slice::from_ref(&spec), &provider).map_err(|e| e.to_string())?;
    ensure!(table.failures.is_empty(), "not attempted: {:?}", table.failures);
    let row = &table.rows[0];
    let threads = row.thread_results.clone().ok_or("no thread results")?;
    ensure!(threads.len() == 4 && threads.keys().copied().eq([4, 8, 16, 32]), "thread entries {:?}", threads.keys());
    let serial = ReplayProvider::from_responses("replay-serial", [common::response("matmul_serial_only.md")]);
    let t2 = h.run_ex3(std::slice::from_ref(&spec), &serial).map_err(|e| e.to_string())?;
    ensure!(
        t2.rows[0].category == CorrectnessCategory::FailedToFollowInstructions,
        "serial-only reply classified {}",
        t2.rows[0].category
    );
    ensure!(row.category == CorrectnessCategory::Correct, "omp reply classified {}", row.category);
    // speedup of the one-thread baseline against itself is 1 by definition
    let s8 = threads[&8].ok_or("no speedup at 8 threads")?;
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    ensure!(s8 > 1.0, "speedup(8) = {s8:.3} is not above the 1-thread baseline (1.0); {cpus} CPU(s) available");
    Ok(format!("speedup(8) = {s8:.2}x on {cpus} CPU(s); serial-only reply FailedToFollowInstructions"))
}

fn c6_taxonomy() -> Outcome {
    use common::*;
    let tc = toolchain();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let h = harness(&tc, work.path());
    let spec = [spec("sleeper")];
    let cases = [
        ("syntax", Experiment::Ex1, sleeper_syntax_error(), CorrectnessCategory::CompilationError),
        ("prose", Experiment::Ex1, "I would unroll the inner loop and hoist the pause out of it.".to_string(), CorrectnessCategory::NoGeneratedCode),
        ("wrong", Experiment::Ex1, sleeper_wrong_output(10), CorrectnessCategory::OutputMismatch),
        ("serial", Experiment::Ex3, sleeper_reply(10), CorrectnessCategory::FailedToFollowInstructions),
    ];
    let mut table = ResultsTable::default();
    for (id, exp, reply, expected) in cases {
        let p = ReplayProvider::from_responses(id, [reply]);
        let t = match exp {
            Experiment::Ex3 => h.run_ex3(&spec, &p),
            _ => h.run_ex1(&spec, &p),
        }
        .map_err(|e| e.to_string())?;
        let got = t.rows.first().map(|r| r.category).ok_or(format!("{id}: no row"))?;
        ensure!(got == expected, "{id}: {got}, expected {expected}");
        table.merge(t).map_err(|e| e.to_string())?;
    }
    let cats: Vec<CorrectnessCategory> = table.rows.iter().map(|r| r.category).collect();
    let counts = category_counts(&cats);
    ensure!(counts.iter().map(|(_, n)| n).sum::<usize>() == cats.len(), "counts do not sum to attempts");
    let failure_rows: BTreeSet<CorrectnessCategory> = cats.iter().copied().collect();
    ensure!(failure_rows.len() == 4, "categories {failure_rows:?}");
    Ok("four fixtures land on the four failure rows; counts sum to 4".into())
}

fn c7_agent() -> Outcome {
    use common::*;
    let tc = toolchain();
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = spec("sleeper");
    let work_fn = |ms: u32, note: &str| {
        let def = extract_function(&sleeper_code(ms), "work").expect("fixture defines work");
        fenced(&format!("{def}\n"), note)
    };
    let replies = [
        work_fn(150, "Shortened the pause."),
        work_fn(60, "Hoisted the invariant part of the pause."),
        work_fn(100, "Unrolled the accumulation loop."),
    ];
    let env = env();
    let catalog = MetricCatalog::default();
    let pre = Preprocessor::default();
    let ctx = AgentContext { toolchain: &tc, work_dir: work.path(), preprocessor: &pre, prompt_env: &env, catalog: &catalog };
    let cfg = AgentConfig { max_iterations: 3, provider_id: "replay".into(), ..Default::default() };
    let provider = ReplayProvider::from_responses("replay", replies);
    let trace = run_agent(&spec, &TimingOnlyProfile, &provider, &cfg, &ctx).map_err(|e| e.to_string())?;
    ensure!(trace.iterations.len() == 3, "{} iterations", trace.iterations.len());
    ensure!(trace.stop_reason == StopReason::ThresholdReached, "stop {:?}", trace.stop_reason);
    let last = &trace.iterations[2].context_sent;
    ensure!(last.contains("Iteration 1") && last.contains("Iteration 2"), "digest misses earlier iterations");
    // oracle: Correct iteration with the lowest mean run time
    let oracle = trace
        .iterations
        .iter()
        .filter(|r| r.category == CorrectnessCategory::Correct)
        .filter_map(|r| Some((r.index, r.run.as_ref()?.mean()?)))
        .fold(None::<(u32, f64)>, |b, (i, t)| if b.is_some_and(|(_, bt)| bt <= t) { b } else { Some((i, t)) })
        .map(|(i, _)| i);
    ensure!(trace.best_iteration == oracle && oracle == Some(2), "best {:?}, oracle {oracle:?}", trace.best_iteration);

    let work2 = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ctx = AgentContext { work_dir: work2.path(), ..ctx };
    let declining = ReplayProvider::from_responses("replay", [work_fn(150, "Shortened the pause."), cfg.decline_sentinel.clone()]);
    let trace2 = run_agent(&spec, &TimingOnlyProfile, &declining, &cfg, &ctx).map_err(|e| e.to_string())?;
    ensure!(trace2.stop_reason == StopReason::ModelDeclined && trace2.iterations.len() == 2, "decline: {:?} after {}", trace2.stop_reason, trace2.iterations.len());
    Ok(format!("3 iterations, best = iteration 2 ({:.2}x); decline stops after 2", trace.best_speedup().unwrap_or(0.0)))
}

fn c8_patcher() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    runner
        .run(&common::cgen::c_file(), |f| {
            let target = &f.names[f.target];
            prop_assert_eq!(extract_function(&f.source, target).unwrap(), f.definition(f.target));
            let patched = replace_function(&f.source, target, &f.replacement).unwrap();
            prop_assert_eq!(&patched, &f.expected());
            prop_assert_eq!(extract_function(&patched, target).unwrap(), f.replacement.clone());
            for (i, name) in f.names.iter().enumerate().filter(|(i, _)| *i != f.target) {
                prop_assert_eq!(extract_function(&patched, name).unwrap(), f.definition(i));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("1000 generated files, zero failures".into())
}

fn c9_profiles() -> Outcome {
    let dir = common::fixtures().join("profiles");
    let mut n = 0;
    for name in ["cg.json", "xsbench.json", "single.json"] {
        let bytes = fs::read(dir.join(name)).map_err(|e| e.to_string())?;
        let once = import_profile(&bytes).map_err(|e| format!("{name}: {e}"))?;
        let twice = import_profile(once.to_json().as_bytes()).map_err(|e| format!("{name} re-import: {e}"))?;
        ensure!(once == twice && once.to_json() == twice.to_json(), "{name}: not a fixed point");
        for (metric, total) in &once.total {
            let sum = once.node_sum(metric);
            let kind_exclusive = once.metric_catalog[metric].kind == perfagent_core::profile::MetricKind::Exclusive;
            if kind_exclusive {
                ensure!((sum - total).abs() <= 1e-9 * total.abs().max(1.0), "{name}/{metric}: sum {sum} vs total {total}");
            }
        }
        n += 1;
    }
    let single = import_profile(&fs::read(dir.join("single.json")).unwrap()).unwrap();
    let share = hotspot(&single, "time_excl").map_err(|e| e.to_string())?.share;
    ensure!(share == 1.0, "single-node share {share}");
    Ok(format!("{n} fixtures round-trip; single-node share 1.0"))
}

fn numeric_output() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-1e6f64..1e6, -1e-3f64..1e-3), 1..20)
        .prop_map(|v| v.into_iter().map(|(x, d)| (x, x * (1.0 + d))).unzip())
}

fn render(xs: &[f64]) -> Vec<u8> {
    xs.iter().enumerate().map(|(i, x)| format!("value {i} = {x:.9}\n")).collect::<String>().into_bytes()
}

fn c10_comparator() -> Outcome {
    let policy = |mode, abs_tol, rel_tol| ValidationPolicy { mode, abs_tol, rel_tol, ignore_patterns: vec![] };
    let mut runner = TestRunner::new(Config { cases: 500, failure_persistence: None, ..Config::default() });
    runner
        .run(&(numeric_output(), 0.0f64..1e-2, 0.0f64..1e-2, 1.0f64..10.0), |((r, c), abs, rel, grow)| {
            let (rb, cb) = (render(&r), render(&c));
            for p in [
                policy(ValidationMode::ExactBytes, 0.0, 0.0),
                policy(ValidationMode::NumericTokens, 0.0, 0.0),
                policy(ValidationMode::NumericTokens, abs, rel),
                ValidationPolicy { ignore_patterns: vec!["^value 0".into()], ..policy(ValidationMode::NumericTokens, abs, rel) },
            ] {
                prop_assert!(compare_outputs(&rb, &rb, &p).matched);
                prop_assert!(compare_outputs(&cb, &cb, &p).matched);
            }
            let tight = compare_outputs(&rb, &cb, &policy(ValidationMode::NumericTokens, abs, rel)).matched;
            let loose = compare_outputs(&rb, &cb, &policy(ValidationMode::NumericTokens, abs * grow, rel * grow)).matched;
            prop_assert!(!tight || loose);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("reflexive under 4 policies; monotone in tolerance over 500 cases".into())
}

fn attempt(id: &str, motif: Motif, exp: Experiment, tool: &str, cat: CorrectnessCategory, speedup: Option<f64>) -> AttemptRecord {
    AttemptRecord {
        benchmark_id: id.into(),
        motif,
        level: 2,
        experiment: exp,
        tool_id: tool.into(),
        variant_tag: exp.as_str().to_ascii_lowercase(),
        category: cat,
        speedup: speedup.unwrap_or(1.0),
        na: speedup.is_none(),
        speedup_stat: speedup.and_then(|s| SpeedupStat::from_means(25.0, 25.0 / s)),
        labels: classify_explanation("Applied loop interchange and unrolled the inner loop."),
        thread_results: (exp == Experiment::Ex3).then(|| [(4, Some(2.5)), (8, speedup), (16, None), (32, Some(1.25))].into_iter().collect()),
        wallclock_log: None,
        constraint_flags: BTreeSet::new(),
        match_report: None,
        turns: vec![],
        note: None,
    }
}

/// Rows in deliberately unsorted order.
fn sample_table() -> ResultsTable {
    use CorrectnessCategory::*;
    let mut t = ResultsTable::default();
    t.provenance.timestamp = "2025-01-01T00:00:00Z".into();
    t.provenance.toolchain_versions.insert("gcc".into(), "gcc (GCC) 11.4.0".into());
    let rows = [
        attempt("xsbench", Motif::MonteCarlo, Experiment::Ex3, "o1", Correct, Some(3.3)),
        attempt("npb_cg", Motif::SparseLinearAlgebra, Experiment::Ex1, "codee", Correct, Some(5.46)),
        attempt("npb_cg", Motif::SparseLinearAlgebra, Experiment::Ex1, "o1", OutputMismatch, None),
        attempt("matmul", Motif::DenseLinearAlgebra, Experiment::Ex1, "o1", Correct, Some(4.5)),
        attempt("matmul", Motif::DenseLinearAlgebra, Experiment::Ex2, "o1", NoGeneratedCode, None),
        attempt("lbm", Motif::StructuredGrids, Experiment::Ex3, "c3.5", CompilationError, None),
    ];
    for r in rows {
        t.push(r).expect("keys are unique");
    }
    t
}

fn c11_report() -> Outcome {
    let table = sample_table();
    let summaries = aggregate(&table, GroupBy::ALL, MeanKind::Arithmetic).map_err(|e| e.to_string())?;
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for format in [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Json] {
        let pa = emit_report(&table, &summaries, format, a.path()).map_err(|e| e.to_string())?;
        let pb = emit_report(&table, &summaries, format, b.path()).map_err(|e| e.to_string())?;
        for (x, y) in pa.iter().zip(&pb) {
            ensure!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{} differs between runs", x.display());
            files += 1;
        }
    }
    Ok(format!("{files} report files byte-identical across two emissions"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("speedup arithmetic", Duration::from_secs(1), c1_speedup_arithmetic),
        ("pass@1 reproduction", Duration::from_secs(1), c2_pass_at_1),
        ("hermetic EX1 pipeline", Duration::from_secs(180), c3_ex1_pipeline),
        ("hermetic EX2 selection", Duration::from_secs(120), c4_ex2_selection),
        ("hermetic EX3 sweep", Duration::from_secs(240), c5_ex3_sweep),
        ("correctness taxonomy totality", Duration::from_secs(60), c6_taxonomy),
        ("agent loop determinism and threshold", Duration::from_secs(120), c7_agent),
        ("patcher properties", Duration::from_secs(30), c8_patcher),
        ("profile invariants", Duration::from_secs(5), c9_profiles),
        ("comparator properties", Duration::from_secs(10), c10_comparator),
        ("report determinism", Duration::from_secs(5), c11_report),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{:.2} s]", i + 1, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{:.2} s]", i + 1, took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

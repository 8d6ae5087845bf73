//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Positional numeric arguments restrict the run to those criteria,
//! e.g. `cargo test -p gansfer-core --test acceptance -- 4 5 6`.

use std::process::ExitCode;
use std::time::Instant;

use gansfer_core::acceptance::*;

const SEEDS: [u64; 3] = [0, 1, 2];

fn main() -> ExitCode {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |c: u8| selected.is_empty() || selected.contains(&c);
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{o}");
        outcomes.push(o);
    };
    let quick: [(u8, fn() -> Outcome); 8] = [
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (12, criterion_12),
        (13, criterion_13),
    ];
    for (c, f) in quick {
        if wants(c) {
            report(f());
        }
    }
    if wants(1) || wants(2) || wants(3) {
        match freeze_run(0) {
            Ok(run) => {
                for (c, f) in [(1, criterion_1 as fn(&FreezeRun) -> Outcome), (2, criterion_2), (3, criterion_3)] {
                    if wants(c) {
                        report(f(&run));
                    }
                }
            }
            Err(e) => {
                for c in [1u8, 2, 3].into_iter().filter(|&c| wants(c)) {
                    report(Outcome { criterion: c, name: "phase contracts".into(), passed: false, detail: format!("fixture failed: {e}") });
                }
            }
        }
    }
    if wants(10) || wants(11) {
        let start = Instant::now();
        let runs: Result<Vec<EndToEnd>, _> = SEEDS.iter().map(|&s| EndToEndConfig::small(s).and_then(|c| end_to_end(&c))).collect();
        match runs {
            Ok(runs) => {
                eprintln!("end-to-end fixture: {:.0} s", start.elapsed().as_secs_f64());
                if wants(10) {
                    report(criterion_10(&runs.iter().map(|r| r.diversity).collect::<Vec<_>>()));
                }
                if wants(11) {
                    report(criterion_11(&runs));
                }
            }
            Err(e) => {
                for c in [10u8, 11].into_iter().filter(|&c| wants(c)) {
                    report(Outcome { criterion: c, name: "end-to-end".into(), passed: false, detail: format!("fixture failed: {e}") });
                }
            }
        }
    }
    outcomes.sort_by_key(|o| o.criterion);
    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed).map(|o| o.criterion).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}

use phonon_kinetics_validation::criteria::*;
use phonon_kinetics_validation::Outcome;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Check = fn() -> Outcome;

const CHECKS: [(u32, &str, Check); 12] = [
    (1, "equilibrium fixed points", criterion_01),
    (2, "H-theorem", criterion_02),
    (3, "relaxation and temperature recovery", criterion_03),
    (4, "resonance defect bound", criterion_04),
    (5, "linearized operator", criterion_05),
    (6, "collisional invariants", criterion_06),
    (7, "conductivity laws", criterion_07),
    (8, "slab Fourier law", criterion_08),
    (9, "isotope jump process", criterion_09),
    (10, "four-wave exponents", criterion_10),
    (11, "microdynamics", criterion_11),
    (12, "direct-summation oracle", criterion_12),
];

fn main() {
    // Criterion numbers given on the command line restrict the run.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CHECKS {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let why = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {why}"))
            });
        let secs = start.elapsed().as_secs_f64();
        if !out.pass {
            failed += 1;
        }
        println!(
            "criterion {id:02} {} {name}: {} [{secs:.1} s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.summary
        );
        for n in &out.notes {
            println!("    note: {n}");
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

//! Release acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umeml::datakit::{decode, encode, generate, synthesize, Dataset, GeneratorConfig};
use umeml::encoders::{encode_pathology, PathologyEncoderParams};
use umeml::fusion::Task;
use umeml::harness::{fold_dir, run_cv, train_fold, write_results, CvResult, RunConfig, Variant};
use umeml::metrics::{read_curve_csv, trapezoid_area};
use umeml::numkit::{ParamStore, Tape, Tensor};
use umeml::verify::{model_suite, op_suite, oracle_suite, OracleReport};

const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const MODULARITY_TOLERANCE: f64 = 1e-9;
const PERMUTATION_TOLERANCE: f64 = 1e-12;
const MIN_FULL_ACCURACY: f64 = 0.90;
const MIN_UNIMODAL_GAP: f64 = 0.05;
const END_TO_END_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_SLACK: f64 = 0.02;
const SURVIVAL_TOLERANCE: f64 = 1e-9;
const ROC_AREA_TOLERANCE: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

type Checked = Result<Outcome, Box<dyn std::error::Error>>;

fn report(index: usize, name: &str, outcome: Outcome) -> bool {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    println!("{tag} {index}. {name}: {}", outcome.detail);
    outcome.pass
}

fn failed(e: impl std::fmt::Display) -> Outcome {
    Outcome {
        pass: false,
        detail: format!("error: {e}"),
    }
}

fn oracle<'a>(reports: &'a [OracleReport], name: &str) -> &'a OracleReport {
    reports
        .iter()
        .find(|r| r.name == name)
        .unwrap_or_else(|| panic!("oracle {name} missing"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = match op_suite(None).and_then(|mut ops| {
        ops.extend(model_suite(None)?);
        Ok(ops)
    }) {
        Ok(r) => r,
        Err(e) => return failed(e),
    };
    let elapsed = start.elapsed();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("reports");
    let all_under = reports.iter().all(|r| r.max_rel_err < GRADIENT_TOLERANCE);
    Outcome {
        pass: all_under && elapsed < GRADIENT_BUDGET,
        detail: format!(
            "{} checks, worst {} rel err {:.2e} (< {GRADIENT_TOLERANCE:e}), {:.1}s (< {}s)",
            reports.len(),
            worst.op_name,
            worst.max_rel_err,
            elapsed.as_secs_f64(),
            GRADIENT_BUDGET.as_secs()
        ),
    }
}

fn modularity_oracle(reports: &[OracleReport]) -> Outcome {
    let newman = oracle(reports, "modularity_newman");
    let path = oracle(reports, "modularity_three_path");
    let exact = umeml::verify::three_path_loss().map(|v| v == 0.125);
    Outcome {
        pass: newman.cases == 20
            && newman.max_abs_err <= MODULARITY_TOLERANCE
            && newman.pass
            && path.pass
            && matches!(exact, Ok(true)),
        detail: format!(
            "{} graphs max err {:.2e} (<= {MODULARITY_TOLERANCE:e}); 3-path loss err {:.1e}",
            newman.cases, newman.max_abs_err, path.max_abs_err
        ),
    }
}

fn permutation_invariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for model_seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + model_seed);
        let mut store = ParamStore::new();
        let params = PathologyEncoderParams::init(&mut store, 8, 4, 2, 2, 1, &mut rng);
        let m = rng.gen_range(10..40);
        let bag = Tensor::normal(m, 8, 1.0, &mut rng);
        let run = |bag: Tensor| -> umeml::Result<(Tensor, Tensor)> {
            let mut tape = Tape::new();
            let p = tape.constant(bag);
            let out = encode_pathology(&mut tape, &store, p, &params)?;
            Ok((
                tape.value(out.tokens).clone(),
                tape.value(out.prototypes).clone(),
            ))
        };
        let (tokens, prototypes) = match run(bag.clone()) {
            Ok(r) => r,
            Err(e) => return failed(e),
        };
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            let (t, c) = match run(bag.permute_rows(&perm)) {
                Ok(r) => r,
                Err(e) => return failed(e),
            };
            worst = worst
                .max(t.max_abs_diff(&tokens))
                .max(c.max_abs_diff(&prototypes));
        }
    }
    Outcome {
        pass: worst <= PERMUTATION_TOLERANCE,
        detail: format!(
            "5 models x 10 permutations, max diff {worst:.2e} (<= {PERMUTATION_TOLERANCE:e})"
        ),
    }
}

fn metric_oracles(reports: &[OracleReport]) -> Outcome {
    let parts = [
        (oracle(reports, "roc_auc_pairs"), 50),
        (oracle(reports, "concordance_pairs"), 50),
        (oracle(reports, "td_auc_case_control"), 20),
    ];
    let pass = parts
        .iter()
        .all(|(r, n)| r.cases == *n && r.max_abs_err == 0.0 && r.pass);
    let detail = parts
        .iter()
        .map(|(r, _)| format!("{} {} cases max err {:.1e}", r.name, r.cases, r.max_abs_err))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome { pass, detail }
}

fn survival_spot_values(reports: &[OracleReport]) -> Outcome {
    let r = oracle(reports, "survival_single_bin");
    Outcome {
        pass: r.cases == 2 && r.max_abs_err <= SURVIVAL_TOLERANCE && r.pass,
        detail: format!(
            "event and censored at h=0.5 vs ln 2, max err {:.2e} (<= {SURVIVAL_TOLERANCE:e})",
            r.max_abs_err
        ),
    }
}

fn grading(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        ..RunConfig::for_task(Task::Grading)
    }
}

fn accuracy(result: &CvResult) -> f64 {
    result.summary.primary().mean
}

fn end_to_end(default_data: &Dataset, runs: &mut Vec<CvResult>) -> Outcome {
    let start = Instant::now();
    let mut accs = Vec::new();
    for v in [Variant::Full, Variant::PathOnly, Variant::GeneOnly] {
        match run_cv(default_data, &grading(v), false) {
            Ok(r) => {
                accs.push(accuracy(&r));
                runs.push(r);
            }
            Err(e) => return failed(e),
        }
    }
    let elapsed = start.elapsed();
    let (full, path, gene) = (accs[0], accs[1], accs[2]);
    let epochs = RunConfig::for_task(Task::Grading).epoch_count();
    Outcome {
        pass: full >= MIN_FULL_ACCURACY
            && full >= path + MIN_UNIMODAL_GAP
            && full >= gene + MIN_UNIMODAL_GAP
            && epochs <= 10
            && elapsed < END_TO_END_BUDGET,
        detail: format!(
            "full {full:.3} (>= {MIN_FULL_ACCURACY}), path_only {path:.3}, gene_only {gene:.3} \
             (gap >= {MIN_UNIMODAL_GAP}), {epochs} epochs, {:.0}s (< {}s)",
            elapsed.as_secs_f64(),
            END_TO_END_BUDGET.as_secs()
        ),
    }
}

fn ablation_direction(
    default_data: &Dataset,
    runs: &mut Vec<CvResult>,
    no_modularity_seed0: &mut Option<CvResult>,
) -> Outcome {
    let mut means = [0.0; 4];
    for seed in 0..5u64 {
        let data = if seed == 0 {
            default_data.clone()
        } else {
            match synthesize(&GeneratorConfig {
                seed,
                ..GeneratorConfig::default()
            }) {
                Ok(d) => d,
                Err(e) => return failed(e),
            }
        };
        for (i, v) in Variant::ABLATIONS.iter().enumerate() {
            // Seed 0's full run is shared with the end-to-end criterion.
            let reuse = runs
                .iter()
                .find(|r| seed == 0 && r.summary.variant == *v)
                .cloned();
            let result = match reuse
                .map(Ok)
                .unwrap_or_else(|| run_cv(&data, &grading(*v), false))
            {
                Ok(r) => r,
                Err(e) => return failed(e),
            };
            means[i] += accuracy(&result) / 5.0;
            if seed == 0 && *v == Variant::NoModularity {
                *no_modularity_seed0 = Some(result.clone());
            }
            if !runs.iter().any(|r| r == &result) {
                runs.push(result);
            }
        }
    }
    let full = means[0];
    let pass = means[1..].iter().all(|m| full >= m - ABLATION_SLACK);
    let detail = Variant::ABLATIONS
        .iter()
        .zip(means)
        .map(|(v, m)| format!("{v} {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        pass,
        detail: format!("mean accuracy over 5 dataset seeds: {detail} (slack {ABLATION_SLACK})"),
    }
}

fn dir_bytes(root: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("prefix").display().to_string();
                out.push((rel, std::fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism(default_data: &Dataset) -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut round_trips = 0;
    for _ in 0..50 {
        let (r, c) = (rng.gen_range(0..20), rng.gen_range(0..20));
        // Feature files hold f32, so draw f32-representable values.
        let mut t = Tensor::normal(r, c, 1e3, &mut rng).map(|v| v as f32 as f64);
        if r * c > 0 {
            t.data_mut()[0] = -0.0;
            t.data_mut()[r * c - 1] = (f32::MIN_POSITIVE / 4.0) as f64;
        }
        let back = decode(&encode(&t)?, Path::new("memory"))?;
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if back.shape() == t.shape() && bits(&back) == bits(&t) {
            round_trips += 1;
        }
    }

    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&GeneratorConfig::default(), &a)?;
    generate(&GeneratorConfig::default(), &b)?;
    let same_dataset = dir_bytes(&a)? == dir_bytes(&b)?;

    let config = grading(Variant::Full);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let t1 = train_fold(default_data, &config, 0)?;
    let t2 = train_fold(default_data, &config, 0)?;
    let same_trajectory = bits(&t1.loss_trajectory) == bits(&t2.loss_trajectory);

    let small = synthesize(&GeneratorConfig {
        n_samples: 40,
        d: 8,
        m_min: 4,
        m_max: 8,
        ..GeneratorConfig::default()
    })?;
    let small_config = RunConfig {
        d: 8,
        prototypes: 4,
        ..config
    };
    let s1 = run_cv(&small, &small_config, false)?.summary.to_json()?;
    let s2 = run_cv(&small, &small_config, true)?.summary.to_json()?;
    let same_summary = s1 == s2;

    Ok(Outcome {
        pass: round_trips == 50 && same_dataset && same_trajectory && same_summary,
        detail: format!(
            "{round_trips}/50 bit-exact round trips; dataset identical {same_dataset}; \
             trajectory identical {same_trajectory}; summary JSON identical {same_summary}"
        ),
    })
}

fn consistency(
    default_data: &Dataset,
    runs: &[CvResult],
    no_modularity: Option<&CvResult>,
) -> Checked {
    let tmp = tempfile::tempdir()?;
    let (mut files, mut worst) = (0, 0.0f64);
    for (i, run) in runs.iter().enumerate() {
        let out = tmp.path().join(format!("run{i}"));
        write_results(&out, run)?;
        for fold in &run.folds {
            for (class, auc) in fold.metrics.class_auc.iter().enumerate() {
                let path = fold_dir(&out, fold.fold).join(format!("roc_class{class}.csv"));
                match auc {
                    Some(auc) => {
                        let area = trapezoid_area(&read_curve_csv(&path)?);
                        worst = worst.max((area - auc).abs());
                        files += 1;
                    }
                    None if path.exists() => worst = f64::INFINITY,
                    None => {}
                }
            }
        }
    }

    let zero_gamma = run_cv(
        default_data,
        &RunConfig {
            gamma: 0.0,
            ..grading(Variant::Full)
        },
        false,
    )?;
    let no_mod = match no_modularity {
        Some(r) => r.clone(),
        None => run_cv(default_data, &grading(Variant::NoModularity), false)?,
    };
    let same = zero_gamma.summary.to_json()? == no_mod.summary.to_json()?;
    Ok(Outcome {
        pass: files > 0 && worst <= ROC_AREA_TOLERANCE && same,
        detail: format!(
            "{files} ROC files, max |area - AUC| {worst:.2e} (<= {ROC_AREA_TOLERANCE:e}); \
             gamma=0 and no_modularity summaries identical: {same}"
        ),
    })
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient suite", gradient_suite());

    let oracles = match oracle_suite() {
        Ok(r) => r,
        Err(e) => {
            println!("FAIL oracle suites could not run: {e}");
            std::process::exit(1);
        }
    };
    ok &= report(2, "modularity oracle", modularity_oracle(&oracles));
    ok &= report(3, "permutation invariance", permutation_invariance());
    ok &= report(4, "metric oracles", metric_oracles(&oracles));

    let default_data = match synthesize(&GeneratorConfig::default()) {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL default dataset could not be generated: {e}");
            std::process::exit(1);
        }
    };
    let mut runs = Vec::new();
    ok &= report(
        5,
        "synthetic end-to-end",
        end_to_end(&default_data, &mut runs),
    );
    let mut no_modularity = None;
    ok &= report(
        6,
        "ablation direction",
        ablation_direction(&default_data, &mut runs, &mut no_modularity),
    );
    ok &= report(7, "survival spot values", survival_spot_values(&oracles));
    ok &= report(
        8,
        "format and determinism",
        determinism(&default_data).unwrap_or_else(failed),
    );
    ok &= report(
        9,
        "internal consistency",
        consistency(&default_data, &runs, no_modularity.as_ref()).unwrap_or_else(failed),
    );
    if !ok {
        std::process::exit(1);
    }
}

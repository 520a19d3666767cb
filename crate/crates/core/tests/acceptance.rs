//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Oracles here are written independently of the
//! library code they check.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use rayon::prelude::*;

use qsim::abfp::{abfp_qdq, abfp_scales, AbfpConfig};
use qsim::calibration::{calibrate_mse_with, DEFAULT_GRID_SIZE};
use qsim::engine::{backward_pwl, PwlContext};
use qsim::formats::{enumerate, round_to_format, NumericFormat};
use qsim::quant::{qdq, Granularity, Orientation, Partition, QuantSpec, ScaleSet, ScaleStorage, SignedMode};
use qsim::smoothing::{apply_smoothing, compute_smoothing, weight_input_maxes};
use qsim::sweep::{run_sweep, Cell, Method, Report, SweepConfig};
use qsim::tasks;
use qsim::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(id: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    let budget = limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
    println!(
        "{} [{id}] {name}: {}; {:.1}s{budget}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

// Oracle: decode every bit pattern of an IEEE-like minifloat directly, keeping
// the mantissa parity of each value for tie breaking.
fn float_oracle_table(exp_bits: u32, mant_bits: u32, reserve_top_mantissa: bool) -> Vec<(f64, bool)> {
    let bias = (1i32 << (exp_bits - 1)) - 1;
    let mut out = vec![(0.0, true)];
    for e in 0..(1u32 << exp_bits) {
        for m in 0..(1u32 << mant_bits) {
            if reserve_top_mantissa && e == (1 << exp_bits) - 1 && m == (1 << mant_bits) - 1 {
                continue;
            }
            let frac = m as f64 / (1u64 << mant_bits) as f64;
            let v = if e == 0 {
                frac * 2f64.powi(1 - bias)
            } else {
                (1.0 + frac) * 2f64.powi(e as i32 - bias)
            };
            if v > 0.0 {
                out.push((v, m % 2 == 0));
                out.push((-v, m % 2 == 0));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn int_oracle_table(bits: u32) -> Vec<(f64, bool)> {
    let top = (1i64 << (bits - 1)) - 1;
    (-top..=top).map(|v| (v as f64, v % 2 == 0)).collect()
}

fn nearest(table: &[(f64, bool)], x: f64) -> f64 {
    let mut best = table[0];
    for &c in &table[1..] {
        let (dc, db) = ((c.0 - x).abs(), (best.0 - x).abs());
        if dc < db || (dc == db && c.1 && !best.1) {
            best = c;
        }
    }
    best.0
}

fn format_oracle() -> Outcome {
    let cases: [(&str, Vec<(f64, bool)>); 5] = [
        ("int4", int_oracle_table(4)),
        ("int8", int_oracle_table(8)),
        ("e2m1", float_oracle_table(2, 1, false)),
        ("e1m2", float_oracle_table(1, 2, false)),
        ("e4m3", float_oracle_table(4, 3, true)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0usize;
    let mut maxes = Vec::new();
    for (name, oracle) in &cases {
        let f: NumericFormat = name.parse().unwrap();
        let table: Vec<f64> = oracle.iter().map(|v| v.0).collect();
        if enumerate(&f).unwrap().values != table {
            mismatches += 1;
        }
        let max = *table.last().unwrap();
        maxes.push(format!("{name} max {max}"));
        for i in 0..100_000 {
            // a quarter of the inputs are exact midpoints to exercise ties
            let x = if i % 4 == 0 {
                let k = rng.random_range(0..table.len() - 1);
                (table[k] + table[k + 1]) / 2.0
            } else {
                rng.random_range(-1.5 * max..1.5 * max)
            };
            if round_to_format(x, &f) != nearest(oracle, x) {
                mismatches += 1;
            }
        }
    }
    let e2m1 = cases[2].1.last().unwrap().0;
    let e4m3 = cases[4].1.last().unwrap().0;
    Outcome {
        pass: mismatches == 0 && e2m1 == 6.0 && e4m3 == 448.0,
        detail: format!("{mismatches} mismatches over 5x1e5 inputs; {}", maxes.join(", ")),
    }
}

fn quantizer_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut violations, mut saturated) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let bits = rng.random_range(2..=8u32);
        let alpha = 10f64.powf(rng.random_range(-3.0..3.0));
        let f = NumericFormat::Integer { bits };
        let top = ((1i64 << (bits - 1)) - 1) as f64;
        let scales = ScaleSet::from_alphas(Granularity::PerTensor, vec![alpha], &f, SignedMode::Symmetric).unwrap();
        let inside = rng.random_range(-alpha..=alpha);
        let outside =
            (alpha * rng.random_range(1.0..4.0) + f64::EPSILON * alpha).copysign(if i % 2 == 0 { 1.0 } else { -1.0 });
        let t = Tensor::vector(vec![inside, outside]);
        let y = qdq(&t, &QuantSpec::per_tensor(f), &scales).unwrap();
        let bound = alpha / (2.0 * top);
        let err = (y.data()[0] - inside).abs();
        worst = worst.max(err / bound);
        if err > bound {
            violations += 1;
        }
        if y.data()[1] != alpha.copysign(outside) {
            violations += 1;
        } else {
            saturated += 1;
        }
    }
    Outcome {
        pass: violations == 0,
        detail: format!("{violations} violations; worst err/bound {worst:.6}; {saturated}/10000 saturations exact"),
    }
}

fn heavy_tailed(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let t = StudentT::new(2.0).unwrap();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| t.sample(rng)).collect()).unwrap()
}

fn abfp_no_clip() -> Outcome {
    let f: NumericFormat = "int4".parse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut clipped, mut losses) = (0usize, 0usize);
    let mut ratio = 0.0f64;
    for _ in 0..100 {
        let t = heavy_tailed(&mut rng, 256, 256);
        let alpha = t.abs_max();
        let per_tensor = ScaleSet::from_alphas(Granularity::PerTensor, vec![alpha], &f, SignedMode::Symmetric).unwrap();
        let pt_err = qdq(&t, &QuantSpec::per_tensor(f), &per_tensor)
            .unwrap()
            .sum_squared_diff(&t)
            .unwrap();
        for n in [64, 128] {
            let cfg = AbfpConfig::new(n, Orientation::Columns, f);
            assert_eq!(cfg.scale_storage, ScaleStorage::Bf16);
            let scales = abfp_scales(&t, &cfg).unwrap();
            let part = Partition::new(t.shape(), cfg.granularity()).unwrap();
            clipped += t
                .data()
                .iter()
                .enumerate()
                .filter(|(i, x)| x.abs() > scales.alphas[part.unit_of(*i)])
                .count();
            let err = abfp_qdq(&t, &cfg).unwrap().sum_squared_diff(&t).unwrap();
            ratio = ratio.max(err / pt_err);
            if err > pt_err {
                losses += 1;
            }
        }
    }
    Outcome {
        pass: clipped == 0 && losses == 0,
        detail: format!(
            "{clipped} clipped elements; ABFP error above per-tensor on {losses}/200 (matrix, n) pairs; worst ABFP/per-tensor SSE ratio {ratio:.4}"
        ),
    }
}

// Oracle QDQ for symmetric integers, written out from the definition.
fn oracle_mse(samples: &[f64], alpha: f64, bits: u32) -> f64 {
    let top = ((1i64 << (bits - 1)) - 1) as f64;
    let step = alpha / top;
    samples
        .iter()
        .map(|&x| {
            let level = (x / step).clamp(-top, top).round_ties_even();
            let d = level * step - x;
            d * d
        })
        .sum::<f64>()
        / samples.len() as f64
}

fn mse_calibration() -> Outcome {
    const POINTS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut far = Vec::new();
    let mut worse_than_max = 0usize;
    let mut worst_steps = 0.0f64;
    for i in 0..50 {
        let bits = if i % 2 == 0 { 4 } else { 8 };
        let f = NumericFormat::Integer { bits };
        let samples: Vec<f64> = if i % 3 == 0 {
            heavy_tailed(&mut rng, 32, 32).into_data()
        } else {
            (0..1024)
                .map(|_| rng.random_range(-1.0..1.0) * rng.random_range(0.0..1.0f64).powi(2))
                .collect()
        };
        let absmax = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let grid = calibrate_mse_with(&samples, &f, SignedMode::Symmetric, DEFAULT_GRID_SIZE).unwrap();
        let (best_k, _) = (1..=POINTS)
            .into_par_iter()
            .map(|k| (k, oracle_mse(&samples, k as f64 / POINTS as f64 * absmax, bits)))
            .reduce(
                || (0, f64::INFINITY),
                |a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 > a.0) { b } else { a },
            );
        let brute = best_k as f64 / POINTS as f64 * absmax;
        let steps = (grid - brute).abs() / (absmax / DEFAULT_GRID_SIZE as f64);
        worst_steps = worst_steps.max(steps);
        if steps > 2.0 {
            far.push(format!("#{i} int{bits} {steps:.1} steps"));
        }
        if oracle_mse(&samples, grid, bits) > oracle_mse(&samples, absmax, bits) {
            worse_than_max += 1;
        }
    }
    Outcome {
        pass: far.is_empty() && worse_than_max == 0,
        detail: format!(
            "{} of 50 tensors beyond 2 grid steps{}; worst {worst_steps:.2} steps; {worse_than_max} worse than max calibration",
            far.len(),
            if far.is_empty() { String::new() } else { format!(" ({})", far.join(", ")) }
        ),
    }
}

fn smoothing_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst_rel, mut worst_ratio) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (m, k, n) = (
            rng.random_range(1..24),
            rng.random_range(1..24),
            rng.random_range(1..24),
        );
        let mut x: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        // a few outlier channels
        for j in 0..k {
            if rng.random_bool(0.15) {
                for i in 0..m {
                    x[i * k + j] *= 50.0;
                }
            }
        }
        let x = Tensor::matrix(m, k, x).unwrap();
        let w = Tensor::matrix(k, n, (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let act: Vec<f64> = (0..k)
            .map(|j| (0..m).map(|i| x.data()[i * k + j].abs()).fold(0.0, f64::max))
            .collect();
        let wmax = weight_input_maxes(&w).unwrap();
        let plan = compute_smoothing(&act, &wmax, 0.5).unwrap();
        let (xs, ws) = apply_smoothing(&x, &w, &plan).unwrap();
        let (y, ys) = (x.matmul(&w).unwrap(), xs.matmul(&ws).unwrap());
        for (a, b) in y.data().iter().zip(ys.data()) {
            if a.abs() >= 1e-6 {
                worst_rel = worst_rel.max((a - b).abs() / a.abs());
            }
        }
        let wsm = weight_input_maxes(&ws).unwrap();
        for j in 0..k {
            let xm = (0..m).map(|i| xs.data()[i * k + j].abs()).fold(0.0, f64::max);
            if act[j] > 0.0 && wmax[j] > 0.0 {
                worst_ratio = worst_ratio.max((xm / wsm[j] - 1.0).abs());
            }
        }
    }
    Outcome {
        pass: worst_rel <= 1e-5 && worst_ratio <= 1e-6,
        detail: format!("worst product rel error {worst_rel:.2e}; worst |ratio - 1| {worst_ratio:.2e}"),
    }
}

fn pwl_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut mask_errors, mut fd_errors, mut checked) = (0usize, 0usize, 0usize);
    for _ in 0..200 {
        let alpha = rng.random_range(0.1..5.0);
        let len = 64;
        let mut x: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0 * alpha..2.0 * alpha)).collect();
        x[0] = alpha;
        x[1] = -alpha;
        let t = Tensor::vector(x.clone());
        let up = Tensor::vector((0..len).map(|_| rng.random_range(-3.0..3.0)).collect());
        let scales = ScaleSet::from_alphas(
            Granularity::PerTensor,
            vec![alpha],
            &"int4".parse().unwrap(),
            SignedMode::Symmetric,
        )
        .unwrap();
        let ctx = PwlContext::capture(&t, &scales).unwrap();
        let got = backward_pwl(Some(&ctx), &up).unwrap();
        for i in 0..len {
            let mask = if x[i].abs() <= alpha { 1.0 } else { 0.0 };
            if got.data()[i] != up.data()[i] * mask {
                mask_errors += 1;
            }
            if (x[i].abs() - alpha).abs() > 1e-3 {
                let h = 1e-5;
                let clip = |v: f64| v.clamp(-alpha, alpha);
                let fd = (clip(x[i] + h) - clip(x[i] - h)) / (2.0 * h);
                checked += 1;
                if (fd - mask).abs() > 1e-6 {
                    fd_errors += 1;
                }
            }
        }
    }
    Outcome {
        pass: mask_errors == 0 && fd_errors == 0,
        detail: format!("{mask_errors} mask mismatches; {fd_errors} finite-difference mismatches of {checked} points"),
    }
}

fn lm_cells() -> Vec<Cell> {
    let mut qat = Cell::new("w4a4-abfp-qat", "int4", "int4", Method::AbfpQat);
    qat.qat_steps = 500;
    vec![
        Cell::new("w4a4-abfp", "int4", "int4", Method::Abfp),
        Cell::new("w4a8-abfp", "int4", "int8", Method::Abfp),
        Cell::new("w4a4-static-mse", "int4", "int4", Method::StaticMse),
        Cell::new("w4a8-abfp-sq", "int4", "int8", Method::AbfpSq),
        qat,
    ]
}

fn lm_orderings(task: &tasks::ToyTask) -> Outcome {
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cfg = SweepConfig {
        seed: 0,
        cells: lm_cells(),
    };
    let report = match run_sweep(&task.graph, &cfg, &task.dataset, jobs) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                pass: false,
                detail: format!("sweep failed: {e}"),
            };
        }
    };
    let slowest = report.timings.iter().map(|t| t.1).fold(0.0, f64::max);
    let loss = |id: &str| report.cell(id).and_then(|c| c.end_metric).unwrap_or(f64::NAN);
    let fp = loss("fp32");
    let (a4, a8, mse, sq, qat) = (
        loss("w4a4-abfp"),
        loss("w4a8-abfp"),
        loss("w4a4-static-mse"),
        loss("w4a8-abfp-sq"),
        loss("w4a4-abfp-qat"),
    );
    let orders = [("a", a8 <= a4), ("b", a4 <= mse), ("c", sq <= a8), ("d", qat <= a4)];
    let failed: Vec<&str> = orders.iter().filter(|o| !o.1).map(|o| o.0).collect();
    Outcome {
        pass: failed.is_empty() && slowest < 300.0,
        detail: format!(
            "fp32 {fp:.4}; (a) W4A8 {a8:.4} <= W4A4 {a4:.4}; (b) ABFP {a4:.4} <= static-MSE {mse:.4}; \
             (c) ABFP-SQ {sq:.4} <= ABFP {a8:.4} at W4A8; (d) QAT-500 {qat:.4} <= ABFP {a4:.4} at W4A4; \
             failed: [{}]; slowest cell {slowest:.1}s",
            failed.join(",")
        ),
    }
}

fn determinism(task: &tasks::ToyTask) -> Outcome {
    let mut qat = Cell::new("qat", "int4", "int4", Method::AbfpQat);
    qat.qat_steps = 20;
    let cfg = SweepConfig {
        seed: 7,
        cells: vec![
            Cell::new("abfp", "int4", "int4", Method::Abfp),
            Cell::new("sq", "int4", "int8", Method::AbfpSq),
            qat,
        ],
    };
    let render = |jobs| -> Option<(String, String)> {
        let r: Report = run_sweep(&task.graph, &cfg, &task.dataset, jobs).ok()?;
        Some((r.to_csv().ok()?, r.to_json()))
    };
    let (a, b) = (render(1), render(2));
    let same = a.is_some() && a == b;
    Outcome {
        pass: same,
        detail: format!(
            "CSV and JSON reports {} across two runs (jobs 1 and 2)",
            if same { "byte-identical" } else { "differ" }
        ),
    }
}

fn main() {
    println!("acceptance suite");
    let mut ok = true;
    ok &= check("1", "format oracle", Some(Duration::from_secs(10)), format_oracle);
    ok &= check("2", "quantizer error bound", None, quantizer_bound);
    ok &= check("3", "ABFP no-clip", Some(Duration::from_secs(60)), abfp_no_clip);
    ok &= check("4", "MSE calibration oracle", None, mse_calibration);
    ok &= check("5", "SmoothQuant identity", None, smoothing_identity);
    ok &= check("6", "PWL gradient", None, pwl_gradient);

    let start = Instant::now();
    let task = tasks::build("lm", 0).expect("toy LM");
    println!("      toy LM pretrained in {:.1}s", start.elapsed().as_secs_f64());
    ok &= check("7", "toy LM orderings", Some(Duration::from_secs(300)), || {
        lm_orderings(&task)
    });
    ok &= check("8", "sweep determinism", None, || determinism(&task));
    if !ok {
        std::process::exit(1);
    }
}

use qsim::engine::{evaluate, train_step};
use qsim::sweep::{run_sweep, Cell, Method, SweepConfig, REFERENCE_ID};
use qsim::tasks;

fn cells() -> Vec<Cell> {
    let mut abfp = Cell::new("w4a4-abfp", "int4", "int4", Method::Abfp);
    abfp.n = 4;
    let mse = Cell::new("w4a4-mse", "int4", "int4", Method::StaticMse);
    let mut sq = Cell::new("w4a8-sq", "int4", "int8", Method::AbfpSq);
    sq.n = 4;
    vec![abfp, mse, sq]
}

#[test]
fn cells_are_isolated_and_complete() {
    let t = tasks::build("spiral", 0).unwrap();
    let full = SweepConfig {
        seed: 5,
        cells: cells(),
    };
    let report = run_sweep(&t.graph, &full, &t.dataset, 2).unwrap();
    assert_eq!(report.cells[0].cell, REFERENCE_ID);

    let matmuls = t.graph.matmul_layers();
    for c in &report.cells {
        let names: Vec<_> = c.layers.iter().map(|l| l.layer.clone()).collect();
        assert_eq!(names, matmuls, "{}", c.cell);
    }
    assert!(report.cells.iter().all(|c| c.status == "ok"));

    let mut fewer = full.clone();
    fewer.cells.retain(|c| c.id != "w4a4-mse");
    let partial = run_sweep(&t.graph, &fewer, &t.dataset, 1).unwrap();
    for c in &partial.cells {
        assert_eq!(Some(c), report.cell(&c.cell));
    }
}

#[test]
fn sweep_reports_are_reproducible() {
    let t = tasks::build("regression", 2).unwrap();
    // diverges during QAT; the linear MSE head overflows on the first update
    let mut bad = Cell::new("bad", "int4", "int4", Method::AbfpQat);
    bad.lr = 1e300;
    bad.qat_steps = 20;
    let mut all = cells();
    all.push(bad);
    let cfg = SweepConfig { seed: 1, cells: all };
    let a = run_sweep(&t.graph, &cfg, &t.dataset, 1).unwrap();
    let b = run_sweep(&t.graph, &cfg, &t.dataset, 3).unwrap();
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.to_json(), b.to_json());
    let json: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    assert!(json["cells"][4]["end_metric"].is_null());
    let bad = a.cell("bad").unwrap();
    assert!(bad.status.contains("non-finite loss"), "{}", bad.status);
    assert!(bad.layers.iter().all(|l| l.mse.is_nan()));
    assert!(a.cells.iter().filter(|c| c.cell != "bad").all(|c| c.status == "ok"));
    let csv = a.to_csv().unwrap();
    assert!(csv.lines().any(|l| l.starts_with("bad,fc,,,,")), "{csv}");
}

#[test]
fn qat_improves_quantized_models() {
    // toy regression, int4 weights, ABFP n=4: loss falls within 200 steps
    let t = tasks::build("regression", 0).unwrap();
    let mut cell = Cell::new("w4-abfp", "int4", "fp32", Method::Abfp);
    cell.n = 4;
    let mut g = cell.prepare(&t.graph, &t.dataset, 0).unwrap();
    let train = t.dataset.train_pairs().unwrap();
    let first = evaluate(&g, &train[..1]).unwrap();
    for step in 0..200 {
        let (x, y) = &train[step % train.len()];
        train_step(&mut g, x, y, 1e-3, step).unwrap();
    }
    let last = evaluate(&g, &train[..1]).unwrap();
    assert!(last < first, "{last} >= {first}");

    // toy MLP, W4A4 ABFP, 500 steps. At n=4 the quantized spiral model is
    // already within noise of fp32, so the default n=64 is used.
    let t = tasks::build("spiral", 0).unwrap();
    let eval = t.dataset.eval_pairs().unwrap();
    let plain = Cell::new("abfp", "int4", "int4", Method::Abfp);
    let mut qat = plain.clone();
    qat.method = Method::AbfpQat;
    qat.qat_steps = 500;
    let before = evaluate(&plain.prepare(&t.graph, &t.dataset, 0).unwrap(), &eval).unwrap();
    let after = evaluate(&qat.prepare(&t.graph, &t.dataset, 0).unwrap(), &eval).unwrap();
    assert!(after < before, "{after} >= {before}");
}

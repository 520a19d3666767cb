use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use qsim::dataset::Dataset;
use qsim::engine::{calibrate, evaluate, train_step, CalibrationOptions};
use qsim::formats::{enumerate, NumericFormat};
use qsim::sweep::{run_sweep, Cell, Method, SweepConfig};
use qsim::{manifest, tasks, QsimError};

#[derive(Parser)]
#[command(name = "qsim", version, about = "Simulated mixed-precision quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the representable values of one or more formats.
    Formats {
        #[arg(required = true)]
        formats: Vec<String>,
        /// Only print the summary line.
        #[arg(long)]
        summary: bool,
    },
    /// Calibrate static quantizers and write a calibration file.
    Calibrate(RunArgs),
    /// Run a sweep of quantization cells and write a report.
    Sweep(RunArgs),
    /// Fine-tune with quantizers in the loop and write the updated model.
    Train(RunArgs),
    /// Write a pretrained toy model, its dataset and a sample sweep config.
    Toy {
        /// regression, spiral or lm
        #[arg(long, default_value = "lm")]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sweep config (TOML). Without it a single cell is built from the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value = "fp32")]
    wfmt: String,
    #[arg(long, default_value = "fp32")]
    afmt: String,
    #[arg(long)]
    ofmt: Option<String>,
    #[arg(long, default_value = "abfp")]
    method: String,
    #[arg(long, default_value_t = 0.5)]
    sq_strength: f64,
    /// Training steps (train) or QAT steps (abfp-qat cells).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    calib_batches: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<SweepConfig, QsimError> {
        let mut cfg = match &self.config {
            Some(path) => SweepConfig::read(path)?,
            None => {
                let mut cell = Cell::new("cell", &self.wfmt, &self.afmt, self.method.parse::<Method>()?);
                cell.ofmt = self.ofmt.clone();
                cell.n = self.n;
                cell.sq_strength = self.sq_strength;
                SweepConfig {
                    seed: self.seed,
                    cells: vec![cell],
                }
            }
        };
        for cell in &mut cfg.cells {
            if let Some(s) = self.steps {
                cell.qat_steps = s;
            }
            if let Some(lr) = self.lr {
                cell.lr = lr;
            }
            if let Some(k) = self.calib_batches {
                cell.calib_batches = k;
            }
        }
        if self.config.is_some() && self.seed != 0 {
            cfg.seed = self.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn single_cell(&self) -> Result<Cell, QsimError> {
        let mut cfg = self.config()?;
        match cfg.cells.len() {
            1 => Ok(cfg.cells.remove(0)),
            n => Err(QsimError::Config(format!("expected exactly one cell, config has {n}"))),
        }
    }

    fn load(&self) -> Result<(qsim::engine::ModelGraph, Dataset), QsimError> {
        Ok((manifest::read_model(&self.manifest)?, Dataset::read(&self.data)?))
    }
}

fn write(path: &Path, text: &str) -> Result<(), QsimError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn io(path: &Path, source: std::io::Error) -> QsimError {
    QsimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn cmd_formats(formats: &[String], summary: bool) -> Result<(), QsimError> {
    for s in formats {
        let f: NumericFormat = s.parse()?;
        let head = format!(
            "{f}: bits={} max={} min_normal={}",
            f.bit_width(),
            f.max_finite(),
            f.min_positive_normal()
        );
        match enumerate(&f) {
            Ok(table) => {
                println!(
                    "{head} encodings={} values={}",
                    f.finite_encodings(),
                    table.values.len()
                );
                if !summary {
                    let vals: Vec<String> = table.values.iter().map(|v| v.to_string()).collect();
                    println!("{}", vals.join(" "));
                }
            }
            Err(QsimError::WidthTooLarge { .. }) => println!("{head} (too wide to list)"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn cmd_calibrate(args: &RunArgs) -> Result<(), QsimError> {
    let (base, data) = args.load()?;
    let cell = args.single_cell()?;
    let g = cell.attach(&base, &data)?;
    let opts = CalibrationOptions {
        seed: args.seed,
        ..CalibrationOptions::default()
    };
    let table = calibrate(&g, &data.calibration_inputs(cell.calib_batches), &opts)?;
    table.write(&args.out)?;
    eprintln!("wrote {} entries to {}", table.len(), args.out.display());
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<(), QsimError> {
    let (base, data) = args.load()?;
    let cfg = args.config()?;
    let start = Instant::now();
    let report = run_sweep(&base, &cfg, &data, args.jobs)?;
    write(&args.out, &report.to_csv()?)?;
    write(&args.out.with_extension("json"), &report.to_json())?;
    // wall time stays out of the report so reruns are byte-identical
    let mut timing = String::from("cell,wall_seconds\n");
    for (id, secs) in &report.timings {
        timing.push_str(&format!("{id},{secs:.3}\n"));
    }
    timing.push_str(&format!("total,{:.3}\n", start.elapsed().as_secs_f64()));
    write(&args.out.with_extension("timing.csv"), &timing)?;
    print!("{}", report.summary());
    Ok(())
}

fn cmd_train(args: &RunArgs) -> Result<(), QsimError> {
    let (base, data) = args.load()?;
    let mut cell = args.single_cell()?;
    let steps = args.steps.unwrap_or(cell.qat_steps);
    cell.qat_steps = 0;
    let mut g = cell.prepare(&base, &data, args.seed)?;
    let train = data.train_pairs()?;
    let eval = data.eval_pairs()?;
    if train.is_empty() {
        return Err(QsimError::EmptySamples);
    }
    let before = evaluate(&g, &eval)?;
    let mut curve = String::from("step,loss\n");
    for step in 0..steps {
        let (x, y) = &train[step % train.len()];
        match train_step(&mut g, x, y, cell.lr, step) {
            Ok(loss) => curve.push_str(&format!("{step},{loss:e}\n")),
            Err(e) => {
                write(&args.out.join("loss_curve.csv"), &curve)?;
                return Err(e);
            }
        }
    }
    let after = evaluate(&g, &eval)?;
    write(&args.out.join("loss_curve.csv"), &curve)?;
    manifest::write_model(&g, &args.out.join("manifest.txt"))?;
    println!("eval loss {before:.6} -> {after:.6} after {steps} steps");
    Ok(())
}

const SAMPLE_SWEEP: &str = r#"seed = 0

[[cell]]
id = "w4a4-static-mse"
wfmt = "int4"
afmt = "int4"
method = "static-mse"

[[cell]]
id = "w4a4-abfp"
wfmt = "int4"
afmt = "int4"
method = "abfp"

[[cell]]
id = "w4a8-abfp"
wfmt = "int4"
afmt = "int8"
method = "abfp"

[[cell]]
id = "w4a8-abfp-sq"
wfmt = "int4"
afmt = "int8"
method = "abfp-sq"

[[cell]]
id = "w4a4-abfp-qat"
wfmt = "int4"
afmt = "int4"
method = "abfp-qat"
"#;

fn cmd_toy(task: &str, seed: u64, out: &Path) -> Result<(), QsimError> {
    let t = tasks::build(task, seed)?;
    manifest::write_model(&t.graph, &out.join("manifest.txt"))?;
    t.dataset.write(&out.join("data.qsds"))?;
    write(&out.join("sweep.toml"), SAMPLE_SWEEP)?;
    println!("wrote {} task to {}", t.name, out.display());
    Ok(())
}

fn exit_code(e: &QsimError) -> u8 {
    if e.is_usage() {
        1
    } else if e.is_numeric() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Formats { formats, summary } => cmd_formats(formats, *summary),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Train(a) => cmd_train(a),
        Command::Toy { task, seed, out } => cmd_toy(task, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

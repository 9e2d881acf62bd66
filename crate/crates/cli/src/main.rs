//! `prime`: fit, predict, average, simulate and report.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numerical failure.

mod error;
mod options;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prime_core::averaging::fit_prime_ma;
use prime_core::dataset::{
    complete_case_subset, format_real, load_csv, read_covariate_rows, read_csv_header, StructureFile,
};
use prime_core::fit::{fit_prime, PrimeFit};
use prime_core::simulation::{
    parse_methods, read_summary_csv, render_markdown, run_study, write_long_csv, write_ratio_long_csv,
    write_summary_csv, Method, ScenarioConfig,
};
use serde_json::json;

use error::CliError;
use options::{entropy_seed, read_input, require_file, resolve, ModelArgs};

#[derive(Parser, Debug)]
#[command(name = "prime", version, about = "Spline regression with kernel-imputed missing covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a partially linear model and write a fit file.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// TOML file naming the response, nonlinear and linear columns.
        #[arg(long)]
        structure: PathBuf,
        #[arg(long)]
        fit_out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Predict the mean for complete rows with a saved fit.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Predictions CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "NA")]
        missing_token: String,
    },
    /// Average single-nonlinear candidate models with jackknife weights.
    Average {
        #[arg(long)]
        data: PathBuf,
        /// Optional structure file; only its response and covariate list are used.
        #[arg(long)]
        structure: Option<PathBuf>,
        /// Response column when no structure file is given.
        #[arg(long, default_value = "y")]
        response: String,
        /// Rows to predict; the complete training rows when absent.
        #[arg(long)]
        predict_data: Option<PathBuf>,
        /// Output directory for weights.json and predictions.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run a Monte Carlo study described by a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma separated subset of prime, prime_ma, cc, mean_impute.
        #[arg(long, default_value = "prime,prime_ma,cc,mean_impute")]
        methods: String,
        /// Worker threads; all available cores when absent.
        #[arg(long)]
        workers: Option<usize>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario replication count.
        #[arg(long)]
        replications: Option<usize>,
        /// Output directory for summary.csv and replications.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        knots: Option<usize>,
        #[arg(long)]
        projection: Option<String>,
    },
    /// Merge summary CSVs into a Markdown table and a PE-ratio CSV.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory for report.md and pe_ratio.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit { data, structure, fit_out, model } => cmd_fit(&data, &structure, &fit_out, &model),
        Command::Predict { fit, data, out, missing_token } => {
            cmd_predict(&fit, &data, out.as_deref(), &missing_token)
        }
        Command::Average { data, structure, response, predict_data, out, model } => cmd_average(
            &data,
            structure.as_deref(),
            &response,
            predict_data.as_deref(),
            &out,
            &model,
        ),
        Command::Simulate { scenario, methods, workers, seed, replications, out, degree, knots, projection } => {
            cmd_simulate(SimulateArgs {
                scenario,
                methods,
                workers,
                seed,
                replications,
                out,
                degree,
                knots,
                projection,
            })
        }
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn provenance(command: &str, config: serde_json::Value) -> serde_json::Value {
    json!({
        "tool": "prime",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    path.with_file_name(name)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_fit(data: &Path, structure: &Path, fit_out: &Path, model: &ModelArgs) -> Result<(), CliError> {
    let structure_file = StructureFile::parse(&read_input(structure)?)?;
    require_file(data)?;
    let resolved = resolve(model)?;
    let table = load_csv(data, &structure_file, &resolved.load_options())?;
    let fit = fit_prime(&table, &resolved.fit)?;
    let prov = provenance(
        "fit",
        json!({
            "data": data,
            "structure": structure_file,
            "settings": resolved,
        }),
    );
    let mut w = BufWriter::new(File::create(fit_out)?);
    fit.write_fit_file(&mut w, &prov)?;
    w.flush()?;
    print_fit_report(&fit);
    Ok(())
}

fn print_fit_report(fit: &PrimeFit) {
    let d = &fit.diagnostics;
    println!("rows: {}", d.n_rows);
    println!("intercept: {}", format_real(fit.intercept));
    println!("linear coefficients:");
    for (col, b) in fit.beta_by_column() {
        println!("  {:<16} {}", fit.column_names[col], format_real(b));
    }
    println!(
        "imputed cells: {} ({} by projection)",
        d.imputation.imputed_cells, d.imputation.projected_cells
    );
    for (col, name) in fit.column_names.iter().enumerate() {
        let (none, under) = (d.imputation.no_donors[col], d.imputation.underflow[col]);
        if none + under > 0 {
            eprintln!("warning: column {name}: {none} cells without donors, {under} with vanishing kernel weights; mean fallback used");
        }
    }
    for &col in &d.imputation.degenerate_bandwidths {
        eprintln!("warning: column {} has zero spread; bandwidth floored", fit.column_names[col]);
    }
    println!("rank: {} of {} expected, condition {:.3e}", d.rank, d.expected_rank, d.condition);
    if d.rank_deficient {
        eprintln!("warning: design is rank deficient; minimum-norm coefficients reported");
    }
}

fn cmd_predict(fit_path: &Path, data: &Path, out: Option<&Path>, missing_token: &str) -> Result<(), CliError> {
    require_file(fit_path)?;
    require_file(data)?;
    let (fit, fit_provenance) = PrimeFit::read_fit_file(BufReader::new(File::open(fit_path)?))?;
    let rows = read_covariate_rows(File::open(data)?, &fit.column_names, missing_token)?;
    let pred = fit.predict(rows.view())?;
    let write = |w: &mut dyn Write| -> Result<(), CliError> {
        writeln!(w, "row,mu_hat")?;
        for (i, v) in pred.iter().enumerate() {
            writeln!(w, "{},{}", i + 1, format_real(*v))?;
        }
        w.flush()?;
        Ok(())
    };
    match out {
        Some(path) => {
            write(&mut BufWriter::new(File::create(path)?))?;
            let prov = provenance(
                "predict",
                json!({ "fit": fit_path, "data": data, "missing_token": missing_token, "fit_provenance": fit_provenance }),
            );
            write_json(&sidecar(path), &prov)?;
        }
        None => write(&mut std::io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_average(
    data: &Path,
    structure: Option<&Path>,
    response: &str,
    predict_data: Option<&Path>,
    out: &Path,
    model: &ModelArgs,
) -> Result<(), CliError> {
    require_file(data)?;
    let structure_file = match structure {
        Some(p) => {
            let s = StructureFile::parse(&read_input(p)?)?;
            StructureFile {
                response: s.response.clone(),
                nonlinear: Vec::new(),
                linear: s.covariates(),
            }
        }
        None => {
            let header = read_csv_header(data)?;
            if !header.iter().any(|h| h == response) {
                return Err(CliError::Data(format!("response column '{response}' not in {}", data.display())));
            }
            StructureFile {
                response: response.to_string(),
                nonlinear: Vec::new(),
                linear: header.into_iter().filter(|h| h != response).collect(),
            }
        }
    };
    let resolved = resolve(model)?;
    let table = load_csv(data, &structure_file, &resolved.load_options())?;
    let averaged = fit_prime_ma(&table, &resolved.fit)?;

    let (rows, labels): (_, Vec<usize>) = match predict_data {
        Some(p) => {
            require_file(p)?;
            let rows = read_covariate_rows(File::open(p)?, table.names(), &resolved.missing_token)?;
            let labels = (1..=rows.nrows()).collect();
            (rows, labels)
        }
        None => {
            let cc = complete_case_subset(&table);
            let rows = table.select_rows(&cc)?.x().clone();
            (rows, cc.iter().map(|i| i + 1).collect())
        }
    };
    let pred = averaged.predict(rows.view())?;

    create_dir(out)?;
    let mut w = BufWriter::new(File::create(out.join("predictions.csv"))?);
    writeln!(w, "row,mu_hat")?;
    for (label, v) in labels.iter().zip(pred.iter()) {
        writeln!(w, "{label},{}", format_real(*v))?;
    }
    w.flush()?;

    let d = &averaged.diagnostics;
    let weights: Vec<_> = averaged
        .candidates
        .iter()
        .zip(averaged.weights.as_array())
        .map(|(c, w)| json!({ "nonlinear": table.names()[c.column], "weight": w }))
        .collect();
    let report = json!({
        "weights": weights,
        "n0": d.n0,
        "n_cv": d.n_cv,
        "dropped_units": d.dropped_units.iter().map(|i| i + 1).collect::<Vec<_>>(),
        "objective": if averaged.objective.is_finite() { json!(averaged.objective) } else { json!(null) },
        "uniform_fallback": d.uniform_fallback,
        "fallback_reason": d.fallback_reason,
        "qp_sweeps": d.qp_sweeps,
        "qp_converged": d.qp_converged,
        "provenance": provenance("average", json!({
            "data": data,
            "structure": structure_file,
            "predict_data": predict_data,
            "settings": resolved,
        })),
    });
    write_json(&out.join("weights.json"), &report)?;

    println!("complete cases: {}", d.n0);
    for (c, w) in averaged.candidates.iter().zip(averaged.weights.as_array()) {
        println!("  {:<16} {:.6}", table.names()[c.column], w);
    }
    if d.uniform_fallback {
        eprintln!(
            "warning: uniform weights used ({})",
            d.fallback_reason.as_deref().unwrap_or("too few complete cases")
        );
    }
    Ok(())
}

struct SimulateArgs {
    scenario: PathBuf,
    methods: String,
    workers: Option<usize>,
    seed: Option<u64>,
    replications: Option<usize>,
    out: PathBuf,
    degree: Option<usize>,
    knots: Option<usize>,
    projection: Option<String>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (mut config, keys) = ScenarioConfig::parse_with_keys(&read_input(&args.scenario)?)?;
    let methods: Vec<Method> = parse_methods(&args.methods)?;
    match args.seed {
        Some(s) => config.seed = s,
        None if !keys.iter().any(|k| k == "seed") => {
            config.seed = entropy_seed();
            eprintln!("no seed given; using seed {}", config.seed);
        }
        None => {}
    }
    if let Some(r) = args.replications {
        config.replications = r;
    }
    config.validate()?;
    let model = ModelArgs {
        degree: args.degree,
        knots: args.knots,
        projection: args.projection.clone(),
        seed: Some(config.seed),
        ..Default::default()
    };
    let resolved = resolve(&model)?;
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let report = pool.install(|| run_study(&config, &methods, &resolved.fit))?;

    create_dir(&args.out)?;
    let mut w = BufWriter::new(File::create(args.out.join("summary.csv"))?);
    write_summary_csv(&report, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(args.out.join("replications.csv"))?);
    write_long_csv(&report, &mut w)?;
    w.flush()?;
    let prov = provenance(
        "simulate",
        json!({
            "scenario": config,
            "scenario_toml": config.to_toml(),
            "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
            "fit": resolved.fit,
            "sigma2": report.sigma2,
            "calibration": report.calibration,
            "mean_incomplete_fraction": report.mean_incomplete_fraction,
        }),
    );
    write_json(&args.out.join("provenance.json"), &prov)?;

    println!("incomplete rows: {:.3}", report.mean_incomplete_fraction);
    for s in &report.methods {
        println!(
            "  {:<12} PE {:.4} (SD {:.4})  failed {}",
            s.method.name(),
            s.pe,
            s.pe_sd,
            s.n_failed
        );
        if s.n_failed > 0 {
            eprintln!("warning: {} failed in {} replications", s.method.name(), s.n_failed);
        }
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for p in inputs {
        require_file(p)?;
        let parsed = read_summary_csv(File::open(p)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        rows.extend(parsed);
    }
    create_dir(out)?;
    std::fs::write(out.join("report.md"), render_markdown(&rows))?;
    let mut w = BufWriter::new(File::create(out.join("pe_ratio.csv"))?);
    write_ratio_long_csv(&rows, &mut w)?;
    w.flush()?;
    write_json(
        &sidecar(&out.join("report.md")),
        &provenance("report", json!({ "inputs": inputs })),
    )?;
    print!("{}", render_markdown(&rows));
    Ok(())
}

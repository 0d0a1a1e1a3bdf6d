use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use causex_core::schema::{load_dataset, FeatureSchema};
use causex_core::{explain, EngineConfig, ExplanationReport, Level};
use causex_service::store::{content_id, ExplanationStore};
use causex_service::{ModelSource, Service, ServiceError, ServiceResult};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "causex", version, about = "Local causal explanations for black-box classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one prediction and write the explanation document.
    Explain {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Zoo model spec, or a remote model `{"kind": "remote", "url": ...}`.
        #[arg(long)]
        model: PathBuf,
        /// JSON object keyed by feature name.
        #[arg(long)]
        observation: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the document here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print a text rendering at this level.
        #[arg(long, value_parser = ["customer", "analyst", "scientist"])]
        level: Option<String>,
    },
    /// Re-evaluate a stored certificate at another tolerance.
    Certify {
        #[arg(long)]
        explanation: PathBuf,
        #[arg(long)]
        epsilon: f64,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn read(path: &Path) -> ServiceResult<String> {
    std::fs::read_to_string(path).map_err(|e| ServiceError::Resource(format!("{}: {e}", path.display())))
}

fn run_explain(
    schema: &Path,
    data: &Path,
    model: &Path,
    observation: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    level: Option<&str>,
) -> ServiceResult<()> {
    let schema = Arc::new(FeatureSchema::from_json(&read(schema)?)?);
    if !data.exists() {
        return Err(ServiceError::Resource(format!("{}: no such file", data.display())));
    }
    let dataset = load_dataset(data, schema.clone())?;
    let id = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let spec: serde_json::Value = serde_json::from_str(&read(model)?)?;
    let model = ModelSource::from_json(&spec)?.build(&id, schema.clone())?;
    let x = schema.observation_from_json(&serde_json::from_str(&read(observation)?)?)?;
    let cfg = match config {
        Some(p) => EngineConfig::from_json(&read(p)?)?,
        None => EngineConfig::default(),
    };
    let report = explain(&model, &dataset, &x, &cfg)?;
    let doc = report.to_canonical();
    let level: Option<Level> = level.map(str::parse).transpose()?;
    match out {
        Some(path) => {
            std::fs::write(path, &doc).map_err(|e| ServiceError::Resource(format!("{}: {e}", path.display())))?;
            eprintln!("wrote {} (id {})", path.display(), content_id(&doc));
            if let Some(level) = level {
                print!("{}", report.render(level));
            }
        }
        None => match level {
            Some(level) => print!("{}", report.render(level)),
            None => print!("{doc}"),
        },
    }
    Ok(())
}

fn run_certify(path: &Path, epsilon: f64) -> ServiceResult<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(ServiceError::Validation(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let report = ExplanationReport::from_canonical(&read(path)?)?;
    let cert = report.certificate.recertify(epsilon);
    println!("certificate at epsilon {epsilon}: {}", if cert.passes { "PASS" } else { "FAIL" });
    println!("  (i) max error {} -> {}", cert.condition_i.max_error, cert.condition_i.holds);
    println!("  (ii) error {} -> {}", cert.condition_ii.error, cert.condition_ii.holds);
    println!("  (iii) testing intervention -> {}", cert.condition_iii.holds);
    Ok(())
}

fn run_serve(host: &str, port: u16, store: &Path) -> ServiceResult<()> {
    let service = Arc::new(Service::new(ExplanationStore::on_disk(store)?));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        causex_service::http::serve(listener, service).await
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Explain {
            schema,
            data,
            model,
            observation,
            config,
            out,
            level,
        } => run_explain(
            schema,
            data,
            model,
            observation,
            config.as_deref(),
            out.as_deref(),
            level.as_deref(),
        ),
        Command::Certify { explanation, epsilon } => run_certify(explanation, *epsilon),
        Command::Serve { port, store, host } => run_serve(host, *port, store),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

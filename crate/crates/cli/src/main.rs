use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use biot_ddp::decomposition::PrimalVariant;
use biot_ddp::fem::{write_coo, XiElement};
use biot_ddp::harness::{
    build_pipeline, fit_rows, run_case, sweep, write_csv, write_json, BcMode, ExperimentConfig, OracleMode,
    OutputFormat, Pattern, ResultRow,
};
use biot_ddp::linalg::TripletBuilder;
use biot_ddp::precond::LambdaVariant;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "biot-ddp", version, about = "Dual-primal domain decomposition for three-field Biot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single configuration.
    Run {
        #[command(flatten)]
        opts: Overrides,
        /// Write the PCG residual history as CSV.
        #[arg(long)]
        residuals: Option<PathBuf>,
        /// Write the explicitly probed interface matrix in coordinate format.
        #[arg(long)]
        dump_g: Option<PathBuf>,
    },
    /// Run every case of the configured sweep.
    Sweep {
        #[command(flatten)]
        opts: Overrides,
        /// Write a polylogarithmic fit of eig_max against H/h as JSON.
        #[arg(long)]
        fit: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Elem {
    P1,
    P0,
}

#[derive(Clone, Copy, ValueEnum)]
enum Primal {
    Vertex,
    VertexEdge,
}

#[derive(Clone, Copy, ValueEnum)]
enum LambdaPc {
    Dirichlet,
    Lumped,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Uniform,
    Checkerboard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bc {
    NeumannLeft,
    Dirichlet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    Auto,
    On,
    Off,
}

#[derive(Args)]
struct Overrides {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nx: Option<usize>,
    /// Subdomain grid as NxM.
    #[arg(long, value_parser = parse_grid)]
    sub: Option<[usize; 2]>,
    #[arg(long, value_enum)]
    elem: Option<Elem>,
    #[arg(long, value_enum)]
    primal: Option<Primal>,
    #[arg(long = "lambda-pc", value_enum)]
    lambda_pc: Option<LambdaPc>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long = "E")]
    e: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, value_enum)]
    pattern: Option<PatternArg>,
    #[arg(long, value_enum)]
    bc: Option<Bc>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, value_enum)]
    oracle: Option<Oracle>,
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NxM, got `{s}`"))?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok([a, b])
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.nx {
            cfg.nx = v;
        }
        if let Some(v) = self.sub {
            cfg.sub = v;
        }
        if let Some(v) = self.elem {
            cfg.elem = match v {
                Elem::P1 => XiElement::P1,
                Elem::P0 => XiElement::P0,
            };
        }
        if let Some(v) = self.primal {
            cfg.primal = match v {
                Primal::Vertex => PrimalVariant::Vertex,
                Primal::VertexEdge => PrimalVariant::VertexEdge,
            };
        }
        if let Some(v) = self.lambda_pc {
            cfg.lambda_pc = match v {
                LambdaPc::Dirichlet => LambdaVariant::Dirichlet,
                LambdaPc::Lumped => LambdaVariant::Lumped,
            };
        }
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = self.e {
            cfg.e = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.kappa {
            cfg.kappa = v;
        }
        if let Some(v) = self.pattern {
            cfg.pattern = match v {
                PatternArg::Uniform => Pattern::Uniform,
                PatternArg::Checkerboard => Pattern::Checkerboard,
            };
        }
        if let Some(v) = self.bc {
            cfg.bc = match v {
                Bc::NeumannLeft => BcMode::NeumannLeft,
                Bc::Dirichlet => BcMode::Dirichlet,
            };
        }
        if let Some(v) = self.tol {
            cfg.pcg.tol = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = self.format {
            cfg.format = match v {
                Format::Csv => OutputFormat::Csv,
                Format::Json => OutputFormat::Json,
            };
        }
        if let Some(v) = self.oracle {
            cfg.oracle = match v {
                Oracle::Auto => OracleMode::Auto,
                Oracle::On => OracleMode::On,
                Oracle::Off => OracleMode::Off,
            };
        }
        Ok(cfg)
    }
}

fn emit(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Result<()> {
    let sink: Box<dyn Write> = match &cfg.out {
        Some(p) if p != "-" => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {p}"))?)),
        _ => Box::new(io::stdout().lock()),
    };
    match cfg.format {
        OutputFormat::Csv => write_csv(rows, sink)?,
        OutputFormat::Json => write_json(rows, sink)?,
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            opts,
            residuals,
            dump_g,
        } => {
            let mut cfg = opts.resolve()?;
            if cfg.sweep.is_some() {
                log::warn!("ignoring the sweep section in single-run mode");
                cfg.sweep = None;
            }
            let out = run_case(&cfg)?;
            let r = &out.row;
            log::info!(
                "iter={} eig_min={:.5e} valid_eig_min={:.5e} eig_max={:.5e} wall={:.2}s",
                r.iter,
                r.eig_min,
                r.valid_eig_min,
                r.eig_max,
                r.wall_s
            );
            if let (Some(path), Some(res)) = (&residuals, &out.pcg) {
                res.write_residual_csv(BufWriter::new(File::create(path)?))?;
            }
            if let Some(path) = dump_g {
                let pipe = build_pipeline(&cfg)?;
                if pipe.op.dim() > 4000 {
                    bail!("refusing to probe an interface system of dimension {}", pipe.op.dim());
                }
                let g = pipe.op.probe()?;
                let mut t = TripletBuilder::new(g.nrows(), g.ncols());
                for j in 0..g.ncols() {
                    for i in 0..g.nrows() {
                        if g[(i, j)] != 0.0 {
                            t.push(i, j, g[(i, j)]);
                        }
                    }
                }
                write_coo(&t.build(), BufWriter::new(File::create(&path)?))?;
            }
            emit(&cfg, std::slice::from_ref(&out.row))?;
        }
        Command::Sweep { opts, fit } => {
            let cfg = opts.resolve()?;
            if cfg.sweep.is_none() {
                bail!("the configuration has no sweep section");
            }
            let rows = sweep(&cfg)?;
            emit(&cfg, &rows)?;
            if let Some(path) = fit {
                let f = fit_rows(&rows)?;
                serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &f)?;
                log::info!("fit C1={:.4} C2={:.4} R2={:.4}", f.c1, f.c2, f.r2);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::parse_grid;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("4x3"), Ok([4, 3]));
        assert_eq!(parse_grid(" 2 X 2 "), Ok([2, 2]));
        assert!(parse_grid("4").is_err());
        assert!(parse_grid("ax2").is_err());
    }
}

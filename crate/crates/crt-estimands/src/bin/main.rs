use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crt_estimands::{
    analyze, default_estimators, generate, load_observed_csv, load_potential_csv,
    marginal_estimand, precision_weighted_estimand, render_json, render_text, run_study,
    AnalyzeOptions, AveragingF, BoundaryPolicy, DgpConfig, Error, Measure, OutcomeKind, Result,
    Weighting,
};
use crt_estimands::oracle::cluster_specific_estimand;

#[derive(Parser)]
#[command(
    name = "crt-estimands",
    about = "Estimands and estimators for cluster-randomised trials",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full estimator grid on an observed-data CSV.
    Analyze(AnalyzeArgs),
    /// Compute oracle estimand values from a potential-outcome CSV.
    Truth(TruthArgs),
    /// Generate simulated datasets from a config file.
    Simulate(SimulateArgs),
    /// Run a simulation study scoring estimators against oracle truths.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    measure: Option<MeasureArg>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    max_cluster_size: Option<usize>,
    #[arg(long, value_enum, default_value = "error")]
    boundary_policy: BoundaryArg,
    #[arg(long, default_value_t = 0.75)]
    fg_bound: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatArg,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long)]
    input: PathBuf,
    /// Averaging scale for cluster-specific odds ratios.
    #[arg(long, value_enum, default_value = "log")]
    f: AveragingArg,
    /// Also report the precision-weighted difference at this rho.
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    replicates: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    replicates: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Or,
    Diff,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Error,
    Cc,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    Log,
    Identity,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Truth(args) => cmd_truth(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Verify(args) => cmd_verify(args),
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let data = load_observed_csv(&args.input)?;
    let options = AnalyzeOptions {
        measure: args.measure.map(|m| match m {
            MeasureArg::Or => Measure::OddsRatio,
            MeasureArg::Diff => Measure::Difference,
        }),
        min_cluster_size: args.min_cluster_size,
        max_cluster_size: args.max_cluster_size,
        boundary_policy: match args.boundary_policy {
            BoundaryArg::Error => BoundaryPolicy::Error,
            BoundaryArg::Cc => BoundaryPolicy::ContinuityCorrection,
        },
        fg_bound: args.fg_bound,
    };
    let grid = analyze(&data, &options)?;
    match args.format {
        FormatArg::Text => print!("{}", render_text(&grid)),
        FormatArg::Json => println!("{}", render_json(&grid)?),
    }
    Ok(())
}

fn cmd_truth(args: TruthArgs) -> Result<()> {
    let po = load_potential_csv(&args.input)?;
    let f = match args.f {
        AveragingArg::Log => AveragingF::Log,
        AveragingArg::Identity => AveragingF::Identity,
    };
    let mut lines = Vec::new();
    let measures: &[Measure] = match po.outcome_kind() {
        OutcomeKind::Binary => &[Measure::Difference, Measure::OddsRatio],
        OutcomeKind::Continuous => &[Measure::Difference],
    };
    for &measure in measures {
        let name = match measure {
            Measure::Difference => "difference",
            Measure::OddsRatio => "odds_ratio",
        };
        for (weighting, wname) in [
            (Weighting::ParticipantAverage, "participant_average"),
            (Weighting::ClusterAverage, "cluster_average"),
        ] {
            match marginal_estimand(&po, weighting, measure) {
                Ok(v) => lines.push(format!("marginal_{wname}_{name} = {v:.10}")),
                Err(e) => lines.push(format!("marginal_{wname}_{name} = NA ({e})")),
            }
            match cluster_specific_estimand(&po, weighting, measure, f) {
                Ok(v) => lines.push(format!("cluster_specific_{wname}_{name} = {v:.10}")),
                Err(e) => lines.push(format!("cluster_specific_{wname}_{name} = NA ({e})")),
            }
        }
    }
    if let Some(rho) = args.rho {
        let v = precision_weighted_estimand(&po, rho)?;
        lines.push(format!("precision_weighted_difference(rho={rho}) = {v:.10}"));
    }
    for line in lines {
        println!("{line}");
    }
    Ok(())
}

fn load_config(path: &PathBuf) -> Result<DgpConfig> {
    let text = fs::read_to_string(path)?;
    let config: DgpConfig =
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    fs::create_dir_all(&args.out)?;
    for rep in 0..args.replicates {
        let (po, obs) = generate(&config, rep)?;
        let mut observed = String::from("cluster_id,treatment,outcome\n");
        for c in obs.clusters() {
            for &y in &c.outcomes {
                observed.push_str(&format!(
                    "{},{},{y}\n",
                    c.cluster_id,
                    u8::from(c.treatment)
                ));
            }
        }
        let mut potential = String::from("cluster_id,y1,y0\n");
        for c in po.clusters() {
            for (y1, y0) in c.y1.iter().zip(&c.y0) {
                potential.push_str(&format!("{},{y1},{y0}\n", c.cluster_id));
            }
        }
        fs::write(args.out.join(format!("observed_{rep:04}.csv")), observed)?;
        fs::write(args.out.join(format!("potential_{rep:04}.csv")), potential)?;
    }
    println!(
        "wrote {} replicate(s) to {}",
        args.replicates,
        args.out.display()
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let estimators = default_estimators(config.outcome_kind);
    let report = run_study(&config, &estimators, args.replicates)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(&args.out, &json)?;
    for cell in &report.cells {
        let bias = cell
            .bias
            .map(|b| format!("{b:+.5}"))
            .unwrap_or_else(|| "NA".into());
        println!(
            "{:<28} mean={:.5} bias={} coverage={}",
            cell.estimator,
            cell.mean_estimate,
            bias,
            cell.coverage
                .map(|c| format!("{c:.3}"))
                .unwrap_or_else(|| "NA".into())
        );
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

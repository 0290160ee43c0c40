use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use svolkit::io::{self, RunManifest};
use svolkit::metrics::vol_metrics;
use svolkit::model::{simulate_path, ErrorSpec, ModelParams, Priors};
use svolkit::pipeline::{
    self, chain_summary, fit_two_stage, run_chain, Chain, ChainConfig, ChainSummary, FitConfig,
    HSource, Scenario,
};
use svolkit::plot;
use svolkit::samplers::{ModelKind, TargetSpec};
use svolkit::{Error, Result};

#[derive(Parser)]
#[command(name = "svolkit", version, about = "Bayesian stochastic-volatility estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a return/volatility path from the SV model
    Simulate(SimulateArgs),
    /// Fit one model to a return series
    Fit(FitArgs),
    /// Run the replication study (optionally sweeping c* or N)
    Replicate(ReplicateArgs),
    /// Compare an estimated volatility path against the truth
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Gaussian,
    StudentT,
    Ged,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gaussian,
    Nsvm1,
    Nsvm2,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Gaussian => ModelKind::Gaussian,
            ModelArg::Nsvm1 => ModelKind::Nsvm1,
            ModelArg::Nsvm2 => ModelKind::Nsvm2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HSourceArg {
    Mean,
    Last,
}

impl From<HSourceArg> for HSource {
    fn from(h: HSourceArg) -> Self {
        match h {
            HSourceArg::Mean => HSource::Mean,
            HSourceArg::Last => HSource::Last,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    obs_dist: Option<DistArg>,
    #[arg(long, value_enum)]
    vol_dist: Option<DistArg>,
    /// Student-t degrees of freedom (obs or vol, whichever is student-t)
    #[arg(long)]
    df: Option<f64>,
    /// GED shape parameter
    #[arg(long)]
    shape: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV: `t,y[,h]` or `date,close`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long)]
    cstar: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    h_source: Option<HSourceArg>,
    #[arg(long)]
    refit_rounds: Option<usize>,
    #[arg(long)]
    raw_plugin: bool,
    #[arg(long)]
    g_scale_raw: bool,
    /// Date filter for `date,close` input (inclusive)
    #[arg(long)]
    from: Option<NaiveDate>,
    #[arg(long)]
    to: Option<NaiveDate>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReplicateArgs {
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_enum)]
    obs_dist: Option<DistArg>,
    #[arg(long, value_enum)]
    vol_dist: Option<DistArg>,
    #[arg(long)]
    df: Option<f64>,
    #[arg(long)]
    shape: Option<f64>,
    /// Comma-separated model list, e.g. gaussian,nsvm1,nsvm2
    #[arg(long, value_delimiter = ',', value_enum)]
    models: Option<Vec<ModelArg>>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn: Option<usize>,
    #[arg(long)]
    cstar: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    h_source: Option<HSourceArg>,
    /// Sweep the envelope multiplier over these values instead of a single run
    #[arg(long, value_delimiter = ',')]
    sweep_cstar: Option<Vec<f64>>,
    /// Sweep the sample size over these values instead of a single run
    #[arg(long, value_delimiter = ',')]
    sweep_n: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Truth CSV (`t,y,h` from simulate)
    #[arg(long)]
    truth: PathBuf,
    /// Estimate CSV (`t,mean,median,mode` from fit)
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Flag > config file > SVOLKIT_SEED env (seed only) > default.
struct Defaults {
    config: HashMap<String, String>,
}

impl Defaults {
    fn load(path: Option<&PathBuf>) -> Result<Self> {
        let config = match path {
            Some(p) => io::load_config(p)?.into_iter().collect(),
            None => HashMap::new(),
        };
        Ok(Self { config })
    }

    fn get<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.config.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("config key `{key}` = `{raw}`: {e}"))),
            None => Ok(default),
        }
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(raw) = self.config.get("seed") {
            return raw
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("config key `seed` = `{raw}`: {e}")));
        }
        match std::env::var("SVOLKIT_SEED") {
            Ok(raw) => raw
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("SVOLKIT_SEED = `{raw}`: {e}"))),
            Err(_) => Ok(0),
        }
    }
}

fn error_spec(dist: DistArg, df: Option<f64>, shape: Option<f64>) -> Result<ErrorSpec> {
    match dist {
        DistArg::Gaussian => Ok(ErrorSpec::Gaussian),
        DistArg::StudentT => {
            let df = df.ok_or_else(|| Error::InvalidConfig("student-t requires --df".into()))?;
            ErrorSpec::student_t(df)
        }
        DistArg::Ged => {
            let s = shape.ok_or_else(|| Error::InvalidConfig("ged requires --shape".into()))?;
            ErrorSpec::ged(s)
        }
    }
}

fn dist_name(d: DistArg) -> &'static str {
    match d {
        DistArg::Gaussian => "gaussian",
        DistArg::StudentT => "student-t",
        DistArg::Ged => "ged",
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let d = Defaults::load(args.config.as_ref())?;
    let alpha = d.get(args.alpha, "alpha", -0.15)?;
    let delta = d.get(args.delta, "delta", 0.985)?;
    let sigma = d.get(args.sigma, "sigma", 0.15)?;
    let n = d.get(args.n, "n", 500)?;
    let seed = d.seed(args.seed)?;
    let obs_dist = args.obs_dist.unwrap_or(DistArg::Gaussian);
    let vol_dist = args.vol_dist.unwrap_or(DistArg::Gaussian);

    let params = ModelParams::new(alpha, delta, sigma)?;
    let obs = error_spec(obs_dist, args.df, args.shape)?;
    let vol = error_spec(vol_dist, args.df, args.shape)?;

    let start = Instant::now();
    let path = simulate_path(&params, &obs, &vol, n, seed)?;
    std::fs::create_dir_all(&args.out)?;
    io::write_sim_csv(args.out.join("series.csv"), &path.returns, Some(&path.volatility))?;

    let mut m = RunManifest::new("simulate", seed);
    m.push("alpha", alpha);
    m.push("delta", delta);
    m.push("sigma", sigma);
    m.push("n", n);
    m.push("obs_dist", dist_name(obs_dist));
    m.push("vol_dist", dist_name(vol_dist));
    if let Some(df) = args.df {
        m.push("df", df);
    }
    if let Some(s) = args.shape {
        m.push("shape", s);
    }
    m.push("elapsed_ms", start.elapsed().as_millis());
    m.write(args.out.join("manifest.txt"))?;
    println!("wrote {}", args.out.join("series.csv").display());
    Ok(())
}

fn load_returns(args: &FitArgs) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(&args.data)?;
    let header = text.lines().next().unwrap_or("");
    if header.trim_start().starts_with("date") {
        let series = io::load_price_csv(&args.data)?;
        series.filter_dates(args.from, args.to).log_returns()
    } else {
        Ok(io::read_sim_csv(&args.data)?.y)
    }
}

fn write_param_csv(path: &Path, chain: &Chain) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "alpha", "delta", "sigma2"])?;
    for i in 0..chain.len() {
        w.write_record([
            i.to_string(),
            format!("{:.16e}", chain.alpha_draws[i]),
            format!("{:.16e}", chain.delta_draws[i]),
            format!("{:.16e}", chain.sigma2_draws[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_vol_csv(path: &Path, vs: &pipeline::VolatilitySummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "mean", "median", "mode"])?;
    for t in 0..vs.mean.len() {
        w.write_record([
            t.to_string(),
            format!("{:.16e}", vs.mean[t]),
            format!("{:.16e}", vs.median[t]),
            format!("{:.16e}", vs.mode[t]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_vol_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path)?;
    {
        let headers = reader.headers()?;
        let cols: Vec<&str> = headers.iter().map(str::trim).collect();
        if cols != ["t", "mean", "median", "mode"] {
            return Err(Error::Ingestion {
                row: 1,
                message: format!("expected header `t,mean,median,mode`, got `{}`", cols.join(",")),
            });
        }
    }
    let (mut mean, mut median, mut mode) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let get = |idx: usize| -> Result<f64> {
            record
                .get(idx)
                .ok_or_else(|| Error::Ingestion { row: i + 2, message: "short row".into() })?
                .trim()
                .parse()
                .map_err(|e| Error::Ingestion { row: i + 2, message: format!("{e}") })
        };
        mean.push(get(1)?);
        median.push(get(2)?);
        mode.push(get(3)?);
    }
    Ok((mean, median, mode))
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let d = Defaults::load(args.config.as_ref())?;
    let model: ModelKind = args.model.unwrap_or(ModelArg::Nsvm2).into();
    let iters = d.get(args.iters, "iters", 10_000)?;
    let burn = d.get(args.burn, "burn", 5_000)?;
    let cstar = d.get(args.cstar, "cstar", 1.2)?;
    let seed = d.seed(args.seed)?;
    let refit_rounds = d.get(args.refit_rounds, "refit_rounds", 1)?;
    let h_source: HSource = args.h_source.unwrap_or(HSourceArg::Mean).into();

    let y = load_returns(&args)?;
    let mut chain_cfg = ChainConfig::new(iters, burn, cstar, seed);
    chain_cfg.raw_plugin = args.raw_plugin;
    chain_cfg.g_scale_raw = args.g_scale_raw;
    let priors = Priors::default();

    let start = Instant::now();
    // For the semiparametric models the parameter summaries come from the
    // stage-2 chain, while the volatility path pools the stage-1 and stage-2
    // draws (an equal-weight two-model average with lower Monte Carlo
    // variance than either chain alone).
    let (chain, summary) = match model {
        ModelKind::Gaussian => {
            let chain = run_chain(&y, &priors, &chain_cfg, &TargetSpec::gaussian())?;
            let summary = chain_summary(&chain);
            (chain, summary)
        }
        kind => {
            let mut fit_cfg = FitConfig::new(chain_cfg.clone());
            fit_cfg.h_source = h_source;
            fit_cfg.refit_rounds = refit_rounds;
            let fit = fit_two_stage(&y, &priors, &fit_cfg, kind)?;
            let summary =
                ChainSummary { params: fit.summary.clone(), volatility: fit.volatility_summary() };
            (fit.stage2, summary)
        }
    };
    let nonstat = chain.delta_nonstationary_fraction();
    if nonstat > 0.01 {
        eprintln!("warning: {:.1}% of delta draws are nonstationary (|delta| >= 1)", 100.0 * nonstat);
    }

    std::fs::create_dir_all(&args.out)?;
    write_param_csv(&args.out.join("params.csv"), &chain)?;
    write_vol_csv(&args.out.join("volatility.csv"), &summary.volatility)?;
    std::fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let overlay = plot::volatility_overlay(
        &y,
        &[(model.to_string(), summary.volatility.mean.clone())],
    )?;
    std::fs::write(args.out.join("overlay.svg"), overlay)?;

    let mut m = RunManifest::new("fit", seed);
    m.push("data", args.data.display());
    m.push("model", model);
    m.push("iters", iters);
    m.push("burn", burn);
    m.push("cstar", cstar);
    m.push("h_source", if h_source == HSource::Mean { "mean" } else { "last" });
    m.push("refit_rounds", refit_rounds);
    m.push("raw_plugin", chain_cfg.raw_plugin);
    m.push("g_scale_raw", chain_cfg.g_scale_raw);
    m.push("n", y.len());
    m.push("accept_h", format!("{:.4}", chain.accept.h.rate()));
    m.push("delta_nonstationary", format!("{nonstat:.4}"));
    m.push("elapsed_ms", start.elapsed().as_millis());
    m.write(args.out.join("manifest.txt"))?;
    println!(
        "fit {model}: alpha={:.4} delta={:.4} sigma_nu={:.4}",
        summary.params.alpha.mean, summary.params.delta.mean, summary.params.sigma_nu.mean
    );
    Ok(())
}

fn write_mse_csv(path: &Path, report: &pipeline::ReplicationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "param", "mse_mean", "mse_median", "mse_mode"])?;
    for m in &report.mse {
        for (param, t) in [("alpha", m.alpha), ("delta", m.delta), ("sigma_nu", m.sigma_nu)] {
            w.write_record([
                m.model.to_string(),
                param.to_string(),
                format!("{:.16e}", t.mean),
                format!("{:.16e}", t.median),
                format!("{:.16e}", t.mode),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_boxplots(out: &Path, report: &pipeline::ReplicationReport) -> Result<()> {
    use pipeline::ParamSummary;
    let params: [(&str, fn(&pipeline::RepEstimate) -> ParamSummary, f64); 3] = [
        ("alpha", |r| r.alpha, report.truth.alpha),
        ("delta", |r| r.delta, report.truth.delta),
        ("sigma_nu", |r| r.sigma_nu, report.truth.sigma_nu),
    ];
    let stats: [(&str, fn(ParamSummary) -> f64); 3] =
        [("mean", |s| s.mean), ("median", |s| s.median), ("mode", |s| s.mode)];
    for (pname, get, truth) in params {
        for (sname, stat) in stats {
            let groups: Vec<plot::BoxGroup> = report
                .models
                .iter()
                .enumerate()
                .map(|(i, m)| plot::BoxGroup {
                    label: m.to_string(),
                    values: report.estimates.iter().map(|row| stat(get(&row[i]))).collect(),
                })
                .collect();
            let svg = plot::boxplot(&format!("{pname} ({sname})"), &groups, truth)?;
            std::fs::write(out.join(format!("boxplot_{pname}_{sname}.svg")), svg)?;
        }
    }
    Ok(())
}

fn cmd_replicate(args: ReplicateArgs) -> Result<()> {
    let d = Defaults::load(args.config.as_ref())?;
    let alpha = d.get(args.alpha, "alpha", -0.15)?;
    let delta = d.get(args.delta, "delta", 0.985)?;
    let sigma = d.get(args.sigma, "sigma", 0.15)?;
    let n = d.get(args.n, "n", 500)?;
    let reps = d.get(args.reps, "reps", 20)?;
    let iters = d.get(args.iters, "iters", 2_000)?;
    let burn = d.get(args.burn, "burn", 1_000)?;
    let cstar = d.get(args.cstar, "cstar", 1.2)?;
    let seed = d.seed(args.seed)?;
    let obs_dist = args.obs_dist.unwrap_or(DistArg::Gaussian);
    let vol_dist = args.vol_dist.unwrap_or(DistArg::Gaussian);
    let models: Vec<ModelKind> = args
        .models
        .unwrap_or_else(|| vec![ModelArg::Gaussian, ModelArg::Nsvm1, ModelArg::Nsvm2])
        .into_iter()
        .map(Into::into)
        .collect();

    let mut fit = FitConfig::new(ChainConfig::new(iters, burn, cstar, seed));
    fit.h_source = args.h_source.unwrap_or(HSourceArg::Mean).into();
    let scenario = Scenario {
        params: ModelParams::new(alpha, delta, sigma)?,
        obs_spec: error_spec(obs_dist, args.df, args.shape)?,
        vol_spec: error_spec(vol_dist, args.df, args.shape)?,
        n,
        reps,
        priors: Priors::default(),
        fit,
    };

    std::fs::create_dir_all(&args.out)?;
    let start = Instant::now();
    let mut m = RunManifest::new("replicate", seed);
    m.push("alpha", alpha);
    m.push("delta", delta);
    m.push("sigma", sigma);
    m.push("n", n);
    m.push("reps", reps);
    m.push("iters", iters);
    m.push("burn", burn);
    m.push("cstar", cstar);
    m.push("obs_dist", dist_name(obs_dist));
    m.push("vol_dist", dist_name(vol_dist));
    m.push(
        "models",
        models.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );

    if let Some(grid) = &args.sweep_cstar {
        let entries = pipeline::c_star_sweep(grid, &scenario, &models)?;
        let mut w = csv::Writer::from_path(args.out.join("sweep_cstar.csv"))?;
        w.write_record(["c_star", "model", "alpha_mse", "delta_mse", "sigma_nu_mse"])?;
        for e in &entries {
            w.write_record([
                format!("{:.16e}", e.c_star),
                e.model.to_string(),
                format!("{:.16e}", e.alpha_mse),
                format!("{:.16e}", e.delta_mse),
                format!("{:.16e}", e.sigma_nu_mse),
            ])?;
        }
        w.flush()?;
        m.push("sweep_cstar", grid.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
    } else if let Some(sizes) = &args.sweep_n {
        let mut w = csv::Writer::from_path(args.out.join("sweep_n.csv"))?;
        w.write_record(["n", "model", "param", "mse_mean", "mse_median", "mse_mode"])?;
        for &size in sizes {
            let mut sc = scenario.clone();
            sc.n = size;
            let report = pipeline::replicate(&sc, &models)?;
            for mm in &report.mse {
                for (param, t) in
                    [("alpha", mm.alpha), ("delta", mm.delta), ("sigma_nu", mm.sigma_nu)]
                {
                    w.write_record([
                        size.to_string(),
                        mm.model.to_string(),
                        param.to_string(),
                        format!("{:.16e}", t.mean),
                        format!("{:.16e}", t.median),
                        format!("{:.16e}", t.mode),
                    ])?;
                }
            }
        }
        w.flush()?;
        m.push("sweep_n", sizes.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
    } else {
        let report = pipeline::replicate(&scenario, &models)?;
        write_mse_csv(&args.out.join("mse.csv"), &report)?;
        write_boxplots(&args.out, &report)?;
        std::fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report.mse)?)?;
    }
    m.push("elapsed_ms", start.elapsed().as_millis());
    m.write(args.out.join("manifest.txt"))?;
    println!("replicate: wrote {}", args.out.display());
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let truth = io::read_sim_csv(&args.truth)?;
    let h_true = truth
        .h
        .ok_or_else(|| Error::InvalidConfig("truth CSV must include an `h` column".into()))?;
    let (mean, median, mode) = read_vol_csv(&args.estimate)?;

    let m_mean = vol_metrics(&mean, &h_true)?;
    let m_median = vol_metrics(&median, &h_true)?;
    let m_mode = vol_metrics(&mode, &h_true)?;

    std::fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("metrics.csv"))?;
    w.write_record([
        "srmse_mean",
        "srmse_median",
        "srmse_mode",
        "mae_mean",
        "mae_median",
        "mae_mode",
        "mape_mean",
        "mape_median",
        "mape_mode",
    ])?;
    w.write_record([
        format!("{:.16e}", m_mean.srmse),
        format!("{:.16e}", m_median.srmse),
        format!("{:.16e}", m_mode.srmse),
        format!("{:.16e}", m_mean.mae),
        format!("{:.16e}", m_median.mae),
        format!("{:.16e}", m_mode.mae),
        format!("{:.16e}", m_mean.mape),
        format!("{:.16e}", m_median.mape),
        format!("{:.16e}", m_mode.mape),
    ])?;
    w.flush()?;
    println!(
        "metrics: srmse(mean)={:.6} mae(mean)={:.6} mape(mean)={:.6}",
        m_mean.srmse, m_mean.mae, m_mean.mape
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Replicate(args) => cmd_replicate(args),
        Command::Metrics(args) => cmd_metrics(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bayes_impute::checkpoint::Checkpoint;
use bayes_impute::data::{generate_synthetic, load_dir, normalize, save_dir, save_grid_csv, Dataset};
use bayes_impute::pipeline::{analyze, completed_grid, evaluate, fit, prepare, MetricReport, Prepared, ProtocolConfig};
use bayes_impute::train::EPOCH_LOG_HEADER;
use bayes_impute::uncertainty::{mc_forward, write_distribution_csv, write_per_feature_csv, write_reliability_csv};
use bayes_impute::Error;
use clap::{Arg, ArgAction, ArgMatches, Command};
use log::info;

use config::{flag_name, RunConfig, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn category(&self) -> (&'static str, u8) {
        match self {
            CliError::Usage(_) => ("usage", 2),
            CliError::Io { .. } => ("io", 3),
            CliError::Core(e) => match e {
                Error::Config(_) => ("config", 2),
                Error::NonFinite(_) | Error::Domain { .. } => ("numeric", 4),
                Error::Parse { .. } => ("parse", 3),
                Error::Io { .. } => ("io", 3),
                Error::Checkpoint(_) => ("checkpoint", 3),
                _ => ("data", 3),
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn cli() -> Command {
    let mut cmd = Command::new("bayes-impute")
        .about("Bayesian recurrent imputation and outcome prediction for irregular time series")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(Arg::new("config").long("config").global(true).value_name("PATH").help("key = value config file"))
        .arg(Arg::new("out").long("out").global(true).value_name("DIR").help("output directory"))
        .arg(Arg::new("force").long("force").global(true).action(ArgAction::SetTrue).help("write into a non-empty output directory"))
        .arg(Arg::new("data").long("data").global(true).value_name("DIR").help("dataset directory (values.csv, labels.csv, optional ground_truth.csv)"))
        .arg(Arg::new("checkpoint").long("checkpoint").global(true).value_name("PATH").help("trained model file"));
    for &(key, default, help) in KEYS {
        let mut arg = Arg::new(key)
            .long(flag_name(key))
            .global(true)
            .help(format!("{help} [default: {default}]"))
            .help_heading("Config keys");
        if default == "false" {
            arg = arg.num_args(0..=1).default_missing_value("true").value_name("BOOL");
        } else {
            arg = arg.value_name("VALUE");
        }
        cmd = cmd.arg(arg);
    }
    cmd.subcommand(Command::new("synth").about("generate a synthetic dataset into --out"))
        .subcommand(Command::new("train").about("train on --data, writing model.ckpt and epoch_log.csv into --out"))
        .subcommand(Command::new("eval").about("score --checkpoint on the held-out split of --data; prints metrics JSON"))
        .subcommand(Command::new("impute").about("fill every missing cell of --data, writing imputed.csv into --out"))
        .subcommand(Command::new("analyze").about("write uncertainty plot data for the held-out split into --out"))
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.merge_file(Path::new(path))?;
    }
    for &(key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn required<'a>(m: &'a ArgMatches, name: &str) -> Result<&'a Path> {
    m.get_one::<String>(name)
        .map(Path::new)
        .ok_or_else(|| CliError::Usage(format!("--{name} is required for this command")))
}

/// Creates `dir`, refusing a non-empty one unless forced, and echoes the config.
fn open_out(dir: &Path, force: bool, cfg: &RunConfig) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join("config.txt"), &cfg.render())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = generate_synthetic(&cfg.synth()?)?;
    save_dir(&ds, out)?;
    info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let raw = load_dir(data, cfg.steps()?)?;
    let model = cfg.model(raw.features())?;
    let train_cfg = cfg.train()?;
    let prepared = prepare(&raw, &cfg.protocol()?, None)?;
    info!(
        "training {} weights on {} samples ({} held out)",
        model.parameter_count(),
        prepared.train.len(),
        prepared.test.len()
    );
    let mut fitted = fit(&prepared, &model, &train_cfg, cfg.seed()?)?;
    fitted.checkpoint.settings = cfg.split_settings();
    fitted.checkpoint.save(&out.join("model.ckpt"))?;
    let mut log = format!("{EPOCH_LOG_HEADER}\n");
    for e in &fitted.log {
        log.push_str(&e.csv_row());
        log.push('\n');
    }
    write(&out.join("epoch_log.csv"), &log)?;
    info!("final loss {:e}", fitted.checkpoint.meta.final_loss);
    Ok(())
}

/// Rebuilds the held-out split the checkpoint was trained against.
fn held_out_split(cfg: &RunConfig, ckpt: &Checkpoint, data: &Path) -> Result<Prepared> {
    let recorded = |key: &str| ckpt.setting(key).unwrap_or(cfg.get(key)).to_string();
    let mut split_cfg = cfg.clone();
    for key in config::SPLIT_KEYS {
        split_cfg.set(key, &recorded(key))?;
    }
    let raw = load_dir(data, split_cfg.steps()?)?;
    check_features(ckpt, &raw)?;
    let protocol: ProtocolConfig = split_cfg.protocol()?;
    Ok(prepare(&raw, &protocol, Some(&ckpt.norm))?)
}

fn check_features(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ckpt.model.features != ds.features() {
        return Err(Error::Config(format!(
            "checkpoint expects {} features, data has {}",
            ckpt.model.features,
            ds.features()
        ))
        .into());
    }
    Ok(())
}

fn metrics_json(report: &MetricReport) -> String {
    serde_json::to_string_pretty(report).expect("metric report serializes") + "\n"
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Checkpoint, data: &Path, out: Option<&Path>) -> Result<()> {
    let prepared = held_out_split(cfg, ckpt, data)?;
    let (report, _) = evaluate(&ckpt.model, &ckpt.posterior, &prepared.test, cfg.mc_samples()?, cfg.seed()?)?;
    let json = metrics_json(&report);
    if let Some(dir) = out {
        write(&dir.join("metrics.json"), &json)?;
    }
    print!("{json}");
    Ok(())
}

fn cmd_impute(cfg: &RunConfig, ckpt: &Checkpoint, data: &Path, out: &Path) -> Result<()> {
    let steps = match ckpt.setting("t") {
        Some(t) => t.parse().map_err(|_| Error::Checkpoint(format!("bad recorded grid length `{t}`")))?,
        None => cfg.steps()?,
    };
    let raw = load_dir(data, steps)?;
    check_features(ckpt, &raw)?;
    let ds = normalize(&raw, &ckpt.norm)?;
    let k = cfg.mc_samples()?;
    let mc = mc_forward(&ckpt.model, &ckpt.posterior, &ds, k, cfg.seed()?)?;
    let filled = completed_grid(&ds, &mc);
    let m = ds.features();
    let grid: Vec<f64> = filled
        .iter()
        .enumerate()
        .map(|(c, &z)| if raw.observed[c] { raw.values[c] } else { ckpt.norm.denormalize_value(c % m, z) })
        .collect();
    save_grid_csv(&raw, &grid, &out.join("imputed.csv"))?;
    if k > 1 {
        let mut var = vec![0.0; grid.len()];
        for (&c, v) in mc.cells.iter().zip(mc.imputation_variance()?) {
            let s = ckpt.norm.std[c % m];
            var[c] = v * s * s;
        }
        save_grid_csv(&raw, &var, &out.join("imputed_variance.csv"))?;
    } else {
        eprintln!("note: mc_samples = 1, so no variance file is written");
    }
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, ckpt: &Checkpoint, data: &Path, out: &Path) -> Result<()> {
    let prepared = held_out_split(cfg, ckpt, data)?;
    if prepared.test.eval_cell_count() == 0 {
        return Err(Error::Degenerate(
            "the held-out split has no hidden cells to score; analysis needs mar_rate > 0 and observed test cells".into(),
        )
        .into());
    }
    let (_, mc) = evaluate(&ckpt.model, &ckpt.posterior, &prepared.test, cfg.mc_samples()?, cfg.seed()?)?;
    let a = analyze(&mc, &prepared.test)?;
    write_distribution_csv(&a.distribution, prepared.test.cell(a.distribution_cell), &out.join("fig_distribution.csv"))?;
    write_reliability_csv(&a.curve, &out.join("fig_reliability.csv"))?;
    write_per_feature_csv(&a.per_feature, &out.join("fig_per_feature.csv"))?;
    Ok(())
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let cfg = resolve(sub)?;
    let force = sub.get_flag("force");
    let out = sub.get_one::<String>("out").map(Path::new);
    match name {
        "synth" => {
            let out = required(sub, "out")?;
            cfg.synth()?;
            open_out(out, force, &cfg)?;
            cmd_synth(&cfg, out)
        }
        "train" => {
            let (data, out) = (required(sub, "data")?, required(sub, "out")?);
            cfg.train()?;
            open_out(out, force, &cfg)?;
            cmd_train(&cfg, data, out)
        }
        _ => {
            let data = required(sub, "data")?;
            let ckpt = Checkpoint::load(required(sub, "checkpoint")?)?;
            match name {
                "eval" => {
                    if let Some(dir) = out {
                        open_out(dir, force, &cfg)?;
                    }
                    cmd_eval(&cfg, &ckpt, data, out)
                }
                "impute" => {
                    let out = required(sub, "out")?;
                    open_out(out, force, &cfg)?;
                    cmd_impute(&cfg, &ckpt, data, out)
                }
                _ => {
                    let out = required(sub, "out")?;
                    open_out(out, force, &cfg)?;
                    cmd_analyze(&cfg, &ckpt, data, out)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::from(code)
        }
    }
}

//! `tailor` command line.
//!
//! Every config key is a `--<dotted.key>` flag. Exit codes: 0 success,
//! 2 usage or config error, 1 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::ablation::{self, GridSpec, Preset};
use crate::backbone::Backbone;
use crate::checkpoint;
use crate::config::{self, ConfigFile, Kind, RunConfig, SCHEMA};
use crate::dataset::{self, PairSpec};
use crate::error::{Error, Result};
use crate::evaluation::{self, generate::MANIFEST_FILE, METRICS_FILE};
use crate::run;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable naming the local model directory of the real backend.
pub const MODEL_DIR_ENV: &str = crate::backbone::real::MODEL_DIR_ENV;

fn value_name(kind: Kind) -> String {
    match kind {
        Kind::Bool => "BOOL".into(),
        Kind::Int => "INT".into(),
        Kind::Float => "FLOAT".into(),
        Kind::Str => "STR".into(),
        Kind::Enum(options) => options.join("|"),
    }
}

fn key_args(cmd: Command, filter: impl Fn(&str) -> bool) -> Command {
    let mut cmd = cmd;
    for spec in SCHEMA.iter().filter(|s| filter(s.key)) {
        let help = if spec.nullable {
            format!("{} [nullable]", spec.help)
        } else {
            spec.help.to_string()
        };
        let mut arg = Arg::new(spec.key)
            .long(spec.key)
            .value_name(value_name(spec.kind))
            .help(help)
            .help_heading("Config keys");
        if spec.key == "eval.prompts" {
            arg = arg.visible_alias("prompts");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn config_arg() -> Arg {
    Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(clap::value_parser!(PathBuf))
        .help("YAML run config; may define the pair inline")
}

fn out_arg(help: &'static str) -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("DIR")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn checkpoint_arg() -> Arg {
    Arg::new("checkpoint")
        .required(true)
        .value_name("CHECKPOINT")
        .value_parser(clap::value_parser!(PathBuf))
        .help("checkpoint file (e.g. <run>/checkpoints/final)")
}

fn is_eval_key(k: &str) -> bool {
    k.starts_with("eval.")
}

pub fn command() -> Command {
    let all = |_: &str| true;
    Command::new("tailor")
        .about("Component-controllable personalization: training, generation, evaluation and ablations")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!("Environment:\n  {MODEL_DIR_ENV}  local model directory for backbone.kind=real\n  RUST_LOG  log filter"))
        .subcommand(key_args(
            Command::new("train")
                .about("Run warm-up and balancing; prints the run directory")
                .arg(config_arg())
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .value_name("CHECKPOINT")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("continue from a post_warmup checkpoint of the same config"),
                ),
            all,
        ))
        .subcommand(key_args(
            Command::new("evaluate")
                .about("Generate the prompt suite and score it; prints the metrics path")
                .arg(checkpoint_arg())
                .arg(out_arg("output directory (default: <run>/eval)")),
            is_eval_key,
        ))
        .subcommand(key_args(
            Command::new("generate")
                .about("Generate the prompt suite without scoring; prints the image manifest path")
                .arg(checkpoint_arg())
                .arg(out_arg("output directory (default: <run>/eval)")),
            is_eval_key,
        ))
        .subcommand(key_args(
            Command::new("ablate")
                .about("Train every variant of a grid with a shared seed; writes ablation.csv and ablation.json")
                .arg(config_arg())
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("grid spec (YAML)"),
                )
                .arg(
                    Arg::new("preset")
                        .long("preset")
                        .value_name("degradation|teacher|warmup")
                        .action(ArgAction::Append)
                        .help("built-in variant set; repeatable"),
                )
                .arg(
                    Arg::new("jobs")
                        .long("jobs")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .help("variants trained concurrently"),
                )
                .arg(
                    Arg::new("evaluate")
                        .long("evaluate")
                        .action(ArgAction::SetTrue)
                        .help("also generate and score images for each variant"),
                )
                .arg(out_arg("output directory (default: <output.dir>/ablation-<pair_id>)")),
            all,
        ))
        .subcommand(key_args(
            Command::new("inspect-masks")
                .about("Write effective, latent and attention masks of every reference image as PNG")
                .arg(config_arg())
                .arg(out_arg("output directory (default: <output.dir>/masks-<pair_id>)")),
            all,
        ))
        .subcommand(
            Command::new("make-toy-pair")
                .about("Write a synthetic concept/component pair; prints the pair file path")
                .arg(out_arg("output directory").required(true))
                .arg(
                    Arg::new("resolution")
                        .long("resolution")
                        .value_name("N")
                        .default_value("64")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(
                    Arg::new("images")
                        .long("images")
                        .value_name("N")
                        .default_value("3")
                        .value_parser(clap::value_parser!(usize))
                        .help("reference images per sample"),
                )
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                ),
        )
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    SCHEMA
        .iter()
        .filter_map(|s| {
            m.try_get_one::<String>(s.key)
                .ok()
                .flatten()
                .map(|v| (s.key.to_string(), v.clone()))
        })
        .collect()
}

struct Resolved {
    file: Option<ConfigFile>,
    overrides: Vec<(String, String)>,
    config: RunConfig,
    pair: PairSpec,
}

fn resolve_run(m: &ArgMatches) -> Result<Resolved> {
    let path = m.get_one::<PathBuf>("config");
    let file = path.map(|p| config::read_config_file(p)).transpose()?;
    let overrides = overrides(m);
    let mut cfg = config::resolve(file.as_ref(), &overrides)?;
    let pair = run::load_run_pair(&mut cfg, path.map(PathBuf::as_path).zip(file.as_ref()))?;
    Ok(Resolved {
        file,
        overrides,
        config: cfg,
        pair,
    })
}

fn cmd_train(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let r = resolve_run(m)?;
    let resume = m
        .get_one::<PathBuf>("resume")
        .map(|p| checkpoint::load_checkpoint(p))
        .transpose()?;
    let mut backbone = run::build_backbone(&r.config, &r.pair)?;
    let res = run::train_run(&r.config, r.pair, &mut backbone, resume.as_ref())?;
    print_path(out, &res.dir)
}

fn eval_dir(m: &ArgMatches, ckpt: &Path) -> PathBuf {
    m.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| {
        ckpt.parent()
            .and_then(Path::parent)
            .map(|run| run.join("eval"))
            .unwrap_or_else(|| PathBuf::from("eval"))
    })
}

fn load_for_eval(m: &ArgMatches) -> Result<(run::Trained, RunConfig, PathBuf)> {
    let ckpt = m.get_one::<PathBuf>("checkpoint").expect("required");
    let trained = run::load_trained(ckpt)?;
    let cfg = trained.config.with_overrides(&overrides(m))?;
    Ok((trained, cfg, eval_dir(m, ckpt)))
}

fn cmd_evaluate(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let (t, cfg, dir) = load_for_eval(m)?;
    evaluation::evaluate(&t.backbone, &t.adapter, &t.pair, &cfg.eval, &dir)?;
    print_path(out, &dir.join(METRICS_FILE))
}

fn cmd_generate(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let (t, cfg, dir) = load_for_eval(m)?;
    let suite = evaluation::suite_from_config(&cfg.eval)?;
    evaluation::generate_eval_images(&t.backbone, &t.adapter, &t.pair, &suite, &(&cfg.eval).into(), &dir, cfg.eval.jobs)?;
    print_path(out, &dir.join(MANIFEST_FILE))
}

fn cmd_ablate(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let mut grid = match m.get_one::<PathBuf>("grid") {
        Some(p) => GridSpec::from_file(p)?,
        None => GridSpec {
            variants: Vec::new(),
            evaluate: false,
        },
    };
    if let Some(names) = m.get_many::<String>("preset") {
        for name in names {
            let preset = Preset::ALL
                .into_iter()
                .find(|p| p.as_str() == name)
                .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`")))?;
            grid.variants.extend(preset.variants());
        }
    }
    grid.evaluate |= m.get_flag("evaluate");
    grid.validate()?;
    let jobs = m.get_one::<usize>("jobs").copied();
    if jobs == Some(0) {
        return Err(Error::config("jobs", "must be at least 1"));
    }
    let r = resolve_run(m)?;
    let dir = m
        .get_one::<PathBuf>("out")
        .cloned()
        .unwrap_or_else(|| r.config.output.dir.join(format!("ablation-{}", r.pair.pair_id)));
    let planned = ablation::plan(r.file.as_ref(), &r.overrides, &r.config, &r.pair, &grid, &dir)?;
    let table = ablation::run_ablation(&planned, &r.pair, grid.evaluate, jobs)?;
    table.save(&dir)?;
    print_path(out, &dir.join(ablation::TABLE_CSV))?;
    print_path(out, &dir.join(ablation::TABLE_JSON))
}

fn cmd_inspect_masks(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let r = resolve_run(m)?;
    let dir = m
        .get_one::<PathBuf>("out")
        .cloned()
        .unwrap_or_else(|| r.config.output.dir.join(format!("masks-{}", r.pair.pair_id)));
    let (latent, attn) = match r.config.backbone.kind {
        config::BackboneKind::Toy => {
            let bb = run::build_backbone(&r.config, &r.pair)?;
            (bb.latent_dims().spatial(), bb.attn_dims())
        }
        // Latent grid of an 8x-downsampling autoencoder.
        config::BackboneKind::Real => {
            let side = r.pair.resolution / 8;
            let a = r.config.backbone.attn_size;
            ((side, side), (a, a))
        }
    };
    let masks = dataset::prepare_masks(&r.pair, latent, attn)?;
    for (n, sets) in masks.iter().enumerate() {
        for (k, set) in sets.iter().enumerate() {
            for (kind, mask) in [("effective", &set.effective), ("latent", &set.latent), ("attention", &set.attention)] {
                let path = dir.join(format!("s{n}_i{k}_{kind}.png"));
                dataset::save_png(&dataset::mask_to_gray(mask).into(), &path)?;
            }
        }
    }
    print_path(out, &dir)
}

fn cmd_make_toy_pair(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let dir = m.get_one::<PathBuf>("out").expect("required");
    let res = *m.get_one::<usize>("resolution").expect("default");
    let images = *m.get_one::<usize>("images").expect("default");
    if res < 8 || res % 4 != 0 {
        return Err(Error::config("resolution", "must be a multiple of 4, at least 8"));
    }
    if images == 0 {
        return Err(Error::config("images", "must be at least 1"));
    }
    let pair = dataset::synthetic_pair(res, images, *m.get_one::<u64>("seed").expect("default"));
    let path = dataset::save_pair(&pair, dir)?;
    print_path(out, &path)
}

fn print_path(out: &mut dyn Write, path: &Path) -> Result<()> {
    writeln!(out, "{}", path.display()).map_err(|e| Error::io("stdout", e))
}

fn dispatch(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    match m.subcommand() {
        Some(("train", sub)) => cmd_train(sub, out),
        Some(("evaluate", sub)) => cmd_evaluate(sub, out),
        Some(("generate", sub)) => cmd_generate(sub, out),
        Some(("ablate", sub)) => cmd_ablate(sub, out),
        Some(("inspect-masks", sub)) => cmd_inspect_masks(sub, out),
        Some(("make-toy-pair", sub)) => cmd_make_toy_pair(sub, out),
        _ => unreachable!("subcommand required"),
    }
}

/// Runs one invocation and returns its exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    match dispatch(&matches, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

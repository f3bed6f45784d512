//! `embedit`: every editing pipeline, the inpainting benchmark, path length
//! and the job service behind one command.
//!
//! Edit subcommands take one flag per recipe key (`w_iterations` becomes
//! `--w-iterations`), so anything in a `--recipe` file can be given on the
//! command line and flags win.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use embedit_core::metrics::{self, PathMode, BENCHMARK_RESOLUTIONS};
use embedit_core::models::TOY_RESOLUTION;
use embedit_core::recipe::{self, EditKind, EditRecipe, FieldType, FileAssets};
use embedit_core::{apps, Error as CoreError, Mask, Models};
use serde_json::{json, Value};

/// A failure reported as one line of JSON on standard error.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub field: Option<String>,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: "usage",
            field: None,
            message: message.into(),
            exit_code: 2,
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: "runtime",
            field: None,
            message: message.into(),
            exit_code: 1,
        }
    }

    pub fn to_line(&self) -> String {
        let mut error = json!({ "code": self.code, "message": self.message });
        if let Some(f) = &self.field {
            error["field"] = json!(f);
        }
        json!({ "error": error }).to_string()
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Recipe { field, reason } => Self {
                code: "invalid_recipe",
                field: Some(field),
                message: reason,
                exit_code: 2,
            },
            CoreError::Config(_)
            | CoreError::Contract(_)
            | CoreError::Image { .. }
            | CoreError::Load { .. }
            | CoreError::Corrupt(_) => Self {
                code: "invalid_input",
                field: None,
                message: e.to_string(),
                exit_code: 2,
            },
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

const EDIT_COMMANDS: [(&str, EditKind, &str); 8] = [
    ("reconstruct", EditKind::Reconstruct, "Embed an image into style and noise codes"),
    ("crossover", EditKind::Crossover, "Combine two images along a mask"),
    ("inpaint", EditKind::Inpaint, "Fill a masked region"),
    ("scribble", EditKind::Scribble, "Turn scribbles into a photo-realistic local edit"),
    ("style-transfer", EditKind::LocalStyle, "Restyle the region outside a mask"),
    ("attr-transfer", EditKind::AttributeTransfer, "Copy a masked attribute between images"),
    ("channel-avg", EditKind::ChannelAverage, "Average two images' activations"),
    ("interp", EditKind::MaskedInterpolation, "Interpolate a masked attribute"),
];

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn model_args(cmd: Command) -> Command {
    cmd.arg(
        Arg::new("toy")
            .long("toy")
            .action(ArgAction::SetTrue)
            .help("Use the seeded desk-scale generator (iteration counts divided by 5)"),
    )
    .arg(
        Arg::new("resolution")
            .long("resolution")
            .value_parser(clap::value_parser!(usize))
            .default_value(TOY_RESOLUTION.to_string())
            .help("Toy generator resolution"),
    )
    .arg(
        Arg::new("weights")
            .long("weights")
            .value_parser(clap::value_parser!(PathBuf))
            .conflicts_with("toy")
            .help("Generator weight container"),
    )
    .arg(
        Arg::new("vgg-weights")
            .long("vgg-weights")
            .value_parser(clap::value_parser!(PathBuf))
            .help("Feature network weight container"),
    )
}

fn edit_command(name: &'static str, kind: EditKind, about: &'static str) -> Command {
    let mut cmd = Command::new(name)
        .about(about)
        .arg(
            Arg::new("recipe")
                .long("recipe")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Recipe file; flags override its values"),
        )
        .arg(
            Arg::new("out")
                .long("out")
                .value_parser(clap::value_parser!(PathBuf))
                .default_value("out")
                .help("Output directory"),
        )
        .arg(Arg::new("json").long("json").action(ArgAction::SetTrue).help("Print run metrics as JSON"))
        .arg(
            Arg::new("verbose")
                .long("verbose")
                .short('v')
                .action(ArgAction::SetTrue)
                .help("Print progress to standard error"),
        );
    cmd = model_args(cmd);
    for spec in kind.fields() {
        let mut arg = Arg::new(spec.key).long(flag_name(spec.key)).help(spec.help);
        arg = match spec.ty {
            FieldType::Flag => arg.action(ArgAction::SetTrue),
            FieldType::Asset => arg.value_parser(clap::value_parser!(PathBuf)),
            _ => arg,
        };
        if spec.key == "image" {
            arg = arg.visible_alias("in");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

pub fn command() -> Command {
    let mut cmd = Command::new("embedit")
        .about("Masked embedding and activation editing for style-based generators")
        .subcommand_required(true)
        .version(env!("CARGO_PKG_VERSION"));
    for (name, kind, about) in EDIT_COMMANDS {
        cmd = cmd.subcommand(edit_command(name, kind, about));
    }
    cmd.subcommand(
        Command::new("bench-inpaint")
            .about("Score inpainting outputs against ground truths")
            .arg(Arg::new("gt").long("gt").required(true).value_parser(clap::value_parser!(PathBuf)))
            .arg(Arg::new("masks").long("masks").value_parser(clap::value_parser!(PathBuf)))
            .arg(
                Arg::new("method")
                    .long("method")
                    .required(true)
                    .action(ArgAction::Append)
                    .help("NAME=DIR, repeatable"),
            )
            .arg(
                Arg::new("res")
                    .long("res")
                    .action(ArgAction::Append)
                    .value_parser(clap::value_parser!(usize))
                    .help("Resolution, repeatable (default 1024, 512, 256)"),
            )
            .arg(Arg::new("out").long("out").value_parser(clap::value_parser!(PathBuf)))
            .arg(Arg::new("json").long("json").action(ArgAction::SetTrue)),
    )
    .subcommand(
        model_args(Command::new("ppl").about("Perceptual path length of (masked) interpolation"))
            .arg(
                Arg::new("samples")
                    .long("samples")
                    .value_parser(clap::value_parser!(usize))
                    .default_value("100"),
            )
            .arg(
                Arg::new("mode")
                    .long("mode")
                    .value_parser(["full", "end"])
                    .default_value("full"),
            )
            .arg(
                Arg::new("seed")
                    .long("seed")
                    .value_parser(clap::value_parser!(u64))
                    .default_value("0"),
            )
            .arg(Arg::new("mask").long("mask").value_parser(clap::value_parser!(PathBuf)))
            .arg(Arg::new("json").long("json").action(ArgAction::SetTrue)),
    )
    .subcommand(
        model_args(Command::new("serve").about("Run the HTTP job service"))
            .arg(Arg::new("home").long("home").value_parser(clap::value_parser!(PathBuf)))
            .arg(Arg::new("workers").long("workers").value_parser(clap::value_parser!(usize)))
            .arg(
                Arg::new("addr")
                    .long("addr")
                    .value_parser(clap::value_parser!(SocketAddr))
                    .default_value("127.0.0.1:8080"),
            )
            .arg(
                Arg::new("preview-every")
                    .long("preview-every")
                    .value_parser(clap::value_parser!(usize)),
            ),
    )
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(stdout, "{e}")?;
                return Ok(());
            }
            let text = e.to_string();
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            return Err(CliError::usage(line));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if let Some((_, kind, _)) = EDIT_COMMANDS.iter().find(|(n, _, _)| *n == name) {
        return run_edit(name, *kind, sub, stdout);
    }
    match name {
        "bench-inpaint" => run_bench(sub, stdout),
        "ppl" => run_ppl(sub, stdout),
        "serve" => run_serve(sub),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn load_models(m: &ArgMatches, env_weights: bool) -> Result<(Models, bool), CliError> {
    let weights = m
        .get_one::<PathBuf>("weights")
        .cloned()
        .or_else(|| env_weights.then(|| std::env::var_os("I2S_WEIGHTS").map(PathBuf::from)).flatten());
    let toy = m.get_flag("toy");
    match (weights, toy) {
        (Some(w), false) => Ok((Models::load(&w, m.get_one::<PathBuf>("vgg-weights").map(PathBuf::as_path))?, false)),
        (_, true) => Ok((Models::toy(*m.get_one::<usize>("resolution").expect("has default"))?, true)),
        (None, false) => Err(CliError::usage("either --toy or --weights is required")),
    }
}

fn absolute(base: &Path, p: &str) -> String {
    base.join(p).to_string_lossy().into_owned()
}

/// Recipe file values first, then flags. Asset paths become absolute:
/// file values relative to the recipe file, flags to the working directory.
fn build_recipe(kind: EditKind, m: &ArgMatches) -> Result<EditRecipe, CliError> {
    let cwd = std::env::current_dir()?;
    let mut recipe = match m.get_one::<PathBuf>("recipe") {
        Some(path) => {
            let r = EditRecipe::load(path)?;
            if r.kind() != kind {
                return Err(CliError {
                    code: "invalid_recipe",
                    field: Some("kind".into()),
                    message: format!("recipe is `{}` but the command runs `{kind}`", r.kind()),
                    exit_code: 2,
                });
            }
            let base = cwd.join(path.parent().unwrap_or(Path::new("")));
            r.map_assets(|_, v| Ok(absolute(&base, v)))?
        }
        None => EditRecipe::new(kind),
    };
    for spec in kind.fields() {
        match spec.ty {
            FieldType::Flag => {
                if m.get_flag(spec.key) {
                    recipe.set(spec.key, "true");
                }
            }
            FieldType::Asset => {
                if let Some(p) = m.get_one::<PathBuf>(spec.key) {
                    recipe.set(spec.key, cwd.join(p).to_string_lossy().into_owned());
                }
            }
            _ => {
                if let Some(v) = m.get_one::<String>(spec.key) {
                    recipe.set(spec.key, v.clone());
                }
            }
        }
    }
    Ok(recipe)
}

fn stages_json(stages: &[embedit_core::optim::StageRecord]) -> Value {
    stages
        .iter()
        .map(|s| json!({ "name": s.name, "psnr": s.psnr, "final_loss": s.final_loss }))
        .collect()
}

fn run_edit(name: &str, kind: EditKind, m: &ArgMatches, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut recipe = build_recipe(kind, m)?;
    recipe.validate()?;
    let (models, toy) = load_models(m, false)?;
    if toy {
        recipe.set_default("iteration_divisor", apps::TOY_ITERATION_DIVISOR.to_string());
    }
    let assets = FileAssets { root: PathBuf::from("/") };
    recipe::preflight(models.networks(), &recipe, &assets)?;
    let verbose = m.get_flag("verbose");
    let output = recipe::run_recipe(models.networks(), &recipe, &assets, &mut |stage, p| {
        if verbose {
            eprintln!("{stage} {} {:e}", p.iteration, p.loss);
        }
    })?;
    let out = m.get_one::<PathBuf>("out").expect("has default");
    let files = output.write_dir(out)?;
    std::fs::write(out.join("recipe.txt"), recipe.to_string())?;
    if m.get_flag("json") {
        let doc = json!({
            "command": name,
            "stages": stages_json(&output.stages),
            "final_loss": output.final_loss(),
            "files": files.iter().map(|p| p.to_string_lossy()).collect::<Vec<_>>(),
        });
        writeln!(stdout, "{doc}")?;
    }
    Ok(())
}

fn run_bench(m: &ArgMatches, stdout: &mut dyn Write) -> Result<(), CliError> {
    let methods = m
        .get_many::<String>("method")
        .expect("required")
        .map(|s| match s.split_once('=') {
            Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), PathBuf::from(dir))),
            _ => Err(CliError::usage(format!("--method expects NAME=DIR, got `{s}`"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let resolutions: Vec<usize> = match m.get_many::<usize>("res") {
        Some(r) => r.copied().collect(),
        None => BENCHMARK_RESOLUTIONS.to_vec(),
    };
    let gt = m.get_one::<PathBuf>("gt").expect("required");
    let report = metrics::inpainting_benchmark(gt, m.get_one::<PathBuf>("masks").map(PathBuf::as_path), &methods, &resolutions)?;
    if let Some(out) = m.get_one::<PathBuf>("out") {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.txt"), report.to_table())?;
        std::fs::write(out.join("report.kv"), report.to_key_value())?;
    }
    if m.get_flag("json") {
        let rows: Vec<Value> = report
            .rows
            .iter()
            .map(|r| json!({ "method": r.method, "resolution": r.resolution, "ssim": r.ssim, "mse": r.mse, "psnr": r.psnr, "pairs": r.pairs }))
            .collect();
        writeln!(stdout, "{}", json!({ "images": report.images, "masks": report.masks, "rows": rows }))?;
    } else {
        write!(stdout, "{}", report.to_table())?;
    }
    Ok(())
}

fn run_ppl(m: &ArgMatches, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (models, _) = load_models(m, false)?;
    let mask = match m.get_one::<PathBuf>("mask") {
        Some(p) => Some(Mask::decode_png(&std::fs::read(p)?)?),
        None => None,
    };
    let mode = match m.get_one::<String>("mode").map(String::as_str) {
        Some("end") => PathMode::End,
        _ => PathMode::Full,
    };
    let samples = *m.get_one::<usize>("samples").expect("has default");
    let seed = *m.get_one::<u64>("seed").expect("has default");
    let value = metrics::perceptual_path_length(models.networks(), mask.as_ref(), samples, mode, seed)?;
    if m.get_flag("json") {
        writeln!(stdout, "{}", json!({ "ppl": value, "samples": samples, "masked": mask.is_some() }))?;
    } else {
        writeln!(stdout, "ppl={value}")?;
    }
    Ok(())
}

fn run_serve(m: &ArgMatches) -> Result<(), CliError> {
    let mut config = embedit_service::ServiceConfig::from_env().map_err(CliError::usage)?;
    if let Some(h) = m.get_one::<PathBuf>("home") {
        config.home = h.clone();
    }
    if let Some(&w) = m.get_one::<usize>("workers") {
        config.workers = w.max(1);
    }
    if let Some(&p) = m.get_one::<usize>("preview-every") {
        config.preview_every = p;
    }
    let (models, _) = load_models(m, true)?;
    let addr = *m.get_one::<SocketAddr>("addr").expect("has default");
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let state = embedit_service::start(config, models).await?;
        eprintln!("listening on {addr}");
        embedit_service::serve(state, addr).await
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_recipe_key_has_a_flag() {
        let cmd = command();
        for (name, kind, _) in EDIT_COMMANDS {
            let sub = cmd.find_subcommand(name).unwrap();
            for spec in kind.fields() {
                assert!(
                    sub.get_arguments().any(|a| a.get_long() == Some(flag_name(spec.key).as_str())),
                    "{name}: {}",
                    spec.key
                );
            }
        }
        command().debug_assert();
    }

    #[test]
    fn every_kind_has_a_command() {
        for kind in EditKind::ALL {
            assert!(EDIT_COMMANDS.iter().any(|(_, k, _)| *k == kind), "{kind}");
        }
    }

    #[test]
    fn usage_errors_are_single_lines() {
        let mut sink = Vec::new();
        for args in [vec!["embedit", "reconstruct", "--bogus"], vec!["embedit"], vec!["embedit", "reconstruct"]] {
            let e = run(args.clone(), &mut sink).unwrap_err();
            assert_eq!(e.exit_code, 2, "{args:?}");
            assert_eq!(e.to_line().lines().count(), 1);
        }
    }
}

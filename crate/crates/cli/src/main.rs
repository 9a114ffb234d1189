mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sketchless::config::RunConfig;

#[derive(Parser)]
#[command(name = "sketchless", version = manifest::VERSION, about = "Face photo retrieval from partial sketches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural photo/sketch corpus and a matching toy run.toml.
    MakeToy(commands::MakeToyArgs),
    /// Turn every complete sketch under a corpus into a stroke episode.
    GenEpisodes(commands::GenEpisodesArgs),
    /// Train the single-image embedding network and save a frozen checkpoint.
    TrainStage1(commands::TrainStage1Args),
    /// Train the sequence encoder on top of a frozen stage-1 checkpoint.
    TrainStage2(commands::TrainStage2Args),
    /// Rank every frame with the sequence model and the single-image baseline.
    Eval(commands::EvalArgs),
    /// Serve the drawing-session HTTP API.
    Serve(commands::ServeArgs),
}

/// Run configuration: `--config` file (or `<data>/run.toml`), then
/// `--set key=value`, then the individual flags below.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field by dotted name, e.g. `episode.frames=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    image_size: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    d_low: Option<String>,
    #[arg(long)]
    margin: Option<String>,
    #[arg(long)]
    distance: Option<String>,
    #[arg(long)]
    normalize: Option<String>,
    #[arg(long)]
    stage1_epochs: Option<String>,
    #[arg(long)]
    stage1_batch_size: Option<String>,
    #[arg(long)]
    lr_backbone: Option<String>,
    #[arg(long)]
    lr_head: Option<String>,
    #[arg(long)]
    stage1_negatives: Option<String>,
    #[arg(long)]
    hidden_size: Option<String>,
    #[arg(long)]
    lstm_layers: Option<String>,
    #[arg(long)]
    prefix_schedule: Option<String>,
    #[arg(long)]
    stage2_epochs: Option<String>,
    #[arg(long)]
    stage2_batch_size: Option<String>,
    #[arg(long)]
    stage2_lr: Option<String>,
    #[arg(long)]
    stage2_negatives: Option<String>,
    #[arg(long)]
    cache_features: Option<String>,
    /// Shorthand for `--set episode.frames=N`.
    #[arg(long)]
    frames: Option<String>,
}

impl ConfigArgs {
    /// Resolve the run configuration. `data` is searched for `run.toml` when
    /// no `--config` is given; the full-size defaults apply otherwise.
    pub fn resolve(&self, data: Option<&std::path::Path>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, data.map(|d| d.join(commands::RUN_CONFIG_FILE))) {
            (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(auto)) if auto.exists() => {
                log::info!("using {}", auto.display());
                RunConfig::load(&auto).with_context(|| format!("loading {}", auto.display()))?
            }
            _ => RunConfig::default(),
        };
        for item in &self.set {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| sketchless::Error::InvalidArgument(format!("--set expects KEY=VALUE, got {item:?}")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        let flags = [
            ("seed", &self.seed),
            ("image_size", &self.image_size),
            ("backbone", &self.backbone),
            ("d_low", &self.d_low),
            ("margin", &self.margin),
            ("distance", &self.distance),
            ("normalize", &self.normalize),
            ("stage1_epochs", &self.stage1_epochs),
            ("stage1_batch_size", &self.stage1_batch_size),
            ("lr_backbone", &self.lr_backbone),
            ("lr_head", &self.lr_head),
            ("stage1_negatives", &self.stage1_negatives),
            ("hidden_size", &self.hidden_size),
            ("lstm_layers", &self.lstm_layers),
            ("prefix_schedule", &self.prefix_schedule),
            ("stage2_epochs", &self.stage2_epochs),
            ("stage2_batch_size", &self.stage2_batch_size),
            ("stage2_lr", &self.stage2_lr),
            ("stage2_negatives", &self.stage2_negatives),
            ("cache_features", &self.cache_features),
            ("episode.frames", &self.frames),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<sketchless::Error>() {
        Some(sketchless::Error::InvalidArgument(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeToy(a) => commands::make_toy(a),
        Command::GenEpisodes(a) => commands::gen_episodes(a),
        Command::TrainStage1(a) => commands::train_stage1(a),
        Command::TrainStage2(a) => commands::train_stage2(a),
        Command::Eval(a) => commands::eval(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_set_which_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, RunConfig::toy().to_toml()).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            set: vec!["margin=0.5".into(), "seed=3".into()],
            seed: Some("9".into()),
            frames: Some("12".into()),
            ..Default::default()
        };
        let cfg = args.resolve(None).unwrap();
        assert_eq!((cfg.margin, cfg.seed, cfg.episode.frames, cfg.image_size), (0.5, 9, 12, 64));
    }

    #[test]
    fn run_toml_is_picked_up_from_data_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(commands::RUN_CONFIG_FILE), RunConfig::toy().to_toml()).unwrap();
        assert_eq!(ConfigArgs::default().resolve(Some(dir.path())).unwrap(), RunConfig::toy());
        assert_eq!(ConfigArgs::default().resolve(None).unwrap(), RunConfig::default());
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let args = ConfigArgs { margin: Some("-1".into()), ..Default::default() };
        assert_eq!(exit_code(&args.resolve(None).unwrap_err()), 2);
        let args = ConfigArgs { set: vec!["no_such_field=1".into()], ..Default::default() };
        assert_eq!(exit_code(&args.resolve(None).unwrap_err()), 2);
    }

    #[test]
    fn command_line_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

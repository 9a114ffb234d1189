use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use sketchless::checkpoint::{load_stage1, load_stage2, save_stage1, save_stage2};
use sketchless::config::RunConfig;
use sketchless::data::{generate_corpus, load_corpus, load_sources, make_toy_sources, toy_episode_config, write_corpus, write_sources, Split};
use sketchless::embed::{train_stage1 as fit_stage1, Stage1Model};
use sketchless::eval::compare;
use sketchless::metrics::{curve_csv, MetricReport, RankRecord};
use sketchless::seq::{train_stage2 as fit_stage2, Stage2Model};
use sketchless::service::{self as http, Engine, ServeConfig, SessionManager};

use crate::manifest::{manifest_path, Manifest};
use crate::ConfigArgs;

pub const RUN_CONFIG_FILE: &str = "run.toml";

#[derive(Args)]
pub struct MakeToyArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of identities.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Frames per episode recorded in the generated run.toml.
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn make_toy(a: MakeToyArgs) -> Result<()> {
    let cfg = RunConfig {
        seed: a.seed,
        image_size: a.size,
        episode: toy_episode_config(a.size, a.frames),
        ..RunConfig::toy()
    };
    cfg.validate()?;
    let mut manifest = Manifest::start("make-toy", Some(&cfg));
    let sources = make_toy_sources(a.n, a.size, a.seed)?;
    write_sources(&a.out, &sources)?;
    let run_toml = a.out.join(RUN_CONFIG_FILE);
    std::fs::write(&run_toml, cfg.to_toml()).with_context(|| format!("writing {}", run_toml.display()))?;
    manifest.output(&a.out)?;
    manifest.finish(&manifest_path(&a.out, "make-toy"))?;
    println!("wrote {} identities to {}", a.n, a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct GenEpisodesArgs {
    /// Corpus directory holding photos/ and sketches/.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the episode corpus (defaults to --data).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn gen_episodes(a: GenEpisodesArgs) -> Result<()> {
    let cfg = a.config.resolve(Some(&a.data))?;
    let out = a.out.clone().unwrap_or_else(|| a.data.clone());
    let mut manifest = Manifest::start("gen-episodes", Some(&cfg));
    manifest.input(&a.data.join(sketchless::data::SKETCHES_DIR))?;
    let sources = load_sources(&a.data)?;
    let corpus = generate_corpus(&sources, &cfg.episode, cfg.seed)?;
    write_corpus(&out, &corpus)?;
    if out != a.data {
        std::fs::write(out.join(RUN_CONFIG_FILE), cfg.to_toml())?;
    }
    manifest.output(&out.join(sketchless::data::EPISODES_DIR))?;
    manifest.finish(&manifest_path(&out, "gen-episodes"))?;
    println!("wrote {} episodes of {} frames to {}", corpus.len(), cfg.episode.frames, out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainStage1Args {
    /// Episode corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

pub fn train_stage1(a: TrainStage1Args) -> Result<()> {
    let cfg = a.config.resolve(Some(&a.data))?;
    let mut manifest = Manifest::start("train-stage1", Some(&cfg));
    manifest.input(&a.data.join(sketchless::data::EPISODES_DIR))?;
    let corpus = load_corpus(&a.data, cfg.episode.frames)?;
    let mut model = Stage1Model::new(cfg.stage1_config(), cfg.seed)?;
    let losses = fit_stage1(&mut model, &corpus, &cfg.stage1_train())?;
    model.freeze();
    create_parent(&a.out)?;
    let hash = save_stage1(&a.out, &model)?;
    let loss_path = with_suffix(&a.out, ".losses.csv");
    write_losses(&loss_path, &losses)?;
    manifest.output(&a.out)?;
    manifest.output(&loss_path)?;
    manifest.finish(&manifest_path(&a.out, "train-stage1"))?;
    println!(
        "stage 1: {} epochs, final loss {:.6}, checkpoint {} ({})",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display(),
        &hash[..12]
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainStage2Args {
    /// Episode corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Frozen stage-1 checkpoint.
    #[arg(long)]
    stage1: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

fn open_stage1(path: &Path, d_low: Option<usize>) -> Result<Stage1Model> {
    let mut model = load_stage1(path, d_low).with_context(|| format!("stage-1 checkpoint {} is required", path.display()))?;
    model.freeze();
    Ok(model)
}

pub fn train_stage2(a: TrainStage2Args) -> Result<()> {
    let cfg = a.config.resolve(Some(&a.data))?;
    let stage1 = open_stage1(&a.stage1, Some(cfg.d_low))?;
    let mut manifest = Manifest::start("train-stage2", Some(&cfg));
    manifest.input(&a.stage1)?;
    manifest.input(&a.data.join(sketchless::data::EPISODES_DIR))?;
    let corpus = load_corpus(&a.data, cfg.episode.frames)?;
    let mut model = Stage2Model::new(&stage1, cfg.stage2_config(), cfg.seed)?;
    let losses = fit_stage2(&mut model, &corpus, &stage1, &cfg.stage2_train())?;
    create_parent(&a.out)?;
    let hash = save_stage2(&a.out, &model)?;
    let loss_path = with_suffix(&a.out, ".losses.csv");
    write_losses(&loss_path, &losses)?;
    manifest.output(&a.out)?;
    manifest.output(&loss_path)?;
    manifest.finish(&manifest_path(&a.out, "train-stage2"))?;
    println!(
        "stage 2: {} epochs, final loss {:.6}, checkpoint {} ({})",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        a.out.display(),
        &hash[..12]
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Episode corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Stage-1 checkpoint; `{dim}` is replaced by each value of --dims.
    #[arg(long)]
    stage1: String,
    /// Stage-2 checkpoint; `{dim}` is replaced by each value of --dims.
    #[arg(long)]
    stage2: String,
    /// Output directory for reports, curves, rank files and gallery indexes.
    #[arg(long)]
    out: PathBuf,
    /// Embedding sizes to evaluate (defaults to d_low of the run config).
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    /// Identities to evaluate: train, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    config: ConfigArgs,
}

fn write_method(out: &Path, stem: &str, record: &RankRecord, manifest: &mut Manifest) -> Result<MetricReport> {
    let report = MetricReport::from_record(record)?;
    let json = out.join(format!("{stem}.json"));
    let curve = out.join(format!("{stem}_curve.csv"));
    let ranks = out.join(format!("{stem}_ranks.csv"));
    let header = out.join(format!("{stem}_ranks.json"));
    std::fs::write(&json, serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(&curve, curve_csv(&report.curve)?)?;
    record.save(&ranks, &header)?;
    for p in [&json, &curve, &ranks, &header] {
        manifest.output(p)?;
    }
    Ok(report)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.config.resolve(Some(&a.data))?;
    let corpus = load_corpus(&a.data, cfg.episode.frames)?;
    let ids: Vec<String> = match a.split.as_str() {
        "all" => corpus.identities().map(String::from).collect(),
        s => corpus.identities_in(s.parse::<Split>()?).into_iter().map(String::from).collect(),
    };
    if ids.is_empty() {
        return Err(sketchless::Error::InvalidArgument(format!("split {:?} has no identities", a.split)).into());
    }
    let dims = if a.dims.is_empty() { vec![cfg.d_low] } else { a.dims.clone() };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut manifest = Manifest::start("eval", Some(&cfg));
    manifest.input(&a.data.join(sketchless::data::EPISODES_DIR))?;

    println!("{:>6} {:>8} {:>9} {:>9} {:>9} {:>9}", "d_low", "method", "m@A", "m@B", "w@mA", "w@mB");
    for dim in dims {
        let s1_path = PathBuf::from(a.stage1.replace("{dim}", &dim.to_string()));
        let s2_path = PathBuf::from(a.stage2.replace("{dim}", &dim.to_string()));
        let stage1 = open_stage1(&s1_path, Some(dim))?;
        let stage2 = load_stage2(&s2_path, &stage1).with_context(|| format!("loading {}", s2_path.display()))?;
        manifest.input(&s1_path)?;
        manifest.input(&s2_path)?;

        let cmp = compare(&stage1, &stage2, &corpus, &ids)?;
        let index = a.out.join(format!("gallery_d{dim}.idx"));
        cmp.gallery.clone().with_hashes(stage1.content_hash(), Some(stage2.content_hash())).save(&index)?;
        manifest.output(&index)?;
        for (method, record) in [("ours", &cmp.sequence), ("b1", &cmp.baseline)] {
            let r = write_method(&a.out, &format!("{method}_d{dim}"), record, &mut manifest)?;
            println!(
                "{dim:>6} {method:>8} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
                r.m_at_a, r.m_at_b, r.w_at_ma, r.w_at_mb
            );
        }
    }
    manifest.finish(&manifest_path(&a.out, "eval"))?;
    Ok(())
}

#[derive(Args)]
pub struct ServeArgs {
    /// Service TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage1: Option<PathBuf>,
    #[arg(long)]
    stage2: Option<PathBuf>,
    /// Saved gallery index; built from the corpus photos when omitted.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Corpus directory whose photos back the gallery and thumbnails.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    session_ttl_secs: Option<u64>,
    #[arg(long)]
    canvas_size: Option<u32>,
    #[arg(long)]
    stroke_width: Option<f64>,
}

impl ServeArgs {
    fn resolve(&self) -> Result<ServeConfig> {
        let mut cfg = match &self.config {
            Some(path) => ServeConfig::load(path)?,
            None => ServeConfig::default(),
        };
        cfg.apply_env(std::env::vars())?;
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut cfg.stage1_checkpoint, &self.stage1);
        set(&mut cfg.stage2_checkpoint, &self.stage2);
        set(&mut cfg.index_path, &self.index);
        set(&mut cfg.corpus_root, &self.corpus);
        if let Some(h) = &self.host {
            cfg.host.clone_from(h);
        }
        cfg.port = self.port.unwrap_or(cfg.port);
        cfg.k = self.k.unwrap_or(cfg.k);
        cfg.session_ttl_secs = self.session_ttl_secs.unwrap_or(cfg.session_ttl_secs);
        cfg.canvas_size = self.canvas_size.unwrap_or(cfg.canvas_size);
        cfg.stroke_width = self.stroke_width.unwrap_or(cfg.stroke_width);
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let mut manifest = Manifest::start("serve", None);
    for p in [&cfg.stage1_checkpoint, &cfg.stage2_checkpoint, &cfg.index_path].into_iter().flatten() {
        manifest.input(p)?;
    }
    let engine = std::sync::Arc::new(Engine::load(&cfg)?);
    log::info!("gallery of {} photos, d_low {}", engine.gallery().len(), engine.gallery().dim());
    let manager = std::sync::Arc::new(SessionManager::new(Some(engine), &cfg));

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port))
            .await
            .with_context(|| format!("binding {}:{}", cfg.host, cfg.port))?;
        let addr = listener.local_addr()?;
        let manifest_dir = match (&cfg.corpus_root, &cfg.stage2_checkpoint) {
            (Some(root), _) => Some(root.clone()),
            (None, Some(ckpt)) => ckpt.parent().map(Path::to_path_buf),
            (None, None) => None,
        };
        if let Some(dir) = manifest_dir {
            manifest.finish(&manifest_path(&dir, "serve"))?;
        }
        println!("listening on http://{addr}");
        use std::io::Write;
        std::io::stdout().flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        };
        http::serve(manager, listener, shutdown).await?;
        Ok(())
    })
}

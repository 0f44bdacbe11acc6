use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nncore::checkpoint::write_atomic;
use serde::Serialize;

use scdp::config::Settings;
use scdp::eval::{self, Method, Split};
use scdp::policy::{train_base, ActionNorm, Policy};
use scdp::style::{
    post_train_style, sha256_hex, train_encoder, ArtifactRef, BundleManifest, PredictorRef, SceneEncoder, StyleBundle,
    StylePredictor, MANIFEST_FILE,
};
use scdp::world::{build_dataset, dataset_load, dataset_save, select_style_subset, Demo, Scene, Style, Task};
use scdp::{Result, ScdpError, SimRng, Vec2};

#[derive(Parser)]
#[command(name = "scdp", version, about = "Style-conditioned diffusion policy toolkit")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scored Bézier demonstrations.
    GenData(GenData),
    /// Train the base diffusion policy.
    TrainBase(TrainBase),
    /// Pre-train the scene autoencoder.
    TrainEncoder(TrainEncoder),
    /// Post-train one style predictor against a frozen base.
    TrainStyle(TrainStyle),
    /// Evaluate base and style-conditioned policies.
    Eval(Eval),
    /// Roll out the style-conditioned policy on one scene.
    Infer(Infer),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBase {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEncoder {
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainStyle {
    #[arg(long)]
    style: Style,
    #[arg(long)]
    subset_frac: Option<f64>,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    bundle: PathBuf,
    /// Base checkpoint; copied into a new bundle.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Encoder checkpoint; copied into a new bundle.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Dataset file; copied into a new bundle.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Ambiguous,
    Clear,
    Both,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    split: SplitArg,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated subset of base_dp, scdp, dataset_stats.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    bundle: PathBuf,
    /// Scene as inline JSON or a path to a JSON file.
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
}

const BASE_FILE: &str = "base.ckpt";
const ENCODER_FILE: &str = "encoder.ckpt";
const DATASET_FILE: &str = "dataset.jsonl";

/// Defaults, then the bundle's recorded config, then `--config`, then
/// `--set`, then `--seed`.
fn settings(cli: &Cli, bundle_echo: Option<&BTreeMap<String, String>>) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(echo) = bundle_echo {
        for (k, v) in echo {
            s.set(k, v)?;
        }
    }
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScdpError::Argument(format!("cannot read config {}: {e}", path.display())))?;
        s.apply_text(&text)?;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| ScdpError::Argument(format!("--set expects KEY=VALUE, got {o:?}")))?;
        s.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let mut s = settings(cli, None)?;
    if let Some(t) = a.task {
        s.task = t;
    }
    let demos = build_dataset(s.task, a.n, s.seed, &s.data, &s.observer, &s.ellipse)?;
    dataset_save(&demos, &a.out)?;
    eprintln!("wrote {} {} demos to {}", demos.len(), s.task, a.out.display());
    Ok(())
}

fn train_base_cmd(cli: &Cli, a: &TrainBase) -> Result<()> {
    let s = settings(cli, None)?;
    let demos = dataset_load(&a.data)?;
    let norm = ActionNorm::fit(&demos, s.policy.horizons.tp)?;
    let mut policy = Policy::new(s.policy.clone(), norm, s.seed)?;
    let mut rng = SimRng::new(s.seed.wrapping_add(1));
    let curve = train_base(&mut policy, &demos, a.epochs, &s.train, &mut rng)?;
    if let Some(l) = curve.last() {
        eprintln!("trained {} epochs, final loss {l:.5}", curve.len());
    }
    policy.save(&a.out)?;
    Ok(())
}

fn train_encoder_cmd(cli: &Cli, a: &TrainEncoder) -> Result<()> {
    let s = settings(cli, None)?;
    let (enc, report) = train_encoder(s.task, a.scenes, a.epochs, &s.encoder, &s.ellipse, s.seed)?;
    if let Some(rmse) = report.heldout_rmse {
        eprintln!("held-out reconstruction rmse {rmse:.6}");
    }
    write_atomic(&a.out, &enc.to_bytes()?)?;
    Ok(())
}

/// Copy an artifact into the bundle and reference it by its file name.
fn adopt(dir: &Path, src: &Path, name: &str) -> Result<ArtifactRef> {
    let bytes = std::fs::read(src).map_err(|e| ScdpError::Data(format!("cannot read {}: {e}", src.display())))?;
    write_atomic(&dir.join(name), &bytes)?;
    Ok(ArtifactRef {
        path: name.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn train_style_cmd(cli: &Cli, a: &TrainStyle) -> Result<()> {
    let dir = &a.bundle;
    if !dir.join(MANIFEST_FILE).exists() {
        let (Some(base), Some(encoder), Some(data)) = (&a.base, &a.encoder, &a.data) else {
            return Err(ScdpError::Argument(format!(
                "{} has no {MANIFEST_FILE}; pass --base, --encoder and --data to create it",
                dir.display()
            )));
        };
        std::fs::create_dir_all(dir)?;
        let demos = dataset_load(data)?;
        let task = demos
            .first()
            .map(|d| d.trajectory.scene.task)
            .ok_or_else(|| ScdpError::Data("dataset is empty".into()))?;
        let manifest = BundleManifest::new(
            task,
            adopt(dir, data, DATASET_FILE)?,
            adopt(dir, base, BASE_FILE)?,
            adopt(dir, encoder, ENCODER_FILE)?,
        );
        manifest.save(dir)?;
    } else if a.base.is_some() || a.encoder.is_some() || a.data.is_some() {
        return Err(ScdpError::Argument(
            "bundle already exists; --base, --encoder and --data only apply when creating one".into(),
        ));
    }

    let bundle = StyleBundle::load(dir)?;
    let mut s = settings(cli, Some(&bundle.manifest.config))?;
    s.task = bundle.manifest.task;
    if let Some(f) = a.subset_frac {
        s.style.subset_fraction = f;
    }
    s.validate()?;

    let idx = select_style_subset(
        &bundle.demos,
        a.style,
        s.style.subset_fraction,
        s.style.ranking,
        &s.observer,
    )?;
    let subset: Vec<Demo> = idx.iter().map(|&i| bundle.demos[i].clone()).collect();
    let mut policy = bundle.policy.clone();
    let encoder: &SceneEncoder = &bundle.encoder;
    let style_tag = match a.style {
        Style::Legible => 1,
        Style::Predictable => 2,
    };
    let mut init = SimRng::new(s.seed.wrapping_add(100 + style_tag));
    let mut predictor = StylePredictor::new(
        a.style,
        encoder.latent_width(),
        policy.net.config().bottleneck_width(),
        &s.predictor,
        &mut init,
    );
    let mut rng = SimRng::new(s.seed.wrapping_add(200 + style_tag));
    let curve = post_train_style(
        &mut policy,
        encoder,
        &mut predictor,
        &subset,
        a.epochs,
        &s.style.train,
        &mut rng,
    )?;
    if let Some(l) = curve.last() {
        eprintln!(
            "{} predictor: {} demos, {} epochs, final loss {l:.5}",
            a.style,
            subset.len(),
            curve.len()
        );
    }
    if sha256_hex(&policy.to_bytes()?) != bundle.manifest.base.sha256 {
        return Err(ScdpError::Integrity(
            "base checkpoint differs from the bundle record".into(),
        ));
    }

    let name = format!("predictor_{}.ckpt", a.style);
    let bytes = predictor.to_bytes()?;
    write_atomic(&dir.join(&name), &bytes)?;
    let mut manifest = bundle.manifest.clone();
    manifest.predictors.insert(
        a.style,
        PredictorRef {
            path: name,
            sha256: sha256_hex(&bytes),
            subset_fraction: s.style.subset_fraction,
            subset_ranking: s.style.ranking,
            epochs: a.epochs,
        },
    );
    manifest.config = s.echo();
    manifest.save(dir)
}

fn eval_cmd(cli: &Cli, a: &Eval) -> Result<()> {
    let bundle = StyleBundle::load(&a.bundle)?;
    let mut s = settings(cli, Some(&bundle.manifest.config))?;
    s.task = bundle.manifest.task;
    if let Some(n) = a.episodes {
        s.eval.episodes = n;
    }
    s.validate()?;
    let splits: Vec<Split> = match a.split {
        SplitArg::Ambiguous => vec![Split::Ambiguous],
        SplitArg::Clear => vec![Split::Clear],
        SplitArg::Both => Split::ALL.to_vec(),
    };
    let methods = a.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
    let report = eval::evaluate(&bundle, &s, &splits, &methods)?;
    eval::write_report(&report, &a.out_dir)?;
    for g in &report.summary {
        println!(
            "{:9} {:13} n={:3} D_hat {:.3}±{:.3} E_hat {:.3}±{:.3} T {:.3}±{:.3} success {:.2}",
            g.split.to_string(),
            g.method.to_string(),
            g.episodes,
            g.d_hat.mean,
            g.d_hat.std,
            g.e_hat.mean,
            g.e_hat.std,
            g.t.mean,
            g.t.std,
            g.success_rate
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct InferOutput<'a> {
    scene: &'a Scene,
    seed: u64,
    states: &'a [Vec2],
    actions: &'a [Vec2],
    success: bool,
    style_decisions: &'a [Style],
}

fn infer_cmd(cli: &Cli, a: &Infer) -> Result<()> {
    let bundle = StyleBundle::load(&a.bundle)?;
    let s = settings(cli, Some(&bundle.manifest.config))?;
    let text = if Path::new(&a.scene).is_file() {
        std::fs::read_to_string(&a.scene)?
    } else {
        a.scene.clone()
    };
    let scene: Scene =
        serde_json::from_str(&text).map_err(|e| ScdpError::Argument(format!("--scene is not a valid scene: {e}")))?;
    if scene.task != bundle.manifest.task {
        return Err(ScdpError::Argument(format!(
            "scene task {} differs from the bundle task {}",
            scene.task, bundle.manifest.task
        )));
    }
    let r = eval::infer(&bundle, &s, &scene, s.seed)?;
    let out = InferOutput {
        scene: &scene,
        seed: s.seed,
        states: &r.trajectory.states,
        actions: &r.trajectory.actions,
        success: r.success,
        style_decisions: &r.decisions,
    };
    let mut json = serde_json::to_vec_pretty(&out)?;
    json.push(b'\n');
    write_atomic(&a.out, &json)?;
    eprintln!("{} steps, success {}", r.trajectory.actions.len(), r.success);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::TrainBase(a) => train_base_cmd(cli, a),
        Command::TrainEncoder(a) => train_encoder_cmd(cli, a),
        Command::TrainStyle(a) => train_style_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Infer(a) => infer_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

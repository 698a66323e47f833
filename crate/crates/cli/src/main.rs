mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use phinet::corpus::{load_corpus, save_corpus};
use phinet::eval::evaluate;
use phinet::explain::{centroid_heatmap, explain_global, explain_trial, heatmaps_to_csv};
use phinet::inventory::{PhonemeInventory, Utterance};
use phinet::model::Model;
use phinet::synth::{generate, make_trials};
use phinet::training::checkpoint::{load_checkpoint, save_checkpoint};
use phinet::training::{log_to_csv, train, Duration};
use phinet::trials::TrialList;
use phinet::write_atomic;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "phinet", version, about = "Phoneme-level interpretable speaker verification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and for relative input paths.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Checkpoint path; defaults to the configured one.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Config override, `key=value` with a TOML value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and held-out corpora, trials and ground truth.
    Gen,
    /// Train a model on the training corpus.
    Train,
    /// Baseline metrics, leave-one-phoneme-out ablations and fidelity.
    Eval,
    /// Score one trial from the held-out corpus.
    Score { enroll: String, test: String },
    /// Local report for one trial plus global weights and centroid heatmaps.
    Explain {
        /// Enrollment utterance id; defaults to the first trial.
        #[arg(long, requires = "test")]
        enroll: Option<String>,
        #[arg(long, requires = "enroll")]
        test: Option<String>,
    },
    /// Train once per crop duration of the sweep and evaluate each model.
    Durations,
}

struct Ctx {
    cfg: RunConfig,
    out_dir: PathBuf,
    checkpoint: PathBuf,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn load(&self, p: &Path) -> Result<(PhonemeInventory, Vec<Utterance>)> {
        let path = self.path(p);
        load_corpus(&path).with_context(|| format!("loading corpus {}", path.display()))
    }

    fn model(&self) -> Result<Model> {
        let (model, _) = load_checkpoint(&self.checkpoint)
            .with_context(|| format!("loading checkpoint {}", self.checkpoint.display()))?;
        Ok(model)
    }

    fn trials(&self, utts: &[Utterance]) -> Result<Vec<(usize, usize, phinet::trials::TrialLabel)>> {
        let path = self.path(&self.cfg.trials);
        let list = TrialList::load(&path).with_context(|| format!("loading trials {}", path.display()))?;
        Ok(list.resolve(utts)?)
    }
}

/// Writes every file or none: all contents are computed before the first
/// write, and each write is atomic.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (path, bytes) in files {
        write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gen(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (inv, train_utts, gt) = generate(&cfg.synth())?;
    let (_, test_utts, _) = generate(&cfg.test_synth())?;
    let trials = make_trials(&test_utts, cfg.n_target, cfg.n_nontarget, cfg.seed)?;
    let corpus = ctx.path(&cfg.corpus);
    let test_corpus = ctx.path(&cfg.test_corpus);
    for (path, utts) in [(&corpus, &train_utts), (&test_corpus, &test_utts)] {
        save_corpus(&inv, utts, path).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {} ({} utterances)", path.display(), utts.len());
    }
    write_all(&[
        (ctx.path(&cfg.trials), trials.to_text().into_bytes()),
        (ctx.out_dir.join("ground_truth.csv"), gt.to_csv(&inv).into_bytes()),
    ])?;
    if load_corpus(&corpus)?.1 != train_utts || load_corpus(&test_corpus)?.1 != test_utts {
        bail!("corpus verification after write failed");
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let (inv, utts) = ctx.load(&ctx.cfg.corpus)?;
    let model_cfg = ctx.cfg.model();
    if inv.len() != model_cfg.n_phonemes {
        bail!("corpus has {} phonemes, config says n_phonemes = {}", inv.len(), model_cfg.n_phonemes);
    }
    let tc = ctx.cfg.train();
    let out = train(&utts, &model_cfg, &tc)?;
    if let Some(last) = out.log.last() {
        println!(
            "step {} l_veri {:.4} l_pho {:.6} l_all {:.4} lr {:.2e}; {} batches redrawn",
            last.step, last.l_veri, last.l_pho, last.l_all, last.lr, out.resampled
        );
    }
    write_all(&[(ctx.out_dir.join("train_log.csv"), log_to_csv(&out.log).into_bytes())])?;
    save_checkpoint(&out.model, &tc, &ctx.checkpoint)
        .with_context(|| format!("writing {}", ctx.checkpoint.display()))?;
    let (reloaded, _) = load_checkpoint(&ctx.checkpoint)?;
    if reloaded != out.model {
        bail!("checkpoint verification after write failed");
    }
    println!("wrote {}", ctx.checkpoint.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let model = ctx.model()?;
    let (inv, utts) = ctx.load(&ctx.cfg.test_corpus)?;
    let trials = ctx.trials(&utts)?;
    let report = evaluate(&model, &inv, &utts, &trials, ctx.cfg.p_target)?;
    println!(
        "EER {:.4}  minDCF(p={}) {:.4}  fidelity {}  ({} target, {} nontarget, {} skipped)",
        report.eer,
        report.p_target,
        report.min_dcf,
        report.fidelity.map_or("undefined".into(), |f| format!("{f:.5}")),
        report.n_target,
        report.n_nontarget,
        report.skipped
    );
    write_all(&[
        (ctx.out_dir.join("eval.json"), report.to_json()?.into_bytes()),
        (ctx.out_dir.join("eval.csv"), report.to_csv().into_bytes()),
    ])
}

fn find<'a>(utts: &'a [Utterance], id: &str) -> Result<&'a Utterance> {
    utts.iter()
        .find(|u| u.id == id)
        .with_context(|| format!("unknown utterance {id:?}"))
}

fn cmd_score(ctx: &Ctx, enroll: &str, test: &str) -> Result<()> {
    let model = ctx.model()?;
    let (_, utts) = ctx.load(&ctx.cfg.test_corpus)?;
    let b = model.score(find(&utts, enroll)?, find(&utts, test)?)?;
    println!("y = {}", b.y);
    Ok(())
}

fn cmd_explain(ctx: &Ctx, ids: Option<(String, String)>) -> Result<()> {
    let model = ctx.model()?;
    let (inv, utts) = ctx.load(&ctx.cfg.test_corpus)?;
    let (e, t) = match ids {
        Some((e, t)) => (find(&utts, &e)?, find(&utts, &t)?),
        None => {
            let trials = ctx.trials(&utts)?;
            let &(e, t, _) = trials.first().context("trial list is empty")?;
            (&utts[e], &utts[t])
        }
    };
    let local = explain_trial(&model, &inv, e, t)?;
    print!("{}", local.to_text());
    let global = explain_global(&model, &inv)?;
    let mut speakers: Vec<&str> = utts.iter().map(|u| u.speaker_id.as_str()).collect();
    speakers.dedup();
    let maps = speakers
        .iter()
        .map(|s| {
            let own: Vec<Utterance> = utts.iter().filter(|u| u.speaker_id == *s).cloned().collect();
            centroid_heatmap(&model, &inv, &own)
        })
        .collect::<phinet::Result<Vec<_>>>()?;
    write_all(&[
        (ctx.out_dir.join("explain.json"), local.to_json()?.into_bytes()),
        (ctx.out_dir.join("explain.txt"), local.to_text().into_bytes()),
        (ctx.out_dir.join("global.csv"), global.to_csv().into_bytes()),
        (ctx.out_dir.join("heatmap.csv"), heatmaps_to_csv(&maps, &inv).into_bytes()),
    ])
}

fn duration_label(d: &Duration) -> String {
    match d {
        Duration::Fixed(n) => n.to_string(),
        Duration::Mix(lo, hi) => format!("mix{lo}-{hi}"),
    }
}

fn cmd_durations(ctx: &Ctx) -> Result<()> {
    let (inv, train_utts) = ctx.load(&ctx.cfg.corpus)?;
    let (_, test_utts) = ctx.load(&ctx.cfg.test_corpus)?;
    let trials = ctx.trials(&test_utts)?;
    let model_cfg = ctx.cfg.model();
    let mut csv = String::from("duration,eer,min_dcf,fidelity\n");
    println!("{:>12}  {:>8}  {:>8}  {:>9}", "duration", "EER", "minDCF", "fidelity");
    for d in &ctx.cfg.sweep {
        let tc = phinet::training::TrainConfig {
            duration: *d,
            ..ctx.cfg.train()
        };
        let model = train(&train_utts, &model_cfg, &tc)?.model;
        let r = evaluate(&model, &inv, &test_utts, &trials, ctx.cfg.p_target)?;
        let fid = r.fidelity.map(|f| f.to_string()).unwrap_or_default();
        let label = duration_label(d);
        println!(
            "{label:>12}  {:>8.4}  {:>8.4}  {:>9}",
            r.eer,
            r.min_dcf,
            r.fidelity.map_or("-".into(), |f| format!("{f:.5}"))
        );
        let _ = writeln!(csv, "{label},{},{},{fid}", r.eer, r.min_dcf);
    }
    write_all(&[(ctx.out_dir.join("durations.csv"), csv.into_bytes())])
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PHINET_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("PHINET_THREADS must be a nonnegative integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let c = &cli.common;
    let cfg = RunConfig::resolve(c.config.as_deref(), &c.set, c.seed)?;
    eprintln!("# resolved config (seed {})\n{}", cfg.seed, cfg.to_toml());
    std::fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
    let mut ctx = Ctx {
        checkpoint: PathBuf::new(),
        out_dir: c.out_dir.clone(),
        cfg,
    };
    ctx.checkpoint = match &c.checkpoint {
        Some(p) => p.clone(),
        None => ctx.path(&ctx.cfg.checkpoint),
    };
    match cli.command {
        Command::Gen => cmd_gen(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::Score { enroll, test } => cmd_score(&ctx, &enroll, &test),
        Command::Explain { enroll, test } => cmd_explain(&ctx, enroll.zip(test)),
        Command::Durations => cmd_durations(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

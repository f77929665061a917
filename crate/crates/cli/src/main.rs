use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use volmoe::checkpoint;
use volmoe::eval::{self, inspect_routing};
use volmoe::mllm::{Mllm, Tokenizer};
use volmoe::synth_data::{self, CorpusConfig, Dataset};
use volmoe::tgh_moe::RoutingExport;
use volmoe::training::{
    self, load_checkpoint, save_checkpoint, trace_csv, RunConfig, Stage, TrainState,
};
use volmoe::vit_adapt;

#[derive(Parser)]
#[command(name = "volmoe", version = VERSION, about = "Volumetric multimodal model with text-guided MoE")]
struct Cli {
    /// Worker threads for generation, batch gradients and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a randomly initialized 2D encoder archive.
    Init2d {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt a 2D encoder archive to volumetric input.
    Adapt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Adapted encoder archive to start stage 1 from.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Generate answers for a split and score them.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Summarize exported routing records.
    InspectRouting {
        #[arg(long)]
        records: PathBuf,
    },
    /// Attention-score counts of the mixed 2D/3D stack against full 3D.
    Flops {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        shape: String,
    },
}

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format 1)");

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth {
            out,
            train,
            test,
            seed,
        } => synth(&out, train, test, seed),
        Cmd::Init2d { config, out, seed } => {
            let cfg = load_config(&config)?;
            let w = vit_adapt::init_2d_encoder::<f32>(&cfg.encoder, seed);
            checkpoint::save_params(&out, "encoder-2d", config_section(&cfg)?, &w)?;
            println!("wrote {} tensors to {}", w.len(), out.display());
            Ok(())
        }
        Cmd::Adapt {
            input,
            config,
            out,
        } => adapt(&input, &config, &out),
        Cmd::Train {
            stage,
            config,
            data,
            out,
            resume,
            encoder,
        } => train(
            Stage::from_number(stage)?,
            &config,
            &data,
            &out,
            resume.as_deref(),
            encoder.as_deref(),
        ),
        Cmd::Eval {
            ckpt,
            data,
            split,
            report,
        } => evaluate(&ckpt, &data, &split, &report),
        Cmd::InspectRouting { records } => {
            let text = fs::read_to_string(&records)
                .with_context(|| format!("reading {}", records.display()))?;
            let recs = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<Vec<RoutingExport>, _>>()
                .context("parsing routing records")?;
            print!("{}", inspect_routing(&recs));
            Ok(())
        }
        Cmd::Flops { config, shape } => {
            let cfg = load_config(&config)?;
            let shape = parse_shape(&shape)?;
            print!("{}", eval::flops_report(&cfg.encoder, shape)?);
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    eprintln!("resolved config:\n{}", serde_json::to_string_pretty(&cfg)?);
    Ok(cfg)
}

fn config_section(cfg: &RunConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let mut s = BTreeMap::new();
    s.insert("config".to_string(), serde_json::to_value(cfg)?);
    Ok(s)
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("shape `{s}` is not DxHxW"))?;
    match parts[..] {
        [d, h, w] => Ok([d, h, w]),
        _ => bail!("shape `{s}` is not DxHxW"),
    }
}

fn synth(out: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    let cfg = CorpusConfig {
        n_train,
        n_test,
        seed,
        ..Default::default()
    };
    eprintln!("resolved config:\n{}", serde_json::to_string_pretty(&cfg)?);
    let summary = synth_data::build_corpus(&cfg, out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn adapt(input: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let (_, w2d) = checkpoint::load_params::<f32>(input)
        .with_context(|| format!("reading {}", input.display()))?;
    let (w, report) = vit_adapt::adapt_checkpoint(&w2d, &cfg.encoder, &cfg.moe, cfg.stage1.seed)?;
    let mut sections = config_section(&cfg)?;
    sections.insert("surgery".into(), serde_json::to_value(&report)?);
    checkpoint::save_params(out, "encoder", sections, &w)?;
    print!("{report}");
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Dataset<f32>> {
    Dataset::load(data, split).with_context(|| format!("loading {split} split from {}", data.display()))
}

fn write_stage_outputs(
    dir: &Path,
    cfg: &RunConfig,
    model: &Mllm<f32>,
    state: &TrainState<f32>,
) -> Result<()> {
    save_checkpoint(dir, cfg, model, Some(state))?;
    fs::write(dir.join("loss.csv"), trace_csv(&state.meta.trace))?;
    Ok(())
}

fn train(
    stage: Stage,
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    encoder: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let stage_dir = out.join(format!("stage{}", stage.number()));
    let sc = cfg.stage(stage).clone();

    let (model, state, stage1_meta) = if let Some(r) = resume {
        let ck = load_checkpoint::<f32>(r).with_context(|| format!("resuming from {}", r.display()))?;
        if ck.config.spec() != cfg.spec() {
            bail!("model in {} does not match the configured model", r.display());
        }
        let state = ck.state.context("resume checkpoint has no training state")?;
        if state.stage()? != stage {
            bail!("resume checkpoint is from stage {}, not stage {}", state.meta.stage, stage.number());
        }
        (ck.model, Some(state), None)
    } else if stage == Stage::Two {
        let s1 = out.join("stage1").join("final");
        if !s1.join(checkpoint::MANIFEST_FILE).exists() {
            bail!(
                "stage 2 needs a finished stage-1 checkpoint at {}; run `train --stage 1` first",
                s1.display()
            );
        }
        let ck = load_checkpoint::<f32>(&s1)?;
        let meta = ck.state.map(|s| s.meta);
        match &meta {
            Some(m) if m.step >= m.total_steps => {}
            _ => bail!("stage-1 checkpoint at {} is not finished", s1.display()),
        }
        (ck.model, None, meta)
    } else {
        let tok = Tokenizer::load(&data.join("vocab.txt"))?;
        let mut model = Mllm::<f32>::new(cfg.spec(), tok, sc.seed)?;
        if let Some(e) = encoder {
            let (_, w) = checkpoint::load_params::<f32>(e)?;
            model.set_encoder(w)?;
        }
        (model, None, None)
    };

    let train_set = load_split(data, "train")?;
    eprintln!("stage {}: {} training samples", stage.number(), train_set.len());
    let start = Instant::now();
    let mut hook = |m: &Mllm<f32>, st: &TrainState<f32>| -> volmoe::Result<bool> {
        let row = st.meta.trace.last().expect("a step ran");
        let step = st.meta.step;
        if step % 25 == 0 || step == st.meta.total_steps {
            let acc = row.router_acc.map(|a| format!(" router_acc {a:.3}")).unwrap_or_default();
            eprintln!(
                "step {step:>4}/{} l_reg {:.4} l_total {:.4}{acc} lr {:.2e} ({:.0}s)",
                st.meta.total_steps,
                row.l_reg,
                row.l_total,
                row.lr,
                start.elapsed().as_secs_f64()
            );
            let _ = std::io::stderr().flush();
        }
        if sc.save_every > 0 && step % sc.save_every == 0 && step < st.meta.total_steps {
            let dir = stage_dir.join(format!("step-{step:05}"));
            write_stage_outputs(&dir, &cfg, m, st).map_err(|e| {
                volmoe::Error::InvalidInput(format!("saving {}: {e:#}", dir.display()))
            })?;
        }
        Ok(true)
    };
    let (model, state) = match stage {
        Stage::One => training::run_stage1(&train_set, model, &cfg, state, &mut hook)?,
        Stage::Two => {
            training::run_stage2(&train_set, model, &cfg, stage1_meta.as_ref(), state, &mut hook)?
        }
    };
    if let Some(w) = &state.meta.warmup {
        eprintln!(
            "lm warmup: {} steps, loss {:.4} -> {:.4}",
            w.steps, w.first_loss, w.final_loss
        );
    }
    if let Some(w) = &state.meta.encoder_warmup {
        eprintln!(
            "encoder alignment: {} steps, mse {:.4} -> {:.4}",
            w.steps, w.first_loss, w.final_loss
        );
    }
    if let Some(c) = &state.meta.init_check {
        eprintln!(
            "stage-2 init check: stage-1 L_reg {:.8} stage-2 L_reg {:.8} diff {:.3e}",
            c.stage1_l_reg, c.stage2_l_reg, c.abs_diff
        );
    }
    let final_dir = stage_dir.join("final");
    write_stage_outputs(&final_dir, &cfg, &model, &state)?;
    fs::write(stage_dir.join("loss.csv"), trace_csv(&state.meta.trace))?;
    println!(
        "stage {} finished: {} steps in {:.1}s, checkpoint {}",
        stage.number(),
        state.meta.step,
        start.elapsed().as_secs_f64(),
        final_dir.display()
    );
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn evaluate(ckpt: &Path, data: &Path, split: &str, report: &Path) -> Result<()> {
    let ck = load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    eprintln!("resolved config:\n{}", serde_json::to_string_pretty(&ck.config)?);
    let set = load_split(data, split)?;
    let mut ecfg = ck.config.eval.clone();
    ecfg.split = split.to_string();
    let (rep, preds, routing) = eval::evaluate(&ck.model, &set, &ecfg)?;
    if let Some(dir) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(report, serde_json::to_string_pretty(&rep)? + "\n")?;
    let table = rep.table();
    fs::write(sibling(report, ".txt"), &table)?;
    let jsonl = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
    fs::write(
        sibling(report, ".routing.jsonl"),
        jsonl(routing.iter().map(serde_json::to_string).collect::<Result<_, _>>()?),
    )?;
    fs::write(
        sibling(report, ".predictions.jsonl"),
        jsonl(preds.iter().map(serde_json::to_string).collect::<Result<_, _>>()?),
    )?;
    print!("{table}");
    Ok(())
}

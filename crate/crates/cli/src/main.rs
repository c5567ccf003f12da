use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cclip_core::datagen::{
    export_classification, export_diffusion, export_lexicon, generate_classification_dataset,
    generate_diffusion_dataset, load_classification, load_diffusion, ClassificationDataset,
};
use cclip_core::decompose::{batch_decompose, CategoryLexicon};
use cclip_core::error::Error as CoreError;
use cclip_core::losses::AdversarialMode;
use cclip_core::train::diffusion::{write_guidance, write_samples};
use cclip_core::train::gradcheck::{run_gradcheck, GradcheckOptions, COMPONENTS};
use cclip_core::train::metrics::write_csv;
use cclip_core::train::{
    build_encoders, diffusion_checkpoint, diffusion_from_checkpoint, encoders_checkpoint, encoders_from_checkpoint,
    evaluate_classification, evaluation_row, guidance_eval, sample_prompt, sweep_alpha, sweep_lambda, train_diffusion,
    train_encoders, Checkpoint, Prompt, TrainConfig, TrainMode,
};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "cclip",
    version,
    about = "Decoupled style/category adapters and split-attention guidance"
)]
struct Cli {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (takes precedence over CCLIP_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic datasets, lexicon, and caption list.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Split captions (one per line) into style and category prompts.
    Decompose {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the style and category adapters.
    TrainEncoders(TrainArgs),
    /// Top-1 accuracy of a trained checkpoint at given residual ratios.
    EvalClassify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        alpha_style: Option<f64>,
        #[arg(long)]
        alpha_category: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Residual-ratio or adversarial-weight sweep.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated grid; defaults to 0,0.2,...,1 for alpha and
        /// 0,0.1,...,0.5 for lambda.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Trained checkpoint (required for alpha; supplies the config for lambda).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy denoiser on the 2-D mixture.
    TrainDiffusion {
        /// Encoder checkpoint providing the adapters; fresh adapters otherwise.
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-step loss CSV.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Sample points for one prompt.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Style name; used with --category.
        #[arg(long, requires = "category", conflicts_with = "caption")]
        style: Option<String>,
        #[arg(long, requires = "style")]
        category: Option<String>,
        /// Free caption, split with the lexicon.
        #[arg(long)]
        caption: Option<String>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle accuracy of matched and mismatched prompts.
    GuidanceEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss and the attention block.
    Gradcheck {
        #[arg(long, default_value_t = cclip_core::train::gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long, default_value_t = cclip_core::train::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Axis {
    Alpha,
    Lambda,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Samples kept per (style, category) cell.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, value_parser = parse_adversarial)]
    adversarial_mode: Option<AdversarialMode>,
    #[arg(long)]
    alpha_style: Option<f64>,
    #[arg(long)]
    alpha_category: Option<f64>,
    #[arg(long)]
    pretrain_contrastive: bool,
    #[arg(long)]
    record_wall_time: bool,
    /// Classification dataset (JSON lines); generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn parse_adversarial(s: &str) -> Result<AdversarialMode, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Seed overrides for a config read back from a checkpoint.
fn checkpoint_seed(cli: &Cli, cfg: &mut TrainConfig) -> Result<()> {
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn pick(flag: &Option<PathBuf>, fallback: &Option<PathBuf>) -> Option<PathBuf> {
    flag.clone().or_else(|| fallback.clone())
}

fn lexicon(flag: &Option<PathBuf>, cfg: &TrainConfig) -> Result<CategoryLexicon> {
    let path = pick(flag, &cfg.paths.lexicon)
        .ok_or_else(|| CoreError::Config("a category lexicon is required (--lexicon or paths.lexicon)".into()))?;
    Ok(CategoryLexicon::load(&path)?)
}

fn classification_data(flag: &Option<PathBuf>, cfg: &TrainConfig) -> Result<ClassificationDataset> {
    Ok(match pick(flag, &cfg.paths.data) {
        Some(p) => load_classification(&p)?,
        None => generate_classification_dataset(&cfg.data)?,
    })
}

fn test_split(flag: &Option<PathBuf>, cfg: &TrainConfig) -> Result<Vec<cclip_core::datagen::ClassificationSample>> {
    Ok(match pick(flag, &cfg.paths.test) {
        Some(p) => load_classification(&p)?.test,
        None => generate_classification_dataset(&cfg.data)?.test,
    })
}

fn require_out(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    pick(flag, fallback).ok_or_else(|| CoreError::Config(format!("no output path for the {what}")).into())
}

fn gen_data(cfg: &TrainConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ds = generate_classification_dataset(&cfg.data)?;
    export_classification(&ds, &out_dir.join("classification.jsonl"))?;
    let diff = generate_diffusion_dataset(&cfg.data, &cfg.diffusion.mixture)?;
    export_diffusion(&diff, &out_dir.join("diffusion.jsonl"))?;
    export_lexicon(&cfg.data, &out_dir.join("lexicon.txt"))?;
    let captions: String = ds
        .train
        .iter()
        .chain(&ds.test)
        .map(|s| format!("{}\n", s.caption))
        .collect();
    std::fs::write(out_dir.join("captions.txt"), captions)?;
    println!(
        "wrote {} classification samples ({} train, {} test), {} diffusion points, {} lexicon nouns to {}",
        ds.train.len() + ds.test.len(),
        ds.train.len(),
        ds.test.len(),
        diff.len(),
        cfg.data.num_categories(),
        out_dir.display()
    );
    Ok(())
}

fn train_encoders_cmd(mut cfg: TrainConfig, a: &TrainArgs) -> Result<()> {
    set(&mut cfg.mode, a.mode);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    if a.shots.is_some() {
        cfg.shots = a.shots;
    }
    set(&mut cfg.optimizer.lr, a.lr);
    set(&mut cfg.loss.lambda1, a.lambda1);
    set(&mut cfg.loss.lambda2, a.lambda2);
    set(&mut cfg.loss.adversarial_mode, a.adversarial_mode);
    set(&mut cfg.alpha_style, a.alpha_style);
    set(&mut cfg.alpha_category, a.alpha_category);
    cfg.pretrain_contrastive |= a.pretrain_contrastive;
    cfg.record_wall_time |= a.record_wall_time;
    if a.lexicon.is_some() {
        cfg.paths.lexicon = a.lexicon.clone();
    }
    cfg.validate()?;
    let checkpoint = require_out(&a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    let ds = classification_data(&a.data, &cfg)?;
    let lex = match cfg.mode {
        TrainMode::Unlabeled => Some(lexicon(&None, &cfg)?),
        TrainMode::Labeled => None,
    };
    let enc = build_encoders(&cfg, &ds.train)?;
    let run = train_encoders(&cfg, enc, &ds.train, &ds.test, lex.as_ref())?;
    encoders_checkpoint(&cfg, &run.encoders).save(&checkpoint)?;
    if let Some(m) = pick(&a.metrics, &cfg.paths.metrics) {
        write_csv(&m, &run.metrics)?;
    }
    let last = run.metrics.last().expect("row 0 always present");
    println!(
        "epochs {} loss {:.4} -> {:.4}; test style_top1 {:.4} category_top1 {:.4} (alpha {}/{})",
        cfg.epochs,
        run.initial_loss(),
        run.final_loss(),
        last.style_top1,
        last.category_top1,
        cfg.alpha_style,
        cfg.alpha_category
    );
    println!("checkpoint {}", checkpoint.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<CoreError>().is_some_and(CoreError::is_numerical));
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::GenData { out_dir } => gen_data(&load_config(cli)?, out_dir)?,
        Command::Decompose {
            captions,
            lexicon: lex,
            out,
        } => {
            let cfg = load_config(cli)?;
            let n = batch_decompose(captions, &lexicon(lex, &cfg)?, out)?;
            println!("decomposed {n} captions into {}", out.display());
        }
        Command::TrainEncoders(a) => train_encoders_cmd(load_config(cli)?, a)?,
        Command::EvalClassify {
            checkpoint,
            test,
            alpha_style,
            alpha_category,
            out,
        } => {
            let (mut cfg, enc) = encoders_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            checkpoint_seed(cli, &mut cfg)?;
            set(&mut cfg.alpha_style, *alpha_style);
            set(&mut cfg.alpha_category, *alpha_category);
            cfg.validate()?;
            let test = test_split(test, &cfg)?;
            let (s, c) = evaluate_classification(&enc, &cfg.data, &test, cfg.alpha_style, cfg.alpha_category)?;
            println!("alpha_style {} alpha_category {}", cfg.alpha_style, cfg.alpha_category);
            println!("style_top1 {s:.4}\ncategory_top1 {c:.4}");
            if let Some(o) = out {
                let row = evaluation_row(&cfg, cfg.epochs, (s, c), cfg.alpha_style, cfg.alpha_category);
                write_csv(o, &[row])?;
            }
        }
        Command::Sweep {
            axis,
            grid,
            checkpoint,
            data,
            lexicon: lex,
            out,
        } => {
            let rows = match axis {
                Axis::Alpha => {
                    let path = checkpoint
                        .as_ref()
                        .ok_or_else(|| CoreError::Config("alpha sweep needs --checkpoint".into()))?;
                    let (mut cfg, enc) = encoders_from_checkpoint(&Checkpoint::load(path)?)?;
                    checkpoint_seed(cli, &mut cfg)?;
                    let grid = grid.clone().unwrap_or_else(|| vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
                    let test = classification_data(data, &cfg)?.test;
                    sweep_alpha(&cfg, &enc, &test, &grid)?
                }
                Axis::Lambda => {
                    let mut cfg = match checkpoint {
                        Some(p) => encoders_from_checkpoint(&Checkpoint::load(p)?)?.0,
                        None => load_config(cli)?,
                    };
                    checkpoint_seed(cli, &mut cfg)?;
                    let grid = grid.clone().unwrap_or_else(|| vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]);
                    let ds = classification_data(data, &cfg)?;
                    let lex = match cfg.mode {
                        TrainMode::Unlabeled => Some(lexicon(lex, &cfg)?),
                        TrainMode::Labeled => None,
                    };
                    sweep_lambda(&cfg, &ds.train, &ds.test, lex.as_ref(), &grid)?
                }
            };
            for r in &rows {
                println!(
                    "alpha {}/{} lambda {}/{}: style_top1 {:.4} category_top1 {:.4}",
                    r.alpha_style, r.alpha_category, r.lambda1, r.lambda2, r.style_top1, r.category_top1
                );
            }
            write_csv(out, &rows)?;
        }
        Command::TrainDiffusion {
            encoders,
            data,
            lexicon: lex,
            steps,
            lr,
            alpha,
            tokens,
            checkpoint,
            losses,
        } => {
            let (mut cfg, enc) = match encoders {
                Some(p) => {
                    let (mut c, e) = encoders_from_checkpoint(&Checkpoint::load(p)?)?;
                    if let Some(path) = &cli.config {
                        c.diffusion = TrainConfig::load(path)?.diffusion;
                    }
                    checkpoint_seed(cli, &mut c)?;
                    (c, e)
                }
                None => {
                    let c = load_config(cli)?;
                    let e = build_encoders(&c, &[])?;
                    (c, e)
                }
            };
            set(&mut cfg.diffusion.steps, *steps);
            set(&mut cfg.diffusion.lr, *lr);
            set(&mut cfg.diffusion.alpha, *alpha);
            set(&mut cfg.diffusion.tokens, *tokens);
            if lex.is_some() {
                cfg.paths.lexicon = lex.clone();
            }
            cfg.validate()?;
            let out = require_out(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
            let lexicon = lexicon(&None, &cfg)?;
            let points = match data {
                Some(p) => load_diffusion(p)?,
                None => generate_diffusion_dataset(&cfg.data, &cfg.diffusion.mixture)?,
            };
            let run = train_diffusion(&cfg, &enc, &points, &lexicon)?;
            diffusion_checkpoint(&cfg, &enc, &run.params).save(&out)?;
            if let Some(path) = losses {
                let mut text = String::from("step,loss\n");
                for (i, l) in run.losses.iter().enumerate() {
                    text.push_str(&format!("{},{l}\n", i + 1));
                }
                std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            let n = run.losses.len();
            let tail = &run.losses[n.saturating_sub(100)..];
            println!(
                "steps {n}; mean loss over last {} steps {:.4}",
                tail.len(),
                tail.iter().sum::<f64>() / tail.len().max(1) as f64
            );
            println!("checkpoint {}", out.display());
        }
        Command::Sample {
            checkpoint,
            lexicon: lex,
            style,
            category,
            caption,
            n,
            out,
        } => {
            let (mut cfg, enc, params) = diffusion_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            checkpoint_seed(cli, &mut cfg)?;
            let lexicon = lexicon(lex, &cfg)?;
            let caption = match (style, category, caption) {
                (Some(s), Some(c), None) => {
                    let si = cfg.data.styles.iter().position(|x| x == s);
                    let ci = cfg.data.categories.iter().position(|x| x == c);
                    match (si, ci) {
                        (Some(si), Some(ci)) => cfg.data.caption(si, ci),
                        _ => bail!(CoreError::InvalidInput(format!(
                            "unknown style {s:?} or category {c:?}"
                        ))),
                    }
                }
                (None, None, Some(c)) => c.clone(),
                _ => bail!(CoreError::InvalidInput(
                    "give --style and --category, or --caption".into()
                )),
            };
            let prompt = Prompt::new(&caption, &enc, &lexicon, cfg.diffusion.alpha, cfg.diffusion.tokens)?;
            let rows = sample_prompt(&cfg, &params, &prompt, *n, 0)?;
            write_samples(out, &rows)?;
            println!(
                "{} samples for style prompt {:?} / category prompt {:?} -> {}",
                rows.len(),
                prompt.style_text,
                prompt.category_text,
                out.display()
            );
        }
        Command::GuidanceEval {
            checkpoint,
            lexicon: lex,
            samples,
            out,
        } => {
            let (mut cfg, enc, params) = diffusion_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            checkpoint_seed(cli, &mut cfg)?;
            let lexicon = lexicon(lex, &cfg)?;
            let n = samples.unwrap_or(cfg.diffusion.samples_per_prompt);
            let rep = guidance_eval(&cfg, &enc, &params, &lexicon, n)?;
            println!(
                "{:<10} {:<10} {:<14} {:<14} {:>8}",
                "style", "category", "prompt_style", "prompt_cat", "accuracy"
            );
            for r in &rep.rows {
                println!(
                    "{:<10} {:<10} {:<14} {:<14} {:>8.3}",
                    r.style, r.category, r.prompt_style, r.prompt_category, r.accuracy
                );
            }
            println!(
                "matched mean {:.4} min {:.4}; mismatched mean {:.4} max {:.4}",
                rep.matched_mean(),
                rep.matched_min(),
                rep.mismatched_mean(),
                rep.mismatched_max()
            );
            if let Some(o) = out {
                write_guidance(o, &rep)?;
            }
        }
        Command::Gradcheck {
            seeds,
            tolerance,
            inject_sign_flip,
        } => {
            if let Some(name) = inject_sign_flip {
                if !COMPONENTS.contains(&name.as_str()) {
                    return Err(anyhow!(CoreError::InvalidInput(format!("unknown component {name:?}"))));
                }
            }
            let rep = run_gradcheck(&GradcheckOptions {
                seeds: *seeds,
                tolerance: *tolerance,
                seed: load_config(cli)?.seed,
                inject_sign_flip: inject_sign_flip.clone(),
            })?;
            println!("{rep}");
            if !rep.passed() {
                return Ok(EXIT_NUMERICAL);
            }
        }
    }
    Ok(0)
}

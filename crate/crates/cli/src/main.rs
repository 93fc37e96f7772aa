mod run_config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nextloc::data::{MultiCityCorpus, Split};
use nextloc::eval::{self, Arm, EvalReport, ReportRow};
use nextloc::model::Model;
use nextloc::synth::{self, SynthSpec};
use nextloc::train::{self, AdamW, Checkpoint};
use nextloc::{Error, Result};

use run_config::RunConfig;

#[derive(Parser)]
#[command(
    name = "nextloc",
    version,
    about = "Multi-city next-location prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration sources, applied in order: file, overrides, seed.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.sets, self.seed)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.sets.is_empty() || self.seed.is_some()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Markov,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-city corpus.
    Synth {
        /// Generator spec; the built-in three-city spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Window, filter and user-split raw trajectories.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model on every city of a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the initialized model without training.
        #[arg(long)]
        init_only: bool,
    },
    /// Score a checkpoint with Acc@1/3/5 per city.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict to one city.
        #[arg(long)]
        city: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Directory for eval.csv and eval.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// With any of these given, the checkpoint must match the resolved model config.
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a per-city baseline fitted on the train split.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        city: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Joint training against one model per city, over several seeds.
    Compare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Mean gate weight per layer, city and expert.
    InspectMoe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Location embeddings before and after the cross network.
    ExportEmb {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
}

fn load_corpus(dir: &Path, run: &RunConfig, city: Option<&str>) -> Result<MultiCityCorpus> {
    let corpus = MultiCityCorpus::load(dir, &run.data())?;
    match city {
        Some(c) if corpus.city(c).is_none() => {
            Err(Error::Config(format!("no city `{c}` in {}", dir.display())))
        }
        Some(c) => corpus.subset(&[c]),
        None => Ok(corpus),
    }
}

fn load_model(path: &Path, cfg: &ConfigArgs, run: &RunConfig) -> Result<Model> {
    let expected = cfg.given().then(|| run.model());
    Checkpoint::load(path, expected.as_ref())?.model()
}

fn report(report: &EvalReport, out: Option<&Path>, stem: &str) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(dir) = out {
        mkdir(dir)?;
        write(dir.join(format!("{stem}.csv")), &report.to_csv())?;
        write(dir.join(format!("{stem}.txt")), &report.to_text())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let mut spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::Io { path: p, source: e })?;
                    SynthSpec::from_toml(&text)?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let generated = synth::generate(&spec)?;
            generated.write(&out)?;
            for c in &generated.cities {
                println!(
                    "{}: {} locations, {} users",
                    c.id,
                    c.table.len(),
                    c.truth.len()
                );
            }
        }
        Command::Preprocess { corpus, out, cfg } => {
            let run = cfg.resolve()?;
            let corpus = load_corpus(&corpus, &run, None)?;
            mkdir(&out)?;
            corpus.write(&out)?;
            run.echo(&out)?;
            for c in &corpus.cities {
                let s = &c.splits;
                println!(
                    "{}: train {} val {} test {}",
                    c.id,
                    s.train.len(),
                    s.val.len(),
                    s.test.len()
                );
            }
        }
        Command::Train {
            corpus,
            out,
            cfg,
            init_only,
        } => {
            let run = cfg.resolve()?;
            let corpus = load_corpus(&corpus, &run, None)?;
            mkdir(&out)?;
            run.echo(&out)?;
            let model = Model::new(run.model(), run.seed)?;
            let ckpt = if init_only {
                write(out.join("metrics.csv"), &train::metrics_csv(&[]))?;
                Checkpoint::from_model(&model, &AdamW::new(&model.store), 0, corpus.manifest_hash())
            } else {
                let outcome = train::train_loop(model, &corpus, &run.train())?;
                write(
                    out.join("metrics.csv"),
                    &train::metrics_csv(&outcome.history),
                )?;
                println!(
                    "best epoch {} val loss {:.4}{}",
                    outcome.best_epoch,
                    outcome.best_val,
                    if outcome.stopped_early {
                        " (stopped early)"
                    } else {
                        ""
                    }
                );
                outcome.checkpoint(corpus.manifest_hash())
            };
            ckpt.save(&out.join("model.ckpt"))?;
        }
        Command::Eval {
            checkpoint,
            corpus,
            city,
            split,
            out,
            cfg,
        } => {
            let run = cfg.resolve()?;
            let model = load_model(&checkpoint, &cfg, &run)?;
            let corpus = load_corpus(&corpus, &run, city.as_deref())?;
            let mut r = eval::evaluate_model(&model, &corpus, split.into(), run.batch_size)?;
            r.provenance
                .insert(0, format!("checkpoint {}", checkpoint.display()));
            report(&r, out.as_deref(), "eval")?;
        }
        Command::Baseline {
            kind,
            corpus,
            city,
            split,
            out,
            cfg,
        } => {
            let run = cfg.resolve()?;
            let corpus = load_corpus(&corpus, &run, city.as_deref())?;
            let split: Split = split.into();
            let mut rows = Vec::new();
            for c in &corpus.cities {
                let (train, test) = (&c.splits.train, c.splits.get(split));
                let mut row = ReportRow {
                    city: c.id.clone(),
                    model: None,
                    markov: None,
                    linear: None,
                };
                match kind {
                    BaselineKind::Markov => {
                        row.markov = Some(eval::markov_baseline(train, test, c.n_locations())?)
                    }
                    BaselineKind::Linear => {
                        row.linear = Some(eval::linear_baseline(
                            train,
                            test,
                            &c.features,
                            &run.linear(),
                        )?)
                    }
                }
                rows.push(row);
            }
            let r = EvalReport {
                split: split.name().to_string(),
                rows,
                provenance: vec![format!("corpus_hash {:016x}", corpus.manifest_hash())],
            };
            let stem = match kind {
                BaselineKind::Markov => "markov",
                BaselineKind::Linear => "linear",
            };
            report(&r, out.as_deref(), stem)?;
        }
        Command::Compare { corpus, out, cfg } => {
            let run = cfg.resolve()?;
            let corpus = load_corpus(&corpus, &run, None)?;
            mkdir(&out)?;
            run.echo(&out)?;
            let cmp = eval::compare_joint_vs_separate(
                &corpus,
                &run.model(),
                &run.train(),
                &run.compare_seeds,
            )?;
            write(out.join("comparison.csv"), &cmp.table_csv())?;
            write(out.join("comparison.txt"), &cmp.to_text())?;
            write(out.join("curves_joint.csv"), &cmp.curves_csv(Arm::Joint))?;
            write(
                out.join("curves_separate.csv"),
                &cmp.curves_csv(Arm::Separate),
            )?;
            print!("{}", cmp.to_text());
        }
        Command::InspectMoe {
            checkpoint,
            corpus,
            split,
            out,
            cfg,
        } => {
            let run = cfg.resolve()?;
            let model = load_model(&checkpoint, &cfg, &run)?;
            let corpus = load_corpus(&corpus, &run, None)?;
            mkdir(&out)?;
            write(
                out.join("expert_usage.csv"),
                &eval::expert_usage(&model, &corpus, split.into(), run.batch_size)?,
            )?;
        }
        Command::ExportEmb {
            checkpoint,
            corpus,
            out,
            cfg,
        } => {
            let run = cfg.resolve()?;
            let model = load_model(&checkpoint, &cfg, &run)?;
            let corpus = load_corpus(&corpus, &run, None)?;
            mkdir(&out)?;
            write(
                out.join("embeddings.csv"),
                &eval::export_embeddings(&model, &corpus)?,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

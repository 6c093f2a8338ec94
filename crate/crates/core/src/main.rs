use std::fs::{self, File};
use std::io::{BufReader, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rfm_edit::data::instruction::render_tokens;
use rfm_edit::data::{generate_dataset, parse_instruction, Catalog, Dataset, Split, Task};
use rfm_edit::flow::{sample_with_attention, SamplerConfig};
use rfm_edit::metrics::{export_temporal_heatmap, export_token_dynamics};
use rfm_edit::tensor::{read_tensor, write_tensor};
use rfm_edit::train::{
    ablate_tstart, evaluate_split, reference_classifier, train_loop, Checkpoint, Editor,
    ModelEditor, OracleEditor, RunConfig,
};

/// Instruction-guided editing of synthetic event spectrograms with rectified flow matching.
#[derive(Parser, Debug)]
#[command(name = "rfm-edit", version)]
struct Cli {
    /// TOML run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for all relative artifact paths.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the triplet dataset.
    GenData {
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        val_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
    },
    /// Train the velocity model, keeping the best checkpoint by validation proxy-CLAP.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from the last checkpoint of the same configuration.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Edit one spectrogram file with a text instruction.
    Edit {
        #[arg(long = "in")]
        input: PathBuf,
        /// "add dog", "remove siren", "replace dog with siren", ...
        #[arg(long)]
        instr: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write `<prefix>.pgm` and `<prefix>.csv` attention heatmaps.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Score edits of the test split and write a metric report.
    Eval {
        /// Score the ground-truth edits instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Sweep the sampling start time over the test split.
    AblateTstart {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        /// Comma-separated start times.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
    /// Export attention dynamics and heatmaps for one test triplet.
    VizAttn {
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Instruction token to trace; defaults to the first event token.
        #[arg(long, default_value_t = 1)]
        token: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerFlags,
    },
}

#[derive(Args, Debug, Default)]
struct SamplerFlags {
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    t_start: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
}

impl SamplerFlags {
    fn apply(&self, s: &mut SamplerConfig) {
        if let Some(v) = self.sigma_min {
            s.sigma_min = v;
        }
        if let Some(v) = self.t_start {
            s.t_start = v;
        }
        if let Some(v) = self.steps {
            s.num_steps = v;
        }
        if let Some(v) = self.guidance {
            s.guidance_weight = v;
        }
    }
}

struct Term {
    color: bool,
}

impl Term {
    fn new() -> Self {
        let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
        Self {
            color: !no_color && std::io::stderr().is_terminal(),
        }
    }

    fn paint(&self, code: &str, s: &str) -> String {
        if self.color {
            format!("\x1b[{code}m{s}\x1b[0m")
        } else {
            s.to_string()
        }
    }

    fn info(&self, label: &str, msg: impl AsRef<str>) {
        eprintln!(
            "{} {}",
            self.paint("1;32", &format!("{label:>10}")),
            msg.as_ref()
        );
    }

    fn error(&self, err: &anyhow::Error) {
        eprintln!("{} {err:#}", self.paint("1;31", "error:"));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let term = Term::new();
    match run(cli, &term) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            term.error(&e);
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn checkpoint_path(cli: &Cli, cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.as_ref().map_or_else(
        || {
            cli.workdir
                .join(&cfg.train.checkpoint_dir)
                .join("best.ckpt")
        },
        |p| cli.workdir.join(p),
    )
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    Checkpoint::load_for(path, &cfg.model)
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_dataset(cli: &Cli, cfg: &RunConfig) -> Result<Dataset> {
    let dir = cli.workdir.join(&cfg.train.dataset_dir);
    Dataset::load(&dir).with_context(|| {
        format!(
            "loading dataset from {} (run gen-data first)",
            dir.display()
        )
    })
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> rfm_edit::Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli, term: &Term) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData {
            train_size,
            val_size,
            test_size,
        } => {
            if let Some(n) = train_size {
                cfg.data.train_size = *n;
            }
            if let Some(n) = val_size {
                cfg.data.val_size = *n;
            }
            if let Some(n) = test_size {
                cfg.data.test_size = *n;
            }
            cfg.data.validate()?;
            let data = generate_dataset(&cfg.data, cfg.train.seed)?;
            let dir = cli.workdir.join(&cfg.train.dataset_dir);
            data.save(&dir)?;
            for s in Split::ALL {
                let m = &data.manifest.splits[&s];
                term.info(
                    s.name(),
                    format!(
                        "{} triplets ({} of {} passed the filter)",
                        m.size, m.passed_filter, m.generated
                    ),
                );
            }
            term.info("wrote", dir.display().to_string());
        }
        Command::Train {
            epochs,
            lr,
            batch_size,
            resume,
            sampler,
        } => {
            if let Some(v) = epochs {
                cfg.train.epochs = *v;
            }
            if let Some(v) = lr {
                cfg.train.learning_rate = *v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = *v;
            }
            sampler.apply(&mut cfg.train.sampler);
            term.info("config", cfg.config_hash());
            let out = train_loop(&cfg, &cli.workdir, *resume, &mut |r| {
                term.info(
                    &format!("epoch {}", r.epoch + 1),
                    format!("loss {:.5}  val proxy-CLAP {:.4}", r.loss, r.val_clap),
                )
            })?;
            term.info(
                "best",
                format!("{:.4} -> {}", out.best_score, out.best_path.display()),
            );
        }
        Command::Edit {
            input,
            instr,
            out,
            checkpoint,
            heatmap,
            sampler,
        } => {
            let (input, out) = (&cli.workdir.join(input), &cli.workdir.join(out));
            sampler.apply(&mut cfg.train.sampler);
            let ck = load_model(&checkpoint_path(&cli, &cfg, checkpoint), &cfg)?;
            let catalog = Catalog::standard(cfg.model.bins)?;
            let x = read_tensor(&mut BufReader::new(
                File::open(input).with_context(|| format!("opening {}", input.display()))?,
            ))
            .with_context(|| format!("reading spectrogram {}", input.display()))?;
            if x.shape() != [cfg.model.frames, cfg.model.bins] {
                bail!(
                    "input is {:?}, model expects [{}, {}]",
                    x.shape(),
                    cfg.model.frames,
                    cfg.model.bins
                );
            }
            let tokens = parse_instruction(instr, &catalog)?;
            let embedding = ck.model.encode_instruction(&tokens)?;
            let trace = sample_with_attention(
                &ck.model,
                &x,
                &embedding,
                &cfg.train.sampler,
                cfg.train.seed,
            )?;
            write_file(out, |w| write_tensor(w, &trace.output))?;
            term.info(
                "edited",
                format!(
                    "{:?} -> {}",
                    render_tokens(&tokens, &catalog),
                    out.display()
                ),
            );
            if let Some(prefix) = heatmap {
                let prefix = cli.workdir.join(prefix);
                let h =
                    export_temporal_heatmap(&trace.attention, cfg.model.frames, cfg.model.bins)?;
                h.save_pgm(&prefix.with_extension("pgm"))?;
                write_file(&prefix.with_extension("csv"), |w| h.write_csv(w))?;
                term.info(
                    "heatmap",
                    prefix.with_extension("pgm").display().to_string(),
                );
            }
        }
        Command::Eval {
            oracle,
            checkpoint,
            subset,
            out,
            sampler,
        } => {
            sampler.apply(&mut cfg.train.sampler);
            if let Some(n) = subset {
                cfg.eval.subset_size = *n;
            }
            let data = load_dataset(&cli, &cfg)?;
            let classifier = classifier_for(&cli, &cfg, &data.catalog)?;
            let ck;
            let model_editor;
            let editor: &dyn Editor = if *oracle {
                &OracleEditor
            } else {
                ck = load_model(&checkpoint_path(&cli, &cfg, checkpoint), &cfg)?;
                model_editor = ModelEditor(&ck.model);
                &model_editor
            };
            let report = evaluate_split(
                editor,
                &data.test,
                &classifier,
                &data.catalog,
                &cfg.data.detector,
                &cfg.train.sampler,
                cfg.eval.subset_size,
                cfg.train.seed,
                &cfg.config_hash(),
            )?;
            let path = cli
                .workdir
                .join(out.as_deref().unwrap_or(Path::new("reports/eval.json")));
            write_file(&path, |w| {
                serde_json::to_writer_pretty(&mut *w, &report)?;
                writeln!(w)?;
                Ok(())
            })?;
            term.info(
                "eval",
                format!(
                    "n={} proxy-CLAP {:.4}  FD(proxy) {:.4}  KL {:.4}  IS {:.4}",
                    report.n, report.clap_mean, report.fd, report.kl, report.is
                ),
            );
            term.info("wrote", path.display().to_string());
        }
        Command::AblateTstart {
            checkpoint,
            seeds,
            items,
            values,
            out,
            sampler,
        } => {
            sampler.apply(&mut cfg.train.sampler);
            if let Some(v) = seeds {
                cfg.eval.ablation_seeds = *v;
            }
            if let Some(v) = items {
                cfg.eval.ablation_items = *v;
            }
            if let Some(v) = values {
                cfg.eval.t_start_values = v.clone();
            }
            if sampler.steps.is_none() {
                cfg.train.sampler.num_steps = cfg.eval.ablation_steps;
            }
            let data = load_dataset(&cli, &cfg)?;
            let classifier = classifier_for(&cli, &cfg, &data.catalog)?;
            let ck = load_model(&checkpoint_path(&cli, &cfg, checkpoint), &cfg)?;
            let table = ablate_tstart(
                &ModelEditor(&ck.model),
                &data.test,
                &classifier,
                &data.catalog,
                &cfg.data.detector,
                &cfg.train.sampler,
                &cfg.eval.t_start_values,
                cfg.eval.ablation_seeds,
                cfg.eval.ablation_items,
                cfg.train.seed,
                &cfg.config_hash(),
            )?;
            let path = cli.workdir.join(
                out.as_deref()
                    .unwrap_or(Path::new("reports/ablate_tstart.csv")),
            );
            write_file(&path, |w| table.write_csv(w))?;
            write_file(&path.with_extension("seeds.csv"), |w| {
                table.write_seed_csv(w)
            })?;
            for r in &table.rows {
                term.info(
                    &format!("t={}", r.t_start),
                    format!(
                        "proxy-CLAP {:.4}  L2-to-input {:.4}",
                        r.report.clap_mean, r.l2_to_input
                    ),
                );
            }
            term.info("wrote", path.display().to_string());
        }
        Command::VizAttn {
            index,
            token,
            checkpoint,
            out,
            sampler,
        } => {
            sampler.apply(&mut cfg.train.sampler);
            let data = load_dataset(&cli, &cfg)?;
            let item = data.test.get(*index).with_context(|| {
                format!(
                    "test split has {} items, index {index} requested",
                    data.test.len()
                )
            })?;
            let ck = load_model(&checkpoint_path(&cli, &cfg, checkpoint), &cfg)?;
            let embedding = ck.model.encode_instruction(&item.instruction_tokens)?;
            let trace = sample_with_attention(
                &ck.model,
                item.input.spectrogram(),
                &embedding,
                &cfg.train.sampler,
                cfg.train.seed,
            )?;
            let (frames, bins) = (cfg.model.frames, cfg.model.bins);
            let prefix = cli.workdir.join(
                out.clone()
                    .unwrap_or_else(|| Path::new("reports").join(format!("attn_{index}"))),
            );
            let dynamics = export_token_dynamics(&trace.attention, *token, frames, bins)?;
            write_file(&prefix.with_extension("dynamics.csv"), |w| {
                dynamics.write_csv(w)
            })?;
            let h = export_temporal_heatmap(&trace.attention, frames, bins)?;
            h.save_pgm(&prefix.with_extension("pgm"))?;
            write_file(&prefix.with_extension("csv"), |w| h.write_csv(w))?;
            write_file(&prefix.with_extension("spec"), |w| {
                write_tensor(w, &trace.output)
            })?;
            let task = match item.task {
                Task::Add => "add",
                Task::Remove => "remove",
                Task::Replace => "replace",
            };
            term.info(
                "traced",
                format!(
                    "{task} triplet {index}: {:?}",
                    render_tokens(&item.instruction_tokens, &data.catalog)
                ),
            );
            term.info(
                "wrote",
                format!("{}.{{pgm,csv,dynamics.csv,spec}}", prefix.display()),
            );
        }
    }
    Ok(())
}

fn classifier_for(
    cli: &Cli,
    cfg: &RunConfig,
    catalog: &Catalog,
) -> Result<rfm_edit::metrics::ReferenceClassifier> {
    let path = cli.workdir.join("reference_classifier.bin");
    Ok(reference_classifier(
        &path,
        catalog,
        cfg.data.frames,
        cfg.data.bins,
        cfg.eval.classifier_seed,
        &cfg.eval.classifier,
    )?)
}

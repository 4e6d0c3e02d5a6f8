use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flexquant::analyzer::{analyze_model, build_switch_plan, SwitchPlan};
use flexquant::corpus;
use flexquant::engine::{
    evaluate, generate, sweep_switch_speed, traffic_report, write_sweep_csv, DecodeTrace,
    GenerationConfig,
};
use flexquant::error::{FlexQuantError, Result};
use flexquant::model::{Model, ModelConfig, FIXTURE_SEED};
use flexquant::precision::Precision;
use flexquant::quant::QuantMode;
use flexquant::scheduler::{SchedulerConfig, ThresholdMode};
use flexquant::tokenizer::{decode, encode};

#[derive(Parser)]
#[command(
    name = "flexquant",
    version,
    about = "Dynamic-precision decoding on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random fixture model.
    InitModel {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = FIXTURE_SEED)]
        seed: u64,
        #[arg(long, default_value = "asymmetric")]
        mode: QuantMode,
        /// Put every linear weight on the 8-bit grid.
        #[arg(long)]
        grid_exact: bool,
    },
    /// Rank layers by quantization KL and write a switch plan.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        /// Target bit-widths in ladder order.
        #[arg(long, value_delimiter = ',', default_value = "8,4")]
        bits: Vec<u8>,
        #[arg(long, default_value_t = flexquant::analyzer::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value = "asymmetric")]
        mode: QuantMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate from the whole prompt file and write a per-token trace.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Switching-speed sweep over the prompt file's lines.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,40")]
        sweep: Vec<usize>,
        /// Use at most this many prompt lines.
        #[arg(long, default_value_t = 20)]
        prompts: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quality and cost summary over the prompt file's lines, as JSON.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        prompts: usize,
        /// Text for perplexity; the bundled corpus if omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Render a JSONL trace as per-token CSV.
    Report {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Weights file; the built-in fixture if omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Switch plan; an empty plan if omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Prompt text; the bundled corpus if omitted.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    max_new: usize,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value = "prefill")]
    threshold_mode: ThresholdMode,
    #[arg(long, default_value_t = 20)]
    window_len: usize,
    #[arg(long, default_value_t = 1)]
    layers_per_switch: usize,
    #[arg(long, default_value = "8")]
    start_rung: Precision,
    #[arg(long)]
    eos: Option<u32>,
}

impl RunArgs {
    fn config(&self) -> GenerationConfig {
        GenerationConfig {
            max_new_tokens: self.max_new,
            eos_token: self.eos,
            scheduler: SchedulerConfig {
                window_len: self.window_len,
                theta: self.theta,
                threshold_mode: self.threshold_mode,
                layers_per_switch: self.layers_per_switch,
            },
            start_rung: self.start_rung,
        }
    }

    fn model(&self) -> Result<Model> {
        match &self.model {
            Some(p) => Model::load(p),
            None => Model::fixture(),
        }
    }

    fn plan(&self) -> Result<SwitchPlan> {
        match &self.plan {
            Some(p) => SwitchPlan::load(p),
            None => Ok(SwitchPlan::default()),
        }
    }

    fn prompt_text(&self) -> Result<String> {
        match &self.prompt_file {
            Some(p) => Ok(fs::read_to_string(p)?),
            None => Ok(corpus::CORPUS.to_string()),
        }
    }

    /// Non-empty lines, each one prompt, clipped so generation fits the context.
    fn prompt_lines(&self, limit: usize, max_seq: usize) -> Result<Vec<Vec<u32>>> {
        let text = self.prompt_text()?;
        let room = (max_seq + 1).saturating_sub(self.max_new);
        let prompts: Vec<Vec<u32>> = corpus::lines(&text)
            .take(limit)
            .map(|l| {
                let mut t = encode(l);
                t.truncate(room);
                t
            })
            .collect();
        if prompts.is_empty() {
            return Err(FlexQuantError::Input("no prompts in prompt file".into()));
        }
        Ok(prompts)
    }
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| FlexQuantError::Format(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel {
            out,
            seed,
            mode,
            grid_exact,
        } => {
            let config = ModelConfig::fixture();
            let model = if grid_exact {
                Model::random_grid_exact(config, seed)?
            } else {
                Model::random(config, seed, mode)?
            };
            model.save(&out)?;
            log::info!(
                "wrote {} linear layers to {}",
                model.layers().len(),
                out.display()
            );
        }
        Command::Analyze {
            model,
            bits,
            bins,
            mode,
            out,
        } => {
            let model = Model::load(&model)?;
            let weights = model.linear_weights()?;
            let mut plan = SwitchPlan::default();
            let mut from = Precision::Fp;
            let mut table = csv::Writer::from_writer(io::stdout().lock());
            for b in bits {
                let to = Precision::from_quant_bits(b).ok_or_else(|| {
                    FlexQuantError::Configuration(format!("unsupported bit-width {b}"))
                })?;
                let reports = analyze_model(weights.iter().copied(), b, bins, mode)?;
                for r in &reports {
                    table
                        .serialize(r)
                        .map_err(|e| FlexQuantError::Format(e.to_string()))?;
                }
                plan = plan.then(build_switch_plan(&reports, from, to)?)?;
                from = to;
            }
            table.flush()?;
            plan.save(&out)?;
        }
        Command::Generate { run, trace } => {
            let mut model = run.model()?;
            let plan = run.plan()?;
            let text = run.prompt_text()?;
            let prompt = encode(text.trim_end_matches(['\n', '\r']));
            let g = generate(&prompt, &mut model, &plan, &run.config())?;
            if let Some(path) = trace {
                let mut w = BufWriter::new(File::create(path)?);
                g.trace.write_jsonl(&mut w)?;
                w.flush()?;
            }
            print_json(&serde_json::json!({
                "tokens": g.tokens,
                "text": decode(&g.tokens),
                "threshold": g.threshold,
                "switches": g.trace.switch_events().count(),
                "effective_bits_final": model.effective_bits(),
            }))?;
        }
        Command::Bench {
            run,
            sweep,
            prompts,
            out,
        } => {
            if sweep.contains(&0) {
                return Err(FlexQuantError::Configuration(
                    "sweep speeds must be positive".into(),
                ));
            }
            let mut model = run.model()?;
            let plan = run.plan()?;
            let cfg = run.config();
            let prompts = run.prompt_lines(prompts, model.config().max_seq_len)?;
            let rows = sweep_switch_speed(&prompts, &mut model, &plan, &sweep, &cfg)?;
            write_sweep_csv(&rows, writer(out.as_deref())?)?;
            let g = generate(&prompts[0], &mut model, &plan, &cfg)?;
            let report = traffic_report(&g.trace)?;
            eprintln!(
                "{}",
                serde_json::to_string(&report)
                    .map_err(|e| FlexQuantError::Format(e.to_string()))?
            );
        }
        Command::Eval {
            run,
            prompts,
            corpus,
        } => {
            let mut model = run.model()?;
            let plan = run.plan()?;
            let prompts = run.prompt_lines(prompts, model.config().max_seq_len)?;
            let stream = match corpus {
                Some(p) => encode(&fs::read_to_string(p)?),
                None => corpus::stream(),
            };
            let report = evaluate(&prompts, &mut model, &plan, &run.config(), &stream)?;
            print_json(&report)?;
        }
        Command::Report { trace, out } => {
            let trace = DecodeTrace::read_jsonl(BufReader::new(File::open(trace)?))?;
            trace.write_csv(writer(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

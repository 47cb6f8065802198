mod config;
mod error;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use vemu::adaptation::{self, Provenance};
use vemu::analysis::{self, NmseReport};
use vemu::dataset::{LinkConfig, Split, SymbolDataset};
use vemu::network::{self, TrainReport};
use vemu::signal::FfeTaps;
use vemu::BiLstmModel;

use config::{LoadedConfig, RunConfig};
use error::CliError;
use layout::{millivolts, write_artifact, Layout, Stamp};

#[derive(Parser)]
#[command(name = "vemu", version, about = "VCSEL PAM-4 link oracle and Bi-LSTM emulator")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for datasets, models, reports and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Disable RIN and receiver noise.
    #[arg(long, global = true)]
    no_noise: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle and write one dataset per regime.
    Simulate {
        /// Bias voltage; repeatable. Defaults to the configured sweep.
        #[arg(long = "regime")]
        regimes: Vec<f64>,
    },
    /// Train an emulator from random initialisation.
    Train {
        #[arg(long)]
        regime: f64,
    },
    /// Fine-tune the model of one regime on another regime's data.
    Finetune {
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
    },
    /// Fine-tune with the recurrent matrices frozen.
    Reservoir {
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
    },
    /// Blend two neighbouring models for an intermediate bias.
    Interpolate {
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        v_target: f64,
    },
    /// Test-split NMSE of a regime's model.
    Evaluate {
        #[arg(long)]
        regime: f64,
        /// Checkpoint to evaluate instead of the resolved one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Weight-block perturbation study.
    Perturb {
        #[arg(long)]
        regime: f64,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Oracle versus emulator throughput.
    Benchmark {
        #[arg(long = "regime")]
        regimes: Vec<f64>,
        #[arg(long)]
        symbols: Option<usize>,
    },
}

struct Ctx {
    cfg: RunConfig,
    layout: Layout,
    stamp: Stamp,
    started: Instant,
}

impl Ctx {
    fn write(&self, path: &std::path::Path, bytes: &[u8]) -> Result<(), CliError> {
        write_artifact(&self.layout, &self.stamp, path, bytes)
    }

    /// Link with the configured taps, or the adapted taps persisted by
    /// `simulate`, adapting afresh if neither exists.
    fn link(&self) -> Result<LinkConfig, CliError> {
        let link = self.cfg.link()?;
        if self.cfg.signal.ffe_taps.is_some() {
            return Ok(link);
        }
        let path = self.layout.report("ffe_taps.tsv");
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::from(e).at(&path))?;
            let taps = parse_taps(&text).map_err(|e| CliError::Data(e).at(&path))?;
            return Ok(LinkConfig { taps, ..link });
        }
        self.adapt(link)
    }

    fn adapt(&self, mut link: LinkConfig) -> Result<LinkConfig, CliError> {
        let s = &self.cfg.signal;
        let r = link.adapt_ffe(s.ffe_adapt_bias_v, s.ffe_adapt_symbols, s.ffe_adapt_step, s.ffe_adapt_iterations)?;
        link.taps = r.taps;
        Ok(link)
    }

    fn summary(&self, mut report: NmseReport) -> NmseReport {
        report.wall_time_s = self.started.elapsed().as_secs_f64();
        println!("{}", report.summary_line());
        report
    }
}

fn taps_tsv(taps: &FfeTaps<f64>) -> String {
    let mut s = String::from("index\ttap\n");
    for (k, t) in taps.taps.iter().enumerate() {
        s.push_str(&format!("{k}\t{t}\n"));
    }
    s
}

fn parse_taps(text: &str) -> Result<FfeTaps<f64>, String> {
    let vals: Vec<f64> = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').nth(1).and_then(|v| v.parse().ok()).ok_or(format!("bad tap line {l:?}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; 4] = vals.try_into().map_err(|v: Vec<f64>| format!("expected 4 taps, got {}", v.len()))?;
    FfeTaps::new(arr, 1).map_err(|e| e.to_string())
}

fn loss_curve_tsv(r: &TrainReport) -> String {
    let mut s = String::from("epoch\ttrain_mse\tval_mse\n");
    for e in &r.loss_curve {
        s.push_str(&format!("{}\t{:e}\t{:e}\n", e.epoch, e.train_mse, e.val_mse));
    }
    s
}

fn evaluate(ctx: &Ctx, model: &BiLstmModel, ds: &SymbolDataset, prov: Provenance) -> Result<NmseReport, CliError> {
    let report = analysis::evaluate(model, ds, Split::Test, prov)?;
    let name = format!("eval_{}_{:04}mV.tsv", prov.name(), millivolts(ds.regime_voltage));
    ctx.write(&ctx.layout.report(&name), report.to_tsv().as_bytes())?;
    Ok(ctx.summary(report))
}

fn save_trained(
    ctx: &Ctx,
    model: &BiLstmModel,
    report: &TrainReport,
    prov: Provenance,
    ds: &SymbolDataset,
) -> Result<(), CliError> {
    let v = ds.regime_voltage;
    ctx.write(&ctx.layout.model(prov, v), &model.to_bytes())?;
    let curve = format!("{}_{:04}mV_loss.tsv", prov.name(), millivolts(v));
    ctx.write(&ctx.layout.report(&curve), loss_curve_tsv(report).as_bytes())?;
    evaluate(ctx, model, ds, prov)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let loaded = match &cli.config {
        Some(p) => LoadedConfig::from_file(p)?,
        None => LoadedConfig::defaults(),
    };
    let mut cfg = loaded.config.clone();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.no_noise {
        cfg.dataset.noise = false;
    }
    let ctx = Ctx {
        stamp: Stamp {
            config_hash: loaded.hash(),
            seed: cfg.seed,
            command: std::env::args().skip(1).collect::<Vec<_>>().join(" "),
        },
        cfg,
        layout: Layout::new(&cli.out),
        started,
    };
    let tc = ctx.cfg.train_config();

    match cli.command {
        Command::Simulate { regimes } => {
            let regimes = if regimes.is_empty() { ctx.cfg.dataset.regimes_v.clone() } else { regimes };
            let link = ctx.cfg.link()?;
            let link = if ctx.cfg.signal.ffe_taps.is_some() { link } else { ctx.adapt(link)? };
            ctx.write(&ctx.layout.report("ffe_taps.tsv"), taps_tsv(&link.taps).as_bytes())?;
            for v in regimes {
                let ds = link.build_dataset(v)?;
                ctx.write(&ctx.layout.dataset(v), &ds.to_bytes())?;
                let base = analysis::fit_linear_baseline(&ds, ctx.cfg.analysis.linear_half_window)?;
                let e = base.nmse(&ds, Split::Test)?;
                println!(
                    "regime {v:.3} V  linear NMSE {e:.5}  SNR {:.2} dB  wall {:.3} s",
                    analysis::nmse_to_snr_db(e).unwrap_or(f64::INFINITY),
                    ctx.started.elapsed().as_secs_f64()
                );
            }
        }
        Command::Train { regime } => {
            let ds = ctx.layout.load_dataset(regime)?;
            let (model, report) = network::train::<f64>(&ds, &tc, None)?;
            save_trained(&ctx, &model, &report, Provenance::Scratch, &ds)?;
        }
        Command::Finetune { from, to } => {
            let (base, _, _) = ctx.layout.resolve_model(from)?;
            let ds = ctx.layout.load_dataset(to)?;
            let (model, report) = adaptation::fine_tune(&base, &ds, &tc)?;
            save_trained(&ctx, &model, &report, Provenance::Transfer, &ds)?;
        }
        Command::Reservoir { from, to } => {
            let (base, _, _) = ctx.layout.resolve_model(from)?;
            let ds = ctx.layout.load_dataset(to)?;
            let (model, report) = adaptation::reservoir_fine_tune(&base, &ds, &tc)?;
            save_trained(&ctx, &model, &report, Provenance::Reservoir, &ds)?;
        }
        Command::Interpolate { from, to, v_target } => {
            let (lo, hi) = if from <= to { (from, to) } else { (to, from) };
            if !(v_target > lo && v_target < hi) {
                return Err(CliError::Config(format!(
                    "refusing to extrapolate: {v_target} V lies outside ({lo} V, {hi} V)"
                )));
            }
            let (a, _, _) = ctx.layout.resolve_model(lo)?;
            let (b, _, _) = ctx.layout.resolve_model(hi)?;
            let model = adaptation::interpolate_weights(&a, &b, v_target)?;
            ctx.write(&ctx.layout.model(Provenance::Interpolated, v_target), &model.to_bytes())?;
            if ctx.layout.dataset(v_target).exists() {
                let ds = ctx.layout.load_dataset(v_target)?;
                evaluate(&ctx, &model, &ds, Provenance::Interpolated)?;
            } else {
                println!(
                    "regime {v_target:.3} V  interpolated model written (no dataset to score)  wall {:.3} s",
                    ctx.started.elapsed().as_secs_f64()
                );
            }
        }
        Command::Evaluate { regime, model } => {
            let ds = ctx.layout.load_dataset(regime)?;
            let (m, prov) = match model {
                Some(p) => {
                    let m = BiLstmModel::load(&p).map_err(|e| CliError::from(e).at(&p))?;
                    let prov = provenance_from_file(&p).unwrap_or(Provenance::Scratch);
                    (m, prov)
                }
                None => {
                    let (m, prov, _) = ctx.layout.resolve_model(regime)?;
                    (m, prov)
                }
            };
            evaluate(&ctx, &m, &ds, prov)?;
        }
        Command::Perturb { regime, trials } => {
            let ds = ctx.layout.load_dataset(regime)?;
            let (model, _, _) = ctx.layout.resolve_model(regime)?;
            let n = trials.unwrap_or(ctx.cfg.analysis.perturbation_trials);
            let report = analysis::sensitivity_study(&model, &ds, n, ctx.cfg.seed)?;
            let name = format!("perturb_{:04}mV.tsv", millivolts(regime));
            ctx.write(&ctx.layout.report(&name), report.to_tsv().as_bytes())?;
            print!("{}", report.to_table());
            println!(
                "regime {regime:.3} V  baseline NMSE {:.5}  SNR {:.2} dB  wall {:.3} s",
                report.baseline_nmse,
                analysis::nmse_to_snr_db(report.baseline_nmse).unwrap_or(f64::INFINITY),
                ctx.started.elapsed().as_secs_f64()
            );
        }
        Command::Benchmark { regimes, symbols } => {
            let regimes = if regimes.is_empty() { ctx.cfg.dataset.regimes_v.clone() } else { regimes };
            let n = symbols.unwrap_or(ctx.cfg.analysis.benchmark_symbols);
            let link = ctx.link()?;
            // Inference cost does not depend on the weights, so any model of
            // the configured width serves when none has been trained yet.
            let model = match regimes.iter().find_map(|&v| ctx.layout.resolve_model(v).ok()) {
                Some((m, _, _)) => m,
                None => {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
                    BiLstmModel::init_uniform(ctx.cfg.train.hidden_size, &mut rng)
                }
            };
            let report = analysis::rate_equation_benchmark(n, &regimes, &link, &model)?;
            ctx.write(&ctx.layout.report("benchmark.tsv"), report.to_tsv().as_bytes())?;
            print!("{}", report.to_table());
            println!(
                "benchmark {} regimes  {} symbols each  wall {:.3} s",
                regimes.len(),
                n,
                ctx.started.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

fn provenance_from_file(p: &std::path::Path) -> Option<Provenance> {
    let stem = p.file_stem()?.to_str()?;
    Provenance::from_name(stem.split('_').next()?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vemu: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

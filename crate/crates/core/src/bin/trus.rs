// SPDX-License-Identifier: MIT OR Apache-2.0

//! `trus` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or other failure, 2 shape mismatch or
//! duplicate speaker among inputs, 3 too few tapes, 4 speaker id already
//! registered with a different tape, 5 missing prototype or registry,
//! 6 evaluation configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use trus::eval::{self, EvalConfig, EvalReport};
use trus::pipeline::{serve, ServeOptions};
use trus::prototype::{build_prototype, load_prototype, save_prototype, DEFAULT_POOL_SIZE};
use trus::registry::{Registration, RegistryStore, DEFAULT_MATCH_THRESHOLD};
use trus::selection::{compute_profile, Band, DEFAULT_K};
use trus::steering::DEFAULT_ALPHA;
use trus::tape::ActivationTape;
use trus::toy::{self, ToyConfig, ToyModel, ToySpeaker};
use trus::TrusError;

const EXIT_FAILURE: u8 = 1;
const EXIT_SHAPE: u8 = 2;
const EXIT_TOO_FEW: u8 = 3;
const EXIT_DUPLICATE_ID: u8 = 4;
const EXIT_MISSING: u8 = 5;
const EXIT_EVAL_CONFIG: u8 = 6;

#[derive(Debug, Parser)]
#[command(
    name = "trus",
    version,
    about = "Inference-time speaker unlearning by identity steering"
)]
struct Cli {
    /// JSON file with default values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Average retain-speaker tapes into an identity prototype.
    BuildPrototype {
        #[arg(long)]
        tape_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pool size; the first N tapes by file name are used.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Register an opt-out speaker from one reference tape.
    Register {
        #[arg(long)]
        speaker_id: String,
        #[arg(long)]
        tape: PathBuf,
        #[arg(long)]
        prototype: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        k: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Remove an opt-out speaker.
    Unregister {
        #[arg(long)]
        speaker_id: String,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Synthesize with the toy model, steering if the reference is registered.
    Synth {
        /// Toy speaker whose voice is derived from this id.
        #[arg(long, conflicts_with = "tape", required_unless_present = "tape")]
        speaker_id: Option<String>,
        /// Reference tape; its header names the speaker.
        #[arg(long)]
        tape: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        text_seed: u64,
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_steer: bool,
        /// Overrides the stored strength.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        match_threshold: Option<f64>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write the per-cell similarity profile of a tape as CSV.
    Analyze {
        #[arg(long)]
        tape: PathBuf,
        #[arg(long)]
        prototype: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        k: Option<f64>,
    },
    /// Run an evaluation suite and write CSV plus seed manifest.
    Ablate {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, allow_hyphen_values = true)]
        k: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Prototype pool size (suppression and threshold suites).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        optout: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Print a tape header.
    TapeInfo { path: PathBuf },
    /// Write calibration tapes for toy speakers named `<prefix>-0000`, ...
    ToyTapes {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "retain")]
        prefix: String,
        /// Store frame-pooled tapes.
        #[arg(long)]
        pooled: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Suite {
    Suppression,
    Threshold,
    Pool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    content_seed: Option<u64>,
}

/// Optional defaults read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    k: Option<f64>,
    alpha: Option<f64>,
    n: Option<usize>,
    seed: Option<u64>,
    layers: Option<usize>,
    steps: Option<usize>,
    channels: Option<usize>,
    frames: Option<usize>,
    content_seed: Option<u64>,
    match_threshold: Option<f64>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<TrusError>() {
            Some(TrusError::ShapeMismatch(_) | TrusError::DuplicateSpeaker(_)) => EXIT_SHAPE,
            Some(TrusError::Config(_)) => EXIT_EVAL_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_FAILURE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(p) => {
            serde_json::from_slice::<FileConfig>(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    match cli.command {
        Command::BuildPrototype { tape_dir, out, n } => {
            build_prototype_cmd(&tape_dir, &out, n.or(file.n).unwrap_or(DEFAULT_POOL_SIZE))
        }
        Command::Register {
            speaker_id,
            tape,
            prototype,
            registry,
            k,
            alpha,
        } => register_cmd(
            &speaker_id,
            &tape,
            &prototype,
            &registry,
            k.or(file.k).unwrap_or(DEFAULT_K),
            alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA),
        ),
        Command::Unregister { speaker_id, registry } => unregister_cmd(&speaker_id, &registry),
        Command::Synth {
            speaker_id,
            tape,
            text_seed,
            registry,
            out,
            no_steer,
            alpha,
            match_threshold,
            model,
        } => {
            let threshold = match_threshold
                .or(file.match_threshold)
                .unwrap_or(DEFAULT_MATCH_THRESHOLD);
            let opts = ServeOptions {
                no_steer,
                alpha: alpha.or(file.alpha),
            };
            synth_cmd(
                speaker_id.as_deref(),
                tape.as_deref(),
                text_seed,
                &registry,
                &out,
                opts,
                threshold,
                &toy_config(&model, &file),
            )
        }
        Command::Analyze {
            tape,
            prototype,
            out,
            k,
        } => analyze_cmd(&tape, &prototype, &out, k.or(file.k).unwrap_or(DEFAULT_K)),
        Command::Ablate {
            suite,
            out_dir,
            seed,
            k,
            alpha,
            n,
            optout,
            model,
        } => {
            let base = EvalConfig::default();
            let tc = toy_config(&model, &file);
            let optout = optout.unwrap_or(base.n_optout_seen);
            let cfg = EvalConfig {
                layers: tc.layers,
                steps: tc.steps,
                channels: tc.channels,
                frames: tc.frames,
                content_seed: tc.content_seed,
                n_retain: n.or(file.n).unwrap_or(base.n_retain),
                n_optout_seen: optout,
                n_optout_unseen: optout,
                k: k.or(file.k).unwrap_or(base.k),
                alpha: alpha.or(file.alpha).unwrap_or(base.alpha),
                match_threshold: file.match_threshold.unwrap_or(base.match_threshold),
                seed: seed.or(file.seed).unwrap_or(base.seed),
                ..base
            };
            ablate_cmd(suite, &out_dir, &cfg)
        }
        Command::TapeInfo { path } => tape_info_cmd(&path),
        Command::ToyTapes {
            out_dir,
            count,
            prefix,
            pooled,
            model,
        } => toy_tapes_cmd(&out_dir, count, &prefix, pooled, &toy_config(&model, &file)),
    }
}

fn toy_config(m: &ModelArgs, file: &FileConfig) -> ToyConfig {
    ToyConfig::new(
        m.layers.or(file.layers).unwrap_or(toy::DEFAULT_LAYERS),
        m.steps.or(file.steps).unwrap_or(toy::DEFAULT_STEPS),
        m.channels.or(file.channels).unwrap_or(toy::DEFAULT_CHANNELS),
        m.frames.or(file.frames).unwrap_or(toy::DEFAULT_FRAMES),
        m.content_seed
            .or(file.content_seed)
            .unwrap_or(toy::DEFAULT_CONTENT_SEED),
    )
}

fn read_tape(path: &Path) -> CliResult<ActivationTape> {
    ActivationTape::read_from_path(path)
        .with_context(|| format!("reading tape {}", path.display()))
        .map_err(Failure::from)
}

fn require_exists(path: &Path, what: &str) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(fail(EXIT_MISSING, anyhow!("{what} {} not found", path.display())))
    }
}

fn open_registry(dir: &Path) -> CliResult<RegistryStore> {
    match RegistryStore::open(dir) {
        Err(TrusError::MissingMetadata(p)) => {
            Err(fail(EXIT_MISSING, anyhow!("registry index {} not found", p.display())))
        }
        other => Ok(other?),
    }
}

fn load_proto(path: &Path) -> CliResult<trus::IdPrototype> {
    require_exists(path, "prototype")?;
    match load_prototype(path) {
        Err(e @ TrusError::MissingMetadata(_)) => Err(fail(EXIT_MISSING, e.into())),
        other => Ok(other.with_context(|| format!("loading prototype {}", path.display()))?),
    }
}

fn build_prototype_cmd(tape_dir: &Path, out: &Path, n: usize) -> CliResult {
    if n == 0 {
        return Err(fail(EXIT_FAILURE, anyhow!("--n must be at least 1")));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(tape_dir)
        .with_context(|| format!("listing {}", tape_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tape"))
        .collect();
    paths.sort();
    if paths.len() < n {
        return Err(fail(
            EXIT_TOO_FEW,
            anyhow!("need {n} tapes, found {} in {}", paths.len(), tape_dir.display()),
        ));
    }
    let tapes = paths[..n].iter().map(|p| read_tape(p)).collect::<CliResult<Vec<_>>>()?;
    let proto = build_prototype(&tapes)?;
    save_prototype(&proto, out)?;
    println!("n={}", proto.pool_size());
    println!("source_ids={}", proto.source_ids().join(","));
    Ok(())
}

fn register_cmd(speaker_id: &str, tape: &Path, prototype: &Path, registry: &Path, k: f64, alpha: f64) -> CliResult {
    let proto = load_proto(prototype)?;
    let tape = read_tape(tape)?;
    let mut store = RegistryStore::open_or_create(registry)?;
    let outcome = match store.register_optout(speaker_id, &tape, &proto, k, alpha) {
        Err(TrusError::DuplicateSpeaker(id)) => {
            return Err(fail(
                EXIT_DUPLICATE_ID,
                anyhow!("speaker '{id}' is already registered with a different tape"),
            ))
        }
        other => other?,
    };
    let (status, record) = match &outcome {
        Registration::Created(r) => ("created", r),
        Registration::Existing(r) => ("unchanged", r),
    };
    println!("status={status}");
    println!("speaker_id={}", record.speaker_id);
    println!("layers_selected={}", record.mask.selected_layers().len());
    println!("cells={}", record.mask.len());
    println!("tau={}", record.profile.tau);
    println!("registry_version={}", store.version());
    Ok(())
}

fn unregister_cmd(speaker_id: &str, registry: &Path) -> CliResult {
    let mut store = open_registry(registry)?;
    let removed = store.remove_optout(speaker_id)?;
    println!("removed={removed}");
    println!("registry_version={}", store.version());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth_cmd(
    speaker_id: Option<&str>,
    tape: Option<&Path>,
    text_seed: u64,
    registry: &Path,
    out: &Path,
    opts: ServeOptions,
    match_threshold: f64,
    config: &ToyConfig,
) -> CliResult {
    let store = open_registry(registry)?.with_match_threshold(match_threshold);
    let model = ToyModel::new(config.clone())?;
    let (speaker, reference) = match (speaker_id, tape) {
        (_, Some(path)) => {
            let reference = read_tape(path)?;
            (ToySpeaker::from_id(reference.speaker_id(), config.channels), reference)
        }
        (Some(id), None) => {
            let speaker = ToySpeaker::from_id(id, config.channels);
            let reference = model.reference_tape(&speaker)?;
            (speaker, reference)
        }
        (None, None) => return Err(fail(EXIT_FAILURE, anyhow!("give --speaker-id or --tape"))),
    };
    let served = serve(&model, store.pool(), &speaker, &reference, text_seed, opts)?;
    served.output.tape.write_to_path(out)?;
    println!(
        "speaker_id={} matched={} identity_similarity={} cells_steered={}",
        speaker.speaker_id,
        served.matched.as_deref().unwrap_or("-"),
        toy::identity_similarity(&served.output, &speaker)?,
        served.output.steered_cells_applied.len()
    );
    Ok(())
}

fn analyze_cmd(tape: &Path, prototype: &Path, out: &Path, k: f64) -> CliResult {
    let proto = load_proto(prototype)?;
    let tape = read_tape(tape)?;
    let profile = compute_profile(&tape, &proto, k)?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    profile.write_csv(std::io::BufWriter::new(file))?;
    println!("mu={} sigma={} tau={}", profile.mu(), profile.sigma(), profile.tau());
    Ok(())
}

fn ablate_cmd(suite: Suite, out_dir: &Path, cfg: &EvalConfig) -> CliResult {
    let report: EvalReport = match suite {
        Suite::Suppression => eval::run_suppression_suite(cfg),
        Suite::Threshold => eval::run_threshold_ablation(cfg, &Band::ALL),
        Suite::Pool => eval::run_pool_ablation(cfg),
    }?;
    fs::create_dir_all(out_dir)?;
    let name = report.manifest.suite.label();
    let csv_path = out_dir.join(format!("{name}.csv"));
    report.write_csv(std::io::BufWriter::new(fs::File::create(&csv_path)?))?;
    report.write_manifest(std::io::BufWriter::new(fs::File::create(
        out_dir.join(format!("{name}.manifest.json")),
    )?))?;
    for block in &report.blocks {
        let o = block.optout_summary();
        let r = block.summary(eval::RETAIN);
        print!(
            "k={} N={} alpha={} optout_similarity={} optout_baseline={} content_error={} cells_steered={} retain_bit_identical={}/{}",
            block.k,
            block.n,
            block.alpha,
            o.mean_identity_similarity,
            o.mean_baseline_similarity,
            o.mean_content_error,
            o.mean_cells_steered,
            r.bit_identical,
            r.speakers
        );
        match block.prototype_variance {
            Some(v) => println!(" prototype_variance={v}"),
            None => println!(),
        }
    }
    println!("csv={}", csv_path.display());
    Ok(())
}

fn tape_info_cmd(path: &Path) -> CliResult {
    let tape = read_tape(path)?;
    let h = tape.header();
    println!("speaker_id={}", h.speaker_id);
    println!("version={}", h.version);
    println!("layers={}", h.num_layers);
    println!("steps={}", h.num_steps);
    println!("channels={}", h.channels);
    println!("frames={}", h.frames);
    println!("pooled={}", h.pooled);
    println!("bytes={}", h.tape_bytes());
    Ok(())
}

fn toy_tapes_cmd(out_dir: &Path, count: usize, prefix: &str, pooled: bool, config: &ToyConfig) -> CliResult {
    let model = ToyModel::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    for i in 0..count {
        let id = format!("{prefix}-{i:04}");
        let mut tape = model.reference_tape(&ToySpeaker::from_id(&id, config.channels))?;
        if pooled {
            tape = tape.to_pooled()?;
        }
        tape.write_to_path(&out_dir.join(format!("{id}.tape")))?;
    }
    println!("wrote={count} dir={}", out_dir.display());
    Ok(())
}

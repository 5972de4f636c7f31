use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use echolocate::acoustics::{enumerate_image_sources, render_rir, write_wav_pcm16};
use echolocate::env::{AgentPose, SourceSpec};
use echolocate::eval::{evaluate, policy_field, SoftSign};
use echolocate::geometry::Vec3;
use echolocate::manifest::{parse_manifest, RunManifest};
use echolocate::qnet::{init_params, NetArchitecture, ParamStore};
use echolocate::replay::ReplayBuffer;
use echolocate::simulator::NetPolicy;
use echolocate::trainer::{Checkpoint, Trainer};
use log::{info, warn};

#[derive(Parser)]
#[command(
    name = "echolocate",
    version,
    about = "Train and evaluate an audio-only agent that finds sound sources"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run manifest (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Seed for training and evaluation; overrides the manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the manifest and ECHOLOCATE_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for rollouts and evaluation trials.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a Q-network, checkpointing every epoch, then evaluate it.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip the final evaluation.
        #[arg(long)]
        no_eval: bool,
    },
    /// Evaluate a checkpoint (or a freshly initialised network).
    Eval {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Use the shaping term with the opposite sign.
        #[arg(long)]
        printed_soft_sign: bool,
    },
    /// Render a room impulse response to a 16-bit WAV file.
    RenderRir {
        /// Source position `x,y,z` in metres.
        #[arg(long, value_parser = parse_vec3)]
        source: Vec3,
        /// Microphone position `x,y,z` in metres.
        #[arg(long, value_parser = parse_vec3)]
        mic: Vec3,
    },
    /// Export the greedy action field and one trajectory.
    RenderField {
        #[command(flatten)]
        policy: PolicyArgs,
        /// Source position `x,y` (height from the manifest).
        #[arg(long, value_parser = parse_vec2)]
        source: (f64, f64),
        /// Trajectory start `x,y`.
        #[arg(long, value_parser = parse_vec2)]
        start: (f64, f64),
        #[arg(long, default_value_t = 0.5)]
        grid_step: f64,
        #[arg(long, default_value_t = 50)]
        max_steps: usize,
        /// Also write the log-mel features heard at the start as CSV.
        #[arg(long)]
        dump_features: bool,
    },
    /// Summarise the replay buffer stored in a checkpoint.
    ReplayInspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct PolicyArgs {
    /// Checkpoint to load; without it a network is initialised from the seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_floats(s: &str, n: usize) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} comma-separated numbers, got {}", v.len()));
    }
    Ok(v)
}

fn parse_vec3(s: &str) -> Result<Vec3, String> {
    let v = parse_floats(s, 3)?;
    Ok(Vec3::new(v[0], v[1], v[2]))
}

fn parse_vec2(s: &str) -> Result<(f64, f64), String> {
    let v = parse_floats(s, 2)?;
    Ok((v[0], v[1]))
}

fn load_manifest(common: &Common) -> Result<RunManifest> {
    let mut m = match &common.manifest {
        Some(p) => parse_manifest(p)?,
        None => RunManifest::default(),
    };
    if let Some(seed) = common.seed {
        m.train.seed = seed;
        m.eval.seed = seed;
    }
    Ok(m)
}

fn run_dir(common: &Common, m: &RunManifest) -> PathBuf {
    match &common.out {
        Some(out) => out.clone(),
        None => m.run_dir(),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn policy_params(args: &PolicyArgs, m: &RunManifest) -> Result<(NetArchitecture, ParamStore<f32>)> {
    match &args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            Ok((ckpt.meta.arch, ckpt.online))
        }
        None => {
            info!(
                "no checkpoint given: using a network initialised from seed {}",
                m.train.seed
            );
            Ok((m.arch.clone(), init_params(&m.arch, m.train.seed)?))
        }
    }
}

fn train(common: &Common, resume: Option<&Path>, epochs: Option<usize>, no_eval: bool) -> Result<()> {
    let mut m = load_manifest(common)?;
    if let Some(e) = epochs {
        m.train.epochs = e;
    }
    let dir = run_dir(common, &m);
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::write(dir.join("manifest.toml"), m.to_toml()?)?;

    let sim = m.simulator()?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            info!("resuming from epoch {}", ckpt.meta.epoch);
            Trainer::resume(sim, m.arch.clone(), m.train.clone(), &ckpt)?
        }
        None => Trainer::new(sim, m.arch.clone(), m.train.clone())?,
    }
    .with_threads(common.threads)?;
    info!(
        "run {} (config {}) -> {}",
        m.run_id,
        trainer.config_hash(),
        dir.display()
    );

    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(
        File::options()
            .create(true)
            .append(resume.is_some())
            .write(true)
            .truncate(resume.is_none())
            .open(&log_path)?,
    );
    trainer.train_with(|t, rec| {
        t.checkpoint()
            .save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", rec.epoch)))?;
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        log.flush()?;
        info!(
            "epoch {:>3}  eps {:.3}  reward {:+.3}  success {:.3}  loss {:.5}  {:.1}s",
            rec.epoch, rec.epsilon, rec.mean_episode_reward, rec.success_fraction, rec.mean_loss, rec.wall_time_s
        );
        Ok(())
    })?;
    let final_ckpt = trainer.checkpoint();
    final_ckpt.save(&dir.join("final.ckpt"))?;
    println!("checkpoint {}", final_ckpt.hash_hex()?);

    if !no_eval {
        let policy = NetPolicy {
            arch: trainer.arch(),
            params: &trainer.state().online,
        };
        let report = evaluate(trainer.simulator(), &policy, &m.eval, common.threads)?;
        write_json(&dir.join("metrics.json"), &report)?;
        print!("{}", report.summary());
    }
    Ok(())
}

fn eval(
    common: &Common,
    policy: &PolicyArgs,
    trials: Option<usize>,
    max_steps: Option<usize>,
    printed: bool,
) -> Result<()> {
    let mut m = load_manifest(common)?;
    if let Some(n) = trials {
        m.eval.n_trials = n;
    }
    if let Some(s) = max_steps {
        m.eval.max_steps = s;
    }
    if printed {
        m.eval.soft_sign = SoftSign::Printed;
    }
    let (arch, params) = policy_params(policy, &m)?;
    let sim = m.simulator()?;
    let report = evaluate(
        &sim,
        &NetPolicy {
            arch: &arch,
            params: &params,
        },
        &m.eval,
        common.threads,
    )?;
    let dir = run_dir(common, &m);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("metrics.json"), &report)?;
    print!("{}", report.summary());
    Ok(())
}

fn render_rir_cmd(common: &Common, source: Vec3, mic: Vec3) -> Result<()> {
    let m = load_manifest(common)?;
    let images = enumerate_image_sources(&m.env.room, source, m.acoustics.max_order)?;
    let rir = render_rir(&images, mic, &m.acoustics)?;
    let mut taps = rir.causal().to_vec();
    let peak = taps.iter().fold(0.0f64, |a, t| a.max(t.abs()));
    if peak > 1.0 {
        warn!("impulse response peaks at {peak:.3}; normalising to 1");
        taps.iter_mut().for_each(|t| *t /= peak);
    }
    let dir = run_dir(common, &m);
    fs::create_dir_all(&dir)?;
    let path = dir.join("rir.wav");
    write_wav_pcm16(&path, &taps, m.acoustics.f_s.round() as u32)?;
    println!(
        "{} ({} images, {} samples, direct path {:.2} ms)",
        path.display(),
        images.len(),
        taps.len(),
        source.distance(mic) / m.acoustics.c * 1e3
    );
    Ok(())
}

fn render_field_cmd(
    common: &Common,
    policy: &PolicyArgs,
    source: (f64, f64),
    start: (f64, f64),
    grid_step: f64,
    max_steps: usize,
    dump_features: bool,
) -> Result<()> {
    let m = load_manifest(common)?;
    let (arch, params) = policy_params(policy, &m)?;
    let sim = m.simulator()?;
    let source = Vec3::new(source.0, source.1, m.env.source_height);
    let start = Vec3::new(start.0, start.1, m.env.agent_height);
    let field = policy_field(
        &sim,
        &NetPolicy {
            arch: &arch,
            params: &params,
        },
        grid_step,
        source,
        start,
        max_steps,
    )?;
    let dir = run_dir(common, &m);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("field.csv"), field.to_csv())?;
    write_json(&dir.join("trajectory.json"), &field.trajectory)?;
    if dump_features {
        let spec = SourceSpec {
            id: 0,
            position: source,
            signal_id: 0,
        };
        let fm = sim.observe_at(&AgentPose { centre: start }, &[&spec])?;
        fs::write(dir.join("features.csv"), fm.to_csv())?;
    }
    println!(
        "{} cells ({}x{}), trajectory of {} steps, reached: {}",
        field.cells.len(),
        field.nx,
        field.ny,
        field.trajectory.actions.len(),
        field.trajectory.reached
    );
    Ok(())
}

fn replay_inspect(common: &Common, path: &Path) -> Result<()> {
    let m = load_manifest(common)?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let sim = m.simulator()?;
    let h = ckpt.meta.arch.window_len();
    let mut buffer = ReplayBuffer::new(ckpt.replay.capacity)?;
    for (id, recipe) in &ckpt.replay.episodes {
        buffer.push_episode(sim.replay_recipe(*id, recipe, h).with_context(|| {
            "episode does not replay under this manifest; pass the manifest the run was trained with"
        })?)?;
    }
    println!("{}", serde_json::to_string_pretty(&buffer.stats())?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.common.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let c = &cli.common;
    match cli.command {
        Command::Train {
            resume,
            epochs,
            no_eval,
        } => train(c, resume.as_deref(), epochs, no_eval),
        Command::Eval {
            policy,
            trials,
            max_steps,
            printed_soft_sign,
        } => eval(c, &policy, trials, max_steps, printed_soft_sign),
        Command::RenderRir { source, mic } => render_rir_cmd(c, source, mic),
        Command::RenderField {
            policy,
            source,
            start,
            grid_step,
            max_steps,
            dump_features,
        } => render_field_cmd(c, &policy, source, start, grid_step, max_steps, dump_features),
        Command::ReplayInspect { checkpoint } => replay_inspect(c, &checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

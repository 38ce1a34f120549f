use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use mixprune::document;
use mixprune::executor::{execute, plan_schedule};
use mixprune::graph::{build_mixing_console, ProcessorKind, PruneMask};
use mixprune::params::ParamStore;
use mixprune::pruning::{importance_scan, search_with, PruneConfig, SamplerKind, SearchEvent};
use mixprune::training::{evaluate, train, SongSession, TrainConfig, TrainRun};
use mixprune::workbench::manifest::{load_session, SessionManifest, TrackEntry};
use mixprune::workbench::report::{Artifacts, RunReport, Timings};
use mixprune::workbench::synth::{synth_generate, ActiveSlot, ChainRef, SynthSpec};
use mixprune::workbench::wav::write_wav_f32;
use mixprune::workbench::{atomic_write, dot, importance_csv, to_jsonl};

#[derive(Parser)]
#[command(name = "mixprune", version, about = "Fit and prune differentiable mixing consoles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SessionArgs {
    /// Session manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Resample the session to this rate instead of the manifest's.
    #[arg(long)]
    sample_rate: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a full mixing console on a session.
    Fit {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long, default_value_t = 12_000)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a console, then search for a pruned graph.
    Prune {
        #[command(flatten)]
        session: SessionArgs,
        /// Allowed loss increase over the best loss so far; "inf" prunes everything.
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
        /// brute_force, dry_wet or hybrid.
        #[arg(long, default_value = "hybrid")]
        sampler: String,
        #[arg(long, default_value_t = 12)]
        rounds: usize,
        #[arg(long, default_value_t = 6_000)]
        steps_console: usize,
        #[arg(long, default_value_t = 500)]
        steps_finetune: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a graph document over a session's tracks to a float WAV.
    Render {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss increase from removing each processor, as CSV.
    Scan {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic session and its ground-truth graph.
    Synth {
        #[arg(long, default_value_t = 4)]
        tracks: usize,
        #[arg(long, default_value_t = 30.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30_000)]
        sample_rate: u32,
        /// Active processor: a type letter for every track ("g"), or
        /// letter:track ("e:0") or letter:busN ("r:bus0"). Repeatable.
        #[arg(long = "active")]
        active: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a graph document as Graphviz DOT.
    ExportDot {
        #[arg(long)]
        graph: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            session,
            steps,
            lr,
            seed,
            out_dir,
        } => fit(&session, steps, lr, seed, &out_dir),
        Command::Prune {
            session,
            tolerance,
            sampler,
            rounds,
            steps_console,
            steps_finetune,
            lr,
            seed,
            out_dir,
        } => {
            let sampler = SamplerKind::parse(&sampler).ok_or_else(|| anyhow!("unknown sampler {sampler:?}"))?;
            let prune_cfg = PruneConfig {
                tolerance,
                sampler,
                rounds,
                seed,
                ..PruneConfig::default()
            };
            let mut train_cfg = train_config(lr, seed);
            train_cfg.preprune_steps = steps_console;
            train_cfg.finetune_steps = steps_finetune;
            prune(&session, &train_cfg, &prune_cfg, &out_dir)
        }
        Command::Render { graph, session, out } => {
            let s = open_session(&session)?;
            let (g, p) = read_graph(&graph)?;
            let plan = plan_schedule(&g)?;
            let mix = execute(&g, &plan, &p, &PruneMask::new(), &s.tracks)?.mix;
            write_wav_f32(&out, &mix)?;
            Ok(())
        }
        Command::Scan { graph, session, out } => {
            let s = open_session(&session)?;
            let (g, p) = read_graph(&graph)?;
            let recs = importance_scan(&g, &p, &s, &TrainConfig::default())?;
            atomic_write(&out, importance_csv(&recs).as_bytes())?;
            Ok(())
        }
        Command::Synth {
            tracks,
            seconds,
            seed,
            sample_rate,
            active,
            out_dir,
        } => {
            let mut spec = SynthSpec {
                sample_rate,
                ..SynthSpec::new(tracks, seconds, seed)
            };
            for a in &active {
                spec.active.extend(parse_active(a, tracks)?);
            }
            synth(&spec, &out_dir)
        }
        Command::ExportDot { graph, out } => {
            let (g, _) = read_graph(&graph)?;
            let text = dot::to_dot(&g);
            match out {
                Some(p) => atomic_write(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn train_config(lr: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.optimizer.learning_rate = lr;
    cfg
}

fn open_session(args: &SessionArgs) -> Result<SongSession> {
    let mut m = SessionManifest::load(&args.manifest)?;
    if let Some(sr) = args.sample_rate {
        m.sample_rate = sr;
    }
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    Ok(load_session(&m, base)?)
}

fn read_graph(path: &Path) -> Result<(mixprune::graph::Graph, ParamStore)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    document::deserialize(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_graph(path: &Path, g: &mixprune::graph::Graph, p: &ParamStore) -> Result<()> {
    let mut text = document::serialize(g, p)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn fit(args: &SessionArgs, steps: usize, lr: f64, seed: u64, out_dir: &Path) -> Result<()> {
    let started = Instant::now();
    let s = open_session(args)?;
    std::fs::create_dir_all(out_dir)?;
    let cfg = TrainConfig {
        console_steps: steps,
        ..train_config(lr, seed)
    };
    let console = build_mixing_console(s.tracks.len(), &s.subgroups)?;
    let mut params = ParamStore::init_for_graph(&console, s.sample_rate, seed);
    eprintln!("fitting {} processors for {steps} steps", console.processor_count());
    let t = Instant::now();
    let trace = train(&console, &mut params, &s, TrainRun::console(steps), &cfg)?;
    let train_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let loss = evaluate(&console, &params, &PruneMask::new(), &s, &cfg)?;
    let eval_secs = t.elapsed().as_secs_f64();
    eprintln!("console loss {:.4}", loss.audio);

    write_graph(&out_dir.join("console.json"), &console, &params)?;
    atomic_write(&out_dir.join("trace.jsonl"), to_jsonl(&trace)?.as_bytes())?;
    let artifacts = Artifacts {
        graph: "console.json".into(),
        trace: "trace.jsonl".into(),
        trials: None,
    };
    RunReport::for_fit(&cfg, &s, &console, loss, artifacts)?.write(&out_dir.join("report.json"))?;
    Timings {
        phases: vec![("train".into(), train_secs), ("evaluate".into(), eval_secs)],
        total_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out_dir.join("timings.json"))?;
    Ok(())
}

fn prune(args: &SessionArgs, train_cfg: &TrainConfig, prune_cfg: &PruneConfig, out_dir: &Path) -> Result<()> {
    let started = Instant::now();
    let s = open_session(args)?;
    std::fs::create_dir_all(out_dir)?;
    let console = build_mixing_console(s.tracks.len(), &s.subgroups)?;
    let params = ParamStore::init_for_graph(&console, s.sample_rate, train_cfg.seed);
    eprintln!("console with {} processors", console.processor_count());
    let mut on_event = |e: SearchEvent<'_>| match e {
        SearchEvent::PhaseDone { name, seconds } => eprintln!("{name}: {seconds:.1}s"),
        SearchEvent::Trial(t) => eprintln!(
            "  round {} trial {:?} L_a {:.5} (min {:.5}) {}",
            t.round,
            t.candidates.iter().map(|c| c.0).collect::<Vec<_>>(),
            t.l_a,
            t.threshold,
            if t.accepted { "accepted" } else { "rejected" }
        ),
    };
    let out = match search_with(&console, params, &s, train_cfg, prune_cfg, &mut on_event) {
        Ok(out) => out,
        Err(mixprune::pruning::PruneError::Diverged {
            phase,
            source,
            checkpoint,
        }) => {
            write_graph(&out_dir.join("checkpoint.json"), &checkpoint.0, &checkpoint.1)?;
            bail!("{phase} diverged: {source}; last good state written to checkpoint.json");
        }
        Err(e) => return Err(e.into()),
    };

    write_graph(&out_dir.join("graph.json"), &out.graph, &out.params)?;
    atomic_write(&out_dir.join("trace.jsonl"), to_jsonl(&out.trace)?.as_bytes())?;
    atomic_write(&out_dir.join("trials.jsonl"), to_jsonl(&out.trials)?.as_bytes())?;
    let artifacts = Artifacts {
        graph: "graph.json".into(),
        trace: "trace.jsonl".into(),
        trials: Some("trials.jsonl".into()),
    };
    let report = RunReport::for_search(train_cfg, prune_cfg, &s, &console, &out, artifacts)?;
    report.write(&out_dir.join("report.json"))?;
    Timings {
        phases: out.timings.clone(),
        total_seconds: started.elapsed().as_secs_f64(),
    }
    .write(&out_dir.join("timings.json"))?;
    eprintln!(
        "pruned {} of {} processors (ratio {:.3}), final loss {:.4}",
        report.metrics.console_processor_count - report.metrics.processor_count,
        report.metrics.console_processor_count,
        report.metrics.total_ratio,
        out.final_loss.audio
    );
    Ok(())
}

fn parse_active(s: &str, tracks: usize) -> Result<Vec<ActiveSlot>> {
    let (letter, target) = match s.split_once(':') {
        Some((l, t)) => (l, Some(t)),
        None => (s, None),
    };
    let mut chars = letter.chars();
    let kind = match (chars.next(), chars.next()) {
        (Some(c), None) => ProcessorKind::from_letter(c),
        _ => None,
    }
    .ok_or_else(|| anyhow!("unknown processor letter in {s:?}"))?;
    let chains: Vec<ChainRef> = match target {
        None => (0..tracks).map(ChainRef::Track).collect(),
        Some(t) => match t.strip_prefix("bus") {
            Some(b) => vec![ChainRef::Bus(b.parse().with_context(|| format!("bad bus in {s:?}"))?)],
            None => vec![ChainRef::Track(t.parse().with_context(|| format!("bad track in {s:?}"))?)],
        },
    };
    Ok(chains.into_iter().map(|chain| ActiveSlot { chain, kind }).collect())
}

fn synth(spec: &SynthSpec, out_dir: &Path) -> Result<()> {
    let out = synth_generate(spec)?;
    std::fs::create_dir_all(out_dir.join("tracks"))?;
    let mut entries = Vec::new();
    for (k, t) in out.session.tracks.iter().enumerate() {
        let rel = PathBuf::from("tracks").join(format!("track{k:02}.wav"));
        write_wav_f32(&out_dir.join(&rel), t)?;
        entries.push(TrackEntry {
            path: rel,
            name: format!("track{k:02}"),
            subgroup: out.session.subgroups.group_of(k).unwrap_or(0) as u32,
        });
    }
    write_wav_f32(&out_dir.join("mix.wav"), &out.session.mix)?;
    let manifest = SessionManifest {
        tracks: entries,
        mix: "mix.wav".into(),
        sample_rate: spec.sample_rate,
    };
    atomic_write(
        &out_dir.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )?;
    write_graph(&out_dir.join("ground_truth.json"), &out.graph, &out.params)?;
    atomic_write(
        &out_dir.join("synth_spec.json"),
        (serde_json::to_string_pretty(spec)? + "\n").as_bytes(),
    )?;
    Ok(())
}

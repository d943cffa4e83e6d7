use std::fs;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fedseg::cohort::{
    build_federated_cohort, read_cohort_file, write_cohort_file, CohortFile, SubjectRole,
};
use fedseg::experiment::{emit_report, load_config, run_experiment, ExperimentConfig, Mode};
use fedseg::models::evaluate;
use fedseg::strategies::{
    effective_spec, initial_params, Federation, InstitutionData, RunOptions, StrategyConfig,
    StrategyKind,
};
use fedseg::wire::{aggregator_serve, collaborator_run, CollaboratorOptions, ServeOptions};

#[derive(Parser)]
#[command(
    name = "fedseg",
    version,
    about = "Collaborative segmentation training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write or inspect cohort files.
    #[command(subcommand)]
    Cohort(CohortCommand),
    /// Run every cell of an experiment config and write the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// `in_process` or `distributed` (loopback).
        #[arg(long)]
        mode: Option<String>,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate report.md/report.csv from a run directory.
    Report {
        /// A directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Act as the aggregator for one collaborative strategy.
    Serve {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: String,
        /// Where to write run.csv and local_val.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Act as one institution's collaborator.
    Collaborate {
        #[command(flatten)]
        cell: CellArgs,
        #[arg(long, env = "FEDSEG_CONNECT", default_value = "127.0.0.1:7070")]
        connect: String,
        #[arg(long)]
        institution_id: usize,
        /// Shard file for this institution; generated from the config if absent.
        #[arg(long)]
        shard: Option<PathBuf>,
        /// Extra connection attempts, one second apart.
        #[arg(long, default_value_t = 30)]
        retries: u32,
    },
}

#[derive(Args)]
struct CellArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Strategy label from the config; defaults to its first collaborative strategy.
    #[arg(long)]
    strategy: Option<String>,
    /// Defaults to the config's first seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Index into the config's partitions.
    #[arg(long, default_value_t = 0)]
    partition: usize,
}

#[derive(Subcommand)]
enum CohortCommand {
    /// Generate a partition's holdout and institution shard files.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        partition: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a cohort file as PGM images and masks plus an index CSV.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> AnyResult<ExitCode> {
    match cmd {
        Command::Cohort(CohortCommand::Generate {
            config,
            partition,
            out,
        }) => cohort_generate(&load_config(&config)?, partition, &out)?,
        Command::Cohort(CohortCommand::Export { input, out }) => cohort_export(&input, &out)?,
        Command::Run {
            config,
            seed,
            mode,
            out,
        } => return run(&config, seed, mode, out),
        Command::Report { out } => {
            let report = emit_report(&out)?;
            print!("{}", report.to_markdown());
        }
        Command::Serve { cell, listen, out } => serve(&cell, &listen, out.as_deref())?,
        Command::Collaborate {
            cell,
            connect,
            institution_id,
            shard,
            retries,
        } => collaborate(&cell, &connect, institution_id, shard.as_deref(), retries)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn run(
    config: &Path,
    seed: Option<u64>,
    mode: Option<String>,
    out: Option<PathBuf>,
) -> AnyResult<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(m) = mode {
        cfg.mode = Mode::from_label(&m)
            .ok_or_else(|| format!("unknown mode {m:?}; use in_process or distributed"))?;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg, &cfg.output_dir)?;
    print!("{}", report.to_markdown());
    let failed = report.failed_cells();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see {}", cfg.output_dir.display());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn pick_strategy<'a>(
    cfg: &'a ExperimentConfig,
    label: Option<&str>,
) -> AnyResult<&'a StrategyConfig> {
    let found = match label {
        Some(l) => cfg.strategies.iter().find(|s| s.label() == l),
        None => cfg
            .strategies
            .iter()
            .find(|s| s.kind != StrategyKind::Centralized),
    };
    let s = found.ok_or("no matching collaborative strategy in config")?;
    if s.kind == StrategyKind::Centralized {
        return Err("centralized training has no collaborators".into());
    }
    Ok(s)
}

fn federation_for(cfg: &ExperimentConfig, partition: usize) -> AnyResult<Federation> {
    let scheme = *cfg
        .schemes()
        .get(partition)
        .ok_or_else(|| format!("config has no partition {partition}"))?;
    Ok(Federation::from_cohort(&build_federated_cohort(
        &cfg.cohort,
        &scheme,
    )?))
}

fn serve(cell: &CellArgs, listen: &str, out: Option<&Path>) -> AnyResult<()> {
    let cfg = load_config(&cell.config)?;
    let strategy = pick_strategy(&cfg, cell.strategy.as_deref())?;
    let seed = cell.seed.unwrap_or(cfg.seeds[0]);
    let fed = federation_for(&cfg, cell.partition)?;
    let spec = effective_spec(&cfg.model_spec(), strategy);
    let opts = ServeOptions {
        roster: fed.institutions.len(),
        timeout: Duration::from_secs(cfg.timeout_secs),
        run: RunOptions {
            seed,
            record_wall_clock: cfg.record_wall_clock,
        },
    };
    let listener = TcpListener::bind(listen)?;
    log::info!(
        "aggregating {} for {} institution(s) on {}",
        strategy.label(),
        opts.roster,
        listener.local_addr()?
    );
    let log = aggregator_serve(
        listener,
        initial_params::<f32>(&spec, seed)?,
        strategy,
        &opts,
    )?;
    let mut model = spec.build::<f32>(seed, seed)?;
    model.set_params(&log.final_params)?;
    let holdout = evaluate(&model, &fed.holdout)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("run.csv"), log.to_csv())?;
        fs::write(dir.join("local_val.csv"), log.local_val_csv())?;
    }
    println!("final holdout DC: {holdout}");
    Ok(())
}

fn collaborate(
    cell: &CellArgs,
    connect: &str,
    id: usize,
    shard: Option<&Path>,
    retries: u32,
) -> AnyResult<()> {
    let cfg = load_config(&cell.config)?;
    let strategy = pick_strategy(&cfg, cell.strategy.as_deref())?;
    let seed = cell.seed.unwrap_or(cfg.seeds[0]);
    let data = match shard {
        Some(path) => InstitutionData::from_shard(&read_cohort_file(path)?.into_shard(id)?),
        None => federation_for(&cfg, cell.partition)?
            .institutions
            .into_iter()
            .find(|i| i.id == id)
            .ok_or_else(|| format!("partition has no institution {id}"))?,
    };
    let mut opts = CollaboratorOptions::for_strategy(&cfg.model_spec(), strategy, seed);
    opts.connect_retries = retries;
    opts.retry_delay = Duration::from_secs(1);
    log::info!(
        "institution {id}: {} train / {} val slices",
        data.train.len(),
        data.val.len()
    );
    let report = collaborator_run(connect, &data, &opts)?;
    println!(
        "institution {id}: sent {} update(s), finished",
        report.updates.len()
    );
    Ok(())
}

fn cohort_generate(cfg: &ExperimentConfig, partition: usize, out: &Path) -> AnyResult<()> {
    let scheme = *cfg
        .schemes()
        .get(partition)
        .ok_or_else(|| format!("config has no partition {partition}"))?;
    let cohort = build_federated_cohort(&cfg.cohort, &scheme)?;
    fs::create_dir_all(out)?;
    write_cohort_file(
        &out.join("holdout.cohort"),
        &CohortFile::from_subjects(&cohort.holdout, SubjectRole::Holdout)?,
    )?;
    for shard in &cohort.shards {
        let path = out.join(format!("institution-{}.cohort", shard.institution_id));
        write_cohort_file(&path, &CohortFile::from_shard(shard)?)?;
        println!(
            "{} ({} train, {} val subjects)",
            path.display(),
            shard.train.len(),
            shard.val.len()
        );
    }
    Ok(())
}

fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    pixels: impl Iterator<Item = u8>,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&pixels.collect::<Vec<u8>>())?;
    f.flush()
}

fn cohort_export(input: &Path, out: &Path) -> AnyResult<()> {
    let file = read_cohort_file(input)?;
    fs::create_dir_all(out)?;
    let mut index = String::from("subject_id,role,slice,image,mask,positive_pixels\n");
    for (subject, role) in &file.subjects {
        for (k, s) in subject.slices.iter().enumerate() {
            let img = format!("s{:04}_{k:02}_image.pgm", subject.id);
            let mask = format!("s{:04}_{k:02}_mask.pgm", subject.id);
            let to_byte = |v: &f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            write_pgm(
                &out.join(&img),
                s.width,
                s.height,
                s.image.iter().map(to_byte),
            )?;
            write_pgm(
                &out.join(&mask),
                s.width,
                s.height,
                s.mask.iter().map(|&m| m * 255),
            )?;
            index.push_str(&format!(
                "{},{role:?},{k},{img},{mask},{}\n",
                subject.id,
                s.positive_pixels()
            ));
        }
    }
    fs::write(out.join("index.csv"), index)?;
    println!(
        "exported {} subject(s) to {}",
        file.subjects.len(),
        out.display()
    );
    Ok(())
}

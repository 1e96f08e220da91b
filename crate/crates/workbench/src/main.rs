use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use stratify_core::cluster::{read_assignment_csv, write_assignment_csv, ClusterAssignment};
use stratify_core::curation::parse_actions_toml;
use stratify_core::ehr::{
    ingest, read_demographics, read_events, write_demographics_csv, write_events_csv, IngestOptions, PatientId,
};
use stratify_core::metacluster::{meta_cluster, write_heatmap_csv};
use stratify_core::screening::write_scatter_csv;
use stratify_core::synthgen::{generate, SynthSpec};
use stratify_workbench::config::DataSource;
use stratify_workbench::pipeline::{self, Analysis, Planned};
use stratify_workbench::{
    api, apply_curation_and_rerun, render_report, run_pipeline, CurationRequest, ReportBundle, ReportFormat, RunConfig,
    RunOptions, RunStatus, Store,
};

#[derive(Parser)]
#[command(name = "stratify", version, about = "Patient stratification evaluation workbench")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (and the synthetic data seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted clusters.
    Synth {
        /// Synthetic cohort spec (TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Validate event and demographics files and report rejected rows.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        demographics: PathBuf,
    },
    /// Assemble the cohort described by the config.
    Cohort,
    /// Write one feature matrix per configured encoding.
    Featurize,
    /// Run the experiment grid and write one assignment file per experiment.
    Cluster,
    /// Consensus clustering over assignment files, or over the grid.
    Metacluster {
        #[arg(long, num_args = 1..)]
        assignments: Vec<PathBuf>,
    },
    /// Survival and enrichment evaluation of one assignment file.
    Evaluate {
        #[arg(long)]
        assignment: PathBuf,
    },
    /// Surrogate decision tree for one assignment file.
    Surrogate {
        #[arg(long)]
        assignment: PathBuf,
    },
    /// Outcome screening over the whole grid.
    Screen,
    /// Full pipeline into a report store.
    Run {
        /// Store root; defaults to --out.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Apply curation actions to a stored run and re-run as a child.
    Curate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        run: String,
        /// TOML file of [[action]] tables.
        #[arg(long)]
        actions: PathBuf,
    },
    /// Render a stored run as json, html or text.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        run: String,
        #[arg(long, default_value = "html")]
        format: String,
    },
    /// Serve the store over HTTP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| path.display().to_string())?,
    ))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(create(dir, name)?, value)?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn analysis(cfg: &RunConfig) -> anyhow::Result<Analysis> {
    let inputs = pipeline::load_inputs(cfg)?;
    Ok(pipeline::prepare(cfg, &inputs)?)
}

fn cohort_ids(a: &Analysis) -> Vec<PatientId> {
    a.cohort.members.iter().map(|m| m.patient_id.clone()).collect()
}

fn read_assignment(path: &Path, cohort: Option<&[PatientId]>) -> anyhow::Result<ClusterAssignment> {
    let f = File::open(path).with_context(|| path.display().to_string())?;
    Ok(read_assignment_csv(f, cohort, true)?)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let out = cli.out.clone();
    match &cli.command {
        Command::Synth { spec } => {
            let mut s = match spec {
                Some(p) => SynthSpec::from_toml(&fs::read_to_string(p)?)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let g = generate(&s)?;
            write_events_csv(&g.events, create(&out, "events.csv")?)?;
            write_demographics_csv(&g.demographics, create(&out, "demographics.csv")?)?;
            fs::write(out.join("cohort.toml"), toml::to_string(&g.cohort_spec)?)?;
            fs::write(out.join("outcomes.toml"), toml::to_string(&g.outcomes)?)?;
            write_assignment_csv(&g.truth.assignment, create(&out, "truth.csv")?)?;
            let cfg = RunConfig {
                seed: s.seed,
                data: DataSource::Files {
                    events: "events.csv".into(),
                    demographics: "demographics.csv".into(),
                    cohort: "cohort.toml".into(),
                    outcomes: Some("outcomes.toml".into()),
                },
                ..RunConfig::default()
            };
            fs::write(out.join("run.toml"), cfg.to_toml()?)?;
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} patients, {} events written to {}",
                g.demographics.len(),
                g.events.len(),
                out.display()
            );
        }
        Command::Ingest { events, demographics } => {
            let (rows, mut rejected) = read_events(events)?;
            let (demo, rejected_demo) = read_demographics(demographics)?;
            let (store, mut report) = ingest(rows, demo, &IngestOptions::default());
            rejected.extend(rejected_demo);
            rejected.append(&mut report.rejections);
            report.rejections = rejected;
            println!(
                "{} patients, {} events accepted, {} rows rejected",
                store.len(),
                report.accepted_events,
                report.rejections.len()
            );
            write_json(&out, "ingest_report.json", &report)?;
        }
        Command::Cohort => {
            let cfg = load_config(&cli)?;
            let inputs = pipeline::load_inputs(&cfg)?;
            println!("{} cohort members", inputs.cohort.members.len());
            write_json(&out, "cohort.json", &inputs.cohort)?;
        }
        Command::Featurize => {
            let cfg = load_config(&cli)?;
            let a = analysis(&cfg)?;
            for (enc, m) in &a.matrices {
                let name = format!("features_{}.csv", enc.as_str());
                m.write_csv(create(&out, &name)?)?;
                println!("{name}: {} patients x {} features", m.nrows(), m.ncols());
            }
            write_json(&out, "cohort_summary.json", &a.artifact)?;
        }
        Command::Cluster => {
            let cfg = load_config(&cli)?;
            let a = analysis(&cfg)?;
            let dir = out.join("assignments");
            for p in pipeline::cluster_grid(&cfg, &a) {
                let id = &p.entry.experiment_id;
                match &p.assignment {
                    Some(asg) => {
                        write_assignment_csv(asg, create(&dir, &format!("{id}.csv"))?)?;
                        println!("{id}: {} {} k={}", p.entry.algorithm, p.entry.encoding, asg.k);
                    }
                    None => eprintln!("{id} failed: {}", p.entry.errors.join("; ")),
                }
                if let Some(k) = &p.k_selection {
                    write_json(&dir, &format!("{id}_k_selection.json"), k)?;
                }
            }
        }
        Command::Metacluster { assignments } => {
            let cfg = load_config(&cli)?;
            let experiments: Vec<ClusterAssignment> = if assignments.is_empty() {
                let a = analysis(&cfg)?;
                pipeline::cluster_grid(&cfg, &a)
                    .into_iter()
                    .filter_map(|p| p.assignment)
                    .collect()
            } else {
                assignments
                    .iter()
                    .map(|p| read_assignment(p, None))
                    .collect::<anyhow::Result<_>>()?
            };
            let meta = meta_cluster(&experiments, &cfg.meta.options)?;
            println!("selected k = {:?}", meta.selected_k);
            write_json(&out, "meta.json", &meta)?;
            for m in &meta.assignments {
                write_heatmap_csv(
                    create(&out, &format!("heatmap_k{}.csv", m.k))?,
                    &experiments,
                    &meta,
                    m.k,
                )?;
                write_assignment_csv(&m.assignment, create(&out, &format!("meta_k{}.csv", m.k))?)?;
            }
        }
        Command::Evaluate { assignment } | Command::Surrogate { assignment } => {
            let cfg = load_config(&cli)?;
            let a = analysis(&cfg)?;
            let asg = read_assignment(assignment, Some(&cohort_ids(&a)))?;
            let p = Planned::imported(&cfg, asg.clone());
            let ev = pipeline::evaluate(&cfg, &a, &p.entry, &asg);
            if matches!(cli.command, Command::Surrogate { .. }) {
                let Some(s) = &ev.surrogate else {
                    bail!("surrogate failed: {}", ev.errors.join("; "))
                };
                println!("balanced accuracy {:.3}\n{}", s.cv.mean_balanced_accuracy, s.text);
                write_json(&out, "surrogate.json", s)?;
                fs::write(out.join("tree.dot"), &s.dot)?;
                let rules: Vec<&str> = s.rules.iter().map(|r| r.text.as_str()).collect();
                fs::write(out.join("rules.txt"), rules.join("\n") + "\n")?;
            } else {
                write_json(&out, "km.json", &ev.km)?;
                write_json(&out, "cox.json", &ev.cox)?;
                if let Some(e) = &ev.enrichment {
                    write_json(&out, "enrichment.json", e)?;
                    e.write_table_csv(create(&out, "enrichment.csv")?)?;
                }
            }
            for e in &ev.errors {
                eprintln!("error: {e}");
            }
        }
        Command::Screen => {
            let cfg = load_config(&cli)?;
            let r = pipeline::compute(&cfg, None)?;
            let Some(m) = &r.screening else {
                bail!("screening failed: {}", r.warnings.join("; "))
            };
            write_json(&out, "screening.json", m)?;
            if let Some(t) = &r.scatter {
                write_scatter_csv(create(&out, "scatter.csv")?, t)?;
            }
            let outcome = cfg
                .screening
                .primary_outcome
                .clone()
                .unwrap_or_else(|| m.outcomes[0].clone());
            for s in m.ranked(&outcome, cfg.screening.variant)?.iter().take(10) {
                println!("{}/{}  {outcome}  R = {:.3}", s.experiment_id, s.cluster, s.r_average);
            }
        }
        Command::Run { store, run_id } => {
            let cfg = load_config(&cli)?;
            let store = Store::open(store.clone().unwrap_or(out))?;
            let opts = RunOptions {
                run_id: run_id.clone(),
                ..RunOptions::default()
            };
            let m = run_pipeline(&cfg, &store, &opts)?;
            println!("run {} {:?}", m.run_id, m.status);
            if m.status == RunStatus::Failed {
                bail!("run failed: {}", m.error.unwrap_or_default());
            }
        }
        Command::Curate { store, run, actions } => {
            let store = Store::open(store)?;
            let req = CurationRequest {
                actions: parse_actions_toml(&fs::read_to_string(actions)?)?,
                rules_hash: None,
            };
            let m = apply_curation_and_rerun(&store, run, &req)?;
            println!(
                "run {} {:?} (parent {run}, {})",
                m.run_id,
                m.status,
                m.scope.map_or("", |s| s.as_str())
            );
        }
        Command::Report { store, run, format } => {
            let store = Store::open(store)?;
            let bundle = ReportBundle::load(&store, run)?;
            let path = render_report(&bundle, format.parse::<ReportFormat>()?, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Serve { store, bind } => {
            let store = Store::open(store)?;
            let rt = tokio::runtime::Runtime::new()?;
            println!("serving {} on http://{bind}", store.root().display());
            rt.block_on(api::serve(store, *bind))?;
        }
    }
    Ok(())
}

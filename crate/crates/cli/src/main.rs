use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use connectome_ib::connectome::{fisher_z, pearson_fc};
use connectome_ib::io::{self, Manifest, ModelBundle};
use connectome_ib::training::{
    cross_validate, evaluate, explain_attention, explain_biomarkers, generate_synthetic_cohort, RunConfig,
    SyntheticCohortSpec,
};
use connectome_ib::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cib", version, about = "Connectome information-bottleneck classifier")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed (and the generator seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overwrite existing output.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic cohort with planted biomarker ROIs.
    Generate(GenerateArgs),
    /// Write one Fisher-z connectivity CSV per subject.
    Connectome {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate and write a results bundle.
    Train {
        /// Defaults to paths.manifest from the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to paths.output from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Score a saved model on its test subjects (or all with --all).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        all: bool,
    },
    /// Rank ROIs and attribute meta-paths for a saved model; also exports
    /// the population adjacencies.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        top: usize,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 120)]
    subjects: usize,
    #[arg(long, default_value_t = 90)]
    rois: usize,
    #[arg(long, default_value_t = 10)]
    planted: usize,
    #[arg(long, default_value_t = 1.5)]
    effect_size: f64,
    #[arg(long, default_value_t = 120)]
    timepoints: usize,
    #[arg(long, default_value_t = 4)]
    sites: u32,
    #[arg(long, default_value_t = 0.0)]
    sex_coupling: f64,
    #[arg(long, default_value_t = 0.0)]
    site_coupling: f64,
    /// Shuffle labels after generation (null control).
    #[arg(long)]
    shuffle_labels: bool,
}

fn load_config(cli: &Cli, preset: Option<&str>) -> Result<RunConfig> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = io::read_to_string(path)?;
            serde_json::from_str::<Value>(&text).map_err(|e| Error::parse(path, e))?
        }
        None => json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::invalid("configuration must be a JSON object"))?;
    if let Some(p) = preset {
        obj.insert("preset".into(), json!(p));
        // a preset given on the command line wins over betas in the file
        if let Some(train) = obj.get_mut("train").and_then(Value::as_object_mut) {
            train.remove("beta");
            train.remove("beta_h");
        }
    }
    if let Some(seed) = cli.seed {
        let train = obj.entry("train").or_insert_with(|| json!({}));
        train
            .as_object_mut()
            .ok_or_else(|| Error::invalid("`train` must be an object"))?
            .insert("seed".into(), json!(seed));
    }
    RunConfig::resolve(&value)
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let spec = SyntheticCohortSpec {
        n_subjects: a.subjects,
        n_rois: a.rois,
        n_planted_rois: a.planted,
        effect_size: a.effect_size,
        n_timepoints: a.timepoints,
        n_sites: a.sites,
        sex_label_coupling: a.sex_coupling,
        site_label_coupling: a.site_coupling,
        seed: cli.seed.unwrap_or(0),
        ..SyntheticCohortSpec::default()
    };
    spec.validate()?;
    let mut cohort = generate_synthetic_cohort(&spec)?;
    if a.shuffle_labels {
        cohort.shuffle_labels(spec.seed);
    }
    io::prepare_output_dir(&a.out, cli.force)?;
    let manifest = io::write_synthetic_cohort(&a.out, &spec, &cohort)?;
    println!(
        "wrote {} subjects ({} ROIs, planted {:?}) to {}",
        manifest.subjects.len(),
        spec.n_rois,
        cohort.planted,
        a.out.display()
    );
    Ok(())
}

fn connectome(cli: &Cli, manifest_path: &Path, out: &Path) -> Result<()> {
    let run = load_config(cli, None)?;
    let manifest = Manifest::load(manifest_path)?;
    io::prepare_output_dir(out, cli.force)?;
    if manifest.subjects.is_empty() {
        eprintln!("warning: manifest lists no subjects; nothing written");
        return Ok(());
    }
    let base = io::manifest_dir(manifest_path);
    for s in &manifest.subjects {
        let (names, ts) = io::read_timeseries_csv(&base.join(&s.timeseries_path), &s.subject_id)?;
        let z = fisher_z(&pearson_fc(&ts)?, run.connectome.clamp_eps)?;
        io::write_file(&out.join(format!("{}.csv", s.subject_id)), io::connectivity_csv(&names, &z))?;
    }
    println!("wrote {} matrices to {}", manifest.subjects.len(), out.display());
    Ok(())
}

fn train(cli: &Cli, manifest: Option<&Path>, out: Option<&Path>, preset: Option<&str>) -> Result<()> {
    let mut run = load_config(cli, preset)?;
    let manifest = manifest
        .map(Path::to_path_buf)
        .or_else(|| run.paths.manifest.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::invalid("no manifest given (--manifest or paths.manifest)"))?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| run.paths.output.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::invalid("no output directory given (--out or paths.output)"))?;
    run.paths.manifest = Some(manifest.display().to_string());
    run.paths.output = Some(out.display().to_string());
    let cohort = io::load_cohort(&manifest, &run)?;
    io::prepare_output_dir(&out, cli.force)?;
    let cv = cross_validate(&cohort, &run, cli.jobs.max(1))?;
    let mut rankings = Vec::with_capacity(cv.folds.len());
    for f in &cv.folds {
        for w in &f.outcome.warnings {
            eprintln!("warning: fold {}: {w}", f.index);
        }
        rankings.push(explain_biomarkers(&f.outcome.model, &cohort)?);
        println!(
            "fold {:>2}: acc {:.4} auc {:.4} f1 {:.4} (epochs {})",
            f.index, f.metrics.acc, f.metrics.auc, f.metrics.f1, f.outcome.epochs_run
        );
    }
    let biomarkers = io::average_rankings(&rankings);
    io::write_results_bundle(&out, &run, &cohort, &cv, &biomarkers)?;
    let (m, s) = (cv.report.mean, cv.report.std);
    println!(
        "mean: acc {:.4} ({:.4}) auc {:.4} ({:.4}) f1 {:.4} ({:.4})",
        m.acc, s.acc, m.auc, s.auc, m.f1, s.f1
    );
    println!("results in {}", out.display());
    Ok(())
}

fn load_model(path: &Path, manifest: &Path) -> Result<(ModelBundle, connectome_ib::training::Cohort)> {
    let bundle = ModelBundle::load(path)?;
    let cohort = io::load_cohort(manifest, &bundle.config)?;
    Ok((bundle, cohort))
}

fn evaluate_cmd(model_path: &Path, manifest: &Path, all: bool) -> Result<()> {
    let (bundle, cohort) = load_model(model_path, manifest)?;
    let (model, pop) = bundle.restore(&cohort)?;
    let rows: Vec<usize> = match (&bundle.fold, all) {
        (Some(f), false) => f.test.clone(),
        _ => (0..cohort.len()).collect(),
    };
    let m = evaluate(&model, pop.as_ref(), &cohort, &rows, &bundle.config)?;
    let report = json!({ "schema_version": 1, "subjects": rows.len(), "acc": m.acc, "auc": m.auc, "f1": m.f1 });
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn explain(cli: &Cli, model_path: &Path, manifest: &Path, out: &Path, top: usize) -> Result<()> {
    let (bundle, cohort) = load_model(model_path, manifest)?;
    let (model, pop) = bundle.restore(&cohort)?;
    io::prepare_output_dir(out, cli.force)?;
    let ranking = explain_biomarkers(&model, &cohort)?;
    io::write_file(&out.join("biomarkers.csv"), io::biomarkers_csv(&ranking))?;
    let rows: Vec<usize> = match &bundle.fold {
        Some(f) => f.test.clone(),
        None => (0..cohort.len()).collect(),
    };
    if let Some(p) = &pop {
        for r in connectome_ib::popgraph::Relation::ALL {
            io::write_file(
                &out.join(format!("adjacency_{}.csv", r.name())),
                io::adjacency_csv(&bundle.subject_ids, p.graphs.adjacency(r)),
            )?;
        }
    }
    let report = match &pop {
        Some(p) => Some(explain_attention(&model, Some(p), &cohort, &rows, &bundle.config)?),
        None => {
            eprintln!("warning: model has no population graph; attention report omitted");
            None
        }
    };
    let file = io::AttentionFile {
        schema_version: 1,
        relations: connectome_ib::popgraph::Relation::ALL.to_vec(),
        folds: vec![io::FoldAttention {
            fold: bundle.fold_index.unwrap_or(0),
            report: report.clone(),
            timeline: Vec::new(),
        }],
    };
    io::write_file(&out.join("attention.json"), file.to_json())?;
    println!("top {} ROIs:", top.min(ranking.len()));
    for s in ranking.iter().take(top) {
        println!("{:>4}  {:<12} {:.6}", s.rank, s.name, s.score);
    }
    if let Some(r) = report {
        println!("meta-path attention:");
        for a in &r.relations {
            println!(
                "  {:<5} alpha {:.4} mi {:.4} loglik drop {:+.4}",
                a.relation.name(),
                a.alpha,
                a.mi,
                a.loglik_drop
            );
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(cli, a),
        Command::Connectome { manifest, out } => connectome(cli, manifest, out),
        Command::Train { manifest, out, preset } => train(cli, manifest.as_deref(), out.as_deref(), preset.as_deref()),
        Command::Evaluate { model, manifest, all } => evaluate_cmd(model, manifest, *all),
        Command::Explain {
            model,
            manifest,
            out,
            top,
        } => explain(cli, model, manifest, out, *top),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end. Subcommands mirror the pipeline stages and
//! compose through checkpoint and CSV files; `run` executes the whole
//! experiment from one config. Exit codes: 0 success, 2 config error,
//! 3 stage failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use mergeguard::defense::{probe_layer_importance, protect};
use mergeguard::hashing::hex16;
use mergeguard::merging::{merge, MergeContext, MergeMethod, MergeSpec};
use mergeguard::params::{load_checkpoint, task_vector, ParamSet};
use mergeguard::toymodels::{evaluate, gen_dataset, train, Dataset, Split, TrainConfig};
use mergeguard_cli::artifacts::{write_bytes_atomic, write_json_atomic};
use mergeguard_cli::config::{DatasetSidecar, ExperimentConfig};
use mergeguard_cli::error::CliError;
use mergeguard_cli::pipeline::{aggregate_report, run_pipeline};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mergeguard", version, about = "Model-merging defense experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskName {
    Pre,
    Def,
    Fr,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseName {
    Def,
    Fr,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodName {
    Wa,
    Ta,
    Ties,
    DareTies,
    Adamerging,
}

impl From<MethodName> for MergeMethod {
    fn from(m: MethodName) -> Self {
        match m {
            MethodName::Wa => MergeMethod::Wa,
            MethodName::Ta => MergeMethod::Ta,
            MethodName::Ties => MergeMethod::Ties,
            MethodName::DareTies => MergeMethod::DareTies,
            MethodName::Adamerging => MergeMethod::Adamerging,
        }
    }
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline for every seed in the config.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Skip the defense, defended merges and attacks.
        #[arg(long)]
        no_defense: bool,
    },
    /// Generate one task's dataset as CSV plus a JSON sidecar.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        task: TaskName,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared base model from scratch.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a checkpoint on a task.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which training-phase settings to use.
        #[arg(long, value_enum)]
        phase: PhaseName,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the two-stage defense to a finetuned checkpoint.
    Protect {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        val_data: PathBuf,
        /// Run only density-aware finetuning.
        #[arg(long, conflicts_with = "stage2_only")]
        stage1_only: bool,
        /// Run only adversarial weight negation.
        #[arg(long)]
        stage2_only: bool,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        k_prime: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the JSON provenance report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Merge a base checkpoint with two or more finetuned models.
    Merge {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        method: MethodName,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        keep_frac: Option<f64>,
        #[arg(long)]
        drop_p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Unlabeled CSV for the adaptive method.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adaptive free-rider attacks.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Evaluate a checkpoint on a dataset; prints metrics as JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Task-vector geometry and density diagnostics for a model pair.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.3)]
        lambda2: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Probe per-layer importance of a checkpoint against its base.
    Probe {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        val_data: PathBuf,
    },
    /// Verify and re-aggregate a finished run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Merge the protected model, then subtract a scaled copy of it.
    Unmask {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        hat: PathBuf,
        #[arg(long)]
        fr: PathBuf,
        #[arg(long, value_enum, default_value = "ta")]
        method: MethodName,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the merged model with gradients projected orthogonal to
    /// the estimated disturbance.
    Graderase {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        hat: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frac: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_ckpt(path: &PathBuf) -> Result<ParamSet, CliError> {
    load_checkpoint(path)
        .map_err(|e| CliError::stage("load-checkpoint", format!("{}: {e}", path.display())))
}

fn load_csv(path: &PathBuf) -> Result<Dataset, CliError> {
    Dataset::from_csv(path, &path.to_string_lossy(), Split::Train)
        .map_err(|e| CliError::stage("load-data", format!("{}: {e}", path.display())))
}

fn save_ckpt(params: &ParamSet, path: &PathBuf) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::stage("save-checkpoint", e))?;
        }
    }
    mergeguard::params::save_checkpoint(params, path)
        .map_err(|e| CliError::stage("save-checkpoint", format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, output_dir, seeds, no_defense } => {
            let mut cfg = ExperimentConfig::load(&config.config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if no_defense {
                cfg.defense.enabled = false;
            }
            cfg.validate()?;
            let report = run_pipeline(&cfg)?;
            println!("config {}", report.config_hash);
            for s in &report.summary {
                println!("{:<20} {:<6} {:.4}", s.model, s.task, s.mean_accuracy);
            }
            println!("report written to {}", cfg.output_dir.join("report.json").display());
            Ok(())
        }
        Command::GenData { config, task, seed, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let spec = match task {
                TaskName::Pre => &cfg.tasks.pre,
                TaskName::Def => &cfg.tasks.def,
                TaskName::Fr => &cfg.tasks.fr,
            };
            let data = gen_dataset(spec.generator, spec.d, spec.c, spec.n, &spec.transform, seed)
                .map_err(|e| CliError::stage("gen-data", e))?;
            data.to_csv(&out).map_err(|e| CliError::stage("gen-data", e))?;
            let sidecar =
                DatasetSidecar { generator: spec.generator, params: spec.clone(), seed };
            write_json_atomic(&out.with_extension("json"), &sidecar)?;
            println!("wrote {} rows to {}", data.len(), out.display());
            Ok(())
        }
        Command::Pretrain { config, data, seed, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let dataset = load_csv(&data)?;
            let mut tc = cfg.train.pretrain.clone();
            if let Some(s) = seed {
                tc.seed = s;
            }
            let init = mergeguard::toymodels::init_model(&cfg.model, tc.seed)
                .map_err(|e| CliError::stage("pretrain", e))?;
            let trained = train(&cfg.model, &init, &dataset, &tc)
                .map_err(|e| CliError::stage("pretrain", e))?;
            save_ckpt(&trained, &out)?;
            println!("pretrained checkpoint {} ({})", out.display(), hex16(trained.fingerprint()));
            Ok(())
        }
        Command::Finetune { config, init, data, phase, epochs, lr, seed, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let base = load_ckpt(&init)?;
            let dataset = load_csv(&data)?;
            let mut tc: TrainConfig = match phase {
                PhaseName::Def => cfg.train.finetune_def.clone(),
                PhaseName::Fr => cfg.train.finetune_fr.clone(),
            };
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(l) = lr {
                tc.learning_rate = l;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            let trained = train(&cfg.model, &base, &dataset, &tc)
                .map_err(|e| CliError::stage("finetune", e))?;
            save_ckpt(&trained, &out)?;
            println!("finetuned checkpoint {} ({})", out.display(), hex16(trained.fingerprint()));
            Ok(())
        }
        Command::Protect {
            config,
            model,
            pre,
            train_data,
            val_data,
            stage1_only,
            stage2_only,
            beta,
            alpha,
            k,
            k_prime,
            out,
            report,
        } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let theta_def = load_ckpt(&model)?;
            let theta_pre = load_ckpt(&pre)?;
            let train_set = load_csv(&train_data)?;
            let val_set = load_csv(&val_data)?;
            let mut dcfg = cfg.defense.config.clone();
            dcfg.run_stage1 = !stage2_only;
            dcfg.run_stage2 = !stage1_only;
            if let Some(b) = beta {
                dcfg.beta = b;
            }
            if let Some(a) = alpha {
                dcfg.alpha = a;
            }
            if let Some(kv) = k {
                dcfg.k = kv;
            }
            if let Some(kp) = k_prime {
                dcfg.k_prime = kp;
            }
            let (hat, p_report) =
                protect(&cfg.model, &theta_def, &theta_pre, &train_set, &val_set, &dcfg)
                    .map_err(|e| CliError::stage("protect", e))?;
            save_ckpt(&hat, &out)?;
            if let Some(rep) = report {
                write_json_atomic(&rep, &p_report)?;
            }
            if let Some(w) = &p_report.warning {
                eprintln!("warning: {w}");
            }
            println!("protected checkpoint {} ({})", out.display(), hex16(hat.fingerprint()));
            Ok(())
        }
        Command::Merge {
            config,
            method,
            base,
            models,
            lambda,
            keep_frac,
            drop_p,
            seed,
            unlabeled,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let base_params = load_ckpt(&base)?;
            let loaded: Vec<ParamSet> =
                models.iter().map(load_ckpt).collect::<Result<_, _>>()?;
            let refs: Vec<&ParamSet> = loaded.iter().collect();
            let mut mspec = MergeSpec::of(method.into());
            if let Some(l) = lambda {
                mspec.lambda = l;
            }
            if let Some(kf) = keep_frac {
                mspec.ties_keep_frac = kf;
            }
            if let Some(dp) = drop_p {
                mspec.dare_drop_p = dp;
            }
            if let Some(s) = seed {
                mspec.seed = Some(s);
            }
            mspec.validate().map_err(CliError::config_from)?;
            let unlabeled_set = match &unlabeled {
                Some(path) => Some(load_csv(path)?),
                None => None,
            };
            let ctx = unlabeled_set
                .as_ref()
                .map(|u| MergeContext { model_spec: &cfg.model, unlabeled: u });
            let merged = merge(&mspec, &base_params, &refs, ctx.as_ref())
                .map_err(|e| CliError::stage("merge", e))?;
            save_ckpt(&merged, &out)?;
            println!("merged checkpoint {} ({})", out.display(), hex16(merged.fingerprint()));
            Ok(())
        }
        Command::Attack(attack) => run_attack(attack),
        Command::Eval { config, model, data, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let params = load_ckpt(&model)?;
            let dataset = load_csv(&data)?;
            let metrics =
                evaluate(&cfg.model, &params, &dataset).map_err(|e| CliError::stage("eval", e))?;
            let json = serde_json::to_string_pretty(&metrics)
                .map_err(|e| CliError::stage("eval", e))?;
            println!("{json}");
            if let Some(path) = out {
                write_bytes_atomic(&path, json.as_bytes())?;
            }
            Ok(())
        }
        Command::Analyze { config, base, model_a, model_b, lambda1, lambda2, out, csv } => {
            let _cfg = ExperimentConfig::load(&config.config)?;
            let base_params = load_ckpt(&base)?;
            let a = load_ckpt(&model_a)?;
            let b = load_ckpt(&model_b)?;
            let tau_a =
                task_vector(&a, &base_params).map_err(|e| CliError::stage("analyze", e))?;
            let tau_b =
                task_vector(&b, &base_params).map_err(|e| CliError::stage("analyze", e))?;
            #[derive(serde::Serialize)]
            struct AnalyzeOut {
                geometry: mergeguard::analysis::GeometryReport,
                density_a: mergeguard::analysis::DensityReport,
                density_b: mergeguard::analysis::DensityReport,
            }
            let payload = AnalyzeOut {
                geometry: mergeguard::analysis::geometry_report(lambda1, lambda2, &tau_a, &tau_b)
                    .map_err(|e| CliError::stage("analyze", e))?,
                density_a: mergeguard::analysis::density(&tau_a)
                    .map_err(|e| CliError::stage("analyze", e))?,
                density_b: mergeguard::analysis::density(&tau_b)
                    .map_err(|e| CliError::stage("analyze", e))?,
            };
            let json = serde_json::to_string_pretty(&payload)
                .map_err(|e| CliError::stage("analyze", e))?;
            println!("{json}");
            if let Some(path) = out {
                write_bytes_atomic(&path, json.as_bytes())?;
            }
            if let Some(path) = csv {
                let g = &payload.geometry;
                let text = format!(
                    "metric,value\nangle_phi,{}\ncos_phi,{}\ninterference,{}\nnorm_a,{}\nnorm_b,{}\ntop_frac_mass_a,{}\ngini_a,{}\ntop_frac_mass_b,{}\ngini_b,{}\n",
                    g.angle_phi,
                    g.cos_phi,
                    g.interference,
                    g.norms.0,
                    g.norms.1,
                    payload.density_a.top_frac_mass,
                    payload.density_a.gini,
                    payload.density_b.top_frac_mass,
                    payload.density_b.gini,
                );
                write_bytes_atomic(&path, text.as_bytes())?;
            }
            Ok(())
        }
        Command::Probe { config, model, pre, val_data } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let theta = load_ckpt(&model)?;
            let theta_pre = load_ckpt(&pre)?;
            let val = load_csv(&val_data)?;
            let imp = probe_layer_importance(&cfg.model, &theta, &theta_pre, &val)
                .map_err(|e| CliError::stage("probe", e))?;
            for (name, drop) in &imp.entries {
                println!("{name:<24} {drop:+.4}");
            }
            Ok(())
        }
        Command::Report { dir } => {
            let report = aggregate_report(&dir)?;
            println!("config {}", report.config_hash);
            for s in &report.summary {
                println!("{:<20} {:<6} {:.4}", s.model, s.task, s.mean_accuracy);
            }
            Ok(())
        }
    }
}

fn run_attack(attack: AttackCommand) -> Result<(), CliError> {
    match attack {
        AttackCommand::Unmask { config, pre, hat, fr, method, lambda, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let theta_pre = load_ckpt(&pre)?;
            let theta_hat = load_ckpt(&hat)?;
            let theta_fr = load_ckpt(&fr)?;
            let mspec = cfg
                .merges
                .iter()
                .find(|m| m.method == method.into())
                .cloned()
                .unwrap_or_else(|| MergeSpec::of(method.into()));
            let lambda = lambda.unwrap_or(cfg.attacks.unmask_lambda);
            let result =
                mergeguard::attacks::unmask(&theta_pre, &theta_hat, &theta_fr, &mspec, lambda)
                    .map_err(|e| CliError::stage("attack", e))?;
            save_ckpt(&result, &out)?;
            println!("unmask checkpoint {} ({})", out.display(), hex16(result.fingerprint()));
            Ok(())
        }
        AttackCommand::Graderase { config, merged, hat, pre, data, frac, epochs, lr, seed, out } => {
            let cfg = ExperimentConfig::load(&config.config)?;
            let theta_merge = load_ckpt(&merged)?;
            let theta_hat = load_ckpt(&hat)?;
            let theta_pre = load_ckpt(&pre)?;
            let dataset = load_csv(&data)?;
            let mut gcfg = cfg.attacks.graderase.clone();
            if let Some(f) = frac {
                gcfg.retrain_data_frac = f;
            }
            if let Some(e) = epochs {
                gcfg.epochs = e;
            }
            if let Some(l) = lr {
                gcfg.lr = l;
            }
            if let Some(s) = seed {
                gcfg.seed = s;
            }
            let v = mergeguard::attacks::estimate_disturbance(&theta_hat, &theta_pre)
                .map_err(|e| CliError::stage("attack", e))?;
            let subset = dataset
                .seeded_fraction(gcfg.retrain_data_frac, gcfg.seed)
                .map_err(|e| CliError::stage("attack", e))?;
            let result =
                mergeguard::attacks::graderase_retrain(&cfg.model, &theta_merge, &v, &subset, &gcfg)
                    .map_err(|e| CliError::stage("attack", e))?;
            save_ckpt(&result, &out)?;
            println!("graderase checkpoint {} ({})", out.display(), hex16(result.fingerprint()));
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

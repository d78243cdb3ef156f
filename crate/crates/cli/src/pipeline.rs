//! End-to-end orchestration: data generation, pretraining, finetuning,
//! protection, merging, attacks, evaluation and analysis, all driven by
//! one config and fully deterministic per seed.

use crate::artifacts::{write_bytes_atomic, write_json_atomic, ArtifactLog};
use crate::config::{phase_seed, DatasetSidecar, DatasetSpec, ExperimentConfig};
use crate::error::CliError;
use crate::report::{
    AttackRunReport, EvalEntry, ExperimentReport, GradEraseReport, MergeRecord, NamedDensity,
    NamedGeometry, NamedProtectReport, SeedRunReport, UnmaskReport,
};
use mergeguard::analysis::{density, geometry_report};
use mergeguard::attacks::{estimate_disturbance, graderase_retrain, unmask};
use mergeguard::defense::protect;
use mergeguard::merging::{
    merge, merge_adamerging, AdaOutcome, MergeContext, MergeMethod, MergeSpec,
};
use mergeguard::params::{task_vector, ParamSet};
use mergeguard::toymodels::{
    evaluate, gen_dataset, init_model, train, Dataset, TrainConfig,
};
use std::path::Path;

/// Runs every stage for every seed and writes the full report (JSON plus
/// flat CSVs) under the config's output directory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentReport, CliError> {
    cfg.validate()?;
    let config_hash = cfg.config_hash();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(run_seed(cfg, &config_hash, seed)?);
    }
    let summary = ExperimentReport::build_summary(&seeds);
    let report = ExperimentReport { config_hash, seeds, summary };

    write_json_atomic(&cfg.output_dir.join("report.json"), &report)?;
    write_bytes_atomic(&cfg.output_dir.join("report.csv"), report.evals_csv().as_bytes())?;
    write_bytes_atomic(&cfg.output_dir.join("geometry.csv"), report.geometry_csv().as_bytes())?;
    Ok(report)
}

fn stage<T>(name: &str, r: mergeguard::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::stage(name, e))
}

fn generate_task(
    spec: &DatasetSpec,
    data_seed: u64,
) -> mergeguard::Result<(Dataset, Dataset)> {
    let full = gen_dataset(spec.generator, spec.d, spec.c, spec.n, &spec.transform, data_seed)?;
    full.split_train_val(0.8)
}

fn with_seed(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

/// Dispatches one merge spec, capturing the optimization outcome when the
/// method is the adaptive one.
fn merge_with_outcome(
    m: &MergeSpec,
    base: &ParamSet,
    models: &[&ParamSet],
    model_spec: &mergeguard::toymodels::ModelSpec,
    unlabeled: &Dataset,
) -> mergeguard::Result<(ParamSet, Option<AdaOutcome>)> {
    if m.method == MergeMethod::Adamerging {
        merge_adamerging(base, models, unlabeled, model_spec, &m.ada)
            .map(|(p, o)| (p, Some(o)))
    } else {
        let ctx = MergeContext { model_spec, unlabeled };
        merge(m, base, models, Some(&ctx)).map(|p| (p, None))
    }
}

fn run_seed(
    cfg: &ExperimentConfig,
    config_hash: &str,
    seed: u64,
) -> Result<SeedRunReport, CliError> {
    let seed_dir = cfg.output_dir.join(format!("seed_{seed}"));
    let mut log = ArtifactLog::new(&cfg.output_dir);
    let spec = &cfg.model;

    // ── data ──────────────────────────────────────────────────────────
    // The three tasks share one generator seed, so a relabel transform
    // yields the same input geometry under different labelings.
    let data_seed = phase_seed(seed, "data", 0);
    let (pre_train, _pre_val) =
        stage("gen-data", generate_task(&cfg.tasks.pre, data_seed))?;
    let (def_train, def_val) =
        stage("gen-data", generate_task(&cfg.tasks.def, data_seed))?;
    let (fr_train, fr_val) = stage("gen-data", generate_task(&cfg.tasks.fr, data_seed))?;

    for (name, task_spec, train_split, val_split) in [
        ("pre", &cfg.tasks.pre, &pre_train, &_pre_val),
        ("def", &cfg.tasks.def, &def_train, &def_val),
        ("fr", &cfg.tasks.fr, &fr_train, &fr_val),
    ] {
        let dir = seed_dir.join("data");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::stage("gen-data", e))?;
        for (split_name, split) in [("train", train_split), ("val", val_split)] {
            let csv = dir.join(format!("{name}_{split_name}.csv"));
            stage("gen-data", split.to_csv(&csv))?;
            log.record_file(&csv, "dataset", &[])?;
        }
        let sidecar = DatasetSidecar {
            generator: task_spec.generator,
            params: task_spec.clone(),
            seed: data_seed,
        };
        write_json_atomic(&dir.join(format!("{name}.json")), &sidecar)?;
    }

    // ── base models ───────────────────────────────────────────────────
    let ckpt = |name: &str| seed_dir.join("ckpt").join(format!("{name}.mgf"));

    let init = stage("pretrain", init_model(spec, phase_seed(seed, "init", 0)))?;
    let pre_cfg =
        with_seed(&cfg.train.pretrain, phase_seed(seed, "pretrain", cfg.train.pretrain.seed));
    let mut theta_pre = stage("pretrain", train(spec, &init, &pre_train, &pre_cfg))?;
    let pre_hash = log.save_checkpoint(&mut theta_pre, &ckpt("pre"), config_hash, &[])?;

    let def_cfg = with_seed(
        &cfg.train.finetune_def,
        phase_seed(seed, "finetune_def", cfg.train.finetune_def.seed),
    );
    let mut theta_def = stage("finetune", train(spec, &theta_pre, &def_train, &def_cfg))?;
    let def_hash =
        log.save_checkpoint(&mut theta_def, &ckpt("def"), config_hash, &[pre_hash.clone()])?;

    let fr_cfg = with_seed(
        &cfg.train.finetune_fr,
        phase_seed(seed, "finetune_fr", cfg.train.finetune_fr.seed),
    );
    let mut theta_fr = stage("finetune", train(spec, &theta_pre, &fr_train, &fr_cfg))?;
    let fr_hash =
        log.save_checkpoint(&mut theta_fr, &ckpt("fr"), config_hash, &[pre_hash.clone()])?;

    // Fixed-order model table driving evaluation at the end.
    let mut models: Vec<(String, ParamSet)> = vec![
        ("pre".into(), theta_pre.clone()),
        ("def".into(), theta_def.clone()),
        ("fr".into(), theta_fr.clone()),
    ];
    let mut protect_reports = Vec::new();
    let mut merge_records = Vec::new();
    let mut attack_report = AttackRunReport::default();

    // ── defense variants ──────────────────────────────────────────────
    let variants: &[(&str, bool, bool)] = if cfg.defense.enabled {
        &[("prot", true, true), ("s1", true, false), ("s2", false, true)]
    } else {
        &[]
    };
    for (variant, s1, s2) in variants {
        let mut dcfg = cfg.defense.config.clone();
        dcfg.run_stage1 = *s1;
        dcfg.run_stage2 = *s2;
        dcfg.stage1_train.seed = phase_seed(seed, "stage1", cfg.defense.config.stage1_train.seed);
        let (mut hat, p_report) = stage(
            "protect",
            protect(spec, &theta_def, &theta_pre, &def_train, &def_val, &dcfg),
        )?;
        let name = format!("def_{variant}");
        log.save_checkpoint(
            &mut hat,
            &ckpt(&name),
            config_hash,
            &[def_hash.clone(), pre_hash.clone()],
        )?;
        let report_path = seed_dir.join(format!("protect_{variant}.json"));
        write_json_atomic(&report_path, &p_report)?;
        log.record_file(&report_path, "protect_report", &[def_hash.clone()])?;
        protect_reports.push(NamedProtectReport {
            variant: variant.to_string(),
            report: p_report,
        });
        models.push((name, hat));
    }

    let model_by_name = |models: &[(String, ParamSet)], name: &str| -> ParamSet {
        models
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.clone())
            .expect("model recorded earlier in the run")
    };

    // ── merges ────────────────────────────────────────────────────────
    // Undefended and fully-protected merges run for every method; the
    // stage-1-only / stage-2-only ablation runs on task arithmetic.
    for mspec in &cfg.merges {
        let tag = mspec.tag();
        let mut m = mspec.clone();
        if let Some(s) = m.seed {
            m.seed = Some(phase_seed(seed, &format!("merge_{tag}"), s));
        }
        let mut partner_variants: Vec<(String, String)> =
            vec![("def".into(), format!("merge_{tag}"))];
        if cfg.defense.enabled {
            partner_variants.push(("def_prot".into(), format!("merge_{tag}_prot")));
            if m.method == MergeMethod::Ta {
                partner_variants.push(("def_s1".into(), "merge_ta_s1".into()));
                partner_variants.push(("def_s2".into(), "merge_ta_s2".into()));
            }
        }
        for (partner, merged_name) in partner_variants {
            let partner_model = model_by_name(&models, &partner);
            let (mut merged, ada) = stage(
                "merge",
                merge_with_outcome(&m, &theta_pre, &[&partner_model, &theta_fr], spec, &def_val),
            )?;
            merged.set_meta("merge.method", tag.clone());
            log.save_checkpoint(
                &mut merged,
                &ckpt(&merged_name),
                config_hash,
                &[pre_hash.clone(), def_hash.clone(), fr_hash.clone()],
            )?;
            merge_records.push(MergeRecord {
                method: tag.clone(),
                variant: partner.clone(),
                model: merged_name.clone(),
                ada,
            });
            models.push((merged_name, merged));
        }
    }

    // ── adaptive attacks ──────────────────────────────────────────────
    if cfg.defense.enabled {
        if let Some(ta) = cfg.ta_merge() {
            let hat = model_by_name(&models, "def_prot");

            let lambda = cfg.attacks.unmask_lambda;
            let mut unmasked =
                stage("attack", unmask(&theta_pre, &hat, &theta_fr, ta, lambda))?;
            log.save_checkpoint(
                &mut unmasked,
                &ckpt("unmask_ta"),
                config_hash,
                &[pre_hash.clone(), fr_hash.clone()],
            )?;
            models.push(("unmask_ta".into(), unmasked));
            attack_report.unmask =
                Some(UnmaskReport { lambda, merge_method: ta.tag() });

            let g = &cfg.attacks.graderase;
            let v = stage("attack", estimate_disturbance(&hat, &theta_pre))?;
            let subset = stage(
                "attack",
                def_train
                    .seeded_fraction(g.retrain_data_frac, phase_seed(seed, "graderase", g.seed)),
            )?;
            let start = model_by_name(&models, "merge_ta_prot");
            let mut gcfg = g.clone();
            gcfg.seed = phase_seed(seed, "graderase_train", g.seed);
            let mut recovered =
                stage("attack", graderase_retrain(spec, &start, &v, &subset, &gcfg))?;
            let update = stage("attack", task_vector(&recovered, &start))?.delta;
            let denom = update.norm2() * v.norm2();
            let residual = if denom == 0.0 {
                0.0
            } else {
                stage("attack", update.dot(&v))?.abs() / denom
            };
            log.save_checkpoint(
                &mut recovered,
                &ckpt("graderase_ta"),
                config_hash,
                &[pre_hash.clone(), def_hash.clone(), fr_hash.clone()],
            )?;
            models.push(("graderase_ta".into(), recovered));
            attack_report.graderase = Some(GradEraseReport {
                retrain_data_frac: g.retrain_data_frac,
                epochs: g.epochs,
                lr: g.lr,
                subset_size: subset.len(),
                orthogonality_residual: residual,
            });
        }
    }

    // ── evaluation ────────────────────────────────────────────────────
    let mut evals = Vec::new();
    for (name, params) in &models {
        for (task, data) in [("t_def", &def_val), ("t_fr", &fr_val)] {
            let metrics = stage("eval", evaluate(spec, params, data))?;
            evals.push(EvalEntry::new(name, task, metrics));
        }
    }
    let evals_path = seed_dir.join("evals.json");
    #[derive(serde::Serialize)]
    struct EvalsFile<'a> {
        config_hash: &'a str,
        seed: u64,
        entries: &'a [EvalEntry],
    }
    write_json_atomic(&evals_path, &EvalsFile { config_hash, seed, entries: &evals })?;
    log.record_file(&evals_path, "evals", &[])?;

    // ── geometry and density diagnostics ──────────────────────────────
    let mut geometry = Vec::new();
    let mut density_entries = Vec::new();
    let tau_def = stage("analyze", task_vector(&theta_def, &theta_pre))?;
    let tau_fr = stage("analyze", task_vector(&theta_fr, &theta_pre))?;
    let lambda = cfg.ta_merge().map_or(0.3, |m| m.lambda);
    let mut pairs = vec![("tau_def~tau_fr", tau_def.clone())];
    if cfg.defense.enabled {
        let s1 = model_by_name(&models, "def_s1");
        let hat = model_by_name(&models, "def_prot");
        pairs.push(("tau_s1~tau_fr", stage("analyze", task_vector(&s1, &theta_pre))?));
        pairs.push(("tau_prot~tau_fr", stage("analyze", task_vector(&hat, &theta_pre))?));
    }
    for (name, tau) in &pairs {
        geometry.push(NamedGeometry {
            pair: name.to_string(),
            report: stage("analyze", geometry_report(lambda, lambda, tau, &tau_fr))?,
        });
    }
    for (name, tau) in pairs
        .iter()
        .map(|(n, t)| (n.replace("~tau_fr", ""), t))
        .chain(std::iter::once(("tau_fr".to_string(), &tau_fr)))
    {
        density_entries.push(NamedDensity {
            vector: name,
            report: stage("analyze", density(tau))?,
        });
    }

    Ok(SeedRunReport {
        seed,
        evals,
        merges: merge_records,
        protect: protect_reports,
        attack: attack_report,
        geometry,
        density: density_entries,
        artifacts: log.into_records(),
    })
}

/// Re-aggregates a finished run directory: verifies that every per-seed
/// evals file carries the same config hash as the top-level report, then
/// rebuilds the summary CSV. Mixing artifacts from different configs is
/// refused.
pub fn aggregate_report(dir: &Path) -> Result<ExperimentReport, CliError> {
    let report_path = dir.join("report.json");
    let text = std::fs::read_to_string(&report_path)
        .map_err(|e| CliError::stage("report", format!("{}: {e}", report_path.display())))?;
    let report: ExperimentReport = serde_json::from_str(&text)
        .map_err(|e| CliError::stage("report", format!("{}: {e}", report_path.display())))?;

    for seed in &report.seeds {
        let evals_path = dir.join(format!("seed_{}", seed.seed)).join("evals.json");
        let text = std::fs::read_to_string(&evals_path)
            .map_err(|e| CliError::stage("report", format!("{}: {e}", evals_path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::stage("report", format!("{}: {e}", evals_path.display())))?;
        let found = value
            .get("config_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        if found != report.config_hash {
            return Err(CliError::stage(
                "report",
                format!(
                    "config hash mismatch: {} has {found}, report has {}",
                    evals_path.display(),
                    report.config_hash
                ),
            ));
        }
    }

    write_bytes_atomic(&dir.join("report.csv"), report.evals_csv().as_bytes())?;
    write_bytes_atomic(&dir.join("geometry.csv"), report.geometry_csv().as_bytes())?;
    Ok(report)
}

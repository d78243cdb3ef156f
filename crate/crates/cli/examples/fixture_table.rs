//! Runs the pipeline on a config and prints the headline table plus the
//! margins behind each fixture claim. Handy while calibrating configs.
//!
//! Usage: cargo run -p mergeguard-cli --example fixture_table -- configs/fixture.json

use mergeguard_cli::{run_pipeline, ExperimentConfig};

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| "configs/fixture.json".into());
    let mut cfg = ExperimentConfig::load(&path).expect("config loads");
    let tmp = tempdir_path();
    cfg.output_dir = tmp.clone();
    let report = run_pipeline(&cfg).expect("pipeline runs");

    println!("== per-seed accuracies on t_def ==");
    let models = [
        "pre", "def", "fr", "def_s1", "def_s2", "def_prot", "merge_wa", "merge_wa_prot",
        "merge_ta", "merge_ta_prot", "merge_ta_s1", "merge_ta_s2", "merge_ties",
        "merge_ties_prot", "merge_adamerging", "merge_adamerging_prot", "unmask_ta",
        "graderase_ta",
    ];
    print!("{:<24}", "model");
    for s in &report.seeds {
        print!("  seed_{:<6}", s.seed);
    }
    println!("  mean");
    for m in &models {
        print!("{m:<24}");
        for s in &report.seeds {
            match s.acc(m, "t_def") {
                Some(a) => print!("  {a:>10.4}"),
                None => print!("  {:>10}", "-"),
            }
        }
        match report.mean_acc(m, "t_def") {
            Some(a) => println!("  {a:.4}"),
            None => println!("  -"),
        }
    }

    println!("\n== t_fr accuracies (mean) ==");
    for m in &models {
        if let Some(a) = report.mean_acc(m, "t_fr") {
            println!("{m:<24} {a:.4}");
        }
    }

    let mean = |m: &str| report.mean_acc(m, "t_def").unwrap_or(f64::NAN);
    println!("\n== criterion margins ==");
    println!(
        "utility: hat {:+.4} vs def (need >= -0.03)",
        mean("def_prot") - mean("def")
    );
    for method in ["ta", "ties"] {
        println!(
            "degradation {method}: {:+.4} (need <= -0.20)",
            mean(&format!("merge_{method}_prot")) - mean(&format!("merge_{method}"))
        );
    }
    println!(
        "undefended merge works: {:+.4} above pre (need >= +0.10)",
        mean("merge_ta") - mean("pre")
    );
    for s in &report.seeds {
        let acc = |m: &str| s.acc(m, "t_def").unwrap_or(f64::NAN);
        let d12 = acc("merge_ta") - acc("merge_ta_prot");
        let d1 = acc("merge_ta") - acc("merge_ta_s1");
        let d2 = acc("merge_ta") - acc("merge_ta_s2");
        println!(
            "seed {}: drops s1+2 {d12:.4} s1 {d1:.4} s2 {d2:.4} (need s1+2 >= both)",
            s.seed
        );
    }
    println!(
        "unmask: {:+.4} from pre (need |x| <= 0.10)",
        mean("unmask_ta") - mean("pre")
    );
    println!(
        "graderase: recovers {:+.4} over hat_merge, {:+.4} below merge (need >0 and <= -0.15)",
        mean("graderase_ta") - mean("merge_ta_prot"),
        mean("graderase_ta") - mean("merge_ta")
    );

    // Per-layer mass split of the defender task vectors, first seed.
    let seed0 = report.seeds[0].seed;
    let ckpt = |name: &str| {
        mergeguard::load_checkpoint(tmp.join(format!("seed_{seed0}")).join("ckpt").join(format!("{name}.mgf")))
            .expect("checkpoint written by the pipeline")
    };
    let pre = ckpt("pre");
    println!("\n== per-layer task-vector norms (seed {seed0}) ==");
    for name in ["def", "def_s1", "def_prot"] {
        let tau = mergeguard::task_vector(&ckpt(name), &pre).unwrap();
        let total = tau.delta.norm2();
        print!("tau_{name:<10}");
        for (layer, t) in tau.delta.layers() {
            let n = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            print!("  {layer}={:.3}", n / total);
        }
        println!("  (norm {total:.2})");
    }

    // Flip-threshold probe: task-arithmetic accuracy as a function of the
    // merge scale, with and without the free-rider in the sum.
    let def_val = mergeguard::toymodels::Dataset::from_csv(
        tmp.join(format!("seed_{seed0}")).join("data").join("def_val.csv"),
        "t_def",
        mergeguard::toymodels::Split::Val,
    )
    .unwrap();
    let (pre_m, def_m, fr_m) = (ckpt("pre"), ckpt("def"), ckpt("fr"));
    println!("\n== task-arithmetic scale sweep on t_def (seed {seed0}) ==");
    for lambda in [0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5] {
        let joint =
            mergeguard::merging::merge_ta(&pre_m, &[&def_m, &fr_m], lambda).unwrap();
        let solo = mergeguard::merging::merge_ta(&pre_m, &[&def_m], lambda).unwrap();
        let aj = mergeguard::toymodels::evaluate(&cfg.model, &joint, &def_val).unwrap();
        let asolo = mergeguard::toymodels::evaluate(&cfg.model, &solo, &def_val).unwrap();
        println!(
            "lambda {lambda:.2}: def+fr {:.4}   def-only {:.4}",
            aj.accuracy, asolo.accuracy
        );
    }

    println!("\n== geometry (seed {}) ==", report.seeds[0].seed);
    for g in &report.seeds[0].geometry {
        println!(
            "{:<18} phi {:+.4} cos {:+.4} interference {:.4}",
            g.pair, g.report.angle_phi, g.report.cos_phi, g.report.interference
        );
    }
    for d in &report.seeds[0].density {
        println!(
            "{:<18} top1%mass {:.4} gini {:.4}",
            d.vector, d.report.top_frac_mass, d.report.gini
        );
    }

    std::fs::remove_dir_all(&tmp).ok();
}

fn tempdir_path() -> std::path::PathBuf {
    let mut dir = std::env::temp_dir();
    dir.push(format!("mergeguard-fixture-{}", std::process::id()));
    dir
}

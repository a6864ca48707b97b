//! Subcommand implementations.

use hcdg_core::fourier::{self, AugConfig, MaskMode, SigMask};
use hcdg_core::nn::SegModel;
use hcdg_core::raster::ImageTensor;
use hcdg_core::rng;
use hcdg_core::synthdata::{self, BenchmarkSpec};
use hcdg_core::trainer::{
    self, evaluate, run_ablation_grid, EvalReport, Precision, TrainConfig, Variant, ALL_VARIANTS,
};
use hcdg_core::{Error, Result};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(
    out: &Path,
    benchmark: Option<&Path>,
    seed: Option<u64>,
    n_train: Option<usize>,
    n_test: Option<usize>,
) -> Result<()> {
    let mut spec: BenchmarkSpec = match benchmark {
        Some(path) => serde_json::from_slice(&std::fs::read(path)?)?,
        None => synthdata::benchmark_v1(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = n_train {
        spec.n_train = n;
    }
    if let Some(n) = n_test {
        spec.n_test = n;
    }
    std::fs::create_dir_all(out)?;
    // resolved snapshot before any work
    std::fs::write(out.join("benchmark.json"), serde_json::to_vec_pretty(&spec)?)?;
    let ds = synthdata::generate_benchmark(&spec)?;
    let hash = synthdata::save(&ds, out)?;
    println!(
        "generated {} domains x ({} train + {} test) at {}x{}",
        spec.domains.len(),
        spec.n_train,
        spec.n_test,
        spec.resolution,
        spec.resolution
    );
    println!("manifest content hash: {hash}");
    Ok(())
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

pub struct AugmentArgs {
    pub src: PathBuf,
    pub counterpart: PathBuf,
    pub out: PathBuf,
    pub mode: String,
    pub sigma: Option<f64>,
    pub mu: Option<Vec<f64>>,
    pub t: f64,
    pub eta: f64,
    pub lambda: Option<f64>,
    pub sweep: bool,
    pub seed: u64,
}

/// Internal math in double precision; PNGs in and out.
pub fn augment(args: AugmentArgs) -> Result<()> {
    let mode = match args.mode.as_str() {
        "ag" => MaskMode::Ag,
        "am" => MaskMode::Am,
        other => return Err(Error::config(format!("unknown mode {other} (use ag|am)"))),
    };
    let src = ImageTensor::<f64>::read_png(&args.src)?;
    let cp = ImageTensor::<f64>::read_png(&args.counterpart)?;
    if src.data().dim() != cp.data().dim() {
        return Err(Error::shape(format!(
            "source {:?} vs counterpart {:?}",
            src.data().dim(),
            cp.data().dim()
        )));
    }
    let (h, w) = (src.height(), src.width());
    let cfg = AugConfig {
        eta: args.eta,
        t: args.t,
        mask_mode: mode,
        am_lambda_max: 1.0,
        ..AugConfig::default()
    };
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    let snapshot = serde_json::json!({
        "src": args.src, "counterpart": args.counterpart, "mode": args.mode,
        "sigma": args.sigma, "mu": args.mu, "t": args.t, "eta": args.eta,
        "lambda": args.lambda, "sweep": args.sweep, "seed": args.seed,
    });
    std::fs::write(args.out.join("augment_config.json"), snapshot.to_string())?;

    let (mu1, mu2) = match &args.mu {
        Some(m) => (m[0], m[1]),
        None => (0.0, 0.0),
    };

    if args.sweep {
        // qualitative sweep: appearance drifts back toward the source as the
        // mask peak 1/(2πσ²) shrinks with growing σ
        for (idx, sigma) in [0.4, 0.5, 0.6, 0.7, 0.8].iter().enumerate() {
            let mask = fourier::gaussian_mask::<f64>(h, w, *sigma, mu1, mu2, args.t, args.eta);
            let img = fourier::augment_with_mask(&src, &cp, &mask)?;
            let path = args.out.join(format!("sweep_{idx}_sigma{sigma:.1}.png"));
            img.write_png(&path)?;
            println!("wrote {} (sigma {sigma}, mask peak {:.6})", path.display(), mask.peak());
        }
        return Ok(());
    }

    let mask: SigMask<f64> = match (mode, args.sigma, args.lambda) {
        (MaskMode::Am, _, Some(lambda)) => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::config("lambda must lie in [0, 1]"));
            }
            SigMask::constant(h, w, lambda)
        }
        (MaskMode::Ag, Some(sigma), _) => {
            if sigma < fourier::sigma_lower_bound() {
                return Err(Error::config(format!(
                    "sigma must be at least {:.6}",
                    fourier::sigma_lower_bound()
                )));
            }
            fourier::gaussian_mask::<f64>(h, w, sigma, mu1, mu2, args.t, args.eta)
        }
        _ => fourier::sample_sigmask::<f64>(h, w, &cfg, &mut rng::stream(args.seed, "augment"))?,
    };
    println!("mask peak {:.6}", mask.peak());
    let img = fourier::augment_with_mask(&src, &cp, &mask)?;
    let path = args.out.join("augmented.png");
    img.write_png(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// config layering
// ---------------------------------------------------------------------------

/// defaults ← config file ← key=value overrides.
pub fn resolve_config(
    config_path: Option<&Path>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::benchmark_profile())?;
    if let Some(path) = config_path {
        let file: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::config(format!("config file {}: {e}", path.display())))?;
        merge(&mut value, &file);
    }
    for kv in overrides {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{kv}` is not KEY=VALUE")))?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)?;
    }
    let cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| Error::config(format!("resolved config invalid: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn set_path(value: &mut serde_json::Value, path: &str, new: serde_json::Value) -> Result<()> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override path `{path}` hits a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::config(format!("empty override path `{path}`")))
}

// ---------------------------------------------------------------------------
// train / eval / ablate
// ---------------------------------------------------------------------------

pub fn train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    holdout: Option<usize>,
    variant: Option<&str>,
) -> Result<()> {
    let mut cfg = resolve_config(config, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(name) = variant {
        let v = Variant::parse(name)
            .ok_or_else(|| Error::config(format!("unknown variant `{name}`")))?;
        cfg.flags = v.flags();
    }
    let mut ds = synthdata::load(data)?;
    if let Some(k) = holdout {
        if k >= ds.num_domains() {
            return Err(Error::config(format!(
                "holdout {k} out of range for {} domains",
                ds.num_domains()
            )));
        }
        ds = ds.with_held_out(k);
    }
    std::fs::create_dir_all(out)?;
    let record = trainer::train_run(&ds, &cfg, Some(out))?;
    println!("config hash {}", record.config_hash);
    if let Some(h) = &record.final_heldout {
        println!(
            "held-out Dice {:.2}% (per channel {:?})",
            h.dice_mean_pct, h.dice_pct
        );
    }
    println!(
        "in-domain Dice {:.2}% | wall {:.1}s | artifacts in {}",
        record.final_in_domain.dice_mean_pct,
        record.wall_seconds,
        out.display()
    );
    Ok(())
}

fn report_csv(reports: &[(String, EvalReport)]) -> String {
    let mut out =
        String::from("scope,n_images,dice_cup_pct,dice_disc_pct,dice_mean_pct,asd_cup_px,asd_disc_px,asd_warnings\n");
    for (scope, r) in reports {
        let asd = |i: usize| {
            r.asd_px
                .get(i)
                .and_then(|v| *v)
                .map_or(String::from("undefined"), |v| format!("{v}"))
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            scope,
            r.n_images,
            r.dice_pct.first().copied().unwrap_or(f64::NAN),
            r.dice_pct.get(1).copied().unwrap_or(f64::NAN),
            r.dice_mean_pct,
            asd(0),
            asd(1),
            r.asd_warnings
        ));
    }
    out
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    domain: Option<usize>,
    train_split: bool,
    teacher: bool,
) -> Result<()> {
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .and_then(|p| p.parent())
            .map(|p| p.join("config.json"))
            .ok_or_else(|| Error::config("cannot infer config.json location; pass --config"))?,
    };
    let cfg_bytes = std::fs::read(&config_path)
        .map_err(|e| Error::config(format!("config {}: {e}", config_path.display())))?;
    let cfg: TrainConfig = serde_json::from_slice(&cfg_bytes)?;
    let (_, expect_hash) = cfg.canonical()?;

    let ds = synthdata::load(data)?;
    let domains: Vec<usize> = match domain {
        Some(k) => {
            if k >= ds.num_domains() {
                return Err(Error::config(format!("domain {k} out of range")));
            }
            vec![k]
        }
        None => (0..ds.num_domains()).collect(),
    };

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    match cfg.precision {
        Precision::F32 => {
            eval_typed::<f32>(&cfg, &expect_hash, checkpoint, &ds, &domains, train_split, teacher, &mut reports)?
        }
        Precision::F64 => {
            eval_typed::<f64>(&cfg, &expect_hash, checkpoint, &ds, &domains, train_split, teacher, &mut reports)?
        }
    }

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), report_csv(&reports))?;
    let json: serde_json::Value = serde_json::json!({
        "checkpoint": checkpoint,
        "teacher": teacher,
        "split": if train_split { "train" } else { "test" },
        "reports": reports.iter().map(|(s, r)| serde_json::json!({"scope": s, "report": r})).collect::<Vec<_>>(),
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&json)?)?;
    for (scope, r) in &reports {
        println!(
            "{scope}: Dice {:.2}% (per channel {:?}), ASD {:?} px, {} warnings",
            r.dice_mean_pct, r.dice_pct, r.asd_px, r.asd_warnings
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_typed<T: hcdg_core::Scalar>(
    cfg: &TrainConfig,
    expect_hash: &str,
    checkpoint: &Path,
    ds: &synthdata::DomainSet,
    domains: &[usize],
    train_split: bool,
    teacher: bool,
    reports: &mut Vec<(String, EvalReport)>,
) -> Result<()> {
    let model = SegModel::<T>::new(cfg.model.clone(), &mut rng::stream(cfg.seed, "init"))?;
    let header = hcdg_core::checkpoint::load_model(&model, checkpoint)?;
    if header.config_hash != expect_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by config {} but the resolved config hashes to {expect_hash}",
            header.config_hash
        )));
    }
    for &k in domains {
        let samples = if train_split { &ds.train[k] } else { &ds.test[k] };
        let report = evaluate(&model, samples, !teacher)?;
        reports.push((format!("domain{k}"), report));
    }
    Ok(())
}

pub fn ablate(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    overrides: &[String],
    seeds: &str,
    models: Option<&str>,
) -> Result<()> {
    let cfg = resolve_config(config, overrides)?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("bad seed `{s}`")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::config("need at least one seed"));
    }
    let variants: Vec<Variant> = match models {
        Some(list) => list
            .split(',')
            .map(|s| {
                Variant::parse(s.trim())
                    .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => ALL_VARIANTS.to_vec(),
    };
    let ds = synthdata::load(data)?;
    std::fs::create_dir_all(out)?;
    let (json, _) = cfg.canonical()?;
    std::fs::write(out.join("base_config.json"), json)?;
    let report = run_ablation_grid(&ds, &cfg, &variants, &seeds, Some(out))?;
    let md = report.to_markdown(&variants, ds.num_domains());
    println!("{md}");
    println!("grid artifacts in {}", out.display());
    Ok(())
}

//! Command-line entry points around the core pipeline.
//!
//! Flags are `--config <path>`, `--seed <u64>`, `--out <path>`, plus
//! command-specific inputs; any other `--section.key value` pair is a
//! dotted-key override applied on top of the config file. Commands exit 0
//! on success and 1 with a one-line `error: ...` on stderr otherwise;
//! unknown subcommands print usage and exit 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fas_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageTag};
use fas_core::config::{parse_config, ProtocolKind, RunConfig, ScoreMode};
use fas_core::error::{FasError, Result};
use fas_core::loss;
use fas_core::model::Model;
use fas_core::protocol::{eval_holdout, global_split, run_protocol, ProtocolReport};
use fas_core::rng::Rng;
use fas_core::synth::{
    self, generate_materials, load_dataset, load_materials, write_dataset, write_materials,
    MaterialSample, Sample,
};
use fas_core::tensor::{finite_diff_check, Tensor};
use fas_core::train::{train_full, train_stage1, TrainedModel};
use fas_core::uncertainty::{calibrate_variance_norms, estimate_priors, train_stage2};

const USAGE: &str = "\
usage: fas <command> [flags]

commands:
  gen-data         render the synthetic liveness corpus to --out
  gen-materials    render the 23-class material patch set to --out
  train-stage1     train the multi-channel model on a dataset's training split
  estimate-priors  build channel priors from K stage-1 checkpoints
  train-stage2     train the variance heads against the priors
  eval             run a protocol (or score a checkpoint on the holdout split)
  gradcheck        finite-difference check of every training loss
  report           render a report JSON as CSV

common flags:
  --config <path>     JSON config (defaults apply when omitted)
  --<section>.<key> <value>  dotted-key config override
  --seed <u64>        shorthand for --training.seed
  --out <path>        output file or directory
  --data <dir>        dataset directory (train-stage1, estimate-priors,
                      train-stage2, eval)
  --materials <dir>   material patch directory (optional; regenerated from
                      the dataset seed when omitted)
  --checkpoint <path> checkpoint input (repeatable for estimate-priors)
  --protocol <name>   intra | leave_one_domain_out | leave_one_domain_and_attack_out
  --in <path>         report JSON input (report)
";

/// Parsed command-line flags.
#[derive(Debug, Default)]
struct Flags {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    materials: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
    protocol: Option<String>,
    input: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

fn parse_flags(args: &[String]) -> Result<Flags> {
    let mut flags = Flags::default();
    let mut i = 0;
    while i < args.len() {
        let flag = &args[i];
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| FasError::Config(format!("expected a --flag, got {flag:?}")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| FasError::Config(format!("flag --{key} needs a value")))?
            .clone();
        match key {
            "config" => flags.config = Some(PathBuf::from(value)),
            "out" => flags.out = Some(PathBuf::from(value)),
            "data" => flags.data = Some(PathBuf::from(value)),
            "materials" => flags.materials = Some(PathBuf::from(value)),
            "checkpoint" => flags.checkpoints.push(PathBuf::from(value)),
            "protocol" => flags.protocol = Some(value),
            "in" => flags.input = Some(PathBuf::from(value)),
            "seed" => flags.overrides.push(("training.seed".to_string(), value)),
            dotted => flags.overrides.push((dotted.to_string(), value)),
        }
        i += 2;
    }
    Ok(flags)
}

fn resolve_config(flags: &Flags) -> Result<RunConfig> {
    parse_config(flags.config.as_deref(), &flags.overrides)
}

fn required<'a, T>(opt: &'a Option<T>, what: &str) -> Result<&'a T> {
    opt.as_ref()
        .ok_or_else(|| FasError::Config(format!("missing required flag --{what}")))
}

/// Material patches tied to a dataset: regenerated from the dataset's own
/// manifest seed so every stage sees the same set.
fn materials_for(flags: &Flags, data_dir: &Path) -> Result<Vec<MaterialSample>> {
    if let Some(dir) = &flags.materials {
        return load_materials(dir);
    }
    let manifest = synth::read_manifest(data_dir)?;
    generate_materials(
        &manifest.generator_config,
        Rng::new(manifest.seed).derive(0x3a7).seed(),
    )
}

fn load_samples(flags: &Flags) -> Result<(PathBuf, Vec<Sample>)> {
    let dir = required(&flags.data, "data")?.clone();
    let (_, samples) = load_dataset(&dir)?;
    Ok((dir, samples))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| FasError::Io(format!("creating {parent:?}: {e}")))?;
        }
    }
    std::fs::write(path, text).map_err(|e| FasError::Io(format!("writing {path:?}: {e}")))
}

fn cmd_gen_data(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let out = required(&flags.out, "out")?;
    let manifest = write_dataset(out, &cfg.data, cfg.training.seed)?;
    println!(
        "wrote {} samples to {}",
        manifest.samples.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gen_materials(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let out = required(&flags.out, "out")?;
    let manifest = write_materials(
        out,
        &cfg.data,
        Rng::new(cfg.training.seed).derive(0x3a7).seed(),
    )?;
    println!(
        "wrote {} material patches to {}",
        manifest.samples.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_stage1(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let out = required(&flags.out, "out")?;
    let (data_dir, samples) = load_samples(flags)?;
    let materials = materials_for(flags, &data_dir)?;
    let split = global_split(&cfg, &samples)?;
    let train_set: Vec<Sample> = split.train.iter().map(|&i| samples[i].clone()).collect();
    let model = Model::new(cfg.model.clone())?;
    let (params, trace) = train_stage1(&model, &cfg, &train_set, &materials, cfg.training.seed)?;
    let ckpt = Checkpoint {
        stage: StageTag::Stage1,
        config: cfg,
        params,
        adam: None,
        priors: None,
    };
    save_checkpoint(out, &ckpt)?;
    println!(
        "stage-1 done: {} epochs, loss {:.6} -> {:.6}, checkpoint {}",
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_estimate_priors(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let out = required(&flags.out, "out")?;
    if flags.checkpoints.len() < 2 {
        return Err(FasError::Contract(format!(
            "estimate-priors needs >= 2 --checkpoint inputs, got {}",
            flags.checkpoints.len()
        )));
    }
    let (_, samples) = load_samples(flags)?;
    let split = global_split(&cfg, &samples)?;
    let train_set: Vec<Sample> = split.train.iter().map(|&i| samples[i].clone()).collect();
    let loaded: Vec<Checkpoint> = flags
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<_>>()?;
    let refs: Vec<&fas_core::nn::ParamStore> = loaded.iter().map(|c| &c.params).collect();
    let priors = estimate_priors(&loaded[0].params, &refs, &cfg.model, &train_set)?;
    let primary = loaded.into_iter().next().expect("at least two checkpoints");
    let ckpt = Checkpoint {
        stage: StageTag::Stage1,
        config: cfg,
        params: primary.params,
        adam: None,
        priors: Some(priors),
    };
    save_checkpoint(out, &ckpt)?;
    println!(
        "priors estimated from {} runs, checkpoint {}",
        flags.checkpoints.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_stage2(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let out = required(&flags.out, "out")?;
    if flags.checkpoints.is_empty() {
        return Err(FasError::Contract(
            "train-stage2 requires a stage-1 checkpoint (--checkpoint)".into(),
        ));
    }
    let ckpt = load_checkpoint(&flags.checkpoints[0])?;
    let priors = ckpt.priors.ok_or_else(|| {
        FasError::Contract("checkpoint carries no channel priors; run estimate-priors first".into())
    })?;
    let (_, samples) = load_samples(flags)?;
    let split = global_split(&cfg, &samples)?;
    let train_set: Vec<Sample> = split.train.iter().map(|&i| samples[i].clone()).collect();
    let model = Model::new(cfg.model.clone())?;
    let mut params = ckpt.params;
    let mut priors = priors;
    let trace = train_stage2(
        &model,
        &mut params,
        &train_set,
        &priors,
        &cfg.uncertainty.stage2,
        Rng::new(cfg.training.seed).derive(200).seed(),
    )?;
    calibrate_variance_norms(&model, &params, &train_set, &mut priors)?;
    let out_ckpt = Checkpoint {
        stage: StageTag::Stage2,
        config: cfg,
        params,
        adam: None,
        priors: Some(priors),
    };
    save_checkpoint(out, &out_ckpt)?;
    println!(
        "stage-2 done: {} epochs, loss {:.6} -> {:.6}, checkpoint {}",
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn parse_protocol(name: &str) -> Result<ProtocolKind> {
    match name {
        "intra" => Ok(ProtocolKind::Intra),
        "leave_one_domain_out" => Ok(ProtocolKind::LeaveOneDomainOut),
        "leave_one_domain_and_attack_out" => Ok(ProtocolKind::LeaveOneDomainAndAttackOut),
        other => Err(FasError::Config(format!("unknown protocol: {other}"))),
    }
}

fn cmd_eval(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let out = required(&flags.out, "out")?;
    let (data_dir, samples) = load_samples(flags)?;
    let report: ProtocolReport = if flags.checkpoints.is_empty() {
        let protocol = match &flags.protocol {
            Some(p) => parse_protocol(p)?,
            None => cfg.protocol.0,
        };
        let materials = materials_for(flags, &data_dir)?;
        run_protocol(&cfg, &samples, &materials, protocol)?
    } else {
        let ckpt = load_checkpoint(&flags.checkpoints[0])?;
        if cfg.uncertainty.score_mode == ScoreMode::Fused && ckpt.priors.is_none() {
            return Err(FasError::Contract(
                "fused scoring needs a checkpoint with priors (run estimate-priors and train-stage2)"
                    .into(),
            ));
        }
        let trained = TrainedModel {
            model: Model::new(cfg.model.clone())?,
            params: ckpt.params,
            priors: ckpt.priors,
        };
        eval_holdout(&cfg, &trained, &samples)?
    };
    write_text(out, &report.to_json()?)?;
    let mean_acer = report.summary.mean.get("acer").copied().unwrap_or(f64::NAN);
    let mean_auc = report.summary.mean.get("auc").copied().unwrap_or(f64::NAN);
    println!(
        "eval done: {} folds, mean ACER {:.3}%, mean AUC {:.3}%, report {}",
        report.folds.len(),
        mean_acer,
        mean_auc,
        out.display()
    );
    Ok(())
}

/// Finite-difference sweep over the eight training losses on fresh random
/// inputs. One line per loss; nonzero exit when any exceeds 1e-4.
fn cmd_gradcheck(flags: &Flags) -> Result<()> {
    let cfg = resolve_config(flags)?;
    let mut rng = Rng::new(cfg.training.seed);
    let mut failures: Vec<&'static str> = Vec::new();
    let mut results: BTreeMap<&'static str, f64> = BTreeMap::new();
    let trials = 20;
    let h = 1e-3;

    let record = |results: &mut BTreeMap<&'static str, f64>,
                  failures: &mut Vec<&'static str>,
                  name: &'static str,
                  err: f64| {
        results.insert(name, err);
        if err >= 1e-4 {
            failures.push(name);
        }
    };

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let logits = rng.normal_tensor(&[cfg.model.identity_count])?;
        let y = rng.below(cfg.model.identity_count);
        worst = worst.max(finite_diff_check(
            |t| loss::recognition_loss(t, y),
            &logits,
            h,
            None,
        )?);
    }
    record(&mut results, &mut failures, "recognition_loss", worst);

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let logits = rng.normal_tensor(&[2])?;
        worst = worst.max(finite_diff_check(
            |t| loss::liveness_loss(t, fas_core::synth::Liveness::Spoof),
            &logits,
            h,
            None,
        )?);
    }
    record(&mut results, &mut failures, "liveness_loss", worst);

    for name in ["depth_loss", "reflection_loss"] {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let gt_data: Vec<f64> = (0..64).map(|_| rng.uniform_in(0.0, 0.4)).collect();
            let pred_data: Vec<f64> = gt_data
                .iter()
                .map(|v| v + rng.uniform_in(0.05, 0.5))
                .collect();
            let gt = Tensor::from_vec(&[1, 8, 8], gt_data)?;
            let pred = Tensor::from_vec(&[1, 8, 8], pred_data)?;
            let err = if name == "depth_loss" {
                finite_diff_check(|t| loss::depth_loss(t, &gt), &pred, h, None)?
            } else {
                finite_diff_check(|t| loss::reflection_loss(t, &gt), &pred, h, None)?
            };
            worst = worst.max(err);
        }
        record(&mut results, &mut failures, name, worst);
    }

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let general = rng.normal_tensor(&[23])?;
        let yg = rng.below(23);
        let spoof = rng.normal_tensor(&[3])?;
        let ys = rng.below(3);
        worst = worst.max(finite_diff_check(
            |t| loss::material_loss(Some((t, yg)), Some((&spoof, ys))),
            &general,
            h,
            None,
        )?);
        worst = worst.max(finite_diff_check(
            |t| loss::material_loss(Some((&general, yg)), Some((t, ys))),
            &spoof,
            h,
            None,
        )?);
    }
    record(&mut results, &mut failures, "material_loss", worst);

    for (name, margin) in [
        ("triplet_identity_loss", cfg.losses.m1),
        ("triplet_attribute_loss", cfg.losses.m2),
    ] {
        let mut worst = 0.0f64;
        let mut done = 0;
        while done < trials {
            let a = rng.normal_tensor(&[6])?;
            let p = rng.normal_tensor(&[6])?;
            let n = rng.normal_tensor(&[6])?;
            let dp: f64 = a
                .data()
                .iter()
                .zip(p.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let dn: f64 = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if (dp - dn + margin).abs() < 0.05 {
                continue; // resample away from the hinge kink
            }
            worst = worst.max(finite_diff_check(
                |t| loss::triplet_identity_loss(t, &p, &n, margin),
                &a,
                h,
                None,
            )?);
            done += 1;
        }
        record(&mut results, &mut failures, name, worst);
    }

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let comps = rng.normal_tensor(&[7])?.abs().detach();
        let weights = cfg.losses.weights();
        worst = worst.max(finite_diff_check(
            |t| {
                let components = loss::LossComponents {
                    liveness: t.index(0)?,
                    depth: t.index(1)?,
                    reflection: t.index(2)?,
                    material: t.index(3)?,
                    triplet_identity: t.index(4)?,
                    triplet_attribute: t.index(5)?,
                    recognition: t.index(6)?,
                };
                loss::total_stage1_loss(&components, &weights)
            },
            &comps,
            h,
            None,
        )?);
    }
    record(&mut results, &mut failures, "total_stage1_loss", worst);

    for (name, err) in &results {
        let verdict = if *err < 1e-4 { "pass" } else { "FAIL" };
        println!("{name}: max_rel_err {err:.3e} {verdict}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(FasError::Numeric(format!(
            "gradcheck failures: {}",
            failures.join(", ")
        )))
    }
}

fn cmd_report(flags: &Flags) -> Result<()> {
    let input = required(&flags.input, "in")?;
    let out = required(&flags.out, "out")?;
    let text = std::fs::read_to_string(input)
        .map_err(|e| FasError::Io(format!("reading report {input:?}: {e}")))?;
    let report = ProtocolReport::from_json(&text)?;
    write_text(out, &report.to_csv())?;
    println!("wrote CSV report to {}", out.display());
    Ok(())
}

/// Trains the full pipeline in one process on a corpus' training split;
/// mirrors the scripted gen-data -> K stage-1 -> priors -> stage-2 flow.
pub fn full_pipeline_in_memory(cfg: &RunConfig, samples: &[Sample]) -> Result<TrainedModel> {
    let materials =
        generate_materials(&cfg.data, Rng::new(cfg.training.seed).derive(0x3a7).seed())?;
    let split = global_split(cfg, samples)?;
    let train_set: Vec<Sample> = split.train.iter().map(|&i| samples[i].clone()).collect();
    train_full(cfg, &train_set, &materials, cfg.training.seed)
}

/// Entry point: dispatches a subcommand, returning the process exit code.
pub fn dispatch(args: &[String]) -> i32 {
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return 2;
    };
    let flags = match parse_flags(&args[1..]) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let result = match command.as_str() {
        "gen-data" => cmd_gen_data(&flags),
        "gen-materials" => cmd_gen_materials(&flags),
        "train-stage1" => cmd_train_stage1(&flags),
        "estimate-priors" => cmd_estimate_priors(&flags),
        "train-stage2" => cmd_train_stage2(&flags),
        "eval" => cmd_eval(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "report" => cmd_report(&flags),
        other => {
            eprintln!("error: unknown subcommand {other:?}");
            eprint!("{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

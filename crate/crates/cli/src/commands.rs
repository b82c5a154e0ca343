use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::process::ExitCode;

use anyhow::{bail, Context};
use mmvt_core::audio::{self, MAX_FREQ_MASK, MAX_TIME_MASK};
use mmvt_core::eval::{self, EnsembleConfig};
use mmvt_core::model_spec::token_geometry;
use mmvt_core::trainer::{self, argmax};
use mmvt_core::visual::ClipManifest;
use mmvt_core::{gradcheck, rng, CoreError, MMModel};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, Command, DumpLogitsArgs, EvalArgs, ExtractSpecArgs, GradcheckArgs, InferArgs, ShapesArgs, TrainArgs};

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(usize::from(cli.threads))
        .build_global()
        .context("starting worker pool")?;
    match cli.command {
        Command::ExtractSpec(a) => cmd_extract_spec(a),
        Command::Train(a) => cmd_train(*a),
        Command::Infer(a) => cmd_infer(a),
        Command::DumpLogits(a) => cmd_dump_logits(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Shapes(a) => cmd_shapes(a),
    }
    .map(|()| ExitCode::SUCCESS)
}

/// One JSON object: `{"error": kind, "message": text}`.
pub fn error_line(e: &anyhow::Error) -> String {
    let kind = match e.downcast_ref::<CoreError>() {
        Some(CoreError::Tensor(_)) => "tensor",
        Some(CoreError::Parse(_)) => "parse",
        Some(CoreError::Geometry(_)) => "geometry",
        Some(CoreError::Audio(_)) => "audio",
        Some(CoreError::Checkpoint(_)) => "checkpoint",
        Some(CoreError::MissingFile(_)) => "missing_file",
        Some(CoreError::Invalid(_)) => "invalid",
        Some(CoreError::Missing(_)) => "missing",
        Some(CoreError::Io(_)) => "io",
        Some(CoreError::Json(_)) => "json",
        None => "runtime",
    };
    json!({ "error": kind, "message": format!("{e:#}") }).to_string()
}

fn cmd_extract_spec(a: ExtractSpecArgs) -> anyhow::Result<()> {
    let bytes = std::fs::read(&a.wav).map_err(|_| CoreError::MissingFile(a.wav.clone()))?;
    let clip = audio::ingest_audio(&bytes)?;
    let mut stream = audio::normalize_stream(&audio::extract_stream(&clip, a.frames)?);
    if a.specaugment {
        let mut r = rng::stream(a.seed, "specaugment", &[]);
        stream = audio::spec_augment(&stream, &mut r, MAX_TIME_MASK, MAX_FREQ_MASK).0;
    }
    mmvt_tensor::mmt::save(&a.out, &stream.data).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} {:?}", a.out.display(), stream.data.dims());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let run = RunConfig::load(&a.model, &a.manifest, a.config.as_deref(), &a.overrides)?;
    let s = &run.train;
    let model_cfg = s.model_config(a.model.clone());
    model_cfg.validate()?;
    let manifest = ClipManifest::load(&a.manifest)?;
    let clips = trainer::load_manifest_clips(&manifest, &a.model.modalities(), s.n_verbs, s.n_nouns)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("run_config.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    let mut metrics = BufWriter::new(File::create(a.out.join("metrics.jsonl"))?);
    let mut write_err = None;
    let mut model = MMModel::init(model_cfg, s.seed, s.init_std)?;
    let log = trainer::train(&mut model, &clips, &s.train_config(), |m| {
        let line = json!({
            "step": m.step,
            "lr": m.lr,
            "loss": m.loss,
            "verb_acc": m.verb_acc,
            "noun_acc": m.noun_acc,
        });
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics.jsonl");
    }
    metrics.flush()?;
    model.save(&a.out.join("model.ckpt"))?;
    if let Some(last) = log.epochs.last() {
        println!(
            "{} steps; last epoch loss {:.4}, verb {:.3}, noun {:.3}",
            log.steps.len(),
            last.loss,
            last.verb_acc,
            last.noun_acc
        );
    }
    Ok(())
}

fn load_for_inference(checkpoint: &std::path::Path, manifest: &std::path::Path) -> anyhow::Result<(MMModel<f32>, Vec<trainer::ClipData>)> {
    let model = MMModel::<f32>::load(checkpoint)?;
    let manifest = ClipManifest::load(manifest)?;
    let c = &model.config;
    let clips = trainer::load_manifest_clips(&manifest, &c.spec.modalities(), c.n_verbs, c.n_nouns)?;
    Ok((model, clips))
}

fn cmd_infer(a: InferArgs) -> anyhow::Result<()> {
    let (model, clips) = load_for_inference(&a.checkpoint, &a.manifest)?;
    let records = eval::dump_logits(&model, "", &clips)?;
    let mut out = std::io::stdout().lock();
    for r in &records {
        let line = json!({
            "clip_id": r.clip_id,
            "verb": argmax(&r.verb_logits),
            "noun": argmax(&r.noun_logits),
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn cmd_dump_logits(a: DumpLogitsArgs) -> anyhow::Result<()> {
    let (model, clips) = load_for_inference(&a.checkpoint, &a.manifest)?;
    let records = eval::dump_logits(&model, &a.model_id, &clips)?;
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    eval::write_records(&mut out, &records)?;
    out.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let records = eval::read_records_dir(&a.logits)?;
    let ensemble = EnsembleConfig::load(&a.ensemble)?;
    let manifest = ClipManifest::load(&a.manifest)?;
    let labels: BTreeMap<String, (usize, usize)> = manifest
        .entries
        .iter()
        .map(|e| (e.clip_id.clone(), (e.verb, e.noun)))
        .collect();
    let report = eval::evaluate(&records, &ensemble, &labels)?;
    std::fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "action {:.4} noun {:.4} verb {:.4} ({} clips)",
        report.top1_action,
        report.top1_noun,
        report.top1_verb,
        report.predictions.len()
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let start = std::time::Instant::now();
    let r = gradcheck::run(a.seed)?;
    println!(
        "max_rel_error {:.3e} at {}[{}] over {} scalars in {:.1}s",
        r.max_rel_error,
        r.worst_param,
        r.worst_index,
        r.checked_scalars,
        start.elapsed().as_secs_f64()
    );
    if !r.passed() {
        bail!(
            "max relative error {:.3e} exceeds {:.0e}",
            r.max_rel_error,
            gradcheck::GRADCHECK_TOLERANCE
        );
    }
    Ok(())
}

fn cmd_shapes(a: ShapesArgs) -> anyhow::Result<()> {
    println!("{:<6} {:<12} {:>8} {:>8} {:>8}", "view", "spec", "temporal", "spatial", "tokens");
    for (i, v) in a.model.views.iter().enumerate() {
        let (t, s) = token_geometry(v, a.frames, a.res, a.res)?;
        println!("{:<6} {:<12} {:>8} {:>8} {:>8}", i, v.to_string(), t, s, t * s);
    }
    Ok(())
}

use std::fs;
use std::path::Path;

use fairser_core::corpus::{
    build_all_enrolment_sets, build_enrolment_sets, generate_synthetic, load_corpus,
    load_enrolment, save_corpus, save_enrolment, Corpus, Enrolment, SynthConfig, Variant,
};
use fairser_core::fairness::{
    default_alpha_grid, iswf_sweep, load_predictions, report, sweep_csv, uar_per_speaker,
    BootstrapConfig, ReportOptions,
};
use fairser_core::model::{
    load_model, predict as run_predict, save_model, train_with, Hparams, ModelConfig,
    PredictOptions,
};
use fairser_core::Exec;

use crate::config::RunRecord;
use crate::{
    CliError, EnrollArgs, EvaluateArgs, MetricArgs, PredictArgs, SweepArgs, SynthArgs, TrainArgs,
};

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn jobs(n: usize) -> Result<Exec, CliError> {
    if n == 0 {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    Ok(Exec::from_jobs(n))
}

fn enrolment_for(
    variant: Variant,
    path: Option<&Path>,
    corpus: &Corpus,
) -> Result<Enrolment, CliError> {
    match (variant.uses_enrolment(), path) {
        (false, _) => Ok(Enrolment::default()),
        (true, None) => Err(CliError::Usage(format!(
            "variant {variant} needs --enrolment"
        ))),
        (true, Some(p)) => {
            let e = load_enrolment(p, corpus.classes)?;
            e.validate_against(corpus)?;
            Ok(e)
        }
    }
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let speakers: [usize; 3] = a
        .speakers
        .0
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage("--speakers takes three counts: train,dev,test".into()))?;
    let cfg = SynthConfig {
        speakers,
        per_speaker: a.per_speaker,
        classes: a.classes as usize,
        dim: a.dim,
        class_scale: a.class_scale,
        offset_scale: a.offset_scale,
        offset_sharing: a.offset_sharing,
        noise_scale: a.noise_scale,
        neutral_prob: a.neutral_prob,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = generate_synthetic(&cfg)?;
    save_corpus(&corpus, &a.out)?;
    RunRecord::new("synth")
        .set("speakers", &a.speakers)
        .set("per-speaker", a.per_speaker)
        .set("classes", a.classes)
        .set("dim", a.dim)
        .set("class-scale", a.class_scale)
        .set("offset-scale", a.offset_scale)
        .set("offset-sharing", a.offset_sharing)
        .set("noise-scale", a.noise_scale)
        .set("neutral-prob", a.neutral_prob)
        .set("seed", a.seed)
        .set("out", path_str(&a.out))
        .write_for(&a.out)
}

pub fn enroll(a: &EnrollArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&a.corpus)?;
    let enrolment = match a.split {
        Some(s) => build_enrolment_sets(&corpus, s),
        None => build_all_enrolment_sets(&corpus),
    };
    save_enrolment(&enrolment, corpus.classes, &a.out)?;
    let mut rec = RunRecord::new("enroll").set("corpus", path_str(&a.corpus));
    if let Some(split) = a.split {
        rec = rec.set("split", split);
    }
    rec.set("out", path_str(&a.out)).write_for(&a.out)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let exec = jobs(a.jobs)?;
    let corpus = load_corpus(&a.corpus)?;
    let enrolment = enrolment_for(a.variant, a.enrolment.as_deref(), &corpus)?;
    let config = ModelConfig {
        variant: a.variant,
        d_in: corpus.dim,
        d_emb: a.d_emb,
        encoder_hidden: a.encoder_hidden.0.clone(),
        heads: a.heads,
        use_projections: a.projections,
        classifier_hidden: a.classifier_hidden.0.clone(),
        classes: corpus.classes,
        seed: a.seed,
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let hp = Hparams {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        include_enrolled: a.include_enrolled,
    };
    let (state, log) = train_with(&corpus, &enrolment, config, &hp, exec)?;
    save_model(&state, &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.as_os_str().to_os_string();
        p.push(".log.csv");
        p.into()
    });
    write(&log_path, &log.to_csv())?;
    let mut rec = RunRecord::new("train")
        .set("corpus", path_str(&a.corpus))
        .set("variant", a.variant)
        .set("epochs", a.epochs)
        .set("lr", a.lr)
        .set("batch", a.batch)
        .set("d-emb", a.d_emb)
        .set("encoder-hidden", &a.encoder_hidden)
        .set("classifier-hidden", &a.classifier_hidden)
        .set("heads", a.heads)
        .set("projections", a.projections)
        .set("include-enrolled", a.include_enrolled)
        .set("seed", a.seed)
        .set("out", path_str(&a.out))
        .set("log", path_str(&log_path));
    if let Some(e) = &a.enrolment {
        rec = rec.set("enrolment", path_str(e));
    }
    rec.write_for(&a.out)
}

pub fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let exec = jobs(a.jobs)?;
    let state = load_model(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let enrolment = enrolment_for(state.variant(), a.enrolment.as_deref(), &corpus)?;
    let opts = PredictOptions {
        exec,
        include_enrolled: a.include_enrolled,
    };
    let records = run_predict(&state, &corpus, a.split, &enrolment, opts)?;
    write(
        &a.out,
        &fairser_core::fairness::predictions_to_csv(&records),
    )?;
    let mut rec = RunRecord::new("predict")
        .set("model", path_str(&a.model))
        .set("corpus", path_str(&a.corpus))
        .set("split", a.split)
        .set("include-enrolled", a.include_enrolled)
        .set("out", path_str(&a.out));
    if let Some(e) = &a.enrolment {
        rec = rec.set("enrolment", path_str(e));
    }
    rec.write_for(&a.out)
}

fn alpha_grid(m: &MetricArgs) -> Vec<f64> {
    m.alpha_grid
        .as_ref()
        .map_or_else(default_alpha_grid, |g| g.0.clone())
}

fn metric_record(rec: RunRecord, m: &MetricArgs) -> RunRecord {
    let rec = rec.set("classes", m.classes).set("iswf-mode", m.iswf_mode);
    match &m.alpha_grid {
        Some(g) => rec.set("alpha-grid", g),
        None => rec,
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let exec = jobs(a.jobs)?;
    if !(a.level > 0.0 && a.level < 1.0) {
        return Err(CliError::Usage("--level must lie in (0, 1)".into()));
    }
    let records = load_predictions(&a.predictions)?;
    let opts = ReportOptions {
        classes: a.metric.classes as usize,
        bootstrap: (a.bootstrap > 0).then_some(BootstrapConfig {
            resamples: a.bootstrap,
            level: a.level,
            seed: a.seed,
        }),
        mode: a.metric.iswf_mode,
        alpha_grid: alpha_grid(&a.metric),
        seed: a.seed,
    };
    let rep = report(&records, &opts, exec)?;
    write(&a.out, &rep.to_json())?;
    let rec = RunRecord::new("evaluate").set("predictions", path_str(&a.predictions));
    metric_record(rec, &a.metric)
        .set("bootstrap", a.bootstrap)
        .set("level", a.level)
        .set("seed", a.seed)
        .set("out", path_str(&a.out))
        .write_for(&a.out)
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let names: Vec<String> = match &a.names {
        Some(n) => n.0.clone(),
        None if a.predictions.len() == Variant::ALL.len() => Variant::ALL
            .iter()
            .map(|v| v.as_str().to_string())
            .collect(),
        None => a
            .predictions
            .iter()
            .map(|p| {
                p.file_stem()
                    .map_or_else(|| path_str(p), |s| s.to_string_lossy().into_owned())
            })
            .collect(),
    };
    if names.len() != a.predictions.len() {
        return Err(CliError::Usage(format!(
            "{} names for {} prediction files",
            names.len(),
            a.predictions.len()
        )));
    }
    let grid = alpha_grid(&a.metric);
    let mut curves = Vec::with_capacity(a.predictions.len());
    for p in &a.predictions {
        let records = load_predictions(p)?;
        let u = uar_per_speaker(&records, a.metric.classes as usize)?;
        curves.push(iswf_sweep(&u.values(), &grid, a.metric.iswf_mode)?);
    }
    write(&a.out, &sweep_csv(&names, &curves)?)?;
    let files: Vec<String> = a.predictions.iter().map(|p| path_str(p)).collect();
    let rec = RunRecord::new("sweep")
        .note(format!("inputs: {}", files.join(" ")))
        .set("names", names.join(","));
    metric_record(rec, &a.metric)
        .set("out", path_str(&a.out))
        .write_for(&a.out)
}

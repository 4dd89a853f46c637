//! One end-to-end experiment: pre-train, fine-tune under a regime, embed,
//! classify and evaluate.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dualzsl::autodiff::checkpoint::{named_tensors, write_tensors};
use dualzsl::autodiff::{ParamSet, Tensor};
use dualzsl::datagen::{pretext_dataset, SyntheticBenchmark};
use dualzsl::dataset::Dataset;
use dualzsl::dual_channel::{
    extract, pretrain, train_baseline, train_dual, ModelParams, TrainConfig, TrainHistory, AUX_HEAD, CUR_HEAD,
    EXTRACTOR,
};
use dualzsl::eval::{per_class_accuracy, project_2d, report_tsv, separability, EvalReport, Projection};
use dualzsl::taxonomy::{select_auxiliary, AuxiliarySelection, RelevanceLevel};
use dualzsl::zsl_head::{
    build_latent_trainset, predict, train_latent_classifier, train_vae, ClassifierConfig, VaeConfig, VaeParams,
};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Baseline,
    Low,
    Middle,
    High,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Baseline, Regime::Low, Regime::Middle, Regime::High];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Low => "low",
            Regime::Middle => "middle",
            Regime::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        Regime::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn level(self) -> Option<RelevanceLevel> {
        match self {
            Regime::Baseline => None,
            Regime::Low => Some(RelevanceLevel::Low),
            Regime::Middle => Some(RelevanceLevel::Middle),
            Regime::High => Some(RelevanceLevel::High),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The GZSL task carved out of a benchmark. Labels `0..n_seen` are seen
/// classes and `n_seen..n_seen + n_unseen` unseen classes, in split order.
#[derive(Clone, Debug)]
pub struct Task {
    pub class_ids: Vec<String>,
    pub n_seen: usize,
    pub seen_train: Dataset,
    pub seen_test: Dataset,
    pub unseen_test: Dataset,
    /// Attribute rows of the seen classes, indexed by label.
    pub seen_attrs: Tensor,
}

/// Hold out the last `test_fraction` of every seen class's samples, in file
/// order; every unseen sample is a test sample.
pub fn build_task(b: &SyntheticBenchmark, test_fraction: f64) -> Result<Task> {
    let seen = &b.split.seen;
    let unseen = &b.split.unseen;
    let n_seen = seen.len();
    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    for (label, id) in seen.iter().enumerate() {
        let rows: Vec<usize> = b.samples.rows_of(id).collect();
        let n_test = ((rows.len() as f64 * test_fraction).round() as usize).clamp(1, rows.len() - 1);
        let cut = rows.len() - n_test;
        train_rows.extend_from_slice(&rows[..cut]);
        train_labels.extend(std::iter::repeat_n(label, cut));
        test_rows.extend_from_slice(&rows[cut..]);
        test_labels.extend(std::iter::repeat_n(label, n_test));
    }
    let mut unseen_rows = Vec::new();
    let mut unseen_labels = Vec::new();
    for (i, id) in unseen.iter().enumerate() {
        let rows: Vec<usize> = b.samples.rows_of(id).collect();
        unseen_labels.extend(std::iter::repeat_n(n_seen + i, rows.len()));
        unseen_rows.extend(rows);
    }
    let n_classes = n_seen + unseen.len();
    let f = &b.samples.features;
    Ok(Task {
        class_ids: seen.iter().chain(unseen).cloned().collect(),
        n_seen,
        seen_train: Dataset::new(f.select_rows(&train_rows), train_labels, n_seen)?,
        seen_test: Dataset::new(f.select_rows(&test_rows), test_labels, n_classes)?,
        unseen_test: Dataset::new(f.select_rows(&unseen_rows), unseen_labels, n_classes)?,
        seen_attrs: b.semantics.gather(seen)?,
    })
}

/// Everything one run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub regime: Regime,
    pub seed: u64,
    pub report: EvalReport,
    pub history: TrainHistory,
    pub selection: Option<AuxiliarySelection>,
    pub model: ModelParams,
    pub vae: VaeParams,
    pub classifier: ParamSet,
    pub projection: Projection,
    pub class_ids: Vec<String>,
}

impl RunOutput {
    pub fn separability(&self) -> f64 {
        self.report.separability.unwrap_or(f64::NAN)
    }
}

/// The auxiliary training set of a regime: each selected class contributes
/// its first `quota` samples, labeled by selection order.
pub fn auxiliary_dataset(b: &SyntheticBenchmark, selection: &AuxiliarySelection) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (label, (id, quota)) in selection.entries.iter().enumerate() {
        let r: Vec<usize> = b.samples.rows_of(id).take(*quota).collect();
        labels.extend(std::iter::repeat_n(label, r.len()));
        rows.extend(r);
    }
    Ok(Dataset::new(
        b.samples.features.select_rows(&rows),
        labels,
        selection.entries.len(),
    )?)
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let mut data = a.features.data().to_vec();
    data.extend_from_slice(b.features.data());
    let labels = a.labels.iter().chain(&b.labels).copied().collect::<Vec<_>>();
    Ok(Dataset::new(
        Tensor::new(vec![labels.len(), a.width()], data)?,
        labels,
        a.n_classes.max(b.n_classes),
    )?)
}

fn rms(t: &Tensor) -> f64 {
    let ms = t.data().iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64;
    if ms > 0.0 {
        ms.sqrt()
    } else {
        1.0
    }
}

fn rescale(mut d: Dataset, scale: f64) -> Dataset {
    d.features.data_mut().iter_mut().for_each(|v| *v /= scale);
    d
}

fn featurize(extractor: &ParamSet, d: &Dataset) -> Result<Dataset> {
    Ok(Dataset::new(extract(extractor, &d.features)?, d.labels.clone(), d.n_classes)?)
}

/// Extractor and heads after pre-training and fine-tuning.
#[derive(Clone, Debug)]
pub struct FineTuned {
    pub model: ModelParams,
    pub history: TrainHistory,
    pub selection: Option<AuxiliarySelection>,
}

/// Pre-train on the pretext task, then fine-tune under `regime`.
pub fn fine_tune(b: &SyntheticBenchmark, task: &Task, cfg: &RunConfig, regime: Regime, seed: u64) -> Result<FineTuned> {
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let pre_cfg = TrainConfig {
        learning_rate: cfg.pretrain.learning_rate,
        epochs: cfg.pretrain.epochs,
        ..train_cfg.clone()
    };
    let pretext = pretext_dataset(
        b.feature_dim(),
        cfg.pretrain.classes,
        cfg.pretrain.samples_per_class,
        cfg.pretrain.spread,
        cfg.pretrain.noise,
        seed,
    )
    .context("pre-training")?;
    let mut model = ModelParams::init(b.feature_dim(), cfg.aux_classes, cfg.pretrain.classes, &train_cfg);
    pretrain(&mut model, &pretext, &pre_cfg).context("pre-training")?;
    let width = model.feature_width();
    ModelParams::reset_head(&mut model.cur_head, width, task.n_seen, seed);
    ModelParams::reset_head(&mut model.aux_head, width, cfg.aux_classes.max(1), seed.wrapping_add(1));

    let (history, selection) = match regime.level() {
        None => (train_baseline(&mut model, &task.seen_train, &train_cfg).context("fine-tuning")?, None),
        Some(level) => {
            let pool = b.pool_counts(level);
            let selection = select_auxiliary(
                &b.taxonomy,
                &b.split.seen,
                &pool,
                level,
                cfg.aux_classes,
                cfg.aux_per_class,
                seed,
            )
            .context("selecting auxiliary classes")?;
            let aux = auxiliary_dataset(b, &selection)?;
            let h = train_dual(&mut model, &aux, &task.seen_train, &train_cfg).context("dual-channel training")?;
            (h, Some(selection))
        }
    };
    Ok(FineTuned {
        model,
        history,
        selection,
    })
}

/// Extracted features of seen-test followed by unseen-test samples.
pub fn test_features(task: &Task, extractor: &ParamSet) -> Result<Dataset> {
    let seen = featurize(extractor, &task.seen_test).context("feature extraction")?;
    let unseen = featurize(extractor, &task.unseen_test).context("feature extraction")?;
    concat(&seen, &unseen)
}

/// Output of the embedding and classification stage.
#[derive(Clone, Debug)]
pub struct ZslOutcome {
    pub report: EvalReport,
    pub vae: VaeParams,
    pub classifier: ParamSet,
    pub projection: Projection,
}

/// Re-extract features with `extractor`, train the embedding and latent
/// classifier, and evaluate on seen-test and unseen-test samples.
pub fn zsl_stage(
    b: &SyntheticBenchmark,
    task: &Task,
    extractor: &ParamSet,
    cfg: &RunConfig,
    method: &str,
    seed: u64,
) -> Result<ZslOutcome> {
    let seen_train = featurize(extractor, &task.seen_train).context("feature extraction")?;
    let seen_test = featurize(extractor, &task.seen_test).context("feature extraction")?;
    let unseen_test = featurize(extractor, &task.unseen_test).context("feature extraction")?;
    let test = concat(&seen_test, &unseen_test)?;
    let fisher = separability(&test.features, &test.labels).context("separability")?;
    let projection = project_2d(&test.features, &test.labels).context("projection")?;

    // The embedding sees features rescaled to unit root-mean-square.
    let scale = rms(&seen_train.features);
    let (seen_train, seen_test, unseen_test) = (
        rescale(seen_train, scale),
        rescale(seen_test, scale),
        rescale(unseen_test, scale),
    );

    let vae_cfg = VaeConfig {
        seed,
        ..cfg.vae.clone()
    };
    let mut vae = VaeParams::init(seen_train.width(), b.semantics.width(), &vae_cfg);
    train_vae(&mut vae, &seen_train, &task.seen_attrs, &vae_cfg).context("VAE training")?;
    let latents = build_latent_trainset(&vae, &seen_train, &b.semantics, &b.split.unseen, cfg.draws, seed)
        .context("latent training set")?;
    let clf_cfg = ClassifierConfig {
        seed,
        ..cfg.classifier.clone()
    };
    let (classifier, _) = train_latent_classifier(&latents, &clf_cfg).context("latent classifier")?;

    let seen_pred = predict(&vae, &classifier, &seen_test.features).context("prediction")?;
    let unseen_pred = predict(&vae, &classifier, &unseen_test.features).context("prediction")?;
    let seen_classes: Vec<usize> = (0..task.n_seen).collect();
    let unseen_classes: Vec<usize> = (task.n_seen..task.class_ids.len()).collect();
    let seen_acc = per_class_accuracy(&seen_pred, &seen_test.labels, &seen_classes).context("evaluation")?;
    let unseen_acc = per_class_accuracy(&unseen_pred, &unseen_test.labels, &unseen_classes).context("evaluation")?;
    let ids = &task.class_ids;
    let mut report = EvalReport::new(method, &seen_acc, &unseen_acc, &|c| ids[c].clone())?;
    report.separability = Some(fisher);
    Ok(ZslOutcome {
        report,
        vae,
        classifier,
        projection,
    })
}

/// Run one regime with one seed.
pub fn run_regime(b: &SyntheticBenchmark, cfg: &RunConfig, regime: Regime, seed: u64) -> Result<RunOutput> {
    let task = build_task(b, cfg.test_fraction).context("building the task split")?;
    let tuned = fine_tune(b, &task, cfg, regime, seed)?;
    let zsl = zsl_stage(b, &task, &tuned.model.extractor, cfg, regime.name(), seed)?;
    Ok(RunOutput {
        regime,
        seed,
        report: zsl.report,
        history: tuned.history,
        selection: tuned.selection,
        model: tuned.model,
        vae: zsl.vae,
        classifier: zsl.classifier,
        projection: zsl.projection,
        class_ids: task.class_ids,
    })
}

pub const REPORT_FILE: &str = "report.tsv";
pub const PER_CLASS_FILE: &str = "per_class.tsv";
pub const HISTORY_FILE: &str = "history.tsv";
pub const PROJECTION_FILE: &str = "projection.tsv";
pub const SEPARABILITY_FILE: &str = "separability.tsv";
pub const SELECTION_FILE: &str = "selection.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Parameter blocks of a run, as checkpoint records.
pub fn checkpoint_tensors(out: &RunOutput) -> Vec<(String, Tensor)> {
    named_tensors(&[
        (EXTRACTOR, &out.model.extractor),
        (AUX_HEAD, &out.model.aux_head),
        (CUR_HEAD, &out.model.cur_head),
        ("visual_encoder", &out.vae.visual_encoder),
        ("visual_decoder", &out.vae.visual_decoder),
        ("semantic_encoder", &out.vae.semantic_encoder),
        ("semantic_decoder", &out.vae.semantic_decoder),
        ("classifier", &out.classifier),
    ])
}

/// Write every artifact of a run into `dir`.
pub fn write_run(out: &RunOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    };
    write(REPORT_FILE, report_tsv(std::slice::from_ref(&out.report)))?;
    let mut per_class = String::from("class_id\taccuracy\n");
    for (id, acc) in &out.report.per_class {
        per_class.push_str(&format!("{id}\t{acc}\n"));
    }
    write(PER_CLASS_FILE, per_class)?;
    write(HISTORY_FILE, out.history.to_tsv())?;
    let ids = &out.class_ids;
    write(PROJECTION_FILE, out.projection.to_tsv(&|c| ids[c].clone()))?;
    write(
        SEPARABILITY_FILE,
        format!("method\tfisher\n{}\t{}\n", out.report.method, out.separability()),
    )?;
    match &out.selection {
        Some(s) => write(SELECTION_FILE, s.to_tsv())?,
        None => {
            let stale = dir.join(SELECTION_FILE);
            if stale.exists() {
                fs::remove_file(&stale).with_context(|| format!("removing {}", stale.display()))?;
            }
        }
    }
    let mut bytes = Vec::new();
    write_tensors(&mut bytes, &checkpoint_tensors(out))?;
    fs::write(dir.join(CHECKPOINT_FILE), bytes).context("writing checkpoint")?;
    Ok(())
}

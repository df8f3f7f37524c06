//! Stage functions and the end-to-end pipeline. Every stage reads its inputs
//! from the output directory, so stages can run one at a time.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{Candidates, DatasetSource, ExperimentConfig};
use super::report::{
    cui_rows, read_csv, read_json, write_csv, write_json, CdeRow, Chart, CuiRow, HistoryRow, Marker, MarkerShape, Series,
};
use crate::bottleneck::{
    assemble, disassemble, eligible_layers, finetune, load_split, save_split, spec_for_layer, train_ae, AePhase,
    Autoencoder, Bottleneck, SplitSidecar,
};
use crate::checkpoint;
use crate::data::{load_idx, synth_dataset, DataError, Dataset, SplitTag};
use crate::interpret::{cde_candidates, cui_report, rank_correlation, select_split_points, CuiOptions, Method};
use crate::model::{build_model, Architecture, Metadata, Model};
use crate::runtime::{sweep_report, SweepEntry, SweepRow};
use crate::stats::{classify_all, per_class_f1_report, stats_resample, F1Row, ResampleStats};
use crate::train::{accuracy, accuracy_with, train_classifier};

pub const THREADS_ENV: &str = "ISPLIT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Cui,
    Split,
    Retrain,
    Sweep,
    Stats,
    Plot,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Train,
        Stage::Cui,
        Stage::Split,
        Stage::Retrain,
        Stage::Sweep,
        Stage::Stats,
        Stage::Plot,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Train => "train",
            Stage::Cui => "cui",
            Stage::Split => "split",
            Stage::Retrain => "retrain",
            Stage::Sweep => "sweep",
            Stage::Stats => "stats",
            Stage::Plot => "plot",
        })
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

fn at<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.ispl")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("train_history.csv")
    }
    pub fn cui(&self) -> PathBuf {
        self.root.join("cui.csv")
    }
    pub fn gradients(&self) -> PathBuf {
        self.root.join("gradients.csv")
    }
    pub fn cde(&self) -> PathBuf {
        self.root.join("cde.csv")
    }
    pub fn candidates(&self) -> PathBuf {
        self.root.join("candidates.json")
    }
    pub fn split_dir(&self, layer: usize) -> PathBuf {
        self.root.join("splits").join(format!("layer_{layer:02}"))
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("stats.json")
    }
    pub fn f1(&self) -> PathBuf {
        self.root.join("f1.csv")
    }
    pub fn cui_svg(&self) -> PathBuf {
        self.root.join("cui.svg")
    }
    pub fn accuracy_svg(&self) -> PathBuf {
        self.root.join("accuracy.svg")
    }
}

/// CUI worker threads from the environment; 0 means the global pool.
pub fn cui_threads() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0)
}

/// Loads or generates the dataset and tags the train/val/test partitions.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let data = match &cfg.dataset {
        DatasetSource::Synth {
            class_count,
            per_class,
            image_size,
            profile,
            seed,
        } => synth_dataset(*class_count, *per_class, *image_size, *profile, *seed)?,
        DatasetSource::Idx { images, labels } => load_idx(images, labels)?,
    };
    Ok(data.with_split(cfg.val_fraction, cfg.test_fraction, cfg.seed)?)
}

/// Images used to measure split accuracy: the test partition, or the
/// validation partition when no test data is configured.
fn eval_set(data: &Dataset) -> (Dataset, &'static str) {
    let test = data.subset(SplitTag::Test);
    if test.is_empty() {
        (data.subset(SplitTag::Val), "val")
    } else {
        (test, "test")
    }
}

fn load_model(layout: &Layout, stage: Stage) -> Result<Model<f32>, HarnessError> {
    checkpoint::load(&layout.model()).map_err(|e| HarnessError::Stage {
        stage,
        message: format!("{}: {e} (run the train stage first)", layout.model().display()),
    })
}

fn ensure_dir(path: &Path, stage: Stage) -> Result<(), HarnessError> {
    fs::create_dir_all(path).map_err(at(stage))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub val_accuracy: f64,
}

pub fn stage_train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome, HarnessError> {
    let stage = Stage::Train;
    let layout = Layout::new(&cfg.output_dir);
    ensure_dir(&layout.root, stage)?;
    let arch = Architecture::resolve(&cfg.architecture).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut model: Model<f32> = build_model(&arch, data.image_shape(), data.class_count, cfg.seed).map_err(at(stage))?;
    let train = data.subset(SplitTag::Train);
    let tcfg = cfg.train.base.with_seed(cfg.seed);
    info!("training base model on {} images for {} epochs", train.len(), tcfg.epochs);
    let history = train_classifier(&mut model, &train.images, &train.labels, &tcfg).map_err(at(stage))?;
    model.metadata = Metadata {
        dataset_id: data.id.clone(),
        seed: cfg.seed,
        epochs: tcfg.epochs,
        role: "base".into(),
    };
    checkpoint::save(&model, &layout.model()).map_err(at(stage))?;
    let rows: Vec<HistoryRow> = history.iter().map(HistoryRow::from).collect();
    write_csv(&layout.history(), &rows).map_err(at(stage))?;
    let val = data.subset(SplitTag::Val);
    let val_accuracy = accuracy(&model, &val.images, &val.labels).map_err(at(stage))?;
    info!("base model validation accuracy {val_accuracy:.4}");
    Ok(TrainOutcome {
        epochs: tcfg.epochs,
        final_loss: history.last().map(|h| h.loss),
        val_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mode: String,
    /// Layers that can host a bottleneck.
    pub eligible: Vec<usize>,
    /// CUI local maxima over all evaluated layers, best first.
    pub cui_ranked: Vec<usize>,
    pub cde: Vec<usize>,
    /// Layers that get split artifacts, in the order above.
    pub selected: Vec<usize>,
}

impl CandidateSet {
    /// Highest-ranked CUI maximum that can host a bottleneck.
    pub fn cui_argmax(&self) -> Option<usize> {
        self.cui_ranked.iter().copied().find(|l| self.eligible.contains(l))
    }
}

pub fn stage_cui(cfg: &ExperimentConfig, data: &Dataset) -> Result<CandidateSet, HarnessError> {
    let stage = Stage::Cui;
    let layout = Layout::new(&cfg.output_dir);
    let model = load_model(&layout, stage)?;
    let val = data.subset(SplitTag::Val);
    let opts = CuiOptions {
        method: cfg.cui.method,
        reduction: cfg.cui.reduction,
        class_subset: cfg.cui.class_subset.clone(),
        layers: None,
        parallelism: cui_threads(),
        dataset_id: data.id.clone(),
        class_balanced: cfg.cui.class_balanced,
    };
    let report = cui_report(&model, &val.images, &val.labels, &opts).map_err(at(stage))?;
    let mut rows = cui_rows(&report.general, "general");
    for (c, curve) in &report.per_class {
        rows.extend(cui_rows(curve, &format!("class:{c}")));
    }
    write_csv(&layout.cui(), &rows).map_err(at(stage))?;
    let baseline_opts = CuiOptions {
        method: Method::Gradients,
        ..opts
    };
    let baseline = cui_report(&model, &val.images, &val.labels, &baseline_opts).map_err(at(stage))?;
    write_csv(&layout.gradients(), &cui_rows(&baseline.general, "general")).map_err(at(stage))?;

    let sizes = model.layer_sizes();
    let cde = cde_candidates(&sizes);
    let cde_rows: Vec<CdeRow> = model
        .layers()
        .iter()
        .map(|l| CdeRow {
            layer_index: l.index,
            layer_name: l.name.clone(),
            output_elements: sizes[l.index],
            cde_candidate: cde.contains(&l.index),
        })
        .collect();
    write_csv(&layout.cde(), &cde_rows).map_err(at(stage))?;

    let eligible = eligible_layers(&model);
    let cui_ranked = select_split_points(&report.general);
    let (mode, selected) = match &cfg.candidates {
        Candidates::AutoCui { max } => {
            let mut s: Vec<usize> = cui_ranked.iter().copied().filter(|l| eligible.contains(l)).collect();
            if let Some(max) = max {
                s.truncate(*max);
            }
            ("auto-cui", s)
        }
        Candidates::AutoCde => ("auto-cde", cde.iter().copied().filter(|l| eligible.contains(l)).collect()),
        Candidates::Explicit { layers } => {
            if let Some(bad) = layers.iter().find(|l| !eligible.contains(l)) {
                return Err(HarnessError::Config(format!(
                    "explicit candidate layer {bad} cannot host a bottleneck (eligible: {eligible:?})"
                )));
            }
            let mut seen = BTreeSet::new();
            ("explicit", layers.iter().copied().filter(|l| seen.insert(*l)).collect())
        }
    };
    if selected.is_empty() {
        return Err(HarnessError::Stage {
            stage,
            message: format!("no eligible split candidates in {mode} mode"),
        });
    }
    let set = CandidateSet {
        mode: mode.into(),
        eligible,
        cui_ranked,
        cde,
        selected,
    };
    write_json(&layout.candidates(), &set).map_err(at(stage))?;
    info!("split candidates {:?}", set.selected);
    Ok(set)
}

fn load_candidates(layout: &Layout, stage: Stage) -> Result<CandidateSet, HarnessError> {
    read_json(&layout.candidates()).map_err(|e| HarnessError::Stage {
        stage,
        message: format!("{e} (run the cui stage first)"),
    })
}

/// Builds a bottleneck at every selected layer and trains it on the frozen base model.
pub fn stage_split(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<PathBuf>, HarnessError> {
    let stage = Stage::Split;
    let layout = Layout::new(&cfg.output_dir);
    let model = load_model(&layout, stage)?;
    let set = load_candidates(&layout, stage)?;
    let train = data.subset(SplitTag::Train);
    let mut dirs = Vec::new();
    for &layer in &set.selected {
        let spec = spec_for_layer(&model, layer, cfg.compression_rate).map_err(at(stage))?;
        let mut ae = Autoencoder::new(spec, cfg.seed).map_err(at(stage))?;
        info!("layer {layer}: training bottleneck for {} epochs", cfg.train.ae.epochs);
        let history = train_ae(&model, &mut ae, &train.images, &cfg.train.ae.with_seed(cfg.seed)).map_err(at(stage))?;
        let phase = ae.phase;
        let plan = assemble(&model, &Bottleneck::Autoencoder(ae)).map_err(at(stage))?;
        let mut sidecar = SplitSidecar::describe(&model, &plan).map_err(at(stage))?;
        sidecar.ae_history = history;
        sidecar.phase = Some(phase);
        let dir = layout.split_dir(layer);
        save_split(&dir, &plan, &sidecar).map_err(at(stage))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// End-to-end fine-tuning of every split produced by the split stage.
pub fn stage_retrain(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<PathBuf>, HarnessError> {
    let stage = Stage::Retrain;
    let layout = Layout::new(&cfg.output_dir);
    let set = load_candidates(&layout, stage)?;
    let train = data.subset(SplitTag::Train);
    let (eval, _) = eval_set(data);
    let mut dirs = Vec::new();
    for &layer in &set.selected {
        let dir = layout.split_dir(layer);
        let (plan, mut sidecar) = load_split(&dir).map_err(at(stage))?;
        let phase = sidecar.phase.unwrap_or(AePhase::Initialized);
        let (mut model, bottleneck) = disassemble(&plan, phase).map_err(at(stage))?;
        let Bottleneck::Autoencoder(mut ae) = bottleneck else {
            return Err(HarnessError::Stage {
                stage,
                message: format!("{} holds no bottleneck", dir.display()),
            });
        };
        info!("layer {layer}: fine-tuning for {} epochs", cfg.train.finetune.epochs);
        let history = finetune(
            &mut model,
            &mut ae,
            &train.images,
            &train.labels,
            &cfg.train.finetune.with_seed(cfg.seed),
            false,
        )
        .map_err(at(stage))?;
        sidecar.phase = Some(ae.phase);
        let plan = assemble(&model, &Bottleneck::Autoencoder(ae)).map_err(at(stage))?;
        sidecar.finetune_history = history;
        sidecar.accuracy = Some(accuracy_with(|x| plan.predict(x), &eval.images, &eval.labels).map_err(at(stage))?);
        save_split(&dir, &plan, &sidecar).map_err(at(stage))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub layer: usize,
    pub layer_name: String,
    pub cui_value: f64,
    pub accuracy: f64,
    pub raw_bytes: usize,
    pub encoded_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset_id: String,
    pub architecture: String,
    pub seed: u64,
    pub compression_rate: f64,
    pub evaluated_on: String,
    pub base_accuracy: f64,
    pub candidates: Vec<CandidateResult>,
    pub cui_argmax_layer: Option<usize>,
    pub best_accuracy_layer: Option<usize>,
    /// Spearman rho between CUI values and split accuracies over the candidates.
    pub spearman_rho: Option<f64>,
    pub spearman_note: Option<String>,
}

fn general_cui(layout: &Layout, stage: Stage) -> Result<Vec<CuiRow>, HarnessError> {
    let rows: Vec<CuiRow> = read_csv(&layout.cui()).map_err(at(stage))?;
    Ok(rows.into_iter().filter(|r| r.scope == "general").collect())
}

pub fn stage_sweep(cfg: &ExperimentConfig, data: &Dataset) -> Result<Summary, HarnessError> {
    let stage = Stage::Sweep;
    let layout = Layout::new(&cfg.output_dir);
    let model = load_model(&layout, stage)?;
    let set = load_candidates(&layout, stage)?;
    let cui = general_cui(&layout, stage)?;
    let (eval, eval_name) = eval_set(data);
    let base_accuracy = accuracy(&model, &eval.images, &eval.labels).map_err(at(stage))?;
    let mut entries = Vec::new();
    for &layer in &set.selected {
        let (plan, sidecar) = load_split(&layout.split_dir(layer)).map_err(at(stage))?;
        let acc = accuracy_with(|x| plan.predict(x), &eval.images, &eval.labels).map_err(at(stage))?;
        entries.push(SweepEntry {
            layer,
            layer_name: sidecar.split_layer_name.clone(),
            raw_bytes: sidecar.raw_layer_elements * 4,
            encoded_bytes: plan.payload_bytes(),
            accuracy: acc,
        });
    }
    let rows = sweep_report(&entries, &cfg.channel);
    write_csv(&layout.sweep(), &rows).map_err(at(stage))?;

    let candidates: Vec<CandidateResult> = rows
        .iter()
        .map(|r| {
            let cui_value = cui
                .iter()
                .find(|c| c.layer_index == r.layer)
                .map(|c| c.cui_value)
                .ok_or_else(|| HarnessError::Stage {
                    stage,
                    message: format!("cui.csv has no value for layer {}", r.layer),
                })?;
            Ok(CandidateResult {
                layer: r.layer,
                layer_name: r.layer_name.clone(),
                cui_value,
                accuracy: r.accuracy,
                raw_bytes: r.raw_bytes,
                encoded_bytes: r.encoded_bytes,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let xs: Vec<f64> = candidates.iter().map(|c| c.cui_value).collect();
    let ys: Vec<f64> = candidates.iter().map(|c| c.accuracy).collect();
    let (spearman_rho, spearman_note) = match rank_correlation(&xs, &ys) {
        Ok(r) => (Some(r), None),
        Err(e) => {
            warn!("spearman rho undefined: {e}");
            (None, Some(e.to_string()))
        }
    };
    let best_accuracy_layer = candidates
        .iter()
        .fold(None::<&CandidateResult>, |best, c| match best {
            Some(b) if b.accuracy >= c.accuracy => Some(b),
            _ => Some(c),
        })
        .map(|c| c.layer);
    let summary = Summary {
        dataset_id: data.id.clone(),
        architecture: cfg.architecture.clone(),
        seed: cfg.seed,
        compression_rate: cfg.compression_rate,
        evaluated_on: eval_name.into(),
        base_accuracy,
        candidates,
        cui_argmax_layer: set.cui_argmax(),
        best_accuracy_layer,
        spearman_rho,
        spearman_note,
    };
    write_json(&layout.summary(), &summary).map_err(at(stage))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub layer: usize,
    pub stats: ResampleStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub base: ResampleStats,
    pub splits: Vec<SplitStats>,
    /// Split compared against the base model in `f1.csv`.
    pub f1_split_layer: usize,
    pub f1_rank_correlation: Option<f64>,
    pub f1_absent_classes: Vec<usize>,
}

pub fn stage_stats(cfg: &ExperimentConfig, data: &Dataset) -> Result<StatsReport, HarnessError> {
    let stage = Stage::Stats;
    let layout = Layout::new(&cfg.output_dir);
    let model = load_model(&layout, stage)?;
    let set = load_candidates(&layout, stage)?;
    let val = data.subset(SplitTag::Val);
    let s = &cfg.stats;
    let base = stats_resample(&model, &val.images, &val.labels, s.sample_size, s.trials, s.seed).map_err(at(stage))?;
    let mut splits = Vec::new();
    for &layer in &set.selected {
        let (plan, _) = load_split(&layout.split_dir(layer)).map_err(at(stage))?;
        let stats = stats_resample(&plan, &val.images, &val.labels, s.sample_size, s.trials, s.seed).map_err(at(stage))?;
        splits.push(SplitStats { layer, stats });
    }
    let f1_layer = set.cui_argmax().filter(|l| set.selected.contains(l)).unwrap_or(set.selected[0]);
    let (plan, _) = load_split(&layout.split_dir(f1_layer)).map_err(at(stage))?;
    let (eval, _) = eval_set(data);
    let before = classify_all(&model, &eval.images).map_err(at(stage))?;
    let after = classify_all(&plan, &eval.images).map_err(at(stage))?;
    let f1 = per_class_f1_report(&before, &after, &eval.labels, data.class_count).map_err(at(stage))?;
    write_csv::<F1Row>(&layout.f1(), &f1.rows).map_err(at(stage))?;
    let report = StatsReport {
        base,
        splits,
        f1_split_layer: f1_layer,
        f1_rank_correlation: f1.rank_correlation,
        f1_absent_classes: f1.absent_classes,
    };
    write_json(&layout.stats(), &report).map_err(at(stage))?;
    Ok(report)
}

/// Writes `cui.svg` and, when a sweep exists, `accuracy.svg`.
pub fn stage_plot(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let stage = Stage::Plot;
    let layout = Layout::new(&cfg.output_dir);
    let cui = general_cui(&layout, stage)?;
    let set = load_candidates(&layout, stage)?;
    let value = |l: usize| cui.iter().find(|r| r.layer_index == l).map(|r| r.cui_value);
    let ticks: Vec<(f64, String)> = cui.iter().map(|r| (r.layer_index as f64, r.layer_name.clone())).collect();
    let mut markers = Vec::new();
    for &l in &set.cde {
        if let Some(y) = value(l) {
            markers.push(Marker {
                x: l as f64,
                y,
                shape: MarkerShape::Square,
                color: "#1f77b4",
            });
        }
    }
    for &l in &set.cui_ranked {
        if let Some(y) = value(l) {
            let extra = !set.cde.contains(&l);
            markers.push(Marker {
                x: l as f64,
                y,
                shape: if extra { MarkerShape::Star } else { MarkerShape::Circle },
                color: "#d62728",
            });
        }
    }
    let reduction = cui.first().map_or_else(String::new, |r| r.reduction.clone());
    let chart = Chart {
        title: "CUI curve".into(),
        x_label: "layer".into(),
        y_label: format!("CUI ({reduction})"),
        series: vec![Series {
            label: "CUI".into(),
            points: cui.iter().map(|r| (r.layer_index as f64, r.cui_value)).collect(),
            color: "#222",
            dashed: false,
        }],
        markers,
        x_ticks: ticks.clone(),
        references: Vec::new(),
    };
    fs::write(layout.cui_svg(), chart.to_svg()).map_err(at(stage))?;
    let mut written = vec![layout.cui_svg()];
    if layout.sweep().is_file() {
        let rows: Vec<SweepRow> = read_csv(&layout.sweep()).map_err(at(stage))?;
        let summary: Option<Summary> = read_json(&layout.summary()).ok();
        let chart = Chart {
            title: "Accuracy after splitting".into(),
            x_label: "split layer".into(),
            y_label: "accuracy".into(),
            series: vec![Series {
                label: "split accuracy".into(),
                points: rows.iter().map(|r| (r.layer as f64, r.accuracy)).collect(),
                color: "#9467bd",
                dashed: true,
            }],
            markers: Vec::new(),
            x_ticks: ticks,
            references: summary.map(|s| vec![(s.base_accuracy, "unsplit".to_string())]).unwrap_or_default(),
        };
        fs::write(layout.accuracy_svg(), chart.to_svg()).map_err(at(stage))?;
        written.push(layout.accuracy_svg());
    }
    Ok(written)
}

/// Runs one stage against the configured output directory.
pub fn run_stage(cfg: &ExperimentConfig, data: &Dataset, stage: Stage) -> Result<(), HarnessError> {
    match stage {
        Stage::Train => stage_train(cfg, data).map(drop),
        Stage::Cui => stage_cui(cfg, data).map(drop),
        Stage::Split => stage_split(cfg, data).map(drop),
        Stage::Retrain => stage_retrain(cfg, data).map(drop),
        Stage::Sweep => stage_sweep(cfg, data).map(drop),
        Stage::Stats => stage_stats(cfg, data).map(drop),
        Stage::Plot => stage_plot(cfg).map(drop),
    }
}

/// Every stage in order. Outputs of completed stages stay on disk if a later stage fails.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    cfg.validate().map_err(HarnessError::Config)?;
    let data = load_data(cfg)?;
    let layout = Layout::new(&cfg.output_dir);
    ensure_dir(&layout.root, Stage::Train)?;
    fs::write(layout.config(), cfg.to_json()).map_err(at(Stage::Train))?;
    for stage in Stage::ALL {
        info!("stage {stage}");
        run_stage(cfg, &data, stage)?;
    }
    Ok(layout.root)
}

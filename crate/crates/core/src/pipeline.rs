// SPDX-License-Identifier: Apache-2.0

//! End-to-end driver: load, project, propose, classify, paint, evaluate.
//!
//! Scans are processed independently and results are emitted in scan order,
//! so detections and metrics do not depend on the worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::classifier::{predict, InstanceClassifier, Model};
use crate::config::{InstanceMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::features::make_batch;
use crate::instance::{cluster, gt_instances, remove_ground, ClusterParams, GroundParams, InstanceProposal};
use crate::metrics::{Evaluator, InstanceSet, MetricsReport};
use crate::par::{self, Execution};
use crate::pointcloud::{load_labels, load_scan, ClassId, ClassMap, RawLabel, Scan};
use crate::range_image::{build, select_channels, ChannelConfig, ProjectionConfig};

/// Everything `process_scan` needs, resolved from a [`PipelineConfig`].
#[derive(Debug, Clone)]
pub struct ScanSettings {
    pub projection: ProjectionConfig,
    pub ground: GroundParams,
    pub cluster: ClusterParams,
    pub channels: ChannelConfig,
    pub patch_side: usize,
    pub instances: InstanceMode,
    pub classes: ClassMap,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            projection: ProjectionConfig::default(),
            ground: GroundParams::default(),
            cluster: ClusterParams::default(),
            channels: ChannelConfig::REFERENCE,
            patch_side: crate::features::DEFAULT_PATCH_SIDE,
            instances: InstanceMode::Clustered,
            classes: ClassMap::default(),
        }
    }
}

impl ScanSettings {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let classes = match &cfg.dataset.class_map {
            Some(p) => ClassMap::load(p).map_err(|e| Error::Config(e.to_string()))?,
            None => ClassMap::default(),
        };
        Ok(Self {
            projection: cfg.projection,
            ground: cfg.ground,
            cluster: cfg.cluster,
            channels: cfg.channel_config()?,
            patch_side: cfg.features.patch_side,
            instances: cfg.dataset.instances,
            classes,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Index of the proposal within its scan.
    pub instance_id: usize,
    pub class: ClassId,
    pub confidence: f32,
    pub point_indices: Vec<u32>,
}

impl Detection {
    /// `instance_id class confidence n_points point_indices...`
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {} {:.6} {}",
            self.instance_id,
            self.class,
            self.confidence,
            self.point_indices.len()
        );
        for i in &self.point_indices {
            let _ = write!(s, " {i}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub scan_id: String,
    pub proposals: usize,
    pub detections: Vec<Detection>,
    /// One class per scan point.
    pub predicted: Vec<ClassId>,
    /// Present when labels were supplied.
    pub evaluation: Option<Evaluator>,
}

impl ScanResult {
    pub fn detections_text(&self) -> String {
        let mut s = String::new();
        for d in &self.detections {
            s.push_str(&d.to_line());
            s.push('\n');
        }
        s
    }
}

pub fn propose(
    scan: &Scan,
    labels: Option<&[RawLabel]>,
    settings: &ScanSettings,
    exec: Execution,
) -> Result<(crate::range_image::RangeImage, Vec<InstanceProposal>)> {
    let img = build(scan, &settings.projection, exec)?;
    let proposals = match settings.instances {
        InstanceMode::Clustered => {
            let ground = remove_ground(&img, &settings.ground);
            cluster(&img, &ground, &settings.cluster)?
        }
        InstanceMode::Gt => {
            let labels = labels
                .ok_or_else(|| Error::Contract("gt instance mode needs labels".into()))?;
            let labeled = crate::pointcloud::LabeledScan::new(scan.clone(), labels.to_vec())?;
            gt_instances(&labeled, &img, &settings.classes)?
        }
    };
    Ok((img, proposals))
}

/// Ground-truth things of a labeled scan over all of its points.
pub fn gt_instance_sets(labels: &[RawLabel], classes: &ClassMap) -> Vec<InstanceSet> {
    let mut order: Vec<(ClassId, u16)> = Vec::new();
    let mut groups: std::collections::HashMap<(ClassId, u16), Vec<u32>> = Default::default();
    for (i, l) in labels.iter().enumerate() {
        let class = classes.remap(l.semantic);
        if class == ClassId::None {
            continue;
        }
        groups
            .entry((class, l.instance))
            .or_insert_with(|| {
                order.push((class, l.instance));
                Vec::new()
            })
            .push(i as u32);
    }
    order
        .into_iter()
        .enumerate()
        .map(|(id, key)| InstanceSet::new(id, key.0, groups.remove(&key).unwrap()))
        .collect()
}

/// Runs one scan through every stage. Points outside every proposal, and
/// points of proposals classified None, are labeled None.
pub fn process_scan<C: InstanceClassifier + ?Sized>(
    scan: &Scan,
    labels: Option<&[RawLabel]>,
    settings: &ScanSettings,
    classifier: &C,
    exec: Execution,
) -> Result<ScanResult> {
    if let Some(l) = labels {
        if l.len() != scan.len() {
            return Err(Error::Contract(format!(
                "{} labels for {} points",
                l.len(),
                scan.len()
            )));
        }
    }
    let (img, proposals) = propose(scan, labels, settings, exec)?;
    let mut predicted = vec![ClassId::None; scan.len()];
    let mut detections = Vec::new();
    if !proposals.is_empty() {
        let stack = select_channels(&img, &settings.channels)?;
        let batch = make_batch(&proposals, &stack, scan, settings.patch_side, exec)?;
        let scores = classifier.classify(&batch, exec)?;
        if scores.len() != proposals.len() {
            return Err(Error::Contract(format!(
                "classifier returned {} scores for {} patches",
                scores.len(),
                proposals.len()
            )));
        }
        for (i, (proposal, s)) in proposals.iter().zip(&scores).enumerate() {
            let (class, confidence) = predict(s);
            if class == ClassId::None {
                continue;
            }
            for &p in &proposal.point_indices {
                predicted[p as usize] = class;
            }
            detections.push(Detection {
                instance_id: i,
                class,
                confidence,
                point_indices: proposal.point_indices.clone(),
            });
        }
    }
    let evaluation = match labels {
        Some(labels) => {
            let gt: Vec<ClassId> = labels.iter().map(|l| settings.classes.remap(l.semantic)).collect();
            let preds: Vec<InstanceSet> = detections
                .iter()
                .map(|d| InstanceSet::new(d.instance_id, d.class, d.point_indices.clone()))
                .collect();
            let gts = gt_instance_sets(labels, &settings.classes);
            Some(Evaluator::scan(&predicted, &gt, &preds, &gts)?)
        }
        None => None,
    };
    Ok(ScanResult {
        scan_id: scan.source_id.clone(),
        proposals: proposals.len(),
        detections,
        predicted,
        evaluation,
    })
}

/// A scan file with its optional label file, identified as `<seq>/<stem>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanEntry {
    pub id: String,
    pub scan: PathBuf,
    pub labels: Option<PathBuf>,
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Lists `<root>/sequences/<seq>/velodyne/*.bin` in sequence and stem order.
pub fn discover_scans(root: &Path, sequences: &[String], scans: &[String]) -> Result<Vec<ScanEntry>> {
    let seq_root = root.join("sequences");
    let seqs: Vec<String> = if sequences.is_empty() {
        if !seq_root.is_dir() {
            return Ok(Vec::new());
        }
        sorted_dir(&seq_root)?
            .into_iter()
            .filter(|p| p.is_dir())
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    } else {
        let mut s = sequences.to_vec();
        s.sort();
        s
    };
    let mut out = Vec::new();
    for seq in seqs {
        let velo = seq_root.join(&seq).join("velodyne");
        if !velo.is_dir() {
            log::warn!("sequence {seq}: no velodyne directory");
            continue;
        }
        for path in sorted_dir(&velo)? {
            if path.extension().is_none_or(|e| e != "bin") {
                continue;
            }
            let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
            if !scans.is_empty() && !scans.contains(&stem) {
                continue;
            }
            let label = seq_root.join(&seq).join("labels").join(format!("{stem}.label"));
            out.push(ScanEntry {
                id: format!("{seq}/{stem}"),
                scan: path,
                labels: label.is_file().then_some(label),
            });
        }
    }
    Ok(out)
}

pub fn load_entry(entry: &ScanEntry) -> Result<(Scan, Option<Vec<RawLabel>>)> {
    let mut scan = load_scan(&entry.scan)?;
    scan.source_id = entry.id.clone();
    match &entry.labels {
        Some(p) => {
            let labeled = load_labels(p, scan)?;
            Ok((labeled.scan, Some(labeled.labels)))
        }
        None => Ok((scan, None)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSummary {
    pub scan_id: String,
    pub proposals: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunTiming {
    pub total_seconds: f64,
    pub scans_per_second: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub processed: Vec<ScanSummary>,
    pub failed: Vec<(String, String)>,
    pub metrics: Option<MetricsReport>,
    pub timing: RunTiming,
}

impl RunReport {
    /// 0 when every scan succeeded, 1 when some failed or none were found.
    pub fn exit_code(&self) -> i32 {
        if self.processed.is_empty() || !self.failed.is_empty() {
            1
        } else {
            0
        }
    }
}

/// Where and how many scans to process.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
}

impl RunOptions {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            workers: (cfg.run.workers > 0).then_some(cfg.run.workers),
            output: cfg.run.output.clone(),
        }
    }
}

/// The network named by the config, or a seeded random one.
pub fn load_model(cfg: &PipelineConfig) -> Result<Model> {
    let model = match &cfg.model.weights {
        Some(p) => crate::classifier::weights::load_weights(p)?,
        None => crate::classifier::Architecture::with_channels(cfg.channel_config()?)
            .init_random(cfg.model.seed)?,
    };
    let want = cfg.channel_config()?;
    if model.meta.channels != want || model.meta.patch_side != cfg.features.patch_side {
        return Err(Error::Config(format!(
            "model expects channels {} and patch side {}, config has {} and {}",
            model.meta.channels, model.meta.patch_side, want, cfg.features.patch_side
        )));
    }
    Ok(model)
}

/// Processes `entries` in order with `options.workers` scan-level workers.
/// Per-scan failures are logged and counted; detections go to
/// `<output>/<seq>/<stem>.txt` and metrics to `<output>/metrics.txt`.
pub fn run_entries<C: InstanceClassifier + ?Sized>(
    entries: &[ScanEntry],
    settings: &ScanSettings,
    classifier: &C,
    options: &RunOptions,
) -> Result<RunReport> {
    let start = Instant::now();
    if let Some(out) = &options.output {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut report = RunReport {
        processed: Vec::new(),
        failed: Vec::new(),
        metrics: None,
        timing: RunTiming::default(),
    };
    let mut evaluator: Option<Evaluator> = None;
    let chunk = 4 * options.workers.unwrap_or_else(par::current_threads).max(1);
    par::with_threads(options.workers, || -> Result<()> {
        for group in entries.chunks(chunk) {
            let results = par::map(group, Execution::Parallel, |entry| {
                let (scan, labels) = load_entry(entry)?;
                process_scan(&scan, labels.as_deref(), settings, classifier, Execution::Parallel)
            });
            for (entry, result) in group.iter().zip(results) {
                match result {
                    Ok(r) => {
                        if let Some(out) = &options.output {
                            write_detections(out, &r)?;
                        }
                        if let Some(e) = &r.evaluation {
                            evaluator.get_or_insert_with(Evaluator::default).merge(e);
                        }
                        log::info!("{}: {} proposals, {} detections", r.scan_id, r.proposals, r.detections.len());
                        report.processed.push(ScanSummary {
                            scan_id: r.scan_id,
                            proposals: r.proposals,
                            detections: r.detections.len(),
                        });
                    }
                    Err(e) => {
                        log::error!("{}: {e}", entry.id);
                        report.failed.push((entry.id.clone(), e.to_string()));
                    }
                }
            }
        }
        Ok(())
    })?;
    report.metrics = evaluator.map(|e| e.report());
    if let (Some(out), Some(m)) = (&options.output, &report.metrics) {
        let path = out.join("metrics.txt");
        fs::write(&path, m.to_text()).map_err(|e| Error::io(&path, e))?;
    }
    let secs = start.elapsed().as_secs_f64();
    report.timing = RunTiming {
        total_seconds: secs,
        scans_per_second: if secs > 0.0 { report.processed.len() as f64 / secs } else { 0.0 },
    };
    Ok(report)
}

pub fn write_detections(out: &Path, result: &ScanResult) -> Result<()> {
    let path = out.join(format!("{}.txt", result.scan_id));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, result.detections_text()).map_err(|e| Error::io(&path, e))
}

/// Resolves the dataset, loads the model and runs every selected scan.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    cfg.check_paths()?;
    let root = cfg
        .dataset
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("dataset.root is not set".into()))?;
    let settings = ScanSettings::from_config(cfg)?;
    let model = load_model(cfg)?;
    let entries = discover_scans(root, &cfg.dataset.sequences, &cfg.dataset.scans)?;
    if entries.is_empty() {
        log::error!("found 0 scans under {}", root.display());
    }
    run_entries(&entries, &settings, &model, &RunOptions::from_config(cfg))
}

/// Proposals of one labeled scan turned into patches whose `gt_class` is the
/// majority class of their points.
pub fn labeled_patches(
    scan: &Scan,
    labels: &[RawLabel],
    settings: &ScanSettings,
    exec: Execution,
) -> Result<Vec<crate::features::Patch>> {
    let (img, mut proposals) = propose(scan, Some(labels), settings, exec)?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    for p in &mut proposals {
        if p.gt_class.is_none() {
            let mut votes = [0usize; ClassId::COUNT];
            for &i in &p.point_indices {
                votes[settings.classes.remap(labels[i as usize].semantic).index()] += 1;
            }
            let best = (0..ClassId::COUNT).rev().max_by_key(|&k| votes[k]).unwrap();
            p.gt_class = ClassId::from_index(best);
        }
    }
    let stack = select_channels(&img, &settings.channels)?;
    Ok(make_batch(&proposals, &stack, scan, settings.patch_side, exec)?.patches)
}

/// Wall-clock statistics of repeated forward passes, in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub n_instances: usize,
    pub threads: usize,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl BenchReport {
    pub fn from_samples(n_instances: usize, threads: usize, samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ms = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean_ms = if n == 0 { 0.0 } else { sorted.iter().sum::<f64>() / n as f64 };
        // Nearest rank.
        let p95_ms = if n == 0 { 0.0 } else { sorted[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1] };
        Self {
            n_instances,
            threads,
            samples_ms,
            median_ms,
            mean_ms,
            p95_ms,
        }
    }

    pub fn per_instance_ms(&self) -> f64 {
        self.median_ms / self.n_instances.max(1) as f64
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} instances, {} threads, {} runs: median {:.3} ms, mean {:.3} ms, p95 {:.3} ms, {:.4} ms per instance",
            self.n_instances,
            self.threads,
            self.samples_ms.len(),
            self.median_ms,
            self.mean_ms,
            self.p95_ms,
            self.per_instance_ms()
        )
    }
}

pub const BENCH_WARMUP: usize = 3;

/// Times `repetitions` forward passes over one batch of `n_instances` noise
/// patches after [`BENCH_WARMUP`] untimed passes. `threads` caps the worker
/// pool; `None` leaves it unlimited.
pub fn bench(model: &Model, n_instances: usize, threads: Option<usize>, repetitions: usize) -> Result<BenchReport> {
    if n_instances == 0 || repetitions == 0 {
        return Err(Error::Contract("bench needs at least one instance and one repetition".into()));
    }
    let batch = crate::synth::random_batch(n_instances, model.input_planes(), model.meta.patch_side, 0);
    par::with_threads(threads, || {
        let used = par::current_threads();
        for _ in 0..BENCH_WARMUP {
            model.classify(&batch, Execution::Parallel)?;
        }
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            let scores = model.classify(&batch, Execution::Parallel)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(scores);
        }
        Ok(BenchReport::from_samples(n_instances, used, samples))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassScores;
    use crate::features::Batch;
    use crate::synth::{archetype, Scene};

    /// Scores every patch with its ground-truth class.
    struct Oracle;

    impl InstanceClassifier for Oracle {
        fn classify(&self, batch: &Batch, _: Execution) -> Result<Vec<ClassScores>> {
            Ok(batch
                .patches
                .iter()
                .map(|p| ClassScores::certain(p.gt_class.unwrap_or_default()))
                .collect())
        }
    }

    struct Always(ClassId);

    impl InstanceClassifier for Always {
        fn classify(&self, batch: &Batch, _: Execution) -> Result<Vec<ClassScores>> {
            Ok(vec![ClassScores::certain(self.0); batch.len()])
        }
    }

    fn street() -> crate::pointcloud::LabeledScan {
        let mut scene = Scene::with_ground();
        scene.push(archetype::car(10.0, 0.0, 0.3, 1));
        scene.push(archetype::pedestrian(0.0, 8.0, 2));
        scene.push(archetype::pole(-6.0, -6.0));
        scene.render("street", &ProjectionConfig::default())
    }

    #[test]
    fn gt_mode_with_oracle_is_perfect() {
        let s = street();
        let settings = ScanSettings {
            instances: InstanceMode::Gt,
            ..Default::default()
        };
        let r = process_scan(&s.scan, Some(&s.labels), &settings, &Oracle, Execution::Sequential).unwrap();
        assert_eq!(r.detections.len(), 2);
        let report = r.evaluation.unwrap().report();
        assert_eq!(report.iou[ClassId::Car.index()], Some(1.0));
        assert_eq!(report.iou[ClassId::Pedestrian.index()], Some(1.0));
        assert_eq!(report.ap.ap, 1.0);
        assert_eq!(report.panoptic[ClassId::Car.index()].unwrap().pq, 1.0);
    }

    #[test]
    fn painting_partitions_points() {
        let s = street();
        let settings = ScanSettings::default();
        let r = process_scan(&s.scan, None, &settings, &Always(ClassId::Truck), Execution::Sequential).unwrap();
        assert!(r.proposals >= 3);
        let mut painted = 0;
        for d in &r.detections {
            for &p in &d.point_indices {
                assert_eq!(r.predicted[p as usize], ClassId::Truck);
            }
            painted += d.point_indices.len();
        }
        assert_eq!(r.predicted.iter().filter(|&&c| c == ClassId::Truck).count(), painted);

        let r = process_scan(&s.scan, None, &settings, &Always(ClassId::None), Execution::Sequential).unwrap();
        assert!(r.detections.is_empty());
        assert!(r.predicted.iter().all(|&c| c == ClassId::None));
    }

    #[test]
    fn gt_mode_without_labels_fails() {
        let s = street();
        let settings = ScanSettings {
            instances: InstanceMode::Gt,
            ..Default::default()
        };
        assert!(process_scan(&s.scan, None, &settings, &Oracle, Execution::Sequential).is_err());
    }

    #[test]
    fn detection_line_format() {
        let d = Detection {
            instance_id: 3,
            class: ClassId::Bike,
            confidence: 0.75,
            point_indices: vec![4, 9],
        };
        assert_eq!(d.to_line(), "3 Bike 0.750000 2 4 9");
    }

    #[test]
    fn bench_statistics() {
        let r = BenchReport::from_samples(1, 1, vec![4.0]);
        assert_eq!((r.median_ms, r.mean_ms, r.p95_ms), (4.0, 4.0, 4.0));
        let r = BenchReport::from_samples(10, 1, (1..=20).map(f64::from).collect());
        assert_eq!(r.median_ms, 10.5);
        assert_eq!(r.p95_ms, 19.0);
        assert_eq!(r.per_instance_ms(), 1.05);

        let m = Model::init_random(0);
        let r = bench(&m, 1, Some(1), 1).unwrap();
        assert_eq!(r.samples_ms.len(), 1);
        assert_eq!(r.p95_ms, r.samples_ms[0]);
        assert!(bench(&m, 0, None, 1).is_err());
    }

    #[test]
    fn empty_dataset_exits_nonzero() {
        let dir = tempfile::tempdir().unwrap();
        let entries = discover_scans(dir.path(), &[], &[]).unwrap();
        assert!(entries.is_empty());
        let r = run_entries(&entries, &ScanSettings::default(), &Oracle, &RunOptions::default()).unwrap();
        assert_eq!(r.exit_code(), 1);
    }
}

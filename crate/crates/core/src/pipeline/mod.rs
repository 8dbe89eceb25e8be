//! End-to-end run: retrieval, front-end, two-view geometry, view graph,
//! rotation and translation averaging, data association and bundle
//! adjustment, with a barrier between stages.
//!
//! Every parallel stage goes through one [`Executor`], and every task draws
//! its randomness from `(seed, task key)`, so outputs are identical for any
//! worker count.

pub mod config;
pub mod io;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle_adjust::{three_round_ba, BaCamera, BaError, BaProblem, BaReport};
use crate::data_assoc::{build_tracks, triangulate_tracks, DisjointSet, Landmark, Track2D};
use crate::executor::{Executor, TaskSpan};
use crate::geom::{CameraIntrinsics, Pose3, Rotation3, UnitVector3};
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::retrieval::{blocked_similarity, retrieval_k, select_similarity_pairs, sequential_pairs};
use crate::rot_avg::{solve_rotations, RotAvgError, RotationAveragingProblem};
use crate::seed::task_seed;
use crate::trans_avg::{mfas_filter, solve_translations, DirectionMeasurement, Endpoint, TransAvgError};
use crate::two_view::{merge_keypoints_nms, verify_pair, Keypoint, TwoViewMeasurement};
use crate::view_graph::{largest_connected_component, two_stage_cycle_filter_with, write_cycle_csv, CycleErrorRecord, ViewGraph};

pub use config::{PipelineConfig, WORKERS_ENV};
pub use io::{export_ply, SceneInput};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("output error: {0}")]
    Output(String),
    #[error("view graph is empty after filtering")]
    EmptyViewGraph,
    #[error("rotation averaging failed: {0}")]
    RotationAveraging(#[from] RotAvgError),
    #[error("translation averaging failed: {0}")]
    TranslationAveraging(#[from] TransAvgError),
    #[error("no track could be triangulated")]
    NoLandmarks,
    #[error("bundle adjustment failed: {0}")]
    BundleAdjustment(#[from] BaError),
    #[error("evaluation failed: {0}")]
    Metrics(#[from] MetricsError),
}

pub const STAGES: [&str; 8] = [
    "retrieval",
    "front_end",
    "two_view",
    "view_graph",
    "rotation_averaging",
    "translation_averaging",
    "data_association",
    "bundle_adjustment",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub wall_time_s: f64,
    pub task_count: usize,
    pub n_workers: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stages: Vec<StageTime>,
    pub total_s: f64,
}

impl StageTiming {
    pub fn get(&self, stage: &str) -> Option<&StageTime> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}

/// A per-task failure that the run skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub stage: String,
    pub task: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfmResult {
    /// Indexed by image; `None` for unregistered images.
    pub poses: Vec<Option<Pose3>>,
    pub landmarks: Vec<Landmark>,
    pub intrinsics: Vec<CameraIntrinsics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSummary {
    pub certified: bool,
    pub p_final: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationSummary {
    pub n_measurements: usize,
    pub n_landmark_measurements: usize,
    pub n_mfas_inliers: usize,
    pub cost: f64,
}

/// Run report; contains no timing so that it is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n_images: usize,
    pub n_candidate_pairs: usize,
    pub n_verified_pairs: usize,
    pub n_edges_after_cycle_filter: usize,
    pub n_cameras_in_view_graph: usize,
    pub n_registered_cameras: usize,
    pub rotation: RotationSummary,
    pub translation: TranslationSummary,
    pub n_tracks: usize,
    pub n_triangulated: usize,
    pub bundle_adjustment: BaReport,
    pub failures: Vec<TaskFailure>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub result: SfmResult,
    pub report: RunReport,
    pub timing: StageTiming,
    pub cycle_records: Vec<CycleErrorRecord>,
    /// Present when the executor logs tasks.
    pub task_spans: Vec<TaskSpan>,
}

struct Clock<'a> {
    executor: &'a Executor,
    timing: StageTiming,
    start: Instant,
    stage_start: Instant,
}

impl<'a> Clock<'a> {
    fn new(executor: &'a Executor) -> Self {
        executor.take_task_count();
        let now = Instant::now();
        Self {
            executor,
            timing: StageTiming::default(),
            start: now,
            stage_start: now,
        }
    }

    fn begin(&mut self, stage: &str) {
        self.executor.set_stage(stage);
        self.executor.take_task_count();
        self.stage_start = Instant::now();
    }

    fn end(&mut self, stage: &str) {
        // Sequential stages count as a single task.
        let tasks = self.executor.take_task_count().max(1);
        log::info!("stage {stage} finished in {:.3} s ({tasks} tasks)", self.stage_start.elapsed().as_secs_f64());
        self.timing.stages.push(StageTime {
            stage: stage.into(),
            wall_time_s: self.stage_start.elapsed().as_secs_f64(),
            task_count: tasks,
            n_workers: self.executor.n_workers(),
        });
    }

    fn finish(mut self) -> StageTiming {
        self.timing.total_s = self.start.elapsed().as_secs_f64();
        self.timing
    }
}

// Task-key tags for stage-level random streams.
const MFAS_KEY: u64 = 0x3fa5;
const TRANSLATION_KEY: u64 = 0x7a45;
const TRIANGULATION_KEY: u64 = 0x7e1a;

fn candidate_pairs(input: &SceneInput, cfg: &PipelineConfig, executor: &Executor) -> Result<BTreeSet<(usize, usize)>, PipelineError> {
    let matched: BTreeSet<(usize, usize)> = input.matches.iter().map(|m| m.pair).collect();
    let n = input.keypoints.len();
    if cfg.retrieval.exhaustive || n < 2 {
        return Ok(matched);
    }
    let mut list = sequential_pairs(n, cfg.retrieval.lookahead);
    match &input.descriptors {
        Some(descs) => {
            let sim = blocked_similarity(descs, cfg.retrieval.block, executor)
                .map_err(|e| PipelineError::Input(format!("descriptors: {e}")))?;
            let k = cfg.retrieval.k.unwrap_or_else(|| retrieval_k(n, cfg.retrieval.large_collection));
            list.merge(&select_similarity_pairs(&sim, k, cfg.retrieval.min_score));
        }
        None => log::warn!("no descriptors; retrieval falls back to sequential pairs only"),
    }
    Ok(list.pairs().into_iter().filter(|p| matched.contains(p)).collect())
}

/// Camera-camera directions from the view graph plus camera-landmark rays
/// for up to `per_camera` of the longest tracks seen by each camera.
fn direction_measurements(
    graph: &ViewGraph,
    ids: &[usize],
    rotations: &BTreeMap<usize, Rotation3>,
    tracks: &[Track2D],
    intrinsics: &[CameraIntrinsics],
    cfg: &PipelineConfig,
) -> Vec<DirectionMeasurement> {
    let index = |v: usize| ids.binary_search(&v).expect("registered camera");
    let mut out = Vec::new();
    for &(a, b) in graph.edges.keys() {
        let m = graph.oriented(a, b).expect("edge");
        let dir = -(rotations[&b].rotate(m.direction.as_ref()));
        if let Ok(d) = UnitVector3::new_normalize(dir) {
            out.push(DirectionMeasurement::camera(index(a), index(b), d));
        }
    }
    if !cfg.translation.use_landmarks || cfg.translation.landmarks_per_camera == 0 {
        return out;
    }
    let min_len = cfg.triangulation.min_track_length;
    let mut per_camera: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (t, track) in tracks.iter().enumerate() {
        let in_graph = track.observations.iter().filter(|o| rotations.contains_key(&o.image_id)).count();
        if in_graph < min_len {
            continue;
        }
        for o in &track.observations {
            per_camera.entry(o.image_id).or_default().push(t);
        }
    }
    let mut chosen = BTreeSet::new();
    for list in per_camera.values_mut() {
        list.sort_by(|&x, &y| tracks[y].len().cmp(&tracks[x].len()).then(x.cmp(&y)));
        chosen.extend(list.iter().take(cfg.translation.landmarks_per_camera).copied());
    }
    for (l, &t) in chosen.iter().enumerate() {
        for o in &tracks[t].observations {
            let Some(r) = rotations.get(&o.image_id) else { continue };
            let ray = intrinsics[o.image_id].pixel_to_ray(&o.position);
            if let Ok(d) = UnitVector3::new_normalize(r.rotate(&ray)) {
                out.push(DirectionMeasurement::landmark(index(o.image_id), l, d));
            }
        }
    }
    out
}

/// Keeps the connected piece (over cameras and landmarks) holding the most
/// cameras, drops landmarks seen fewer than twice, and renumbers both kinds
/// of node contiguously. Returns the kept measurements and the original
/// camera index of every new one.
fn connected_subset(ms: &[DirectionMeasurement], n_cam: usize) -> (Vec<DirectionMeasurement>, Vec<usize>) {
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    for m in ms {
        if let Endpoint::Landmark(l) = m.to {
            *count.entry(l).or_default() += 1;
        }
    }
    let usable: Vec<&DirectionMeasurement> = ms
        .iter()
        .filter(|m| match m.to {
            Endpoint::Camera(_) => true,
            Endpoint::Landmark(l) => count[&l] >= 2,
        })
        .collect();
    let n_lm = count.keys().next_back().map_or(0, |&l| l + 1);
    let mut ds = DisjointSet::new(n_cam + n_lm);
    let node = |e: Endpoint| match e {
        Endpoint::Camera(c) => c,
        Endpoint::Landmark(l) => n_cam + l,
    };
    let mut touched = vec![false; n_cam];
    for m in &usable {
        ds.union(m.from, node(m.to));
        touched[m.from] = true;
        if let Endpoint::Camera(c) = m.to {
            touched[c] = true;
        }
    }
    let mut cams_per_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in (0..n_cam).filter(|&c| touched[c]) {
        cams_per_root.entry(ds.find(c)).or_default().push(c);
    }
    let Some(best) = cams_per_root
        .values()
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .cloned()
    else {
        return (Vec::new(), Vec::new());
    };
    let root = ds.find(best[0]);
    let cam_index: BTreeMap<usize, usize> = best.iter().enumerate().map(|(k, &c)| (c, k)).collect();
    let mut lm_index: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for m in usable {
        if ds.find(m.from) != root {
            continue;
        }
        let to = match m.to {
            Endpoint::Camera(c) => Endpoint::Camera(cam_index[&c]),
            Endpoint::Landmark(l) => {
                let next = lm_index.len();
                Endpoint::Landmark(*lm_index.entry(l).or_insert(next))
            }
        };
        out.push(DirectionMeasurement {
            from: cam_index[&m.from],
            to,
            direction: m.direction,
        });
    }
    (out, best)
}

/// Result of the stages up to and including view-graph filtering.
#[derive(Debug, Clone)]
pub struct ViewGraphOutput {
    /// Keypoints after the optional NMS merge.
    pub keypoints: Vec<Vec<Keypoint>>,
    pub n_candidate_pairs: usize,
    pub n_verified_pairs: usize,
    pub n_edges_after_cycle_filter: usize,
    /// Largest connected component of the filtered graph.
    pub graph: ViewGraph,
    pub cycle_records: Vec<CycleErrorRecord>,
    pub failures: Vec<TaskFailure>,
}

/// Retrieval, two-view verification and cycle filtering.
pub fn run_view_graph(input: &SceneInput, cfg: &PipelineConfig, executor: &Executor) -> Result<ViewGraphOutput, PipelineError> {
    cfg.validate()?;
    let mut clock = Clock::new(executor);
    view_graph_stages(input, cfg, executor, &mut clock)
}

fn view_graph_stages(
    input: &SceneInput,
    cfg: &PipelineConfig,
    executor: &Executor,
    clock: &mut Clock,
) -> Result<ViewGraphOutput, PipelineError> {
    let n_images = input.keypoints.len();
    let mut failures = Vec::new();
    clock.begin("retrieval");
    let candidates = candidate_pairs(input, cfg, executor)?;
    clock.end("retrieval");

    clock.begin("front_end");
    let (keypoints, matches) = if cfg.verification.nms_merge {
        merge_keypoints_nms(&input.keypoints, &input.matches, cfg.verification.nms_radius_px)
    } else {
        (input.keypoints.clone(), input.matches.clone())
    };
    let to_verify: Vec<_> = matches.into_iter().filter(|m| candidates.contains(&m.pair)).collect();
    clock.end("front_end");

    clock.begin("two_view");
    let verified = executor.map(&to_verify, |_, m| {
        let (i, j) = m.pair;
        verify_pair(
            m,
            &keypoints[i],
            &keypoints[j],
            &input.intrinsics[i],
            &input.intrinsics[j],
            &cfg.verification,
            cfg.seed,
        )
    });
    let mut accepted: Vec<TwoViewMeasurement> = Vec::new();
    for (m, r) in to_verify.iter().zip(verified) {
        match r {
            Ok(v) => accepted.push(v),
            Err(e) => failures.push(TaskFailure {
                stage: "two_view".into(),
                task: format!("pair ({}, {})", m.pair.0, m.pair.1),
                error: e.to_string(),
            }),
        }
    }
    clock.end("two_view");

    clock.begin("view_graph");
    let n_verified = accepted.len();
    let graph = ViewGraph::from_measurements(n_images, accepted);
    let (filtered, cycle_records) = two_stage_cycle_filter_with(&graph, cfg.view_graph.cycle_threshold_deg, executor);
    let n_after_filter = filtered.n_edges();
    let graph = largest_connected_component(&filtered);
    if graph.n_edges() == 0 {
        return Err(PipelineError::EmptyViewGraph);
    }
    clock.end("view_graph");
    Ok(ViewGraphOutput {
        keypoints,
        n_candidate_pairs: candidates.len(),
        n_verified_pairs: n_verified,
        n_edges_after_cycle_filter: n_after_filter,
        graph,
        cycle_records,
        failures,
    })
}

/// Runs every stage on in-memory input.
pub fn run_on_input(input: &SceneInput, cfg: &PipelineConfig, executor: &Executor) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let n_images = input.keypoints.len();
    let mut clock = Clock::new(executor);
    let ViewGraphOutput {
        keypoints,
        n_candidate_pairs,
        n_verified_pairs: n_verified,
        n_edges_after_cycle_filter: n_after_filter,
        graph,
        cycle_records,
        mut failures,
    } = view_graph_stages(input, cfg, executor, &mut clock)?;

    clock.begin("rotation_averaging");
    let (problem, ids) = RotationAveragingProblem::from_view_graph(&graph, cfg.rotation.kappa());
    let rot = solve_rotations(&problem, &cfg.rotation)?;
    if !rot.certified {
        log::warn!("rotation averaging reached p = {} without a certificate", rot.p_final);
    }
    let rotations: BTreeMap<usize, Rotation3> = ids.iter().copied().zip(rot.rotations.iter().copied()).collect();
    clock.end("rotation_averaging");

    clock.begin("translation_averaging");
    let edge_measurements: Vec<TwoViewMeasurement> = graph.edges.values().cloned().collect();
    let tracks = build_tracks(&edge_measurements, &keypoints);
    let directions = direction_measurements(&graph, &ids, &rotations, &tracks, &input.intrinsics, cfg);
    let mfas = mfas_filter(
        &directions,
        cfg.translation.n_projections,
        cfg.translation.mfas_threshold,
        task_seed(cfg.seed, &[MFAS_KEY]),
        executor,
    );
    let inliers: Vec<DirectionMeasurement> = directions
        .iter()
        .zip(&mfas.inliers)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| *m)
        .collect();
    let (kept, kept_cams) = connected_subset(&inliers, ids.len());
    let trans = solve_translations(&kept, &cfg.translation, task_seed(cfg.seed, &[TRANSLATION_KEY]))?;
    let mut poses: Vec<Option<Pose3>> = vec![None; n_images];
    for (k, &local) in kept_cams.iter().enumerate() {
        let id = ids[local];
        poses[id] = Some(Pose3::new(rotations[&id], trans.positions[k]));
    }
    clock.end("translation_averaging");

    clock.begin("data_association");
    let triangulated = triangulate_tracks(
        &tracks,
        &poses,
        &input.intrinsics,
        &cfg.triangulation,
        task_seed(cfg.seed, &[TRIANGULATION_KEY]),
        executor,
    );
    let mut landmarks = Vec::new();
    for (t, r) in triangulated.into_iter().enumerate() {
        match r {
            Ok(l) => landmarks.push(l),
            Err(e) => failures.push(TaskFailure {
                stage: "data_association".into(),
                task: format!("track {t}"),
                error: e.to_string(),
            }),
        }
    }
    if landmarks.is_empty() {
        return Err(PipelineError::NoLandmarks);
    }
    let n_triangulated = landmarks.len();
    clock.end("data_association");

    clock.begin("bundle_adjustment");
    let optimize = cfg.bundle_adjustment.optimize_intrinsics;
    let cameras = poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            p.map(|pose| BaCamera {
                pose,
                intrinsics: input.intrinsics[k],
                // Cameras with identical calibration share one block.
                intrinsics_group: optimize
                    .then(|| input.intrinsics.iter().position(|c| *c == input.intrinsics[k]).expect("self")),
            })
        })
        .collect();
    let (refined, ba_report) = three_round_ba(&BaProblem { cameras, landmarks }, &cfg.bundle_adjustment, executor)?;
    let poses: Vec<Option<Pose3>> = refined.cameras.iter().map(|c| c.map(|c| c.pose)).collect();
    let intrinsics: Vec<CameraIntrinsics> = refined
        .cameras
        .iter()
        .zip(&input.intrinsics)
        .map(|(c, orig)| c.map_or(*orig, |c| c.intrinsics))
        .collect();
    clock.end("bundle_adjustment");

    let metrics = match &input.gt_poses {
        Some(gt) => Some(evaluate(&poses, gt, &refined.landmarks, &cfg.auc_thresholds_deg)?),
        None => None,
    };
    let report = RunReport {
        n_images,
        n_candidate_pairs,
        n_verified_pairs: n_verified,
        n_edges_after_cycle_filter: n_after_filter,
        n_cameras_in_view_graph: ids.len(),
        n_registered_cameras: poses.iter().flatten().count(),
        rotation: RotationSummary {
            certified: rot.certified,
            p_final: rot.p_final,
            cost: rot.cost,
        },
        translation: TranslationSummary {
            n_measurements: directions.len(),
            n_landmark_measurements: directions.iter().filter(|m| !m.is_camera_camera()).count(),
            n_mfas_inliers: inliers.len(),
            cost: trans.cost,
        },
        n_tracks: tracks.len(),
        n_triangulated,
        bundle_adjustment: ba_report,
        failures,
        metrics,
    };
    Ok(PipelineOutput {
        result: SfmResult {
            poses,
            landmarks: refined.landmarks,
            intrinsics,
        },
        report,
        timing: clock.finish(),
        cycle_records,
        task_spans: executor.task_spans(),
    })
}

pub const POSES_OUTPUT: &str = "poses.txt";
pub const LANDMARKS_OUTPUT: &str = "landmarks.json";
pub const PLY_OUTPUT: &str = "points.ply";
pub const REPORT_OUTPUT: &str = "report.json";
pub const TIMING_OUTPUT: &str = "timing.json";
pub const CYCLE_CSV_OUTPUT: &str = "cycle_errors.csv";

/// Writes poses, landmarks, PLY, report, timing and cycle diagnostics.
pub fn write_outputs(out: &PipelineOutput, dir: &Path) -> Result<(), PipelineError> {
    let oerr = |p: &Path, e: std::io::Error| PipelineError::Output(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| oerr(dir, e))?;
    io::write_poses(&dir.join(POSES_OUTPUT), &out.result.poses)?;
    io::write_json(&dir.join(LANDMARKS_OUTPUT), &out.result.landmarks)?;
    export_ply(&dir.join(PLY_OUTPUT), &out.result.landmarks, &out.result.poses)?;
    io::write_json(&dir.join(REPORT_OUTPUT), &out.report)?;
    io::write_json(&dir.join(TIMING_OUTPUT), &out.timing)?;
    let csv = dir.join(CYCLE_CSV_OUTPUT);
    let file = std::fs::File::create(&csv).map_err(|e| oerr(&csv, e))?;
    write_cycle_csv(&out.cycle_records, std::io::BufWriter::new(file)).map_err(|e| oerr(&csv, e))?;
    Ok(())
}

/// Reads the scene from `io.input_dir`, runs, and writes to `io.output_dir`.
/// Nothing is written unless every stage succeeds.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let input_dir = cfg
        .io
        .input_dir
        .as_deref()
        .ok_or_else(|| PipelineError::Config("io.input_dir is not set".into()))?;
    let input = SceneInput::read_dir(input_dir)?;
    let executor = Executor::new(cfg.n_workers);
    let out = run_on_input(&input, cfg, &executor)?;
    if let Some(dir) = &cfg.io.output_dir {
        write_outputs(&out, dir)?;
    }
    Ok(out)
}

/// Scene input for a synthetic oracle scene, ground truth included.
pub fn synthetic_input(out: &crate::synth::SyntheticOutput) -> SceneInput {
    SceneInput {
        keypoints: out.keypoints.clone(),
        matches: out.matches.clone(),
        intrinsics: out.intrinsics(),
        descriptors: Some(out.descriptors.clone()),
        gt_poses: Some(out.scene.poses.clone()),
    }
}

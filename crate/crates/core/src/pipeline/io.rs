//! On-disk formats.
//!
//! A scene directory holds `keypoints.json`, `matches.json`,
//! `intrinsics.json`, optionally `descriptors.bin` and, for evaluation,
//! `gt_poses.txt`. JSON files carry a `format` tag and a `version`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::data_assoc::Landmark;
use crate::geom::{CameraIntrinsics, Pose3, Rotation3};
use crate::retrieval::{read_descriptors, write_descriptors, GlobalDescriptor};
use crate::two_view::{Keypoint, MatchSet};

use super::PipelineError;

pub const KEYPOINTS_FILE: &str = "keypoints.json";
pub const MATCHES_FILE: &str = "matches.json";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const DESCRIPTORS_FILE: &str = "descriptors.bin";
pub const GT_POSES_FILE: &str = "gt_poses.txt";

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageKeypoints {
    image_id: usize,
    /// `[x, y]` pixel positions.
    keypoints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    detection_ids: Option<Vec<Option<u64>>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointsFile {
    format: String,
    version: u32,
    images: Vec<ImageKeypoints>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchesFile {
    format: String,
    version: u32,
    pairs: Vec<MatchSet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    image_id: usize,
    f: f64,
    k1: f64,
    k2: f64,
    u0: f64,
    v0: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsFile {
    format: String,
    version: u32,
    cameras: Vec<CameraEntry>,
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Input(format!("{}: {e}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<T, PipelineError>
where
    T: Tagged,
{
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    let value: T = serde_json::from_str(&text).map_err(|e| input_err(path, e))?;
    let (f, v) = value.tag();
    if f != format || v != VERSION {
        return Err(input_err(path, format!("expected format {format} version {VERSION}, found {f} version {v}")));
    }
    Ok(value)
}

trait Tagged {
    fn tag(&self) -> (&str, u32);
}

macro_rules! tagged {
    ($($t:ty),*) => {$(
        impl Tagged for $t {
            fn tag(&self) -> (&str, u32) {
                (&self.format, self.version)
            }
        }
    )*};
}
tagged!(KeypointsFile, MatchesFile, IntrinsicsFile);

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    std::fs::write(path, bytes).map_err(|e| PipelineError::Output(format!("{}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

pub fn write_keypoints(path: &Path, keypoints: &[Vec<Keypoint>]) -> Result<(), PipelineError> {
    let images = keypoints
        .iter()
        .enumerate()
        .map(|(i, kps)| ImageKeypoints {
            image_id: i,
            keypoints: kps.iter().map(|k| [k.position.x, k.position.y]).collect(),
            detection_ids: kps
                .iter()
                .any(|k| k.detection_id.is_some())
                .then(|| kps.iter().map(|k| k.detection_id).collect()),
        })
        .collect();
    write_file(
        path,
        &json_bytes(&KeypointsFile {
            format: "gsfm-keypoints".into(),
            version: VERSION,
            images,
        }),
    )
}

/// Keypoints per image, indexed by image id; ids must be `0..n`.
pub fn read_keypoints(path: &Path) -> Result<Vec<Vec<Keypoint>>, PipelineError> {
    let file: KeypointsFile = read_json(path, "gsfm-keypoints")?;
    let mut out = Vec::with_capacity(file.images.len());
    for (k, img) in file.images.into_iter().enumerate() {
        if img.image_id != k {
            return Err(input_err(path, format!("image ids must be 0..n in order, found {} at {k}", img.image_id)));
        }
        let ids = img.detection_ids.unwrap_or_else(|| vec![None; img.keypoints.len()]);
        if ids.len() != img.keypoints.len() {
            return Err(input_err(path, format!("image {k}: detection_ids length mismatch")));
        }
        let mut kps = Vec::with_capacity(img.keypoints.len());
        for (p, detection_id) in img.keypoints.iter().zip(ids) {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(input_err(path, format!("image {k}: non-finite keypoint")));
            }
            kps.push(Keypoint {
                image_id: k,
                position: Vector2::new(p[0], p[1]),
                detection_id,
            });
        }
        out.push(kps);
    }
    Ok(out)
}

pub fn write_matches(path: &Path, matches: &[MatchSet]) -> Result<(), PipelineError> {
    write_file(
        path,
        &json_bytes(&MatchesFile {
            format: "gsfm-matches".into(),
            version: VERSION,
            pairs: matches.to_vec(),
        }),
    )
}

/// Match sets, each stored with `i < j`, validated against keypoint counts.
pub fn read_matches(path: &Path, keypoints: &[Vec<Keypoint>]) -> Result<Vec<MatchSet>, PipelineError> {
    let file: MatchesFile = read_json(path, "gsfm-matches")?;
    let n = keypoints.len();
    let mut out: Vec<MatchSet> = Vec::with_capacity(file.pairs.len());
    for mut m in file.pairs {
        let (i, j) = m.pair;
        if i == j || i >= n || j >= n {
            return Err(input_err(path, format!("invalid pair ({i}, {j}) for {n} images")));
        }
        if i > j {
            m = MatchSet::new((j, i), m.matches.iter().map(|&(a, b)| (b, a)).collect());
        }
        let (i, j) = m.pair;
        if m.matches.iter().any(|&(a, b)| a >= keypoints[i].len() || b >= keypoints[j].len()) {
            return Err(input_err(path, format!("pair ({i}, {j}) references a missing keypoint")));
        }
        m.dedup();
        out.push(m);
    }
    out.sort_by_key(|m| m.pair);
    if out.windows(2).any(|w| w[0].pair == w[1].pair) {
        return Err(input_err(path, "duplicate pair"));
    }
    Ok(out)
}

pub fn write_intrinsics(path: &Path, intrinsics: &[CameraIntrinsics]) -> Result<(), PipelineError> {
    let cameras = intrinsics
        .iter()
        .enumerate()
        .map(|(image_id, c)| CameraEntry {
            image_id,
            f: c.f,
            k1: c.k1,
            k2: c.k2,
            u0: c.u0,
            v0: c.v0,
        })
        .collect();
    write_file(
        path,
        &json_bytes(&IntrinsicsFile {
            format: "gsfm-intrinsics".into(),
            version: VERSION,
            cameras,
        }),
    )
}

pub fn read_intrinsics(path: &Path) -> Result<Vec<CameraIntrinsics>, PipelineError> {
    let file: IntrinsicsFile = read_json(path, "gsfm-intrinsics")?;
    file.cameras
        .iter()
        .enumerate()
        .map(|(k, c)| {
            if c.image_id != k {
                return Err(input_err(path, format!("image ids must be 0..n in order, found {} at {k}", c.image_id)));
            }
            CameraIntrinsics::new(c.f, c.k1, c.k2, c.u0, c.v0).map_err(|e| input_err(path, format!("image {k}: {e}")))
        })
        .collect()
}

/// Converts to the `(w, x, y, z)` quaternion used by the poses file, with
/// `w >= 0`.
pub fn rotation_to_quaternion(r: &Rotation3) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(r.matrix());
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

pub fn quaternion_to_rotation(wxyz: [f64; 4]) -> Option<Rotation3> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    if !(q.norm() > 1e-12) {
        return None;
    }
    let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
    Some(Rotation3::from_matrix_projected(&m))
}

/// One line per registered camera: `id qw qx qy qz tx ty tz`, where the
/// quaternion is the camera-to-world rotation and `t` the camera center.
/// Lines starting with `#` are comments.
pub fn format_poses(poses: &[Option<Pose3>]) -> String {
    let mut s = String::from("# image_id qw qx qy qz tx ty tz (camera-to-world rotation, camera center)\n");
    for (k, pose) in poses.iter().enumerate() {
        if let Some(p) = pose {
            let q = rotation_to_quaternion(&p.rotation);
            let t = p.translation;
            writeln!(s, "{k} {} {} {} {} {} {} {}", q[0], q[1], q[2], q[3], t.x, t.y, t.z).expect("string write");
        }
    }
    s
}

pub fn write_poses(path: &Path, poses: &[Option<Pose3>]) -> Result<(), PipelineError> {
    write_file(path, format_poses(poses).as_bytes())
}

/// Parses a poses file into a vector indexed by image id; ids absent from
/// the file are `None`.
pub fn parse_poses(text: &str) -> Result<Vec<Option<Pose3>>, String> {
    let mut out: Vec<Option<Pose3>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(format!("line {}: expected 8 fields, found {}", lineno + 1, fields.len()));
        }
        let id: usize = fields[0].parse().map_err(|e| format!("line {}: {e}", lineno + 1))?;
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| format!("line {}: {e}", lineno + 1))?;
        }
        let rotation = quaternion_to_rotation([v[0], v[1], v[2], v[3]])
            .ok_or_else(|| format!("line {}: zero quaternion", lineno + 1))?;
        if out.len() <= id {
            out.resize(id + 1, None);
        }
        if out[id].is_some() {
            return Err(format!("line {}: duplicate image id {id}", lineno + 1));
        }
        out[id] = Some(Pose3::new(rotation, Vector3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

pub fn read_poses(path: &Path) -> Result<Vec<Option<Pose3>>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    parse_poses(&text).map_err(|e| input_err(path, e))
}

/// ASCII PLY: one `vertex` element per landmark (white) and a separate
/// `camera` element holding colored frustum points, so the vertex count is
/// always the landmark count.
pub fn format_ply(landmarks: &[Landmark], poses: &[Option<Pose3>]) -> String {
    let frustum_size = 0.1;
    let mut camera_points = Vec::new();
    for pose in poses.iter().flatten() {
        let corners = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(-1.0, -0.75, 1.5),
            Vector3::new(1.0, -0.75, 1.5),
            Vector3::new(1.0, 0.75, 1.5),
            Vector3::new(-1.0, 0.75, 1.5),
        ];
        for (c, corner) in corners.iter().enumerate() {
            let p = pose.transform_point(&(corner * frustum_size));
            let color = if c == 0 { [255, 0, 0] } else { [0, 128, 255] };
            camera_points.push((p, color));
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment gsfm sparse reconstruction\n");
    writeln!(s, "element vertex {}", landmarks.len()).expect("string write");
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    writeln!(s, "element camera {}", camera_points.len()).expect("string write");
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    s.push_str("end_header\n");
    for lm in landmarks {
        let p = lm.point;
        writeln!(s, "{} {} {} 255 255 255", p.x, p.y, p.z).expect("string write");
    }
    for (p, c) in camera_points {
        writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2]).expect("string write");
    }
    s
}

pub fn export_ply(path: &Path, landmarks: &[Landmark], poses: &[Option<Pose3>]) -> Result<(), PipelineError> {
    let file = std::fs::File::create(path).map_err(|e| PipelineError::Output(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(format_ply(landmarks, poses).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| PipelineError::Output(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_file(path, &json_bytes(value))
}

/// Paths of the files making up a scene directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFiles {
    pub keypoints: PathBuf,
    pub matches: PathBuf,
    pub intrinsics: PathBuf,
    pub descriptors: PathBuf,
    pub gt_poses: PathBuf,
}

impl SceneFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            keypoints: dir.join(KEYPOINTS_FILE),
            matches: dir.join(MATCHES_FILE),
            intrinsics: dir.join(INTRINSICS_FILE),
            descriptors: dir.join(DESCRIPTORS_FILE),
            gt_poses: dir.join(GT_POSES_FILE),
        }
    }
}

/// Everything read from a scene directory.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub keypoints: Vec<Vec<Keypoint>>,
    pub matches: Vec<MatchSet>,
    pub intrinsics: Vec<CameraIntrinsics>,
    pub descriptors: Option<Vec<GlobalDescriptor>>,
    pub gt_poses: Option<Vec<Pose3>>,
}

impl SceneInput {
    /// Reads and cross-checks a scene directory. Descriptors and ground
    /// truth are optional; the other three files are required.
    pub fn read_dir(dir: &Path) -> Result<Self, PipelineError> {
        let files = SceneFiles::in_dir(dir);
        let keypoints = read_keypoints(&files.keypoints)?;
        let matches = read_matches(&files.matches, &keypoints)?;
        let intrinsics = read_intrinsics(&files.intrinsics)?;
        if intrinsics.len() != keypoints.len() {
            return Err(input_err(
                &files.intrinsics,
                format!("{} cameras for {} images", intrinsics.len(), keypoints.len()),
            ));
        }
        let descriptors = if files.descriptors.exists() {
            let d = read_descriptors(&files.descriptors).map_err(|e| input_err(&files.descriptors, e))?;
            if d.len() != keypoints.len() {
                return Err(input_err(&files.descriptors, format!("{} descriptors for {} images", d.len(), keypoints.len())));
            }
            Some(d)
        } else {
            None
        };
        let gt_poses = if files.gt_poses.exists() {
            let poses = read_poses(&files.gt_poses)?;
            if poses.len() != keypoints.len() || poses.iter().any(Option::is_none) {
                return Err(input_err(&files.gt_poses, "ground truth must list every image"));
            }
            Some(poses.into_iter().flatten().collect())
        } else {
            None
        };
        Ok(Self {
            keypoints,
            matches,
            intrinsics,
            descriptors,
            gt_poses,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Output(format!("{}: {e}", dir.display())))?;
        let files = SceneFiles::in_dir(dir);
        write_keypoints(&files.keypoints, &self.keypoints)?;
        write_matches(&files.matches, &self.matches)?;
        write_intrinsics(&files.intrinsics, &self.intrinsics)?;
        if let Some(d) = &self.descriptors {
            write_descriptors(&files.descriptors, d)
                .map_err(|e| PipelineError::Output(format!("{}: {e}", files.descriptors.display())))?;
        }
        if let Some(gt) = &self.gt_poses {
            let poses: Vec<Option<Pose3>> = gt.iter().copied().map(Some).collect();
            write_poses(&files.gt_poses, &poses)?;
        }
        Ok(())
    }
}

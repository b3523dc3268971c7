//! Dataset directories.
//!
//! Layout: `NNNN_left.ppm`, `NNNN_right.ppm`, `NNNN_depth.pfm`,
//! `NNNN_points.pcb` per frame plus a shared `calib.txt`. Loading an empty
//! directory yields an empty dataset; a frame with a missing companion file
//! is an error naming the file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use vpnet_core::geometry::{CameraRig, PointCloud};
use vpnet_core::scenes::SceneSample;

use crate::formats::{
    load_calib, load_pfm, load_points, load_ppm, save_calib, save_pfm, save_points, save_ppm,
    FormatError,
};

#[derive(Debug)]
pub enum DatasetError {
    Format(FormatError),
    MissingFile(PathBuf),
    ExtentMismatch { file: PathBuf, msg: String },
    Io(std::io::Error),
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Format(e) => write!(f, "{e}"),
            DatasetError::MissingFile(p) => write!(f, "missing file: {}", p.display()),
            DatasetError::ExtentMismatch { file, msg } => {
                write!(f, "{}: {msg}", file.display())
            }
            DatasetError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<FormatError> for DatasetError {
    fn from(e: FormatError) -> Self {
        DatasetError::Format(e)
    }
}
impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

/// One stored frame: the rendered sample plus its point cloud.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub sample: SceneSample,
    pub cloud: PointCloud,
}

pub fn frame_id(index: usize) -> String {
    format!("{index:04}")
}

pub fn save_frame(
    dir: &Path,
    id: &str,
    sample: &SceneSample,
    cloud: &PointCloud,
) -> Result<(), DatasetError> {
    save_ppm(&dir.join(format!("{id}_left.ppm")), &sample.left)?;
    save_ppm(&dir.join(format!("{id}_right.ppm")), &sample.right)?;
    save_pfm(&dir.join(format!("{id}_depth.pfm")), &sample.depth)?;
    save_points(&dir.join(format!("{id}_points.pcb")), cloud)?;
    Ok(())
}

pub fn save_dataset(
    dir: &Path,
    rig: &CameraRig,
    frames: &[(SceneSample, PointCloud)],
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    save_calib(&dir.join("calib.txt"), rig)?;
    for (i, (sample, cloud)) in frames.iter().enumerate() {
        save_frame(dir, &frame_id(i), sample, cloud)?;
    }
    Ok(())
}

/// Loads every frame in the directory, sorted by id. Returns the shared rig
/// (None for a directory with no calibration and no frames).
pub fn load_dataset(dir: &Path) -> Result<(Option<CameraRig>, Vec<Frame>), DatasetError> {
    if !dir.is_dir() {
        return Err(DatasetError::MissingFile(dir.to_path_buf()));
    }
    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_left.ppm") {
            ids.push(id.to_string());
        }
    }
    ids.sort();

    let calib_path = dir.join("calib.txt");
    let rig = if calib_path.exists() {
        Some(load_calib(&calib_path)?)
    } else if ids.is_empty() {
        return Ok((None, Vec::new()));
    } else {
        return Err(DatasetError::MissingFile(calib_path));
    };
    let rig_ref = rig.as_ref().expect("rig present when frames exist");

    let mut frames = Vec::with_capacity(ids.len());
    for id in ids {
        let need = |suffix: &str| -> Result<PathBuf, DatasetError> {
            let p = dir.join(format!("{id}{suffix}"));
            if !p.exists() {
                return Err(DatasetError::MissingFile(p));
            }
            Ok(p)
        };
        let left = load_ppm(&need("_left.ppm")?)?;
        let right = load_ppm(&need("_right.ppm")?)?;
        let depth = load_pfm(&need("_depth.pfm")?)?;
        let cloud = load_points(&need("_points.pcb")?)?;
        let (h, w) = (rig_ref.height, rig_ref.width);
        for (file, shape) in [("left", left.shape()), ("right", right.shape())] {
            if shape != [3, h, w] {
                return Err(DatasetError::ExtentMismatch {
                    file: dir.join(format!("{id}_{file}.ppm")),
                    msg: format!("image shape {shape:?} does not match calibration {w}x{h}"),
                });
            }
        }
        if depth.width != w || depth.height != h {
            return Err(DatasetError::ExtentMismatch {
                file: dir.join(format!("{id}_depth.pfm")),
                msg: format!(
                    "depth extents {}x{} do not match calibration {w}x{h}",
                    depth.width, depth.height
                ),
            });
        }
        frames.push(Frame {
            id,
            sample: SceneSample {
                left,
                right,
                depth,
                rig: rig_ref.clone(),
                seed: 0,
            },
            cloud,
        });
    }
    Ok((rig, frames))
}

//! On-disk formats: calibration text, point-cloud binaries, PFM depth maps
//! and PPM images.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use vpnet_core::geometry::{CameraRig, PointCloud};
use vpnet_core::network::DepthMap;
use vpnet_core::tensor::Tensor;

#[derive(Debug)]
pub enum FormatError {
    Io(io::Error),
    MissingKey { file: String, key: &'static str },
    BadValue { file: String, msg: String },
    BadMagic { file: String, expected: &'static str },
    Corrupt { file: String, msg: String },
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "{e}"),
            FormatError::MissingKey { file, key } => write!(f, "{file}: missing key: {key}"),
            FormatError::BadValue { file, msg } => write!(f, "{file}: {msg}"),
            FormatError::BadMagic { file, expected } => {
                write!(f, "{file}: bad magic, expected {expected}")
            }
            FormatError::Corrupt { file, msg } => write!(f, "{file}: {msg}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        FormatError::Io(e)
    }
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------------------
// calibration text: key=value lines
// ---------------------------------------------------------------------------

pub fn save_calib(path: &Path, rig: &CameraRig) -> Result<(), FormatError> {
    // `{}` prints the shortest representation that round-trips exactly
    let text = format!(
        "fx={}\nfy={}\ncx={}\ncy={}\nbaseline={}\nwidth={}\nheight={}\n",
        rig.fx, rig.fy, rig.cx, rig.cy, rig.baseline, rig.width, rig.height
    );
    fs::write(path, text)?;
    Ok(())
}

pub fn load_calib(path: &Path) -> Result<CameraRig, FormatError> {
    let file = name_of(path);
    let text = fs::read_to_string(path)?;
    let mut fx = None;
    let mut fy = None;
    let mut cx = None;
    let mut cy = None;
    let mut baseline = None;
    let mut width = None;
    let mut height = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(FormatError::Corrupt {
                file,
                msg: format!("expected key=value, got {line:?}"),
            });
        };
        let slot = match key.trim() {
            "fx" => &mut fx,
            "fy" => &mut fy,
            "cx" => &mut cx,
            "cy" => &mut cy,
            "baseline" => &mut baseline,
            "width" => &mut width,
            "height" => &mut height,
            other => {
                return Err(FormatError::BadValue {
                    file,
                    msg: format!("unknown key {other:?}"),
                })
            }
        };
        let parsed: f64 = value.trim().parse().map_err(|_| FormatError::BadValue {
            file: name_of(path),
            msg: format!("cannot parse {key}={value}"),
        })?;
        *slot = Some(parsed);
    }
    let need = |opt: Option<f64>, key: &'static str| {
        opt.ok_or(FormatError::MissingKey {
            file: name_of(path),
            key,
        })
    };
    let rig = CameraRig::new(
        need(fx, "fx")?,
        need(fy, "fy")?,
        need(cx, "cx")?,
        need(cy, "cy")?,
        need(baseline, "baseline")?,
        need(width, "width")? as usize,
        need(height, "height")? as usize,
    )
    .map_err(|e| FormatError::BadValue {
        file,
        msg: e.to_string(),
    })?;
    Ok(rig)
}

// ---------------------------------------------------------------------------
// point clouds: PCB1 binary and .xyz text
// ---------------------------------------------------------------------------

pub fn save_points(path: &Path, cloud: &PointCloud) -> Result<(), FormatError> {
    let mut bytes = Vec::with_capacity(8 + cloud.len() * 12);
    bytes.extend_from_slice(b"PCB1");
    bytes.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_points(path: &Path) -> Result<PointCloud, FormatError> {
    let file = name_of(path);
    if path.extension().map(|e| e == "xyz").unwrap_or(false) {
        let text = fs::read_to_string(path)?;
        let mut pts = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut coord = [0.0_f32; 3];
            for c in coord.iter_mut() {
                *c = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| FormatError::Corrupt {
                        file: name_of(path),
                        msg: format!("line {}: expected three floats", lineno + 1),
                    })?;
            }
            pts.push(coord);
        }
        return PointCloud::from_points(pts).map_err(|e| FormatError::BadValue {
            file,
            msg: e.to_string(),
        });
    }

    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..4] != b"PCB1" {
        return Err(FormatError::BadMagic {
            file,
            expected: "PCB1",
        });
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + n * 12 {
        return Err(FormatError::Corrupt {
            file,
            msg: format!("expected {} payload bytes, found {}", n * 12, bytes.len() - 8),
        });
    }
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let at = 8 + i * 12;
        let mut coord = [0.0_f32; 3];
        for (k, c) in coord.iter_mut().enumerate() {
            *c = f32::from_le_bytes(bytes[at + 4 * k..at + 4 * k + 4].try_into().unwrap());
        }
        pts.push(coord);
    }
    PointCloud::from_points(pts).map_err(|e| FormatError::BadValue {
        file,
        msg: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// PFM depth maps: `Pf`, extents, negative scale (little-endian), rows
// bottom-to-top, invalid pixels stored as 0
// ---------------------------------------------------------------------------

pub fn save_pfm(path: &Path, depth: &DepthMap) -> Result<(), FormatError> {
    let mut out = Vec::with_capacity(32 + depth.data.len() * 4);
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).as_bytes());
    for row in (0..depth.height).rev() {
        for col in 0..depth.width {
            let i = row * depth.width + col;
            let v = if depth.valid[i] { depth.data[i] } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<DepthMap, FormatError> {
    let file = name_of(path);
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;

    let mut lines_end = 0;
    let mut header = Vec::new();
    for _ in 0..3 {
        let nl = bytes[lines_end..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| FormatError::Corrupt {
                file: name_of(path),
                msg: "truncated header".into(),
            })?;
        header.push(String::from_utf8_lossy(&bytes[lines_end..lines_end + nl]).into_owned());
        lines_end += nl + 1;
    }
    if header[0].trim() != "Pf" {
        return Err(FormatError::BadMagic { file, expected: "Pf" });
    }
    let mut wh = header[1].split_whitespace();
    let (w, h): (usize, usize) = match (
        wh.next().and_then(|t| t.parse().ok()),
        wh.next().and_then(|t| t.parse().ok()),
    ) {
        (Some(w), Some(h)) => (w, h),
        _ => {
            return Err(FormatError::Corrupt {
                file,
                msg: format!("bad extents line {:?}", header[1]),
            })
        }
    };
    let scale: f64 = header[2]
        .trim()
        .parse()
        .map_err(|_| FormatError::Corrupt {
            file: name_of(path),
            msg: format!("bad scale line {:?}", header[2]),
        })?;
    if scale >= 0.0 {
        return Err(FormatError::Corrupt {
            file,
            msg: "big-endian PFM (non-negative scale) not supported".into(),
        });
    }
    if bytes.len() != lines_end + w * h * 4 {
        return Err(FormatError::Corrupt {
            file,
            msg: format!(
                "expected {} payload bytes, found {}",
                w * h * 4,
                bytes.len() - lines_end
            ),
        });
    }
    let mut data = vec![0.0_f32; w * h];
    for row_file in 0..h {
        let row = h - 1 - row_file; // stored bottom-to-top
        for col in 0..w {
            let at = lines_end + (row_file * w + col) * 4;
            data[row * w + col] = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
    }
    let valid = data.iter().map(|v| *v > 0.0).collect();
    Ok(DepthMap {
        width: w,
        height: h,
        data,
        valid,
    })
}

// ---------------------------------------------------------------------------
// PPM P6 images <-> [3,h,w] tensors in [0,1]
// ---------------------------------------------------------------------------

pub fn save_ppm(path: &Path, image: &Tensor<f32>) -> Result<(), FormatError> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let data = image.data();
    for row in 0..h {
        for col in 0..w {
            for c in 0..3 {
                let v = data[(c * h + row) * w + col].clamp(0.0, 1.0);
                out.push((v * 255.0 + 0.5) as u8);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<Tensor<f32>, FormatError> {
    let file = name_of(path);
    let bytes = fs::read(path)?;
    // four whitespace-separated header tokens, one whitespace byte, raw pixels
    let mut pos = 0;
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens.len() != 4 || tokens[0] != "P6" {
        return Err(FormatError::BadMagic { file, expected: "P6" });
    }
    let parse = |i: usize, what: &str| -> Result<usize, FormatError> {
        tokens[i].parse().map_err(|_| FormatError::Corrupt {
            file: name_of(path),
            msg: format!("bad {what} {:?}", tokens[i]),
        })
    };
    let w = parse(1, "width")?;
    let h = parse(2, "height")?;
    if tokens[3] != "255" {
        return Err(FormatError::Corrupt {
            file,
            msg: format!("unsupported maxval {:?}", tokens[3]),
        });
    }
    if bytes.len() < pos + 3 * w * h {
        return Err(FormatError::Corrupt {
            file,
            msg: "truncated pixel data".into(),
        });
    }
    let mut t = Tensor::<f32>::zeros(&[3, h, w]);
    let data = t.data_mut();
    for row in 0..h {
        for col in 0..w {
            for c in 0..3 {
                let v = bytes[pos + (row * w + col) * 3 + c];
                data[(c * h + row) * w + col] = v as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vpnet_core::rng::Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("vpnet-fmt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn calib_round_trips_exactly() {
        let rig = CameraRig::new(
            110.123456789,
            109.87654321,
            63.5,
            31.25,
            0.54321,
            128,
            64,
        )
        .unwrap();
        let p = tmp("calib.txt");
        save_calib(&p, &rig).unwrap();
        let back = load_calib(&p).unwrap();
        assert_eq!(rig, back);
    }

    #[test]
    fn calib_reports_missing_keys_by_name() {
        let p = tmp("calib_missing.txt");
        fs::write(&p, "fx=100\nfy=100\ncx=50\ncy=50\nwidth=100\nheight=100\n").unwrap();
        let err = load_calib(&p).unwrap_err();
        assert!(err.to_string().contains("missing key: baseline"), "{err}");
    }

    #[test]
    fn calib_rejects_negative_focal_naming_it() {
        let p = tmp("calib_bad.txt");
        fs::write(
            &p,
            "fx=-1\nfy=100\ncx=50\ncy=50\nbaseline=0.5\nwidth=100\nheight=100\n",
        )
        .unwrap();
        let err = load_calib(&p).unwrap_err();
        assert!(err.to_string().contains("fx"), "{err}");
    }

    #[test]
    fn points_round_trip_bit_exact() {
        let mut rng = Rng::new(3);
        let pts: Vec<[f32; 3]> = (0..100)
            .map(|_| {
                [
                    rng.range(-5.0, 5.0) as f32,
                    rng.range(-2.0, 2.0) as f32,
                    rng.range(0.5, 90.0) as f32,
                ]
            })
            .collect();
        let cloud = PointCloud::from_points(pts).unwrap();
        let p = tmp("pts.pcb");
        save_points(&p, &cloud).unwrap();
        let back = load_points(&p).unwrap();
        assert_eq!(cloud.points(), back.points());
    }

    #[test]
    fn xyz_text_points_are_accepted() {
        let p = tmp("pts.xyz");
        fs::write(&p, "1.0 2.0 3.0\n-0.5 0.25 10.0\n").unwrap();
        let cloud = load_points(&p).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points()[1], [-0.5, 0.25, 10.0]);
    }

    #[test]
    fn pfm_round_trips_to_f32_exactness() {
        let depth = DepthMap {
            width: 3,
            height: 2,
            data: vec![1.5, 0.0, 42.25, 7.125, 99.9, 3.0],
            valid: vec![true, false, true, true, true, true],
        };
        let p = tmp("d.pfm");
        save_pfm(&p, &depth).unwrap();
        let back = load_pfm(&p).unwrap();
        assert_eq!(back.width, 3);
        assert_eq!(back.height, 2);
        for i in 0..6 {
            if depth.valid[i] {
                assert_eq!(back.data[i], depth.data[i]);
                assert!(back.valid[i]);
            } else {
                assert!(!back.valid[i]);
            }
        }
    }

    #[test]
    fn pfm_rejects_corrupt_scale_line() {
        let p = tmp("bad.pfm");
        fs::write(&p, b"Pf\n2 2\nnot-a-number\n0000000000000000").unwrap();
        let err = load_pfm(&p).unwrap_err();
        assert!(err.to_string().contains("scale"), "{err}");
    }

    #[test]
    fn pfm_rejects_big_endian() {
        let p = tmp("be.pfm");
        fs::write(&p, b"Pf\n1 1\n1.0\n\x00\x00\x00\x00").unwrap();
        let err = load_pfm(&p).unwrap_err();
        assert!(err.to_string().contains("big-endian"), "{err}");
    }

    #[test]
    fn ppm_round_trips_8bit_levels() {
        let img = Tensor::<f32>::from_fn(&[3, 4, 5], |i| (i % 256) as f32 / 255.0);
        let p = tmp("img.ppm");
        save_ppm(&p, &img).unwrap();
        let back = load_ppm(&p).unwrap();
        assert_eq!(img.data(), back.data());
    }
}

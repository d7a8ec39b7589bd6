use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scan, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{ObjectClass, Pose, RotatedBox};

pub const SCAN_MAGIC: [u8; 8] = *b"TPSCAN1\0";
pub const SCAN_VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn save_scan(path: &Path, points: &[[f32; 4]]) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER + points.len() * 16);
    buf.extend_from_slice(&SCAN_MAGIC);
    buf.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    let n = u32::try_from(points.len())
        .map_err(|_| Error::InvalidArgument("too many points".into()))?;
    buf.extend_from_slice(&n.to_le_bytes());
    for p in points {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_scan(path: &Path) -> Result<Vec<[f32; 4]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER {
        return Err(Error::format(
            path,
            format!("truncated header ({} bytes)", bytes.len()),
        ));
    }
    if bytes[..8] != SCAN_MAGIC {
        return Err(Error::format(path, "bad magic, not a scan file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != SCAN_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported scan version {version}"),
        ));
    }
    let n = u32_at(12) as usize;
    let want = HEADER + n * 16;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!(
                "expected {want} bytes for {n} points, found {}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes[HEADER..]
        .chunks_exact(16)
        .map(|c| {
            std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()))
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScanRecord {
    file: String,
    pose: Pose,
    timestamp: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    cx: f64,
    cy: f64,
    cz: f64,
    l: f64,
    w: f64,
    h: f64,
    yaw: f64,
    class: ObjectClass,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    scans: Vec<ScanRecord>,
    core_annotations: Vec<AnnotationRecord>,
}

/// Writes the manifest at `path` and one scan file per scan next to it,
/// named `<stem>.scan<i>.bin`.
pub fn save_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad manifest path {}", path.display())))?;
    let mut scans = Vec::with_capacity(seq.scans().len());
    for (i, s) in seq.scans().iter().enumerate() {
        let file = format!("{stem}.scan{i}.bin");
        save_scan(&dir.join(&file), &s.points)?;
        scans.push(ScanRecord {
            file,
            pose: s.pose,
            timestamp: s.timestamp,
        });
    }
    let core_annotations = seq
        .annotations
        .iter()
        .map(|b| AnnotationRecord {
            cx: b.cx,
            cy: b.cy,
            cz: b.cz,
            l: b.l,
            w: b.w,
            h: b.h,
            yaw: b.yaw,
            class: b.class,
        })
        .collect();
    let json = serde_json::to_string_pretty(&Manifest {
        scans,
        core_annotations,
    })?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut scans = Vec::with_capacity(manifest.scans.len());
    for r in manifest.scans {
        let file: PathBuf = dir.join(&r.file);
        scans.push(Scan {
            points: load_scan(&file)?,
            pose: r.pose,
            timestamp: r.timestamp,
        });
    }
    let annotations = manifest
        .core_annotations
        .into_iter()
        .map(|a| RotatedBox {
            cx: a.cx,
            cy: a.cy,
            cz: a.cz,
            l: a.l,
            w: a.w,
            h: a.h,
            yaw: a.yaw,
            class: a.class,
            score: 1.0,
        })
        .collect();
    Sequence::new(scans, annotations).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sequence {
        let scans = (0..3)
            .map(|i| Scan {
                points: (0..5)
                    .map(|k| [k as f32 * 0.37, -1.1 * i as f32, 0.1, 0.25])
                    .collect(),
                pose: Pose::from_yaw(0.1 * i as f64, [i as f64, 0.5, 0.0]),
                timestamp: 0.1 * i as f64,
            })
            .collect();
        let ann = vec![RotatedBox::new(
            10.0,
            -3.0,
            -1.0,
            4.5,
            1.9,
            1.6,
            0.3,
            ObjectClass::Vehicle,
        )];
        Sequence::new(scans, ann).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seq.json");
        let s = sample();
        save_sequence(&s, &p).unwrap();
        assert_eq!(load_sequence(&p).unwrap(), s);
    }

    #[test]
    fn empty_annotations_allowed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bg.json");
        let mut s = sample();
        s.annotations.clear();
        save_sequence(&s, &p).unwrap();
        assert!(load_sequence(&p).unwrap().annotations.is_empty());
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seq.json");
        save_sequence(&sample(), &p).unwrap();
        let scan = dir.path().join("seq.scan0.bin");
        let mut b = fs::read(&scan).unwrap();
        b[0] = b'X';
        fs::write(&scan, b).unwrap();
        let err = load_sequence(&p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn truncated_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        save_scan(&p, &[[1.0, 2.0, 3.0, 0.5]; 3]).unwrap();
        let b = fs::read(&p).unwrap();
        fs::write(&p, &b[..b.len() - 3]).unwrap();
        assert!(load_scan(&p).unwrap_err().to_string().contains("expected"));
        let mut v = b.clone();
        v[8] = 9;
        fs::write(&p, v).unwrap();
        assert!(load_scan(&p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seq.json");
        save_sequence(&sample(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
        m["scans"][2]["timestamp"] = serde_json::json!(0.0);
        fs::write(&p, m.to_string()).unwrap();
        assert!(load_sequence(&p)
            .unwrap_err()
            .to_string()
            .contains("timestamps"));
    }
}

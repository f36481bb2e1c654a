//! On-disk formats: PPM/PGM images, the binary checkpoint, and the
//! dataset directory layout.
//!
//! Dataset layout, one subdirectory per sequence:
//!
//! ```text
//! root/seq_000/calib.json           per-view projection + extrinsics
//! root/seq_000/poses.json           dt plus one {t, tx, ty, yaw} per frame
//! root/seq_000/frame_000/view_0.ppm rendered camera images
//! root/seq_000/frame_000/gt.pgm     per-cell class ids
//! root/seq_000/frame_000/objects.txt  O rows (in-grid cars), V rows (visibility)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::encoder::{AdamWState, ModelParams};
use crate::geometry::{CameraRig, CameraView, EgoPose, Extrinsics};
use crate::scene::{FrameData, GroundTruthBev, GtObject, SequenceData, VisibilityLabel};
use crate::tensor::{FeatureMap, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------
// PPM / PGM

/// Write a 3-channel map as binary PPM; values are clamped to [0, 1] and
/// quantized to 8 bits.
pub fn write_ppm(path: &Path, img: &FeatureMap) -> Result<()> {
    if img.c != 3 {
        return Err(Error::InvalidInput(format!(
            "PPM needs 3 channels, map has {}",
            img.c
        )));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    bytes.reserve(img.h * img.w * 3);
    for v in img.data() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write one byte per cell as binary PGM (row-major, maxval 255).
pub fn write_pgm(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::ShapeMismatch(format!(
            "PGM {}x{} needs {} bytes, got {}",
            w,
            h,
            w * h,
            data.len()
        )));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_netpbm_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let mut pos = 0usize;
    let mut token = |expect: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse(format!(
                "{}: truncated header (missing {})",
                path.display(),
                expect
            )));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let m = token("magic")?;
    if m != magic {
        return Err(Error::Parse(format!(
            "{}: expected {} file, found '{}'",
            path.display(),
            magic,
            m
        )));
    }
    let w: usize = token("width")?.parse().map_err(|_| {
        Error::Parse(format!("{}: bad width", path.display()))
    })?;
    let h: usize = token("height")?.parse().map_err(|_| {
        Error::Parse(format!("{}: bad height", path.display()))
    })?;
    let maxval = token("maxval")?;
    if maxval != "255" {
        return Err(Error::Parse(format!(
            "{}: only maxval 255 is supported",
            path.display()
        )));
    }
    // single whitespace byte separates header from raster
    pos += 1;
    if pos > bytes.len() {
        return Err(Error::Parse(format!("{}: missing raster", path.display())));
    }
    Ok((w, h, &bytes[pos..]))
}

pub fn read_ppm(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path)?;
    let (w, h, raster) = parse_netpbm_header(&bytes, "P6", path)?;
    let need = w * h * 3;
    if raster.len() < need {
        return Err(Error::Parse(format!(
            "{}: raster has {} of {} bytes",
            path.display(),
            raster.len(),
            need
        )));
    }
    let mut img = FeatureMap::zeros(h, w, 3);
    for (dst, src) in img.data_mut().iter_mut().zip(raster.iter()) {
        *dst = *src as f64 / 255.0;
    }
    Ok(img)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (w, h, raster) = parse_netpbm_header(&bytes, "P5", path)?;
    if raster.len() < w * h {
        return Err(Error::Parse(format!(
            "{}: raster has {} of {} bytes",
            path.display(),
            raster.len(),
            w * h
        )));
    }
    Ok((w, h, raster[..w * h].to_vec()))
}

// ---------------------------------------------------------------------
// Checkpoints

pub const CKPT_MAGIC: &[u8; 4] = b"BEVG";
pub const CKPT_VERSION: u32 = 1;

/// A parsed checkpoint: config digest, optimizer step, named tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize parameters (and the optimizer state, when given) with the
/// owning config's digest. Optimizer tensors are stored under `adam.m.`
/// and `adam.v.` prefixes.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    opt: Option<&AdamWState>,
    digest: &[u8; 32],
) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = params.tensors();
    if let Some(o) = opt {
        for (name, t) in o.m.tensors() {
            entries.push((format!("adam.m.{}", name), t));
        }
        for (name, t) in o.v.tensors() {
            entries.push((format!("adam.v.{}", name), t));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    put_u32(&mut out, CKPT_VERSION);
    out.extend_from_slice(digest);
    put_u64(&mut out, opt.map_or(0, |o| o.step));
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.dims().len() as u32);
        for d in t.dims() {
            put_u64(&mut out, *d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            version
        )));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32)?);
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: bad tensor name", path.display())))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    Ok(Checkpoint { digest, step, tensors })
}

/// Copy a checkpoint into live parameters (and optimizer state when
/// given), verifying the config digest and every tensor's shape.
pub fn load_into(
    ck: &Checkpoint,
    params: &mut ModelParams,
    opt: Option<&mut AdamWState>,
    digest: &[u8; 32],
) -> Result<()> {
    if &ck.digest != digest {
        return Err(Error::Checkpoint(
            "config digest differs from the checkpoint's".into(),
        ));
    }
    let fill = |dst: &mut ModelParams, prefix: &str| -> Result<()> {
        for (name, t) in dst.tensors_mut() {
            let key = format!("{}{}", prefix, name);
            let found = ck
                .tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", key)))?;
            if found.1.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has dims {:?}, expected {:?}",
                    key,
                    found.1.dims(),
                    t.dims()
                )));
            }
            t.data_mut().copy_from_slice(found.1.data());
        }
        Ok(())
    };
    fill(params, "")?;
    if let Some(o) = opt {
        fill(&mut o.m, "adam.m.")?;
        fill(&mut o.v, "adam.v.")?;
        o.step = ck.step;
    }
    Ok(())
}

/// Standalone tensor dump: rank as u32, dims as u64 each, then the values
/// as little-endian f64, matching the checkpoint's per-tensor encoding.
pub fn write_raw_tensor(path: &Path, dims: &[u64], data: &[f64]) -> Result<()> {
    let n: u64 = dims.iter().product();
    if n as usize != data.len() {
        return Err(Error::InvalidInput(format!(
            "raw tensor dims {:?} do not cover {} values",
            dims,
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(4 + 8 * dims.len() + 8 * data.len());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

// ---------------------------------------------------------------------
// Dataset directory

fn seq_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("seq_{:03}", i))
}

fn frame_dir(seq: &Path, k: usize) -> PathBuf {
    seq.join(format!("frame_{:03}", k))
}

#[derive(Serialize, Deserialize)]
struct CalibViewRecord {
    id: usize,
    width: usize,
    height: usize,
    #[serde(rename = "T")]
    t: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    translation: Option<Vec<f64>>,
}

/// JSON array of per-view records: id, image size, the 3x4 projection
/// row-major under "T", and (when known) row-major rotation plus
/// translation so the rig can be re-perturbed later.
pub fn write_calib(path: &Path, rig: &CameraRig) -> Result<()> {
    let mut records = Vec::with_capacity(rig.n_views());
    for view in &rig.views {
        let mut t = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..4 {
                t.push(view.t[(r, c)]);
            }
        }
        let (rotation, translation) = match &view.extrinsics {
            Some(ext) => {
                let mut rot = Vec::with_capacity(9);
                for r in 0..3 {
                    for c in 0..3 {
                        rot.push(ext.rotation[(r, c)]);
                    }
                }
                (Some(rot), Some(ext.translation.iter().copied().collect()))
            }
            None => (None, None),
        };
        records.push(CalibViewRecord {
            id: view.id,
            width: view.width,
            height: view.height,
            t,
            rotation,
            translation,
        });
    }
    let mut s = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_calib(path: &Path) -> Result<CameraRig> {
    let text = fs::read_to_string(path)?;
    let records: Vec<CalibViewRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    let mut views = Vec::with_capacity(records.len());
    for rec in records {
        if rec.t.len() != 12 {
            return Err(Error::Parse(format!(
                "{}: view {} has {} projection entries, want 12",
                path.display(),
                rec.id,
                rec.t.len()
            )));
        }
        let mut t = Matrix3x4::zeros();
        for r in 0..3 {
            for c in 0..4 {
                t[(r, c)] = rec.t[r * 4 + c];
            }
        }
        let mut view = CameraView::new(t, rec.width, rec.height, rec.id)?;
        view.extrinsics = match (rec.rotation, rec.translation) {
            (Some(rot), Some(tr)) => {
                if rot.len() != 9 || tr.len() != 3 {
                    return Err(Error::Parse(format!(
                        "{}: view {} extrinsics have wrong arity",
                        path.display(),
                        rec.id
                    )));
                }
                let mut rotation = Matrix3::zeros();
                for r in 0..3 {
                    for c in 0..3 {
                        rotation[(r, c)] = rot[r * 3 + c];
                    }
                }
                Some(Extrinsics {
                    rotation,
                    translation: Vector3::new(tr[0], tr[1], tr[2]),
                })
            }
            (None, None) => None,
            _ => {
                return Err(Error::Parse(format!(
                    "{}: view {} has rotation without translation or vice versa",
                    path.display(),
                    rec.id
                )))
            }
        };
        views.push(view);
    }
    if views.is_empty() {
        return Err(Error::Parse(format!("{}: empty calib", path.display())));
    }
    Ok(CameraRig { views })
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    t: f64,
    tx: f64,
    ty: f64,
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct PosesFile {
    dt: f64,
    poses: Vec<PoseRecord>,
}

fn write_poses(path: &Path, seq: &SequenceData) -> Result<()> {
    let file = PosesFile {
        dt: seq.dt,
        poses: seq
            .frames
            .iter()
            .map(|f| PoseRecord { t: f.t, tx: f.pose.tx, ty: f.pose.ty, yaw: f.pose.yaw })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn read_poses(path: &Path) -> Result<(f64, Vec<(f64, EgoPose)>)> {
    let text = fs::read_to_string(path)?;
    let file: PosesFile = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {}", path.display(), e)))?;
    let poses = file
        .poses
        .into_iter()
        .map(|p| (p.t, EgoPose { tx: p.tx, ty: p.ty, yaw: p.yaw }))
        .collect();
    Ok((file.dt, poses))
}

fn write_objects(path: &Path, gt: &GroundTruthBev, vis: &[VisibilityLabel]) -> Result<()> {
    let mut s = String::new();
    for o in &gt.objects {
        s.push_str(&format!(
            "O {} {} {} {} {} {} {}\n",
            o.id,
            o.center_cell.0,
            o.center_cell.1,
            o.center_ego.0,
            o.center_ego.1,
            o.velocity_ego.0,
            o.velocity_ego.1
        ));
    }
    for v in vis {
        s.push_str(&format!("V {} {}\n", v.id, v.visible_fraction));
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_objects(path: &Path) -> Result<(Vec<GtObject>, Vec<VisibilityLabel>)> {
    let text = fs::read_to_string(path)?;
    let mut objects = Vec::new();
    let mut vis = Vec::new();
    for line in text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = || Error::Parse(format!("{}: bad row '{}'", path.display(), line));
        match f[0] {
            "O" if f.len() == 8 => {
                let mut v = [0.0; 6];
                for (i, x) in v.iter_mut().enumerate() {
                    *x = f[2 + i].parse().map_err(|_| bad())?;
                }
                objects.push(GtObject {
                    id: f[1].parse().map_err(|_| bad())?,
                    center_cell: (v[0], v[1]),
                    center_ego: (v[2], v[3]),
                    velocity_ego: (v[4], v[5]),
                });
            }
            "V" if f.len() == 3 => {
                vis.push(VisibilityLabel {
                    id: f[1].parse().map_err(|_| bad())?,
                    visible_fraction: f[2].parse().map_err(|_| bad())?,
                });
            }
            _ => return Err(bad()),
        }
    }
    Ok((objects, vis))
}

/// Write sequences to a dataset directory. Rewrites are byte-identical
/// for identical inputs.
pub fn save_dataset(root: &Path, sequences: &[SequenceData], rig: &CameraRig) -> Result<()> {
    fs::create_dir_all(root)?;
    for (si, seq) in sequences.iter().enumerate() {
        let sdir = seq_dir(root, si);
        fs::create_dir_all(&sdir)?;
        write_calib(&sdir.join("calib.json"), rig)?;
        write_poses(&sdir.join("poses.json"), seq)?;
        for (fi, frame) in seq.frames.iter().enumerate() {
            let fdir = frame_dir(&sdir, fi);
            fs::create_dir_all(&fdir)?;
            for (vi, img) in frame.images.iter().enumerate() {
                write_ppm(&fdir.join(format!("view_{}.ppm", vi)), img)?;
            }
            let classes: Vec<u8> = frame.gt.classes.clone();
            write_pgm(&fdir.join("gt.pgm"), frame.gt.w, frame.gt.h, &classes)?;
            write_objects(&fdir.join("objects.txt"), &frame.gt, &frame.visibility)?;
        }
    }
    Ok(())
}

fn sorted_subdirs(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if entry.path().is_dir() && name.starts_with(prefix) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Read a dataset directory back. The rig is taken from the first
/// sequence's calibration file.
pub fn load_dataset(root: &Path) -> Result<(Vec<SequenceData>, CameraRig)> {
    let seq_dirs = sorted_subdirs(root, "seq_")?;
    if seq_dirs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no seq_* directories",
            root.display()
        )));
    }
    let rig = read_calib(&seq_dirs[0].join("calib.json"))?;
    let mut sequences = Vec::with_capacity(seq_dirs.len());
    for sdir in &seq_dirs {
        let (dt, poses) = read_poses(&sdir.join("poses.json"))?;
        let fdirs = sorted_subdirs(sdir, "frame_")?;
        if fdirs.len() != poses.len() {
            return Err(Error::Parse(format!(
                "{}: {} pose rows but {} frame dirs",
                sdir.display(),
                poses.len(),
                fdirs.len()
            )));
        }
        let mut frames = Vec::with_capacity(fdirs.len());
        for (fdir, (t, pose)) in fdirs.iter().zip(poses) {
            let mut images = Vec::with_capacity(rig.n_views());
            for vi in 0..rig.n_views() {
                images.push(read_ppm(&fdir.join(format!("view_{}.ppm", vi)))?);
            }
            let (w, h, classes) = read_pgm(&fdir.join("gt.pgm"))?;
            let (objects, visibility) = read_objects(&fdir.join("objects.txt"))?;
            frames.push(FrameData {
                t,
                pose,
                images,
                gt: GroundTruthBev { h, w, classes, objects },
                visibility,
            });
        }
        sequences.push(SequenceData { frames, dt });
    }
    Ok((sequences, rig))
}

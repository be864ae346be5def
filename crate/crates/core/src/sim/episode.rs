//! Episode container and the on-disk `.bfae` format.
//!
//! Layout (little-endian): magic `BFAE`, version u32, task-name length u32 +
//! bytes, frame count u32, then per frame: left wrist 24×24 f32, top 48×48
//! f32, right wrist 24×24 f32, proprioception f32×6, action f32×6, stage_id
//! u16, arm states u8×2. One file per episode, named `<task>_<seed>.bfae`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ArmState, TaskName, TOP_RES, WRIST_RES};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BFAE";
pub const VERSION: u32 = 1;

/// Single-channel image, pixels in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(w: usize, h: usize) -> Image {
        Image { w, h, pixels: vec![0.0; w * h] }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.w + x]
    }

    pub fn max_at(&mut self, x: usize, y: usize, v: f32) {
        let p = &mut self.pixels[y * self.w + x];
        if v > *p {
            *p = v;
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Fixed order: [left_wrist, top, right_wrist].
    pub views: [Image; 3],
    pub proprio: [f32; 6],
    pub action: [f32; 6],
    pub stage_id: u16,
    pub arm_states: (ArmState, ArmState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub task: TaskName,
    pub seed: u64,
    pub frames: Vec<Frame>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}.bfae", self.task, self.seed)
    }
}

pub fn write_episode(path: &Path, ep: &EpisodeRecord) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let name = ep.task.as_str().as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(ep.frames.len() as u32).to_le_bytes())?;
    for f in &ep.frames {
        debug_assert_eq!(f.views[0].pixels.len(), WRIST_RES * WRIST_RES);
        debug_assert_eq!(f.views[1].pixels.len(), TOP_RES * TOP_RES);
        debug_assert_eq!(f.views[2].pixels.len(), WRIST_RES * WRIST_RES);
        for img in &f.views {
            for &p in &img.pixels {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        for &v in &f.proprio {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &f.action {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&f.stage_id.to_le_bytes())?;
        w.write_all(&[f.arm_states.0.to_u8(), f.arm_states.1.to_u8()])?;
    }
    w.flush()?;
    Ok(())
}

/// Read an episode; the seed is recovered from the `<task>_<seed>.bfae`
/// file name (it is not part of the byte stream).
pub fn read_episode(path: &Path) -> Result<EpisodeRecord> {
    let bad = |reason: String| Error::Format { path: path.display().to_string(), reason };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic (expected BFAE)".into()));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated version".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let name_len = read_u32(&mut r).map_err(|_| bad("truncated name".into()))? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|_| bad("truncated name".into()))?;
    let name = String::from_utf8(name).map_err(|_| bad("task name not UTF-8".into()))?;
    let task: TaskName = name.parse()?;
    let count = read_u32(&mut r).map_err(|_| bad("truncated frame count".into()))? as usize;

    let seed = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit('_').next())
        .and_then(|s| s.parse::<u64>().ok())
        .unwrap_or(0);

    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let left = read_image(&mut r, WRIST_RES, WRIST_RES).map_err(|_| bad("truncated frame".into()))?;
        let top = read_image(&mut r, TOP_RES, TOP_RES).map_err(|_| bad("truncated frame".into()))?;
        let right = read_image(&mut r, WRIST_RES, WRIST_RES).map_err(|_| bad("truncated frame".into()))?;
        let mut proprio = [0f32; 6];
        for v in &mut proprio {
            *v = read_f32(&mut r).map_err(|_| bad("truncated proprio".into()))?;
        }
        let mut action = [0f32; 6];
        for v in &mut action {
            *v = read_f32(&mut r).map_err(|_| bad("truncated action".into()))?;
        }
        let mut sid = [0u8; 2];
        r.read_exact(&mut sid).map_err(|_| bad("truncated stage id".into()))?;
        let stage_id = u16::from_le_bytes(sid);
        let mut st = [0u8; 2];
        r.read_exact(&mut st).map_err(|_| bad("truncated arm states".into()))?;
        let arm_states = (
            ArmState::from_u8(st[0]).ok_or_else(|| bad(format!("bad arm state {}", st[0])))?,
            ArmState::from_u8(st[1]).ok_or_else(|| bad(format!("bad arm state {}", st[1])))?,
        );
        frames.push(Frame { views: [left, top, right], proprio, action, stage_id, arm_states });
    }
    Ok(EpisodeRecord { task, seed, frames })
}

fn read_image(r: &mut impl Read, w: usize, h: usize) -> std::io::Result<Image> {
    let mut pixels = vec![0f32; w * h];
    for p in &mut pixels {
        *p = read_f32(r)?;
    }
    Ok(Image { w, h, pixels })
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(r: &mut impl Read) -> std::io::Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

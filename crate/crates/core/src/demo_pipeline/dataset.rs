//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json                  {"format_version", "episodes": [dir, ..]}
//! <root>/episode_00000/episode.json     goal, task, variation, collide flags, frame count
//! <root>/episode_00000/frame_00000.bin  one binary record per frame
//! ```
//!
//! Frame records are little endian: magic `PAFR`, `u32` version, `u64`
//! timestep, gripper position (3 x `f64`, meters), orientation quaternion
//! (`w, x, y, z` as `f64`), `u8` open bit, `u32` joint count and joint
//! velocities (`f64`, rad/s), `u32` view count, then per view: `u32` width,
//! `u32` height, intrinsics (9 x `f64`, row-major), extrinsics (16 x `f64`,
//! row-major), RGB bytes (`height * width * 3`, 0-255), depth
//! (`height * width` x `f32`, meters).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::{DemoEpisode, DemoFrame};
use crate::error::{Error, Result};
use crate::voxelizer::CameraView;

pub const DATASET_VERSION: u32 = 1;
const FRAME_MAGIC: &[u8; 4] = b"PAFR";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    episodes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeManifest {
    format_version: u32,
    task_id: String,
    variation_id: u32,
    language_goal: String,
    num_frames: usize,
    collide_flags: Vec<bool>,
}

fn check_version(found: u32) -> Result<()> {
    if found != DATASET_VERSION {
        return Err(Error::Incompatible { found, expected: DATASET_VERSION });
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Corrupt("frame record is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Write episodes under `root`, replacing any previous manifest.
pub fn save_dataset(episodes: &[DemoEpisode], root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut names = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        ep.validate()?;
        let name = format!("episode_{i:05}");
        let dir = root.join(&name);
        fs::create_dir_all(&dir)?;
        let manifest = EpisodeManifest {
            format_version: DATASET_VERSION,
            task_id: ep.task_id.clone(),
            variation_id: ep.variation_id,
            language_goal: ep.language_goal.clone(),
            num_frames: ep.frames.len(),
            collide_flags: ep.collide_flags.clone(),
        };
        fs::write(dir.join("episode.json"), serde_json::to_vec_pretty(&manifest)?)?;
        for (j, frame) in ep.frames.iter().enumerate() {
            let mut w = BufWriter::new(File::create(dir.join(format!("frame_{j:05}.bin")))?);
            write_frame(&mut w, frame)?;
            w.flush()?;
        }
        names.push(name);
    }
    let manifest = Manifest { format_version: DATASET_VERSION, episodes: names };
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load every episode listed in the manifest.
pub fn load_dataset(root: &Path) -> Result<Vec<DemoEpisode>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
    check_version(manifest.format_version)?;
    manifest.episodes.iter().map(|name| load_episode(&root.join(name))).collect()
}

/// Load a single episode directory.
pub fn load_episode(dir: &Path) -> Result<DemoEpisode> {
    let m: EpisodeManifest = serde_json::from_slice(&fs::read(dir.join("episode.json"))?)?;
    check_version(m.format_version)?;
    let mut frames = Vec::with_capacity(m.num_frames);
    for j in 0..m.num_frames {
        let mut r = BufReader::new(File::open(dir.join(format!("frame_{j:05}.bin")))?);
        frames.push(read_frame(&mut r)?);
    }
    Ok(DemoEpisode {
        frames,
        language_goal: m.language_goal,
        task_id: m.task_id,
        variation_id: m.variation_id,
        collide_flags: m.collide_flags,
    })
}

fn write_frame(w: &mut impl Write, f: &DemoFrame) -> Result<()> {
    w.write_all(FRAME_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u64::<LittleEndian>(f.timestep)?;
    for v in f.gripper_position {
        w.write_f64::<LittleEndian>(v)?;
    }
    let q = f.gripper_orientation.quaternion();
    for v in [q.w, q.i, q.j, q.k] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u8(u8::from(f.gripper_open))?;
    w.write_u32::<LittleEndian>(f.joint_velocities.len() as u32)?;
    for v in &f.joint_velocities {
        w.write_f64::<LittleEndian>(*v)?;
    }
    w.write_u32::<LittleEndian>(f.views.len() as u32)?;
    for view in &f.views {
        w.write_u32::<LittleEndian>(view.width as u32)?;
        w.write_u32::<LittleEndian>(view.height as u32)?;
        for r in 0..3 {
            for c in 0..3 {
                w.write_f64::<LittleEndian>(view.intrinsics[(r, c)])?;
            }
        }
        for r in 0..4 {
            for c in 0..4 {
                w.write_f64::<LittleEndian>(view.extrinsics[(r, c)])?;
            }
        }
        w.write_all(&view.rgb)?;
        for d in &view.depth {
            w.write_f32::<LittleEndian>(*d)?;
        }
    }
    Ok(())
}

fn read_frame(r: &mut impl Read) -> Result<DemoFrame> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != FRAME_MAGIC {
        return Err(Error::Corrupt("bad frame record magic".into()));
    }
    check_version(r.read_u32::<LittleEndian>().map_err(truncated)?)?;
    let timestep = r.read_u64::<LittleEndian>().map_err(truncated)?;
    let mut pos = [0f64; 3];
    r.read_f64_into::<LittleEndian>(&mut pos).map_err(truncated)?;
    let mut q = [0f64; 4];
    r.read_f64_into::<LittleEndian>(&mut q).map_err(truncated)?;
    let open = r.read_u8().map_err(truncated)? != 0;
    let nj = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut joint_velocities = vec![0f64; nj];
    r.read_f64_into::<LittleEndian>(&mut joint_velocities).map_err(truncated)?;
    let nv = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let mut views = Vec::with_capacity(nv);
    for _ in 0..nv {
        let width = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let height = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut k = [0f64; 9];
        r.read_f64_into::<LittleEndian>(&mut k).map_err(truncated)?;
        let mut e = [0f64; 16];
        r.read_f64_into::<LittleEndian>(&mut e).map_err(truncated)?;
        let mut rgb = vec![0u8; width * height * 3];
        r.read_exact(&mut rgb).map_err(truncated)?;
        let mut depth = vec![0f32; width * height];
        r.read_f32_into::<LittleEndian>(&mut depth).map_err(truncated)?;
        views.push(CameraView {
            width,
            height,
            rgb,
            depth,
            intrinsics: Matrix3::from_row_slice(&k),
            extrinsics: Matrix4::from_row_slice(&e),
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Corrupt("trailing bytes in frame record".into()));
    }
    Ok(DemoFrame {
        views,
        gripper_position: pos,
        gripper_orientation: UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
        gripper_open: open,
        joint_velocities,
        timestep,
    })
}

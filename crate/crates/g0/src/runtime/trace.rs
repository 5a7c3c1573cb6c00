//! Episode traces: per-tick records plus enough header to re-simulate. The
//! trace pairs a human-readable CSV with a binary action log (magic "G0TR",
//! little-endian f32 actions, same float conventions as the corpus format).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::cfg::Config;
use crate::error::{Error, Result};
use crate::sim::scene::SceneSpec;
use crate::sim::world::reset;

const MAGIC: &[u8; 4] = b"G0TR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t_us: u64,
    /// Instruction sequence number in force (0 before the first arrives).
    pub seq: u64,
    pub action: Vec<f32>,
    /// Rubric score after this tick's step.
    pub score: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub task: String,
    pub embodiment: String,
    pub scene_seed: u64,
    pub ticks: Vec<TickRecord>,
    pub final_score: u32,
    pub max_score: u32,
    /// Ticks spent idling before the first instruction.
    pub waits: u32,
    pub chunk_requests: u32,
    /// Largest simulated gap between consecutive executor ticks.
    pub max_tick_gap_us: u64,
}

impl EpisodeTrace {
    /// CSV view plus binary action log at `<base>.csv` / `<base>.act`.
    pub fn save(&self, base: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv_path = base.with_extension("csv");
        let act_path = base.with_extension("act");
        let mut csv = String::from("t_us,seq,score\n");
        for tick in &self.ticks {
            csv.push_str(&format!("{},{},{}\n", tick.t_us, tick.seq, tick.score));
        }
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

        let dim = self.ticks.first().map(|t| t.action.len()).unwrap_or(0);
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut buf, &self.task);
        write_str(&mut buf, &self.embodiment);
        buf.extend_from_slice(&self.scene_seed.to_le_bytes());
        for v in [
            self.ticks.len() as u32,
            dim as u32,
            self.final_score,
            self.max_score,
            self.waits,
            self.chunk_requests,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.max_tick_gap_us.to_le_bytes());
        for tick in &self.ticks {
            buf.extend_from_slice(&tick.t_us.to_le_bytes());
            buf.extend_from_slice(&tick.seq.to_le_bytes());
            buf.extend_from_slice(&tick.score.to_le_bytes());
            for a in &tick.action {
                buf.extend_from_slice(&a.to_le_bytes());
            }
        }
        fs::write(&act_path, &buf).map_err(|e| Error::io(&act_path, e))?;
        Ok((csv_path, act_path))
    }

    pub fn load(act_path: &Path) -> Result<EpisodeTrace> {
        let mut data = Vec::new();
        fs::File::open(act_path)
            .map_err(|e| Error::io(act_path, e))?
            .read_to_end(&mut data)
            .map_err(|e| Error::io(act_path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = data
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::format(act_path, *pos as u64, "truncated trace"))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::format(act_path, 0, "bad magic, expected G0TR"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(act_path, 4, format!("unsupported version {version}")));
        }
        let task = read_str(&data, &mut pos, act_path)?;
        let embodiment = read_str(&data, &mut pos, act_path)?;
        let scene_seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let n_ticks = u32_at(&mut pos)? as usize;
        let dim = u32_at(&mut pos)? as usize;
        let final_score = u32_at(&mut pos)?;
        let max_score = u32_at(&mut pos)?;
        let waits = u32_at(&mut pos)?;
        let chunk_requests = u32_at(&mut pos)?;
        let max_tick_gap_us = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut ticks = Vec::with_capacity(n_ticks);
        for _ in 0..n_ticks {
            let t_us = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let seq = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let score = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let raw = take(&mut pos, 4 * dim)?;
            let action = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ticks.push(TickRecord {
                t_us,
                seq,
                action,
                score,
            });
        }
        Ok(EpisodeTrace {
            task,
            embodiment,
            scene_seed,
            ticks,
            final_score,
            max_score,
            waits,
            chunk_requests,
            max_tick_gap_us,
        })
    }
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(data: &[u8], pos: &mut usize, path: &Path) -> Result<String> {
    let len = u16::from_le_bytes(
        data.get(*pos..*pos + 2)
            .ok_or_else(|| Error::format(path, *pos as u64, "truncated string"))?
            .try_into()
            .unwrap(),
    ) as usize;
    *pos += 2;
    let s = data
        .get(*pos..*pos + len)
        .ok_or_else(|| Error::format(path, *pos as u64, "truncated string"))?;
    *pos += len;
    String::from_utf8(s.to_vec()).map_err(|_| Error::format(path, *pos as u64, "string not utf-8"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayOutcome {
    Verified,
    Diverged { first_tick: usize },
}

/// Re-simulate the logged actions open-loop and verify the score trace
/// tick for tick.
pub fn replay(trace: &EpisodeTrace, cfg: &Config) -> Result<ReplayOutcome> {
    let scene = SceneSpec::from_config(cfg, &trace.task)?;
    let dt = scene.world.dt;
    let mut world = reset(&scene, trace.scene_seed)?;
    for (i, tick) in trace.ticks.iter().enumerate() {
        world = world.step(&tick.action, dt)?;
        let (score, _) = crate::sim::rubric::check_progress(&world, &trace.task)?;
        if score != tick.score {
            return Ok(ReplayOutcome::Diverged { first_tick: i });
        }
    }
    let (score, _) = crate::sim::rubric::check_progress(&world, &trace.task)?;
    if score != trace.final_score {
        return Ok(ReplayOutcome::Diverged {
            first_tick: trace.ticks.len(),
        });
    }
    Ok(ReplayOutcome::Verified)
}

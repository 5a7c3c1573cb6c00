//! Corpus storage: a directory with a JSON-lines manifest plus one binary
//! file per episode (magic "G0EP"). All numeric arrays are little-endian
//! 32-bit floats, so write-then-read is bit-exact. Files are immutable once
//! written; readers may share a corpus, one writer owns it while recording.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::episode::{Episode, Frame, QualityIssue, QualityReport};
use crate::data::label::{Noun, Skill, SubtaskLabel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"G0EP";
const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    task: String,
    instruction: String,
    embodiment: String,
    frames: usize,
    rate: f32,
    pass: bool,
    reasons: Vec<QualityIssue>,
}

/// Streaming writer: episodes go to disk as they are recorded so the whole
/// corpus never has to sit in memory.
pub struct CorpusWriter {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl CorpusWriter {
    pub fn create(dir: &Path) -> Result<CorpusWriter> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(CorpusWriter {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn add(&mut self, ep: &Episode) -> Result<()> {
        let path = self.dir.join(format!("{}.g0ep", ep.id));
        write_episode_file(ep, &path)?;
        self.entries.push(ManifestEntry {
            id: ep.id.clone(),
            task: ep.task.clone(),
            instruction: ep.task_name.clone(),
            embodiment: ep.embodiment.clone(),
            frames: ep.frames.len(),
            rate: ep.source_rate,
            pass: ep.quality.pass,
            reasons: ep.quality.reasons.clone(),
        });
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        for e in &self.entries {
            let line = serde_json::to_string(e)
                .map_err(|e| Error::contract(format!("manifest serialization: {e}")))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn write_corpus(episodes: &[Episode], dir: &Path) -> Result<()> {
    let mut w = CorpusWriter::create(dir)?;
    for ep in episodes {
        w.add(ep)?;
    }
    w.finish()
}

/// Read back every episode in manifest (write) order.
pub fn read_corpus(dir: &Path) -> Result<Vec<Episode>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::format(
                &manifest_path,
                lineno as u64,
                format!("manifest line {}: {e}", lineno + 1),
            )
        })?;
        let path = dir.join(format!("{}.g0ep", entry.id));
        let mut ep = read_episode_file(&path)?;
        ep.id = entry.id;
        ep.task = entry.task;
        ep.task_name = entry.instruction;
        ep.embodiment = entry.embodiment;
        ep.quality = QualityReport {
            pass: entry.pass,
            reasons: entry.reasons,
        };
        out.push(ep);
    }
    Ok(out)
}

fn write_episode_file(ep: &Episode, path: &Path) -> Result<()> {
    let n = ep.frames.len();
    let obs_len = ep.frames.first().map(|f| f.observation.len()).unwrap_or(0);
    let proprio_dim = ep.frames.first().map(|f| f.proprio.len()).unwrap_or(0);
    let action_dim = ep.frames.first().map(|f| f.action.len()).unwrap_or(0);
    let mut buf: Vec<u8> = Vec::with_capacity(32 + n * (obs_len + proprio_dim + action_dim + 1) * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        n as u32,
        obs_len as u32,
        proprio_dim as u32,
        action_dim as u32,
        ep.segments.len() as u32,
        ep.final_score,
        ep.max_score,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ep.source_rate.to_le_bytes());
    for f in &ep.frames {
        buf.extend_from_slice(&f.t.to_le_bytes());
    }
    for f in &ep.frames {
        for v in &f.observation {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for f in &ep.frames {
        for v in &f.proprio {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for f in &ep.frames {
        for v in &f.action {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (s, e, label) in &ep.segments {
        buf.extend_from_slice(&s.to_le_bytes());
        buf.extend_from_slice(&e.to_le_bytes());
        buf.extend_from_slice(&label.skill.id().to_le_bytes());
        buf.extend_from_slice(&label.object.id().to_le_bytes());
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_episode_file(path: &Path) -> Result<Episode> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = data
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::format(path, *pos as u64, format!("truncated, wanted {n} bytes")))?;
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected G0EP"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let n = u32_at(&mut pos)? as usize;
    let obs_len = u32_at(&mut pos)? as usize;
    let proprio_dim = u32_at(&mut pos)? as usize;
    let action_dim = u32_at(&mut pos)? as usize;
    let n_segments = u32_at(&mut pos)? as usize;
    let final_score = u32_at(&mut pos)?;
    let max_score = u32_at(&mut pos)?;
    let source_rate = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let read_f32s = |pos: &mut usize, count: usize| -> Result<Vec<f32>> {
        let raw = take(pos, 4 * count)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let times = read_f32s(&mut pos, n)?;
    let obs = read_f32s(&mut pos, n * obs_len)?;
    let proprio = read_f32s(&mut pos, n * proprio_dim)?;
    let actions = read_f32s(&mut pos, n * action_dim)?;
    let mut segments = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        let s = u32_at(&mut pos)?;
        let e = u32_at(&mut pos)?;
        let skill = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        let object = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        segments.push((
            s,
            e,
            SubtaskLabel::new(
                Skill::from_id(skill).map_err(|_| Error::format(path, pos as u64, "bad skill id"))?,
                Noun::from_id(object).map_err(|_| Error::format(path, pos as u64, "bad noun id"))?,
            ),
        ));
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let seg = segments
            .iter()
            .find(|(s, e, _)| (*s as usize) <= i && i < (*e as usize))
            .map(|(_, _, l)| *l)
            .unwrap_or_else(SubtaskLabel::done);
        frames.push(Frame {
            t: times[i],
            observation: obs[i * obs_len..(i + 1) * obs_len].to_vec(),
            proprio: proprio[i * proprio_dim..(i + 1) * proprio_dim].to_vec(),
            action: actions[i * action_dim..(i + 1) * action_dim].to_vec(),
            subtask: seg,
        });
    }
    Ok(Episode {
        id: String::new(),
        task: String::new(),
        task_name: String::new(),
        embodiment: String::new(),
        frames,
        segments,
        source_rate,
        final_score,
        max_score,
        quality: QualityReport {
            pass: true,
            reasons: Vec::new(),
        },
    })
}

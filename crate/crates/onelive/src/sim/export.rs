//! Dataset export: `events.jsonl`, `segments.bin` + `segments.idx.jsonl`,
//! and `world.json` (config + seed provenance).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{InteractionEvent, Labels, World, WorldConfig};

pub const SEGMENTS_MAGIC: &[u8; 6] = b"OLSEG1";

#[derive(Debug, Serialize, Deserialize)]
struct EventLine {
    user_id: u32,
    author_id: u32,
    session_id: u32,
    ts: u64,
    click: u8,
    long_view: u8,
    follow: u8,
    gift: u8,
}

impl From<&InteractionEvent> for EventLine {
    fn from(e: &InteractionEvent) -> Self {
        EventLine {
            user_id: e.user_id,
            author_id: e.author_id,
            session_id: e.session_id,
            ts: e.ts,
            click: e.labels.click as u8,
            long_view: e.labels.long_view as u8,
            follow: e.labels.follow as u8,
            gift: e.labels.gift as u8,
        }
    }
}

pub fn write_events(events: &[InteractionEvent], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for e in events {
        let line = serde_json::to_string(&EventLine::from(e))
            .map_err(|e| Error::parse("events.jsonl", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_events(path: &Path) -> Result<Vec<InteractionEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: EventLine = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("events.jsonl line {}", i + 1), e))?;
        events.push(InteractionEvent {
            user_id: l.user_id,
            author_id: l.author_id,
            session_id: l.session_id,
            ts: l.ts,
            labels: Labels {
                click: l.click != 0,
                long_view: l.long_view != 0,
                follow: l.follow != 0,
                gift: l.gift != 0,
            },
        });
    }
    Ok(events)
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct SegmentIndexLine {
    session_id: u32,
    segment_index: u32,
    row: u64,
}

/// `segments.bin`: magic, session count, row count and d_c as LE u32, then
/// f32 rows. `segments.idx.jsonl` maps (session_id, segment_index) → row.
pub fn write_segments(world: &World, bin_path: &Path, idx_path: &Path) -> Result<()> {
    let file = File::create(bin_path).map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let total_rows: usize = world.sessions.iter().map(|s| s.segment_count()).sum();
    w.write_all(SEGMENTS_MAGIC)
        .and_then(|_| w.write_all(&(world.sessions.len() as u32).to_le_bytes()))
        .and_then(|_| w.write_all(&(total_rows as u32).to_le_bytes()))
        .and_then(|_| w.write_all(&(world.config.content_dim as u32).to_le_bytes()))
        .map_err(|e| Error::io(bin_path.display().to_string(), e))?;

    let idx_file =
        File::create(idx_path).map_err(|e| Error::io(idx_path.display().to_string(), e))?;
    let mut idx = BufWriter::new(idx_file);
    let mut row: u64 = 0;
    for s in &world.sessions {
        for i in 0..s.segment_count() {
            for v in s.segment(i)? {
                w.write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
            }
            let line = SegmentIndexLine {
                session_id: s.id,
                segment_index: i as u32,
                row,
            };
            writeln!(
                idx,
                "{}",
                serde_json::to_string(&line).map_err(|e| Error::parse("segments.idx.jsonl", e))?
            )
            .map_err(|e| Error::io(idx_path.display().to_string(), e))?;
            row += 1;
        }
    }
    w.flush()
        .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    idx.flush()
        .map_err(|e| Error::io(idx_path.display().to_string(), e))
}

/// Read segments.bin back as (rows, d_c, session_count).
pub fn read_segments(bin_path: &Path) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let file = File::open(bin_path).map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
    if &magic != SEGMENTS_MAGIC {
        return Err(Error::parse("segments.bin", "bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let sessions = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let d_c = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(rows);
    let mut f32buf = [0u8; 4];
    for _ in 0..rows {
        let mut row = Vec::with_capacity(d_c);
        for _ in 0..d_c {
            r.read_exact(&mut f32buf)
                .map_err(|e| Error::io(bin_path.display().to_string(), e))?;
            row.push(f32::from_le_bytes(f32buf));
        }
        out.push(row);
    }
    Ok((out, d_c, sessions))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorldMeta {
    pub config: WorldConfig,
    pub seed: u64,
}

pub fn write_world_meta(world: &World, path: &Path) -> Result<()> {
    let meta = WorldMeta {
        config: world.config.clone(),
        seed: world.seed,
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::parse("world.json", e))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_world_meta(path: &Path) -> Result<WorldMeta> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse("world.json", e))
}

/// Write the full dataset triple into `dir`.
pub fn export_dataset(world: &World, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    write_events(&world.events, &dir.join("events.jsonl"))?;
    write_segments(
        world,
        &dir.join("segments.bin"),
        &dir.join("segments.idx.jsonl"),
    )?;
    write_world_meta(world, &dir.join("world.json"))
}

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{generate_world, Event, InteractionLog, Session, World, WorldConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ORWL";

fn format_err<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Format(detail.into()))
}

/// Writes `config.toml`, `latents.bin`, `history.jsonl` and `sessions.jsonl`.
pub fn save_snapshot(dir: &Path, world: &World, log: &InteractionLog) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = toml::to_string(&world.cfg).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("config.toml"), cfg)?;

    let mut w = BufWriter::new(fs::File::create(dir.join("latents.bin"))?);
    w.write_all(MAGIC)?;
    let header = [world.users(), world.items(), world.cfg.latent_dim];
    for h in header {
        w.write_all(&(h as u32).to_le_bytes())?;
    }
    for v in world.user_latent.iter().chain(&world.item_latent).flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join("history.jsonl"))?);
    for e in log.history.iter().flatten() {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join("sessions.jsonl"))?);
    for s in &log.sessions {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the world from its stored config and checks it against the
/// stored latents before reading the logs back.
pub fn load_snapshot(dir: &Path) -> Result<(World, InteractionLog)> {
    let text = fs::read_to_string(dir.join("config.toml"))?;
    let cfg: WorldConfig = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let world = generate_world(&cfg)?;

    let mut bytes = Vec::new();
    fs::File::open(dir.join("latents.bin"))?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return format_err("latents.bin: bad header");
    }
    let dims: Vec<usize> = (0..3)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    if dims != [world.users(), world.items(), cfg.latent_dim] {
        return format_err("latents.bin: extents disagree with config");
    }
    let stored: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expect: Vec<f64> = world
        .user_latent
        .iter()
        .chain(&world.item_latent)
        .flatten()
        .copied()
        .collect();
    if stored != expect {
        return format_err("latents.bin: latents disagree with regenerated world");
    }

    let mut log = InteractionLog {
        history: vec![Vec::new(); world.users()],
        sessions: Vec::new(),
    };
    for line in BufReader::new(fs::File::open(dir.join("history.jsonl"))?).lines() {
        let e: Event = serde_json::from_str(&line?)?;
        if e.user >= world.users() {
            return Err(Error::Index {
                index: e.user,
                extent: world.users(),
            });
        }
        log.history[e.user].push(e);
    }
    for line in BufReader::new(fs::File::open(dir.join("sessions.jsonl"))?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            log.sessions.push(serde_json::from_str::<Session>(&line)?);
        }
    }
    Ok((world, log))
}

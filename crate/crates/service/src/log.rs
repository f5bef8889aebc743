//! Append-only record log with replay and compaction.
//!
//! Each record is `u32 len ‖ body ‖ first 4 bytes of SHA-256(body)`. Replay
//! stops at the first torn or corrupt record, which is then truncated away.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use sha2::{Digest, Sha256};

enum Backing {
    Memory(Vec<u8>),
    File { path: PathBuf, file: File },
}

pub struct AppendLog {
    backing: Mutex<Backing>,
}

fn checksum(body: &[u8]) -> [u8; 4] {
    let h = Sha256::digest(body);
    [h[0], h[1], h[2], h[3]]
}

fn frame(body: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&checksum(body));
}

/// Splits `bytes` into intact records; returns them and the length of the intact prefix.
fn parse(bytes: &[u8]) -> (Vec<Vec<u8>>, usize) {
    let mut records = Vec::new();
    let mut at = 0;
    while bytes.len() - at >= 4 {
        let len = u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let end = at + 4 + len + 4;
        if end > bytes.len() {
            break;
        }
        let body = &bytes[at + 4..at + 4 + len];
        if checksum(body) != bytes[end - 4..end] {
            break;
        }
        records.push(body.to_vec());
        at = end;
    }
    (records, at)
}

impl AppendLog {
    pub fn in_memory() -> Self {
        AppendLog {
            backing: Mutex::new(Backing::Memory(Vec::new())),
        }
    }

    /// Opens or creates the log at `path` and returns it with its intact records.
    pub fn open(path: impl AsRef<Path>) -> io::Result<(Self, Vec<Vec<u8>>)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = Vec::new();
        if path.exists() {
            File::open(&path)?.read_to_end(&mut bytes)?;
        }
        let (records, intact) = parse(&bytes);
        if intact < bytes.len() {
            log::warn!("{}: dropping {} bytes of torn tail", path.display(), bytes.len() - intact);
            let f = OpenOptions::new().write(true).open(&path)?;
            f.set_len(intact as u64)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok((
            AppendLog {
                backing: Mutex::new(Backing::File { path, file }),
            },
            records,
        ))
    }

    pub fn append(&self, body: &[u8]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(body.len() + 8);
        frame(body, &mut buf);
        match &mut *self.backing.lock() {
            Backing::Memory(m) => m.extend_from_slice(&buf),
            Backing::File { file, .. } => {
                file.write_all(&buf)?;
                file.sync_data()?;
            }
        }
        Ok(())
    }

    /// Replaces the whole log with `records`, atomically for file logs.
    pub fn compact(&self, records: &[Vec<u8>]) -> io::Result<()> {
        let mut buf = Vec::new();
        for r in records {
            frame(r, &mut buf);
        }
        let mut backing = self.backing.lock();
        match &mut *backing {
            Backing::Memory(m) => *m = buf,
            Backing::File { path, file } => {
                let tmp = path.with_extension("compact");
                {
                    let mut f = File::create(&tmp)?;
                    f.write_all(&buf)?;
                    f.sync_all()?;
                }
                fs::rename(&tmp, &*path)?;
                *file = OpenOptions::new().append(true).open(&*path)?;
            }
        }
        Ok(())
    }

    /// Everything persisted so far, as raw bytes.
    pub fn raw_bytes(&self) -> io::Result<Vec<u8>> {
        match &*self.backing.lock() {
            Backing::Memory(m) => Ok(m.clone()),
            Backing::File { path, .. } => fs::read(path),
        }
    }

    pub fn records(&self) -> io::Result<Vec<Vec<u8>>> {
        Ok(parse(&self.raw_bytes()?).0)
    }
}

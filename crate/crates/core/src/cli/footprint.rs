//! Disk-footprint accounting for checkpoints and ensemble manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::HEADER_DIGITS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub name: String,
    pub bytes: u64,
}

/// True when `head` starts like a checkpoint: the digit prefix, then `{`.
fn looks_like_checkpoint(head: &[u8]) -> bool {
    head.len() > HEADER_DIGITS
        && head[..HEADER_DIGITS].iter().all(u8::is_ascii_digit)
        && head[HEADER_DIGITS] == b'{'
}

fn file_size(path: &Path) -> Result<u64> {
    fs::metadata(path)
        .map(|m| m.len())
        .map_err(|e| Error::io(path, e))
}

/// Checkpoint paths listed in an ensemble manifest, resolved against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn manifest_members(path: &Path, text: &str) -> Vec<PathBuf> {
    let base = path.parent().unwrap_or(Path::new(""));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect()
}

/// Size of a checkpoint, or the summed sizes of an ensemble manifest's
/// members.
pub fn footprint(path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if looks_like_checkpoint(&bytes) {
        return Ok(bytes.len() as u64);
    }
    let text = std::str::from_utf8(&bytes).map_err(|_| {
        Error::Manifest(format!(
            "{} is neither a checkpoint nor a text manifest",
            path.display()
        ))
    })?;
    let members = manifest_members(path, text);
    if members.is_empty() {
        return Err(Error::Manifest(format!(
            "{} lists no checkpoints",
            path.display()
        )));
    }
    let mut total = 0u64;
    for member in members {
        let head = read_head(&member)?;
        if !looks_like_checkpoint(&head) {
            return Err(Error::Manifest(format!(
                "{} is not a checkpoint",
                member.display()
            )));
        }
        total += file_size(&member)?;
    }
    Ok(total)
}

fn read_head(path: &Path) -> Result<Vec<u8>> {
    use std::io::Read;
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; HEADER_DIGITS + 1];
    let mut filled = 0;
    while filled < buf.len() {
        let n = f.read(&mut buf[filled..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    buf.truncate(filled);
    Ok(buf)
}

/// `2254857830` → `2,254,857,830`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn render_footprints(rows: &[FootprintReport]) -> String {
    let name_width = rows
        .iter()
        .map(|r| r.name.chars().count())
        .max()
        .unwrap_or(0)
        .max("Model".len());
    let sizes: Vec<String> = rows.iter().map(|r| group_thousands(r.bytes)).collect();
    let size_width = sizes
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max("Bytes".len());
    let mut out = format!("{:<name_width$}  {:>size_width$}\n", "Model", "Bytes");
    out.push_str(&"-".repeat(name_width + 2 + size_width));
    out.push('\n');
    for (r, s) in rows.iter().zip(&sizes) {
        out.push_str(&format!("{:<name_width$}  {:>size_width$}\n", r.name, s));
    }
    out
}

//! `id<TAB>path[<TAB>path...]` manifests of unit streams.

use std::fs;
use std::path::{Path, PathBuf};

use im2sp::datagen::MANIFEST_HEADER;
use im2sp::{Error, Result};

pub const UNIT_MANIFEST_HEADER: &str = "# id\tunits";
pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone)]
pub struct UnitEntry {
    pub id: String,
    pub paths: Vec<PathBuf>,
}

/// Reads a unit manifest; relative paths resolve against its directory.
pub fn read_unit_manifest(path: &Path) -> Result<Vec<UnitEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let paths: Vec<PathBuf> = fields.filter(|f| !f.is_empty()).map(|f| base.join(f)).collect();
        if id.is_empty() || paths.is_empty() {
            return Err(Error::Format {
                what: "unit manifest",
                detail: format!("{}: line {} needs an id and at least one path", path.display(), i + 1),
            });
        }
        out.push(UnitEntry { id, paths });
    }
    Ok(out)
}

/// Writes `(id, relative path)` rows under the unit-manifest header.
pub fn write_unit_manifest(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut text = format!("{UNIT_MANIFEST_HEADER}\n");
    for (id, p) in rows {
        text.push_str(&format!("{id}\t{p}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

/// True when `path` looks like a corpus manifest rather than a single
/// feature file or image.
pub fn is_corpus_manifest(path: &Path) -> Result<bool> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"UFM1") || bytes.starts_with(b"P6") {
        return Ok(false);
    }
    let Ok(text) = std::str::from_utf8(&bytes) else {
        return Ok(false);
    };
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Ok(false);
    };
    if first == MANIFEST_HEADER {
        return Ok(true);
    }
    let fields: Vec<&str> = first.split('\t').collect();
    Ok(fields.len() == 5 && fields[1].parse::<f64>().is_err())
}

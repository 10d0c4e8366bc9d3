use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub audio: PathBuf,
    pub text: String,
}

/// `audio_path<TAB>transcript` per line; relative paths resolve against
/// the manifest's directory. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, transcript) = line
                .split_once('\t')
                .ok_or_else(|| HarnessError::Data(format!("manifest line {}: expected path<TAB>text", n + 1)))?;
            let transcript = transcript.trim();
            if transcript.is_empty() {
                return Err(HarnessError::Data(format!("manifest line {}: empty transcript", n + 1)));
            }
            let p = PathBuf::from(path.trim());
            rows.push(ManifestRow {
                audio: if p.is_absolute() { p } else { base.join(p) },
                text: transcript.to_string(),
            });
        }
        if rows.is_empty() {
            return Err(HarnessError::Data("manifest has no entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self, base: &Path) -> String {
        self.rows
            .iter()
            .map(|r| {
                let p = r.audio.strip_prefix(base).unwrap_or(&r.audio);
                format!("{}\t{}\n", p.display(), r.text)
            })
            .collect()
    }
}

//! Plain-text frame listings: one path per line, a blank line between
//! sequences. Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub sequences: Vec<Vec<PathBuf>>,
}

impl Manifest {
    pub fn parse(text: &str) -> Self {
        let mut sequences = Vec::new();
        let mut current = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !current.is_empty() {
                    sequences.push(std::mem::take(&mut current));
                }
            } else {
                current.push(PathBuf::from(line));
            }
        }
        if !current.is_empty() {
            sequences.push(current);
        }
        Manifest { sequences }
    }

    pub fn render(&self) -> String {
        let blocks: Vec<String> =
            self.sequences.iter().map(|seq| seq.iter().map(|p| format!("{}\n", p.display())).collect()).collect();
        blocks.join("\n")
    }

    /// Reads a manifest and resolves relative entries against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut m = Manifest::parse(&text);
        for p in m.sequences.iter_mut().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| AppError::io(path, e))
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

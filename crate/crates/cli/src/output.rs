//! Artifact files of one run and the `manifest.csv` listing them.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

pub struct Outputs {
    dir: PathBuf,
    written: Vec<(String, &'static str)>,
}

impl Outputs {
    pub fn create(dir: &Path) -> io::Result<Outputs> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    /// Opens `name` (relative to the output directory) and records it.
    pub fn file(&mut self, name: &str, kind: &'static str) -> io::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = File::create(&path)?;
        if !self.written.iter().any(|(n, _)| n == name) {
            self.written.push((name.to_string(), kind));
        }
        Ok(BufWriter::new(file))
    }

    pub fn write_text(&mut self, name: &str, kind: &'static str, text: &str) -> io::Result<()> {
        let mut w = self.file(name, kind)?;
        w.write_all(text.as_bytes())?;
        w.flush()
    }

    /// Writes `manifest.csv` with every artifact recorded so far.
    pub fn finish(self) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.csv"))?);
        writeln!(w, "path,kind,bytes")?;
        for (name, kind) in &self.written {
            let bytes = std::fs::metadata(self.dir.join(name)).map(|m| m.len()).unwrap_or(0);
            writeln!(w, "{name},{kind},{bytes}")?;
        }
        w.flush()
    }
}

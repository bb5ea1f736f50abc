use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

/// Append-only record of every message and decision, one line each:
/// `<ms> <kind> <text>`.
#[derive(Debug, Default)]
pub struct Journal {
    lines: Vec<String>,
    file: Option<File>,
}

impl Journal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Journal {
            lines: Vec::new(),
            file: Some(file),
        })
    }

    pub fn record(&mut self, now: u64, kind: &str, text: impl AsRef<str>) {
        let line = format!("{now} {kind} {}", text.as_ref());
        if let Some(f) = self.file.as_mut() {
            // the in-memory copy stays authoritative if the disk write fails
            let _ = writeln!(f, "{line}");
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_mirrors_memory() {
        let dir = std::env::temp_dir().join(format!("ssmmp-journal-{}", std::process::id()));
        let _ = std::fs::remove_file(&dir);
        let mut j = Journal::with_file(&dir).unwrap();
        j.record(5, "note", "hello");
        j.record(7, "recv", "type: x");
        drop(j);
        let text = std::fs::read_to_string(&dir).unwrap();
        assert_eq!(text, "5 note hello\n7 recv type: x\n");
        std::fs::remove_file(&dir).unwrap();
    }
}

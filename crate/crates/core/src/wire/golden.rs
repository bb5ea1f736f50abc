//! Golden conformance files: one serialized sample per `(type, sub_type)`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::{all_variants, parse_message, samples, serialize_message, validate_message};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenResult {
    pub file: String,
    pub outcome: Result<(), String>,
}

/// Writes every golden file into `dir`, creating it if needed.
pub fn regenerate(dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (t, s) in all_variants() {
        let Some(m) = samples::sample(t, s) else {
            continue;
        };
        let bytes = serialize_message(&m)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        let path = dir.join(samples::file_name(t, s));
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}

fn check_one(path: &Path, expected: &[u8]) -> Result<(), String> {
    let bytes = fs::read(path).map_err(|e| format!("unreadable: {e}"))?;
    let parsed = parse_message(&bytes).map_err(|e| format!("parse: {e}"))?;
    validate_message(&parsed).map_err(|errs| {
        let text: Vec<String> = errs.iter().map(ToString::to_string).collect();
        format!("invalid: {}", text.join("; "))
    })?;
    let again = serialize_message(&parsed).map_err(|e| format!("serialize: {e}"))?;
    if again != bytes {
        return Err("re-serialization differs from file".into());
    }
    if bytes != expected {
        return Err("file differs from serializer output for the sample".into());
    }
    Ok(())
}

/// Roundtrips every expected golden file in `dir`. Missing files fail.
pub fn check(dir: &Path) -> Vec<GoldenResult> {
    all_variants()
        .into_iter()
        .filter_map(|(t, s)| samples::sample(t, s).map(|m| (t, s, m)))
        .map(|(t, s, m)| {
            let file = samples::file_name(t, s);
            let outcome = serialize_message(&m)
                .map_err(|e| format!("sample does not serialize: {e}"))
                .and_then(|expected| check_one(&dir.join(&file), &expected));
            GoldenResult { file, outcome }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regenerated_files_pass() {
        let dir = tempfile::tempdir().unwrap();
        let written = regenerate(dir.path()).unwrap();
        let results = check(dir.path());
        assert_eq!(written.len(), results.len());
        assert!(results.iter().all(|r| r.outcome.is_ok()), "{results:?}");
    }

    #[test]
    fn tampered_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        regenerate(dir.path()).unwrap();
        let victim = dir.path().join("session_ack.agent_to_Manager.msg");
        let text = fs::read_to_string(&victim)
            .unwrap()
            .replace("status: 200", "status:  200");
        fs::write(&victim, text).unwrap();
        let bad: Vec<_> = check(dir.path())
            .into_iter()
            .filter(|r| r.outcome.is_err())
            .collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].file, "session_ack.agent_to_Manager.msg");
    }

    #[test]
    fn missing_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        let results = check(dir.path());
        assert!(results.iter().all(|r| r.outcome.is_err()));
    }
}

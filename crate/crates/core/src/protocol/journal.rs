use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    id: String,
    value: serde_json::Value,
}

/// Append-only JSON-lines log of finished sweep units. Reopening the same
/// file skips every unit already recorded; a torn final line is ignored.
pub struct Journal {
    path: PathBuf,
    entries: Mutex<BTreeMap<String, serde_json::Value>>,
    file: Mutex<File>,
}

impl Journal {
    pub fn open(path: &Path) -> Result<Journal> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                match serde_json::from_str::<Entry>(line) {
                    Ok(e) => {
                        entries.insert(e.id, e.value);
                    }
                    Err(e) => log::warn!("{}: skipping unreadable journal line: {e}", path.display()),
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        // a torn last line would otherwise swallow the next entry
        if fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false)
            && !fs::read(path).map(|b| b.ends_with(b"\n")).unwrap_or(true)
        {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(Journal {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("journal").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.lock().expect("journal").contains_key(id)
    }

    pub fn get<T: DeserializeOwned>(&self, id: &str) -> Option<T> {
        let entries = self.entries.lock().expect("journal");
        entries.get(id).and_then(|v| serde_json::from_value(v.clone()).ok())
    }

    pub fn put<T: Serialize>(&self, id: &str, value: &T) -> Result<()> {
        let value = serde_json::to_value(value)?;
        let line = serde_json::to_string(&Entry {
            id: id.to_string(),
            value: value.clone(),
        })?;
        {
            let mut f = self.file.lock().expect("journal file");
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(&self.path, e))?;
        }
        self.entries.lock().expect("journal").insert(id.to_string(), value);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reopen_keeps_entries_and_skips_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/journal.jsonl");
        {
            let j = Journal::open(&path).unwrap();
            j.put("a", &0.5f64).unwrap();
            j.put("b", &vec![1u32, 2]).unwrap();
        }
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{\"id\":\"c\",\"val");
        fs::write(&path, text).unwrap();
        let j = Journal::open(&path).unwrap();
        assert_eq!(j.len(), 2);
        assert_eq!(j.get::<f64>("a"), Some(0.5));
        assert_eq!(j.get::<Vec<u32>>("b"), Some(vec![1, 2]));
        assert!(!j.contains("c"));
        j.put("c", &1.0f64).unwrap();
        drop(j);
        assert_eq!(Journal::open(&path).unwrap().get::<f64>("c"), Some(1.0));
    }
}

//! Timestamped run directories holding the config, the produced files and a
//! manifest listing them.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliResult;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.csv";

pub struct RunDir {
    root: PathBuf,
    files: BTreeSet<String>,
}

impl RunDir {
    /// Creates `{parent}/{command}-{UTC timestamp}`, adding a numeric suffix
    /// when that name is taken.
    pub fn create(parent: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(parent)?;
        let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
        let mut root = parent.join(format!("{command}-{stamp}"));
        let mut n = 1;
        while root.exists() {
            n += 1;
            root = parent.join(format!("{command}-{stamp}-{n}"));
        }
        fs::create_dir(&root)?;
        Ok(Self { root, files: BTreeSet::new() })
    }

    /// Reopens an existing run directory, keeping the files it lists.
    pub fn open(root: &Path) -> CliResult<Self> {
        let mut files = BTreeSet::new();
        if let Ok(text) = fs::read_to_string(root.join(MANIFEST_FILE)) {
            for line in text.lines().skip(1) {
                if let Some((path, _)) = line.rsplit_once(',') {
                    if root.join(path).exists() {
                        files.insert(path.to_string());
                    }
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            files,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path for `rel`, registered in the manifest. Parent
    /// directories are created.
    pub fn file(&mut self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        self.files.insert(rel.to_string());
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.file(rel)?;
        fs::write(&p, contents)?;
        Ok(p)
    }

    pub fn write_config(&mut self, cfg: &RunConfig) -> CliResult<()> {
        self.write(CONFIG_FILE, cfg.to_text())?;
        Ok(())
    }

    /// `path,bytes` for every registered file that exists.
    pub fn write_manifest(&self) -> CliResult<()> {
        let mut out = String::from("path,bytes\n");
        for rel in &self.files {
            if let Ok(meta) = fs::metadata(self.root.join(rel)) {
                out.push_str(&format!("{rel},{}\n", meta.len()));
            }
        }
        fs::write(self.root.join(MANIFEST_FILE), out)?;
        Ok(())
    }
}

/// Incrementally written CSV whose rows are flushed as they arrive, so a
/// partial run leaves a readable log.
pub struct CsvLog {
    path: PathBuf,
}

impl CsvLog {
    pub fn create(path: PathBuf, header: &str) -> CliResult<Self> {
        fs::write(&path, format!("{header}\n"))?;
        Ok(Self { path })
    }

    /// Keeps the header and the rows whose first column parses below
    /// `before`, dropping anything a resumed run will regenerate.
    pub fn resume(path: PathBuf, header: &str, before: usize) -> CliResult<Self> {
        let kept: Vec<String> = fs::read_to_string(&path)
            .unwrap_or_default()
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|k| k.parse::<usize>().ok()).is_some_and(|k| k < before))
            .map(str::to_string)
            .collect();
        let mut text = format!("{header}\n");
        for row in kept {
            text.push_str(&row);
            text.push('\n');
        }
        fs::write(&path, text)?;
        Ok(Self { path })
    }

    pub fn row(&self, row: &str) -> CliResult<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{row}")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_written_files() {
        let tmp = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(tmp.path(), "demo").unwrap();
        run.write("a/b.txt", "hello").unwrap();
        run.write_manifest().unwrap();
        let text = fs::read_to_string(run.root().join(MANIFEST_FILE)).unwrap();
        assert_eq!(text, "path,bytes\na/b.txt,5\n");
        let again = RunDir::create(tmp.path(), "demo").unwrap();
        assert_ne!(again.root(), run.root());
        assert_eq!(RunDir::open(run.root()).unwrap().files.len(), 1);
    }

    #[test]
    fn resume_truncates_later_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("log.csv");
        let log = CsvLog::create(p.clone(), "step,v").unwrap();
        for k in 0..5 {
            log.row(&format!("{k},{}", k * k)).unwrap();
        }
        CsvLog::resume(p.clone(), "step,v", 3).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "step,v\n0,0\n1,1\n2,4\n");
    }
}

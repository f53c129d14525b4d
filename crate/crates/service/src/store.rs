use std::path::{Path, PathBuf};

use crate::session::Session;

/// One JSON file per session, replaced atomically on every mutation.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    dir: PathBuf,
}

impl SnapshotStore {
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn file(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn save(&self, session: &Session) -> std::io::Result<()> {
        let tmp = self.dir.join(format!(".{}.json.tmp", session.id));
        let text = serde_json::to_vec(session).map_err(std::io::Error::other)?;
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, self.file(&session.id))
    }

    /// Every readable snapshot in the directory. Unreadable files are
    /// reported and skipped.
    pub fn load_all(&self) -> std::io::Result<(Vec<Session>, Vec<String>)> {
        let mut sessions = Vec::new();
        let mut problems = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            match load_snapshot(&path) {
                Ok(s) => sessions.push(s),
                Err(e) => problems.push(format!("{}: {e}", path.display())),
            }
        }
        sessions.sort_by(|a, b| a.id.cmp(&b.id));
        Ok((sessions, problems))
    }
}

pub fn load_snapshot(path: &Path) -> anyhow::Result<Session> {
    let text = std::fs::read_to_string(path)?;
    let mut s: Session = serde_json::from_str(&text)?;
    s.relink()?;
    Ok(s)
}

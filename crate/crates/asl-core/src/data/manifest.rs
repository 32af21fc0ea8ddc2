//! Dataset manifest: a line-oriented text file listing videos, their
//! feature files per source, and either labeled instances (detection) or
//! queries with ground-truth segments and token-embedding files (grounding).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geom::{ActionInstance, TimeSegment, VideoAnnotation};
use crate::network::Mode;

pub const MANIFEST_HEADER: &str = "aslmanifest 1";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestQuery {
    pub id: String,
    pub embedding: PathBuf,
    pub segment: TimeSegment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestVideo {
    pub id: String,
    pub duration: f64,
    pub stride_seconds: f64,
    /// Feature file per source, parallel to `DatasetManifest::sources`.
    pub features: Vec<PathBuf>,
    pub instances: Vec<ActionInstance>,
    pub queries: Vec<ManifestQuery>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub mode: Mode,
    pub classes: usize,
    pub sources: Vec<String>,
    pub videos: Vec<ManifestVideo>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_HEADER);
        s.push('\n');
        let _ = writeln!(s, "mode {}", self.mode.as_str());
        let _ = writeln!(s, "classes {}", self.classes);
        let _ = writeln!(s, "sources {}", self.sources.join(" "));
        for v in &self.videos {
            s.push('\n');
            let _ = writeln!(
                s,
                "video {} duration {:.6} stride {:.6}",
                v.id, v.duration, v.stride_seconds
            );
            for (src, path) in self.sources.iter().zip(&v.features) {
                let _ = writeln!(s, "feature {} {}", src, path.display());
            }
            for inst in &v.instances {
                let _ = writeln!(
                    s,
                    "instance {:.6} {:.6} {}",
                    inst.segment.start(),
                    inst.segment.end(),
                    inst.label
                );
            }
            for q in &v.queries {
                let _ = writeln!(
                    s,
                    "query {} {} {:.6} {:.6}",
                    q.id,
                    q.embedding.display(),
                    q.segment.start(),
                    q.segment.end()
                );
            }
            s.push_str("end\n");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<DatasetManifest> {
        let mut lines = text.lines().enumerate();
        let bad = |ln: usize, msg: String| Error::data(format!("line {}: {msg}", ln + 1));

        let (ln0, header) = lines
            .next()
            .ok_or_else(|| Error::data("empty manifest".to_string()))?;
        if header.trim() != MANIFEST_HEADER {
            return Err(bad(ln0, format!("expected header '{MANIFEST_HEADER}'")));
        }

        let mut mode: Option<Mode> = None;
        let mut classes: Option<usize> = None;
        let mut sources: Vec<String> = Vec::new();
        let mut videos: Vec<ManifestVideo> = Vec::new();
        let mut current: Option<ManifestVideo> = None;

        for (ln, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            match tag {
                "mode" => {
                    if rest.len() != 1 {
                        return Err(bad(ln, "mode takes one value".into()));
                    }
                    mode = Some(Mode::parse(rest[0]).map_err(|e| bad(ln, e.to_string()))?);
                }
                "classes" => {
                    classes = Some(
                        rest.first()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad(ln, "classes needs an integer".into()))?,
                    );
                }
                "sources" => {
                    if rest.is_empty() {
                        return Err(bad(ln, "sources needs at least one name".into()));
                    }
                    sources = rest.iter().map(|s| s.to_string()).collect();
                }
                "video" => {
                    if current.is_some() {
                        return Err(bad(ln, "previous video block not closed with 'end'".into()));
                    }
                    if rest.len() != 5 || rest[1] != "duration" || rest[3] != "stride" {
                        return Err(bad(
                            ln,
                            "expected: video <id> duration <sec> stride <sec>".into(),
                        ));
                    }
                    let duration: f64 = rest[2]
                        .parse()
                        .map_err(|_| bad(ln, format!("bad duration '{}'", rest[2])))?;
                    let stride: f64 = rest[4]
                        .parse()
                        .map_err(|_| bad(ln, format!("bad stride '{}'", rest[4])))?;
                    current = Some(ManifestVideo {
                        id: rest[0].to_string(),
                        duration,
                        stride_seconds: stride,
                        features: Vec::new(),
                        instances: Vec::new(),
                        queries: Vec::new(),
                    });
                }
                "feature" => {
                    let v = current
                        .as_mut()
                        .ok_or_else(|| bad(ln, "feature outside video block".into()))?;
                    if rest.len() != 2 {
                        return Err(bad(ln, "expected: feature <source> <path>".into()));
                    }
                    let idx = v.features.len();
                    if idx >= sources.len() || sources[idx] != rest[0] {
                        return Err(bad(
                            ln,
                            format!(
                                "feature lines must follow the sources order {:?}",
                                sources
                            ),
                        ));
                    }
                    v.features.push(PathBuf::from(rest[1]));
                }
                "instance" => {
                    let v = current
                        .as_mut()
                        .ok_or_else(|| bad(ln, "instance outside video block".into()))?;
                    if rest.len() != 3 {
                        return Err(bad(ln, "expected: instance <start> <end> <label>".into()));
                    }
                    let start: f64 = rest[0]
                        .parse()
                        .map_err(|_| bad(ln, format!("bad start '{}'", rest[0])))?;
                    let end: f64 = rest[1]
                        .parse()
                        .map_err(|_| bad(ln, format!("bad end '{}'", rest[1])))?;
                    let label: usize = rest[2]
                        .parse()
                        .map_err(|_| bad(ln, format!("bad label '{}'", rest[2])))?;
                    let segment = TimeSegment::new(start, end)
                        .map_err(|e| bad(ln, format!("invalid segment: {e}")))?;
                    v.instances.push(ActionInstance::new(segment, label));
                }
                "query" => {
                    let v = current
                        .as_mut()
                        .ok_or_else(|| bad(ln, "query outside video block".into()))?;
                    if rest.len() != 4 {
                        return Err(bad(
                            ln,
                            "expected: query <id> <embedding> <start> <end>".into(),
                        ));
                    }
                    let start: f64 = rest[2]
                        .parse()
                        .map_err(|_| bad(ln, format!("bad start '{}'", rest[2])))?;
                    let end: f64 = rest[3]
                        .parse()
                        .map_err(|_| bad(ln, format!("bad end '{}'", rest[3])))?;
                    let segment = TimeSegment::new(start, end)
                        .map_err(|e| bad(ln, format!("invalid segment: {e}")))?;
                    v.queries.push(ManifestQuery {
                        id: rest[0].to_string(),
                        embedding: PathBuf::from(rest[1]),
                        segment,
                    });
                }
                "end" => {
                    let v = current
                        .take()
                        .ok_or_else(|| bad(ln, "'end' without open video block".into()))?;
                    videos.push(v);
                }
                other => {
                    return Err(bad(ln, format!("unknown directive '{other}'")));
                }
            }
        }
        if current.is_some() {
            return Err(Error::data("manifest ends inside a video block"));
        }

        let manifest = DatasetManifest {
            mode: mode.ok_or_else(|| Error::data("manifest missing 'mode'"))?,
            classes: classes.ok_or_else(|| Error::data("manifest missing 'classes'"))?,
            sources,
            videos,
        };
        manifest.validate_structure()?;
        Ok(manifest)
    }

    /// Structural checks independent of the filesystem.
    pub fn validate_structure(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::data("classes must be >= 1"));
        }
        if self.sources.is_empty() {
            return Err(Error::data("manifest needs at least one source"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.videos {
            if !seen.insert(&v.id) {
                return Err(Error::data(format!("duplicate video id {}", v.id)));
            }
            if v.features.len() != self.sources.len() {
                return Err(Error::data(format!(
                    "video {}: {} feature files for {} sources",
                    v.id,
                    v.features.len(),
                    self.sources.len()
                )));
            }
            let ann = VideoAnnotation {
                video_id: v.id.clone(),
                duration: v.duration,
                instances: v.instances.clone(),
            };
            ann.validate(self.classes)?;
            match self.mode {
                Mode::Mq => {
                    if !v.queries.is_empty() {
                        return Err(Error::data(format!(
                            "video {}: queries present in mq manifest",
                            v.id
                        )));
                    }
                }
                Mode::Nlq => {
                    if !v.instances.is_empty() {
                        return Err(Error::data(format!(
                            "video {}: labeled instances present in nlq manifest",
                            v.id
                        )));
                    }
                    for q in &v.queries {
                        if q.segment.end() > v.duration + 1e-9 {
                            return Err(Error::data(format!(
                                "query {}: segment exceeds video duration",
                                q.id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced file exists relative to `base`.
    pub fn validate_files(&self, base: &Path) -> Result<()> {
        for v in &self.videos {
            for f in &v.features {
                let p = base.join(f);
                if !p.is_file() {
                    return Err(Error::data(format!(
                        "video {}: missing feature file {}",
                        v.id,
                        p.display()
                    )));
                }
            }
            for q in &v.queries {
                let p = base.join(&q.embedding);
                if !p.is_file() {
                    return Err(Error::data(format!(
                        "query {}: missing embedding file {}",
                        q.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

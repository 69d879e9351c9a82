use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const HEADER: [&str; 5] = ["path", "identity", "aspect", "accessories", "tags"];
pub const DISTRACTOR_TAG: &str = "distractor";

/// Hand side and laterality of an image. `None` for collections that are
/// not split by aspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    DorsalRight,
    DorsalLeft,
    PalmarRight,
    PalmarLeft,
    None,
}

impl Aspect {
    pub const ALL: [Aspect; 5] = [
        Aspect::DorsalRight,
        Aspect::DorsalLeft,
        Aspect::PalmarRight,
        Aspect::PalmarLeft,
        Aspect::None,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Aspect::DorsalRight => "dorsal_right",
            Aspect::DorsalLeft => "dorsal_left",
            Aspect::PalmarRight => "palmar_right",
            Aspect::PalmarLeft => "palmar_left",
            Aspect::None => "none",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aspect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown aspect {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub identity: String,
    pub aspect: Aspect,
    pub has_accessories: bool,
    pub extra_tags: BTreeSet<String>,
}

impl ManifestRecord {
    pub fn new(image_path: impl Into<String>, identity: impl Into<String>, aspect: Aspect) -> Self {
        Self {
            image_path: image_path.into(),
            identity: identity.into(),
            aspect,
            has_accessories: false,
            extra_tags: BTreeSet::new(),
        }
    }

    pub fn is_distractor(&self) -> bool {
        self.extra_tags.contains(DISTRACTOR_TAG)
    }

    /// Identity label used for matching. Each aspect of a subject is its own
    /// identity, so a common gallery never mixes hands.
    pub fn match_key(&self) -> String {
        match self.aspect {
            Aspect::None => self.identity.clone(),
            a => format!("{a}/{}", self.identity),
        }
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Read a `path,identity,aspect,accessories,tags` manifest.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest_str(&text, path)
}

pub fn parse_manifest_str(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(path, 1, format!("missing column {name:?}")))?;
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(cols[i]).unwrap_or("");
        let image_path = field(0).to_string();
        let identity = field(1).to_string();
        if image_path.is_empty() {
            return Err(parse_err(path, line, "empty path"));
        }
        if identity.is_empty() {
            return Err(parse_err(path, line, "empty identity"));
        }
        let aspect = field(2).parse::<Aspect>().map_err(|e| parse_err(path, line, e))?;
        let has_accessories = match field(3) {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line, format!("accessories must be 0 or 1, got {other:?}"))),
        };
        let extra_tags = field(4)
            .split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(String::from)
            .collect();
        if !seen.insert(image_path.clone()) {
            return Err(parse_err(path, line, format!("duplicate path {image_path:?}")));
        }
        out.push(ManifestRecord {
            image_path,
            identity,
            aspect,
            has_accessories,
            extra_tags,
        });
    }
    Ok(out)
}

pub fn manifest_to_string(records: &[ManifestRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(HEADER).map_err(io)?;
    for r in records {
        let tags = r.extra_tags.iter().cloned().collect::<Vec<_>>().join(";");
        w.write_record([
            r.image_path.as_str(),
            r.identity.as_str(),
            r.aspect.as_str(),
            if r.has_accessories { "1" } else { "0" },
            tags.as_str(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 input"))
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    write_atomic(path, manifest_to_string(records)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<ManifestRecord>> {
        parse_manifest_str(text, Path::new("m.csv"))
    }

    #[test]
    fn well_formed_file() {
        let recs = parse(
            "path,identity,aspect,accessories,tags\n\
             a.ppm, 1 ,dorsal_right,0,\n\
             b.ppm,1,dorsal_right,1,nail_polish;irregular\n\
             c.ppm,2,none,0,distractor\n",
        )
        .unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].identity, "1");
        assert!(recs[1].has_accessories);
        assert_eq!(recs[1].extra_tags.len(), 2);
        assert!(recs[2].is_distractor());
    }

    #[test]
    fn column_order_is_free() {
        let recs = parse("identity,path,tags,aspect,accessories\n7,x.ppm,,palmar_left,0\n").unwrap();
        assert_eq!(recs[0].image_path, "x.ppm");
        assert_eq!(recs[0].aspect, Aspect::PalmarLeft);
    }

    #[test]
    fn duplicate_path_names_line() {
        let err = parse("path,identity,aspect,accessories,tags\na,1,none,0,\nb,1,none,0,\na,2,none,0,\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains(":4:") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_column_and_bad_aspect() {
        let err = parse("path,identity,aspect,tags\na,1,none,\n").unwrap_err().to_string();
        assert!(err.contains("accessories"), "{err}");
        let err = parse("path,identity,aspect,accessories,tags\na,1,sideways,0,\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains(":2:") && err.contains("sideways"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut r = ManifestRecord::new("img/0001.ppm", "0001", Aspect::PalmarLeft);
        r.extra_tags.insert("distractor".into());
        let recs = vec![r, ManifestRecord::new("img/0002.ppm", "0002", Aspect::None)];
        let text = manifest_to_string(&recs).unwrap();
        assert_eq!(parse(&text).unwrap(), recs);
    }
}

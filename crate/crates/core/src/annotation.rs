//! Per-face annotation files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::camera::{LandmarkSet, ParamVector};
use crate::error::{check_dim, Error, Result};

/// One labelled face: box, landmarks with visibility, and optionally the
/// parameters that generate them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub bbox: BBox,
    pub landmarks: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamVector>,
}

impl Annotation {
    pub fn new(bbox: BBox, landmarks: &LandmarkSet, params: Option<ParamVector>) -> Self {
        Self {
            image: None,
            bbox,
            landmarks: landmarks.points.clone(),
            visibility: landmarks.visibility.clone(),
            params,
        }
    }

    pub fn landmark_set(&self) -> Result<LandmarkSet> {
        check_dim("annotation visibility", self.landmarks.len(), self.visibility.len())?;
        LandmarkSet::new(self.landmarks.clone(), self.visibility.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Annotation = serde_json::from_str(text)?;
        a.landmark_set()?;
        Ok(a)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                section: path.display().to_string(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp~");
    let tmp = path.with_file_name(name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optional_fields() {
        let lm = LandmarkSet::new(vec![[1.0, 2.0], [3.0, 4.0]], vec![true, false]).unwrap();
        let a = Annotation::new(BBox::new(0.0, 0.0, 10.0, 10.0), &lm, None);
        let text = a.to_json().unwrap();
        assert!(!text.contains("params"));
        assert_eq!(Annotation::from_json(&text).unwrap(), a);
    }

    #[test]
    fn mismatched_visibility_rejected() {
        let text = r#"{"bbox":[0,0,1,1],"landmarks":[[0,0]],"visibility":[true,false]}"#;
        assert!(Annotation::from_json(text).is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("face.json");
        let lm = LandmarkSet::all_visible(vec![[5.0, 6.0]]);
        let mut a = Annotation::new(BBox::new(1.0, 1.0, 4.0, 4.0), &lm, None);
        a.image = Some("face.png".into());
        a.save(&path).unwrap();
        assert_eq!(Annotation::load(&path).unwrap(), a);
    }
}

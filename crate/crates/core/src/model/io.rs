use std::fs;
use std::path::Path;

use nalgebra::Matrix3xX;
use serde::{Deserialize, Serialize};

use super::{ModelParts, ShapeModel};
use crate::annotation::write_atomic;
use crate::error::{Error, Result};

pub const MODEL_FILE_VERSION: u32 = 1;

/// Section names in the order they are written.
const SECTIONS: &[&str] = &[
    "version",
    "Q",
    "n_id",
    "n_exp",
    "mean_shape",
    "bases_id",
    "bases_exp",
    "basis_stddev_id",
    "basis_stddev_exp",
    "triangles",
    "landmark_indices",
    "nose_tip_index",
    "sigma_n",
];

/// On-disk layout. Every 3xQ matrix is stored row-major: all x, then all
/// y, then all z.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    #[serde(rename = "Q")]
    q: usize,
    n_id: usize,
    n_exp: usize,
    mean_shape: Vec<f64>,
    bases_id: Vec<Vec<f64>>,
    bases_exp: Vec<Vec<f64>>,
    basis_stddev_id: Vec<f64>,
    basis_stddev_exp: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    landmark_indices: Vec<usize>,
    nose_tip_index: usize,
    sigma_n: f64,
}

fn to_row_major(m: &Matrix3xX<f64>) -> Vec<f64> {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect()
}

fn from_row_major(section: &str, q: usize, data: &[f64]) -> Result<Matrix3xX<f64>> {
    if data.len() != 3 * q {
        return Err(Error::Parse {
            section: section.to_string(),
            message: format!("expected {} values (3 x Q), found {}", 3 * q, data.len()),
        });
    }
    Ok(Matrix3xX::from_row_slice(data))
}

pub fn model_to_json(model: &ShapeModel) -> Result<String> {
    let p = model.to_parts();
    let file = ModelFile {
        version: MODEL_FILE_VERSION,
        q: model.q(),
        n_id: model.n_id(),
        n_exp: model.n_exp(),
        mean_shape: to_row_major(&p.mean_shape),
        bases_id: p.identity_bases.iter().map(to_row_major).collect(),
        bases_exp: p.expression_bases.iter().map(to_row_major).collect(),
        basis_stddev_id: p.basis_stddev_id,
        basis_stddev_exp: p.basis_stddev_exp,
        triangles: p.triangles,
        landmark_indices: p.landmark_indices,
        nose_tip_index: p.nose_tip_index,
        sigma_n: model.sigma_n(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    Ok(text)
}

/// Names the section a truncated document stopped in, given that sections
/// are written in `SECTIONS` order.
fn truncation_error(text: &str, err: &serde_json::Error) -> Error {
    let last_started = SECTIONS
        .iter()
        .filter_map(|s| text.find(&format!("\"{s}\"")).map(|pos| (pos, *s)))
        .max_by_key(|(pos, _)| *pos)
        .map(|(_, s)| s);
    let section = last_started.unwrap_or(SECTIONS[0]);
    let missing: Vec<&str> = SECTIONS
        .iter()
        .filter(|s| !text.contains(&format!("\"{s}\"")))
        .copied()
        .collect();
    Error::Parse {
        section: section.to_string(),
        message: format!(
            "file truncated ({err}); section `{section}` is incomplete, missing sections: [{}]",
            missing.join(", ")
        ),
    }
}

pub fn model_from_json(text: &str) -> Result<ShapeModel> {
    let file: ModelFile = match serde_json::from_str(text) {
        Ok(f) => f,
        Err(e) if e.is_eof() => return Err(truncation_error(text, &e)),
        Err(e) => {
            let message = e.to_string();
            // serde names missing/unknown fields in backticks.
            let section = message
                .split('`')
                .nth(1)
                .filter(|s| SECTIONS.contains(s))
                .unwrap_or("document")
                .to_string();
            return Err(Error::Parse { section, message });
        }
    };
    if file.version != MODEL_FILE_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: MODEL_FILE_VERSION,
        });
    }
    if file.bases_id.len() != file.n_id {
        return Err(Error::Parse {
            section: "bases_id".into(),
            message: format!("n_id = {} but {} bases given", file.n_id, file.bases_id.len()),
        });
    }
    if file.bases_exp.len() != file.n_exp {
        return Err(Error::Parse {
            section: "bases_exp".into(),
            message: format!(
                "n_exp = {} but {} bases given",
                file.n_exp,
                file.bases_exp.len()
            ),
        });
    }
    let q = file.q;
    let mean_shape = from_row_major("mean_shape", q, &file.mean_shape)?;
    let identity_bases = file
        .bases_id
        .iter()
        .map(|b| from_row_major("bases_id", q, b))
        .collect::<Result<_>>()?;
    let expression_bases = file
        .bases_exp
        .iter()
        .map(|b| from_row_major("bases_exp", q, b))
        .collect::<Result<_>>()?;
    ShapeModel::new(ModelParts {
        mean_shape,
        identity_bases,
        expression_bases,
        basis_stddev_id: file.basis_stddev_id,
        basis_stddev_exp: file.basis_stddev_exp,
        triangles: file.triangles,
        landmark_indices: file.landmark_indices,
        nose_tip_index: file.nose_tip_index,
        sigma_n: Some(file.sigma_n),
    })
}

pub fn save_model(model: &ShapeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, model_to_json(model)?.as_bytes())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ShapeModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic_model, SynthConfig};

    fn small() -> ShapeModel {
        generate_synthetic_model(&SynthConfig {
            vertices: 60,
            n_id: 2,
            n_exp: 1,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let m = small();
        let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn truncated_file_names_section() {
        let text = model_to_json(&small()).unwrap();
        let cut = text.find("\"bases_exp\"").unwrap() + 20;
        match model_from_json(&text[..cut]).unwrap_err() {
            Error::Parse { section, message } => {
                assert_eq!(section, "bases_exp");
                assert!(message.contains("triangles"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_field_names_section() {
        let text = model_to_json(&small()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("triangles");
        match model_from_json(&v.to_string()).unwrap_err() {
            Error::Parse { section, .. } => assert_eq!(section, "triangles"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = model_to_json(&small()).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["version"] = 7.into();
        assert!(matches!(
            model_from_json(&v.to_string()),
            Err(Error::Version { found: 7, .. })
        ));
    }

    #[test]
    fn out_of_range_triangle_rejected() {
        let m = small();
        let text = model_to_json(&m).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["triangles"][0][1] = m.q().into();
        assert!(matches!(
            model_from_json(&v.to_string()),
            Err(Error::Validation(_))
        ));
    }
}

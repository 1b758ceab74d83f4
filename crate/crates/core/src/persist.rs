//! Model and parameter files: a flat little-endian `f64` blob (`<stem>.bin`) next to a JSON
//! sidecar (`<stem>.json`) describing how to interpret it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mlp_denoiser::{DenoiserArch, MlpDenoiser};
use crate::rewards::ClassifierReward;
use crate::sample::Shape;
use crate::schedule::ScheduleFamily;

/// What a blob holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Sidecar {
    Denoiser {
        layer_sizes: Vec<usize>,
        time_embed_dim: usize,
        cond_dim: usize,
        schedule_family: ScheduleFamily,
        #[serde(rename = "T")]
        num_timesteps: usize,
        data_shape: Shape,
        num_classes: usize,
        blob_sha256: String,
    },
    Classifier {
        layer_sizes: Vec<usize>,
        data_shape: Shape,
        num_classes: usize,
        blob_sha256: String,
    },
    /// Distilled parameters, one row per particle.
    Theta {
        rows: usize,
        row_len: usize,
        renderer: String,
        output_shape: Shape,
        blob_sha256: String,
    },
}

impl Sidecar {
    pub fn blob_sha256(&self) -> &str {
        match self {
            Sidecar::Denoiser { blob_sha256, .. }
            | Sidecar::Classifier { blob_sha256, .. }
            | Sidecar::Theta { blob_sha256, .. } => blob_sha256,
        }
    }
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn sidecar_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn encode_blob(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn save(stem: &Path, values: &[f64], sidecar: impl FnOnce(String) -> Sidecar) -> Result<()> {
    let bytes = encode_blob(values);
    let side = sidecar(digest(&bytes));
    write(&blob_path(stem), &bytes)?;
    write(&sidecar_path(stem), serde_json::to_string_pretty(&side)?.as_bytes())
}

/// Reads both files and checks the blob against the sidecar's digest.
pub fn load(stem: &Path) -> Result<(Sidecar, Vec<f64>)> {
    let side_path = sidecar_path(stem);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    let bin = blob_path(stem);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if digest(&bytes) != side.blob_sha256() {
        return Err(Error::InvalidArgument(format!(
            "{} does not match its sidecar digest",
            bin.display()
        )));
    }
    Ok((side, decode_blob(&bytes)?))
}

pub fn save_denoiser(model: &MlpDenoiser, stem: &Path) -> Result<()> {
    let arch = model.arch();
    save(stem, crate::denoiser::TrainableDenoiser::params(model), |blob_sha256| {
        Sidecar::Denoiser {
            layer_sizes: arch.layer_sizes(),
            time_embed_dim: arch.time_embed_dim,
            cond_dim: arch.cond_dim,
            schedule_family: arch.schedule_family,
            num_timesteps: arch.num_timesteps,
            data_shape: arch.data_shape,
            num_classes: arch.num_classes,
            blob_sha256,
        }
    })
}

pub fn load_denoiser(stem: &Path) -> Result<MlpDenoiser> {
    match load(stem)? {
        (
            Sidecar::Denoiser {
                layer_sizes,
                time_embed_dim,
                cond_dim,
                schedule_family,
                num_timesteps,
                data_shape,
                num_classes,
                ..
            },
            params,
        ) => {
            let n = layer_sizes.len();
            if n < 2 {
                return Err(Error::InvalidArgument("denoiser needs at least two layers".into()));
            }
            let arch = DenoiserArch {
                data_shape,
                hidden: layer_sizes[1..n - 1].to_vec(),
                time_embed_dim,
                cond_dim,
                num_classes,
                num_timesteps,
                schedule_family,
            };
            if arch.layer_sizes() != layer_sizes {
                return Err(Error::InvalidArgument(
                    "sidecar layer sizes disagree with its dimensions".into(),
                ));
            }
            MlpDenoiser::from_params(arch, params)
        }
        (other, _) => Err(wrong_kind("denoiser", &other)),
    }
}

pub fn save_classifier(model: &ClassifierReward, stem: &Path) -> Result<()> {
    save(stem, model.params(), |blob_sha256| Sidecar::Classifier {
        layer_sizes: model.layout().sizes().to_vec(),
        data_shape: model.data_shape(),
        num_classes: model.num_classes(),
        blob_sha256,
    })
}

pub fn load_classifier(stem: &Path) -> Result<ClassifierReward> {
    match load(stem)? {
        (
            Sidecar::Classifier {
                layer_sizes,
                data_shape,
                num_classes,
                ..
            },
            params,
        ) => {
            let model = ClassifierReward::from_params(data_shape, layer_sizes, params)?;
            if model.num_classes() != num_classes {
                return Err(Error::InvalidArgument(
                    "sidecar class count disagrees with the output layer".into(),
                ));
            }
            Ok(model)
        }
        (other, _) => Err(wrong_kind("classifier", &other)),
    }
}

pub fn save_thetas(thetas: &[Vec<f64>], renderer: &str, output_shape: Shape, stem: &Path) -> Result<()> {
    let row_len = thetas.first().map_or(0, Vec::len);
    if thetas.iter().any(|t| t.len() != row_len) {
        return Err(Error::InvalidArgument("parameter rows differ in length".into()));
    }
    let flat: Vec<f64> = thetas.concat();
    save(stem, &flat, |blob_sha256| Sidecar::Theta {
        rows: thetas.len(),
        row_len,
        renderer: renderer.to_string(),
        output_shape,
        blob_sha256,
    })
}

pub fn load_thetas(stem: &Path) -> Result<Vec<Vec<f64>>> {
    match load(stem)? {
        (Sidecar::Theta { rows, row_len, .. }, flat) => {
            if flat.len() != rows * row_len {
                return Err(Error::ShapeMismatch {
                    expected: rows * row_len,
                    actual: flat.len(),
                });
            }
            if row_len == 0 {
                return Ok(vec![Vec::new(); rows]);
            }
            Ok(flat.chunks(row_len).map(<[f64]>::to_vec).collect())
        }
        (other, _) => Err(wrong_kind("theta", &other)),
    }
}

fn wrong_kind(wanted: &str, got: &Sidecar) -> Error {
    let kind = match got {
        Sidecar::Denoiser { .. } => "denoiser",
        Sidecar::Classifier { .. } => "classifier",
        Sidecar::Theta { .. } => "theta",
    };
    Error::InvalidArgument(format!("expected a {wanted} file, found a {kind} file"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, TrainableDenoiser};
    use crate::sample::Condition;

    #[test]
    fn blob_round_trip_is_bitwise() {
        let values = [0.0, -0.0, 1.5, f64::MIN_POSITIVE, -1e300, 0.1 + 0.2];
        let back = decode_blob(&encode_blob(&values)).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(&encode_blob(&[1.0])[..], &1.0f64.to_le_bytes());
        assert!(decode_blob(&[0u8; 7]).is_err());
    }

    #[test]
    fn denoiser_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("models/den");
        let mut arch = DenoiserArch::new(Shape::points(2), 3);
        arch.hidden = vec![16, 16];
        let m = MlpDenoiser::init(arch, 5).unwrap();
        save_denoiser(&m, &stem).unwrap();
        let back = load_denoiser(&stem).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.arch(), m.arch());
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&stem)).unwrap()).unwrap();
        for key in ["layer_sizes", "time_embed_dim", "cond_dim", "schedule_family", "T"] {
            assert!(side.get(key).is_some(), "sidecar lacks {key}");
        }
        let x = [0.3, -0.2];
        assert_eq!(
            back.predict_rows(&x, &[Condition::class(1)], &[500]),
            m.predict_rows(&x, &[Condition::class(1)], &[500])
        );
        assert!(load_classifier(&stem).is_err());
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("theta");
        save_thetas(&[vec![1.0, 2.0], vec![3.0, 4.0]], "identity", Shape::points(2), &stem).unwrap();
        assert_eq!(load_thetas(&stem).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        fs::write(blob_path(&stem), encode_blob(&[1.0, 2.0, 3.0, 5.0])).unwrap();
        assert!(load_thetas(&stem).is_err());
    }

    #[test]
    fn classifier_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("clf");
        let c = ClassifierReward::init(Shape::points(2), 4, 1);
        save_classifier(&c, &stem).unwrap();
        assert_eq!(load_classifier(&stem).unwrap(), c);
    }
}

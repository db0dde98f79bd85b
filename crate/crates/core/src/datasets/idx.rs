use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::FeatureShape;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image file and its label file (either may be gzipped).
/// Pixels are scaled to `[0, 1]` and labels become one-hot vectors over
/// `max(label) + 1` classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    parse_idx(&images, images_path, &labels, labels_path)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends before {what}"),
        })
}

pub fn parse_idx(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
) -> Result<Dataset> {
    let magic = be_u32(images, 0, images_path, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let magic = be_u32(labels, 0, labels_path, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n_images = be_u32(images, 4, images_path, "image count")? as usize;
    let rows = be_u32(images, 8, images_path, "row count")? as usize;
    let cols = be_u32(images, 12, images_path, "column count")? as usize;
    let n_labels = be_u32(labels, 4, labels_path, "label count")? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let pixels = &images[16..];
    let need = n_images * rows * cols;
    if pixels.len() < need {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            detail: format!("expected {need} pixel bytes, found {}", pixels.len()),
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            detail: format!(
                "expected {n_labels} label bytes, found {}",
                label_bytes.len()
            ),
        });
    }
    let label_bytes = &label_bytes[..n_labels];
    let num_classes = label_bytes
        .iter()
        .copied()
        .max()
        .map_or(2, |m| m as usize + 1)
        .max(2);
    let examples = pixels[..need]
        .chunks_exact(rows * cols)
        .zip(label_bytes)
        .map(|(img, &l)| {
            let features = img.iter().map(|&p| p as f64 / 255.0).collect();
            LabeledExample::one_hot(features, l as usize, num_classes)
        })
        .collect();
    Ok(Dataset {
        examples,
        num_classes,
        shape: FeatureShape::Image {
            channels: 1,
            height: rows,
            width: cols,
        },
    })
}

impl Dataset {
    /// Widens one-hot labels to `k` classes (e.g. a data subset that happens
    /// to miss the highest class).
    pub fn with_num_classes(mut self, k: usize) -> Result<Self> {
        if k < self.num_classes {
            return Err(Error::invalid(format!(
                "dataset already has {} classes, cannot shrink to {k}",
                self.num_classes
            )));
        }
        for ex in &mut self.examples {
            ex.label.resize(k, 0.0);
        }
        self.num_classes = k;
        Ok(self)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Four 28x28 images whose pixels encode their index, labels 3, 1, 4, 1.
    pub(crate) fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        images.extend_from_slice(&4u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..4u8 {
            for p in 0..784usize {
                images.push(if p % 7 == 0 { 255 } else { i * 60 });
            }
        }
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&4u32.to_be_bytes());
        labels.extend_from_slice(&[3, 1, 4, 1]);
        (images, labels)
    }

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    #[test]
    fn parses_fixture() {
        let (images, labels) = fixture();
        let ds = parse_idx(&images, p("img"), &labels, p("lbl")).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(
            ds.shape,
            FeatureShape::Image {
                channels: 1,
                height: 28,
                width: 28
            }
        );
        assert_eq!(ds.classes(), vec![3, 1, 4, 1]);
        assert_eq!(ds.num_classes, 5);
        assert!(ds
            .examples
            .iter()
            .flat_map(|e| &e.features)
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.examples[2].features[1], 120.0 / 255.0);
        assert_eq!(ds.examples[2].features[0], 1.0);
        ds.validate().unwrap();
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let (images, labels) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&images).unwrap();
        std::fs::write(&ip, enc.finish().unwrap()).unwrap();
        let lp = dir.path().join("labels");
        std::fs::write(&lp, &labels).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
    }

    #[test]
    fn distinct_errors() {
        let (images, labels) = fixture();
        let mut bad = images.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx(&bad, p("i"), &labels, p("l")),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            parse_idx(&images[..images.len() - 10], p("i"), &labels, p("l")),
            Err(Error::Truncated { .. })
        ));
        let mut short = labels.clone();
        short[7] = 3;
        short.pop();
        assert!(matches!(
            parse_idx(&images, p("i"), &short, p("l")),
            Err(Error::CountMismatch {
                images: 4,
                labels: 3
            })
        ));
        assert!(matches!(
            parse_idx(&images[..6], p("i"), &labels, p("l")),
            Err(Error::Truncated { .. })
        ));
    }
}

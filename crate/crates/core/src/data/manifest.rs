//! Dataset manifests: one CSV row per image with its label, split,
//! provenance and an optional crop rectangle.
//!
//! Header: `path,label,split,source,crop_x,crop_y,crop_w,crop_h`. Crop fields
//! are empty when absent; an empty split means unassigned. Relative paths are
//! resolved against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::cache;
use crate::error::{Error, Result};
use crate::model::ClassLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    #[serde(alias = "")]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Xray,
    Ct,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Xray => "xray",
            Modality::Ct => "ct",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xray" => Ok(Modality::Xray),
            "ct" => Ok(Modality::Ct),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

/// Crop rectangle in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl Crop {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.width > 0
            && self.height > 0
            && self.x as u64 + self.width as u64 <= width as u64
            && self.y as u64 + self.height as u64 <= height as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// Raw label as written in the manifest; valid values are 0 and 1.
    pub label: i64,
    pub split: Split,
    pub source: String,
    pub crop: Option<Crop>,
}

impl ImageRecord {
    pub fn new(path: impl Into<PathBuf>, label: ClassLabel, source: &str) -> Self {
        Self {
            path: path.into(),
            label: label.index() as i64,
            split: Split::Unassigned,
            source: source.into(),
            crop: None,
        }
    }

    pub fn class_label(&self) -> Result<ClassLabel> {
        u8::try_from(self.label)
            .ok()
            .and_then(|l| ClassLabel::from_index(l as usize))
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}: label {} is not 0 or 1",
                    self.path.display(),
                    self.label
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub modality: Modality,
    /// Side length images are resized to (224 or 227).
    pub target_size: usize,
    /// Directory relative record paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    path: String,
    label: String,
    split: String,
    source: String,
    crop_x: Option<u32>,
    crop_y: Option<u32>,
    crop_w: Option<u32>,
    crop_h: Option<u32>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, target_size: usize) -> Self {
        Self {
            records,
            modality: Modality::Xray,
            target_size,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn read_csv(reader: impl Read, base_dir: &Path, target_size: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row?;
            let line = i + 2;
            let label = row.label.parse::<i64>().map_err(|_| {
                Error::Data(format!(
                    "manifest line {line}: label `{}` is not an integer",
                    row.label
                ))
            })?;
            let crop = match (row.crop_x, row.crop_y, row.crop_w, row.crop_h) {
                (None, None, None, None) => None,
                (Some(x), Some(y), Some(width), Some(height)) => Some(Crop {
                    x,
                    y,
                    width,
                    height,
                }),
                _ => {
                    return Err(Error::Data(format!(
                        "manifest line {line}: crop fields must be all present or all empty"
                    )))
                }
            };
            records.push(ImageRecord {
                path: PathBuf::from(row.path),
                label,
                split: Split::parse(&row.split)
                    .map_err(|e| Error::Data(format!("manifest line {line}: {e}")))?,
                source: row.source,
                crop,
            });
        }
        Ok(Self {
            records,
            modality: Modality::Xray,
            target_size,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path, target_size: usize) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::read_csv(file, &base, target_size)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(Row {
                path: r.path.to_string_lossy().into_owned(),
                label: r.label.to_string(),
                split: r.split.as_str().into(),
                source: r.source.clone(),
                crop_x: r.crop.map(|c| c.x),
                crop_y: r.crop.map(|c| c.y),
                crop_w: r.crop.map(|c| c.width),
                crop_h: r.crop.map(|c| c.height),
            })?;
        }
        if self.records.is_empty() {
            w.write_record([
                "path", "label", "split", "source", "crop_x", "crop_y", "crop_w", "crop_h",
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.in_split(split).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyPath {
        row: usize,
    },
    MissingFile {
        path: PathBuf,
    },
    Unreadable {
        path: PathBuf,
        message: String,
    },
    DuplicatePath {
        path: PathBuf,
    },
    BadLabel {
        path: PathBuf,
        label: i64,
    },
    CropOutOfBounds {
        path: PathBuf,
        crop: Crop,
        width: u32,
        height: u32,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPath { row } => write!(f, "record {row}: empty path"),
            Violation::MissingFile { path } => write!(f, "{}: file not found", path.display()),
            Violation::Unreadable { path, message } => write!(f, "{}: {message}", path.display()),
            Violation::DuplicatePath { path } => write!(f, "{}: duplicate path", path.display()),
            Violation::BadLabel { path, label } => {
                write!(f, "{}: label {label} is not 0 or 1", path.display())
            }
            Violation::CropOutOfBounds {
                path,
                crop,
                width,
                height,
            } => write!(
                f,
                "{}: crop ({}, {}, {}x{}) outside {width}x{height} image",
                path.display(),
                crop.x,
                crop.y,
                crop.width,
                crop.height
            ),
        }
    }
}

/// Lists every problem with the manifest; an empty list means clean.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (row, r) in manifest.records.iter().enumerate() {
        if r.path.as_os_str().is_empty() {
            out.push(Violation::EmptyPath { row });
            continue;
        }
        if !seen.insert(r.path.clone()) {
            out.push(Violation::DuplicatePath {
                path: r.path.clone(),
            });
        }
        if r.class_label().is_err() {
            out.push(Violation::BadLabel {
                path: r.path.clone(),
                label: r.label,
            });
        }
        let full = manifest.resolve(r);
        if !full.is_file() {
            out.push(Violation::MissingFile {
                path: r.path.clone(),
            });
            continue;
        }
        let Some(crop) = r.crop else { continue };
        let dims = if cache::is_cached_tensor(&full) {
            cache::read_descriptor(&full).map(|d| (d.shape[1] as u32, d.shape[0] as u32))
        } else {
            image::image_dimensions(&full).map_err(|e| Error::Data(e.to_string()))
        };
        match dims {
            Ok((width, height)) if !crop.fits(width, height) => {
                out.push(Violation::CropOutOfBounds {
                    path: r.path.clone(),
                    crop,
                    width,
                    height,
                })
            }
            Ok(_) => {}
            Err(e) => out.push(Violation::Unreadable {
                path: r.path.clone(),
                message: e.to_string(),
            }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "path,label,split,source,crop_x,crop_y,crop_w,crop_h\n\
                       a.png,1,train,github,0,0,4,4\n\
                       b.png,0,,kaggle,,,,\n";

    #[test]
    fn parse_and_write() {
        let m = DatasetManifest::read_csv(CSV.as_bytes(), Path::new("/data"), 224).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(
            m.records[0].crop,
            Some(Crop {
                x: 0,
                y: 0,
                width: 4,
                height: 4
            })
        );
        assert_eq!(m.records[1].split, Split::Unassigned);
        assert_eq!(m.resolve(&m.records[1]), PathBuf::from("/data/b.png"));
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), CSV);
    }

    #[test]
    fn partial_crop_rejected() {
        let bad = "path,label,split,source,crop_x,crop_y,crop_w,crop_h\na.png,1,,x,1,,,\n";
        assert!(DatasetManifest::read_csv(bad.as_bytes(), Path::new("."), 224).is_err());
    }

    fn write_png(path: &Path, w: u32, h: u32) {
        image::RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn violations() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 8, 6);
        write_png(&dir.path().join("b.png"), 8, 6);
        let clean = DatasetManifest {
            records: vec![
                ImageRecord::new("a.png", ClassLabel::Covid, "github"),
                ImageRecord::new("b.png", ClassLabel::Normal, "kaggle"),
            ],
            modality: Modality::Xray,
            target_size: 224,
            base_dir: dir.path().to_path_buf(),
        };
        assert!(validate_manifest(&clean).is_empty());

        let mut dup = clean.clone();
        dup.records[1].path = "a.png".into();
        dup.records[1].label = 1;
        assert_eq!(
            validate_manifest(&dup),
            vec![Violation::DuplicatePath {
                path: "a.png".into()
            }]
        );

        let mut crop = clean.clone();
        crop.records[0].crop = Some(Crop {
            x: 4,
            y: 0,
            width: 5,
            height: 6,
        });
        let v = validate_manifest(&crop);
        assert_eq!(v.len(), 1);
        assert!(
            matches!(&v[0], Violation::CropOutOfBounds { path, width: 8, .. } if path == Path::new("a.png"))
        );

        let mut missing = clean.clone();
        missing.records[0].path = "nope.png".into();
        missing.records[1].label = 3;
        let v = validate_manifest(&missing);
        assert!(v.contains(&Violation::MissingFile {
            path: "nope.png".into()
        }));
        assert!(v.contains(&Violation::BadLabel {
            path: "b.png".into(),
            label: 3
        }));
    }
}

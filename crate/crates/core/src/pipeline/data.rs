//! Dataset ingestion: PGM image trees and feature CSV files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageFormat};
use ndarray::Array2;
use thiserror::Error;

use crate::convnet::Image;
use crate::svm::fmt17;

/// Class names used when a source does not carry its own.
pub const DEFAULT_CLASS_NAMES: [&str; 3] = ["covid", "normal", "pneumonia"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
    #[error("images have inconsistent dimensions: {}", .0.join(", "))]
    MixedDimensions(Vec<String>),
    #[error("class directory {0} contains no .pgm files")]
    EmptyClass(PathBuf),
    #[error("no class directories under {0}")]
    NoClasses(PathBuf),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{0}: header has no `label` column")]
    MissingLabel(PathBuf),
    #[error("row {row}, column {col}: cannot parse {value:?}")]
    NonNumeric {
        row: usize,
        col: usize,
        value: String,
    },
    #[error("row {row}: expected {expected} cells, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: label {label} outside 0..{classes}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Images(Vec<Image>),
    Features(Array2<f64>),
}

/// Samples with labels `0..K` and one name per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Samples,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Source file per sample, empty when generated in memory.
    pub paths: Vec<PathBuf>,
}

impl LabeledDataset {
    pub fn from_features(
        features: Array2<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let ds = Self {
            samples: Samples::Features(features),
            labels,
            class_names,
            paths: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_images(
        images: Vec<Image>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let ds = Self {
            samples: Samples::Images(images),
            labels,
            class_names,
            paths: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        match &self.samples {
            Samples::Features(x) => Some(x),
            Samples::Images(_) => None,
        }
    }

    pub fn images(&self) -> Option<&[Image]> {
        match &self.samples {
            Samples::Images(v) => Some(v),
            Samples::Features(_) => None,
        }
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.labels.is_empty() {
            return Err(DataError::Empty);
        }
        let n = match &self.samples {
            Samples::Images(v) => {
                if let Some(first) = v.first() {
                    let dims = |i: &Image| (i.height(), i.width(), i.channels());
                    if v.iter().any(|i| dims(i) != dims(first)) {
                        return Err(DataError::Invalid(
                            "images have inconsistent dimensions".into(),
                        ));
                    }
                }
                v.len()
            }
            Samples::Features(x) => {
                if x.ncols() == 0 {
                    return Err(DataError::Invalid("feature matrix has no columns".into()));
                }
                x.nrows()
            }
        };
        if n != self.labels.len() {
            return Err(DataError::Invalid(format!(
                "{n} samples but {} labels",
                self.labels.len()
            )));
        }
        let k = self.classes();
        if let Some((row, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(DataError::LabelOutOfRange {
                row: row + 1,
                label,
                classes: k,
            });
        }
        Ok(())
    }
}

/// `covid, normal, pneumonia` for up to three classes, then `class<k>`.
pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|i| {
            DEFAULT_CLASS_NAMES
                .get(i)
                .map_or_else(|| format!("class{i}"), |s| s.to_string())
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        out.push(entry.map_err(io_err(dir))?.path());
    }
    out.sort();
    Ok(out)
}

/// Decodes one binary (P5) 8-bit PGM file.
pub fn read_pgm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: String| DataError::BadImage {
        path: path.to_path_buf(),
        reason,
    };
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a binary PGM (missing P5 magic)".into()));
    }
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| bad(e.to_string()))?;
    let DynamicImage::ImageLuma8(gray) = decoded else {
        return Err(bad("expected 8-bit grayscale".into()));
    };
    let (w, h) = gray.dimensions();
    Image::from_gray8(h as usize, w as usize, gray.as_raw()).map_err(|e| bad(e.to_string()))
}

/// Writes a single-channel image as binary PGM.
pub fn write_pgm(path: &Path, img: &Image) -> Result<(), DataError> {
    if img.channels() != 1 {
        return Err(DataError::Invalid("PGM output needs one channel".into()));
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .encode(
            img.to_gray8().as_slice(),
            img.width() as u32,
            img.height() as u32,
            ExtendedColorType::L8,
        )
        .map_err(|e| DataError::BadImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    w.flush().map_err(io_err(path))
}

/// Loads `root/<class>/<name>.pgm`. Classes are the subdirectories in
/// lexicographic order; files within a class are read in lexicographic order.
pub fn load_images(root: &Path) -> Result<LabeledDataset, DataError> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut paths = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        if files.is_empty() {
            return Err(DataError::EmptyClass(dir.clone()));
        }
        for f in files {
            images.push(read_pgm(&f)?);
            labels.push(label);
            paths.push(f);
        }
        class_names.push(
            dir.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }

    let dims = |i: &Image| (i.height(), i.width());
    let first = dims(&images[0]);
    if images.iter().any(|i| dims(i) != first) {
        let offenders = images
            .iter()
            .zip(&paths)
            .filter(|(i, _)| dims(i) != first)
            .map(|(i, p)| format!("{} ({}x{})", p.display(), i.height(), i.width()))
            .collect();
        return Err(DataError::MixedDimensions(offenders));
    }
    let ds = LabeledDataset {
        samples: Samples::Images(images),
        labels,
        class_names,
        paths,
    };
    for (name, count) in ds.class_names.iter().zip(ds.class_counts()) {
        log::info!("class {name}: {count} images");
    }
    Ok(ds)
}

/// Writes every image under `root/<class>/<index>.pgm`.
pub fn save_images(ds: &LabeledDataset, root: &Path) -> Result<(), DataError> {
    let images = ds
        .images()
        .ok_or_else(|| DataError::Invalid("dataset holds features, not images".into()))?;
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for (i, (img, &label)) in images.iter().zip(&ds.labels).enumerate() {
        write_pgm(
            &root
                .join(&ds.class_names[label])
                .join(format!("{i:05}.pgm")),
            img,
        )?;
    }
    Ok(())
}

/// Reads a CSV with header `f0,...,f{D-1},label`. The label column may sit
/// anywhere; every other column is a feature. `classes` fixes K, otherwise it
/// is `max(label) + 1`.
pub fn load_features(path: &Path, classes: Option<usize>) -> Result<LabeledDataset, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| DataError::MissingLabel(path.to_path_buf()))?;
    let width = header.len();
    let dim = width - 1;
    if dim == 0 {
        return Err(DataError::Invalid(format!(
            "{}: no feature columns",
            path.display()
        )));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        // Row numbers count the header as row 1.
        let row = i + 2;
        if rec.len() != width {
            return Err(DataError::Ragged {
                row,
                expected: width,
                found: rec.len(),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let bad = || DataError::NonNumeric {
                row,
                col: col + 1,
                value: cell.to_string(),
            };
            if col == label_col {
                labels.push(cell.parse::<usize>().map_err(|_| bad())?);
            } else {
                let v: f64 = cell.parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let k = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(DataError::LabelOutOfRange {
            row: row + 2,
            label,
            classes: k,
        });
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values).expect("row widths checked");
    Ok(LabeledDataset {
        samples: Samples::Features(features),
        labels,
        class_names: default_class_names(k),
        paths: vec![path.to_path_buf()],
    })
}

/// Writes the feature CSV with 17 significant digits per value.
pub fn save_features(ds: &LabeledDataset, path: &Path) -> Result<(), DataError> {
    let x = ds
        .features()
        .ok_or_else(|| DataError::Invalid("dataset holds images, not features".into()))?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        let header: Vec<String> = (0..x.ncols()).map(|j| format!("f{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for (row, label) in x.rows().into_iter().zip(&ds.labels) {
            let cells: Vec<String> = row.iter().map(|&v| fmt17(v)).collect();
            writeln!(w, "{},{label}", cells.join(","))?;
        }
        w.flush()
    };
    write().map_err(io_err(path))
}

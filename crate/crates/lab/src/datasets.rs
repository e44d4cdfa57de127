//! Loading the train/test splits a config describes.

use std::path::{Path, PathBuf};

use pvlu_core::data::{self, synthetic, Normalization};
use pvlu_core::{Dataset, Error, Split};

use crate::config::{DataFormat, DataSection, ExperimentConfig};
use crate::error::{in_file, LabError, LabResult};

fn read(path: &Path) -> LabResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn load_idx(
    images: &Path,
    labels: &Path,
    classes: Option<usize>,
    split: Split,
) -> LabResult<Dataset> {
    let (img, lab) = (read(images)?, read(labels)?);
    data::parse_idx(&img, &lab, classes, split).map_err(|e| {
        // Offsets past the image header refer to whichever file failed; name both.
        in_file(
            &PathBuf::from(format!("{} / {}", images.display(), labels.display())),
            e,
        )
    })
}

/// Reads one or more CIFAR batch files as a single dataset.
pub fn load_cifar(
    files: &[PathBuf],
    label_bytes: usize,
    classes: usize,
    split: Split,
) -> LabResult<Dataset> {
    let mut bytes = Vec::new();
    let mut starts = Vec::with_capacity(files.len());
    for f in files {
        starts.push(bytes.len());
        bytes.extend(read(f)?);
    }
    data::parse_cifar(&bytes, label_bytes, classes, split).map_err(|e| match e {
        Error::Format { offset, message } => {
            let i = starts.partition_point(|&s| s <= offset).saturating_sub(1);
            in_file(
                &files[i],
                Error::Format {
                    offset: offset - starts[i],
                    message,
                },
            )
        }
        other => LabError::Core(other),
    })
}

fn limit(ds: Dataset, n: Option<usize>) -> LabResult<Dataset> {
    match n {
        Some(n) if n < ds.len() => Ok(ds.take(n)?),
        _ => Ok(ds),
    }
}

/// Loads `(train, test)` as configured, applying limits and normalization.
pub fn load(cfg: &ExperimentConfig) -> LabResult<(Dataset, Dataset)> {
    let d: &DataSection = &cfg.data;
    let path = |p: &Option<PathBuf>| cfg.resolve(p.as_deref().expect("validated"));
    let (train, test) = match d.format {
        DataFormat::Idx => (
            load_idx(
                &path(&d.train_images),
                &path(&d.train_labels),
                d.classes,
                Split::Train,
            )?,
            load_idx(
                &path(&d.test_images),
                &path(&d.test_labels),
                d.classes,
                Split::Test,
            )?,
        ),
        DataFormat::Cifar => {
            let classes = d.classes.unwrap_or(10);
            let files = |v: &[PathBuf]| v.iter().map(|p| cfg.resolve(p)).collect::<Vec<_>>();
            (
                load_cifar(
                    &files(&d.train_batches),
                    d.label_bytes,
                    classes,
                    Split::Train,
                )?,
                load_cifar(&files(&d.test_batches), d.label_bytes, classes, Split::Test)?,
            )
        }
        DataFormat::Separable => (
            synthetic::separable(d.train_size, d.side, d.seed, Split::Train)?,
            synthetic::separable(d.test_size, d.side, d.seed + 1, Split::Test)?,
        ),
        DataFormat::CifarLike => (
            synthetic::cifar_like(d.train_size, d.seed, Split::Train)?,
            synthetic::cifar_like(d.test_size, d.seed + 1, Split::Test)?,
        ),
    };
    let (mut train, mut test) = (limit(train, d.train_limit)?, limit(test, d.test_limit)?);
    if train.classes() != test.classes() {
        // IDX class counts default to the largest label seen, which can differ per split.
        let classes = train.classes().max(test.classes());
        train = rebuild(&train, train.images().clone(), classes)?;
        test = rebuild(&test, test.images().clone(), classes)?;
    }
    if d.normalize {
        let norm = Normalization::fit(&train);
        train = rebuild(&train, norm.apply(train.images())?, train.classes())?;
        test = rebuild(&test, norm.apply(test.images())?, test.classes())?;
    }
    Ok((train, test))
}

fn rebuild(ds: &Dataset, images: pvlu_core::Tensor, classes: usize) -> LabResult<Dataset> {
    Ok(Dataset::new(
        images,
        ds.labels().to_vec(),
        classes,
        ds.split(),
    )?)
}

/// Applies a Gaussian filter to every image of a dataset.
pub fn blur(ds: &Dataset, sigma: f64) -> LabResult<Dataset> {
    Ok(ds.map_images(|img| data::gaussian_filter(img, sigma))?)
}

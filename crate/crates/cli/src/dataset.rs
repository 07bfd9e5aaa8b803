//! On-disk dataset layout: PGM image/mask pairs plus a tab-separated
//! manifest carrying the split tag and the generating spec of each sample.

use msv_mamba::error::{Error, Result};
use msv_mamba::pgm;
use msv_mamba::tensor::Tensor;
use msv_mamba::train::Batch;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: String,
    pub spec: String,
}

pub fn write_manifest(dir: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut text = String::from("image\tmask\tsplit\tspec\n");
    for r in records {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.image.display(),
            r.mask.display(),
            r.split,
            r.spec
        ));
    }
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("image\tmask\tsplit\tspec") => {}
        other => {
            return Err(Error::Data(format!(
                "bad manifest header in {}: {other:?}",
                path.display()
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Data(format!(
                "manifest line {}: expected 4 tab-separated fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        records.push(SampleRecord {
            image: fields[0].into(),
            mask: fields[1].into(),
            split: fields[2].to_string(),
            spec: fields[3].to_string(),
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", path.display())));
    }
    Ok(records)
}

pub struct LoadedSample {
    pub split: String,
    pub batch: Batch<f32>,
}

/// Reads every manifest entry, checks image/mask extents agree and mask
/// classes stay below `classes`, and converts to single-sample batches.
pub fn load_samples(dir: &Path, classes: usize) -> Result<Vec<LoadedSample>> {
    let records = read_manifest(dir)?;
    let limit = classes.max(2) as u8;
    let mut out = Vec::with_capacity(records.len());
    for r in &records {
        let image = pgm::read(&dir.join(&r.image))?;
        let mask = pgm::read(&dir.join(&r.mask))?;
        if (image.width, image.height) != (mask.width, mask.height) {
            return Err(Error::Data(format!(
                "{}: image is {}x{} but mask is {}x{}",
                r.image.display(),
                image.width,
                image.height,
                mask.width,
                mask.height
            )));
        }
        if let Some(&bad) = mask.data.iter().find(|&&v| v >= limit) {
            return Err(Error::Data(format!(
                "{}: mask value {bad} exceeds class limit {}",
                r.mask.display(),
                limit - 1
            )));
        }
        out.push(LoadedSample {
            split: r.split.clone(),
            batch: Batch {
                images: Tensor::new(
                    vec![1, 1, image.height, image.width],
                    image.to_unit_floats(),
                )?,
                labels: mask.data,
            },
        });
    }
    Ok(out)
}

/// Concatenates equally-shaped single-sample batches along the batch axis.
pub fn stack(samples: &[&Batch<f32>]) -> Result<Batch<f32>> {
    let shape = samples[0].images.shape().to_vec();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if s.images.shape() != &shape[..] {
            return Err(Error::Data(format!(
                "cannot batch samples of extents {:?} and {:?}",
                shape,
                s.images.shape()
            )));
        }
        data.extend_from_slice(s.images.data());
        labels.extend_from_slice(&s.labels);
    }
    let mut out_shape = shape;
    out_shape[0] = samples.len();
    Ok(Batch {
        images: Tensor::new(out_shape, data)?,
        labels,
    })
}

/// Groups loaded samples into fixed-size training batches, preserving
/// manifest order; a short final group is kept.
pub fn into_batches(samples: &[LoadedSample], batch_size: usize) -> Result<Vec<Batch<f32>>> {
    samples
        .chunks(batch_size)
        .map(|chunk| stack(&chunk.iter().map(|s| &s.batch).collect::<Vec<_>>()))
        .collect()
}

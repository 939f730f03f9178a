//! Face samples and the on-disk dataset layout:
//!
//! ```text
//! <root>/manifest.tsv
//! <root>/<split>/<identity>/<domain>_<k>.pgm
//! <root>/<split>/<identity>/<domain>_<k>.mask<i>.pgm   (i = 0..4)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::NUM_PARTS;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Vis,
    Nir,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Vis, Domain::Nir];

    pub fn other(self) -> Domain {
        match self {
            Domain::Vis => Domain::Nir,
            Domain::Nir => Domain::Vis,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Vis => "VIS",
            Domain::Nir => "NIR",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VIS" | "vis" => Ok(Domain::Vis),
            "NIR" | "nir" => Ok(Domain::Nir),
            other => Err(Error::Dataset(format!("unknown domain `{other}`"))),
        }
    }
}

/// One face image with its five component masks (canonical part order).
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    pub sample_id: String,
    pub identity: usize,
    pub domain: Domain,
    /// `[1, H, W]`, intensities in `[0, 1]`.
    pub image: Tensor<f32>,
    pub masks: Vec<BinaryMask>,
}

impl FaceSample {
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Dataset(format!(
                "{}: image must be [1, H, W], got {s:?}",
                self.sample_id
            )));
        }
        if self.masks.len() != NUM_PARTS {
            return Err(Error::Dataset(format!(
                "{}: expected {NUM_PARTS} masks, got {}",
                self.sample_id,
                self.masks.len()
            )));
        }
        if self.masks.iter().any(|m| m.dims() != (s[1], s[2])) {
            return Err(Error::Dataset(format!(
                "{}: mask dimensions differ from the image",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Samples of one split.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<FaceSample>,
}

impl Dataset {
    pub fn new(samples: Vec<FaceSample>) -> Result<Self> {
        for s in &samples {
            s.validate()?;
        }
        Ok(Dataset { samples })
    }

    pub fn samples(&self) -> &[FaceSample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &FaceSample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| s.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Sample indices grouped by identity and domain.
    pub fn index(&self) -> BTreeMap<usize, [Vec<usize>; 2]> {
        let mut map: BTreeMap<usize, [Vec<usize>; 2]> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.identity).or_default()[s.domain as usize].push(i);
        }
        map
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub split: String,
    pub identity: usize,
    pub domain: Domain,
    pub image: String,
    pub masks: [String; NUM_PARTS],
}

pub fn sample_id(split: &str, identity: usize, domain: Domain, k: usize) -> String {
    format!("{split}/{identity:04}/{domain}_{k}")
}

impl ManifestRow {
    pub fn new(split: &str, identity: usize, domain: Domain, k: usize) -> Self {
        let stem = format!("{split}/{identity:04}/{domain}_{k}");
        ManifestRow {
            sample_id: sample_id(split, identity, domain, k),
            split: split.to_string(),
            identity,
            domain,
            image: format!("{stem}.pgm"),
            masks: std::array::from_fn(|i| format!("{stem}.mask{i}.pgm")),
        }
    }
}

const HEADER: [&str; 10] = [
    "sample_id", "split", "identity", "domain", "image", "mask0", "mask1", "mask2", "mask3", "mask4",
];

pub fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = root.join(MANIFEST);
    let csv_err = |e: csv::Error| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .map_err(csv_err)?;
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        let identity = r.identity.to_string();
        let mut rec = vec![
            r.sample_id.as_str(),
            r.split.as_str(),
            identity.as_str(),
            r.domain.as_str(),
            r.image.as_str(),
        ];
        rec.extend(r.masks.iter().map(String::as_str));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST);
    let bad = |detail: String| Error::Format {
        path: path.clone(),
        detail,
    };
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .map_err(|e| bad(e.to_string()))?;
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let identity = rec[2]
            .parse()
            .map_err(|_| bad(format!("bad identity `{}`", &rec[2])))?;
        rows.push(ManifestRow {
            sample_id: rec[0].to_string(),
            split: rec[1].to_string(),
            identity,
            domain: rec[3].parse()?,
            image: rec[4].to_string(),
            masks: std::array::from_fn(|i| rec[5 + i].to_string()),
        });
    }
    Ok(rows)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((h as usize, w as usize, img.into_raw()))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image::save_buffer_with_format(
        path,
        pixels,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Pnm,
    )
    .map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a sample's image and masks under `root` at the manifest paths.
pub fn write_sample(root: &Path, row: &ManifestRow, sample: &FaceSample) -> Result<()> {
    let s = sample.image.shape();
    let (h, w) = (s[1], s[2]);
    let pixels: Vec<u8> = sample.image.data().iter().map(|&v| quantize(v)).collect();
    write_pgm(&root.join(&row.image), h, w, &pixels)?;
    for (m, p) in sample.masks.iter().zip(&row.masks) {
        write_pgm(&root.join(p), h, w, &m.to_gray())?;
    }
    Ok(())
}

fn load_sample(root: &Path, row: &ManifestRow) -> Result<FaceSample> {
    let (h, w, pixels) = read_pgm(&root.join(&row.image))?;
    let image = Tensor::new(
        vec![1, h, w],
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    let mut masks = Vec::with_capacity(NUM_PARTS);
    for p in &row.masks {
        let path = root.join(p);
        let (mh, mw, px) = read_pgm(&path)?;
        if (mh, mw) != (h, w) {
            return Err(Error::Format {
                path,
                detail: format!("mask is {mh}×{mw}, image is {h}×{w}"),
            });
        }
        masks.push(BinaryMask::from_gray(mh, mw, &px)?);
    }
    let sample = FaceSample {
        sample_id: row.sample_id.clone(),
        identity: row.identity,
        domain: row.domain,
        image,
        masks,
    };
    sample.validate()?;
    Ok(sample)
}

/// Loads every manifest row belonging to `split`.
pub fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    let rows = read_manifest(root)?;
    let samples = rows
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_sample(root, r))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "split `{split}` has no samples in {}",
            root.join(MANIFEST).display()
        )));
    }
    Dataset::new(samples)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST)
}

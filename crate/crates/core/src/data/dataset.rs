use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// One aligned record: both modality images, the binary mask (values 0/1)
/// and the image-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub jet: RgbImage,
    pub rgb: RgbImage,
    pub mask: GrayImage,
    pub has_nerve: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Ids that could not be loaded and why.
    pub skipped: Vec<(String, String)>,
    /// Ids whose masks held values other than 0/1/255 and were binarized.
    pub binarized: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub pairs: Vec<SamplePair>,
    pub report: LoadReport,
}

impl LoadedDataset {
    pub fn ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.id.clone()).collect()
    }
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(ids);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, bool>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "id" || &headers[1] != "has_nerve" {
        return Err(Error::invalid(format!(
            "{}: header must be `id,has_nerve`",
            path.display()
        )));
    }
    let mut labels = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let flag = match row[1].trim() {
            "1" | "true" | "True" => true,
            "0" | "false" | "False" => false,
            other => {
                return Err(Error::invalid(format!(
                    "{}: bad has_nerve value `{other}` for id {}",
                    path.display(),
                    &row[0]
                )))
            }
        };
        labels.insert(row[0].trim().to_string(), flag);
    }
    Ok(labels)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::ImageRead {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every id present in all three image directories and in the labels
/// file. Partial ids are listed in the report, not treated as errors.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let jet_ids = png_ids(&root.join("jet"))?;
    let rgb_ids = png_ids(&root.join("rgb"))?;
    let mask_ids = png_ids(&root.join("masks"))?;
    let all: BTreeSet<String> = jet_ids.iter().chain(&rgb_ids).chain(&mask_ids).cloned().collect();
    let mut out = LoadedDataset::default();
    if all.is_empty() {
        return Ok(out);
    }
    let labels_path = root.join("labels.csv");
    if !labels_path.is_file() {
        return Err(Error::io(
            &labels_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "labels file not found"),
        ));
    }
    let labels = read_labels(&labels_path)?;
    for id in all {
        let mut missing = Vec::new();
        for (name, set) in [("jet", &jet_ids), ("rgb", &rgb_ids), ("mask", &mask_ids)] {
            if !set.contains(&id) {
                missing.push(name);
            }
        }
        let label = labels.get(&id).copied();
        if label.is_none() {
            missing.push("label");
        }
        if !missing.is_empty() {
            log::warn!("skipping {id}: missing {}", missing.join(", "));
            out.report.skipped.push((id, format!("missing {}", missing.join(", "))));
            continue;
        }
        let jet = open(&root.join("jet").join(format!("{id}.png")))?.to_rgb8();
        let rgb = open(&root.join("rgb").join(format!("{id}.png")))?.to_rgb8();
        let mut mask = open(&root.join("masks").join(format!("{id}.png")))?.to_luma8();
        if jet.dimensions() != rgb.dimensions() || jet.dimensions() != mask.dimensions() {
            let msg = format!(
                "misaligned modalities: jet {:?}, rgb {:?}, mask {:?}",
                jet.dimensions(),
                rgb.dimensions(),
                mask.dimensions()
            );
            log::warn!("skipping {id}: {msg}");
            out.report.skipped.push((id, msg));
            continue;
        }
        if mask.pixels().any(|p| !matches!(p.0[0], 0 | 1 | 255)) {
            log::warn!("mask for {id} is not binary; thresholding at > 0");
            out.report.binarized.push(id.clone());
        }
        for p in mask.pixels_mut() {
            p.0[0] = u8::from(p.0[0] > 0);
        }
        out.pairs.push(SamplePair {
            id,
            jet,
            rgb,
            mask,
            has_nerve: label.unwrap(),
        });
    }
    Ok(out)
}

fn save(img: &impl SaveAsPng, path: PathBuf) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_png(&path)
}

trait SaveAsPng {
    fn save_png(&self, path: &Path) -> Result<()>;
}

impl SaveAsPng for RgbImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        self.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

impl SaveAsPng for GrayImage {
    fn save_png(&self, path: &Path) -> Result<()> {
        self.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Writes the three images of a pair; the mask is stored as 0/255.
pub fn write_sample(root: &Path, pair: &SamplePair) -> Result<()> {
    save(&pair.jet, root.join("jet").join(format!("{}.png", pair.id)))?;
    save(&pair.rgb, root.join("rgb").join(format!("{}.png", pair.id)))?;
    let mut mask = pair.mask.clone();
    for p in mask.pixels_mut() {
        p.0[0] = if p.0[0] > 0 { 255 } else { 0 };
    }
    save(&mask, root.join("masks").join(format!("{}.png", pair.id)))
}

pub fn write_labels(root: &Path, pairs: &[SamplePair]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["id", "has_nerve"])?;
    for p in pairs {
        w.write_record([p.id.as_str(), if p.has_nerve { "1" } else { "0" }])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use image::{Luma, Rgb};

    use super::*;

    fn pair(id: &str) -> SamplePair {
        let mut mask = GrayImage::new(4, 4);
        mask.put_pixel(1, 1, Luma([1]));
        SamplePair {
            id: id.to_string(),
            jet: RgbImage::from_pixel(4, 4, Rgb([10, 20, 30])),
            rgb: RgbImage::from_pixel(4, 4, Rgb([40, 50, 60])),
            mask,
            has_nerve: true,
        }
    }

    #[test]
    fn loads_complete_ids_and_reports_the_rest() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let pairs: Vec<_> = ["a", "b", "c", "d"].iter().map(|i| pair(i)).collect();
        for p in &pairs {
            write_sample(dir.path(), p)?;
        }
        write_labels(dir.path(), &pairs)?;
        std::fs::remove_file(dir.path().join("rgb/d.png")).unwrap();
        let ds = load_dataset(dir.path())?;
        assert_eq!(ds.ids(), vec!["a", "b", "c"]);
        assert_eq!(ds.report.skipped.len(), 1);
        assert_eq!(ds.report.skipped[0].0, "d");
        assert_eq!(ds.pairs[0], pairs[0]);
        Ok(())
    }

    #[test]
    fn empty_root_is_empty_dataset() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_dataset(dir.path())?;
        assert!(ds.pairs.is_empty());
        assert!(load_dataset(&dir.path().join("nope")).is_err());
        Ok(())
    }

    #[test]
    fn odd_mask_values_are_binarized() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let p = pair("x");
        write_sample(dir.path(), &p)?;
        write_labels(dir.path(), &[p])?;
        let mut m = GrayImage::new(4, 4);
        m.put_pixel(2, 3, Luma([137]));
        m.save(dir.path().join("masks/x.png")).unwrap();
        let ds = load_dataset(dir.path())?;
        assert_eq!(ds.report.binarized, vec!["x"]);
        let vals: Vec<u8> = ds.pairs[0].mask.pixels().map(|p| p.0[0]).collect();
        assert_eq!(vals.iter().filter(|&&v| v == 1).count(), 1);
        assert!(vals.iter().all(|&v| v <= 1));
        Ok(())
    }

    #[test]
    fn unreadable_image_is_a_hard_error() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let p = pair("x");
        write_sample(dir.path(), &p)?;
        write_labels(dir.path(), &[p])?;
        std::fs::write(dir.path().join("jet/x.png"), b"not a png").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::ImageRead { path, .. }) => assert!(path.ends_with("jet/x.png")),
            other => panic!("expected image read error, got {other:?}"),
        }
        Ok(())
    }
}

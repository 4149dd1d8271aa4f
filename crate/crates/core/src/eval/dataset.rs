//! Dataset manifests and seeded normal-shot selection.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{sha256_hex, BinaryLabel};
use crate::vision::ImageBuffer;

pub const SUPPORTED_SHOTS: [usize; 4] = [0, 1, 2, 4];
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `<class>/train/good/*` and `<class>/test/<good|defect>/*`.
    MvtecDirs,
    /// A `path,class,label,split` CSV.
    ManifestCsv,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec_dirs" => Ok(Layout::MvtecDirs),
            "manifest_csv" => Ok(Layout::ManifestCsv),
            other => Err(Error::Config(format!(
                "unknown layout `{other}` (mvtec_dirs|manifest_csv)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("split must be train or test, got `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Stable identifier: the path relative to the dataset root, without extension.
    pub image_id: String,
    pub path: PathBuf,
    pub class_name: String,
    pub label: BinaryLabel,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.class_name.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn test_rows<'a>(&'a self, class_name: &'a str) -> impl Iterator<Item = &'a ManifestRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.split == Split::Test && r.class_name == class_name)
    }

    /// Normal training images of a class, ordered by image id.
    pub fn shot_pool(&self, class_name: &str) -> Vec<&ManifestRow> {
        let mut pool: Vec<&ManifestRow> = self
            .rows
            .iter()
            .filter(|r| r.split == Split::Train && r.class_name == class_name && r.label == BinaryLabel::Normal)
            .collect();
        pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        pool
    }

    /// `k` normal references for a class. The pool is shuffled with a seed derived
    /// from (dataset, class, seed) and the first `k` taken, so smaller shot lists
    /// are prefixes of larger ones.
    pub fn select_shots(&self, class_name: &str, k: usize, seed: u64) -> Result<Vec<&ManifestRow>> {
        if !SUPPORTED_SHOTS.contains(&k) {
            return Err(Error::Config(format!("unsupported shot count {k} (0, 1, 2 or 4)")));
        }
        let mut pool = self.shot_pool(class_name);
        if pool.len() < k {
            return Err(Error::Precondition(format!(
                "class {class_name} has {} normal training images, {k} needed",
                pool.len()
            )));
        }
        let digest = sha256_hex(format!("{}\u{0}{class_name}\u{0}{seed}", self.name).as_bytes());
        let mut key = [0u8; 32];
        hex::decode_to_slice(&digest, &mut key).expect("sha256 hex is 32 bytes");
        pool.shuffle(&mut ChaCha8Rng::from_seed(key));
        pool.truncate(k);
        Ok(pool)
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn image_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn decodes(path: &Path) -> bool {
    match fs::read(path)
        .map_err(|e| e.to_string())
        .and_then(|b| ImageBuffer::decode(&b).map_err(|e| e.to_string()))
    {
        Ok(_) => true,
        Err(e) => {
            warn!("excluding unreadable image {}: {e}", path.display());
            false
        }
    }
}

fn dataset_name(root: &Path) -> String {
    root.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.exists() {
        return Err(Error::Precondition(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    match layout {
        Layout::MvtecDirs => load_mvtec(root),
        Layout::ManifestCsv => load_csv(root),
    }
}

fn load_mvtec(root: &Path) -> Result<DatasetManifest> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    for class_dir in &class_dirs {
        let class_name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
        let (train_good, test) = (class_dir.join("train").join("good"), class_dir.join("test"));
        let need = [
            (&train_good, "train/good"),
            (&test, "test"),
            (&test.join("good"), "test/good"),
        ];
        let absent: Vec<&str> = need.iter().filter(|(p, _)| !p.is_dir()).map(|(_, n)| *n).collect();
        if !absent.is_empty() {
            missing.push(format!("{class_name}: missing {}", absent.join(", ")));
            continue;
        }
        let mut push = |path: PathBuf, label, split| {
            if is_image(&path) && decodes(&path) {
                rows.push(ManifestRow {
                    image_id: image_id(root, &path),
                    path,
                    class_name: class_name.clone(),
                    label,
                    split,
                });
            }
        };
        for path in sorted_entries(&train_good)? {
            push(path, BinaryLabel::Normal, Split::Train);
        }
        for sub in sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()) {
            let label = if sub.file_name().is_some_and(|n| n == "good") {
                BinaryLabel::Normal
            } else {
                BinaryLabel::Anomalous
            };
            for path in sorted_entries(&sub)? {
                push(path, label, Split::Test);
            }
        }
    }
    if class_dirs.is_empty() || !missing.is_empty() {
        return Err(Error::Layout(format!(
            "expected <class>/train/good/*, <class>/test/good/* and <class>/test/<defect>/* under {}; {}",
            root.display(),
            if missing.is_empty() {
                "no class directories found".into()
            } else {
                missing.join("; ")
            }
        )));
    }
    Ok(DatasetManifest {
        name: dataset_name(root),
        rows,
    })
}

#[derive(Deserialize)]
struct CsvRow {
    path: String,
    class: String,
    label: String,
    split: String,
}

fn load_csv(root: &Path) -> Result<DatasetManifest> {
    let (csv_path, base) = if root.is_file() {
        (
            root.to_path_buf(),
            root.parent().unwrap_or(Path::new(".")).to_path_buf(),
        )
    } else {
        (root.join("manifest.csv"), root.to_path_buf())
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&csv_path)
        .map_err(|e| Error::Parse(format!("{}: {e}", csv_path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse(format!("manifest row {line}: {e}")))?;
        let label = match rec.label.as_str() {
            "0" => BinaryLabel::Normal,
            "1" => BinaryLabel::Anomalous,
            other => {
                return Err(Error::Parse(format!(
                    "manifest row {line}: label must be 0 or 1, got `{other}`"
                )))
            }
        };
        let split: Split = rec
            .split
            .parse()
            .map_err(|e| Error::Parse(format!("manifest row {line}: {e}")))?;
        if rec.class.is_empty() {
            return Err(Error::Parse(format!("manifest row {line}: empty class")));
        }
        let path = base.join(&rec.path);
        if decodes(&path) {
            rows.push(ManifestRow {
                image_id: image_id(&base, &path),
                path,
                class_name: rec.class,
                label,
                split,
            });
        }
    }
    Ok(DatasetManifest {
        name: dataset_name(&base),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, split: Split) -> ManifestRow {
        ManifestRow {
            image_id: id.into(),
            path: PathBuf::from(id),
            class_name: "c".into(),
            label: BinaryLabel::Normal,
            split,
        }
    }

    #[test]
    fn shots_are_nested_and_seeded() {
        let m = DatasetManifest {
            name: "d".into(),
            rows: (0..9)
                .map(|i| row(&format!("c/train/good/{i}"), Split::Train))
                .collect(),
        };
        let ids = |k, seed| -> Vec<String> {
            m.select_shots("c", k, seed)
                .unwrap()
                .iter()
                .map(|r| r.image_id.clone())
                .collect()
        };
        let four = ids(4, 17);
        assert_eq!(ids(1, 17), four[..1]);
        assert_eq!(ids(2, 17), four[..2]);
        assert_eq!(ids(4, 17), four);
        assert!(ids(0, 17).is_empty());
        assert!(matches!(m.select_shots("c", 3, 17), Err(Error::Config(_))));
        // a different seed gives a different draw over a 9-image pool (frozen for seed 18)
        assert_ne!(ids(4, 18), four);
    }

    #[test]
    fn too_small_pool_is_precondition_error() {
        let m = DatasetManifest {
            name: "d".into(),
            rows: vec![row("c/train/good/0", Split::Train)],
        };
        assert!(matches!(m.select_shots("c", 2, 1), Err(Error::Precondition(_))));
    }
}

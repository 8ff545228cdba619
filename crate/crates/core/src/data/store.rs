//! On-disk dataset: `manifest.jsonl`, raw image blobs, lexicon and vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CadaError, Result};
use crate::textproc::{PosLexicon, Vocabulary};

use super::generate::{self, PersonSpec};

pub const MANIFEST: &str = "manifest.jsonl";
pub const LEXICON: &str = "lexicon.tsv";
pub const VOCAB: &str = "vocab.txt";
const DTYPE_F32: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub image_path: String,
    pub caption: String,
    pub split: Split,
    /// SHA-256 of the blob file, hex.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub n_ids: usize,
    /// Identities held out for testing; `None` takes a fifth.
    pub test_ids: Option<usize>,
    pub images_per_id: usize,
    pub captions_per_image: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { n_ids: 80, test_ids: None, images_per_id: 4, captions_per_image: 2, image_size: 32, seed: 7 }
    }
}

impl GenerateOptions {
    pub fn n_test(&self) -> usize {
        self.test_ids.unwrap_or(self.n_ids / 5)
    }
}

#[derive(Debug, Clone)]
pub struct GenerationSummary {
    pub records: Vec<DatasetRecord>,
    pub specs: Vec<PersonSpec>,
    pub train_ids: usize,
    pub test_ids: usize,
    pub capacity: usize,
    /// SHA-256 of the manifest bytes.
    pub manifest_sha256: String,
}

/// Blob: `u16` height, width, channels and dtype tag (little-endian), then
/// the values as little-endian `f32`.
pub fn encode_blob(data: &[f32], h: usize, w: usize, c: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + data.len() * 4);
    for v in [h as u16, w as u16, c as u16, DTYPE_F32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_blob`]; returns `(values, [h, w, c])`.
pub fn decode_blob(bytes: &[u8]) -> std::result::Result<(Vec<f32>, [usize; 3]), String> {
    if bytes.len() < 8 {
        return Err(format!("blob of {} bytes has no header", bytes.len()));
    }
    let u = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize;
    let (h, w, c, tag) = (u(0), u(1), u(2), u(3) as u16);
    if tag != DTYPE_F32 {
        return Err(format!("unknown dtype tag {tag}"));
    }
    let n = h * w * c;
    if bytes.len() != 8 + 4 * n {
        return Err(format!("blob holds {} payload bytes, header {h}x{w}x{c} needs {}", bytes.len() - 8, 4 * n));
    }
    let data = bytes[8..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((data, [h, w, c]))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CadaError::io(path, e))
}

/// Writes a synthetic dataset to `out_dir`. Identity `i` draws its images
/// and captions from its own stream of the seeded generator.
pub fn generate_dataset(opts: &GenerateOptions, out_dir: &Path) -> Result<GenerationSummary> {
    let n_test = opts.n_test();
    if n_test >= opts.n_ids {
        return Err(CadaError::Generation(format!("{n_test} test identities leave none of {} for training", opts.n_ids)));
    }
    if opts.images_per_id == 0 || opts.captions_per_image == 0 {
        return Err(CadaError::Generation("images and captions per identity must be positive".into()));
    }
    if opts.image_size < 8 || opts.image_size > u16::MAX as usize {
        return Err(CadaError::Generation(format!("image size {} out of range", opts.image_size)));
    }
    let mut master = ChaCha8Rng::seed_from_u64(opts.seed);
    let specs = generate::sample_specs(opts.n_ids, &mut master)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| CadaError::io(&img_dir, e))?;

    let n_train = opts.n_ids - n_test;
    let mut records = Vec::new();
    for spec in &specs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(spec.identity_id as u64 + 1);
        let split = if spec.identity_id < n_train { Split::Train } else { Split::Test };
        for k in 0..opts.images_per_id {
            let img = generate::render(spec, opts.image_size, &mut rng);
            let blob = encode_blob(&img, opts.image_size, opts.image_size, 3);
            let rel = format!("images/{:05}_{k}.bin", spec.identity_id);
            write(&out_dir.join(&rel), &blob)?;
            let checksum = sha256_hex(&blob);
            for _ in 0..opts.captions_per_image {
                let (caption, _) = generate::caption(spec, &mut rng);
                records.push(DatasetRecord {
                    id: spec.identity_id,
                    image_path: rel.clone(),
                    caption,
                    split,
                    checksum: checksum.clone(),
                });
            }
        }
    }
    let manifest = manifest_text(&records)?;
    write(&out_dir.join(MANIFEST), manifest.as_bytes())?;
    generate::lexicon().save(&out_dir.join(LEXICON))?;
    generate::vocabulary().save(&out_dir.join(VOCAB))?;
    Ok(GenerationSummary {
        records,
        specs,
        train_ids: n_train,
        test_ids: n_test,
        capacity: generate::CAPACITY,
        manifest_sha256: sha256_hex(manifest.as_bytes()),
    })
}

fn manifest_text(records: &[DatasetRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).map_err(|e| CadaError::Generation(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

/// An image shared by the records that point at it.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredImage {
    pub path: String,
    pub id: usize,
    pub split: Split,
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

/// A loaded, validated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<DatasetRecord>,
    /// `record_image[i]` indexes `images` for record `i`.
    pub record_image: Vec<usize>,
    pub images: Vec<StoredImage>,
    pub vocab: Vocabulary,
    pub lexicon: PosLexicon,
    pub manifest_sha256: String,
}

impl Dataset {
    pub fn split_records(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn split_images(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].split == split).collect()
    }

    pub fn image_of(&self, record: usize) -> &StoredImage {
        &self.images[self.record_image[record]]
    }

    pub fn image_size(&self) -> usize {
        self.images.first().map_or(0, |i| i.shape[0])
    }
}

/// Reads `manifest.jsonl` and every blob, checking shapes and checksums.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| CadaError::io(&mpath, e))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| CadaError::Load(format!("manifest line {}: {e}", n + 1)))?;
        records.push(r);
    }
    if records.is_empty() {
        return Err(CadaError::Load(format!("{} has no records", mpath.display())));
    }
    let mut by_path: HashMap<String, usize> = HashMap::new();
    let mut images: Vec<StoredImage> = Vec::new();
    let mut record_image = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let name = || format!("record {i} (identity {}, {})", r.id, r.image_path);
        if let Some(&k) = by_path.get(&r.image_path) {
            let im = &images[k];
            if im.id != r.id || im.split != r.split {
                return Err(CadaError::Load(format!("{}: image is shared with a different identity or split", name())));
            }
            record_image.push(k);
            continue;
        }
        let path = dir.join(&r.image_path);
        let bytes = fs::read(&path).map_err(|e| CadaError::Load(format!("{}: cannot read blob: {e}", name())))?;
        if sha256_hex(&bytes) != r.checksum {
            return Err(CadaError::Load(format!("{}: checksum mismatch", name())));
        }
        let (data, shape) = decode_blob(&bytes).map_err(|e| CadaError::Load(format!("{}: {e}", name())))?;
        if let Some(first) = images.first() {
            if first.shape != shape {
                return Err(CadaError::Load(format!("{}: shape {shape:?} differs from {:?}", name(), first.shape)));
            }
        }
        by_path.insert(r.image_path.clone(), images.len());
        record_image.push(images.len());
        images.push(StoredImage { path: r.image_path.clone(), id: r.id, split: r.split, shape, data });
    }
    let lexicon = PosLexicon::load(&dir.join(LEXICON))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB))?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        records,
        record_image,
        images,
        vocab,
        lexicon,
        manifest_sha256: sha256_hex(text.as_bytes()),
    })
}

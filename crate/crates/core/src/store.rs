//! On-disk containers for activations, masks and concept-vector banks.
//!
//! A *container* is a directory holding `manifest.json` plus one `.npy` file
//! per array. Activations are `<f4` arrays of shape `C×H×W` (or `T×C` for
//! transformer token layers, rearranged on load); masks are `|u1` arrays of
//! shape `image_hw` holding only 0 and 1.
//!
//! A *bank* is a directory holding `manifest.json`, `records.jsonl` (one
//! record per line, in row order) and `loces.npy` (`N×C` `<f4`). Rows of
//! failed vectors are NaN so row indices stay aligned with records.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{self, Dtype};
use crate::projection::{tokens_to_quasi_activations, ActivationTensor, ConceptMask};

pub const CONTAINER_FORMAT: &str = "loce-container";
pub const CONTAINER_VERSION: u32 = 1;
pub const BANK_FORMAT: &str = "loce-bank";
pub const BANK_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const RECORDS: &str = "records.jsonl";
const LOCES: &str = "loces.npy";

/// Transformer layers store raw `T×C` token sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_prefix_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenLayout>,
}

impl LayerSpec {
    /// Shape of the stored activation array.
    pub fn array_shape(&self) -> Vec<usize> {
        match &self.tokens {
            None => vec![self.channels, self.height, self.width],
            Some(t) => vec![t.n_prefix_tokens + self.height * self.width, self.channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub concept_label: String,
    pub layer_id: String,
    pub activation_path: PathBuf,
    pub mask_path: PathBuf,
    pub image_hw: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerSpec>,
    pub samples: Vec<SampleRecord>,
    /// Free-form provenance written by producers (model, preprocessing, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl Manifest {
    pub fn layer(&self, layer_id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }
}

/// A validated container; arrays are loaded on demand.
#[derive(Clone, Debug)]
pub struct Container {
    root: PathBuf,
    manifest: Manifest,
}

impl Container {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.manifest.samples
    }

    pub fn records_for_layer<'a>(&'a self, layer_id: &'a str) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        self.manifest.samples.iter().filter(move |r| r.layer_id == layer_id)
    }

    pub fn layer(&self, layer_id: &str) -> Result<&LayerSpec> {
        self.manifest
            .layer(layer_id)
            .ok_or_else(|| Error::Manifest(format!("unknown layer {layer_id:?}")))
    }

    pub fn load_activation(&self, record: &SampleRecord) -> Result<ActivationTensor> {
        let layer = self.layer(&record.layer_id)?;
        let path = self.root.join(&record.activation_path);
        let (shape, data) = npy::read_f32(&path)?;
        check_shape(&path, &layer.array_shape(), &shape)?;
        match &layer.tokens {
            None => {
                let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data).unwrap();
                ActivationTensor::new(arr, &record.layer_id)
            }
            Some(t) => {
                let tokens = Array2::from_shape_vec((shape[0], shape[1]), data).unwrap();
                tokens_to_quasi_activations(
                    tokens.view(),
                    (layer.height, layer.width),
                    t.n_prefix_tokens,
                    &record.layer_id,
                )
            }
        }
    }

    pub fn load_mask(&self, record: &SampleRecord) -> Result<ConceptMask> {
        let path = self.root.join(&record.mask_path);
        let (shape, data) = npy::read_u8(&path)?;
        check_shape(&path, &[record.image_hw.0, record.image_hw.1], &shape)?;
        ConceptMask::new(Array2::from_shape_vec((shape[0], shape[1]), data).unwrap())
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }
}

fn check_shape(path: &Path, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            what: path.display().to_string(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

fn check_relative(p: &Path) -> Result<()> {
    let ok = p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !ok || p.as_os_str().is_empty() {
        return Err(Error::Manifest(format!(
            "array path {} must be relative to the container root",
            p.display()
        )));
    }
    Ok(())
}

/// Reads and validates a container: manifest schema, key uniqueness, and
/// every referenced array header (existence, dtype, shape).
pub fn read_container(root: impl AsRef<Path>) -> Result<Container> {
    let root = root.as_ref().to_path_buf();
    let manifest_path = root.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != CONTAINER_FORMAT {
        return Err(Error::Manifest(format!(
            "format is {:?}, expected {CONTAINER_FORMAT:?}",
            manifest.format
        )));
    }
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            supported: CONTAINER_VERSION,
        });
    }
    let mut layer_ids = HashSet::new();
    for layer in &manifest.layers {
        if !layer_ids.insert(layer.layer_id.as_str()) {
            return Err(Error::Manifest(format!("duplicate layer {:?}", layer.layer_id)));
        }
        if layer.channels == 0 || layer.height == 0 || layer.width == 0 {
            return Err(Error::Manifest(format!("layer {:?} has a zero dimension", layer.layer_id)));
        }
    }
    let mut keys = HashSet::new();
    for r in &manifest.samples {
        if !keys.insert((&r.sample_id, &r.concept_label, &r.layer_id)) {
            return Err(Error::Manifest(format!(
                "duplicate record ({}, {}, {})",
                r.sample_id, r.concept_label, r.layer_id
            )));
        }
        let layer = manifest
            .layer(&r.layer_id)
            .ok_or_else(|| Error::Manifest(format!("sample {} references unknown layer {:?}", r.sample_id, r.layer_id)))?;
        check_relative(&r.activation_path)?;
        check_relative(&r.mask_path)?;

        let act_path = root.join(&r.activation_path);
        let header = npy::read_header(&act_path)?;
        if header.dtype != Dtype::F32 {
            return Err(Error::UnsupportedDtype {
                found: header.dtype.descr().into(),
                expected: "<f4",
            });
        }
        check_shape(&act_path, &layer.array_shape(), &header.shape)?;

        let mask_path = root.join(&r.mask_path);
        let header = npy::read_header(&mask_path)?;
        if !matches!(header.dtype, Dtype::U8 | Dtype::Bool) {
            return Err(Error::UnsupportedDtype {
                found: header.dtype.descr().into(),
                expected: "|u1",
            });
        }
        check_shape(&mask_path, &[r.image_hw.0, r.image_hw.1], &header.shape)?;
    }
    Ok(Container { root, manifest })
}

/// Incrementally writes a container directory.
pub struct ContainerWriter {
    root: PathBuf,
    manifest: Manifest,
    written_masks: HashSet<PathBuf>,
}

impl ContainerWriter {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        for sub in ["activations", "masks"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self {
            root,
            manifest: Manifest {
                format: CONTAINER_FORMAT.into(),
                version: CONTAINER_VERSION,
                layers: Vec::new(),
                samples: Vec::new(),
                metadata: None,
            },
            written_masks: HashSet::new(),
        })
    }

    pub fn set_metadata(&mut self, metadata: serde_json::Value) {
        self.manifest.metadata = Some(metadata);
    }

    pub fn add_layer(&mut self, layer: LayerSpec) {
        self.manifest.layers.push(layer);
    }

    /// Adds one sample; the mask is written once per `(sample_id, concept)`.
    pub fn add_sample(
        &mut self,
        sample_id: &str,
        concept_label: &str,
        activation: &ActivationTensor,
        mask: &ConceptMask,
    ) -> Result<()> {
        let layer_id = activation.layer_id().to_string();
        let (c, h, w) = activation.data().dim();
        let layer = self
            .manifest
            .layer(&layer_id)
            .ok_or_else(|| Error::Manifest(format!("layer {layer_id:?} not declared")))?;
        if layer.tokens.is_some() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer_id:?} stores tokens; use add_token_sample"
            )));
        }
        check_shape(Path::new(&layer_id), &layer.array_shape(), &[c, h, w])?;
        let act_rel = PathBuf::from("activations").join(format!("{}__{}.npy", sanitize(sample_id), sanitize(&layer_id)));
        npy::write_f32(
            &self.root.join(&act_rel),
            &[c, h, w],
            activation.data().as_slice().unwrap(),
        )?;
        self.push_record(sample_id, concept_label, &layer_id, act_rel, mask)
    }

    /// Adds a transformer sample as its raw `T×C` token sequence.
    pub fn add_token_sample(
        &mut self,
        sample_id: &str,
        concept_label: &str,
        layer_id: &str,
        tokens: &Array2<f32>,
        mask: &ConceptMask,
    ) -> Result<()> {
        let layer = self
            .manifest
            .layer(layer_id)
            .ok_or_else(|| Error::Manifest(format!("layer {layer_id:?} not declared")))?;
        let shape = [tokens.nrows(), tokens.ncols()];
        check_shape(Path::new(layer_id), &layer.array_shape(), &shape)?;
        let act_rel = PathBuf::from("activations").join(format!("{}__{}.npy", sanitize(sample_id), sanitize(layer_id)));
        let tokens = tokens.as_standard_layout();
        npy::write_f32(&self.root.join(&act_rel), &shape, tokens.as_slice().unwrap())?;
        self.push_record(sample_id, concept_label, layer_id, act_rel, mask)
    }

    fn push_record(
        &mut self,
        sample_id: &str,
        concept_label: &str,
        layer_id: &str,
        act_rel: PathBuf,
        mask: &ConceptMask,
    ) -> Result<()> {
        let mask_rel = PathBuf::from("masks").join(format!("{}__{}.npy", sanitize(sample_id), sanitize(concept_label)));
        if self.written_masks.insert(mask_rel.clone()) {
            let (h, w) = mask.dim();
            let data = mask.data().as_standard_layout();
            npy::write_u8(&self.root.join(&mask_rel), &[h, w], data.as_slice().unwrap())?;
        }
        self.manifest.samples.push(SampleRecord {
            sample_id: sample_id.into(),
            concept_label: concept_label.into(),
            layer_id: layer_id.into(),
            activation_path: act_rel,
            mask_path: mask_rel,
            image_hw: mask.dim(),
        });
        Ok(())
    }

    pub fn finish(self) -> Result<Container> {
        let path = self.root.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        read_container(&self.root)
    }
}

/// File-name-safe form of an identifier: anything outside `[A-Za-z0-9._-]` becomes `_`.
pub fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// What a bank row represents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    #[default]
    Loce,
    Sgloce,
    Gloce,
    Net2vec,
    Net2vecTopk,
    Netdissect,
}

impl VectorKind {
    fn is_loce(&self) -> bool {
        *self == VectorKind::Loce
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    pub sample_id: String,
    pub concept_label: String,
    pub layer_id: String,
    pub loce_index: usize,
    pub final_loss: f64,
    pub train_iou: f64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "VectorKind::is_loce")]
    pub kind: VectorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_count: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    format: String,
    version: u32,
    layer_id: String,
    dim_c: usize,
    n_records: usize,
}

/// Indexed collection of concept vectors for one layer.
#[derive(Clone, Debug)]
pub struct ConceptBank {
    layer_id: String,
    dim_c: usize,
    records: Vec<BankRecord>,
    matrix: Array2<f32>,
}

impl ConceptBank {
    pub fn new(layer_id: impl Into<String>, dim_c: usize, records: Vec<BankRecord>, matrix: Array2<f32>) -> Result<Self> {
        let bank = Self {
            layer_id: layer_id.into(),
            dim_c,
            records,
            matrix: matrix.as_standard_layout().into_owned(),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn empty(layer_id: impl Into<String>, dim_c: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            dim_c,
            records: Vec::new(),
            matrix: Array2::zeros((0, dim_c)),
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, c) = self.matrix.dim();
        if c != self.dim_c || n != self.records.len() {
            return Err(Error::ShapeMismatch {
                what: format!("bank {}", self.layer_id),
                expected: vec![self.records.len(), self.dim_c],
                found: vec![n, c],
            });
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.loce_index != i {
                return Err(Error::Manifest(format!("record {i} carries loce_index {}", r.loce_index)));
            }
            if !r.failed && self.matrix.row(i).iter().any(|x| !x.is_finite()) {
                return Err(Error::Manifest(format!(
                    "row {i} ({}) has non-finite entries but is not flagged failed",
                    r.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn dim_c(&self) -> usize {
        self.dim_c
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[BankRecord] {
        &self.records
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.matrix.row(i)
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.matrix.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    /// Row indices carrying `label`, in row order.
    pub fn rows_for_label(&self, label: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.concept_label == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.records[i].failed).collect()
    }

    pub fn failed_count(&self) -> usize {
        self.records.iter().filter(|r| r.failed).count()
    }

    pub fn find_sample(&self, sample_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.sample_id == sample_id)
    }

    /// label -> rows, sorted by label.
    pub fn label_index(&self) -> BTreeMap<String, Vec<usize>> {
        let mut idx: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            idx.entry(r.concept_label.clone()).or_default().push(i);
        }
        idx
    }
}

impl PartialEq for ConceptBank {
    /// Bit-exact on the matrix so NaN rows compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.layer_id == other.layer_id
            && self.dim_c == other.dim_c
            && self.records == other.records
            && self.matrix.dim() == other.matrix.dim()
            && self
                .matrix
                .iter()
                .zip(other.matrix.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn write_bank(bank: &ConceptBank, dir: impl AsRef<Path>) -> Result<()> {
    bank.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = BankManifest {
        format: BANK_FORMAT.into(),
        version: BANK_VERSION,
        layer_id: bank.layer_id.clone(),
        dim_c: bank.dim_c,
        n_records: bank.len(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join(RECORDS);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in &bank.records {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    npy::write_f32(
        &dir.join(LOCES),
        &[bank.len(), bank.dim_c],
        bank.matrix.as_slice().unwrap(),
    )
}

pub fn read_bank(dir: impl AsRef<Path>) -> Result<ConceptBank> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BankManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    if manifest.format != BANK_FORMAT {
        return Err(Error::Manifest(format!("format is {:?}, expected {BANK_FORMAT:?}", manifest.format)));
    }
    if manifest.version != BANK_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            supported: BANK_VERSION,
        });
    }

    let path = dir.join(RECORDS);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::with_capacity(manifest.n_records);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str::<BankRecord>(&line)
                .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?,
        );
    }
    if records.len() != manifest.n_records {
        return Err(Error::Manifest(format!(
            "manifest declares {} records, records.jsonl has {}",
            manifest.n_records,
            records.len()
        )));
    }

    let path = dir.join(LOCES);
    let (shape, data) = npy::read_f32(&path)?;
    check_shape(&path, &[manifest.n_records, manifest.dim_c], &shape)?;
    let matrix = Array2::from_shape_vec((shape[0], shape[1]), data).unwrap();
    ConceptBank::new(manifest.layer_id, manifest.dim_c, records, matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(i: usize, label: &str, failed: bool) -> BankRecord {
        BankRecord {
            sample_id: format!("s{i}"),
            concept_label: label.into(),
            layer_id: "l".into(),
            loce_index: i,
            final_loss: -0.1 * i as f64,
            train_iou: if failed { 0.0 } else { 0.5 },
            failed,
            kind: VectorKind::Loce,
            member_count: None,
        }
    }

    fn three_sample_container(dir: &Path) -> Container {
        let mut w = ContainerWriter::create(dir).unwrap();
        w.add_layer(LayerSpec {
            layer_id: "conv".into(),
            channels: 4,
            height: 3,
            width: 3,
            tokens: None,
        });
        for i in 0..3 {
            let act = ActivationTensor::new(Array3::from_elem((4, 3, 3), i as f32), "conv").unwrap();
            let mask = ConceptMask::from_fn((6, 8), |(a, b)| a < 3 && b > i);
            w.add_sample(&format!("img{i}"), "car", &act, &mask).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = three_sample_container(dir.path());
        let c = read_container(c.root()).unwrap();
        assert_eq!(c.records().len(), 3);
        let r = &c.records()[2];
        assert_eq!(c.load_activation(r).unwrap().data()[[0, 0, 0]], 2.0);
        assert_eq!(c.load_mask(r).unwrap().dim(), (6, 8));
    }

    #[test]
    fn missing_array_reported() {
        let dir = tempfile::tempdir().unwrap();
        let c = three_sample_container(dir.path());
        fs::remove_file(c.root().join(&c.records()[1].activation_path)).unwrap();
        let err = read_container(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingArray(_)), "{err}");
        assert!(err.to_string().contains("missing array"));
    }

    #[test]
    fn manifest_channel_count_must_match_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ContainerWriter::create(dir.path()).unwrap();
        w.add_layer(LayerSpec {
            layer_id: "conv".into(),
            channels: 64,
            height: 10,
            width: 10,
            tokens: None,
        });
        let act = ActivationTensor::new(Array3::zeros((64, 10, 10)), "conv").unwrap();
        w.add_sample("a", "car", &act, &ConceptMask::from_fn((10, 10), |_| true)).unwrap();
        w.finish().unwrap();
        // rewrite the manifest to claim 32 channels
        let mpath = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&mpath).unwrap().replace("\"channels\": 64", "\"channels\": 32");
        fs::write(&mpath, text).unwrap();
        let err = read_container(dir.path()).unwrap_err();
        match err {
            Error::ShapeMismatch { expected, found, .. } => {
                assert_eq!(expected, vec![32, 10, 10]);
                assert_eq!(found, vec![64, 10, 10]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = three_sample_container(dir.path());
        let p = c.root().join(&c.records()[0].activation_path);
        npy::write_f64(&p, &[4, 3, 3], &[0.0; 36]).unwrap();
        assert!(matches!(read_container(dir.path()), Err(Error::UnsupportedDtype { .. })));
    }

    #[test]
    fn duplicate_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = three_sample_container(dir.path());
        let mut m = c.manifest().clone();
        m.samples.push(m.samples[0].clone());
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(read_container(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn token_layers_are_rearranged_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ContainerWriter::create(dir.path()).unwrap();
        w.add_layer(LayerSpec {
            layer_id: "vit".into(),
            channels: 3,
            height: 2,
            width: 2,
            tokens: Some(TokenLayout { n_prefix_tokens: 1 }),
        });
        let tokens = Array2::from_shape_fn((5, 3), |(t, c)| (t * 10 + c) as f32);
        w.add_token_sample("a", "cat", "vit", &tokens, &ConceptMask::from_fn((4, 4), |_| true))
            .unwrap();
        let c = w.finish().unwrap();
        let act = c.load_activation(&c.records()[0]).unwrap();
        assert_eq!(act.data().dim(), (3, 2, 2));
        assert_eq!(act.data()[[1, 1, 0]], 31.0);
    }

    #[test]
    fn empty_bank_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let bank = ConceptBank::empty("l", 256);
        write_bank(&bank, dir.path()).unwrap();
        assert_eq!(read_bank(dir.path()).unwrap(), bank);
    }

    #[test]
    fn random_bank_roundtrips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let matrix = Array2::from_shape_fn((100, 256), |_| rng.random::<f32>() * 2.0 - 1.0);
        let records = (0..100).map(|i| record(i, if i % 3 == 0 { "a" } else { "b" }, false)).collect();
        let bank = ConceptBank::new("l", 256, records, matrix).unwrap();
        write_bank(&bank, dir.path()).unwrap();
        assert_eq!(read_bank(dir.path()).unwrap(), bank);
    }

    #[test]
    fn failed_row_roundtrips_with_flag() {
        let dir = tempfile::tempdir().unwrap();
        let mut matrix = Array2::from_elem((3, 4), 0.25f32);
        matrix.row_mut(1).fill(f32::NAN);
        let records = vec![record(0, "a", false), record(1, "a", true), record(2, "b", false)];
        let bank = ConceptBank::new("l", 4, records, matrix).unwrap();
        write_bank(&bank, dir.path()).unwrap();
        let back = read_bank(dir.path()).unwrap();
        assert_eq!(back, bank);
        assert!(back.records()[1].failed);
        assert!(back.row(1).iter().all(|x| x.is_nan()));
        assert_eq!(back.valid_rows(), vec![0, 2]);
    }

    #[test]
    fn nan_row_without_flag_is_invalid() {
        let mut matrix = Array2::from_elem((1, 2), 0.0f32);
        matrix[[0, 1]] = f32::NAN;
        assert!(ConceptBank::new("l", 2, vec![record(0, "a", false)], matrix).is_err());
    }

    #[test]
    fn bank_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bank(&ConceptBank::empty("l", 2), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_bank(dir.path()), Err(Error::VersionMismatch { found: 9, .. })));
    }

    proptest! {
        #[test]
        fn label_lookup_is_exact(labels in proptest::collection::vec(0u8..4, 0..40)) {
            let n = labels.len();
            let records: Vec<_> = labels.iter().enumerate().map(|(i, l)| record(i, &format!("c{l}"), false)).collect();
            let bank = ConceptBank::new("l", 2, records, Array2::zeros((n, 2))).unwrap();
            for l in 0..4u8 {
                let name = format!("c{l}");
                let rows = bank.rows_for_label(&name);
                let expected: Vec<usize> = (0..n).filter(|&i| labels[i] == l).collect();
                prop_assert_eq!(rows, expected);
            }
        }
    }
}

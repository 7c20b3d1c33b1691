//! On-disk dataset store and the operations shared by the CLI and the HTTP
//! service.
//!
//! Layout under the store root:
//!
//! ```text
//! datasets/<id>/matrix.csv     raw expression values
//! datasets/<id>/dataset.json   name, normalization, colors, annotations, counters
//! datasets/<id>/labels.json    optional ground-truth classes
//! datasets/<id>/model.json     trained model
//! datasets/<id>/regions.json   user regions
//! datasets/<id>/history.json   verification cards, oldest first
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use cellscout_core::analytics::{
    detect_pure_regions, dominant_labels, gene_distribution, relevance_profile, top_genes,
    GeneScore, PureRegion, RadialHistogram, Region, RegionOrigin, RegionRecord, RelevanceProfile,
    DEFAULT_BINS, DEFAULT_MIN_PTS, DEFAULT_TOP_GENES,
};
use cellscout_core::embedding::{embed_with_pca, Embedding2D, EmbeddingSource};
use cellscout_core::matrix::TableFormat;
use cellscout_core::miner::{AssociationRelationship, TrainedModel};
use cellscout_core::neighbors::compute_delta;
use cellscout_core::verification::{evaluate_biomarker, Biomarker, VerificationResult};
use cellscout_core::{Error, ExpressionMatrix, NormalizationSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const DATASETS_DIR: &str = "datasets";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const META_FILE: &str = "dataset.json";
pub const LABELS_FILE: &str = "labels.json";
pub const MODEL_FILE: &str = "model.json";
pub const REGIONS_FILE: &str = "regions.json";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub id: String,
    pub name: String,
    pub normalization: NormalizationSpec,
    pub n_cells: usize,
    pub n_genes: usize,
    /// Display colors keyed by association index.
    pub colors: BTreeMap<usize, String>,
    /// Free-text annotations keyed by association index.
    pub annotations: BTreeMap<usize, String>,
    pub next_region: u64,
    pub next_card: u64,
}

/// Ground-truth classes, one per cell in matrix order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
}

impl LabelSet {
    /// Parses `cell_id,label` rows (with header) against the matrix cells.
    /// Classes are numbered in sorted order of their names.
    pub fn from_csv(text: &str, matrix: &ExpressionMatrix) -> AppResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let mut by_cell: Vec<Option<String>> = vec![None; matrix.n_cells()];
        for row in reader.records() {
            let row = row.map_err(|e| AppError::Parse(Error::Csv(e)))?;
            if row.len() != 2 {
                return Err(AppError::Parse(Error::RaggedRow {
                    line: row.position().map_or(0, |p| p.line() as usize),
                    expected: 2,
                    found: row.len(),
                }));
            }
            let cell = matrix
                .cell_index(&row[0])
                .ok_or_else(|| Error::UnknownCell(row[0].to_string()))?;
            if by_cell[cell].replace(row[1].to_string()).is_some() {
                return Err(Error::DuplicateId(row[0].to_string()).into());
            }
        }
        let covered = by_cell.iter().filter(|l| l.is_some()).count();
        if covered != matrix.n_cells() {
            return Err(Error::DimensionMismatch(format!(
                "labels cover {covered} of {} cells",
                matrix.n_cells()
            ))
            .into());
        }
        let names: Vec<String> = by_cell.into_iter().flatten().collect();
        let mut classes = names.clone();
        classes.sort();
        classes.dedup();
        let labels = names
            .iter()
            .map(|n| classes.binary_search(n).expect("class listed"))
            .collect();
        Ok(Self { classes, labels })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationCard {
    pub id: String,
    pub genes: Vec<String>,
    pub positive_region: String,
    pub negative_region: String,
    pub result: VerificationResult,
    pub biomarker: Biomarker,
}

/// Association metadata as listed for the UI; relevance is served
/// separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationSummary {
    pub index: usize,
    pub importance: Vec<f64>,
    pub color: Option<String>,
    pub annotation: Option<String>,
    pub top_genes: Vec<GeneScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMeta {
    pub index: usize,
    pub color: Option<String>,
    pub annotation: Option<String>,
}

/// A cell named by row index or by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellRef {
    Index(usize),
    Id(String),
}

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<Option<T>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Lowercase alphanumerics and dashes; never empty.
pub fn slug(name: &str) -> String {
    let mut s = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            s.push(ch.to_ascii_lowercase());
        } else if !s.ends_with('-') && !s.is_empty() {
            s.push('-');
        }
    }
    let s = s.trim_end_matches('-').to_string();
    if s.is_empty() {
        "dataset".into()
    } else {
        s
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    /// Opens the store at `root`, creating the directory tree if needed.
    pub fn open(root: impl Into<PathBuf>) -> AppResult<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(DATASETS_DIR))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self, id: &str) -> PathBuf {
        self.root.join(DATASETS_DIR).join(id)
    }

    pub fn dataset_ids(&self) -> AppResult<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join(DATASETS_DIR))? {
            let entry = entry?;
            if entry.path().join(META_FILE).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// The named dataset, or the only one in the store.
    pub fn resolve(&self, id: Option<&str>) -> AppResult<String> {
        let ids = self.dataset_ids()?;
        match id {
            Some(id) if ids.iter().any(|i| i == id) => Ok(id.to_string()),
            Some(id) => Err(AppError::not_found("dataset", id)),
            None if ids.len() == 1 => Ok(ids[0].clone()),
            None if ids.is_empty() => Err(AppError::not_found("dataset", "<any>")),
            None => Err(AppError::AmbiguousDataset(ids.len())),
        }
    }

    /// Copies a raw matrix into a fresh dataset directory and returns its id.
    pub fn ingest(
        &self,
        name: &str,
        raw: &ExpressionMatrix,
        normalization: NormalizationSpec,
        labels: Option<&LabelSet>,
    ) -> AppResult<String> {
        if raw.is_normalized() {
            return Err(Error::AlreadyNormalized.into());
        }
        raw.normalize(&normalization)?;
        let base = slug(name);
        let mut n = 1;
        let (id, dir) = loop {
            let id = if n == 1 { base.clone() } else { format!("{base}-{n}") };
            let dir = self.dataset_dir(&id);
            match fs::create_dir(&dir) {
                Ok(()) => break (id, dir),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e.into()),
            }
        };
        raw.save(dir.join(MATRIX_FILE), TableFormat::Csv)?;
        if let Some(l) = labels {
            write_json(&dir.join(LABELS_FILE), l)?;
        }
        write_json(&dir.join(REGIONS_FILE), &Vec::<RegionRecord>::new())?;
        write_json(&dir.join(HISTORY_FILE), &Vec::<VerificationCard>::new())?;
        let meta = DatasetMeta {
            id: id.clone(),
            name: name.to_string(),
            normalization,
            n_cells: raw.n_cells(),
            n_genes: raw.n_genes(),
            colors: BTreeMap::new(),
            annotations: BTreeMap::new(),
            next_region: 1,
            next_card: 1,
        };
        // Written last: a directory without metadata is not a dataset.
        write_json(&dir.join(META_FILE), &meta)?;
        Ok(id)
    }

    pub fn load(&self, id: &str) -> AppResult<Dataset> {
        let dir = self.dataset_dir(id);
        let meta: DatasetMeta =
            read_json(&dir.join(META_FILE))?.ok_or_else(|| AppError::not_found("dataset", id))?;
        let raw = ExpressionMatrix::load(dir.join(MATRIX_FILE), TableFormat::Csv)?;
        let normalized = raw.normalize(&meta.normalization)?;
        let labels: Option<LabelSet> = read_json(&dir.join(LABELS_FILE))?;
        let model = match fs::read_to_string(dir.join(MODEL_FILE)) {
            Ok(text) => Some(Arc::new(TrainedModel::from_json(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let records: Vec<RegionRecord> = read_json(&dir.join(REGIONS_FILE))?.unwrap_or_default();
        let regions = records
            .iter()
            .map(|r| r.to_region(&raw))
            .collect::<cellscout_core::Result<Vec<_>>>()?;
        let history = read_json(&dir.join(HISTORY_FILE))?.unwrap_or_default();
        Ok(Dataset {
            dir,
            meta,
            raw: Arc::new(raw),
            normalized: Arc::new(normalized),
            labels,
            model,
            regions,
            history,
            pca: OnceLock::new(),
        })
    }
}

/// A loaded dataset. Mutating methods persist their change before
/// returning.
#[derive(Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub raw: Arc<ExpressionMatrix>,
    pub normalized: Arc<ExpressionMatrix>,
    pub labels: Option<LabelSet>,
    pub model: Option<Arc<TrainedModel>>,
    pub regions: Vec<Region>,
    pub history: Vec<VerificationCard>,
    pca: OnceLock<Embedding2D>,
}

impl Dataset {
    pub fn id(&self) -> &str {
        &self.meta.id
    }

    pub fn model(&self) -> AppResult<&TrainedModel> {
        self.model
            .as_deref()
            .ok_or_else(|| AppError::NotTrained(self.meta.id.clone()))
    }

    pub fn labels(&self) -> AppResult<&LabelSet> {
        self.labels
            .as_ref()
            .ok_or_else(|| AppError::NoLabels(self.meta.id.clone()))
    }

    fn save_meta(&self) -> AppResult<()> {
        write_json(&self.dir.join(META_FILE), &self.meta)
    }

    fn save_regions(&self) -> AppResult<()> {
        let records: Vec<RegionRecord> = self
            .regions
            .iter()
            .map(|r| RegionRecord::from_region(r, &self.raw))
            .collect();
        write_json(&self.dir.join(REGIONS_FILE), &records)
    }

    /// Replaces the model. Colors and annotations belong to the previous
    /// model's associations and are cleared.
    pub fn install_model(&mut self, trained: TrainedModel) -> AppResult<()> {
        if trained.cell_ids != self.raw.cell_ids() || trained.gene_names != self.raw.gene_names() {
            return Err(Error::DimensionMismatch("model was trained on a different matrix".into()).into());
        }
        write_atomic(&self.dir.join(MODEL_FILE), trained.to_json()?.as_bytes())?;
        self.model = Some(Arc::new(trained));
        self.meta.colors.clear();
        self.meta.annotations.clear();
        self.save_meta()
    }

    fn association(&self, u: usize) -> AppResult<&AssociationRelationship> {
        self.model()?
            .associations
            .get(u)
            .ok_or_else(|| AppError::not_found("association", u.to_string()))
    }

    pub fn associations(&self) -> AppResult<Vec<AssociationSummary>> {
        let model = self.model()?;
        Ok(model
            .associations
            .iter()
            .map(|a| AssociationSummary {
                index: a.index,
                importance: a.importance.clone(),
                color: self.meta.colors.get(&a.index).cloned(),
                annotation: self.meta.annotations.get(&a.index).cloned(),
                top_genes: top_genes(a, self.raw.gene_names(), Some(DEFAULT_TOP_GENES)),
            })
            .collect())
    }

    pub fn relevance(&self, u: usize) -> AppResult<Vec<f64>> {
        Ok(self.association(u)?.relevance.clone())
    }

    pub fn importance(&self, u: usize, full: bool) -> AppResult<Vec<GeneScore>> {
        let n_top = if full { None } else { Some(DEFAULT_TOP_GENES) };
        Ok(top_genes(self.association(u)?, self.raw.gene_names(), n_top))
    }

    pub fn patch_association(
        &mut self,
        u: usize,
        color: Option<String>,
        annotation: Option<String>,
    ) -> AppResult<AssociationMeta> {
        self.association(u)?;
        // An empty string clears the field.
        for (value, map) in [
            (color, &mut self.meta.colors),
            (annotation, &mut self.meta.annotations),
        ] {
            match value {
                Some(v) if v.is_empty() => {
                    map.remove(&u);
                }
                Some(v) => {
                    map.insert(u, v);
                }
                None => {}
            }
        }
        self.save_meta()?;
        Ok(AssociationMeta {
            index: u,
            color: self.meta.colors.get(&u).cloned(),
            annotation: self.meta.annotations.get(&u).cloned(),
        })
    }

    pub fn embedding(&self, source: EmbeddingSource) -> AppResult<Embedding2D> {
        match source {
            EmbeddingSource::Model => Ok(self.model()?.embedding.clone()),
            EmbeddingSource::Pca => {
                if let Some(e) = self.pca.get() {
                    return Ok(e.clone());
                }
                let e = embed_with_pca(&self.normalized)?;
                Ok(self.pca.get_or_init(|| e).clone())
            }
        }
    }

    /// Per-association DBSCAN on the model embedding. `eps` defaults to the
    /// neighborhood radius used in training, `min_pts` to 10.
    pub fn pure_regions(&self, eps: Option<f64>, min_pts: Option<usize>) -> AppResult<Vec<PureRegion>> {
        let model = self.model()?;
        let eps = match eps {
            Some(e) => e,
            None => compute_delta(model.embedding.flat(), 2)?,
        };
        let labels = dominant_labels(&model.associations);
        Ok(detect_pure_regions(
            &model.embedding.coords,
            &labels,
            eps,
            min_pts.unwrap_or(DEFAULT_MIN_PTS),
        )?)
    }

    pub fn resolve_cell_refs(&self, cells: &[CellRef]) -> AppResult<Vec<usize>> {
        cells
            .iter()
            .map(|c| match c {
                CellRef::Index(i) => Ok(*i),
                CellRef::Id(id) => self
                    .raw
                    .cell_index(id)
                    .ok_or_else(|| Error::UnknownCell(id.clone()).into()),
            })
            .collect()
    }

    pub fn add_region(
        &mut self,
        name: &str,
        cells: Vec<usize>,
        origin: RegionOrigin,
    ) -> AppResult<Region> {
        let id = format!("r{}", self.meta.next_region);
        let region = Region::new(id, name, cells, origin, self.raw.n_cells())?;
        self.meta.next_region += 1;
        self.regions.push(region.clone());
        self.save_regions()?;
        self.save_meta()?;
        Ok(region)
    }

    pub fn region(&self, rid: &str) -> AppResult<&Region> {
        self.regions
            .iter()
            .find(|r| r.id == rid)
            .ok_or_else(|| AppError::not_found("region", rid))
    }

    pub fn delete_region(&mut self, rid: &str) -> AppResult<()> {
        let pos = self
            .regions
            .iter()
            .position(|r| r.id == rid)
            .ok_or_else(|| AppError::not_found("region", rid))?;
        self.regions.remove(pos);
        self.save_regions()
    }

    pub fn profile(&self, rid: &str) -> AppResult<RelevanceProfile> {
        let region = self.region(rid)?;
        Ok(relevance_profile(&region.cell_indices, &self.model()?.associations)?)
    }

    pub fn distribution(&self, rid: &str, gene: &str, bins: Option<usize>) -> AppResult<RadialHistogram> {
        let region = self.region(rid)?;
        Ok(gene_distribution(
            &region.cell_indices,
            gene,
            &self.raw,
            bins.unwrap_or(DEFAULT_BINS),
        )?)
    }

    /// Scores the biomarker on the raw values of the two regions and
    /// appends a card to the history.
    pub fn verify(&mut self, genes: &[String], positive: &str, negative: &str) -> AppResult<VerificationCard> {
        let pos = self.region(positive)?.cell_indices.clone();
        let neg = self.region(negative)?.cell_indices.clone();
        let (result, biomarker) = evaluate_biomarker(genes, &pos, &neg, &self.raw)?;
        let card = VerificationCard {
            id: format!("v{}", self.meta.next_card),
            genes: genes.to_vec(),
            positive_region: positive.to_string(),
            negative_region: negative.to_string(),
            result,
            biomarker,
        };
        self.meta.next_card += 1;
        self.history.push(card.clone());
        write_json(&self.dir.join(HISTORY_FILE), &self.history)?;
        self.save_meta()?;
        Ok(card)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> ExpressionMatrix {
        ExpressionMatrix::new(
            (0..4).map(|c| format!("c{c}")).collect(),
            vec!["a".into(), "b".into()],
            vec![1.0, 0.0, 2.0, 1.0, 0.0, 3.0, 5.0, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("My Data.csv"), "my-data-csv");
        assert_eq!(slug("  "), "dataset");
        assert_eq!(slug("--x--"), "x");
    }

    #[test]
    fn ingest_assigns_unique_ids_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.ingest("pbmc", &matrix(), NormalizationSpec::default(), None).unwrap();
        let b = store.ingest("pbmc", &matrix(), NormalizationSpec::default(), None).unwrap();
        assert_eq!((a.as_str(), b.as_str()), ("pbmc", "pbmc-2"));
        assert_eq!(store.dataset_ids().unwrap(), vec!["pbmc", "pbmc-2"]);
        assert_eq!(store.resolve(None).unwrap_err().code(), "AmbiguousDataset");
        let ds = store.load(&a).unwrap();
        assert_eq!(ds.raw.values(), matrix().values());
        assert!(ds.model.is_none());
        assert_eq!(ds.model().unwrap_err().code(), "NotTrained");
    }

    #[test]
    fn regions_persist_and_ids_are_not_reused() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.ingest("x", &matrix(), NormalizationSpec::default(), None).unwrap();
        let mut ds = store.load(&id).unwrap();
        let r1 = ds.add_region("one", vec![3, 1], RegionOrigin::Lasso).unwrap();
        assert_eq!(r1.cell_indices, vec![1, 3]);
        ds.delete_region(&r1.id).unwrap();
        let r2 = ds.add_region("two", vec![0], RegionOrigin::Manual).unwrap();
        assert_ne!(r1.id, r2.id);
        let again = store.load(&id).unwrap();
        assert_eq!(again.regions, vec![r2]);
        assert_eq!(again.region(&r1.id).unwrap_err().code(), "NotFound");
    }

    #[test]
    fn verification_history_appends() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.ingest("x", &matrix(), NormalizationSpec::default(), None).unwrap();
        let mut ds = store.load(&id).unwrap();
        let p = ds.add_region("p", vec![0, 1], RegionOrigin::Manual).unwrap();
        let n = ds.add_region("n", vec![2, 3], RegionOrigin::Manual).unwrap();
        let first = ds.verify(&["a".into()], &p.id, &n.id).unwrap();
        let second = ds.verify(&["b".into()], &p.id, &n.id).unwrap();
        let again = store.load(&id).unwrap();
        assert_eq!(again.history, vec![first, second]);
        let err = ds.verify(&["zzz".into()], &p.id, &n.id).unwrap_err();
        assert_eq!(err.code(), "UnknownGene");
    }

    #[test]
    fn labels_parse_and_cover_all_cells() {
        let m = matrix();
        let l = LabelSet::from_csv("cell_id,label\nc0,t\nc1,b\nc2,t\nc3,b\n", &m).unwrap();
        assert_eq!(l.classes, vec!["b", "t"]);
        assert_eq!(l.labels, vec![1, 0, 1, 0]);
        let missing = LabelSet::from_csv("cell_id,label\nc0,t\n", &m).unwrap_err();
        assert_eq!(missing.code(), "DimensionMismatch");
        let unknown = LabelSet::from_csv("cell_id,label\nzz,t\n", &m).unwrap_err();
        assert_eq!(unknown.code(), "UnknownCell");
    }
}

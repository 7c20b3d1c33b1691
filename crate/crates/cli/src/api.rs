//! HTTP API over a [`Store`].
//!
//! Reads take a shared lock on the dataset; mutations take it exclusively
//! and persist before responding. Training runs on the blocking pool
//! against a snapshot of the normalized matrix and swaps the model in when
//! it finishes, so reads keep seeing the previous model meanwhile.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Multipart, State};
use axum::http::{Method, StatusCode};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use cellscout_core::analytics::{GeneScore, PureRegion, Region, RegionOrigin, RelevanceProfile, RadialHistogram};
use cellscout_core::embedding::{Embedding2D, EmbeddingSource};
use cellscout_core::matrix::TableFormat;
use cellscout_core::miner::{train_with_progress, MinerConfig};
use cellscout_core::verification::VerificationResult;
use cellscout_core::{ExpressionMatrix, NormalizationSpec};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use crate::error::{AppError, AppResult};
use crate::store::{
    AssociationMeta, AssociationSummary, CellRef, Dataset, DatasetMeta, LabelSet, Store,
    VerificationCard,
};

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub dataset_id: String,
    pub state: JobState,
    pub progress: Progress,
    pub error: Option<String>,
}

type Shared<T> = Arc<RwLock<T>>;

pub struct AppState {
    store: Store,
    datasets: RwLock<HashMap<String, Shared<Dataset>>>,
    jobs: Mutex<HashMap<String, JobStatus>>,
    active: Mutex<HashSet<String>>,
    next_job: Mutex<u64>,
    ingest: Mutex<()>,
}

impl AppState {
    pub fn new(store: Store) -> Arc<Self> {
        Arc::new(Self {
            store,
            datasets: RwLock::new(HashMap::new()),
            jobs: Mutex::new(HashMap::new()),
            active: Mutex::new(HashSet::new()),
            next_job: Mutex::new(1),
            ingest: Mutex::new(()),
        })
    }

    /// Loads the dataset on first use and keeps it cached.
    fn dataset(&self, id: &str) -> AppResult<Shared<Dataset>> {
        if let Some(d) = self.datasets.read().unwrap().get(id) {
            return Ok(d.clone());
        }
        if !self.store.dataset_ids()?.iter().any(|i| i == id) {
            return Err(AppError::not_found("dataset", id));
        }
        let mut map = self.datasets.write().unwrap();
        if let Some(d) = map.get(id) {
            return Ok(d.clone());
        }
        let d = Arc::new(RwLock::new(self.store.load(id)?));
        map.insert(id.to_string(), d.clone());
        Ok(d)
    }

    fn read<T>(&self, id: &str, f: impl FnOnce(&Dataset) -> AppResult<T>) -> AppResult<T> {
        let d = self.dataset(id)?;
        let guard = d.read().unwrap();
        f(&guard)
    }

    fn write<T>(&self, id: &str, f: impl FnOnce(&mut Dataset) -> AppResult<T>) -> AppResult<T> {
        let d = self.dataset(id)?;
        let mut guard = d.write().unwrap();
        f(&mut guard)
    }

    fn set_job(&self, job_id: &str, f: impl FnOnce(&mut JobStatus)) {
        if let Some(j) = self.jobs.lock().unwrap().get_mut(job_id) {
            f(j);
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST, Method::PATCH, Method::DELETE])
        .allow_headers(Any);
    Router::new()
        .route("/datasets", get(list_datasets).post(create_dataset))
        .route("/datasets/{id}", get(get_dataset))
        .route("/datasets/{id}/train", post(start_training))
        .route("/jobs/{job_id}", get(get_job))
        .route("/datasets/{id}/associations", get(list_associations))
        .route("/datasets/{id}/associations/{u}", patch(patch_association))
        .route("/datasets/{id}/associations/{u}/relevance", get(get_relevance))
        .route("/datasets/{id}/associations/{u}/importance", get(get_importance))
        .route("/datasets/{id}/embedding", get(get_embedding))
        .route("/datasets/{id}/pure-regions", get(get_pure_regions))
        .route("/datasets/{id}/regions", get(list_regions).post(create_region))
        .route("/datasets/{id}/regions/{rid}", get(get_region).delete(delete_region))
        .route("/datasets/{id}/regions/{rid}/profile", get(get_profile))
        .route("/datasets/{id}/regions/{rid}/genes/{gene}/distribution", get(get_distribution))
        .route("/datasets/{id}/verify", post(verify))
        .route("/datasets/{id}/verifications", get(list_verifications))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(cors)
        .with_state(state)
}

type Ctx = State<Arc<AppState>>;

/// JSON body whose rejection is reported as an [`AppError`].
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(AppError))]
struct Body<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(AppError))]
struct Path<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(AppError))]
struct Query<T>(T);

async fn list_datasets(State(s): Ctx) -> AppResult<Json<Vec<DatasetMeta>>> {
    let mut out = Vec::new();
    for id in s.store.dataset_ids()? {
        out.push(s.read(&id, |d| Ok(d.meta.clone()))?);
    }
    Ok(Json(out))
}

async fn get_dataset(State(s): Ctx, Path(id): Path<String>) -> AppResult<Json<DatasetMeta>> {
    s.read(&id, |d| Ok(d.meta.clone())).map(Json)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetCreated {
    pub dataset_id: String,
}

/// Multipart fields: `file` (CSV, required), `name`, `labels`
/// (`cell_id,label` CSV) and `normalization` (JSON `NormalizationSpec`).
async fn create_dataset(
    State(s): Ctx,
    mut form: Multipart,
) -> AppResult<(StatusCode, Json<DatasetCreated>)> {
    let mut file: Option<(Option<String>, Vec<u8>)> = None;
    let mut name = None;
    let mut labels = None;
    let mut normalization = NormalizationSpec::default();
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| AppError::BadRequest(e.to_string()))?
    {
        let field_name = field.name().unwrap_or_default().to_string();
        let file_name = field.file_name().map(str::to_string);
        let bytes = field
            .bytes()
            .await
            .map_err(|e| AppError::BadRequest(e.to_string()))?;
        match field_name.as_str() {
            "file" => file = Some((file_name, bytes.to_vec())),
            "name" => name = Some(utf8(&bytes)?),
            "labels" => labels = Some(utf8(&bytes)?),
            "normalization" => normalization = serde_json::from_slice(&bytes)?,
            other => return Err(AppError::BadRequest(format!("unexpected field {other:?}"))),
        }
    }
    let (file_name, bytes) = file.ok_or_else(|| AppError::BadRequest("missing `file` field".into()))?;
    let name = name
        .or_else(|| file_name.map(|f| f.trim_end_matches(".csv").to_string()))
        .unwrap_or_else(|| "dataset".into());
    let id = tokio::task::spawn_blocking(move || -> AppResult<String> {
        let matrix = ExpressionMatrix::read(bytes.as_slice(), TableFormat::Csv).map_err(AppError::Parse)?;
        let labels = labels.map(|l| LabelSet::from_csv(&l, &matrix)).transpose()?;
        let _guard = s.ingest.lock().unwrap();
        s.store.ingest(&name, &matrix, normalization, labels.as_ref())
    })
    .await
    .map_err(|e| AppError::BadRequest(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(DatasetCreated { dataset_id: id })))
}

fn utf8(bytes: &[u8]) -> AppResult<String> {
    String::from_utf8(bytes.to_vec()).map_err(|e| AppError::BadRequest(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

async fn start_training(
    State(s): Ctx,
    Path(id): Path<String>,
    Body(config): Body<MinerConfig>,
) -> AppResult<(StatusCode, Json<JobCreated>)> {
    config.validate()?;
    let matrix = s.read(&id, |d| Ok(d.normalized.clone()))?;
    if !s.active.lock().unwrap().insert(id.clone()) {
        return Err(AppError::JobActive(id));
    }
    let job_id = {
        let mut n = s.next_job.lock().unwrap();
        let j = format!("job-{n}");
        *n += 1;
        j
    };
    s.jobs.lock().unwrap().insert(
        job_id.clone(),
        JobStatus {
            job_id: job_id.clone(),
            dataset_id: id.clone(),
            state: JobState::Queued,
            progress: Progress {
                epoch: 0,
                total: config.epochs,
            },
            error: None,
        },
    );
    let state = s.clone();
    let jid = job_id.clone();
    tokio::task::spawn_blocking(move || {
        state.set_job(&jid, |j| j.state = JobState::Running);
        let outcome = train_with_progress(&matrix, &config, |r| {
            state.set_job(&jid, |j| j.progress.epoch = r.epoch + 1);
        })
        .map_err(AppError::from)
        .and_then(|trained| state.write(&id, |d| d.install_model(trained)));
        state.active.lock().unwrap().remove(&id);
        state.set_job(&jid, |j| match outcome {
            Ok(()) => j.state = JobState::Done,
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(format!("{}: {e}", e.code()));
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id })))
}

async fn get_job(State(s): Ctx, Path(job_id): Path<String>) -> AppResult<Json<JobStatus>> {
    s.jobs
        .lock()
        .unwrap()
        .get(&job_id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AppError::not_found("job", job_id))
}

async fn list_associations(
    State(s): Ctx,
    Path(id): Path<String>,
) -> AppResult<Json<Vec<AssociationSummary>>> {
    s.read(&id, |d| d.associations()).map(Json)
}

async fn get_relevance(
    State(s): Ctx,
    Path((id, u)): Path<(String, usize)>,
) -> AppResult<Json<Vec<f64>>> {
    s.read(&id, |d| d.relevance(u)).map(Json)
}

#[derive(Debug, Deserialize)]
struct ImportanceQuery {
    #[serde(default)]
    full: bool,
}

async fn get_importance(
    State(s): Ctx,
    Path((id, u)): Path<(String, usize)>,
    Query(q): Query<ImportanceQuery>,
) -> AppResult<Json<Vec<GeneScore>>> {
    s.read(&id, |d| d.importance(u, q.full)).map(Json)
}

#[derive(Debug, Deserialize)]
struct AssociationPatch {
    color: Option<String>,
    annotation: Option<String>,
}

async fn patch_association(
    State(s): Ctx,
    Path((id, u)): Path<(String, usize)>,
    Body(p): Body<AssociationPatch>,
) -> AppResult<Json<AssociationMeta>> {
    s.write(&id, |d| d.patch_association(u, p.color, p.annotation))
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct EmbeddingQuery {
    source: Option<EmbeddingSource>,
}

async fn get_embedding(
    State(s): Ctx,
    Path(id): Path<String>,
    Query(q): Query<EmbeddingQuery>,
) -> AppResult<Json<Embedding2D>> {
    let source = q.source.unwrap_or(EmbeddingSource::Model);
    s.read(&id, |d| d.embedding(source)).map(Json)
}

#[derive(Debug, Deserialize)]
struct PureRegionQuery {
    eps: Option<f64>,
    min_pts: Option<usize>,
}

async fn get_pure_regions(
    State(s): Ctx,
    Path(id): Path<String>,
    Query(q): Query<PureRegionQuery>,
) -> AppResult<Json<Vec<PureRegion>>> {
    s.read(&id, |d| d.pure_regions(q.eps, q.min_pts)).map(Json)
}

async fn list_regions(State(s): Ctx, Path(id): Path<String>) -> AppResult<Json<Vec<Region>>> {
    s.read(&id, |d| Ok(d.regions.clone())).map(Json)
}

#[derive(Debug, Deserialize)]
struct NewRegion {
    name: String,
    cell_ids: Vec<CellRef>,
    origin: Option<RegionOrigin>,
}

async fn create_region(
    State(s): Ctx,
    Path(id): Path<String>,
    Body(r): Body<NewRegion>,
) -> AppResult<(StatusCode, Json<Region>)> {
    let origin = r.origin.unwrap_or(RegionOrigin::Manual);
    s.write(&id, |d| {
        let cells = d.resolve_cell_refs(&r.cell_ids)?;
        d.add_region(&r.name, cells, origin)
    })
    .map(|r| (StatusCode::CREATED, Json(r)))
}

async fn get_region(
    State(s): Ctx,
    Path((id, rid)): Path<(String, String)>,
) -> AppResult<Json<Region>> {
    s.read(&id, |d| d.region(&rid).cloned()).map(Json)
}

async fn delete_region(
    State(s): Ctx,
    Path((id, rid)): Path<(String, String)>,
) -> AppResult<StatusCode> {
    s.write(&id, |d| d.delete_region(&rid))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_profile(
    State(s): Ctx,
    Path((id, rid)): Path<(String, String)>,
) -> AppResult<Json<RelevanceProfile>> {
    s.read(&id, |d| d.profile(&rid)).map(Json)
}

#[derive(Debug, Deserialize)]
struct BinsQuery {
    bins: Option<usize>,
}

async fn get_distribution(
    State(s): Ctx,
    Path((id, rid, gene)): Path<(String, String, String)>,
    Query(q): Query<BinsQuery>,
) -> AppResult<Json<RadialHistogram>> {
    s.read(&id, |d| d.distribution(&rid, &gene, q.bins)).map(Json)
}

#[derive(Debug, Deserialize)]
struct VerifyRequest {
    genes: Vec<String>,
    positive_region: String,
    negative_region: String,
}

async fn verify(
    State(s): Ctx,
    Path(id): Path<String>,
    Body(v): Body<VerifyRequest>,
) -> AppResult<Json<VerificationResult>> {
    s.write(&id, |d| d.verify(&v.genes, &v.positive_region, &v.negative_region))
        .map(|card| Json(card.result))
}

async fn list_verifications(
    State(s): Ctx,
    Path(id): Path<String>,
) -> AppResult<Json<Vec<VerificationCard>>> {
    s.read(&id, |d| Ok(d.history.clone())).map(Json)
}

//! Sessions, the run queue and their on-disk state.
//!
//! Layout under `<out>/sessions/<sid>/`: `session.json`, `ledger.json`,
//! `markers/<image>.<modality>.mk`, `runs/<rid>/{status.json, run.json,
//! candidates.fb, activations/}`, `bank.fb` and `encoder_<modality>.fenc`.
//! Every file is replaced by write-then-rename.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, Weak};
use std::thread;
use std::time::{Duration, Instant};

use flim_core::flim::{build_encoder, EncoderSpec, FilterBank};
use flim_core::markers::{save_markers, load_markers, BalanceReport, MarkerSet, Modality};
use flim_core::msflim::{activation_map, finalize_bank, run_msflim_step, CandidateSet, Pick, RunParams, SelectionLedger, DEFAULT_TARGET_BANK};
use flim_core::phantom::DatasetManifest;
use flim_core::volume::{read_volume, write_atomic, write_volume, Volume};
use flim_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone)]
pub struct StudioConfig {
    /// A dataset directory, or a directory whose sub-directories are datasets.
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Background run executors; with none, runs stay queued.
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub session: String,
    pub modality: Modality,
    pub params: RunParams,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub dataset: String,
    pub target_bank: usize,
    pub runs: Vec<String>,
}

#[derive(Debug)]
struct Session {
    record: SessionRecord,
    dir: PathBuf,
    markers: BTreeMap<(String, Modality), MarkerSet>,
    ledger: SelectionLedger,
    bank: Option<FilterBank>,
}

#[derive(Debug)]
struct RunEntry {
    record: RunRecord,
    candidates: Option<Arc<CandidateSet>>,
}

/// Summary of a session for clients.
#[derive(Debug, Clone, Serialize)]
pub struct SessionView {
    pub id: String,
    pub dataset: String,
    pub target_bank: usize,
    pub markers: Vec<MarkerSummary>,
    pub runs: Vec<RunView>,
    pub ledger: SelectionLedger,
    pub has_bank: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarkerSummary {
    pub image_id: String,
    pub modality: Modality,
    pub markers: usize,
    pub voxels: usize,
    pub balance: BalanceReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunView {
    #[serde(flatten)]
    pub record: RunRecord,
    /// Candidates over all images, once done.
    pub candidates: Option<usize>,
    pub per_image: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BankView {
    pub modality: Modality,
    pub size: usize,
    pub picks: Vec<Pick>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EncoderView {
    pub modality: Modality,
    pub widths: Vec<usize>,
    pub bank_file: String,
    pub encoder_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageInfo {
    pub case_id: String,
    pub split: String,
    pub shape: [usize; 3],
}

fn io_err(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::Core(CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> ApiResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> ApiResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(CoreError::from)?)
}

fn mkdir(path: &Path) -> ApiResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Accepts a single plain path component.
fn safe_component(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn marker_file(image_id: &str, modality: Modality) -> String {
    format!("{image_id}.{}.mk", modality.stem())
}

/// Shared service state. Worker threads execute queued runs.
pub struct Studio {
    cfg: StudioConfig,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Session>>>>,
    runs: Mutex<BTreeMap<String, RunEntry>>,
    queue: Mutex<Sender<String>>,
    images: Mutex<HashMap<PathBuf, Arc<Volume>>>,
}

impl Studio {
    /// Loads persisted sessions and re-queues runs that never finished.
    pub fn open(cfg: StudioConfig) -> ApiResult<Arc<Studio>> {
        let sessions_dir = cfg.out_dir.join("sessions");
        mkdir(&sessions_dir)?;
        let (tx, rx) = channel::<String>();
        let workers = cfg.workers;
        let studio = Arc::new(Studio {
            cfg,
            sessions: Mutex::new(BTreeMap::new()),
            runs: Mutex::new(BTreeMap::new()),
            queue: Mutex::new(tx),
            images: Mutex::new(HashMap::new()),
        });
        let mut requeue = Vec::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&sessions_dir)
            .map_err(|e| io_err(&sessions_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("session.json").is_file())
            .collect();
        entries.sort();
        for dir in entries {
            let (session, runs) = studio.load_session(&dir)?;
            for entry in runs {
                if matches!(entry.record.status, RunStatus::Pending | RunStatus::Running) {
                    requeue.push(entry.record.run_id.clone());
                }
                studio.runs.lock().unwrap().insert(entry.record.run_id.clone(), entry);
            }
            studio
                .sessions
                .lock()
                .unwrap()
                .insert(session.record.id.clone(), Arc::new(Mutex::new(session)));
        }
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..workers {
            let weak = Arc::downgrade(&studio);
            let rx = Arc::clone(&rx);
            thread::spawn(move || worker(weak, rx));
        }
        for rid in requeue {
            studio.set_status(&rid, RunStatus::Pending, None)?;
            studio.enqueue(rid);
        }
        Ok(studio)
    }

    pub fn config(&self) -> &StudioConfig {
        &self.cfg
    }

    fn load_session(&self, dir: &Path) -> ApiResult<(Session, Vec<RunEntry>)> {
        let record: SessionRecord = read_json(&dir.join("session.json"))?;
        let mut markers = BTreeMap::new();
        let mdir = dir.join("markers");
        if mdir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&mdir)
                .map_err(|e| io_err(&mdir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "mk"))
                .collect();
            files.sort();
            for f in files {
                let ms = load_markers(&f)?;
                markers.insert((ms.image_id.clone(), ms.modality), ms);
            }
        }
        let ledger_path = dir.join("ledger.json");
        let ledger = if ledger_path.is_file() {
            SelectionLedger::load(&ledger_path)?
        } else {
            SelectionLedger::new(record.target_bank)
        };
        let bank_path = dir.join("bank.fb");
        let bank = if bank_path.is_file() { Some(FilterBank::load(&bank_path)?) } else { None };
        let mut runs = Vec::new();
        for rid in &record.runs {
            let rdir = dir.join("runs").join(rid);
            let run: RunRecord = read_json(&rdir.join("status.json"))?;
            let candidates = if run.status == RunStatus::Done {
                Some(Arc::new(CandidateSet::load(&rdir)?))
            } else {
                None
            };
            runs.push(RunEntry { record: run, candidates });
        }
        Ok((
            Session {
                record,
                dir: dir.to_path_buf(),
                markers,
                ledger,
                bank,
            },
            runs,
        ))
    }

    fn session(&self, sid: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(sid)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {sid:?}")))
    }

    fn dataset_dir(&self, name: &str) -> ApiResult<PathBuf> {
        let dir = if name.is_empty() || name == "." {
            self.cfg.data_root.clone()
        } else if safe_component(name) {
            self.cfg.data_root.join(name)
        } else {
            return Err(ApiError::BadRequest(format!("invalid dataset name {name:?}")));
        };
        if !dir.join(flim_core::phantom::MANIFEST_FILE).is_file() {
            return Err(ApiError::NotFound(format!("unknown dataset {name:?}")));
        }
        Ok(dir)
    }

    /// Cases of a dataset with their split and extent.
    pub fn list_images(&self, dataset: &str) -> ApiResult<Vec<ImageInfo>> {
        let dir = self.dataset_dir(dataset)?;
        let manifest = DatasetManifest::load(&dir)?;
        let mut out = Vec::new();
        for (split, ids) in [("train", &manifest.train), ("val", &manifest.val), ("test", &manifest.test)] {
            for id in ids {
                out.push(ImageInfo {
                    case_id: id.clone(),
                    split: split.to_string(),
                    shape: manifest.spec.size,
                });
            }
        }
        Ok(out)
    }

    /// A case image, cached after the first read.
    pub fn image(&self, dataset: &str, case_id: &str, modality: Modality) -> ApiResult<Arc<Volume>> {
        let dir = self.dataset_dir(dataset)?;
        if !safe_component(case_id) {
            return Err(ApiError::NotFound(format!("unknown image {case_id:?}")));
        }
        let path = dir.join(case_id).join(format!("{}.mvol", modality.stem()));
        if let Some(v) = self.images.lock().unwrap().get(&path) {
            return Ok(Arc::clone(v));
        }
        if !path.is_file() {
            return Err(ApiError::NotFound(format!("unknown image {case_id:?}")));
        }
        let v = Arc::new(read_volume(&path)?);
        self.images.lock().unwrap().insert(path, Arc::clone(&v));
        Ok(v)
    }

    pub fn create_session(&self, dataset: &str, target_bank: Option<usize>) -> ApiResult<SessionView> {
        self.dataset_dir(dataset)?;
        let target_bank = target_bank.unwrap_or(DEFAULT_TARGET_BANK);
        if target_bank == 0 {
            return Err(ApiError::Invalid("target bank size must be positive".into()));
        }
        let mut sessions = self.sessions.lock().unwrap();
        let id = (1..)
            .map(|i| format!("s{i:04}"))
            .find(|id| !sessions.contains_key(id) && !self.cfg.out_dir.join("sessions").join(id).exists())
            .expect("unbounded id space");
        let dir = self.cfg.out_dir.join("sessions").join(&id);
        mkdir(&dir.join("markers"))?;
        mkdir(&dir.join("runs"))?;
        let record = SessionRecord {
            id: id.clone(),
            dataset: dataset.to_string(),
            target_bank,
            runs: Vec::new(),
        };
        write_json(&dir.join("session.json"), &record)?;
        let session = Session {
            record,
            dir,
            markers: BTreeMap::new(),
            ledger: SelectionLedger::new(target_bank),
            bank: None,
        };
        sessions.insert(id.clone(), Arc::new(Mutex::new(session)));
        drop(sessions);
        self.session_view(&id)
    }

    pub fn session_view(&self, sid: &str) -> ApiResult<SessionView> {
        let s = self.session(sid)?;
        let s = s.lock().unwrap();
        let runs = s
            .record
            .runs
            .iter()
            .map(|rid| self.run_view(rid))
            .collect::<ApiResult<Vec<_>>>()?;
        Ok(SessionView {
            id: s.record.id.clone(),
            dataset: s.record.dataset.clone(),
            target_bank: s.record.target_bank,
            markers: s
                .markers
                .values()
                .map(|ms| MarkerSummary {
                    image_id: ms.image_id.clone(),
                    modality: ms.modality,
                    markers: ms.markers.len(),
                    voxels: ms.total_voxels(),
                    balance: ms.balance(),
                })
                .collect(),
            runs,
            ledger: s.ledger.clone(),
            has_bank: s.bank.is_some(),
        })
    }

    /// Replaces the marker set of one image and modality.
    pub fn put_markers(&self, sid: &str, body: &str) -> ApiResult<MarkerSummary> {
        let _: serde_json::Value =
            serde_json::from_str(body).map_err(|e| ApiError::BadRequest(format!("malformed marker file: {e}")))?;
        let ms = MarkerSet::from_json(body).map_err(|e| ApiError::Invalid(e.to_string()))?;
        let session = self.session(sid)?;
        let mut s = session.lock().unwrap();
        let image = match self.image(&s.record.dataset, &ms.image_id, ms.modality) {
            Ok(v) => v,
            Err(ApiError::NotFound(m)) => return Err(ApiError::Invalid(m)),
            Err(e) => return Err(e),
        };
        ms.check_bounds(image.spatial()).map_err(|e| ApiError::Invalid(e.to_string()))?;
        save_markers(&ms, s.dir.join("markers").join(marker_file(&ms.image_id, ms.modality)))?;
        let summary = MarkerSummary {
            image_id: ms.image_id.clone(),
            modality: ms.modality,
            markers: ms.markers.len(),
            voxels: ms.total_voxels(),
            balance: ms.balance(),
        };
        s.markers.insert((ms.image_id.clone(), ms.modality), ms);
        Ok(summary)
    }

    /// Queues a multi-step run over every marked image of one modality.
    pub fn launch_run(&self, sid: &str, n1: usize, n2: usize, seed: u64, modality: Option<Modality>) -> ApiResult<RunView> {
        let params = RunParams::new(n1, n2, seed);
        params.validate().map_err(|e| ApiError::Invalid(e.to_string()))?;
        let session = self.session(sid)?;
        let mut s = session.lock().unwrap();
        let present: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| s.markers.keys().any(|(_, mm)| mm == m))
            .collect();
        let modality = match (modality, present.as_slice()) {
            (Some(m), _) if present.contains(&m) => m,
            (Some(m), _) => return Err(ApiError::Conflict(format!("session has no {m} markers"))),
            (None, [m]) => *m,
            (None, []) => return Err(ApiError::Conflict("session has no markers".into())),
            (None, _) => return Err(ApiError::BadRequest("markers exist for both modalities; name one".into())),
        };
        let rid = format!("{}-r{:03}", s.record.id, s.record.runs.len() + 1);
        let record = RunRecord {
            run_id: rid.clone(),
            session: s.record.id.clone(),
            modality,
            params,
            status: RunStatus::Pending,
            error: None,
        };
        let rdir = s.dir.join("runs").join(&rid);
        mkdir(&rdir)?;
        write_json(&rdir.join("status.json"), &record)?;
        s.record.runs.push(rid.clone());
        write_json(&s.dir.join("session.json"), &s.record)?;
        drop(s);
        self.runs.lock().unwrap().insert(
            rid.clone(),
            RunEntry {
                record,
                candidates: None,
            },
        );
        self.enqueue(rid.clone());
        self.run_view(&rid)
    }

    fn enqueue(&self, rid: String) {
        // workers outlive every `Studio` reference that can enqueue
        let _ = self.queue.lock().unwrap().send(rid);
    }

    pub fn run_view(&self, rid: &str) -> ApiResult<RunView> {
        let runs = self.runs.lock().unwrap();
        let e = runs.get(rid).ok_or_else(|| ApiError::NotFound(format!("unknown run {rid:?}")))?;
        Ok(RunView {
            record: e.record.clone(),
            candidates: e.candidates.as_ref().map(|c| c.total()),
            per_image: e
                .candidates
                .as_ref()
                .map(|c| c.images.iter().map(|i| (i.image_id.clone(), i.filters.len())).collect())
                .unwrap_or_default(),
        })
    }

    fn done_run(&self, rid: &str) -> ApiResult<(RunRecord, Arc<CandidateSet>)> {
        let runs = self.runs.lock().unwrap();
        let e = runs.get(rid).ok_or_else(|| ApiError::NotFound(format!("unknown run {rid:?}")))?;
        match &e.candidates {
            Some(c) if e.record.status == RunStatus::Done => Ok((e.record.clone(), Arc::clone(c))),
            _ => Err(ApiError::Conflict(format!(
                "run {rid} is {}",
                serde_json::to_value(e.record.status).unwrap().as_str().unwrap_or("not done")
            ))),
        }
    }

    fn set_status(&self, rid: &str, status: RunStatus, error: Option<String>) -> ApiResult<RunRecord> {
        let record = {
            let mut runs = self.runs.lock().unwrap();
            let e = runs.get_mut(rid).ok_or_else(|| ApiError::NotFound(format!("unknown run {rid:?}")))?;
            e.record.status = status;
            e.record.error = error;
            e.record.clone()
        };
        let dir = self.session(&record.session)?.lock().unwrap().dir.join("runs").join(rid);
        write_json(&dir.join("status.json"), &record)?;
        Ok(record)
    }

    fn execute(&self, rid: &str) -> ApiResult<()> {
        let record = self.set_status(rid, RunStatus::Running, None)?;
        let session = self.session(&record.session)?;
        let (dataset, markers, dir) = {
            let s = session.lock().unwrap();
            let markers: Vec<MarkerSet> = s
                .markers
                .iter()
                .filter(|((_, m), _)| *m == record.modality)
                .map(|(_, ms)| ms.clone())
                .collect();
            (s.record.dataset.clone(), markers, s.dir.join("runs").join(rid))
        };
        let outcome = (|| -> ApiResult<CandidateSet> {
            let images = markers
                .iter()
                .map(|ms| Ok((*self.image(&dataset, &ms.image_id, record.modality)?).clone()))
                .collect::<ApiResult<Vec<_>>>()?;
            let mut cs = run_msflim_step(&images, &markers, record.params)?;
            cs.run_id = rid.to_string();
            cs.save(&dir)?;
            Ok(cs)
        })();
        match outcome {
            Ok(cs) => {
                self.runs.lock().unwrap().get_mut(rid).expect("run registered").candidates = Some(Arc::new(cs));
                self.set_status(rid, RunStatus::Done, None)?;
            }
            Err(e) => {
                self.set_status(rid, RunStatus::Failed, Some(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Blocks until the run leaves the queue or `timeout` passes.
    pub fn wait_for_run(&self, rid: &str, timeout: Duration) -> ApiResult<RunRecord> {
        let start = Instant::now();
        loop {
            let rec = self.run_view(rid)?.record;
            if matches!(rec.status, RunStatus::Done | RunStatus::Failed) || start.elapsed() > timeout {
                return Ok(rec);
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    /// Activation of candidate `index` of `image_id`, cached as MVOL1.
    pub fn activation(&self, rid: &str, image_id: &str, index: usize) -> ApiResult<Volume> {
        let (record, cs) = self.done_run(rid)?;
        let filter = cs
            .candidate(image_id, index)
            .ok_or_else(|| ApiError::NotFound(format!("run {rid} has no candidate {index} for image {image_id:?}")))?;
        let dir = self.session(&record.session)?.lock().unwrap().dir.join("runs").join(rid).join("activations");
        let path = dir.join(cs.activation_key(image_id, index));
        if path.is_file() {
            return Ok(read_volume(&path)?);
        }
        let dataset = self.session(&record.session)?.lock().unwrap().record.dataset.clone();
        let image = self.image(&dataset, image_id, record.modality)?;
        let act = activation_map(&image, filter, &cs.norm)?;
        mkdir(&dir)?;
        write_volume(&act, &path)?;
        Ok(act)
    }

    /// Replaces the ledger with `picks` and writes the first-layer bank.
    pub fn set_bank(&self, sid: &str, picks: Vec<Pick>) -> ApiResult<BankView> {
        let session = self.session(sid)?;
        let mut s = session.lock().unwrap();
        if picks.is_empty() {
            return Err(ApiError::Invalid("no picks".into()));
        }
        let mut runs: Vec<(RunRecord, Arc<CandidateSet>)> = Vec::new();
        for p in &picks {
            if !s.record.runs.contains(&p.run_id) {
                return Err(ApiError::NotFound(format!("unknown run {:?} in session {sid}", p.run_id)));
            }
            let (rec, cs) = self.done_run(&p.run_id)?;
            if cs.candidate(&p.image_id, p.candidate).is_none() {
                return Err(ApiError::NotFound(format!(
                    "run {} has no candidate {} for image {:?}",
                    p.run_id, p.candidate, p.image_id
                )));
            }
            if !runs.iter().any(|(r, _)| r.run_id == rec.run_id) {
                runs.push((rec, cs));
            }
        }
        let modality = runs[0].0.modality;
        if runs.iter().any(|(r, _)| r.modality != modality) {
            return Err(ApiError::Invalid("picks mix modalities".into()));
        }
        let norm = runs[0].1.norm.clone();
        if runs.iter().any(|(_, c)| c.norm != norm) {
            return Err(ApiError::Invalid("picked runs were normalized with different markers".into()));
        }
        let mut ledger = SelectionLedger::new(s.record.target_bank);
        for p in &picks {
            ledger.select(p.clone()).map_err(|e| ApiError::Invalid(e.to_string()))?;
        }
        let sets: Vec<CandidateSet> = runs.iter().map(|(_, c)| (**c).clone()).collect();
        let bank = finalize_bank(&sets, &ledger, &norm)?;
        bank.save(s.dir.join("bank.fb"))?;
        ledger.save(s.dir.join("ledger.json"))?;
        s.ledger = ledger;
        s.bank = Some(bank);
        Ok(BankView {
            modality,
            size: picks.len(),
            picks,
        })
    }

    fn bank_modality(&self, s: &Session) -> ApiResult<Modality> {
        let pick = s.ledger.chosen.first().ok_or_else(|| ApiError::Conflict("no bank selected".into()))?;
        Ok(self.run_view(&pick.run_id)?.record.modality)
    }

    /// Builds the full encoder of the bank's modality from the session markers.
    pub fn build_encoder(&self, sid: &str, spec: Option<EncoderSpec>, seed: u64) -> ApiResult<EncoderView> {
        let session = self.session(sid)?;
        let s = session.lock().unwrap();
        let bank = s.bank.clone().ok_or_else(|| ApiError::Conflict("no bank selected".into()))?;
        let modality = self.bank_modality(&s)?;
        let spec = spec.unwrap_or_default();
        spec.validate().map_err(|e| ApiError::Invalid(e.to_string()))?;
        let markers: Vec<MarkerSet> = s
            .markers
            .iter()
            .filter(|((_, m), _)| *m == modality)
            .map(|(_, ms)| ms.clone())
            .collect();
        let images = markers
            .iter()
            .map(|ms| Ok((*self.image(&s.record.dataset, &ms.image_id, modality)?).clone()))
            .collect::<ApiResult<Vec<_>>>()?;
        let enc = build_encoder(&images, &markers, &spec, Some(bank), seed)?;
        let file = format!("encoder_{}.fenc", modality.stem());
        enc.save(s.dir.join(&file))?;
        Ok(EncoderView {
            modality,
            widths: enc.widths(),
            bank_file: "bank.fb".into(),
            encoder_file: file,
        })
    }

    /// Bytes of the current bank file.
    pub fn export(&self, sid: &str) -> ApiResult<Vec<u8>> {
        let session = self.session(sid)?;
        let s = session.lock().unwrap();
        let bank = s.bank.as_ref().ok_or_else(|| ApiError::Conflict("no bank selected".into()))?;
        Ok(bank.to_bytes())
    }

    pub fn session_dir(&self, sid: &str) -> ApiResult<PathBuf> {
        Ok(self.session(sid)?.lock().unwrap().dir.clone())
    }
}

fn worker(studio: Weak<Studio>, rx: Arc<Mutex<Receiver<String>>>) {
    loop {
        let next = rx.lock().unwrap().recv();
        let Ok(rid) = next else { return };
        let Some(studio) = studio.upgrade() else { return };
        if let Err(e) = studio.execute(&rid) {
            let _ = studio.set_status(&rid, RunStatus::Failed, Some(e.to_string()));
        }
    }
}

//! Interactive retrieval: sessions accumulate strokes on a canvas and get a
//! fresh top-k after every stroke.

mod config;
mod http;
mod stroke;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use config::{ServeConfig, ENV_OVERRIDES};
pub use http::{router, serve};
pub use stroke::{StrokePayload, StrokePoint};

use crate::embed::{ImageRef, Stage1Model};
use crate::embedding::EmbeddingVector;
use crate::error::{invalid, Error, Result};
use crate::raster::{PhotoImage, SketchImage};
use crate::retrieval::GalleryIndex;
use crate::seq::{FeatureSequence, Stage2Model};

/// Frozen models, gallery and thumbnails shared read-only by all sessions.
pub struct Engine {
    stage1: Stage1Model,
    stage2: Stage2Model,
    gallery: GalleryIndex,
    photos: BTreeMap<String, PhotoImage>,
}

impl Engine {
    pub fn new(
        mut stage1: Stage1Model,
        stage2: Stage2Model,
        gallery: GalleryIndex,
        photos: BTreeMap<String, PhotoImage>,
    ) -> Result<Self> {
        stage1.freeze();
        let hash = stage1.content_hash();
        if stage2.stage1_hash() != hash {
            return Err(Error::CheckpointMismatch("stage-2 model belongs to a different stage-1 model".into()));
        }
        if !gallery.stage1_hash().is_empty() && gallery.stage1_hash() != hash {
            return Err(Error::CheckpointMismatch("gallery was built with a different stage-1 model".into()));
        }
        if gallery.dim() != stage2.d_low() {
            return Err(Error::CheckpointMismatch(format!(
                "gallery dim {} differs from embedding dim {}",
                gallery.dim(),
                stage2.d_low()
            )));
        }
        Ok(Self {
            stage1,
            stage2,
            gallery,
            photos,
        })
    }

    /// Load checkpoints, gallery and thumbnails named by `config`. Without an
    /// index file the gallery is built from the corpus photos.
    pub fn load(config: &ServeConfig) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::ServiceUnavailable(format!("no {what} configured")))
        };
        let mut stage1 = crate::checkpoint::load_stage1(&need(&config.stage1_checkpoint, "stage-1 checkpoint")?, None)?;
        stage1.freeze();
        let stage2 = crate::checkpoint::load_stage2(&need(&config.stage2_checkpoint, "stage-2 checkpoint")?, &stage1)?;
        let photos = match &config.corpus_root {
            Some(root) => crate::data::load_photos(root)?,
            None => BTreeMap::new(),
        };
        let gallery = match &config.index_path {
            Some(path) => GalleryIndex::load(path)?,
            None if !photos.is_empty() => {
                let ids: Vec<String> = photos.keys().cloned().collect();
                let fitted: Vec<(String, PhotoImage)> =
                    ids.iter().map(|id| (id.clone(), stage1.fit_photo(&photos[id]))).collect();
                crate::retrieval::build_index(fitted, |p| stage1.encode_image(ImageRef::Photo(p)))?
                    .with_hashes(stage1.content_hash(), Some(stage2.content_hash()))
            }
            None => return Err(Error::ServiceUnavailable("no gallery index or corpus photos configured".into())),
        };
        Self::new(stage1, stage2, gallery, photos)
    }

    pub fn gallery(&self) -> &GalleryIndex {
        &self.gallery
    }

    pub fn stage1(&self) -> &Stage1Model {
        &self.stage1
    }

    pub fn stage2(&self) -> &Stage2Model {
        &self.stage2
    }

    pub fn photo(&self, id: &str) -> Option<&PhotoImage> {
        self.photos.get(id)
    }

    pub fn photo_ids(&self) -> impl Iterator<Item = &str> {
        self.gallery.entries().iter().map(|(id, _)| id.as_str())
    }

    fn encode_canvas(&self, canvas: &SketchImage) -> Result<EmbeddingVector> {
        self.stage1.encode_high(ImageRef::Sketch(&self.stage1.fit_sketch(canvas)))
    }

    fn query(&self, history: &[EmbeddingVector], k: usize, target: Option<&str>) -> Result<(Vec<RankedEntry>, Option<usize>)> {
        let query = self.stage2.encode_prefix(&FeatureSequence::new(history)?)?;
        let result = self.gallery.query_topk(&query, k)?;
        let target_rank = target.map(|t| self.gallery.rank_of_target(&query, t)).transpose()?;
        let top_k = result
            .ranked
            .into_iter()
            .map(|r| RankedEntry {
                photo_id: r.photo_id,
                distance: r.distance,
                rank: r.rank,
            })
            .collect();
        Ok((top_k, target_rank))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub photo_id: String,
    pub distance: f64,
    pub rank: usize,
}

/// Response to one stroke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeResult {
    pub stroke_index: usize,
    pub top_k: Vec<RankedEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    #[serde(default)]
    pub canvas_size: Option<u32>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub target_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub canvas_size: u32,
    pub k: usize,
    pub stroke_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_id: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub last_active: u64,
    pub last_result: Option<StrokeResult>,
}

pub struct Session {
    id: String,
    canvas: SketchImage,
    history: Vec<EmbeddingVector>,
    k: usize,
    target_id: Option<String>,
    created_at: SystemTime,
    last_active: SystemTime,
    touched: Instant,
    last_result: Option<StrokeResult>,
}

fn millis(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl Session {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn canvas(&self) -> &SketchImage {
        &self.canvas
    }

    pub fn stroke_count(&self) -> usize {
        self.history.len()
    }

    fn touch(&mut self) {
        self.last_active = SystemTime::now();
        self.touched = Instant::now();
    }

    /// Draw, encode the new canvas, re-encode the whole prefix and rank.
    /// On error the session is left unchanged.
    pub fn add_stroke(&mut self, engine: &Engine, payload: &StrokePayload, default_width: f64) -> Result<StrokeResult> {
        let mut canvas = self.canvas.clone();
        payload.apply(&mut canvas, default_width)?;
        let v_high = engine.encode_canvas(&canvas)?;
        self.history.push(v_high);
        let ranked = engine.query(&self.history, self.k, self.target_id.as_deref());
        let (top_k, target_rank) = match ranked {
            Ok(r) => r,
            Err(e) => {
                self.history.pop();
                return Err(e);
            }
        };
        self.canvas = canvas;
        self.touch();
        let result = StrokeResult {
            stroke_index: self.history.len(),
            top_k,
            target_rank,
        };
        self.last_result = Some(result.clone());
        Ok(result)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            canvas_size: self.canvas.width(),
            k: self.k,
            stroke_count: self.history.len(),
            target_id: self.target_id.clone(),
            created_at: millis(self.created_at),
            last_active: millis(self.last_active),
            last_result: self.last_result.clone(),
        }
    }
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// Live sessions. Each session has its own lock, so strokes to one session are
/// serialized while different sessions proceed independently.
pub struct SessionManager {
    engine: Option<Arc<Engine>>,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    ttl: Duration,
    default_k: usize,
    default_canvas: u32,
    stroke_width: f64,
}

pub const MAX_CANVAS: u32 = 2048;

impl SessionManager {
    pub fn new(engine: Option<Arc<Engine>>, config: &ServeConfig) -> Self {
        Self {
            engine,
            sessions: Mutex::new(HashMap::new()),
            ttl: Duration::from_secs(config.session_ttl_secs),
            default_k: config.k,
            default_canvas: config.canvas_size,
            stroke_width: config.stroke_width,
        }
    }

    pub fn engine(&self) -> Result<&Arc<Engine>> {
        self.engine
            .as_ref()
            .ok_or_else(|| Error::ServiceUnavailable("models and gallery are not loaded".into()))
    }

    pub fn create(&self, request: &SessionRequest) -> Result<SessionSummary> {
        let engine = self.engine()?;
        let size = request.canvas_size.unwrap_or(self.default_canvas);
        if !(8..=MAX_CANVAS).contains(&size) {
            return Err(invalid(format!("canvas_size {size} outside 8..={MAX_CANVAS}")));
        }
        let k = request.k.unwrap_or(self.default_k);
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if let Some(t) = &request.target_id {
            if !engine.gallery().contains(t) {
                return Err(Error::NotFound(format!("photo {t:?} is not in the gallery")));
            }
        }
        let now = SystemTime::now();
        let session = Session {
            id: uuid::Uuid::new_v4().to_string(),
            canvas: SketchImage::blank(size, size),
            history: Vec::new(),
            k,
            target_id: request.target_id.clone(),
            created_at: now,
            last_active: now,
            touched: Instant::now(),
            last_result: None,
        };
        let summary = session.summary();
        self.sessions
            .lock()
            .expect("session table lock")
            .insert(session.id.clone(), Arc::new(Mutex::new(session)));
        Ok(summary)
    }

    fn handle(&self, id: &str) -> Result<SessionHandle> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id:?} does not exist")))
    }

    pub fn add_stroke(&self, id: &str, payload: &StrokePayload) -> Result<StrokeResult> {
        let engine = self.engine()?.clone();
        let handle = self.handle(id)?;
        let mut session = handle.lock().expect("session lock");
        if !self.sessions.lock().expect("session table lock").contains_key(id) {
            return Err(Error::NotFound(format!("session {id:?} does not exist")));
        }
        session.add_stroke(&engine, payload, self.stroke_width)
    }

    pub fn get(&self, id: &str) -> Result<SessionSummary> {
        Ok(self.handle(id)?.lock().expect("session lock").summary())
    }

    pub fn close(&self, id: &str) -> Result<()> {
        self.sessions
            .lock()
            .expect("session table lock")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::NotFound(format!("session {id:?} does not exist")))
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().expect("session table lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Close every session idle for longer than the TTL as of `now`. Sessions
    /// busy with a stroke are skipped. Returns how many were closed.
    pub fn reap_expired_at(&self, now: Instant) -> usize {
        let mut table = self.sessions.lock().expect("session table lock");
        let before = table.len();
        table.retain(|_, handle| match handle.try_lock() {
            Ok(s) => now.saturating_duration_since(s.touched) <= self.ttl,
            Err(_) => true,
        });
        before - table.len()
    }

    pub fn reap_expired(&self) -> usize {
        self.reap_expired_at(Instant::now())
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::make_toy_corpus;
    use crate::embed::Stage1Config;
    use crate::eval::photo_gallery;
    use crate::seq::Stage2Config;

    pub(crate) fn tiny_engine() -> Engine {
        let corpus = make_toy_corpus(4, 16, 3, 3).unwrap();
        let mut s1 = Stage1Model::new(Stage1Config::toy(16, 8), 1).unwrap();
        s1.freeze();
        let s2 = Stage2Model::new(&s1, Stage2Config { hidden_size: 4, ..Stage2Config::toy() }, 2).unwrap();
        let ids: Vec<String> = corpus.identities().map(String::from).collect();
        let gallery = photo_gallery(&s1, &corpus, &ids).unwrap();
        Engine::new(s1, s2, gallery, corpus.photos().clone()).unwrap()
    }

    pub(crate) fn manager() -> SessionManager {
        let cfg = ServeConfig {
            canvas_size: 32,
            k: 3,
            ..ServeConfig::default()
        };
        SessionManager::new(Some(Arc::new(tiny_engine())), &cfg)
    }

    fn line(i: usize) -> StrokePayload {
        let y = 4.0 + 3.0 * i as f64;
        StrokePayload::polyline(
            vec![
                StrokePoint { x: 2.0, y, pressure: None },
                StrokePoint { x: 28.0, y: y + 1.0, pressure: Some(0.8) },
            ],
            2.0,
        )
    }

    #[test]
    fn session_lifecycle() {
        let m = manager();
        let a = m.create(&SessionRequest::default()).unwrap();
        let b = m.create(&SessionRequest::default()).unwrap();
        assert_ne!(a.session_id, b.session_id);
        assert_eq!((a.canvas_size, a.k, a.stroke_count), (32, 3, 0));
        assert!(a.last_result.is_none());
        for i in 0..3 {
            let r = m.add_stroke(&a.session_id, &line(i)).unwrap();
            assert_eq!(r.stroke_index, i + 1);
            assert_eq!(r.top_k.len(), 3);
            assert!(r.top_k.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
        let s = m.get(&a.session_id).unwrap();
        assert_eq!(s.stroke_count, 3);
        assert_eq!(s.last_result.unwrap().stroke_index, 3);
        m.close(&a.session_id).unwrap();
        assert!(matches!(m.get(&a.session_id), Err(Error::NotFound(_))));
        assert!(matches!(m.close(&a.session_id), Err(Error::NotFound(_))));
        assert!(matches!(m.add_stroke(&a.session_id, &line(0)), Err(Error::NotFound(_))));
    }

    #[test]
    fn create_validation() {
        let m = manager();
        let unknown = SessionRequest { target_id: Some("nobody".into()), ..Default::default() };
        assert!(matches!(m.create(&unknown), Err(Error::NotFound(_))));
        assert!(m.create(&SessionRequest { k: Some(0), ..Default::default() }).is_err());
        assert!(m.create(&SessionRequest { canvas_size: Some(4), ..Default::default() }).is_err());
        let big_k = m.create(&SessionRequest { k: Some(50), target_id: Some("id0002".into()), ..Default::default() }).unwrap();
        let r = m.add_stroke(&big_k.session_id, &line(1)).unwrap();
        assert_eq!(r.top_k.len(), 4);
        let t = r.target_rank.unwrap();
        assert_eq!(r.top_k[t - 1].photo_id, "id0002");
        let unloaded = SessionManager::new(None, &ServeConfig::default());
        assert!(matches!(unloaded.create(&SessionRequest::default()), Err(Error::ServiceUnavailable(_))));
    }

    #[test]
    fn bad_stroke_leaves_session_unchanged() {
        let m = manager();
        let s = m.create(&SessionRequest::default()).unwrap();
        m.add_stroke(&s.session_id, &line(0)).unwrap();
        let bad = StrokePayload::polyline(vec![StrokePoint { x: 99.0, y: 1.0, pressure: None }], 2.0);
        assert!(matches!(m.add_stroke(&s.session_id, &bad), Err(Error::InvalidArgument(_))));
        assert_eq!(m.get(&s.session_id).unwrap().stroke_count, 1);
    }

    #[test]
    fn canvas_only_gains_ink() {
        let m = manager();
        let s = m.create(&SessionRequest::default()).unwrap();
        let handle = m.handle(&s.session_id).unwrap();
        let mut prev = handle.lock().unwrap().canvas().clone();
        for i in 0..5 {
            m.add_stroke(&s.session_id, &line(i)).unwrap();
            let now = handle.lock().unwrap().canvas().clone();
            assert!(prev.pixels().iter().zip(now.pixels()).all(|(a, b)| b <= a));
            prev = now;
        }
    }

    #[test]
    fn interleaved_sessions_match_serial_runs() {
        let m = manager();
        let serial = |n: usize| {
            let s = m.create(&SessionRequest::default()).unwrap();
            (0..n).map(|i| m.add_stroke(&s.session_id, &line(i)).unwrap()).collect::<Vec<_>>()
        };
        let a_alone = serial(4);
        let b_alone: Vec<_> = {
            let s = m.create(&SessionRequest::default()).unwrap();
            (0..4).map(|i| m.add_stroke(&s.session_id, &line(3 - i)).unwrap()).collect()
        };
        let a = m.create(&SessionRequest::default()).unwrap();
        let b = m.create(&SessionRequest::default()).unwrap();
        let (mut ra, mut rb) = (Vec::new(), Vec::new());
        for i in 0..4 {
            ra.push(m.add_stroke(&a.session_id, &line(i)).unwrap());
            rb.push(m.add_stroke(&b.session_id, &line(3 - i)).unwrap());
        }
        assert_eq!(ra, a_alone);
        assert_eq!(rb, b_alone);
    }

    #[test]
    fn idle_sessions_are_reaped() {
        let m = manager();
        let s = m.create(&SessionRequest::default()).unwrap();
        assert_eq!(m.reap_expired_at(Instant::now()), 0);
        let later = Instant::now() + m.ttl() + Duration::from_secs(1);
        assert_eq!(m.reap_expired_at(later), 1);
        assert!(matches!(m.get(&s.session_id), Err(Error::NotFound(_))));
        assert!(m.is_empty());
    }

    #[test]
    fn engine_rejects_foreign_models() {
        let e = tiny_engine();
        let other = Stage1Model::new(Stage1Config::toy(16, 8), 9).unwrap();
        let s2 = Stage2Model::new(&other, Stage2Config { hidden_size: 4, ..Stage2Config::toy() }, 2).unwrap();
        assert!(Engine::new(e.stage1.clone(), s2, e.gallery.clone(), BTreeMap::new()).is_err());
    }
}

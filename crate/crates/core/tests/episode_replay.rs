//! Drawing a trained toy episode into the service one frame at a time ends
//! with the target photo ranked first, matching the offline evaluation.

use std::sync::Arc;

use sketchless::config::RunConfig;
use sketchless::data::make_toy_corpus;
use sketchless::embed::{train_stage1, ImageRef, Stage1Model};
use sketchless::eval::{compare, photo_gallery};
use sketchless::seq::{train_stage2, Stage2Model};
use sketchless::service::{Engine, ServeConfig, SessionManager, SessionRequest, StrokePayload};

#[test]
fn replaying_episode_frames_reaches_rank_one() {
    let cfg = RunConfig::toy();
    let corpus = make_toy_corpus(20, cfg.image_size, cfg.episode.frames, 1).unwrap();
    let ids: Vec<String> = corpus.identities().map(String::from).collect();

    let mut stage1 = Stage1Model::new(cfg.stage1_config(), cfg.seed).unwrap();
    train_stage1(&mut stage1, &corpus, &cfg.stage1_train()).unwrap();
    stage1.freeze();
    for id in &ids {
        let q = stage1.encode_image(ImageRef::Sketch(corpus.episode(id).unwrap().final_frame())).unwrap();
        let g = photo_gallery(&stage1, &corpus, &ids).unwrap();
        assert_eq!(g.rank_of_target(&q, id).unwrap(), 1, "stage 1 has not overfit {id}");
    }
    let mut stage2 = Stage2Model::new(&stage1, cfg.stage2_config(), cfg.seed).unwrap();
    train_stage2(&mut stage2, &corpus, &stage1, &cfg.stage2_train()).unwrap();
    let offline = compare(&stage1, &stage2, &corpus, &ids).unwrap();

    let gallery = offline.gallery.clone();
    let engine = Engine::new(stage1, stage2, gallery, corpus.photos().clone()).unwrap();
    let serve = ServeConfig { canvas_size: cfg.image_size, k: 5, ..ServeConfig::default() };
    let manager = SessionManager::new(Some(Arc::new(engine)), &serve);

    for (j, id) in ids.iter().enumerate().step_by(4) {
        let session = manager
            .create(&SessionRequest { target_id: Some(id.clone()), ..Default::default() })
            .unwrap();
        let frames = &corpus.episode(id).unwrap().frames;
        let mut last = None;
        for (i, frame) in frames.iter().enumerate() {
            let result = manager.add_stroke(&session.session_id, &StrokePayload::raster(frame).unwrap()).unwrap();
            assert_eq!(result.stroke_index, i + 1);
            assert_eq!(result.target_rank.unwrap() as u32, offline.sequence.rank(j, i), "{id} frame {i}");
            last = result.target_rank;
        }
        assert_eq!(last, Some(1), "{id}");
    }
}

use temporal_core::pipeline::{segment_image_icl, segment_video, SelectionConfig};
use temporal_core::retrieval::{build_index, load_index, save_index, DatasetSource};
use temporal_core::synthvideo::{generate_dataset, load_dataset, save_dataset, DatasetSpec};
use temporal_core::trainer::{train, TrainConfig};
use temporal_core::vos::ReferencePropagator;

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        num_videos: 6,
        frames_per_video: 32,
        image_size: 32,
        seed: 11,
        ..Default::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        eval_every: 1,
        ..Default::default()
    }
}

#[test]
fn stored_dataset_trains_indexes_and_segments() {
    let tmp = tempfile::tempdir().unwrap();
    let generated = generate_dataset(&small_spec()).unwrap();
    save_dataset(&generated, tmp.path()).unwrap();
    let dataset = load_dataset(tmp.path()).unwrap();
    assert_eq!(dataset, generated);

    let outcome = train(&dataset, &small_config(), None).unwrap();
    assert_eq!(outcome.history.len(), 3);
    assert!(outcome.history.iter().all(|r| r.mean_loss.is_finite()));
    assert!(outcome.history.iter().all(|r| r.temporal_top1.is_some()));

    let index = build_index(&dataset, tmp.path(), &outcome.params).unwrap();
    let path = tmp.path().join("index.tidx");
    save_index(&index, &path).unwrap();
    assert_eq!(load_index(&path, None).unwrap(), index);

    let train_ids: Vec<u64> = dataset.train_videos().iter().map(|v| v.id).collect();
    let test = dataset.test_videos()[0];
    let config = SelectionConfig {
        context_k: 3,
        ..Default::default()
    };
    let vos = ReferencePropagator::default();
    let source = DatasetSource(&dataset);
    let icl = segment_image_icl(
        &test.frames[5],
        &index,
        &source,
        &outcome.params,
        &vos,
        &config,
        false,
    )
    .unwrap();
    assert_eq!(icl.context.len(), 3);
    for hit in &icl.context {
        let entry = index.get(hit.id).unwrap();
        assert!(train_ids.contains(&entry.video_id));
    }
    assert_eq!(icl.prediction.mask.dims(), test.frames[5].dims());

    let seg = segment_video(
        &test.frames,
        &index,
        &source,
        &outcome.params,
        &vos,
        &config,
    )
    .unwrap();
    assert_eq!(seg.masks.len(), test.frames.len());
    for (t, m) in seg.masks.iter().enumerate() {
        assert_eq!(m.frame_index, t);
    }
    assert!(!seg.prompts.is_empty());
}

#[test]
fn training_is_reproducible() {
    let dataset = generate_dataset(&small_spec()).unwrap();
    let a = train(&dataset, &small_config(), None).unwrap();
    let b = train(&dataset, &small_config(), None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}

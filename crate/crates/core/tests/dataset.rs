use std::fs;

use laneseq_core::synthdata::{
    generate_scene, load_dataset, write_dataset, AnnotationLine, DatasetError, SceneSpec, ANNOTATION_FILE,
};

fn spec() -> SceneSpec {
    SceneSpec { seed: 77, ..SceneSpec::default() }
}

#[test]
fn write_then_read_returns_equal_records() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&spec(), 100, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 100);
    for (i, rec) in back.iter().enumerate() {
        assert_eq!(*rec, generate_scene(&spec(), i as u64));
    }
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&spec(), 0, dir.path()).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join(ANNOTATION_FILE)).unwrap(), "");
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn parallel_generation_matches_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    pool.install(|| write_dataset(&spec(), 24, dir.path())).unwrap();
    let seq: Vec<_> = (0..24).map(|i| generate_scene(&spec(), i)).collect();
    assert_eq!(load_dataset(dir.path()).unwrap(), seq);
}

#[test]
fn malformed_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&spec(), 3, dir.path()).unwrap();
    let path = dir.path().join(ANNOTATION_FILE);
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[1] = "{\"image\": 3".into();
    fs::write(&path, lines.join("\n")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, DatasetError::Parse { line: 2, .. }), "{err}");
}

#[test]
fn missing_image_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&spec(), 2, dir.path()).unwrap();
    fs::remove_file(dir.path().join("000001.pgm")).unwrap();
    assert!(matches!(load_dataset(dir.path()).unwrap_err(), DatasetError::Io { .. }));
}

#[test]
fn annotation_lines_follow_documented_schema() {
    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../../../docs/annotation.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    for i in 0..1000 {
        let rec = generate_scene(&spec(), i);
        let line = serde_json::to_value(AnnotationLine::from_record(&rec, format!("{i:06}.pgm"))).unwrap();
        let errors: Vec<String> = validator.iter_errors(&line).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "record {i}: {errors:?}");
    }
    let bad = serde_json::json!({"image": "a.pgm", "index": 0});
    assert!(!validator.is_valid(&bad));
}

//! Annotation persistence: round trips, strict validation with line numbers,
//! and byte-stable re-serialization.

use std::fs;

use robustdet_core::boxes::BoxXYWH;
use robustdet_core::data::{
    generate_shapes_dataset, load_annotations, load_dataset, load_png, save_annotations,
    save_dataset, save_png, DatasetManifest, SampleRecord,
};
use robustdet_core::error::Error;

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn save_load_round_trip_identity() {
    let d = generate_shapes_dataset(12, 4, (64, 64), 3).unwrap();
    let dir = tmp();
    let path = dir.path().join("annotations.jsonl");
    save_annotations(&d.manifest, &path).unwrap();
    let loaded = load_annotations(&path).unwrap();
    assert_eq!(loaded, d.manifest);
}

#[test]
fn empty_manifest_round_trips() {
    let manifest = DatasetManifest {
        class_names: vec!["circle".into(), "square".into()],
        image_size: (64, 64),
        samples: vec![],
    };
    let dir = tmp();
    let path = dir.path().join("empty.jsonl");
    save_annotations(&manifest, &path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1, "header record only");
    let loaded = load_annotations(&path).unwrap();
    assert_eq!(loaded, manifest);
}

#[test]
fn double_round_trip_is_byte_identical() {
    let d = generate_shapes_dataset(50, 9, (64, 64), 4).unwrap();
    let dir = tmp();
    let p1 = dir.path().join("a.jsonl");
    let p2 = dir.path().join("b.jsonl");
    save_annotations(&d.manifest, &p1).unwrap();
    let reloaded = load_annotations(&p1).unwrap();
    save_annotations(&reloaded, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
}

#[test]
fn negative_width_is_rejected_with_line_number() {
    let dir = tmp();
    let path = dir.path().join("bad.jsonl");
    let text = concat!(
        "{\"type\":\"manifest\",\"classes\":[\"circle\",\"square\"],\"image_size\":[64,64]}\n",
        "{\"image\":\"images/0.png\",\"boxes\":[[1,1,10,10]],\"labels\":[1]}\n",
        "{\"image\":\"images/1.png\",\"boxes\":[[2,2,8,8]],\"labels\":[2]}\n",
        "{\"image\":\"images/2.png\",\"boxes\":[[5,5,-3,10]],\"labels\":[1]}\n",
    );
    fs::write(&path, text).unwrap();
    let err = load_annotations(&path).unwrap_err();
    match err {
        Error::Annotation { line, ref msg } => {
            assert_eq!(line, 4, "line number in: {msg}");
            assert!(msg.contains("-3"), "{msg}");
        }
        other => panic!("expected annotation error, got {other}"),
    }
}

#[test]
fn unknown_class_and_out_of_frame_are_rejected() {
    let dir = tmp();
    let path = dir.path().join("bad2.jsonl");
    fs::write(
        &path,
        concat!(
            "{\"type\":\"manifest\",\"classes\":[\"circle\"],\"image_size\":[64,64]}\n",
            "{\"image\":\"x.png\",\"boxes\":[[1,1,10,10]],\"labels\":[2]}\n",
        ),
    )
    .unwrap();
    assert!(matches!(load_annotations(&path).unwrap_err(), Error::Annotation { line: 2, .. }));

    fs::write(
        &path,
        concat!(
            "{\"type\":\"manifest\",\"classes\":[\"circle\"],\"image_size\":[64,64]}\n",
            "{\"image\":\"x.png\",\"boxes\":[[60,1,10,10]],\"labels\":[1]}\n",
        ),
    )
    .unwrap();
    assert!(matches!(load_annotations(&path).unwrap_err(), Error::Annotation { line: 2, .. }));
}

#[test]
fn missing_file_is_io_error() {
    let err = load_annotations(std::path::Path::new("/nonexistent/file.jsonl")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn hand_written_fixture_loads_verbatim() {
    let dir = tmp();
    let path = dir.path().join("fixture.jsonl");
    fs::write(
        &path,
        concat!(
            "{\"type\":\"manifest\",\"classes\":[\"circle\",\"square\",\"triangle\"],\"image_size\":[128,96]}\n",
            "{\"image\":\"images/a.png\",\"boxes\":[[4.5,6.25,20,18]],\"labels\":[3]}\n",
            "{\"image\":\"images/b.png\",\"boxes\":[[0,0,16,16],[40,50,30,30]],\"labels\":[1,2]}\n",
        ),
    )
    .unwrap();
    let m = load_annotations(&path).unwrap();
    assert_eq!(m.image_size, (128, 96));
    assert_eq!(m.class_names, vec!["circle", "square", "triangle"]);
    assert_eq!(
        m.samples,
        vec![
            SampleRecord {
                image: "images/a.png".into(),
                boxes: vec![[4.5, 6.25, 20.0, 18.0]],
                labels: vec![3],
            },
            SampleRecord {
                image: "images/b.png".into(),
                boxes: vec![[0.0, 0.0, 16.0, 16.0], [40.0, 50.0, 30.0, 30.0]],
                labels: vec![1, 2],
            },
        ]
    );
}

#[test]
fn png_round_trip_is_lossless_for_integral_pixels() {
    let d = generate_shapes_dataset(2, 21, (64, 64), 3).unwrap();
    let dir = tmp();
    let path = dir.path().join("img.png");
    save_png(&d.images[0].pixels, &path).unwrap();
    let back = load_png(&path).unwrap();
    assert_eq!(back, d.images[0].pixels);
}

#[test]
fn full_dataset_round_trip() {
    let d = generate_shapes_dataset(8, 2, (64, 64), 3).unwrap();
    let dir = tmp();
    let ann = save_dataset(&d, dir.path()).unwrap();
    let loaded = load_dataset(&ann).unwrap();
    assert_eq!(loaded.manifest, d.manifest);
    assert_eq!(loaded.images.len(), 8);
    for (a, b) in loaded.images.iter().zip(&d.images) {
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            let same = (x.x - y.x).abs() < 1e-12
                && (x.y - y.y).abs() < 1e-12
                && (x.w - y.w).abs() < 1e-12
                && (x.h - y.h).abs() < 1e-12;
            assert!(same);
        }
        assert_eq!(a.labels, b.labels);
    }
}

#[test]
fn generated_boxes_always_validate() {
    let d = generate_shapes_dataset(64, 5, (96, 64), 5).unwrap();
    for img in &d.images {
        img.validate(5).unwrap();
        for b in &img.boxes {
            let clipped = BoxXYWH::new(b.x, b.y, b.w, b.h).clip(96.0, 64.0);
            assert_eq!(clipped.w, b.w);
            assert_eq!(clipped.h, b.h);
        }
    }
}

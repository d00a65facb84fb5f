//! The hidden reference object, its templates and the detector calibration.

use jlab::metrics::{evaluate, MetricConfig};
use jlab::prompt::{ViewBinConfig, BACK_VIEW, FRONT_VIEW, SIDE_VIEW};
use jlab::scoremodel::{build_reference, BiasConfig, ReferenceConfig, WordBias};

fn bias(gamma: f64) -> BiasConfig {
    BiasConfig {
        beta: 0.6,
        canonical_bin: FRONT_VIEW.into(),
        word_bias: vec![WordBias {
            word: "smiling".into(),
            gamma,
        }],
    }
}

#[test]
fn front_template_carries_the_face() {
    let (_, t) = build_reference(
        &ReferenceConfig::default(),
        &ViewBinConfig::default(),
        &bias(0.8),
    )
    .unwrap();
    let p = t.face_patch;
    let front = t.clean(FRONT_VIEW).unwrap().crop(p).unwrap();
    for v in [BACK_VIEW, SIDE_VIEW] {
        let other = t.clean(v).unwrap().crop(p).unwrap();
        let d = front.mean_abs_diff(&other).unwrap();
        println!("face-region difference front vs {v}: {d:.3}");
        assert!(d > 0.1);
    }
    assert!(t
        .iter()
        .all(|(_, _, im)| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn word_bias_blend_endpoints() {
    let bins = ViewBinConfig::default();
    let (_, full) = build_reference(&ReferenceConfig::default(), &bins, &bias(1.0)).unwrap();
    let (_, none) = build_reference(&ReferenceConfig::default(), &bins, &bias(0.0)).unwrap();
    let p = full.face_patch;
    let front = full.clean(FRONT_VIEW).unwrap();
    let back = full.clean(BACK_VIEW).unwrap();
    let blended = full.get(BACK_VIEW, "smiling").unwrap();
    for r in 0..back.height() {
        for c in 0..back.width() {
            let inside =
                (p.row0..p.row0 + p.rows).contains(&r) && (p.col0..p.col0 + p.cols).contains(&c);
            let want = if inside {
                front.pixel(r, c)
            } else {
                back.pixel(r, c)
            };
            assert_eq!(blended.pixel(r, c), want);
        }
    }
    assert_eq!(
        none.get(BACK_VIEW, "smiling").unwrap(),
        none.clean(BACK_VIEW).unwrap()
    );
    assert_eq!(full.get(FRONT_VIEW, "smiling").unwrap(), front);
}

#[test]
fn empty_bins_are_rejected() {
    let bins = ViewBinConfig {
        bins: vec![],
        ..ViewBinConfig::default()
    };
    assert!(build_reference(&ReferenceConfig::default(), &bins, &bias(0.8)).is_err());
}

#[test]
fn reference_object_has_exactly_one_face() {
    let bins = ViewBinConfig::default();
    let (field, t) = build_reference(&ReferenceConfig::default(), &bins, &bias(0.8)).unwrap();
    let (report, tt) = evaluate(
        "reference",
        &field,
        &t,
        &bins,
        FRONT_VIEW,
        &MetricConfig::default(),
    )
    .unwrap();
    println!("reference detector scores: {:?}", report.janus.best_ncc);
    assert_eq!(tt.len(), 100);
    assert!(report.janus_success);
    assert_eq!(report.janus_bin_count, 1);
    for b in [FRONT_VIEW, BACK_VIEW] {
        assert!(
            report.curves.peaks_in_bin(&bins, b).unwrap(),
            "{b} curve peaks outside its bin"
        );
    }
}

#[test]
fn templates_export_as_named_ppms() {
    let (_, t) = build_reference(
        &ReferenceConfig::default(),
        &ViewBinConfig::default(),
        &bias(0.8),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.export(dir.path()).unwrap();
    for name in [
        "front_view_clean.ppm",
        "back_view_smiling.ppm",
        "top_view_clean.ppm",
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
}

//! Editor behaviour on the toy world with a trained checkpoint.

mod common;

use stylemask_core::editor::{default_sweep_grid, AttributeRole, EditRequest, Editor};
use stylemask_core::stylespace::{MaskMatrix, StyleCode};
use stylemask_core::Error;

fn editor() -> Editor {
    let (_, b, specs) = common::setup();
    Editor::new(b, specs, common::trained()).unwrap()
}

fn pair(editor: &Editor, k: u64) -> (StyleCode, StyleCode) {
    let g = &editor.backends().generator;
    (g.style_from_seed(5000 + 2 * k).unwrap(), g.style_from_seed(5001 + 2 * k).unwrap())
}

fn request(editor: &Editor, k: u64, targets: &[&str], delta: f64) -> EditRequest {
    let (source, reference) = pair(editor, k);
    EditRequest {
        source,
        reference,
        targets: targets.iter().map(|s| s.to_string()).collect(),
        delta,
    }
}

#[test]
fn zero_intensity_reproduces_source_pixels() {
    let ed = editor();
    let req = request(&ed, 0, &["tint", "stripes"], 0.0);
    let out = ed.edit(&req).unwrap();
    assert_eq!(out.style, req.source);
    assert_eq!(out.image, ed.synthesize(&req.source).unwrap());
    let swept = ed.sweep(&req, &[0.0]).unwrap();
    assert_eq!(swept.len(), 1);
    assert_eq!(swept[0].image, out.image);
}

#[test]
fn unit_edit_moves_toward_reference() {
    let ed = editor();
    for k in 0..5 {
        for name in ["tint", "emblem", "stripes"] {
            let req = request(&ed, k, &[name], 1.0);
            let out = ed.edit(&req).unwrap();
            let before = ed.edit(&EditRequest { delta: 0.0, ..req.clone() }).unwrap();
            let (after, start) = (out.report.distance(name).unwrap(), before.report.distance(name).unwrap());
            assert!(after < start, "pair {k} {name}: {after} >= {start}");
        }
    }
}

#[test]
fn frozen_channels_and_inputs_untouched() {
    let ed = editor();
    let req = request(&ed, 1, &["emblem"], 2.25);
    let copy = req.clone();
    let a = ed.edit(&req).unwrap();
    let b = ed.edit(&req).unwrap();
    assert_eq!(req, copy);
    assert_eq!(a, b);
    for (i, &ok) in req.source.editable().iter().enumerate() {
        if !ok {
            assert_eq!(a.style.values()[i], req.source.values()[i]);
            assert_eq!(a.mask.values()[i], 0.0);
        }
    }
}

#[test]
fn report_roles_follow_target_set() {
    let ed = editor();
    let out = ed.edit(&request(&ed, 2, &["tint"], 1.0)).unwrap();
    for a in &out.report.attributes {
        let want = if a.attribute == "tint" {
            AttributeRole::Target
        } else {
            AttributeRole::Preserved
        };
        assert_eq!(a.role, want);
        assert!(a.distance >= 0.0);
    }
    assert!(out.report.background >= 0.0);
}

#[test]
fn unknown_or_empty_targets_rejected() {
    let ed = editor();
    assert!(matches!(
        ed.edit(&request(&ed, 0, &["hair"], 1.0)),
        Err(Error::UnknownAttribute(name)) if name == "hair"
    ));
    assert!(matches!(ed.edit(&request(&ed, 0, &[], 1.0)), Err(Error::InvalidInput(_))));
    assert!(ed.edit(&request(&ed, 0, &["tint", "tint"], 1.0)).is_err());
    assert!(ed.edit(&request(&ed, 0, &["tint"], f64::NAN)).is_err());
    assert!(ed.sweep(&request(&ed, 0, &["tint"], 1.0), &[]).is_err());
}

#[test]
fn sweep_is_affine_in_intensity() {
    let ed = editor();
    let req = request(&ed, 3, &["tint", "emblem"], 1.0);
    let grid = default_sweep_grid();
    assert_eq!(grid, vec![1.0, 1.25, 1.5, 1.75, 2.0, 2.25]);
    let out = ed.sweep(&req, &grid).unwrap();
    assert_eq!(out.len(), 6);
    for (r, d) in out.iter().zip(&grid) {
        assert_eq!(r.delta, *d);
    }
    let src = req.source.values();
    for i in 0..src.len() {
        let step = out[1].style.values()[i] - out[0].style.values()[i];
        for w in out.windows(2) {
            let diff = w[1].style.values()[i] - w[0].style.values()[i];
            assert!((diff - step).abs() < 1e-12);
        }
        // extrapolating the line back to zero lands on the source
        let at0 = out[0].style.values()[i] - 4.0 * step;
        assert!((at0 - src[i]).abs() < 1e-9);
    }
}

#[test]
fn target_distance_shrinks_along_unit_interval() {
    let ed = editor();
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for name in ["tint", "emblem", "stripes"] {
        let req = request(&ed, 4, &[name], 1.0);
        let d: Vec<f64> = ed
            .sweep(&req, &grid)
            .unwrap()
            .iter()
            .map(|r| r.report.distance(name).unwrap())
            .collect();
        assert!(d.windows(2).all(|w| w[1] <= w[0]), "{name}: {d:?}");
    }
}

#[test]
fn single_step_sequence_equals_edit() {
    let ed = editor();
    let req = request(&ed, 5, &["stripes"], 1.5);
    let seq = ed
        .sequential_edit(&req.source, &req.reference, &[(req.targets.clone(), 1.5)])
        .unwrap();
    assert_eq!(seq.len(), 1);
    assert_eq!(seq[0], ed.edit(&req).unwrap());
    assert!(ed.sequential_edit(&req.source, &req.reference, &[]).is_err());
}

#[test]
fn disjoint_masks_make_sequence_equal_combined_edit() {
    let (_, b, specs) = common::setup();
    let n = b.generator.n_channels();
    let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    // every column puts all of its mass on exactly one row
    let mut m = MaskMatrix::zeros(names.clone(), n).unwrap();
    for c in 0..n {
        m.set(c % (names.len() + 1), c, 1000.0);
    }
    let mut ckpt = common::trained().clone();
    ckpt.matrix = m;
    let ed = Editor::new(b, specs, &ckpt).unwrap();
    let (src, rf) = pair(&ed, 6);
    for delta in [1.0, 1.5] {
        let steps: Vec<(Vec<String>, f64)> = names.iter().map(|n| (vec![n.clone()], delta)).collect();
        let seq = ed.sequential_edit(&src, &rf, &steps).unwrap();
        let combined = ed.parallel_edit(&src, &rf, &names, delta).unwrap();
        let last = &seq.last().unwrap().style;
        for (a, b) in last.values().iter().zip(combined.style.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn full_sequence_closes_most_of_the_gap() {
    let ed = editor();
    let names: Vec<String> = ed.specs().iter().map(|s| s.name.clone()).collect();
    let steps: Vec<(Vec<String>, f64)> = names.iter().map(|n| (vec![n.clone()], 1.0)).collect();
    for k in 0..5 {
        let (src, rf) = pair(&ed, k);
        let seq = ed.sequential_edit(&src, &rf, &steps).unwrap();
        let (src_img, ref_img) = (ed.synthesize(&src).unwrap(), ed.synthesize(&rf).unwrap());
        let before = ed.measure(&src_img, &ref_img, &src_img, &names).unwrap().transfer();
        let after = ed
            .measure(&src_img, &ref_img, &seq.last().unwrap().image, &names)
            .unwrap()
            .transfer();
        assert!(after < 0.1 * before, "pair {k}: {after} vs {before}");
    }
}

#[test]
fn low_mask_channels_barely_move() {
    let ed = editor();
    let names: Vec<String> = ed.specs().iter().map(|s| s.name.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let complement: Vec<String> = names.iter().filter(|n| *n != name).cloned().collect();
        for targets in [vec![name.clone()], complement] {
            let req = EditRequest {
                targets,
                ..request(&ed, k as u64, &[], 2.0)
            };
            let out = ed.edit(&req).unwrap();
            for i in 0..req.source.len() {
                let span = (req.reference.values()[i] - req.source.values()[i]).abs();
                if out.mask.values()[i] < 1e-3 {
                    let moved = (out.style.values()[i] - req.source.values()[i]).abs();
                    assert!(moved <= 1e-3 * span * req.delta + 1e-15);
                }
            }
        }
    }
}

#[test]
fn checkpoint_must_match_configuration() {
    let (_, b, mut specs) = common::setup();
    specs.reverse();
    assert!(Editor::new(b, specs, common::trained()).is_err());
}

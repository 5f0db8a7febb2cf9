//! Property tests for the box constructions and overlap measures.

use proptest::prelude::*;

use sovstg_core::geometry::{
    asmbr_raw, giou, iou, make_asmbr, make_mbr, make_smbr, noise_box, BBox,
};
use sovstg_core::rng::Rng;

fn boxes() -> impl Strategy<Value = BBox> {
    (0.0..=1.0f64, 0.0..=1.0f64, 0.01..=1.0f64, 0.01..=1.0f64)
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn close(a: &BBox, b: &BBox, tol: f64) -> bool {
    (a.cx - b.cx).abs() <= tol
        && (a.cy - b.cy).abs() <= tol
        && (a.w - b.w).abs() <= tol
        && (a.h - b.h).abs() <= tol
}

proptest! {
    #[test]
    fn verb_boxes_are_symmetric(a in boxes(), b in boxes()) {
        prop_assert!(close(&make_asmbr(&a, &b), &make_asmbr(&b, &a), 1e-12));
        prop_assert!(close(&make_mbr(&a, &b), &make_mbr(&b, &a), 1e-12));
        prop_assert!(close(&make_smbr(&a, &b), &make_smbr(&b, &a), 1e-12));
    }

    #[test]
    fn verb_boxes_fix_identical_inputs(a in boxes()) {
        prop_assert!(close(&make_asmbr(&a, &a), &a, 1e-12));
        prop_assert!(close(&make_mbr(&a, &a), &a, 1e-12));
        prop_assert!(close(&make_smbr(&a, &a), &a, 1e-12));
    }

    #[test]
    fn shifted_boxes_center_on_the_midpoint(a in boxes(), b in boxes()) {
        let mid = ((a.cx + b.cx) / 2.0, (a.cy + b.cy) / 2.0);
        let asmbr = asmbr_raw(&a, &b);
        let smbr = make_smbr(&a, &b);
        prop_assert!((asmbr.cx - mid.0).abs() < 1e-12 && (asmbr.cy - mid.1).abs() < 1e-12);
        prop_assert!((smbr.cx - mid.0).abs() < 1e-12 && (smbr.cy - mid.1).abs() < 1e-12);
    }

    #[test]
    fn asmbr_width_formula_before_clamping(a in boxes(), b in boxes()) {
        let raw = asmbr_raw(&a, &b);
        prop_assert!((raw.w - ((a.w + b.w) / 2.0 + (a.cx - b.cx).abs())).abs() < 1e-12);
        prop_assert!((raw.h - ((a.h + b.h) / 2.0 + (a.cy - b.cy).abs())).abs() < 1e-12);
    }

    #[test]
    fn mbr_contains_both_inputs(a in boxes(), b in boxes()) {
        let m = make_mbr(&a, &b);
        let (mx1, my1, mx2, my2) = m.corners();
        for bb in [&a, &b] {
            let (x1, y1, x2, y2) = bb.corners();
            prop_assert!(mx1 <= x1 + 1e-12 && my1 <= y1 + 1e-12);
            prop_assert!(mx2 >= x2 - 1e-12 && my2 >= y2 - 1e-12);
        }
    }

    #[test]
    fn asmbr_no_larger_than_mbr_under_axis_containment(a in boxes(), b in boxes()) {
        let (ax1, _, ax2, _) = a.corners();
        let (bx1, _, bx2, _) = b.corners();
        // condition: one extent contains the other along x
        if (ax1 <= bx1 && ax2 >= bx2) || (bx1 <= ax1 && bx2 >= ax2) {
            prop_assert!(make_asmbr(&a, &b).w <= make_mbr(&a, &b).w + 1e-12);
        }
    }

    #[test]
    fn overlap_measures_are_bounded(a in boxes(), b in boxes()) {
        let i = iou(&a, &b);
        let g = giou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&g));
        prop_assert!(g <= i + 1e-12);
    }

    #[test]
    fn giou_of_a_box_with_itself_is_one(a in boxes()) {
        prop_assert!((giou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_noise_is_identity(a in boxes(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        prop_assert_eq!(noise_box(&a.clamped(), 0.0, &mut rng), a.clamped());
    }

    #[test]
    fn noised_boxes_stay_valid(a in boxes(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        prop_assert!(noise_box(&a, 0.8, &mut rng).is_valid());
    }
}

use robustcaps::layers::group_plan;
use robustcaps::tensor::{PatchPlan, Tap};
use robustcaps::verify::{self, Level, Options};

/// `group_plan` with the sign of the output rotation flipped in the plane
/// cycle: frame `r` reads input plane `s - r` instead of `s + r`, which is
/// the correct plane shifted by `2r`.
fn flipped_plane_sign(in_ch: usize, k: usize) -> PatchPlan {
    let good = group_plan(in_ch, k);
    let mut taps = Vec::new();
    for f in 0..good.frames() {
        for row in 0..good.rows() {
            let t = good.tap(f, row);
            let channel = t.channel / 4 * 4 + (t.channel + 2 * f) % 4;
            taps.push(Tap { channel, ..t });
        }
    }
    PatchPlan::new(good.frames(), good.rows(), taps)
}

#[test]
fn fast_level_passes_and_reports_strided_precaps() {
    let report = verify::run(&Options::new(Level::Fast)).unwrap();
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    let strided: Vec<_> = report
        .checks
        .iter()
        .filter(|c| c.name.starts_with("strided PreCaps"))
        .collect();
    assert_eq!(strided.len(), 8);
    assert!(strided.iter().all(|c| c.threshold.is_none() && c.error.is_finite()));
    // the unstrided stem is exact, the first stride-2 block is not
    assert!(strided[0].error < 1e-5);
    assert!(strided[4].error > 1e-3, "{:?}", strided[4]);
    let json = serde_json::to_value(&report).unwrap();
    assert_eq!(json["level"], "fast");
    assert!(json["checks"][0]["threshold"].is_number());
}

#[test]
fn sign_error_in_rotation_indexing_fails_equivariance() {
    assert_ne!(flipped_plane_sign(3, 3), group_plan(3, 3));
    let options = Options {
        group_plan: flipped_plane_sign,
        ..Options::new(Level::Fast)
    };
    let checks = verify::equivariance(&options).unwrap();
    let group: Vec<_> = checks.iter().filter(|c| c.name.contains("group_correlation")).collect();
    assert_eq!(group.len(), 2);
    assert!(group.iter().all(|c| !c.passed), "{group:#?}");
    assert!(checks.iter().filter(|c| c.name.contains("lift")).all(|c| c.passed));
}

#[test]
fn runs_are_reproducible() {
    let options = Options::new(Level::Fast);
    let a = verify::routing_invariants(&options).unwrap();
    let b = verify::routing_invariants(&options).unwrap();
    assert_eq!(a, b);
}

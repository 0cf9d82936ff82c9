use inflens_web::{attribution_pixels, demo_feature_map, planted_recovery_json, sweep_json};

#[test]
fn default_planted_sets_are_recovered() {
    let v = planted_recovery_json(4, 32, 3, 200, 5.0, 3, 3, 0).unwrap();
    for c in v["classes"].as_array().unwrap() {
        assert_eq!(c["planted"], c["recovered"]);
        assert_eq!(c["counts"].as_array().unwrap().len(), 32);
    }
    assert!(v["A_d"].as_f64().unwrap() >= 0.99);
}

#[test]
fn bad_spec_is_an_error_not_a_panic() {
    assert!(planted_recovery_json(20, 8, 3, 10, 5.0, 3, 3, 0).is_err());
    assert!(planted_recovery_json(4, 32, 3, 10, 5.0, 40, 3, 0).is_err());
    assert!(sweep_json(4, 32, 3, 10, 5.0, "1,x", "1", 0).is_err());
}

#[test]
fn sweep_is_row_major_with_full_corner() {
    let v = sweep_json(4, 16, 2, 50, 5.0, "1,2,16", "1,16", 3).unwrap();
    let r = v["r_A"].as_array().unwrap();
    assert_eq!(r.len(), 6);
    assert_eq!(r[5].as_f64(), Some(1.0));
}

#[test]
fn attribution_is_square_and_spans_the_byte_range() {
    let px = attribution_pixels(8, 7, "0,3", 64, false, 1).unwrap();
    assert_eq!(px.len(), 64 * 64);
    assert_eq!(px.iter().min(), Some(&0));
    assert_eq!(px.iter().max(), Some(&255));
    assert!(attribution_pixels(8, 7, "9", 64, false, 1).is_err());
}

#[test]
fn demo_maps_are_seeded() {
    assert_eq!(demo_feature_map(3, 5, 5, 9), demo_feature_map(3, 5, 5, 9));
    assert_ne!(demo_feature_map(3, 5, 5, 9), demo_feature_map(3, 5, 5, 10));
}

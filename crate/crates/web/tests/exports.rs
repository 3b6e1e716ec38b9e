use blockgp_web::{curves_json, slhd_json, weights_json};
use serde_json::Value;

#[test]
fn curves_cover_the_grid_and_agree_with_one_block() {
    let doc: Value = serde_json::from_str(&curves_json(4, 1.0, 3).unwrap()).unwrap();
    assert_eq!(doc["x"].as_array().unwrap().len(), 16);
    assert_eq!(doc["grid"].as_array().unwrap().len(), 200);
    for c in ["blup", "blubp", "cl"] {
        assert_eq!(doc[c]["mean"].as_array().unwrap().len(), 200);
    }
    let one: Value = serde_json::from_str(&curves_json(1, 1.0, 3).unwrap()).unwrap();
    assert!(one["mean_abs_diff_blubp"].as_f64().unwrap() < 1e-8);
}

#[test]
fn weights_sum_to_one() {
    let doc: Value = serde_json::from_str(&weights_json(4, 1.0, 3, 7.3).unwrap()).unwrap();
    for w in ["blubp", "cl"] {
        let v: Vec<f64> = doc[w].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(v.len(), 4);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(doc["blubp_sd"].as_f64().unwrap() <= doc["cl_sd"].as_f64().unwrap() + 1e-12);
}

#[test]
fn design_export_and_errors() {
    let doc: Value = serde_json::from_str(&slhd_json(3, 4, 1).unwrap()).unwrap();
    assert_eq!(doc["points"].as_array().unwrap().len(), 12);
    assert!(slhd_json(0, 4, 1).is_err());
    assert!(curves_json(5, 1.0, 0).is_err());
}

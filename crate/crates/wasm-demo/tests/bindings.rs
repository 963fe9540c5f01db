use dmst_wasm_demo::{memory_rows, membership_demo, project};

#[test]
fn projection_reports_values_threshold_and_support() {
    let v = project(&[3.0, 1.0, 0.0], 0).unwrap();
    assert_eq!(v["values"], serde_json::json!([1.0, 0.0, 0.0]));
    assert_eq!(v["threshold"], 2.0);
    let t = project(&[0.9, 0.8, 0.1, 0.05], 2).unwrap();
    assert_eq!(t["support"], serde_json::json!([0, 1]));
    assert!(project(&[], 0).is_err());
}

#[test]
fn memory_rows_cover_every_operator() {
    let rows = memory_rows(&[64, 128], 16, 2).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let peak = |op: &str, n: u64| {
        rows.iter()
            .find(|r| r["op"] == op && r["tokens"] == n)
            .unwrap()["peak_floats"]
            .as_f64()
            .unwrap()
    };
    assert!(peak("mhsa", 128) / peak("mhsa", 64) > peak("dmsa", 128) / peak("dmsa", 64));
    assert!(memory_rows(&[], 16, 2).is_err());
    assert!(memory_rows(&[0], 16, 2).is_err());
}

#[test]
fn membership_demo_returns_one_map_per_head() {
    let v = membership_demo(1, 1, 1).unwrap();
    let maps = v["maps"].as_array().unwrap();
    assert_eq!(maps.len(), 4);
    assert_eq!(maps[0]["values"].as_array().unwrap().len(), 16);
    assert!(membership_demo(1, 0, 5).is_err());
}

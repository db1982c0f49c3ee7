use rubric_aqa_web::{calibration_demo, gaussian_summary, synthetic_video};

#[test]
fn gaussian_summary_matches_closed_form() {
    let v = gaussian_summary(&[0.5, -1.0], &[0.5, 2.0], 3, 1).unwrap();
    let kl = 0.5 * ((0.25 + 0.25 - 1.0 - 0.25f64.ln()) + (4.0 + 1.0 - 1.0 - 4.0f64.ln()));
    assert!((v["kl"].as_f64().unwrap() - kl).abs() < 1e-12);
    // harmonic mean of 0.5 and 2
    assert!((v["uncertainty"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    let samples = v["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 3);
    assert_eq!(samples[0].as_array().unwrap().len(), 2);
    assert_eq!(v, gaussian_summary(&[0.5, -1.0], &[0.5, 2.0], 3, 1).unwrap());
}

#[test]
fn gaussian_summary_rejects_bad_sigma() {
    assert!(gaussian_summary(&[0.0], &[0.0], 1, 0).is_err());
    assert!(gaussian_summary(&[0.0, 1.0], &[1.0], 1, 0).is_err());
}

#[test]
fn synthetic_video_is_consistent() {
    let v = synthetic_video(4, 3, 12, 0.0).unwrap();
    assert_eq!(v["clips"], 12);
    let d = v["d_feat"].as_u64().unwrap() as usize;
    assert_eq!(v["features"].as_array().unwrap().len(), 12 * d);
    let intervals = v["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 3);
    assert_eq!(intervals[0][0], 1);
    assert_eq!(intervals[2][1], 12);
    // noiseless: every signature peak lands in its planted interval
    for (peak, iv) in v["oracle_peaks"].as_array().unwrap().iter().zip(intervals) {
        let p = peak.as_u64().unwrap();
        assert!(iv[0].as_u64().unwrap() <= p && p <= iv[1].as_u64().unwrap());
    }
    let nodes = v["dag"]["nodes"].as_array().unwrap();
    assert_eq!(nodes.iter().filter(|n| n["kind"] == "leaf").count(), 3);
    assert_eq!(nodes.iter().filter(|n| n["kind"] == "root").count(), 1);
    assert_eq!(v["dag"]["topo"].as_array().unwrap().len(), nodes.len());
}

#[test]
fn synthetic_video_rejects_impossible_shapes() {
    assert!(synthetic_video(0, 5, 3, 0.1).is_err());
    assert!(synthetic_video(0, 0, 8, 0.1).is_err());
}

#[test]
fn calibration_tracks_coupling() {
    let coupled = calibration_demo(2000, 1.0, 3).unwrap();
    assert!(coupled["kendall_tau"].as_f64().unwrap() > 0.8);
    assert_eq!(coupled["mae"].as_array().unwrap().len(), 10);
    let loose = calibration_demo(2000, 0.0, 3).unwrap();
    assert!(loose["kendall_tau"].as_f64().unwrap().abs() < 0.6);
    assert!(calibration_demo(5, 0.5, 0).is_err());
    assert!(calibration_demo(100, 1.5, 0).is_err());
}

//! wasm-bindgen entry points for `www/index.html`. Each export takes plain
//! numbers, returns a JSON string, and has a native twin so the logic is
//! testable without a browser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use rubric_aqa::data::{self, GeneratorConfig};
use rubric_aqa::metrics::{self, EvalRecord};
use rubric_aqa::rubric::{build_dag, NodeKind};
use rubric_aqa::stochastic::{self, GaussianEmbedding, NoiseKey};

fn to_js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

/// KL to N(0, I), harmonic uncertainty and `draws` reparameterized samples.
pub fn gaussian_summary(mu: &[f64], sigma: &[f64], draws: usize, seed: u64) -> Result<Value, String> {
    let g = GaussianEmbedding::new(mu.to_vec(), sigma.to_vec()).map_err(|e| e.to_string())?;
    let kl = stochastic::kl_standard_normal(&g).map_err(|e| e.to_string())?;
    let uncertainty = stochastic::uncertainty(&[g.sigma.clone()]).map_err(|e| e.to_string())?;
    let key = NoiseKey(seed);
    let samples = (0..draws)
        .map(|i| stochastic::sample_reparameterized(&g, &key.draws(i as u64, 0, g.dim())))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(json!({ "kl": kl, "uncertainty": uncertainty, "samples": samples }))
}

#[wasm_bindgen(js_name = gaussianSummary)]
pub fn gaussian_summary_js(mu: Vec<f64>, sigma: Vec<f64>, draws: usize, seed: u32) -> Result<String, JsError> {
    to_js(gaussian_summary(&mu, &sigma, draws, seed as u64))
}

/// One synthetic video with `k` steps: features, planted intervals, the
/// signature-matching peak per step and the rubric DAG built for it.
pub fn synthetic_video(seed: u64, k: usize, clips: usize, eta: f64) -> Result<Value, String> {
    let cfg = GeneratorConfig {
        n_train: 1,
        n_test: 1,
        t: clips,
        k_min: k,
        k_max: k,
        eta_min: eta,
        eta_max: eta,
        seed,
        ..GeneratorConfig::default()
    };
    let ds = data::generate(&cfg).map_err(|e| e.to_string())?;
    let sample = &ds.train[0];
    let (signatures, _) = data::feature_basis(cfg.catalog_size, cfg.d_feat, seed);
    let dag = build_dag(&ds.rubric, &sample.step_types).map_err(|e| e.to_string())?;
    let nodes: Vec<Value> = dag
        .nodes()
        .iter()
        .map(|n| {
            let name = match n.kind {
                NodeKind::Leaf => ds.rubric.name_of(n.label.unwrap_or(0)).unwrap_or("?").to_string(),
                NodeKind::Intermediate => format!("stage {}", n.label.unwrap_or(0)),
                NodeKind::Root => "score".to_string(),
            };
            json!({ "id": n.id, "kind": n.kind, "name": name })
        })
        .collect();
    let f = &sample.features;
    Ok(json!({
        "clips": f.t,
        "d_feat": f.d_feat,
        "features": f.values,
        "step_types": sample.step_types,
        "intervals": sample.intervals,
        "qualities": sample.qualities,
        "score": sample.raw_label(),
        "oracle_peaks": data::oracle_peaks(sample, &signatures),
        "dag": { "nodes": nodes, "edges": dag.edges(), "topo": dag.topo() },
    }))
}

#[wasm_bindgen(js_name = syntheticVideo)]
pub fn synthetic_video_js(seed: u32, k: usize, clips: usize, eta: f64) -> Result<String, JsError> {
    to_js(synthetic_video(seed as u64, k, clips, eta))
}

/// Simulated predictions whose error spread grows with the reported
/// uncertainty by `coupling` in [0, 1]; 0 makes uncertainty uninformative.
pub fn calibration_demo(n: usize, coupling: f64, seed: u64) -> Result<Value, String> {
    if !(0.0..=1.0).contains(&coupling) {
        return Err(format!("coupling {coupling} outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<EvalRecord> = (0..n)
        .map(|i| {
            let u: f64 = rng.gen_range(0.05..1.0);
            let spread = coupling * u + (1.0 - coupling) * 0.5;
            let err = Normal::new(0.0, spread).expect("positive spread").sample(&mut rng);
            EvalRecord {
                sample_id: format!("{i:05}"),
                predicted: 0.5 + err,
                truth: 0.5,
                uncertainty: Some(u),
                peaks: None,
                intervals: None,
                clips: 1,
            }
        })
        .collect();
    let curve = metrics::calibration_curve(&records).map_err(|e| e.to_string())?;
    let tau = metrics::kendall_tau(&curve.mae).map_err(|e| e.to_string())?;
    Ok(json!({ "mean_uncertainty": curve.mean_uncertainty, "mae": curve.mae, "kendall_tau": tau }))
}

#[wasm_bindgen(js_name = calibrationDemo)]
pub fn calibration_demo_js(n: usize, coupling: f64, seed: u32) -> Result<String, JsError> {
    to_js(calibration_demo(n, coupling, seed as u64))
}

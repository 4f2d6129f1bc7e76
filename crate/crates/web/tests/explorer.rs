use lumenforge::designgen::{init_surface, training_box};
use lumenforge::optics::ScenarioKind;
use lumenforge::shsurface::eval_sh_basis;
use lumenforge::surrogate::{design_vector, MlpModel, MlpTopology, Norm};
use lumenforge_web::{basis_image, Explorer};
use serde_json::Value;

fn sphere_model_json(kind: ScenarioKind) -> String {
    let sc = kind.scenario();
    let v = design_vector(kind, &init_surface(&sc));
    let (lo, hi): (Vec<f64>, Vec<f64>) = training_box(kind).into_iter().unzip();
    let mut m =
        MlpModel::zeros(MlpTopology::for_scenario(kind), Norm { min: lo, max: hi }, Norm { min: v.clone(), max: v }).unwrap();
    m.scenario = Some(kind);
    m.order = Some(sc.order);
    m.mask = Some(sc.mask);
    m.to_json().unwrap()
}

#[test]
fn design_reports_profiles_and_extrapolation() {
    let ex = Explorer::from_json(&sphere_model_json(ScenarioKind::LensRect)).unwrap();
    assert_eq!(ex.param_names(), vec!["w", "h", "d"]);
    assert_eq!(ex.training_box().len(), 6);
    let v: Value = serde_json::from_str(&ex.design_json(&[3000.0, 2500.0, 1200.0]).unwrap()).unwrap();
    assert_eq!(v["coeffs"].as_array().unwrap().len(), 36);
    assert_eq!(v["extrapolation"], false);
    let prof = &v["profiles"][1];
    assert_eq!(prof["phi_deg"], 45.0);
    // the base sphere has constant radius
    assert!(prof["r"].as_array().unwrap().iter().all(|r| (r.as_f64().unwrap() - 25.0).abs() < 1e-9));
    let v: Value = serde_json::from_str(&ex.design_json(&[8000.0, 2500.0, 1200.0]).unwrap()).unwrap();
    assert_eq!(v["extrapolation"], true);
    assert!(ex.design_json(&[3000.0, 2500.0]).is_err());
}

#[test]
fn trace_is_normalized_and_seeded() {
    let ex = Explorer::from_json(&sphere_model_json(ScenarioKind::ReflectorOffset)).unwrap();
    let a: Value = serde_json::from_str(&ex.trace_json(&[0.0, 0.0], 20_000, 1).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&ex.trace_json(&[0.0, 0.0], 20_000, 1).unwrap()).unwrap();
    assert_eq!(a, b);
    let vals = a["values"].as_array().unwrap();
    assert_eq!(vals.len(), 81 * 81);
    let mean = vals.iter().map(|v| v.as_f64().unwrap()).sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 1e-9);
    assert!(a["nonuniformity_pct"].as_f64().unwrap() > 0.0);
}

#[test]
fn rejects_bad_model_text() {
    assert!(Explorer::from_json("{}").is_err());
    assert!(Explorer::from_json("not json").is_err());
}

#[test]
fn basis_image_samples_the_harmonic() {
    let img = basis_image(3, -2, 8).unwrap();
    assert_eq!(img.len(), 8 * 16);
    let theta = std::f64::consts::PI * 2.5 / 8.0;
    let phi = 2.0 * std::f64::consts::PI * 5.5 / 16.0;
    let want = eval_sh_basis(3, theta, phi).unwrap()[3 * 3 + 3 - 2];
    assert!((img[2 * 16 + 5] - want).abs() < 1e-12);
    assert!(basis_image(2, 3, 8).is_err());
}

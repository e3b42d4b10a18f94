use lps_lab::functionals::{h_gamma_exact, h_gamma_f};
use lps_lab::model::{CarreMode, ModelSpec};
use lps_lab::quadrature::QuadratureSpec;
use lps_lab::spectral::Symbol;
use lps_lab::{corpus, harness, Instance32, Instance64};

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

#[test]
fn single_precision_tracks_double() {
    for name in ["p16", "grid8x8", "elliptic-contrast"] {
        let a = Instance64::from_gallery(name).unwrap();
        let b = Instance32::from_gallery(name).unwrap();
        let ga = a.gamma(CarreMode::Full).unwrap();
        let gb = b.gamma(CarreMode::Full).unwrap();
        for e in corpus::mixed(&a.model, &a.spectral, 6, 3) {
            let fb = to_f32(&e.f);
            let ra = harness::ratio_31(&a.spectral, &ga, &e.f, 1.5, 1.5, 1.5, 0.25).unwrap();
            let rb = harness::ratio_31(&b.spectral, &gb, &fb, 1.5, 1.5, 1.5, 0.25).unwrap();
            assert!((ra - rb as f64).abs() <= 1e-3 * ra, "{name} {}: {ra} vs {rb}", e.id);

            let ha = h_gamma_exact(&a.spectral, &ga, &e.f).unwrap().norm(&a.spectral.mu, 2.0);
            let hb = h_gamma_exact(&b.spectral, &gb, &fb).unwrap().norm(&b.spectral.mu, 2.0);
            assert!((ha - hb as f64).abs() <= 1e-3 * ha, "{name} {}: {ha} vs {hb}", e.id);
        }
    }
}

#[test]
fn inline_spec_matches_gallery() {
    let spec = ModelSpec::from_json(r#"{"id":"path","grid":{"dims":[16],"bc":"neumann"}}"#).unwrap();
    let inline = Instance64::new(spec.build().unwrap()).unwrap();
    let named = Instance64::from_gallery("p16").unwrap();
    for k in 0..16 {
        assert!((inline.spectral.lambda(k) - named.spectral.lambda(k)).abs() < 1e-12);
    }
}

#[test]
fn quadrature_and_exact_agree_through_public_api() {
    let inst = Instance64::from_gallery("schrodinger-spike").unwrap();
    let gamma = inst.gamma(CarreMode::Full).unwrap();
    let f = &corpus::mixed(&inst.model, &inst.spectral, 1, 9)[0].f;
    let exact = h_gamma_exact(&inst.spectral, &gamma, f).unwrap();
    let quad = h_gamma_f(&inst.spectral, &gamma, &Symbol::Exp, f, &QuadratureSpec::log_gauss(32)).unwrap();
    for (x, y) in exact.values.iter().zip(&quad.values) {
        assert!((x - y).abs() <= 1e-8 * (1.0 + x.abs()));
    }
}

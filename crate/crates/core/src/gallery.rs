//! Bundled models, addressable by name.

use crate::error::{LabError, Result};
use crate::model::{build_generator, CarreMode, CarreOperator, Generator, Model, ModelSpec};
use crate::scalar::Real;
use crate::spectral::{decompose, SpectralDecomposition};

const ENTRIES: &[(&str, &str)] = &[
    ("k2", include_str!("../gallery/k2.json")),
    ("p16", include_str!("../gallery/p16.json")),
    ("p32", include_str!("../gallery/p32.json")),
    ("p64", include_str!("../gallery/p64.json")),
    ("p128", include_str!("../gallery/p128.json")),
    ("p256", include_str!("../gallery/p256.json")),
    ("p512", include_str!("../gallery/p512.json")),
    ("grid8x8", include_str!("../gallery/grid8x8.json")),
    ("grid16x16", include_str!("../gallery/grid16x16.json")),
    ("schrodinger-spike", include_str!("../gallery/schrodinger-spike.json")),
    ("elliptic-contrast", include_str!("../gallery/elliptic-contrast.json")),
];

/// Gallery names in a fixed order.
pub fn names() -> Vec<&'static str> {
    ENTRIES.iter().map(|(n, _)| *n).collect()
}

pub fn spec(name: &str) -> Result<ModelSpec> {
    let key = name.to_ascii_lowercase();
    let (_, text) = ENTRIES
        .iter()
        .find(|(n, _)| *n == key)
        .ok_or_else(|| LabError::validation("model", format!("no gallery model named {name:?}")))?;
    ModelSpec::from_json(text)
}

pub fn load<T: Real>(name: &str) -> Result<Model<T>> {
    spec(name)?.build()
}

/// A model with its generator and spectral decomposition.
#[derive(Debug, Clone)]
pub struct Instance<T> {
    pub model: Model<T>,
    pub generator: Generator<T>,
    pub spectral: SpectralDecomposition<T>,
}

impl<T: Real> Instance<T> {
    pub fn new(model: Model<T>) -> Result<Self> {
        let generator = build_generator(&model)?;
        let spectral = decompose(&generator)?;
        Ok(Instance {
            model,
            generator,
            spectral,
        })
    }

    pub fn from_gallery(name: &str) -> Result<Self> {
        Self::new(load(name)?)
    }

    pub fn gamma(&self, mode: CarreMode) -> Result<CarreOperator<T>> {
        CarreOperator::new(&self.model, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GeneratorKind;

    #[test]
    fn every_entry_loads() {
        for name in names() {
            let inst = Instance::<f64>::from_gallery(name).unwrap();
            assert_eq!(inst.model.id, name);
            assert!(inst.spectral.dim() >= 2);
        }
    }

    #[test]
    fn shapes() {
        let p = Instance::<f64>::from_gallery("P64").unwrap();
        assert_eq!(p.spectral.dim(), 64);
        assert_eq!(p.spectral.kernel_dim, 1);
        let g = Instance::<f64>::from_gallery("grid16x16").unwrap();
        assert_eq!(g.spectral.dim(), 256);
        let s = Instance::<f64>::from_gallery("schrodinger-spike").unwrap();
        assert_eq!(s.generator.kind, GeneratorKind::Schrodinger);
        assert_eq!(s.spectral.kernel_dim, 0);
        let e = Instance::<f64>::from_gallery("elliptic-contrast").unwrap();
        assert_eq!(e.generator.kind, GeneratorKind::DivergenceForm);
        assert_eq!(e.spectral.kernel_dim, 0);
        assert!(load::<f64>("nope").is_err());
    }
}

//! Finite sub-Markovian generators and their carré-du-champ operators.
//!
//! A [`Model`] is a weighted graph with vertex measure `μ`, a killing
//! potential `V ≥ 0` and an optional set of Dirichlet vertices. Dirichlet
//! vertices are removed from the state space; every edge joining an interior
//! vertex `x` to a Dirichlet vertex contributes `w / μ(x)` to the killing rate
//! `b(x)` on the diagonal. The resulting generator acts on interior vertices as
//!
//! ```text
//! (Lf)(x) = (1/μ(x)) Σ_{y interior} w_xy (f(x) − f(y)) + (V(x) + b(x)) f(x)
//! ```
//!
//! which is self-adjoint in `ℓ²(μ)`, has nonpositive off-diagonal entries and
//! nonnegative row sums.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{matvec, symmetric_eigen};
use crate::scalar::Real;

/// Which construction produced a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    GraphLaplacian,
    Schrodinger,
    DivergenceForm,
}

/// Boundary condition for grid models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

/// Edge coefficient field of a divergence-form operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientField {
    Constant(f64),
    /// One value per grid edge, in [`GridSpec`] edge order.
    PerEdge(Vec<f64>),
    /// `split[0]` on edges whose midpoint lies in the lower half of the first
    /// axis, `split[1]` on the upper half.
    Split { split: [f64; 2] },
}

/// Rectangular grid shorthand.
///
/// Vertices are the `dims[0]` (× `dims[1]`) grid nodes indexed `x + nx·y`.
/// With Dirichlet conditions one ghost vertex is appended beyond each face
/// node and marked killed. Edges are listed row by row: horizontal edges left
/// to right for each `y`, then vertical edges bottom to top for each `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: Vec<usize>,
    #[serde(default = "unit_coefficient")]
    pub coeff: CoefficientField,
    pub bc: BoundaryCondition,
    #[serde(default = "unit_spacing")]
    pub spacing: f64,
}

fn unit_coefficient() -> CoefficientField {
    CoefficientField::Constant(1.0)
}

fn unit_spacing() -> f64 {
    1.0
}

/// JSON form of a model: either explicit or grid shorthand. Objects with a
/// `grid` key are read as grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, try_from = "serde_json::Value")]
pub enum ModelSpec {
    Grid {
        #[serde(default)]
        id: Option<String>,
        grid: GridSpec,
        #[serde(default)]
        potential: Option<Vec<f64>>,
    },
    Explicit {
        #[serde(default)]
        id: Option<String>,
        n: usize,
        #[serde(default)]
        mu: Option<Vec<f64>>,
        #[serde(default)]
        edges: Vec<(usize, usize, f64)>,
        #[serde(default)]
        potential: Option<Vec<f64>>,
        #[serde(default)]
        dirichlet: Vec<usize>,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRepr {
    #[serde(default)]
    id: Option<String>,
    grid: GridSpec,
    #[serde(default)]
    potential: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplicitRepr {
    #[serde(default)]
    id: Option<String>,
    n: usize,
    #[serde(default)]
    mu: Option<Vec<f64>>,
    #[serde(default)]
    edges: Vec<(usize, usize, f64)>,
    #[serde(default)]
    potential: Option<Vec<f64>>,
    #[serde(default)]
    dirichlet: Vec<usize>,
}

impl TryFrom<serde_json::Value> for ModelSpec {
    type Error = String;

    fn try_from(v: serde_json::Value) -> std::result::Result<Self, String> {
        if v.get("grid").is_some() {
            let g: GridRepr = serde_json::from_value(v).map_err(|e| e.to_string())?;
            Ok(ModelSpec::Grid {
                id: g.id,
                grid: g.grid,
                potential: g.potential,
            })
        } else {
            let e: ExplicitRepr = serde_json::from_value(v).map_err(|e| e.to_string())?;
            Ok(ModelSpec::Explicit {
                id: e.id,
                n: e.n,
                mu: e.mu,
                edges: e.edges,
                potential: e.potential,
                dirichlet: e.dirichlet,
            })
        }
    }
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Input(e.to_string()))
    }

    pub fn build<T: Real>(&self) -> Result<Model<T>> {
        match self {
            ModelSpec::Explicit {
                id,
                n,
                mu,
                edges,
                potential,
                dirichlet,
            } => {
                let mu = mu.clone().unwrap_or_else(|| vec![1.0; *n]);
                let potential = potential.clone().unwrap_or_else(|| vec![0.0; *n]);
                let kind = if potential.iter().any(|&v| v != 0.0) {
                    GeneratorKind::Schrodinger
                } else {
                    GeneratorKind::GraphLaplacian
                };
                let mut model = Model::new(
                    *n,
                    crate::scalar::cast_vec(&mu),
                    edges
                        .iter()
                        .map(|&(u, v, w)| (u, v, T::lit(w)))
                        .collect(),
                    crate::scalar::cast_vec(&potential),
                    dirichlet.clone(),
                )?;
                model.kind = kind;
                model.id = id.clone().unwrap_or_else(|| "model".to_string());
                Ok(model)
            }
            ModelSpec::Grid {
                id,
                grid,
                potential,
            } => {
                let mut model = grid_model::<T>(grid)?;
                if let Some(v) = potential {
                    let interior = grid.dims.iter().product::<usize>();
                    if v.len() != interior {
                        return Err(LabError::validation(
                            "potential",
                            format!("expected {interior} grid values, got {}", v.len()),
                        ));
                    }
                    for (x, &vx) in v.iter().enumerate() {
                        model.potential[x] = T::lit(vx);
                    }
                    model.validate()?;
                    if v.iter().any(|&vx| vx != 0.0) {
                        model.kind = GeneratorKind::Schrodinger;
                    }
                }
                if let Some(id) = id {
                    model.id = id.clone();
                }
                Ok(model)
            }
        }
    }
}

/// A finite weighted graph with measure, potential and Dirichlet set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub id: String,
    pub n: usize,
    pub mu: Vec<T>,
    pub edges: Vec<(usize, usize, T)>,
    pub potential: Vec<T>,
    /// Sorted, deduplicated Dirichlet vertices.
    pub dirichlet: Vec<usize>,
    pub kind: GeneratorKind,
    /// Ellipticity constant, recorded for divergence-form models.
    pub ellipticity: Option<T>,
}

impl<T: Real> Model<T> {
    pub fn new(
        n: usize,
        mu: Vec<T>,
        edges: Vec<(usize, usize, T)>,
        potential: Vec<T>,
        dirichlet: Vec<usize>,
    ) -> Result<Self> {
        let dirichlet: Vec<usize> = dirichlet
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let model = Model {
            id: "model".to_string(),
            n,
            mu,
            edges,
            potential,
            dirichlet,
            kind: GeneratorKind::GraphLaplacian,
            ellipticity: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Path `0 - 1 - … - (n−1)` with unit weights and measure.
    pub fn path(n: usize) -> Result<Self> {
        let edges = (1..n).map(|i| (i - 1, i, T::one())).collect();
        let mut m = Model::new(n, vec![T::one(); n], edges, vec![T::zero(); n], vec![])?;
        m.id = format!("P{n}");
        Ok(m)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if self.mu.len() != n {
            return Err(LabError::validation(
                "mu",
                format!("expected {n} entries, got {}", self.mu.len()),
            ));
        }
        if self.potential.len() != n {
            return Err(LabError::validation(
                "potential",
                format!("expected {n} entries, got {}", self.potential.len()),
            ));
        }
        if let Some(x) = self.mu.iter().position(|&m| !(m > T::zero() && m.is_finite())) {
            return Err(LabError::validation(
                "mu",
                format!("measure at vertex {x} must be positive and finite"),
            ));
        }
        if let Some(x) = self
            .potential
            .iter()
            .position(|&v| !(v >= T::zero() && v.is_finite()))
        {
            return Err(LabError::validation(
                "potential",
                format!("potential at vertex {x} must be nonnegative and finite"),
            ));
        }
        let mut seen = BTreeSet::new();
        for (k, &(u, v, w)) in self.edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(LabError::validation(
                    "edges",
                    format!("edge {k} references a vertex outside 0..{n}"),
                ));
            }
            if u == v {
                return Err(LabError::validation(
                    "edges",
                    format!("edge {k} is a self-loop at vertex {u}"),
                ));
            }
            if !(w > T::zero() && w.is_finite()) {
                return Err(LabError::validation(
                    "edges",
                    format!("edge {k} has nonpositive weight"),
                ));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(LabError::validation(
                    "edges",
                    format!("duplicate edge {{{u}, {v}}}"),
                ));
            }
        }
        if let Some(&x) = self.dirichlet.iter().find(|&&x| x >= n) {
            return Err(LabError::validation(
                "dirichlet",
                format!("vertex {x} outside 0..{n}"),
            ));
        }
        if self.dirichlet.len() >= n {
            return Err(LabError::validation(
                "dirichlet",
                "interior vertex set is empty",
            ));
        }
        let killed = self.killed_mask();
        let mut touches_interior = vec![false; n];
        for &(u, v, _) in &self.edges {
            if !killed[u] {
                touches_interior[v] = true;
            }
            if !killed[v] {
                touches_interior[u] = true;
            }
        }
        let orphans: Vec<usize> = self
            .dirichlet
            .iter()
            .copied()
            .filter(|&x| !touches_interior[x])
            .collect();
        if !orphans.is_empty() {
            return Err(LabError::DisconnectedFromInterior(orphans));
        }
        Ok(())
    }

    fn killed_mask(&self) -> Vec<bool> {
        let mut killed = vec![false; self.n];
        for &x in &self.dirichlet {
            killed[x] = true;
        }
        killed
    }

    /// Original vertex ids of the interior, in state-space order.
    pub fn interior(&self) -> Vec<usize> {
        let killed = self.killed_mask();
        (0..self.n).filter(|&x| !killed[x]).collect()
    }

    /// Map from original vertex id to interior index.
    pub(crate) fn interior_index(&self) -> Vec<Option<usize>> {
        let mut idx = vec![None; self.n];
        for (i, x) in self.interior().into_iter().enumerate() {
            idx[x] = Some(i);
        }
        idx
    }

    /// Killing rate `b(x) = Σ_{y Dirichlet} w_xy / μ(x)` on interior vertices.
    pub fn boundary_killing(&self) -> Vec<T> {
        let idx = self.interior_index();
        let interior = self.interior();
        let mut b = vec![T::zero(); interior.len()];
        for &(u, v, w) in &self.edges {
            match (idx[u], idx[v]) {
                (Some(i), None) => b[i] += w / self.mu[u],
                (None, Some(j)) => b[j] += w / self.mu[v],
                _ => {}
            }
        }
        b
    }

    /// True when there is neither a potential nor a Dirichlet boundary.
    pub fn is_conservative(&self) -> bool {
        self.dirichlet.is_empty() && self.potential.iter().all(|&v| v == T::zero())
    }
}

fn grid_model<T: Real>(grid: &GridSpec) -> Result<Model<T>> {
    let dims = &grid.dims;
    if dims.is_empty() || dims.len() > 2 || dims.iter().any(|&d| d == 0) {
        return Err(LabError::validation(
            "grid.dims",
            "expected one or two positive extents",
        ));
    }
    if !(grid.spacing > 0.0 && grid.spacing.is_finite()) {
        return Err(LabError::validation("grid.spacing", "must be positive"));
    }
    let nx = dims[0];
    let ny = if dims.len() == 2 { dims[1] } else { 1 };
    let interior = nx * ny;
    let dirichlet = grid.bc == BoundaryCondition::Dirichlet;

    // (u, v, midpoint along axis 0)
    let mut raw: Vec<(usize, usize, f64)> = Vec::new();
    let mut ghosts = 0usize;
    let ghost = |ghosts: &mut usize| {
        let id = interior + *ghosts;
        *ghosts += 1;
        id
    };
    for y in 0..ny {
        let row = y * nx;
        if dirichlet {
            let g = ghost(&mut ghosts);
            raw.push((g, row, -0.5));
        }
        for x in 1..nx {
            raw.push((row + x - 1, row + x, x as f64 - 0.5));
        }
        if dirichlet {
            let g = ghost(&mut ghosts);
            raw.push((row + nx - 1, g, nx as f64 - 0.5));
        }
    }
    if dims.len() == 2 {
        for x in 0..nx {
            if dirichlet {
                let g = ghost(&mut ghosts);
                raw.push((g, x, x as f64));
            }
            for y in 1..ny {
                raw.push(((y - 1) * nx + x, y * nx + x, x as f64));
            }
            if dirichlet {
                let g = ghost(&mut ghosts);
                raw.push(((ny - 1) * nx + x, g, x as f64));
            }
        }
    }

    let coeffs: Vec<f64> = match &grid.coeff {
        CoefficientField::Constant(c) => vec![*c; raw.len()],
        CoefficientField::PerEdge(values) => {
            if values.len() != raw.len() {
                return Err(LabError::validation(
                    "grid.coeff",
                    format!("expected {} edge values, got {}", raw.len(), values.len()),
                ));
            }
            values.clone()
        }
        CoefficientField::Split { split } => {
            let half = nx as f64 / 2.0 - 0.5;
            raw.iter()
                .map(|&(_, _, mid)| if mid < half { split[0] } else { split[1] })
                .collect()
        }
    };
    if let Some(k) = coeffs.iter().position(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(LabError::validation(
            "grid.coeff",
            format!("coefficient on edge {k} must be positive"),
        ));
    }
    let eta = coeffs.iter().copied().fold(f64::INFINITY, f64::min);
    let h2 = grid.spacing * grid.spacing;
    let n = interior + ghosts;
    let edges = raw
        .iter()
        .zip(&coeffs)
        .map(|(&(u, v, _), &a)| (u, v, T::lit(a / h2)))
        .collect();
    let mut model = Model::new(
        n,
        vec![T::one(); n],
        edges,
        vec![T::zero(); n],
        (interior..n).collect(),
    )?;
    model.kind = GeneratorKind::DivergenceForm;
    model.ellipticity = Some(T::lit(eta));
    model.id = match dims.len() {
        1 => format!("grid{nx}-{}", bc_tag(grid.bc)),
        _ => format!("grid{nx}x{ny}-{}", bc_tag(grid.bc)),
    };
    Ok(model)
}

fn bc_tag(bc: BoundaryCondition) -> &'static str {
    match bc {
        BoundaryCondition::Dirichlet => "dirichlet",
        BoundaryCondition::Neumann => "neumann",
    }
}

/// The matrix of `L` on interior vertices.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub matrix: Array2<T>,
    pub mu: Vec<T>,
    pub kind: GeneratorKind,
    /// Original vertex ids of the rows.
    pub vertices: Vec<usize>,
    pub ellipticity: Option<T>,
}

impl<T: Real> Generator<T> {
    /// Wraps a raw matrix (e.g. for validating external data).
    pub fn from_matrix(matrix: Array2<T>, mu: Vec<T>, kind: GeneratorKind) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() != mu.len() {
            return Err(LabError::Shape {
                expected: mu.len(),
                got: matrix.nrows(),
            });
        }
        let vertices = (0..mu.len()).collect();
        Ok(Generator {
            matrix,
            mu,
            kind,
            vertices,
            ellipticity: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn apply(&self, f: &[T]) -> Vec<T> {
        matvec(&self.matrix, f)
    }

    /// `⟨Lf, f⟩_μ`.
    pub fn energy(&self, f: &[T]) -> T {
        let lf = self.apply(f);
        crate::linalg::weighted_dot(&lf, f, &self.mu)
    }
}

fn assemble<T: Real>(model: &Model<T>, kind: GeneratorKind) -> Result<Generator<T>> {
    model.validate()?;
    let idx = model.interior_index();
    let vertices = model.interior();
    let m = vertices.len();
    let mut a = Array2::<T>::zeros((m, m));
    for &(u, v, w) in &model.edges {
        match (idx[u], idx[v]) {
            (Some(i), Some(j)) => {
                a[[i, i]] += w / model.mu[u];
                a[[i, j]] -= w / model.mu[u];
                a[[j, j]] += w / model.mu[v];
                a[[j, i]] -= w / model.mu[v];
            }
            (Some(i), None) => a[[i, i]] += w / model.mu[u],
            (None, Some(j)) => a[[j, j]] += w / model.mu[v],
            (None, None) => {}
        }
    }
    for (i, &x) in vertices.iter().enumerate() {
        a[[i, i]] += model.potential[x];
    }
    Ok(Generator {
        matrix: a,
        mu: vertices.iter().map(|&x| model.mu[x]).collect(),
        kind,
        vertices,
        ellipticity: model.ellipticity,
    })
}

/// Assembles the generator of the model, potential and boundary included.
pub fn build_graph_laplacian<T: Real>(model: &Model<T>) -> Result<Generator<T>> {
    let kind = match model.kind {
        GeneratorKind::DivergenceForm => GeneratorKind::DivergenceForm,
        _ => GeneratorKind::GraphLaplacian,
    };
    assemble(model, kind)
}

/// Assembles the generator with the kind recorded on the model.
pub fn build_generator<T: Real>(model: &Model<T>) -> Result<Generator<T>> {
    let kind = if model.kind == GeneratorKind::DivergenceForm {
        GeneratorKind::DivergenceForm
    } else if model.potential.iter().any(|&v| v != T::zero()) {
        GeneratorKind::Schrodinger
    } else {
        GeneratorKind::GraphLaplacian
    };
    assemble(model, kind)
}

/// Attaches the potential `v` to the model and assembles `Δ + V`.
pub fn build_schrodinger<T: Real>(model: &Model<T>, v: &[T]) -> Result<Generator<T>> {
    if v.len() != model.n {
        return Err(LabError::Shape {
            expected: model.n,
            got: v.len(),
        });
    }
    if let Some(x) = v.iter().position(|&vx| !(vx >= T::zero() && vx.is_finite())) {
        return Err(LabError::validation(
            "potential",
            format!("negative or non-finite entry at vertex {x}"),
        ));
    }
    let mut with_v = model.clone();
    with_v.potential = v.to_vec();
    assemble(&with_v, GeneratorKind::Schrodinger)
}

/// Finite-difference `−div(A∇)` on a grid.
pub fn build_divergence_form<T: Real>(grid: &GridSpec) -> Result<(Model<T>, Generator<T>)> {
    let model = grid_model::<T>(grid)?;
    let gen = assemble(&model, GeneratorKind::DivergenceForm)?;
    Ok((model, gen))
}

/// Which channels make up `Γf(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CarreMode {
    GradientOnly,
    PotentialOnly,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Channel<T> {
    coeff: T,
    /// Neighbour for an edge channel, `None` for the killing channel.
    other: Option<usize>,
}

/// Carré-du-champ operator `f ↦ Γf(x) ∈ K_x`.
///
/// Edge channels at `x` are `√(w_xy / 2μ(x)) (f(x) − f(y))`, one per interior
/// neighbour; the killing channel is `√(V(x) + b(x)) f(x)`. With this
/// normalisation `Σ_x μ(x)|Γf|(x)² = ⟨Lf, f⟩_μ` in full mode.
#[derive(Debug, Clone)]
pub struct CarreOperator<T> {
    pub mode: CarreMode,
    mu: Vec<T>,
    channels: Vec<Channel<T>>,
    /// `offsets[x]..offsets[x+1]` are the channels of vertex `x`.
    offsets: Vec<usize>,
}

/// Channel values of `Γf` together with the per-vertex modulus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarreField<T> {
    pub channels: Vec<T>,
    pub offsets: Vec<usize>,
    pub modulus: Vec<T>,
}

impl<T: Real> CarreField<T> {
    pub fn at(&self, x: usize) -> &[T] {
        &self.channels[self.offsets[x]..self.offsets[x + 1]]
    }
}

impl<T: Real> CarreOperator<T> {
    pub fn new(model: &Model<T>, mode: CarreMode) -> Result<Self> {
        model.validate()?;
        let idx = model.interior_index();
        let vertices = model.interior();
        let m = vertices.len();
        let two = T::lit(2.0);
        let mut per_vertex: Vec<Vec<Channel<T>>> = vec![Vec::new(); m];
        if mode != CarreMode::PotentialOnly {
            for &(u, v, w) in &model.edges {
                if let (Some(i), Some(j)) = (idx[u], idx[v]) {
                    per_vertex[i].push(Channel {
                        coeff: (w / (two * model.mu[u])).sqrt(),
                        other: Some(j),
                    });
                    per_vertex[j].push(Channel {
                        coeff: (w / (two * model.mu[v])).sqrt(),
                        other: Some(i),
                    });
                }
            }
        }
        if mode != CarreMode::GradientOnly {
            let b = model.boundary_killing();
            for (i, &x) in vertices.iter().enumerate() {
                let rate = model.potential[x] + b[i];
                if rate > T::zero() {
                    per_vertex[i].push(Channel {
                        coeff: rate.sqrt(),
                        other: None,
                    });
                }
            }
        }
        let mut offsets = Vec::with_capacity(m + 1);
        let mut channels = Vec::new();
        offsets.push(0);
        for list in per_vertex {
            channels.extend(list);
            offsets.push(channels.len());
        }
        Ok(CarreOperator {
            mode,
            mu: vertices.iter().map(|&x| model.mu[x]).collect(),
            channels,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Vertex owning each channel.
    pub fn channel_vertex(&self) -> Vec<usize> {
        let mut owner = vec![0; self.channels.len()];
        for x in 0..self.dim() {
            for c in &mut owner[self.offsets[x]..self.offsets[x + 1]] {
                *c = x;
            }
        }
        owner
    }

    fn check_len(&self, f: &[T]) -> Result<()> {
        if f.len() != self.dim() {
            return Err(LabError::Shape {
                expected: self.dim(),
                got: f.len(),
            });
        }
        Ok(())
    }

    /// Flat channel values of `Γf`. Panics on a length mismatch.
    pub fn channels_of(&self, f: &[T]) -> Vec<T> {
        assert_eq!(f.len(), self.dim(), "vector length must match the state space");
        let mut out = vec![T::zero(); self.channels.len()];
        for x in 0..self.dim() {
            for c in self.offsets[x]..self.offsets[x + 1] {
                let ch = self.channels[c];
                out[c] = match ch.other {
                    Some(y) => ch.coeff * (f[x] - f[y]),
                    None => ch.coeff * f[x],
                };
            }
        }
        out
    }

    /// `|g|(x)` for a flat channel field `g`.
    pub fn modulus_of_field(&self, field: &[T]) -> Vec<T> {
        self.modulus_sq_of_field(field)
            .into_iter()
            .map(|s| s.sqrt())
            .collect()
    }

    pub fn modulus_sq_of_field(&self, field: &[T]) -> Vec<T> {
        (0..self.dim())
            .map(|x| {
                field[self.offsets[x]..self.offsets[x + 1]]
                    .iter()
                    .map(|&v| v * v)
                    .sum()
            })
            .collect()
    }

    /// `|Γf|(x)²` per vertex.
    pub fn modulus_sq(&self, f: &[T]) -> Vec<T> {
        self.modulus_sq_of_field(&self.channels_of(f))
    }

    /// All channel values and the modulus `|Γf|(x)`.
    pub fn carre(&self, f: &[T]) -> Result<CarreField<T>> {
        self.check_len(f)?;
        let channels = self.channels_of(f);
        let modulus = self.modulus_of_field(&channels);
        Ok(CarreField {
            channels,
            offsets: self.offsets.clone(),
            modulus,
        })
    }

    /// `‖Γf‖_{p,μ}`.
    pub fn norm(&self, f: &[T], p: T) -> T {
        let m: Vec<T> = self.modulus_sq(f).into_iter().map(|s| s.sqrt()).collect();
        crate::linalg::weighted_norm(&m, &self.mu, p)
    }

    /// `Σ_x μ(x)|Γf|(x)²`.
    pub fn energy(&self, f: &[T]) -> T {
        self.modulus_sq(f)
            .iter()
            .zip(&self.mu)
            .map(|(&s, &m)| s * m)
            .sum()
    }

    /// Dense `channels × n` matrix of the linear map `f ↦ Γf`.
    pub fn channel_matrix(&self) -> Array2<T> {
        let mut a = Array2::zeros((self.channels.len(), self.dim()));
        for x in 0..self.dim() {
            for c in self.offsets[x]..self.offsets[x + 1] {
                let ch = self.channels[c];
                a[[c, x]] += ch.coeff;
                if let Some(y) = ch.other {
                    a[[c, y]] -= ch.coeff;
                }
            }
        }
        a
    }

    /// Channels touched by a unit perturbation at vertex `i`: `(channel, dΓ)`.
    pub fn unit_response(&self, i: usize) -> Vec<(usize, T)> {
        let mut out = Vec::new();
        for c in self.offsets[i]..self.offsets[i + 1] {
            out.push((c, self.channels[c].coeff));
        }
        for x in 0..self.dim() {
            if x == i {
                continue;
            }
            for c in self.offsets[x]..self.offsets[x + 1] {
                if self.channels[c].other == Some(i) {
                    out.push((c, -self.channels[c].coeff));
                }
            }
        }
        out
    }
}

/// Outcome of [`verify_submarkov`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubMarkovReport {
    pub mu_self_adjoint: bool,
    pub worst_asymmetry: f64,
    pub off_diagonal_nonpositive: bool,
    pub worst_positive_off_diagonal: f64,
    pub row_sums_nonnegative: bool,
    pub worst_negative_row_sum: f64,
    pub positive_semidefinite: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub passes: bool,
}

/// Checks the matrix conditions that make `e^{−tL}` sub-Markovian.
pub fn verify_submarkov<T: Real>(gen: &Generator<T>) -> SubMarkovReport {
    let n = gen.dim();
    let a = &gen.matrix;
    let mu = &gen.mu;
    let scale = a.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let scale = if scale > T::zero() { scale } else { T::one() };
    let mu_max = mu.iter().fold(T::zero(), |m, &x| m.max(x));

    let mut asym = T::zero();
    let mut pos_off = T::zero();
    let mut neg_row = T::zero();
    for i in 0..n {
        let mut row = T::zero();
        for j in 0..n {
            row += a[[i, j]];
            if i != j {
                pos_off = pos_off.max(a[[i, j]]);
                asym = asym.max((mu[i] * a[[i, j]] - mu[j] * a[[j, i]]).abs());
            }
        }
        neg_row = neg_row.max(-row);
    }
    let asym_rel = asym / (scale * mu_max);

    // μ-similarity to a symmetric matrix; symmetrise what remains.
    let mut s = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            s[[i, j]] = mu[i].sqrt() * a[[i, j]] / mu[j].sqrt();
        }
    }
    let half = T::lit(0.5);
    let sym = (&s + &s.t()) * half;
    let (lmin, lmax) = match symmetric_eigen(sym.view()) {
        Ok(eig) if n > 0 => (eig.values[0], eig.values[n - 1]),
        _ => (T::nan(), T::nan()),
    };

    let self_adj = asym_rel <= T::tol(1e-12);
    let off_ok = pos_off <= T::zero();
    let row_ok = neg_row <= T::tol(1e-12) * scale;
    let psd = lmin >= -T::tol(1e-10) * lmax.abs().max(T::min_positive_value());
    SubMarkovReport {
        mu_self_adjoint: self_adj,
        worst_asymmetry: asym_rel.as_f64(),
        off_diagonal_nonpositive: off_ok,
        worst_positive_off_diagonal: pos_off.as_f64(),
        row_sums_nonnegative: row_ok,
        worst_negative_row_sum: neg_row.max(T::zero()).as_f64(),
        positive_semidefinite: psd,
        min_eigenvalue: lmin.as_f64(),
        max_eigenvalue: lmax.as_f64(),
        passes: self_adj && off_ok && row_ok && psd,
    }
}

/// Result of [`measure_alpha_p`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaMeasurement<T> {
    pub p: T,
    /// Largest `α_p` consistent with every sampled vertex.
    pub alpha: T,
    pub witness_entry: usize,
    pub witness_vertex: usize,
    /// Corpus entries with at least one active vertex.
    pub active_vertices: usize,
}

/// Empirical constant in `L(f^p) ≤ p f^{p−1} Lf − α_p f^{p−2}|Γf|²`.
///
/// Vertices where `|Γf|(x)²` is below `ε^{1/3} f(x)²` times the local edge
/// scale are skipped: there the numerator is dominated by cancellation.
pub fn measure_alpha_p<T: Real>(
    gen: &Generator<T>,
    gamma: &CarreOperator<T>,
    p: T,
    corpus: &[Vec<T>],
) -> Result<AlphaMeasurement<T>> {
    if !(p > T::one() && p <= T::lit(2.0)) {
        return Err(LabError::validation("p", "must lie in (1, 2]"));
    }
    if corpus.is_empty() {
        return Err(LabError::validation("corpus", "empty"));
    }
    let n = gen.dim();
    for (k, f) in corpus.iter().enumerate() {
        if f.len() != n {
            return Err(LabError::Shape {
                expected: n,
                got: f.len(),
            });
        }
        if let Some(x) = f.iter().position(|&v| !(v > T::zero())) {
            return Err(LabError::validation(
                "corpus",
                format!("entry {k} is not strictly positive at vertex {x}"),
            ));
        }
    }
    let coeff_sq: Vec<T> = (0..n)
        .map(|x| {
            gamma.channels[gamma.offsets[x]..gamma.offsets[x + 1]]
                .iter()
                .map(|c| c.coeff * c.coeff)
                .sum()
        })
        .collect();
    let per_entry: Vec<Option<(T, usize)>> = corpus
        .par_iter()
        .map(|f| {
            let fp: Vec<T> = f.iter().map(|&v| v.powf(p)).collect();
            let lf = gen.apply(f);
            let lfp = gen.apply(&fp);
            let g2 = gamma.modulus_sq(f);
            let floor = T::epsilon().cbrt();
            let mut best: Option<(T, usize)> = None;
            for x in 0..n {
                if g2[x] <= floor * f[x] * f[x] * coeff_sq[x] {
                    continue;
                }
                let num = p * f[x].powf(p - T::one()) * lf[x] - lfp[x];
                let den = f[x].powf(p - T::lit(2.0)) * g2[x];
                let r = num / den;
                if best.is_none_or(|(b, _)| r < b) {
                    best = Some((r, x));
                }
            }
            best
        })
        .collect();
    let mut out: Option<AlphaMeasurement<T>> = None;
    let mut active = 0usize;
    for (k, entry) in per_entry.into_iter().enumerate() {
        if let Some((r, x)) = entry {
            active += 1;
            if out.as_ref().is_none_or(|cur| r < cur.alpha) {
                out = Some(AlphaMeasurement {
                    p,
                    alpha: r,
                    witness_entry: k,
                    witness_vertex: x,
                    active_vertices: 0,
                });
            }
        }
    }
    match out {
        Some(mut m) => {
            m.active_vertices = active;
            Ok(m)
        }
        None => Err(LabError::NoActiveVertex),
    }
}

/// `Σ_x μ(x) L(f^p)(x)`, which is nonnegative for sub-Markov generators.
pub fn check_2_2bis<T: Real>(gen: &Generator<T>, f: &[T], p: T) -> Result<T> {
    if f.len() != gen.dim() {
        return Err(LabError::Shape {
            expected: gen.dim(),
            got: f.len(),
        });
    }
    if let Some(x) = f.iter().position(|&v| !(v >= T::zero())) {
        return Err(LabError::validation(
            "f",
            format!("must be nonnegative (vertex {x})"),
        ));
    }
    let fp: Vec<T> = f.iter().map(|&v| v.powf(p)).collect();
    let lfp = gen.apply(&fp);
    Ok(lfp.iter().zip(&gen.mu).map(|(&v, &m)| v * m).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn k2() -> Model<f64> {
        Model::path(2).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn two_vertex_path_laplacian() {
        let gen = build_graph_laplacian(&k2()).unwrap();
        assert_eq!(gen.matrix, array![[1.0, -1.0], [-1.0, 1.0]]);
    }

    #[test]
    fn pure_killing_single_vertex() {
        let m = Model::new(1, vec![1.0], vec![], vec![3.0], vec![]).unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        assert_eq!(gen.matrix, array![[3.0]]);
    }

    #[test]
    fn dirichlet_endpoints_eliminated() {
        let m = Model::new(
            3,
            vec![1.0; 3],
            vec![(0, 1, 1.0), (1, 2, 1.0)],
            vec![0.0; 3],
            vec![0, 2],
        )
        .unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        assert_eq!(gen.matrix, array![[2.0]]);
        assert_eq!(gen.vertices, vec![1]);
    }

    #[test]
    fn schrodinger_additive_diagonal() {
        let gen = build_schrodinger(&k2(), &[1.0, 0.0]).unwrap();
        assert_eq!(gen.matrix, array![[2.0, -1.0], [-1.0, 1.0]]);
        let zero = build_schrodinger(&k2(), &[0.0, 0.0]).unwrap();
        assert_eq!(zero.matrix, build_graph_laplacian(&k2()).unwrap().matrix);
        assert_eq!(zero.kind, GeneratorKind::Schrodinger);
        let err = build_schrodinger(&k2(), &[-1.0, 0.0]).unwrap_err();
        assert!(matches!(err, LabError::Validation { .. }));
    }

    #[test]
    fn schrodinger_eigenvalues() {
        let gen = build_schrodinger(&k2(), &[1.0, 0.0]).unwrap();
        let eig = symmetric_eigen(gen.matrix.view()).unwrap();
        let s5 = 5f64.sqrt();
        assert!(close(eig.values[0], (3.0 - s5) / 2.0, 1e-14));
        assert!(close(eig.values[1], (3.0 + s5) / 2.0, 1e-14));
    }

    #[test]
    fn divergence_form_examples() {
        let grid = |coeff: f64, bc| GridSpec {
            dims: vec![4],
            coeff: CoefficientField::Constant(coeff),
            bc,
            spacing: 1.0,
        };
        let (_, neumann) = build_divergence_form::<f64>(&grid(1.0, BoundaryCondition::Neumann)).unwrap();
        let path = build_graph_laplacian(&Model::<f64>::path(4).unwrap()).unwrap();
        assert_eq!(neumann.matrix, path.matrix);
        let (_, scaled) = build_divergence_form::<f64>(&grid(2.5, BoundaryCondition::Neumann)).unwrap();
        assert_eq!(scaled.matrix, &path.matrix * 2.5);
        assert_eq!(scaled.ellipticity, Some(2.5));

        let (_, dir) = build_divergence_form::<f64>(&GridSpec {
            dims: vec![3],
            coeff: CoefficientField::Constant(1.0),
            bc: BoundaryCondition::Dirichlet,
            spacing: 1.0,
        })
        .unwrap();
        assert_eq!(
            dir.matrix,
            array![[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]]
        );
        let bad = GridSpec {
            dims: vec![3],
            coeff: CoefficientField::Constant(0.0),
            bc: BoundaryCondition::Neumann,
            spacing: 1.0,
        };
        assert!(build_divergence_form::<f64>(&bad).is_err());
    }

    #[test]
    fn two_dimensional_dirichlet_grid() {
        let (_, gen) = build_divergence_form::<f64>(&GridSpec {
            dims: vec![2, 2],
            coeff: CoefficientField::Constant(1.0),
            bc: BoundaryCondition::Dirichlet,
            spacing: 1.0,
        })
        .unwrap();
        // each interior node: 2 grid neighbours + 2 ghosts
        for i in 0..4 {
            assert_eq!(gen.matrix[[i, i]], 4.0);
        }
        assert!(verify_submarkov(&gen).passes);
    }

    #[test]
    fn split_coefficients() {
        let (model, _) = build_divergence_form::<f64>(&GridSpec {
            dims: vec![4],
            coeff: CoefficientField::Split { split: [1.0, 100.0] },
            bc: BoundaryCondition::Neumann,
            spacing: 1.0,
        })
        .unwrap();
        let w: Vec<f64> = model.edges.iter().map(|e| e.2).collect();
        assert_eq!(w, vec![1.0, 100.0, 100.0]);
        assert_eq!(model.ellipticity, Some(1.0));
    }

    #[test]
    fn validation_errors() {
        assert!(Model::new(2, vec![1.0, -1.0], vec![], vec![0.0; 2], vec![]).is_err());
        assert!(Model::new(2, vec![1.0; 2], vec![(0, 1, -1.0)], vec![0.0; 2], vec![]).is_err());
        assert!(Model::new(2, vec![1.0; 2], vec![(0, 0, 1.0)], vec![0.0; 2], vec![]).is_err());
        assert!(Model::new(
            2,
            vec![1.0; 2],
            vec![(0, 1, 1.0), (1, 0, 1.0)],
            vec![0.0; 2],
            vec![]
        )
        .is_err());
        assert!(Model::new(2, vec![1.0; 2], vec![(0, 1, 1.0)], vec![0.0; 2], vec![0, 1]).is_err());
        let orphan = Model::new(
            3,
            vec![1.0; 3],
            vec![(0, 1, 1.0)],
            vec![0.0; 3],
            vec![2],
        )
        .unwrap_err();
        assert_eq!(orphan, LabError::DisconnectedFromInterior(vec![2]));
    }

    #[test]
    fn carre_examples() {
        let m = k2();
        let gen = build_graph_laplacian(&m).unwrap();
        let grad = CarreOperator::new(&m, CarreMode::GradientOnly).unwrap();
        let field = grad.carre(&[1.0, -1.0]).unwrap();
        for x in 0..2 {
            assert!(close(field.modulus[x], 2f64.sqrt(), 1e-15));
        }
        assert!(close(grad.energy(&[1.0, -1.0]), 4.0, 1e-15));
        assert!(close(gen.energy(&[1.0, -1.0]), 4.0, 1e-15));
        let c = grad.carre(&[0.7, 0.7]).unwrap();
        assert!(c.modulus.iter().all(|&v| v == 0.0));

        let mv = Model::new(2, vec![1.0; 2], vec![(0, 1, 1.0)], vec![4.0, 9.0], vec![]).unwrap();
        let pot = CarreOperator::new(&mv, CarreMode::PotentialOnly).unwrap();
        let f = [0.3, -1.5];
        let m = pot.carre(&f).unwrap().modulus;
        assert!(close(m[0], 2.0 * 0.3, 1e-15));
        assert!(close(m[1], 3.0 * 1.5, 1e-15));
        assert!(pot.carre(&[1.0]).is_err());
    }

    #[test]
    fn carre_energy_with_boundary_and_measure() {
        let m = Model::new(
            4,
            vec![0.5, 2.0, 1.5, 1.0],
            vec![(0, 1, 1.0), (1, 2, 3.0), (2, 3, 0.5), (0, 2, 2.0)],
            vec![0.0, 0.7, 0.0, 0.0],
            vec![3],
        )
        .unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        let full = CarreOperator::new(&m, CarreMode::Full).unwrap();
        let f = [0.4, -1.1, 2.3];
        let e = gen.energy(&f);
        assert!(close(full.energy(&f), e, 1e-13));
        let g = CarreOperator::new(&m, CarreMode::GradientOnly).unwrap().energy(&f);
        let v = CarreOperator::new(&m, CarreMode::PotentialOnly).unwrap().energy(&f);
        assert!(g <= e && v <= e);
        assert!(close(g + v, e, 1e-13));
        // dense matrix agrees with the sparse evaluation
        let dense = full.channel_matrix().dot(&ndarray::arr1(&f));
        let sparse = full.channels_of(&f);
        for (a, b) in dense.iter().zip(&sparse) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn submarkov_reports() {
        let gen = build_graph_laplacian(&Model::<f64>::path(5).unwrap()).unwrap();
        assert!(verify_submarkov(&gen).passes);
        let bad = Generator::from_matrix(
            array![[1.0, 0.5], [0.5, 1.0]],
            vec![1.0; 2],
            GeneratorKind::GraphLaplacian,
        )
        .unwrap();
        let r = verify_submarkov(&bad);
        assert!(!r.off_diagonal_nonpositive && !r.passes);
        let bad = Generator::from_matrix(
            array![[1.0, -2.0], [-2.0, 1.0]],
            vec![1.0; 2],
            GeneratorKind::GraphLaplacian,
        )
        .unwrap();
        let r = verify_submarkov(&bad);
        assert!(!r.row_sums_nonnegative);
        assert!(!r.positive_semidefinite);
        assert!(close(r.min_eigenvalue, -1.0, 1e-14));
        assert!(close(r.max_eigenvalue, 3.0, 1e-14));
    }

    #[test]
    fn alpha_two_is_exact() {
        let m = Model::<f64>::path(6).unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        let g = CarreOperator::new(&m, CarreMode::GradientOnly).unwrap();
        let corpus = vec![vec![1.0, 2.0, 0.5, 3.0, 1.0, 4.0], vec![1.0; 6]];
        let a = measure_alpha_p(&gen, &g, 2.0, &corpus).unwrap();
        assert!((a.alpha - 2.0).abs() < 1e-12);
        assert_eq!(a.witness_entry, 0);
    }

    #[test]
    fn alpha_constant_corpus_has_no_active_vertex() {
        let m = Model::<f64>::path(4).unwrap();
        let gen = build_graph_laplacian(&m).unwrap();
        let g = CarreOperator::new(&m, CarreMode::GradientOnly).unwrap();
        let err = measure_alpha_p(&gen, &g, 1.5, &[vec![2.0; 4]]).unwrap_err();
        assert_eq!(err, LabError::NoActiveVertex);
        assert!(measure_alpha_p(&gen, &g, 1.5, &[]).is_err());
        assert!(measure_alpha_p(&gen, &g, 1.5, &[vec![1.0, 0.0, 1.0, 1.0]]).is_err());
        assert!(measure_alpha_p(&gen, &g, 2.5, &[vec![1.0; 4]]).is_err());
    }

    #[test]
    fn integral_of_l_fp() {
        let single = Model::new(1, vec![1.0], vec![], vec![3.0], vec![]).unwrap();
        let gen = build_graph_laplacian(&single).unwrap();
        assert!(close(check_2_2bis(&gen, &[2.0], 2.0).unwrap(), 12.0, 1e-15));

        let gen = build_schrodinger(&k2(), &[1.0, 0.0]).unwrap();
        assert!(close(check_2_2bis(&gen, &[1.0, 1.0], 2.0).unwrap(), 1.0, 1e-15));

        let gen = build_graph_laplacian(&Model::<f64>::path(7).unwrap()).unwrap();
        let f = [0.1, 2.0, 0.3, 5.0, 0.0, 1.0, 2.2];
        assert!(check_2_2bis(&gen, &f, 1.3).unwrap().abs() <= 1e-12);
        assert!(check_2_2bis(&gen, &[-1.0; 7], 1.3).is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = ModelSpec::from_json(
            r#"{"n":2,"mu":[1,1],"edges":[[0,1,1.0]],"potential":[0,0],"dirichlet":[]}"#,
        )
        .unwrap();
        let m: Model<f64> = spec.build().unwrap();
        assert_eq!(m.n, 2);
        let grid = ModelSpec::from_json(r#"{"grid":{"dims":[3],"coeff":1,"bc":"dirichlet"}}"#).unwrap();
        let g: Model<f64> = grid.build().unwrap();
        assert_eq!(g.interior().len(), 3);
        assert_eq!(g.kind, GeneratorKind::DivergenceForm);
        assert!(ModelSpec::from_json(r#"{"n":"x"}"#).is_err());
    }
}

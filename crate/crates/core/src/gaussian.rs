//! Isotropic Gaussian splats and the map that stores them.
//!
//! The map keeps unconstrained parameters (color and opacity logits, log
//! radius) so that gradient steps can never leave the valid domain; the
//! constrained view is derived on demand.

use nalgebra::Vector3;

use crate::error::{invalid, Result};
use crate::image::Rgb;

/// Number of optimizable scalars per splat.
pub const PARAMS_PER_GAUSSIAN: usize = 8;
pub const COLOR: usize = 0;
pub const CENTER: usize = 3;
pub const LOG_RADIUS: usize = 6;
pub const OPACITY_LOGIT: usize = 7;

const LOGIT_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub color: Rgb,
    pub center: Vector3<f64>,
    pub radius: f64,
    pub opacity: f64,
}

impl Gaussian {
    pub fn new(color: Rgb, center: Vector3<f64>, radius: f64, opacity: f64) -> Self {
        Self { color, center, radius, opacity }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.color.iter().all(|c| c.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && self.radius.is_finite()
            && self.opacity.is_finite();
        if !finite {
            return Err(invalid("gaussian has non-finite parameters"));
        }
        if !(self.radius > 0.0) {
            return Err(invalid("gaussian radius must be positive"));
        }
        if !(0.0..=1.0).contains(&self.opacity) || self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("gaussian opacity and color must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

pub type RawParams = [f64; PARAMS_PER_GAUSSIAN];

pub fn encode(g: &Gaussian) -> RawParams {
    [
        logit(g.color[0]),
        logit(g.color[1]),
        logit(g.color[2]),
        g.center.x,
        g.center.y,
        g.center.z,
        g.radius.ln(),
        logit(g.opacity),
    ]
}

pub fn decode(raw: &RawParams) -> Gaussian {
    Gaussian {
        color: [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])],
        center: Vector3::new(raw[3], raw[4], raw[5]),
        radius: raw[LOG_RADIUS].exp(),
        opacity: sigmoid(raw[OPACITY_LOGIT]),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMap {
    params: Vec<RawParams>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gs: &[Gaussian]) -> Result<Self> {
        let mut m = Self::new();
        for g in gs {
            m.push(*g)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        g.validate()?;
        self.params.push(encode(&g));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> Gaussian {
        decode(&self.params[i])
    }

    pub fn gaussians(&self) -> Vec<Gaussian> {
        self.params.iter().map(decode).collect()
    }

    pub fn raw(&self) -> &[RawParams] {
        &self.params
    }

    pub fn raw_mut(&mut self) -> &mut [RawParams] {
        &mut self.params
    }

    /// Removes splats whose opacity is below `min_opacity`; returns how many.
    pub fn prune(&mut self, min_opacity: f64) -> usize {
        let before = self.params.len();
        self.params.retain(|p| sigmoid(p[OPACITY_LOGIT]) >= min_opacity);
        before - self.params.len()
    }

    /// Centers of splats whose opacity exceeds `min_opacity`.
    pub fn extract_points(&self, min_opacity: f64) -> Vec<Vector3<f64>> {
        self.params
            .iter()
            .filter(|p| sigmoid(p[OPACITY_LOGIT]) > min_opacity)
            .map(|p| Vector3::new(p[3], p[4], p[5]))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

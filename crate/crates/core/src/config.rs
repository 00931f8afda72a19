//! Pipeline configuration read from TOML. Every key is optional; missing keys take the
//! library defaults and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::descriptor::validate_radii;
use crate::error::{Error, Result};
use crate::eval::ColorRamp;
use crate::model::{TrainOptions, TrainedModel};
use crate::predict::PredictOptions;
use crate::registration::{ExpressionOptions, RegisterOptions, ShapeOptions};
use crate::synth::DatasetOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub colors: ColorRamp,
    /// Histogram range (mm) and bin count for residual magnitudes.
    pub histogram_min: f64,
    pub histogram_max: f64,
    pub histogram_bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            colors: ColorRamp::default(),
            histogram_min: 0.0,
            histogram_max: 2.0,
            histogram_bins: 40,
        }
    }
}

/// Default file locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub train: TrainOptions,
    pub predict: PredictOptions,
    pub expression: ExpressionOptions,
    pub shape: ShapeOptions,
    pub synth: DatasetOptions,
    pub eval: EvalOptions,
    pub paths: Paths,
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what.to_string()))
    }
}

fn fraction(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        validate_radii(&t.radii).map_err(|e| Error::Config(e.to_string()))?;
        check(positive(t.m), "train.M must be positive")?;
        check(t.d == 3, "train.D must be 3")?;
        check(t.ridge >= 0.0 && t.ridge.is_finite(), "train.ridge must be non-negative")?;
        check(t.min_cluster >= 1, "train.min_cluster must be at least 1")?;
        check(positive(t.alignment_radius), "train.alignment_radius must be positive")?;
        for (name, m) in [("train.mds", &t.mds), ("predict.mds", &self.predict.mds)] {
            check(m.samples >= 4, &format!("{name}.samples must be at least 4"))?;
            check(m.max_iter >= 1, &format!("{name}.max_iter must be at least 1"))?;
            check(positive(m.tol), &format!("{name}.tol must be positive"))?;
        }

        let p = &self.predict;
        check(positive(p.umbilic.eps), "predict.umbilic.eps must be positive")?;
        check(positive(p.umbilic.k_floor), "predict.umbilic.k_floor must be positive")?;
        check(p.umbilic.fallback >= 1, "predict.umbilic.fallback must be at least 1")?;
        check(positive(p.r_search), "predict.r_search must be positive")?;
        check(positive(p.r_subalare), "predict.r_subalare must be positive")?;
        check(positive(p.restrict_radius), "predict.restrict_radius must be positive")?;
        check(p.expand_factor > 1.0 && p.expand_factor.is_finite(), "predict.expand_factor must exceed 1")?;
        check(p.max_candidates >= 1, "predict.max_candidates must be at least 1")?;
        check((0.0..1.0).contains(&p.bp.damping), "predict.bp.damping must lie in [0, 1)")?;
        check(p.bp.max_iter >= 1, "predict.bp.max_iter must be at least 1")?;
        check(positive(p.bp.tol), "predict.bp.tol must be positive")?;

        let e = &self.expression;
        check(e.phi_deg > 0.0 && e.phi_deg <= 180.0, "expression.phi_deg must lie in (0, 180]")?;
        check(fraction(e.chin_threshold), "expression.chin_threshold must lie in (0, 1]")?;
        check(fraction(e.mouth_threshold), "expression.mouth_threshold must lie in (0, 1]")?;
        check(e.max_refresh >= 1, "expression.max_refresh must be at least 1")?;
        check(positive(e.alpha_tol), "expression.alpha_tol must be positive")?;
        check(e.max_iter >= 1, "expression.max_iter must be at least 1")?;

        let s = &self.shape;
        check(positive(s.weights.data), "shape.weights.data must be positive")?;
        check(s.weights.smooth >= 0.0, "shape.weights.smooth must be non-negative")?;
        check(s.weights.rigid >= 0.0, "shape.weights.rigid must be non-negative")?;
        check(s.relax > 0.0 && s.relax < 1.0, "shape.relax must lie in (0, 1)")?;
        check(positive(s.stop_tol), "shape.stop_tol must be positive")?;
        check(positive(s.negligible), "shape.negligible must be positive")?;
        check(s.angle_deg > 0.0 && s.angle_deg <= 180.0, "shape.angle_deg must lie in (0, 180]")?;
        check(s.max_iter >= 1, "shape.max_iter must be at least 1")?;
        check(s.max_levels >= 1, "shape.max_levels must be at least 1")?;
        check(s.max_refresh_per_level >= 1, "shape.max_refresh_per_level must be at least 1")?;
        check(fraction(s.max_invalid), "shape.max_invalid must lie in (0, 1]")?;

        let d = &self.synth;
        check(d.train >= 2, "synth.train must be at least 2")?;
        check(positive(d.scan_spacing), "synth.scan_spacing must be positive")?;
        check(positive(d.rig_spacing), "synth.rig_spacing must be positive")?;
        check((0.0..=1.0).contains(&d.max_alpha), "synth.max_alpha must lie in [0, 1]")?;
        check(d.max_angle_deg >= 0.0 && d.max_shift >= 0.0, "synth pose limits must be non-negative")?;
        check(d.warp_amplitude >= 0.0, "synth.warp_amplitude must be non-negative")?;

        self.eval.colors.validate().map_err(|e| Error::Config(e.to_string()))?;
        check(
            self.eval.histogram_bins >= 1 && self.eval.histogram_max > self.eval.histogram_min,
            "eval histogram needs at least one bin over a non-empty range",
        )?;
        Ok(())
    }

    pub fn register_options(&self) -> RegisterOptions {
        RegisterOptions {
            predict: self.predict.clone(),
            expression: self.expression.clone(),
            shape: self.shape.clone(),
        }
    }

    /// Rejects a model trained with different descriptor settings.
    pub fn check_model(&self, model: &TrainedModel) -> Result<()> {
        if model.radii != self.train.radii {
            return Err(Error::Incompatible(format!(
                "model radii {:?} differ from configured radii {:?}",
                model.radii, self.train.radii
            )));
        }
        if model.m != self.train.m || model.d != self.train.d {
            return Err(Error::Incompatible(format!(
                "model has M = {}, D = {}; configuration has M = {}, D = {}",
                model.m, model.d, self.train.m, self.train.d
            )));
        }
        Ok(())
    }
}

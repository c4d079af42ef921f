//! One optimization step: forward pass, all losses, backward, update.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::objectives::{
    consistency_loss, equivariance_loss, keypoint_distance_exact, keypoint_distance_hinge, perceptual_loss, total_loss,
    ConsistencyLevels, FeatureExtractor, LossParts, LossWeights, TransformBatch,
};
use crate::optim::Adam;
use crate::params::{ParamGrads, ParamStore};
use crate::pipeline::{AnimateOptions, Animation, MCNetModel};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub weights: LossWeights,
    /// Minimum keypoint separation for the distance loss.
    pub alpha: f64,
    pub consistency: ConsistencyLevels,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings { weights: LossWeights::default(), alpha: 0.2, consistency: ConsistencyLevels::All }
    }
}

/// Everything recorded by [`forward_losses`].
pub struct LossGraph<T: Real> {
    pub tape: Tape<T>,
    pub total: Var,
    pub parts: LossParts,
    pub animation: Animation,
    pub alpha: f64,
}

/// Losses on one batch. `transforms` holds one transform per image of the
/// source batch followed by one per driving image.
pub fn forward_losses<T: Real>(
    model: &MCNetModel,
    store: &ParamStore<T>,
    extractor: &dyn FeatureExtractor<T>,
    source: &Tensor<T>,
    driving: &Tensor<T>,
    transforms: &TransformBatch,
    settings: &LossSettings,
) -> Result<LossGraph<T>> {
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let d = tape.constant(driving.clone());
    let animation = model.animate(&mut tape, store, s, d, AnimateOptions::default())?;

    let perceptual = perceptual_loss(&mut tape, animation.image, d, extractor)?;

    let images = tape.concat(&[s, d], 0)?;
    let kp = tape.concat(&[animation.kp_source, animation.kp_driving], 0)?;
    let mut detect = |tape: &mut Tape<T>, x: Var| model.detector.detect(tape, store, x).map(|(k, _)| k);
    let equivariance = equivariance_loss(&mut tape, images, kp, transforms, &mut detect)?;
    let distance = keypoint_distance_hinge(&mut tape, kp, settings.alpha)?;
    let hw = (model.config.memory_height, model.config.memory_width);
    let consistency = consistency_loss(&mut tape, &animation.levels, hw, settings.consistency)?;

    let parts = LossParts { perceptual, equivariance, distance, consistency };
    let total = total_loss(&mut tape, &parts, &settings.weights)?;
    Ok(LossGraph { tape, total, parts, animation, alpha: settings.alpha })
}

/// Scalar summary of one step, all at 64-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_p: f64,
    pub loss_eq: f64,
    pub loss_dist: f64,
    pub loss_con: f64,
    /// The literal sign-based keypoint distance, for monitoring.
    pub dist_exact: f64,
}

impl<T: Real> LossGraph<T> {
    pub fn stats(&self) -> StepStats {
        let v = |x: Var| self.tape.value(x).item().to_f64();
        let kp_s = self.tape.value(self.animation.kp_source);
        let kp_d = self.tape.value(self.animation.kp_driving);
        let alpha = self.alpha;
        StepStats {
            loss_total: v(self.total),
            loss_p: v(self.parts.perceptual),
            loss_eq: v(self.parts.equivariance),
            loss_dist: v(self.parts.distance),
            loss_con: v(self.parts.consistency),
            dist_exact: 0.5 * (keypoint_distance_exact(kp_s, alpha) + keypoint_distance_exact(kp_d, alpha)),
        }
    }

    pub fn generated(&self) -> &Tensor<T> {
        self.tape.value(self.animation.image)
    }

    pub fn param_grads(&self, store: &ParamStore<T>) -> Result<ParamGrads<T>> {
        Ok(self.tape.backward(self.total)?.params(&self.tape, store))
    }
}

/// Forward, backward and one optimizer update. Returns the pre-update
/// statistics and generated frames.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &MCNetModel,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    extractor: &dyn FeatureExtractor<T>,
    source: &Tensor<T>,
    driving: &Tensor<T>,
    transforms: &TransformBatch,
    settings: &LossSettings,
) -> Result<(StepStats, Tensor<T>)> {
    let graph = forward_losses(model, store, extractor, source, driving, transforms, settings)?;
    let grads = graph.param_grads(store)?;
    adam.step(store, &grads)?;
    let stats = graph.stats();
    let generated = graph.generated().clone();
    Ok((stats, generated))
}

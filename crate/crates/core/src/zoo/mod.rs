//! Frozen encoder bundles and the synthetic dataset generator.
//!
//! A bundle exposes a vision tower `f_v`, a projector `p_v` into a shared
//! embedding space, and (optionally) a text tower realized as a class-prototype
//! table. All bundles are immutable after construction and safe for concurrent
//! read-only evaluation.

pub mod hub;
pub mod toy;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::tensor::Image;

pub use hub::{load_external_bundle, HubClient, LinearBundle};
pub use toy::{
    build_toy_bundle, export_split, generate_toy_dataset, Label, OodKind, Sample, Shape, Split,
    ToyBundle, ToyWorldSpec,
};

/// A scalar loss expressed over a bundle's supported outputs. Bundles provide
/// exact input gradients for weighted sums of these terms.
#[derive(Debug, Clone)]
pub enum LossTerm {
    /// Cosine similarity between `f_v(x)` and a fixed anchor feature vector.
    FeatureCosine { anchor: Array1<f64> },
    /// Cosine similarity between the projected embedding `p_v(f_v(x))` and a
    /// fixed unit vector in embedding space.
    EmbedCosine { target: Array1<f64> },
    /// Mean over all pixels; used by gradient-contract tests.
    PixelMean,
}

/// Weighted sum of loss terms.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub terms: Vec<(f64, LossTerm)>,
}

impl LossSpec {
    pub fn single(term: LossTerm) -> Self {
        LossSpec { terms: vec![(1.0, term)] }
    }
}

/// Output of [`encode_image`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Raw features `f_v(x)`.
    pub features: Array1<f64>,
    /// L2-normalized projected embedding `p_v(f_v(x))`.
    pub projected: Array1<f64>,
}

/// A frozen encoder bundle.
pub trait Encoder: Send + Sync {
    fn id(&self) -> &str;
    fn input_shape(&self) -> (usize, usize, usize);
    fn feature_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn has_text_tower(&self) -> bool;
    fn differentiable(&self) -> bool;

    /// Raw features `f_v(x)`.
    fn features(&self, x: &Image) -> Result<Array1<f64>>;

    /// L2-normalized projection of a feature vector.
    fn project(&self, features: ArrayView1<f64>) -> Result<Array1<f64>>;

    /// L2-normalized text embedding `p_t(f_t(y))` for a prompt or class name.
    fn encode_text(&self, prompt: &str) -> Result<Array1<f64>>;

    /// Loss value and its exact input gradient at `x`.
    fn value_and_grad(&self, loss: &LossSpec, x: &Image) -> Result<(f64, Image)>;
}

/// Evaluate a [`LossSpec`] given the feature vector `f` at `x` and the bundle's
/// linear projector. Returns the loss value, its gradient with respect to the
/// features, and a uniform per-pixel gradient weight (from `PixelMean` terms).
/// Norms are clamped at 1e-12 so gradients stay finite on degenerate inputs.
pub(crate) fn loss_value_and_feature_grad(
    loss: &LossSpec,
    f: &ndarray::Array1<f64>,
    projector: &ndarray::Array2<f64>,
    x: &Image,
) -> Result<(f64, Array1<f64>, f64)> {
    const NORM_FLOOR: f64 = 1e-12;
    let fnorm = f.dot(f).sqrt().max(NORM_FLOOR);
    let mut value = 0.0;
    let mut df: Array1<f64> = Array1::zeros(f.len());
    let mut pixel_w = 0.0;

    for (weight, term) in &loss.terms {
        match term {
            LossTerm::FeatureCosine { anchor } => {
                if anchor.len() != f.len() {
                    return Err(Error::Config("anchor length mismatch".into()));
                }
                let anorm = anchor.dot(anchor).sqrt().max(NORM_FLOOR);
                let v = f.dot(anchor) / (fnorm * anorm);
                value += weight * v;
                for i in 0..f.len() {
                    df[i] += weight * (anchor[i] / anorm - v * f[i] / fnorm) / fnorm;
                }
            }
            LossTerm::EmbedCosine { target } => {
                if target.len() != projector.nrows() {
                    return Err(Error::Config("target embedding length mismatch".into()));
                }
                let tn = target.dot(target).sqrt().max(NORM_FLOOR);
                let t = target.mapv(|v| v / tn);
                let z = projector.dot(f);
                let zn = z.dot(&z).sqrt().max(NORM_FLOOR);
                let zhat = z.mapv(|v| v / zn);
                let v = zhat.dot(&t);
                value += weight * v;
                let dz = (0..z.len())
                    .map(|i| (t[i] - v * zhat[i]) / zn)
                    .collect::<Array1<f64>>();
                let pull = projector.t().dot(&dz);
                df.scaled_add(*weight, &pull);
            }
            LossTerm::PixelMean => {
                let n = x.len() as f64;
                value += weight * x.sum() / n;
                pixel_w += weight / n;
            }
        }
    }
    Ok((value, df, pixel_w))
}

/// Check an image against a bundle's expected input shape.
pub fn check_input_shape(bundle: &dyn Encoder, x: &Image) -> Result<()> {
    if x.dim() != bundle.input_shape() {
        return Err(Error::Config(format!(
            "bundle {}: input shape {:?} does not match expected {:?}",
            bundle.id(),
            x.dim(),
            bundle.input_shape()
        )));
    }
    Ok(())
}

/// Encode an image into raw features and the projected unit embedding.
pub fn encode_image(bundle: &dyn Encoder, x: &Image) -> Result<Encoded> {
    check_input_shape(bundle, x)?;
    let features = bundle.features(x)?;
    let projected = bundle.project(features.view())?;
    Ok(Encoded { features, projected })
}

/// Render the prompt template for a class name; underscores become spaces.
pub fn format_prompt(class_name: &str) -> Result<String> {
    if class_name.is_empty() {
        return Err(Error::Validation("empty class name".into()));
    }
    Ok(format!("this is a photo of a {}", class_name.replace('_', " ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_template() {
        assert_eq!(format_prompt("beagle").unwrap(), "this is a photo of a beagle");
    }

    #[test]
    fn prompt_underscores_become_spaces() {
        assert_eq!(
            format_prompt("great_dane").unwrap(),
            "this is a photo of a great dane"
        );
    }

    #[test]
    fn prompt_is_pure() {
        assert_eq!(format_prompt("cat").unwrap(), format_prompt("cat").unwrap());
    }

    #[test]
    fn empty_class_name_rejected() {
        assert!(format_prompt("").is_err());
    }
}

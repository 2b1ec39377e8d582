//! Attack objectives and the constrained PGD-style optimizer with the four
//! transferability tricks: momentum, diverse inputs, translation invariance,
//! and loss-level ensembling.

mod spec;

pub use spec::{uniform_weights, AttackSpec, DiversePolicy, Objective, TiKernel};

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{self, Image};
use crate::zoo::{Encoder, LossSpec, LossTerm};

/// Cosine similarity between two vectors.
pub fn cosine_similarity(u: &Array1<f64>, v: &Array1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Validation(format!(
            "cosine_similarity: dimension mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Away-From-Start objective: cosine similarity between the features of the
/// perturbed and original image. The optimizer minimizes this value.
pub fn afs_loss(bundle: &dyn Encoder, x0: &Image, x_adv: &Image) -> Result<f64> {
    let anchor = bundle.features(x0)?;
    let f = bundle.features(x_adv)?;
    cosine_similarity(&f, &anchor)
}

/// Towards-Target + Away-From-Start objective: alignment of the projected
/// embedding with a target text embedding, minus `lambda` times alignment with
/// the start embedding. The optimizer maximizes this value.
pub fn ttafs_loss(
    bundle: &dyn Encoder,
    x0: &Image,
    x_adv: &Image,
    target_embedding: &Array1<f64>,
    lambda_afs: f64,
) -> Result<f64> {
    let e0 = crate::zoo::encode_image(bundle, x0)?.projected;
    let e = crate::zoo::encode_image(bundle, x_adv)?.projected;
    Ok(cosine_similarity(&e, target_embedding)? - lambda_afs * cosine_similarity(&e, &e0)?)
}

/// Draw a uniform-noise distal seed; deterministic for a fixed seed.
pub fn make_distal_seed(shape: (usize, usize, usize), seed: u64) -> Image {
    let mut r = rng::stream(&[seed, 0xd157a1]);
    Array3::from_shape_fn(shape, |_| r.gen::<f64>())
}

/// Bookkeeping for one diverse-inputs draw, enough to pull gradients back.
#[derive(Debug, Clone, Copy)]
pub struct DiRecord {
    pub applied: bool,
    pub size: usize,
    pub off_y: usize,
    pub off_x: usize,
}

/// Random resize-and-pad used inside the attack loop. With probability
/// `transform_prob` the image is resized to a uniform square size in
/// `[min_size, max_size]` and zero-padded back at a uniform offset.
pub fn di_transform(x: &Image, policy: &DiversePolicy, rng: &mut ChaCha8Rng) -> Result<Image> {
    Ok(di_transform_with_record(x, policy, rng)?.0)
}

/// [`di_transform`] that also returns the draw record for the adjoint pass.
pub fn di_transform_with_record(
    x: &Image,
    policy: &DiversePolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, DiRecord)> {
    policy.validate()?;
    let (_, h, w) = x.dim();
    if h != w || policy.min_size > h {
        return Err(Error::Config(format!(
            "di_transform: policy min_size {} incompatible with input {h}x{w}",
            policy.min_size
        )));
    }
    let max = policy.max_size.min(h);
    let skip = DiRecord { applied: false, size: h, off_y: 0, off_x: 0 };
    if rng.gen::<f64>() >= policy.transform_prob {
        return Ok((x.clone(), skip));
    }
    let size = rng.gen_range(policy.min_size..=max);
    let off_y = rng.gen_range(0..=h - size);
    let off_x = rng.gen_range(0..=w - size);
    let resized = tensor::resize_bilinear(x, size, size);
    let padded = tensor::zero_pad(&resized, h, w, off_y, off_x);
    Ok((padded, DiRecord { applied: true, size, off_y, off_x }))
}

/// Adjoint of the diverse-inputs draw: map a gradient on the transformed image
/// back to the original pixel grid.
pub fn di_backward(grad: &Image, record: &DiRecord, in_h: usize, in_w: usize) -> Image {
    if !record.applied {
        return grad.clone();
    }
    let cropped = tensor::crop(grad, record.size, record.size, record.off_y, record.off_x);
    tensor::resize_bilinear_adjoint(&cropped, in_h, in_w)
}

/// Translation-invariance trick: per-channel 2-D convolution of the gradient
/// with a normalized kernel, zero padding at the edges.
pub fn ti_smooth(grad: &Image, kernel: &TiKernel) -> Result<Image> {
    kernel.validate()?;
    let (c, h, w) = grad.dim();
    let k = kernel.size;
    if h < k || w < k {
        return Err(Error::Config(format!(
            "ti_smooth: gradient {h}x{w} smaller than kernel {k}"
        )));
    }
    let half = (k / 2) as isize;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for di in -half..=half {
                    for dj in -half..=half {
                        let si = i + di;
                        let sj = j + dj;
                        if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                            acc += kernel.weights[[(di + half) as usize, (dj + half) as usize]]
                                * grad[[ch, si as usize, sj as usize]];
                        }
                    }
                }
                out[[ch, i as usize, j as usize]] = acc;
            }
        }
    }
    Ok(out)
}

/// L1-normalized momentum accumulation: `mu * g_prev + grad / ||grad||_1`.
/// Returns the new buffer and whether the gradient stalled (all zero).
pub fn momentum_update(g_prev: &Image, grad: &Image, mu: f64) -> (Image, bool) {
    let l1: f64 = grad.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return (g_prev.mapv(|v| mu * v), true);
    }
    let mut out = grad.mapv(|v| v / l1);
    out.scaled_add(mu, g_prev);
    (out, false)
}

/// Perturbation state carried across PGD iterations.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    pub x0: Image,
    pub x_adv: Image,
    pub momentum_buffer: Image,
    pub iteration: usize,
}

impl PerturbationState {
    pub fn new(x0: Image) -> Self {
        let zeros = Array3::zeros(x0.dim());
        PerturbationState { x_adv: x0.clone(), x0, momentum_buffer: zeros, iteration: 0 }
    }

    /// `||x_adv - x0||_inf <= eps + 1e-6` and all pixels in `[0, 1]`.
    pub fn invariants_hold(&self, epsilon: f64) -> bool {
        tensor::linf_dist(&self.x_adv, &self.x0) <= epsilon + 1e-6
            && tensor::in_unit_box(&self.x_adv)
    }
}

/// Step direction for [`pgd_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDirection {
    Ascend,
    Descend,
}

/// One signed PGD step followed by projection into the ℓ∞ ball around `x0`
/// intersected with the unit box.
pub fn pgd_step(
    mut state: PerturbationState,
    smoothed_grad: &Image,
    spec: &AttackSpec,
    direction: StepDirection,
) -> PerturbationState {
    let sign = match direction {
        StepDirection::Ascend => 1.0,
        StepDirection::Descend => -1.0,
    };
    ndarray::Zip::from(&mut state.x_adv)
        .and(&state.x0)
        .and(smoothed_grad)
        .for_each(|xa, &x0, &g| {
            // f64::signum maps +-0.0 to +-1.0; a zero gradient must not move
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let stepped = *xa + sign * spec.step_size * s;
            *xa = stepped
                .clamp(x0 - spec.epsilon, x0 + spec.epsilon)
                .clamp(0.0, 1.0);
        });
    state.iteration += 1;
    state
}

/// Weighted mean of per-member losses.
pub fn ensemble_loss(weights: &[f64], per_model_losses: &[f64]) -> Result<f64> {
    if per_model_losses.is_empty() {
        return Err(Error::Config("ensemble_loss: empty ensemble".into()));
    }
    if weights.len() != per_model_losses.len() {
        return Err(Error::Validation("ensemble_loss: weight/loss length mismatch".into()));
    }
    Ok(weights.iter().zip(per_model_losses).map(|(w, l)| w * l).sum())
}

/// One row of the attack loss trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub member_losses: Vec<f64>,
    pub stalled: bool,
}

/// Attack output: the final perturbed image and the full loss trace.
#[derive(Debug, Clone)]
pub struct AdvResult {
    pub x_adv: Image,
    pub trace: Vec<TraceRow>,
}

/// Run the full attack loop over an ensemble of whitebox bundles.
///
/// For `Id2OodAfs` the AFS objective is minimized and `targets` must be empty;
/// for `Ood2IdTtAfs` the TT+AFS objective is maximized and `targets` must hold
/// one projected text embedding per member. `sample_index` selects the derived
/// randomness stream so campaigns are schedule-invariant.
pub fn run_attack(
    bundles: &[&dyn Encoder],
    x0: &Image,
    spec: &AttackSpec,
    targets: Option<&[Array1<f64>]>,
    sample_index: u64,
) -> Result<AdvResult> {
    spec.validate(bundles.len())?;
    if bundles.is_empty() {
        return Err(Error::Config("run_attack: empty ensemble".into()));
    }
    for b in bundles {
        crate::zoo::check_input_shape(*b, x0)?;
        if !b.differentiable() {
            return Err(Error::UnsupportedBundle(format!(
                "bundle {} is not differentiable",
                b.id()
            )));
        }
    }
    match (spec.objective, targets) {
        (Objective::Id2OodAfs, Some(_)) => {
            return Err(Error::Config("AFS attack takes no target embeddings".into()))
        }
        (Objective::Ood2IdTtAfs, None) => {
            return Err(Error::Config("TT+AFS attack requires target embeddings".into()))
        }
        (Objective::Ood2IdTtAfs, Some(t)) if t.len() != bundles.len() => {
            return Err(Error::Config(
                "TT+AFS needs one target embedding per ensemble member".into(),
            ));
        }
        _ => {}
    }

    // per-member anchors, computed once; the objective treats them as constants
    let mut member_losses_spec: Vec<LossSpec> = Vec::with_capacity(bundles.len());
    for (m, bundle) in bundles.iter().enumerate() {
        let spec_m = match spec.objective {
            Objective::Id2OodAfs => {
                let anchor = bundle.features(x0)?;
                LossSpec::single(LossTerm::FeatureCosine { anchor })
            }
            Objective::Ood2IdTtAfs => {
                let anchor_embed = crate::zoo::encode_image(*bundle, x0)?.projected;
                let target = targets.unwrap()[m].clone();
                LossSpec {
                    terms: vec![
                        (1.0, LossTerm::EmbedCosine { target }),
                        (-spec.lambda_afs, LossTerm::EmbedCosine { target: anchor_embed }),
                    ],
                }
            }
        };
        member_losses_spec.push(spec_m);
    }

    let direction = match spec.objective {
        Objective::Id2OodAfs => StepDirection::Descend,
        Objective::Ood2IdTtAfs => StepDirection::Ascend,
    };
    let (_, h, w) = x0.dim();
    let sample_seed = rng::mix(&[spec.seed, sample_index]);
    let mut state = PerturbationState::new(x0.clone());
    let mut trace = Vec::with_capacity(spec.steps);

    for iteration in 0..spec.steps {
        let mut total_grad: Image = Array3::zeros(x0.dim());
        let mut member_losses = Vec::with_capacity(bundles.len());
        for (m, bundle) in bundles.iter().enumerate() {
            let (x_in, record) = match &spec.di_policy {
                Some(policy) if policy.transform_prob > 0.0 => {
                    let mut r =
                        rng::stream(&[sample_seed, iteration as u64, m as u64, 0xd1]);
                    di_transform_with_record(&state.x_adv, policy, &mut r)?
                }
                _ => (
                    state.x_adv.clone(),
                    DiRecord { applied: false, size: h, off_y: 0, off_x: 0 },
                ),
            };
            let (value, grad) = bundle.value_and_grad(&member_losses_spec[m], &x_in)?;
            let grad0 = di_backward(&grad, &record, h, w);
            total_grad.scaled_add(spec.ensemble_weights[m], &grad0);
            member_losses.push(value);
        }
        let loss = ensemble_loss(&spec.ensemble_weights, &member_losses)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "nonfinite ensemble loss at iteration {iteration}; trace so far: {:?}",
                trace.iter().map(|t: &TraceRow| t.loss).collect::<Vec<_>>()
            )));
        }
        let smoothed = match &spec.ti_kernel {
            Some(kernel) => ti_smooth(&total_grad, kernel)?,
            None => total_grad,
        };
        let (momentum, stalled) =
            momentum_update(&state.momentum_buffer, &smoothed, spec.momentum_mu);
        state.momentum_buffer = momentum;
        let buffer = state.momentum_buffer.clone();
        state = pgd_step(state, &buffer, spec, direction);
        trace.push(TraceRow { iteration, loss, member_losses, stalled });
    }

    debug_assert!(state.invariants_hold(spec.epsilon));
    Ok(AdvResult { x_adv: state.x_adv, trace })
}

/// Write a loss trace as CSV: iteration, ensemble loss, per-member losses.
pub fn write_trace_csv(trace: &[TraceRow], path: &std::path::Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let members = trace.first().map_or(0, |t| t.member_losses.len());
    let mut header = vec!["iteration".to_string(), "loss".to_string()];
    for m in 0..members {
        header.push(format!("member_{m}"));
    }
    wtr.write_record(&header)?;
    for row in trace {
        let mut rec = vec![row.iteration.to_string(), row.loss.to_string()];
        rec.extend(row.member_losses.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

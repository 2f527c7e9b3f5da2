use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::frames::{upsample_tokens, FrameSequence, UPSAMPLE_RATIO};
use super::model::{vf_forward, VectorFieldModel};
use super::{FlowError, SpeakerEmbedding};

/// Explicit Euler integration of the field from `t = 0` to `t = 1`.
pub fn ode_integrate(
    model: &VectorFieldModel,
    x_init: &[f64],
    cond: &[f64],
    speaker: &SpeakerEmbedding,
    n_steps: usize,
) -> Result<Vec<f64>, FlowError> {
    if n_steps == 0 {
        return Err(FlowError::InvalidConfig("ODE step count must be positive".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x_init.to_vec();
    for step in 0..n_steps {
        let t = step as f64 * dt;
        let v = vf_forward(model, &x, t, cond, speaker.values()).map_err(|e| match e {
            FlowError::NonFinite(_) => FlowError::NonFiniteState { step },
            other => other,
        })?;
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteState { step });
        }
    }
    Ok(x)
}

/// Mel frames for a token sequence: tokens are upsampled 1.6x, then each
/// output frame is integrated from seeded standard-normal noise conditioned
/// on its upsampled token frame.
pub fn generate_mel(
    model: &VectorFieldModel,
    tokens: &FrameSequence,
    speaker: &SpeakerEmbedding,
    n_steps: usize,
    seed: u64,
) -> Result<FrameSequence, FlowError> {
    let dims = model.dims();
    if tokens.dim() != dims.cond {
        return Err(FlowError::ShapeMismatch {
            what: "token feature width",
            expected: dims.cond,
            found: tokens.dim(),
        });
    }
    if speaker.dim() != dims.speaker {
        return Err(FlowError::ShapeMismatch {
            what: "speaker embedding",
            expected: dims.speaker,
            found: speaker.dim(),
        });
    }
    let cond = upsample_tokens(tokens, UPSAMPLE_RATIO)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(cond.len() * dims.state);
    for frame in cond.frames() {
        let noise: Vec<f64> = (0..dims.state).map(|_| StandardNormal.sample(&mut rng)).collect();
        data.extend(ode_integrate(model, &noise, frame, speaker, n_steps)?);
    }
    FrameSequence::new(cond.len(), dims.state, data, cond.frame_rate_hz())
}

#[cfg(test)]
mod tests {
    use super::super::model::ModelDims;
    use super::super::TOKEN_RATE_HZ;
    use super::*;

    fn no_speaker() -> SpeakerEmbedding {
        SpeakerEmbedding::new(vec![]).unwrap()
    }

    fn constant_field(c: &[f64]) -> VectorFieldModel {
        let dims = ModelDims {
            state: c.len(),
            cond: 0,
            speaker: 0,
        };
        let mut m = VectorFieldModel::zeros(dims, &[]).unwrap();
        m.layer_mut(0).1.copy_from_slice(c);
        m
    }

    #[test]
    fn zero_field_is_identity() {
        let m = constant_field(&[0.0, 0.0, 0.0]);
        for n in [1, 7, 32] {
            let x = ode_integrate(&m, &[1.5, -2.0, 0.1], &[], &no_speaker(), n).unwrap();
            assert_eq!(x, vec![1.5, -2.0, 0.1]);
        }
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let c = [0.75, -3.0];
        let m = constant_field(&c);
        for n in [1, 2, 8, 32, 64] {
            let x = ode_integrate(&m, &[1.0, 2.0], &[], &no_speaker(), n).unwrap();
            assert_eq!(x, vec![1.75, -1.0], "n={n}");
        }
        for n in [3, 10, 100, 333] {
            let x = ode_integrate(&m, &[1.0, 2.0], &[], &no_speaker(), n).unwrap();
            assert!((x[0] - 1.75).abs() < 1e-13 && (x[1] + 1.0).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn linear_field_compounds() {
        // v(x, t) = x on a scalar state
        let dims = ModelDims {
            state: 1,
            cond: 0,
            speaker: 0,
        };
        let m = VectorFieldModel::from_parts(dims, vec![2, 1], vec![1.0, 0.0, 0.0], 0).unwrap();
        let x = ode_integrate(&m, &[1.0], &[], &no_speaker(), 100).unwrap();
        assert!((x[0] - 1.01f64.powi(100)).abs() < 1e-9);
        assert!((x[0] - 2.704_813_829).abs() < 1e-9);
        assert!(ode_integrate(&m, &[1.0], &[], &no_speaker(), 0).is_err());
    }

    #[test]
    fn divergent_state_is_reported() {
        let dims = ModelDims {
            state: 1,
            cond: 0,
            speaker: 0,
        };
        let m = VectorFieldModel::from_parts(dims, vec![2, 1], vec![1e300, 0.0, 0.0], 0).unwrap();
        assert!(matches!(
            ode_integrate(&m, &[1e10], &[], &no_speaker(), 4),
            Err(FlowError::NonFiniteState { .. })
        ));
    }

    fn mel_model() -> VectorFieldModel {
        let dims = ModelDims {
            state: 80,
            cond: 4,
            speaker: 8,
        };
        VectorFieldModel::new(dims, &[16], 3).unwrap()
    }

    fn tokens(t: usize) -> FrameSequence {
        let data = (0..t * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        FrameSequence::new(t, 4, data, TOKEN_RATE_HZ).unwrap()
    }

    #[test]
    fn ten_tokens_give_sixteen_mel_frames() {
        let spk = SpeakerEmbedding::synthetic(0, 8);
        let mel = generate_mel(&mel_model(), &tokens(10), &spk, 8, 1).unwrap();
        assert_eq!(mel.len(), 16);
        assert_eq!(mel.dim(), 80);
        assert_eq!(mel.frame_rate_hz(), 80.0);
        let again = generate_mel(&mel_model(), &tokens(10), &spk, 8, 1).unwrap();
        assert_eq!(mel.data(), again.data());
        let other = generate_mel(&mel_model(), &tokens(10), &spk, 8, 2).unwrap();
        assert_ne!(mel.data(), other.data());
    }

    #[test]
    fn zero_model_returns_seeded_noise() {
        let dims = ModelDims {
            state: 3,
            cond: 4,
            speaker: 0,
        };
        let m = VectorFieldModel::zeros(dims, &[5]).unwrap();
        let mel = generate_mel(&m, &tokens(5), &no_speaker(), 4, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise: Vec<f64> = (0..8 * 3).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(mel.data(), noise.as_slice());
    }

    #[test]
    fn shape_errors() {
        let spk = SpeakerEmbedding::synthetic(0, 8);
        let wide = FrameSequence::new(3, 5, vec![0.0; 15], TOKEN_RATE_HZ).unwrap();
        assert!(matches!(generate_mel(&mel_model(), &wide, &spk, 4, 0), Err(FlowError::ShapeMismatch { .. })));
        let spk3 = SpeakerEmbedding::synthetic(0, 3);
        assert!(generate_mel(&mel_model(), &tokens(4), &spk3, 4, 0).is_err());
        assert!(matches!(
            generate_mel(&mel_model(), &tokens(1), &spk, 4, 0),
            Err(FlowError::TooShort { frames: 1 })
        ));
    }
}

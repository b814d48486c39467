//! Particle transforms: weights in, an `M x M` transform out.

use crate::ensemble::{Ensemble, WeightVector};
use crate::error::Result;
use crate::second_order::{second_order_transform, SecondOrderMode, SecondOrderOptions};
use crate::transform::TransformMatrix;
use crate::transport::{cost_matrix, exact_ot_from_cost, sinkhorn_from_cost, SinkhornOptions};

/// Particle filter transforms that can be bridged with a Kalman step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParticleKind {
    /// Exact optimal transport.
    EtpfExact,
    /// Sinkhorn approximation of the transport plan.
    EtpfSinkhorn { lambda: f64 },
    /// Exact transport followed by the Riccati correction.
    Etpf2Exact,
    /// Sinkhorn transport followed by the Riccati correction.
    Etpf2Sinkhorn { lambda: f64 },
    NetfOptimal,
    NetfSymmetric,
    /// NETF with a seeded random rotation; the seed is supplied per call.
    NetfRandom,
}

impl ParticleKind {
    pub fn is_second_order(self) -> bool {
        !matches!(self, ParticleKind::EtpfExact | ParticleKind::EtpfSinkhorn { .. })
    }

    pub fn lambda(self) -> Option<f64> {
        match self {
            ParticleKind::EtpfSinkhorn { lambda } | ParticleKind::Etpf2Sinkhorn { lambda } => Some(lambda),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParticleKind::EtpfExact => "etpf",
            ParticleKind::EtpfSinkhorn { .. } => "etpf_sinkhorn",
            ParticleKind::Etpf2Exact => "etpf2",
            ParticleKind::Etpf2Sinkhorn { .. } => "etpf2_sinkhorn",
            ParticleKind::NetfOptimal => "netf_optimal",
            ParticleKind::NetfSymmetric => "netf_symmetric",
            ParticleKind::NetfRandom => "netf_random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParticleOptions {
    pub sinkhorn: SinkhornOptions,
    pub second_order: SecondOrderOptions,
}

/// Builds the transform of `kind` for ensemble `ens` under weights `w`.
///
/// `rotation_seed` is consumed only by [`ParticleKind::NetfRandom`].
pub fn particle_transform(
    ens: &Ensemble,
    w: &WeightVector,
    kind: ParticleKind,
    rotation_seed: u64,
    options: &ParticleOptions,
) -> Result<TransformMatrix> {
    let transport = |lambda: Option<f64>| -> Result<TransformMatrix> {
        let cost = cost_matrix(ens);
        match lambda {
            None => exact_ot_from_cost(&cost, w),
            Some(lambda) => sinkhorn_from_cost(&cost, w, lambda, &options.sinkhorn).map(|o| o.transform),
        }
    };
    let netf = |mode| second_order_transform(None, w, ens, mode, &options.second_order);
    match kind {
        ParticleKind::EtpfExact => transport(None),
        ParticleKind::EtpfSinkhorn { lambda } => transport(Some(lambda)),
        ParticleKind::Etpf2Exact | ParticleKind::Etpf2Sinkhorn { .. } => {
            let base = transport(kind.lambda())?;
            second_order_transform(Some(&base), w, ens, SecondOrderMode::Riccati, &options.second_order)
        }
        ParticleKind::NetfOptimal => netf(SecondOrderMode::NetfOptimal),
        ParticleKind::NetfSymmetric => netf(SecondOrderMode::NetfSymmetric),
        ParticleKind::NetfRandom => netf(SecondOrderMode::NetfRandom { seed: rotation_seed }),
    }
}

/// Decorrelated child seed for sub-problem `index` (splitmix64 finaliser).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn every_kind_is_first_order() {
        let ens = Ensemble::from_members(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5], vec![1.5, 2.0]])
            .unwrap();
        let w = WeightVector::from_slice(&[0.4, 0.1, 0.3, 0.2]).unwrap();
        let kinds = [
            ParticleKind::EtpfExact,
            ParticleKind::EtpfSinkhorn { lambda: 10.0 },
            ParticleKind::Etpf2Exact,
            ParticleKind::Etpf2Sinkhorn { lambda: 10.0 },
            ParticleKind::NetfOptimal,
            ParticleKind::NetfSymmetric,
            ParticleKind::NetfRandom,
        ];
        for kind in kinds {
            let d = particle_transform(&ens, &w, kind, 7, &ParticleOptions::default()).unwrap();
            assert!(d.flags().in_d1, "{}", kind.name());
            assert_eq!(d.flags().in_d2, kind.is_second_order(), "{}", kind.name());
        }
    }

    #[test]
    fn uniform_weights_leave_distinct_members_in_place() {
        let ens = Ensemble::from_scalars(&[0.0, 1.0, 3.0]).unwrap();
        let w = WeightVector::uniform(3);
        for kind in [ParticleKind::EtpfExact, ParticleKind::Etpf2Exact, ParticleKind::NetfOptimal] {
            let d = particle_transform(&ens, &w, kind, 0, &ParticleOptions::default()).unwrap();
            assert!((d.matrix() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10, "{}", kind.name());
        }
    }
}

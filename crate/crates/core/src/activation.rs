use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    Square,
    #[serde(alias = "erf")]
    ErfNormalized,
    Custom,
}

/// An activation σ together with its derivative σ'.
///
/// `Square` may carry a clip level `K`, in which case `σ(x) = min(x², K)`; the
/// unclipped square is what the polynomial closed forms describe.
#[derive(Clone)]
pub struct Activation {
    kind: ActivationKind,
    clip: Option<f64>,
    name: String,
    custom: Option<(ScalarFn, ScalarFn)>,
}

impl Activation {
    pub fn square() -> Self {
        Self { kind: ActivationKind::Square, clip: None, name: "square".into(), custom: None }
    }

    pub fn square_clipped(k: f64) -> Self {
        assert!(k > 0.0, "clip level must be positive");
        Self { kind: ActivationKind::Square, clip: Some(k), name: format!("square-clip{k}"), custom: None }
    }

    /// `σ(x) = erf(x / √2)`.
    pub fn erf() -> Self {
        Self { kind: ActivationKind::ErfNormalized, clip: None, name: "erf".into(), custom: None }
    }

    pub fn custom(
        name: impl Into<String>,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dsigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: ActivationKind::Custom,
            clip: None,
            name: name.into(),
            custom: Some((Arc::new(sigma), Arc::new(dsigma))),
        }
    }

    pub fn from_kind(kind: ActivationKind, clip: Option<f64>) -> Option<Self> {
        match (kind, clip) {
            (ActivationKind::Square, None) => Some(Self::square()),
            (ActivationKind::Square, Some(k)) => Some(Self::square_clipped(k)),
            (ActivationKind::ErfNormalized, None) => Some(Self::erf()),
            _ => None,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn clip(&self) -> Option<f64> {
        self.clip
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Unclipped square: every moment is a polynomial in the covariance.
    pub fn is_pure_square(&self) -> bool {
        self.kind == ActivationKind::Square && self.clip.is_none()
    }

    pub fn is_erf(&self) -> bool {
        self.kind == ActivationKind::ErfNormalized
    }

    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Square => {
                let v = x * x;
                match self.clip {
                    Some(k) if v > k => k,
                    _ => v,
                }
            }
            ActivationKind::ErfNormalized => libm::erf(x * std::f64::consts::FRAC_1_SQRT_2),
            ActivationKind::Custom => (self.custom.as_ref().expect("custom activation").0)(x),
        }
    }

    #[inline]
    pub fn dsigma(&self, x: f64) -> f64 {
        match self.kind {
            ActivationKind::Square => match self.clip {
                Some(k) if x * x > k => 0.0,
                _ => 2.0 * x,
            },
            ActivationKind::ErfNormalized => {
                const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
                SQRT_2_OVER_PI * (-0.5 * x * x).exp()
            }
            ActivationKind::Custom => (self.custom.as_ref().expect("custom activation").1)(x),
        }
    }
}

impl fmt::Debug for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Activation").field("kind", &self.kind).field("clip", &self.clip).field("name", &self.name).finish()
    }
}

impl PartialEq for Activation {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.clip == other.clip && self.name == other.name
    }
}

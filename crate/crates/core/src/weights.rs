//! Edge-weight laws, vertex-weight specifications, and reproducible random
//! streams.

use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Analytic moments of a weight law. Infinite values are `f64::INFINITY`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    /// Moments of every order strictly below this one are finite.
    pub max_order: f64,
}

impl Moments {
    pub fn second_moment(&self) -> f64 {
        self.variance + self.mean * self.mean
    }

    pub fn has_finite_mean(&self) -> bool {
        self.mean.is_finite()
    }

    pub fn has_finite_variance(&self) -> bool {
        self.variance.is_finite()
    }

    /// Whether the moment of order `p` is finite.
    pub fn has_moment(&self, p: f64) -> bool {
        p < self.max_order || self.max_order.is_infinite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LawKind {
    Exponential { rate: f64 },
    /// `X = Y^(-1/alpha)` with `Y ~ Exp(1)`.
    InversePower { alpha: f64 },
    Constant { value: f64 },
    /// `X = B X'` with `B ~ Bernoulli(p)` independent of `X' ~ base`.
    BernoulliMix { p: f64, base: Box<WeightLaw> },
}

/// An edge-weight law supported on `[0, ∞)` with cached analytic moments.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightLaw {
    kind: LawKind,
    moments: Moments,
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

impl WeightLaw {
    pub fn exponential(rate: f64) -> Result<Self> {
        let rate = positive("rate", rate)?;
        Ok(WeightLaw {
            kind: LawKind::Exponential { rate },
            moments: Moments {
                mean: 1.0 / rate,
                variance: 1.0 / (rate * rate),
                max_order: f64::INFINITY,
            },
        })
    }

    pub fn inverse_power(alpha: f64) -> Result<Self> {
        let alpha = positive("alpha", alpha)?;
        // E[Y^(-k/alpha)] = Γ(1 - k/alpha) for k < alpha.
        let raw = |k: f64| {
            if k < alpha {
                libm::tgamma(1.0 - k / alpha)
            } else {
                f64::INFINITY
            }
        };
        let mean = raw(1.0);
        let variance = if 2.0 < alpha {
            raw(2.0) - mean * mean
        } else {
            f64::INFINITY
        };
        Ok(WeightLaw {
            kind: LawKind::InversePower { alpha },
            moments: Moments {
                mean,
                variance,
                max_order: alpha,
            },
        })
    }

    /// Point mass at `value`. Degenerate; experiment runners accept it only
    /// with the fixture flag set.
    pub fn constant(value: f64) -> Result<Self> {
        let value = positive("constant", value)?;
        Ok(WeightLaw {
            kind: LawKind::Constant { value },
            moments: Moments {
                mean: value,
                variance: 0.0,
                max_order: f64::INFINITY,
            },
        })
    }

    pub fn bernoulli_mix(p: f64, base: WeightLaw) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "bernoulli p must lie in (0,1), got {p}"
            )));
        }
        let b = base.moments;
        let mean = p * b.mean;
        let variance = if b.mean.is_finite() && b.variance.is_finite() {
            p * b.second_moment() - p * p * b.mean * b.mean
        } else {
            f64::INFINITY
        };
        Ok(WeightLaw {
            kind: LawKind::BernoulliMix {
                p,
                base: Box::new(base),
            },
            moments: Moments {
                mean,
                variance,
                max_order: b.max_order,
            },
        })
    }

    pub fn kind(&self) -> &LawKind {
        &self.kind
    }

    pub fn moments(&self) -> Moments {
        self.moments
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.kind, LawKind::Constant { .. })
    }

    /// Whether every draw is strictly positive almost surely.
    pub fn strictly_positive(&self) -> bool {
        !matches!(self.kind, LawKind::BernoulliMix { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            LawKind::Exponential { rate } => {
                let e: f64 = Exp::new(*rate).expect("validated rate").sample(rng);
                e
            }
            LawKind::InversePower { alpha } => {
                let u: f64 = rng.sample(Open01);
                (-u.ln()).powf(-1.0 / alpha)
            }
            LawKind::Constant { value } => *value,
            LawKind::BernoulliMix { p, base } => {
                if rng.random::<f64>() < *p {
                    base.sample(rng)
                } else {
                    0.0
                }
            }
        }
    }
}

/// Exact analytic `(mean, variance, max finite moment order)`.
pub fn law_moments(law: &WeightLaw) -> Moments {
    law.moments()
}

impl fmt::Display for WeightLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            LawKind::Exponential { rate } => write!(f, "exp:{rate}"),
            LawKind::InversePower { alpha } => write!(f, "invpow:{alpha}"),
            LawKind::Constant { value } => write!(f, "const:{value}"),
            LawKind::BernoulliMix { p, base } => write!(f, "bern:{p}:{base}"),
        }
    }
}

impl FromStr for WeightLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: &str| Error::BadLaw {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let lower = s.trim().to_ascii_lowercase();
        let (head, rest) = lower.split_once(':').ok_or_else(|| bad("missing `:`"))?;
        let num = |t: &str| -> Result<f64> {
            t.trim()
                .parse::<f64>()
                .map_err(|_| bad(&format!("`{t}` is not a number")))
        };
        let wrap = |r: Result<WeightLaw>| r.map_err(|e| bad(&e.to_string()));
        match head.trim() {
            "exp" => wrap(WeightLaw::exponential(num(rest)?)),
            "invpow" => wrap(WeightLaw::inverse_power(num(rest)?)),
            "const" => wrap(WeightLaw::constant(num(rest)?)),
            "bern" => {
                let (p, base) = rest
                    .split_once(':')
                    .ok_or_else(|| bad("bern needs a base law"))?;
                let base: WeightLaw = base.parse().map_err(|e: Error| bad(&e.to_string()))?;
                wrap(WeightLaw::bernoulli_mix(num(p)?, base))
            }
            other => Err(bad(&format!("unknown law `{other}`"))),
        }
    }
}

/// How the vertex weights θ are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum VertexWeightSpec {
    Constant(f64),
    Iid(WeightLaw),
    Explicit(Vec<f64>),
}

impl VertexWeightSpec {
    pub fn constant(c: f64) -> Result<Self> {
        Ok(VertexWeightSpec::Constant(positive("theta constant", c)?))
    }

    pub fn iid(law: WeightLaw) -> Result<Self> {
        if !law.strictly_positive() {
            return Err(Error::InvalidParameter(format!(
                "vertex-weight law {law} has an atom at 0"
            )));
        }
        Ok(VertexWeightSpec::Iid(law))
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, VertexWeightSpec::Constant(_))
    }
}

impl fmt::Display for VertexWeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VertexWeightSpec::Constant(c) => write!(f, "const:{c}"),
            VertexWeightSpec::Iid(law) => write!(f, "iid:{law}"),
            VertexWeightSpec::Explicit(v) => {
                write!(f, "explicit:")?;
                for (k, x) in v.iter().enumerate() {
                    if k > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for VertexWeightSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::BadVertexSpec {
            input: s.to_string(),
            reason,
        };
        let trimmed = s.trim();
        let (head, rest) = trimmed
            .split_once(':')
            .ok_or_else(|| bad("missing `:`".into()))?;
        match head.trim().to_ascii_lowercase().as_str() {
            "const" => {
                let c = rest
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("`{rest}` is not a number")))?;
                VertexWeightSpec::constant(c).map_err(|e| bad(e.to_string()))
            }
            "iid" => {
                let law: WeightLaw = rest.parse().map_err(|e: Error| bad(e.to_string()))?;
                VertexWeightSpec::iid(law).map_err(|e| bad(e.to_string()))
            }
            "explicit" => {
                let v = rest
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<f64>()
                            .map_err(|_| bad(format!("`{t}` is not a number")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(VertexWeightSpec::Explicit(v))
            }
            other => Err(bad(format!("unknown vertex-weight form `{other}`"))),
        }
    }
}

/// Identifies a substream: which experiment, which trial, which size, and a
/// lane for independent purposes within one trial.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub tag: String,
    pub trial: u64,
    pub n: u64,
    pub lane: u64,
}

/// A deterministic random stream derived from a master seed and a
/// [`StreamId`]. Streams are counter-based: the id selects a ChaCha stream,
/// so no state is shared between streams.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub id: StreamId,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, tag: &str, trial: u64, n: u64) -> Self {
        RngStream {
            master_seed,
            id: StreamId {
                tag: tag.to_string(),
                trial,
                n,
                lane: 0,
            },
        }
    }

    /// A sibling stream on a different lane of the same id.
    pub fn lane(&self, lane: u64) -> Self {
        let mut s = self.clone();
        s.id.lane = lane;
        s
    }

    /// 64-bit stream selector; FNV-1a over the tag, then splitmix over the
    /// numeric fields.
    pub fn stream_key(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.id.tag.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        for v in [self.id.trial, self.id.n, self.id.lane] {
            h = splitmix64(h ^ splitmix64(v));
        }
        h
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_key());
        rng
    }
}

/// `n × n` matrix of i.i.d. draws from `law`, filled row by row.
pub fn sample_edge_matrix(law: &WeightLaw, n: usize, stream: &RngStream) -> Result<Matrix> {
    if n < 2 {
        return Err(Error::TooSmall(n));
    }
    let mut rng = stream.rng();
    let data: Vec<f64> = (0..n * n).map(|_| law.sample(&mut rng)).collect();
    Matrix::from_vec(n, data)
}

/// Strictly positive vertex weights.
pub fn sample_vertex_weights(spec: &VertexWeightSpec, n: usize, stream: &RngStream) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::TooSmall(n));
    }
    match spec {
        VertexWeightSpec::Constant(c) => Ok(vec![*c; n]),
        VertexWeightSpec::Iid(law) => {
            let mut rng = stream.rng();
            Ok((0..n)
                .map(|_| loop {
                    let x = law.sample(&mut rng);
                    if x > 0.0 && x.is_finite() {
                        break x;
                    }
                })
                .collect())
        }
        VertexWeightSpec::Explicit(v) => {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: v.len(),
                });
            }
            if let Some((index, &value)) = v
                .iter()
                .enumerate()
                .find(|(_, x)| !(x.is_finite() && **x > 0.0))
            {
                return Err(Error::NonPositive { index, value });
            }
            Ok(v.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn stream(seed: u64) -> RngStream {
        RngStream::new(seed, "test", 0, 0)
    }

    // Composite Simpson on E[Y^(-k/alpha)] = ∫ y^(-k/alpha) e^(-y) dy after
    // substituting y = t^m to tame the singularity at 0.
    fn quad_raw_moment(k: f64, alpha: f64) -> f64 {
        let m = 4.0;
        let f = |t: f64| {
            if t == 0.0 {
                return 0.0;
            }
            let y = t.powf(m);
            y.powf(-k / alpha) * (-y).exp() * m * t.powf(m - 1.0)
        };
        let (a, b, steps) = (0.0_f64, 60.0_f64.powf(1.0 / m), 200_000usize);
        let h = (b - a) / steps as f64;
        let mut s = f(a) + f(b);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn exponential_moments() {
        let m = law_moments(&WeightLaw::exponential(1.0).unwrap());
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.variance, 1.0);
        assert!(m.max_order.is_infinite());
    }

    #[test]
    fn inverse_power_heavy_tail_has_infinite_moments() {
        let m = law_moments(&WeightLaw::inverse_power(0.5).unwrap());
        assert!(m.mean.is_infinite());
        assert!(m.variance.is_infinite());
        assert_eq!(m.max_order, 0.5);
    }

    #[test]
    fn inverse_power_moments_match_quadrature() {
        let m1 = quad_raw_moment(1.0, 3.0);
        let m2 = quad_raw_moment(2.0, 3.0);
        // frozen from the quadrature above
        assert_abs_diff_eq!(m1, 1.354_117_939_426_4, epsilon = 1e-6);
        let m = law_moments(&WeightLaw::inverse_power(3.0).unwrap());
        assert_abs_diff_eq!(m.mean, m1, epsilon = 1e-6);
        assert_abs_diff_eq!(m.variance, m2 - m1 * m1, epsilon = 1e-5);
        assert_abs_diff_eq!(
            m.variance,
            libm::tgamma(1.0 / 3.0) - libm::tgamma(2.0 / 3.0).powi(2),
            epsilon = 1e-12
        );
        assert_eq!(m.max_order, 3.0);
    }

    #[test]
    fn bernoulli_mix_moments() {
        let base = WeightLaw::exponential(2.0).unwrap();
        let m = law_moments(&WeightLaw::bernoulli_mix(0.3, base).unwrap());
        // base: mean 0.5, second moment 0.5
        assert_abs_diff_eq!(m.mean, 0.15, epsilon = 1e-15);
        assert_abs_diff_eq!(m.variance, 0.3 * 0.5 - 0.09 * 0.25, epsilon = 1e-15);
        assert!(m.max_order.is_infinite());
    }

    #[test]
    fn moments_agree_with_monte_carlo() {
        let laws = [
            "exp:2",
            "invpow:6",
            "bern:0.4:exp:1",
            "bern:0.7:invpow:5",
        ];
        let samples = 1_000_000;
        for (k, s) in laws.iter().enumerate() {
            let law: WeightLaw = s.parse().unwrap();
            let mut rng = RngStream::new(99, "mc", k as u64, 0).rng();
            let xs: Vec<f64> = (0..samples).map(|_| law.sample(&mut rng)).collect();
            let mean = xs.iter().sum::<f64>() / samples as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
            let m = law.moments();
            let se = (m.variance / samples as f64).sqrt();
            assert!((mean - m.mean).abs() < 5.0 * se, "{s}: mean {mean} vs {}", m.mean);
            assert!(
                (var - m.variance).abs() < 0.02 * m.variance,
                "{s}: var {var} vs {}",
                m.variance
            );
        }
    }

    #[test]
    fn constant_edge_matrix_is_all_ones() {
        let x = sample_edge_matrix(&WeightLaw::constant(1.0).unwrap(), 3, &stream(1)).unwrap();
        assert_eq!(x, Matrix::filled(3, 1.0));
    }

    #[test]
    fn edge_matrix_mean_concentrates() {
        // 10^6 entries, sd of the mean 0.001; 0.01 is 10 sd.
        let x = sample_edge_matrix(&WeightLaw::exponential(1.0).unwrap(), 1000, &stream(5)).unwrap();
        let mean = x.as_slice().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn edge_matrix_is_deterministic() {
        let law = WeightLaw::exponential(1.0).unwrap();
        let a = sample_edge_matrix(&law, 5, &stream(11)).unwrap();
        let b = sample_edge_matrix(&law, 5, &stream(11)).unwrap();
        assert_eq!(a, b);
        let c = sample_edge_matrix(&law, 5, &stream(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn edge_matrix_rejects_tiny_n() {
        let law = WeightLaw::exponential(1.0).unwrap();
        assert_eq!(sample_edge_matrix(&law, 1, &stream(0)), Err(Error::TooSmall(1)));
    }

    #[test]
    fn sampled_matrices_nonnegative_and_nonzero() {
        for law in ["exp:1", "invpow:0.5", "bern:0.1:exp:1", "invpow:2"] {
            let law: WeightLaw = law.parse().unwrap();
            for seed in 0..100 {
                let x = sample_edge_matrix(&law, 2, &stream(seed)).unwrap();
                assert!(x.as_slice().iter().all(|v| *v >= 0.0 && v.is_finite()));
                if !matches!(law.kind(), LawKind::BernoulliMix { .. }) {
                    assert!(x.as_slice().iter().any(|v| *v > 0.0));
                }
            }
        }
        // Bernoulli mixes may zero out a tiny matrix, but not a big one.
        let law: WeightLaw = "bern:0.1:exp:1".parse().unwrap();
        for seed in 0..100 {
            let x = sample_edge_matrix(&law, 10, &stream(seed)).unwrap();
            assert!(x.as_slice().iter().any(|v| *v > 0.0));
        }
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let law = WeightLaw::exponential(1.0).unwrap();
        let a = RngStream::new(3, "fig1", 0, 400);
        let b = RngStream::new(3, "fig1", 1, 400);
        let c = RngStream::new(3, "fig2", 0, 400);
        let d = a.lane(1);
        let base = sample_edge_matrix(&law, 400, &a).unwrap();
        for other in [b, c, d] {
            let o = sample_edge_matrix(&law, 400, &other).unwrap();
            let r = pearson(&base.as_slice()[..100_000], &o.as_slice()[..100_000]);
            assert!(r.abs() < 0.02, "correlation {r}");
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx).powi(2);
            syy += (b - my).powi(2);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn vertex_weights() {
        let s = stream(0);
        assert_eq!(
            sample_vertex_weights(&VertexWeightSpec::constant(1.0).unwrap(), 4, &s).unwrap(),
            vec![1.0; 4]
        );
        assert_eq!(
            sample_vertex_weights(&VertexWeightSpec::Explicit(vec![2.0, 3.0]), 2, &s).unwrap(),
            vec![2.0, 3.0]
        );
        assert!(matches!(
            sample_vertex_weights(&VertexWeightSpec::Explicit(vec![2.0, 3.0]), 3, &s),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            sample_vertex_weights(&VertexWeightSpec::Explicit(vec![2.0, 0.0]), 2, &s),
            Err(Error::NonPositive { index: 1, .. })
        ));
        let spec = VertexWeightSpec::iid(WeightLaw::exponential(1.0).unwrap()).unwrap();
        let theta = sample_vertex_weights(&spec, 100_000, &s).unwrap();
        assert!(theta.iter().all(|t| *t > 0.0));
        let mean = theta.iter().sum::<f64>() / 1e5;
        // sd of the mean is 0.00316; 0.02 is over 6 sd.
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn iid_vertex_law_must_be_positive() {
        let law: WeightLaw = "bern:0.5:exp:1".parse().unwrap();
        assert!(VertexWeightSpec::iid(law).is_err());
    }

    #[test]
    fn law_grammar() {
        assert_eq!("EXP:2".parse::<WeightLaw>().unwrap(), WeightLaw::exponential(2.0).unwrap());
        assert_eq!(
            "Bern:0.5:InvPow:3".parse::<WeightLaw>().unwrap().to_string(),
            "bern:0.5:invpow:3"
        );
        for bad in ["", "exp", "exp:-1", "gauss:1", "bern:2:exp:1", "bern:0.5", "invpow:x"] {
            let err = bad.parse::<WeightLaw>().unwrap_err();
            assert!(err.to_string().contains("valid forms"), "{bad}: {err}");
        }
        assert!(WeightLaw::constant(1.0).unwrap().is_degenerate());
        assert!(!WeightLaw::exponential(1.0).unwrap().is_degenerate());
    }

    #[test]
    fn vertex_grammar() {
        for s in ["const:1", "iid:exp:1", "explicit:1,2.5,3"] {
            let v: VertexWeightSpec = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert!("iid:bern:0.5:exp:1".parse::<VertexWeightSpec>().is_err());
        assert!("const:0".parse::<VertexWeightSpec>().is_err());
        assert!("uniform:1".parse::<VertexWeightSpec>().is_err());
    }
}

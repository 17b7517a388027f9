use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Noise parameter vector `beta = [mu, vec(Sigma), a, b]`.
///
/// The state-noise block comes first (`n` coordinates), the output-noise block
/// second (`p` coordinates). Bounds may be infinite; an all-infinite box is the
/// plain Gaussian case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseParamsRepr", into = "NoiseParamsRepr")]
pub struct NoiseParams {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl NoiseParams {
    pub fn new(
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidParams("zero-dimensional noise".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::dim("sigma", d, sigma.nrows().max(sigma.ncols())));
        }
        if lower.len() != d {
            return Err(Error::dim("lower bounds", d, lower.len()));
        }
        if upper.len() != d {
            return Err(Error::dim("upper bounds", d, upper.len()));
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mu/sigma entries".into()));
        }
        for i in 0..d {
            let (a, b) = (lower[i], upper[i]);
            if a.is_nan() || b.is_nan() {
                return Err(Error::InvalidParams(format!("NaN bound at coordinate {i}")));
            }
            if a == f64::INFINITY || b == f64::NEG_INFINITY {
                return Err(Error::InvalidParams(format!(
                    "bound at coordinate {i} points the wrong way ({a}, {b})"
                )));
            }
            if a >= b {
                return Err(Error::InvalidParams(format!(
                    "lower bound {a} >= upper bound {b} at coordinate {i}"
                )));
            }
        }
        check_spd(&sigma)?;
        Ok(Self {
            mu,
            sigma,
            lower,
            upper,
        })
    }

    /// Untruncated Gaussian, i.e. every bound infinite.
    pub fn gaussian(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        Self::new(
            mu,
            sigma,
            DVector::from_element(d, f64::NEG_INFINITY),
            DVector::from_element(d, f64::INFINITY),
        )
    }

    /// Scalar convenience constructor.
    pub fn scalar(mu: f64, sigma2: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, sigma2),
            DVector::from_element(1, a),
            DVector::from_element(1, b),
        )
    }

    /// Diagonal covariance with the given variances.
    pub fn diagonal(mu: &[f64], var: &[f64], lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(mu),
            DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            DVector::from_column_slice(lower),
            DVector::from_column_slice(upper),
        )
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn with_bounds(&self, lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        Self::new(self.mu.clone(), self.sigma.clone(), lower, upper)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    pub fn all_bounds_infinite(&self) -> bool {
        self.lower.iter().all(|a| *a == f64::NEG_INFINITY)
            && self.upper.iter().all(|b| *b == f64::INFINITY)
    }

    pub fn is_diagonal(&self) -> bool {
        self.components().iter().all(|c| c.len() == 1)
    }

    /// Partition of the coordinates into groups that are mutually independent
    /// under `Sigma` (connected components of its off-diagonal sparsity
    /// pattern). Box truncation preserves this independence.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let d = self.dim();
        let mut label: Vec<usize> = (0..d).collect();
        fn root(label: &mut [usize], mut i: usize) -> usize {
            while label[i] != i {
                label[i] = label[label[i]];
                i = label[i];
            }
            i
        }
        for i in 0..d {
            for j in (i + 1)..d {
                if !negligible_coupling(&self.sigma, i, j) {
                    let (ri, rj) = (root(&mut label, i), root(&mut label, j));
                    if ri != rj {
                        label[rj.max(ri)] = rj.min(ri);
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; d];
        for i in 0..d {
            let r = root(&mut label, i);
            if slot[r] == usize::MAX {
                slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[r]].push(i);
        }
        groups
    }

    /// True when no covariance couples `range` with the remaining coordinates.
    pub fn is_block_separable(&self, range: std::ops::Range<usize>) -> bool {
        let d = self.dim();
        (0..d).all(|i| {
            (0..d).all(|j| {
                range.contains(&i) == range.contains(&j) || negligible_coupling(&self.sigma, i, j)
            })
        })
    }

    /// Marginal parameters of a coordinate subset. Only a true truncated
    /// marginal when the subset is separable from the rest.
    pub fn select(&self, idx: &[usize]) -> NoiseParams {
        let k = idx.len();
        NoiseParams {
            mu: DVector::from_fn(k, |i, _| self.mu[idx[i]]),
            sigma: DMatrix::from_fn(k, k, |i, j| self.sigma[(idx[i], idx[j])]),
            lower: DVector::from_fn(k, |i, _| self.lower[idx[i]]),
            upper: DVector::from_fn(k, |i, _| self.upper[idx[i]]),
        }
    }

    /// `[mu, vec(Sigma), a, b]` with `vec` stacking columns.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim() * (3 + self.dim()));
        out.extend(self.mu.iter());
        out.extend(self.sigma.iter());
        out.extend(self.lower.iter());
        out.extend(self.upper.iter());
        out
    }

    /// Column names matching [`NoiseParams::flatten`] with `sigma_ij` row-major
    /// naming (symmetric, so the order of equal entries is immaterial).
    pub fn flat_names(d: usize) -> Vec<String> {
        let mut names: Vec<String> = (1..=d).map(|i| format!("mu_{i}")).collect();
        for j in 1..=d {
            for i in 1..=d {
                names.push(format!("sigma_{i}{j}"));
            }
        }
        names.extend((1..=d).map(|i| format!("a_{i}")));
        names.extend((1..=d).map(|i| format!("b_{i}")));
        names
    }
}

fn negligible_coupling(sigma: &DMatrix<f64>, i: usize, j: usize) -> bool {
    let scale = (sigma[(i, i)] * sigma[(j, j)]).abs().sqrt();
    sigma[(i, j)].abs() <= 1e-14 * scale && sigma[(j, i)].abs() <= 1e-14 * scale
}

pub(crate) fn check_spd(sigma: &DMatrix<f64>) -> Result<()> {
    let d = sigma.nrows();
    let scale = sigma.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in (i + 1)..d {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale.max(1e-300) {
                return Err(Error::NotPositiveDefinite(format!(
                    "sigma not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let trace = sigma.trace();
    let eig = sigma.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(trace > 0.0) || min <= 1e-12 * trace {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue {min:e} vs trace {trace:e}"
        )));
    }
    Ok(())
}

/// Extended real for config and results files: finite values as JSON numbers,
/// infinities as the strings `"-inf"` / `"+inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtReal(pub f64);

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0.is_nan() {
            Err(serde::ser::Error::custom("NaN is not an extended real"))
        } else {
            s.serialize_str(&fmt_ext(self.0))
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(ExtReal(v)),
            Raw::Str(s) => parse_ext(&s)
                .map(ExtReal)
                .ok_or_else(|| serde::de::Error::custom(format!("bad extended real {s:?}"))),
        }
    }
}

/// Formats finite values with 17 significant digits and infinities as
/// `-inf` / `+inf`.
pub fn fmt_ext(v: f64) -> String {
    if v == f64::INFINITY {
        "+inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn parse_ext(s: &str) -> Option<f64> {
    match s.trim().to_ascii_lowercase().as_str() {
        "+inf" | "inf" | "infinity" | "+infinity" => Some(f64::INFINITY),
        "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
        other => other.parse::<f64>().ok().filter(|v| !v.is_nan()),
    }
}

#[derive(Serialize, Deserialize)]
struct NoiseParamsRepr {
    mu: Vec<f64>,
    /// Row-major rows.
    sigma: Vec<Vec<f64>>,
    lower: Vec<ExtReal>,
    upper: Vec<ExtReal>,
}

impl TryFrom<NoiseParamsRepr> for NoiseParams {
    type Error = Error;

    fn try_from(r: NoiseParamsRepr) -> Result<Self> {
        let d = r.mu.len();
        if r.sigma.len() != d || r.sigma.iter().any(|row| row.len() != d) {
            return Err(Error::dim("sigma rows", d, r.sigma.len()));
        }
        NoiseParams::new(
            DVector::from_vec(r.mu),
            DMatrix::from_fn(d, d, |i, j| r.sigma[i][j]),
            DVector::from_iterator(r.lower.len(), r.lower.iter().map(|e| e.0)),
            DVector::from_iterator(r.upper.len(), r.upper.iter().map(|e| e.0)),
        )
    }
}

impl From<NoiseParams> for NoiseParamsRepr {
    fn from(p: NoiseParams) -> Self {
        let d = p.dim();
        NoiseParamsRepr {
            mu: p.mu.iter().cloned().collect(),
            sigma: (0..d)
                .map(|i| (0..d).map(|j| p.sigma[(i, j)]).collect())
                .collect(),
            lower: p.lower.iter().map(|v| ExtReal(*v)).collect(),
            upper: p.upper.iter().map(|v| ExtReal(*v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_and_misdirected_bounds() {
        assert!(NoiseParams::scalar(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(NoiseParams::scalar(0.0, 1.0, f64::INFINITY, f64::INFINITY).is_err());
        assert!(NoiseParams::scalar(0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY).is_err());
        assert!(NoiseParams::scalar(0.0, 1.0, -1.0, 1.0).is_ok());
    }

    #[test]
    fn rejects_indefinite_sigma() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let r = NoiseParams::gaussian(DVector::zeros(2), s);
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
        assert!(NoiseParams::scalar(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn components_follow_sparsity() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.2, 0.0, 1.0, 0.0, 0.2, 0.0, 1.0]);
        let p = NoiseParams::gaussian(DVector::zeros(3), s).unwrap();
        assert_eq!(p.components(), vec![vec![0, 2], vec![1]]);
        assert!(p.is_block_separable(1..2));
        assert!(!p.is_block_separable(0..1));
        assert!(!p.is_diagonal());
    }

    #[test]
    fn json_uses_inf_strings() {
        let p = NoiseParams::diagonal(&[-0.3, -0.1], &[1.0, 0.5], &[-1.5, f64::NEG_INFINITY], &[2.5, f64::INFINITY])
            .unwrap();
        let js = serde_json::to_string(&p).unwrap();
        assert!(js.contains("\"-inf\"") && js.contains("\"+inf\""), "{js}");
        let back: NoiseParams = serde_json::from_str(&js).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn ext_text_round_trip() {
        for v in [f64::NEG_INFINITY, -1.5, 0.1 + 0.2, 1e-300, f64::INFINITY] {
            assert_eq!(parse_ext(&fmt_ext(v)), Some(v));
        }
        assert_eq!(parse_ext("nan"), None);
    }
}

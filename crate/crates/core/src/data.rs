//! Synthetic two-domain classification data.
//!
//! Classes are isotropic Gaussians. The target domain draws fresh samples
//! from the same Gaussians and moves them by a rotation about the centre of
//! the class means, a scale and a translation, then flips a fraction of the
//! labels. Optionally both domains are embedded into a higher dimension by a
//! random map with orthonormal rows.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(DomainTag::Source),
            "target" => Some(DomainTag::Target),
            _ => None,
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(Split::Labeled),
            "unlabeled" => Some(Split::Unlabeled),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation: Vec::new(),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// One mean per class, all of the same (base) dimension.
    pub means: Vec<Vec<f64>>,
    pub std: f64,
    pub shift: DomainShift,
    pub label_noise: f64,
    /// Embed the base dimension into this many coordinates; `None` keeps it.
    pub embed_dim: Option<usize>,
}

impl DomainSpec {
    /// Class means evenly spaced on a circle of `radius` in the plane.
    pub fn circle(classes: usize, radius: f64, std: f64) -> Self {
        let means = (0..classes)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self {
            means,
            std,
            shift: DomainShift::identity(),
            label_noise: 0.0,
            embed_dim: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn base_dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn out_dim(&self) -> usize {
        self.embed_dim.unwrap_or_else(|| self.base_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        let d = self.base_dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::config("means", "class means must share a positive dimension"));
        }
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(Error::config("class_std", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::config("label_noise", "must lie in [0, 1)"));
        }
        if !(self.shift.scale > 0.0) || !self.shift.scale.is_finite() {
            return Err(Error::config("scale", "must be positive"));
        }
        if !self.shift.rotation_deg.is_finite() {
            return Err(Error::config("rotation_deg", "must be finite"));
        }
        if self.shift.rotation_deg != 0.0 && d < 2 {
            return Err(Error::config("rotation_deg", "rotation needs at least 2 dimensions"));
        }
        if !self.shift.translation.is_empty() && self.shift.translation.len() != d {
            return Err(Error::config(
                "translation",
                format!("expected {d} components, got {}", self.shift.translation.len()),
            ));
        }
        if let Some(e) = self.embed_dim {
            if e < d {
                return Err(Error::config("embed_dim", format!("must be at least {d}")));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> Vec<f64> {
        let d = self.base_dim();
        let mut c = vec![0.0; d];
        for m in &self.means {
            for (ci, mi) in c.iter_mut().zip(m) {
                *ci += mi / self.classes() as f64;
            }
        }
        c
    }

    /// Applies the domain shift to a point in the base space.
    pub fn shift_point(&self, x: &[f64]) -> Vec<f64> {
        let center = self.center();
        let mut v: Vec<f64> = x.iter().zip(&center).map(|(a, c)| a - c).collect();
        if v.len() >= 2 && self.shift.rotation_deg != 0.0 {
            let (s, c) = self.shift.rotation_deg.to_radians().sin_cos();
            let (a, b) = (v[0], v[1]);
            v[0] = c * a - s * b;
            v[1] = s * a + c * b;
        }
        v.iter()
            .enumerate()
            .map(|(i, vi)| {
                let t = self.shift.translation.get(i).copied().unwrap_or(0.0);
                center[i] + self.shift.scale * vi + t
            })
            .collect()
    }
}

/// `base × embed` matrix with orthonormal rows.
fn orthonormal_embedding(rng: &mut impl Rng, base: usize, embed: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(base);
    while rows.len() < base {
        let mut v: Vec<f64> = (0..embed).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let p = crate::tensor::dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = crate::tensor::l2_norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            rows.push(v);
        }
    }
    Tensor::from_rows(&rows).expect("rectangular")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<DomainTag>,
    pub splits: Vec<Split>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        domains: Vec<DomainTag>,
        splits: Vec<Split>,
        classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || domains.len() != n || splits.len() != n {
            return Err(Error::Data(format!(
                "{n} feature rows but {} labels, {} domain tags, {} split tags",
                labels.len(),
                domains.len(),
                splits.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            domains,
            splits,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Features and labels of the rows tagged `split`.
    pub fn part(&self, split: Split) -> (Tensor, Vec<usize>) {
        let idx = self.indices(split);
        let x = self.features.select_rows(&idx).expect("valid indices");
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Row-wise concatenation (for instance source plus labeled target).
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        Dataset::new(
            self.features.vstack(&other.features)?,
            [self.labels.clone(), other.labels.clone()].concat(),
            [self.domains.clone(), other.domains.clone()].concat(),
            [self.splits.clone(), other.splits.clone()].concat(),
            self.classes.max(other.classes),
        )
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.features.select_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            idx.iter().map(|&i| self.domains[i]).collect(),
            idx.iter().map(|&i| self.splits[i]).collect(),
            self.classes,
        )
    }
}

/// Samples `n` points per class in each domain. Source rows are all tagged
/// labeled; target rows start unlabeled until [`split_ssda`] assigns splits.
pub fn gen_two_domain(spec: &DomainSpec, n_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::config("n_per_class", "must be at least 1"));
    }
    let c = spec.classes();
    let d = spec.base_dim();
    let noise = Normal::new(0.0, spec.std).map_err(|e| Error::config("class_std", e.to_string()))?;
    let embed = spec.embed_dim.map(|e| {
        let mut rng = seed::rng(seed, &[seed::stream::DATA, 0]);
        orthonormal_embedding(&mut rng, d, e)
    });
    let project = |rows: Vec<Vec<f64>>| -> Result<Tensor> {
        let t = Tensor::from_rows(&rows)?;
        match &embed {
            Some(e) => t.matmul(e),
            None => Ok(t),
        }
    };

    let sample_domain = |stream: u64, shifted: bool| -> Result<(Tensor, Vec<usize>)> {
        let mut rng = seed::rng(seed, &[seed::stream::DATA, stream]);
        let mut rows = Vec::with_capacity(c * n_per_class);
        let mut labels = Vec::with_capacity(c * n_per_class);
        for (k, mean) in spec.means.iter().enumerate() {
            for _ in 0..n_per_class {
                let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
                rows.push(if shifted { spec.shift_point(&x) } else { x });
                let mut y = k;
                if shifted && spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                    y = (k + rng.random_range(1..c)) % c;
                }
                labels.push(y);
            }
        }
        Ok((project(rows)?, labels))
    };

    let (xs, ys) = sample_domain(1, false)?;
    let (xt, yt) = sample_domain(2, true)?;
    let n = c * n_per_class;
    let source = Dataset::new(xs, ys, vec![DomainTag::Source; n], vec![Split::Labeled; n], c)?;
    let target = Dataset::new(xt, yt, vec![DomainTag::Target; n], vec![Split::Unlabeled; n], c)?;
    Ok((source, target))
}

/// Tags exactly `shots` rows per class as labeled, a `test_fraction` of each
/// class's remainder as test, and the rest as unlabeled.
pub fn split_ssda(target: &Dataset, shots: usize, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if shots == 0 {
        return Err(Error::config("shots", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction", "must lie in [0, 1)"));
    }
    let mut rng = seed::rng(seed, &[seed::stream::SPLIT]);
    let mut splits = vec![Split::Unlabeled; target.len()];
    for k in 0..target.classes {
        let mut idx: Vec<usize> = (0..target.len()).filter(|&i| target.labels[i] == k).collect();
        if idx.len() < shots + 1 {
            return Err(Error::Data(format!(
                "class {k} has {} samples, need at least {}",
                idx.len(),
                shots + 1
            )));
        }
        idx.shuffle(&mut rng);
        let rest = idx.len() - shots;
        let n_test = ((rest as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(rest - 1);
        for (j, &i) in idx.iter().enumerate() {
            splits[i] = if j < shots {
                Split::Labeled
            } else if j < shots + n_test {
                Split::Test
            } else {
                Split::Unlabeled
            };
        }
    }
    let mut out = target.clone();
    out.splits = splits;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub weak_std: f64,
    pub strong_std: f64,
    pub mask: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

impl AugmentSpec {
    pub fn new(weak_std: f64, strong_std: f64, mask: f64) -> Result<Self> {
        let s = Self {
            weak_std,
            strong_std,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_std >= 0.0) {
            return Err(Error::config("aug_weak_std", "must be non-negative"));
        }
        if !(self.strong_std >= self.weak_std) || !self.strong_std.is_finite() {
            return Err(Error::config("aug_strong_std", "must be at least aug_weak_std"));
        }
        if !(0.0..=1.0).contains(&self.mask) {
            return Err(Error::config("aug_mask", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Weak: Gaussian noise with `weak_std`. Strong: Gaussian noise with
/// `strong_std`, then each coordinate is zeroed with probability `mask`.
pub fn augment(x: &Tensor, spec: &AugmentSpec, strength: Strength, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed, &[seed::stream::AUGMENT]);
    let mut out = x.clone();
    let std = match strength {
        Strength::Weak => spec.weak_std,
        Strength::Strong => spec.strong_std,
    };
    if std > 0.0 {
        for v in out.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    if strength == Strength::Strong && spec.mask > 0.0 {
        for v in out.data_mut() {
            if rng.random::<f64>() < spec.mask {
                *v = 0.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DomainSpec {
        DomainSpec::circle(5, 1.0, 0.25)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_two_domain(&spec(), 20, 4).unwrap();
        let b = gen_two_domain(&spec(), 20, 4).unwrap();
        let c = gen_two_domain(&spec(), 20, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.features, c.0.features);
        assert_eq!(a.0.len(), 100);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut s = spec();
        s.std = 0.0;
        assert!(gen_two_domain(&s, 5, 0).unwrap_err().is_config());
        let mut s = spec();
        s.means.truncate(1);
        assert!(s.validate().is_err());
        let mut s = spec();
        s.label_noise = 1.0;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.shift.translation = vec![1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn rotation_180_reflects_about_center() {
        let mut s = spec();
        s.shift.rotation_deg = 180.0;
        let c = s.center();
        for m in &s.means {
            let t = s.shift_point(m);
            for i in 0..2 {
                assert!((t[i] - c[i] + (m[i] - c[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_counts_and_partition() {
        let (_, t) = gen_two_domain(&spec(), 30, 1).unwrap();
        for shots in [1, 3] {
            let s = split_ssda(&t, shots, 0.3, 9).unwrap();
            assert_eq!(s.count(Split::Labeled), 5 * shots);
            assert_eq!(
                s.count(Split::Labeled) + s.count(Split::Unlabeled) + s.count(Split::Test),
                s.len()
            );
            for k in 0..5 {
                let n = s
                    .indices(Split::Labeled)
                    .iter()
                    .filter(|&&i| s.labels[i] == k)
                    .count();
                assert_eq!(n, shots);
            }
        }
        assert_eq!(split_ssda(&t, 3, 0.3, 9).unwrap(), split_ssda(&t, 3, 0.3, 9).unwrap());
    }

    #[test]
    fn split_needs_enough_samples() {
        let (_, t) = gen_two_domain(&spec(), 3, 1).unwrap();
        assert!(matches!(split_ssda(&t, 3, 0.2, 0), Err(Error::Data(_))));
    }

    #[test]
    fn augment_edge_cases() {
        let x = Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let a = AugmentSpec::new(0.0, 0.3, 1.0).unwrap();
        assert_eq!(augment(&x, &a, Strength::Weak, 1), x);
        assert!(augment(&x, &a, Strength::Strong, 1).data().iter().all(|&v| v == 0.0));
        let a = AugmentSpec::new(0.05, 0.3, 0.25).unwrap();
        let s1 = augment(&x, &a, Strength::Strong, 7);
        assert_eq!(s1, augment(&x, &a, Strength::Strong, 7));
        assert_ne!(s1, augment(&x, &a, Strength::Strong, 8));
        assert_eq!(s1.shape(), x.shape());
        assert!(AugmentSpec::new(0.3, 0.1, 0.0).is_err());
    }

    #[test]
    fn embedding_preserves_distances() {
        let mut s = spec();
        s.embed_dim = Some(8);
        let (src, _) = gen_two_domain(&s, 10, 2).unwrap();
        assert_eq!(src.dim(), 8);
        let mut plain = s.clone();
        plain.embed_dim = None;
        let (p, _) = gen_two_domain(&plain, 10, 2).unwrap();
        let d = |t: &Tensor, i: usize, j: usize| {
            t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        assert!((d(&src.features, 0, 13) - d(&p.features, 0, 13)).abs() < 1e-10);
    }
}

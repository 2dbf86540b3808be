//! Distillation and classification losses.
//!
//! The plain functions evaluate losses on matrices directly; the `*_node`
//! functions build the same quantities on a [`Graph`] for training.

use crate::autodiff::{Graph, NodeId, PEARSON_VARIANCE_EPS};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Mat;

/// Floor added inside the logarithms of the feature KL.
pub const KL_LOG_EPS: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// `1 − corr(u, v)`; 0 if both are constant, 1 if exactly one is.
pub fn pearson_distance<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Input(format!(
            "pearson distance of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 2 {
        return Err(Error::Input(
            "pearson distance needs at least 2 entries".into(),
        ));
    }
    let n = T::from_usize(u.len()).unwrap();
    let mu = u.iter().copied().sum::<T>() / n;
    let mv = v.iter().copied().sum::<T>() / n;
    let (mut suv, mut suu, mut svv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a - mu, b - mv);
        suv += a * b;
        suu += a * a;
        svv += b * b;
    }
    let eps: T = lit(PEARSON_VARIANCE_EPS);
    match (suu / n < eps, svv / n < eps) {
        (true, true) => Ok(T::zero()),
        (true, false) | (false, true) => Ok(T::one()),
        _ => {
            let corr = suv / (suu.sqrt() * svv.sqrt());
            Ok(T::one() - corr.max(-T::one()).min(T::one()))
        }
    }
}

/// Row-wise `softmax(logits / τ)`.
pub fn soft_labels<T: Scalar>(logits: &Mat<T>, tau: f64) -> Result<Mat<T>> {
    check_tau(tau)?;
    if !logits.is_finite() {
        return Err(Error::Input("non-finite logits".into()));
    }
    let inv: T = lit(1.0 / tau);
    Ok(logits.map(|x| x * inv).softmax_rows())
}

fn same_shape<T: Scalar>(op: &'static str, a: &Mat<T>, b: &Mat<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `τ²/B · Σ_i d(Y^s_i,:, Y^t_i,:) + τ²/C · Σ_j d(Y^s_:,j, Y^t_:,j)`.
pub fn soft_label_loss<T: Scalar>(teacher: &Mat<T>, student: &Mat<T>, tau: f64) -> Result<T> {
    same_shape("soft_label_loss", teacher, student)?;
    let (b, c) = teacher.shape();
    if b < 2 || c < 2 {
        return Err(Error::Input(format!(
            "soft-label loss needs B >= 2 and C >= 2, got {b} x {c}"
        )));
    }
    let yt = soft_labels(teacher, tau)?;
    let ys = soft_labels(student, tau)?;
    let mut rows = T::zero();
    for i in 0..b {
        rows += pearson_distance(ys.row(i), yt.row(i))?;
    }
    let mut cols = T::zero();
    for j in 0..c {
        cols += pearson_distance(&ys.column(j), &yt.column(j))?;
    }
    let t2: T = lit(tau * tau);
    Ok(t2 * rows / T::from_usize(b).unwrap() + t2 * cols / T::from_usize(c).unwrap())
}

/// Target `T = softmax(A·Aᵀ/τ)` and source `S = softmax(O·Aᵀ/τ)`, row-wise.
pub fn similarity_distributions<T: Scalar>(
    anchor: &Mat<T>,
    other: &Mat<T>,
    tau: f64,
) -> Result<(Mat<T>, Mat<T>)> {
    same_shape("similarity_distributions", anchor, other)?;
    check_tau(tau)?;
    if anchor.rows() < 2 {
        return Err(Error::Input("similarity distillation needs B >= 2".into()));
    }
    let inv: T = lit(1.0 / tau);
    let t = anchor.matmul_nt(anchor)?.map(|x| x * inv).softmax_rows();
    let s = other.matmul_nt(anchor)?.map(|x| x * inv).softmax_rows();
    Ok((t, s))
}

/// `1/B · Σ_i KL(T_i ‖ S_i)` with ε-guarded logarithms.
pub fn feature_loss<T: Scalar>(anchor: &Mat<T>, other: &Mat<T>, tau: f64) -> Result<T> {
    let (t, s) = similarity_distributions(anchor, other, tau)?;
    Ok(kl_rows_mean(&t, &s))
}

pub(crate) fn kl_rows_mean<T: Scalar>(t: &Mat<T>, s: &Mat<T>) -> T {
    let eps: T = lit(KL_LOG_EPS);
    let total: T = t
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(&p, &q)| p * ((p + eps).ln() - (q + eps).ln()))
        .sum();
    total / T::from_usize(t.rows()).unwrap()
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy<T: Scalar>(logits: &Mat<T>, labels: &[usize]) -> Result<T> {
    let (b, c) = logits.shape();
    if labels.len() != b || b == 0 {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Input(format!("label {y} outside [0, {c})")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        total += lse - row[y];
    }
    Ok(total / T::from_usize(b).unwrap())
}

pub fn stage1_total<T: Scalar>(l_ce: T, l_s: T, l_f: T) -> T {
    l_ce + l_s + l_f
}

/// `L_CE + α·L_KD^a + β·L_KD^v`.
pub fn stage2_total<T: Scalar>(
    l_ce: T,
    l_kd_audio: T,
    l_kd_video: T,
    alpha: f64,
    beta: f64,
) -> Result<T> {
    check_coefficients(alpha, beta)?;
    Ok(l_ce + lit::<T>(alpha) * l_kd_audio + lit::<T>(beta) * l_kd_video)
}

pub(crate) fn check_coefficients(alpha: f64, beta: f64) -> Result<()> {
    if alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "distillation coefficients must be non-negative, got alpha={alpha}, beta={beta}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillationBatch<T> {
    pub teacher_logits: Mat<T>,
    pub student_logits: Mat<T>,
    pub teacher_features: Mat<T>,
    pub student_features: Mat<T>,
    pub labels: Vec<usize>,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport<T> {
    pub l_ce: T,
    pub l_s: T,
    pub l_f: T,
    pub total: T,
}

impl<T: Scalar> DistillationBatch<T> {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        same_shape(
            "DistillationBatch",
            &self.teacher_logits,
            &self.student_logits,
        )?;
        same_shape(
            "DistillationBatch",
            &self.teacher_features,
            &self.student_features,
        )?;
        let b = self.teacher_logits.rows();
        if self.teacher_features.rows() != b || self.labels.len() != b {
            return Err(Error::shape(
                "DistillationBatch",
                format!(
                    "{b} logit rows, {} feature rows, {} labels",
                    self.teacher_features.rows(),
                    self.labels.len()
                ),
            ));
        }
        if b < 2 {
            return Err(Error::Input("distillation batch needs B >= 2".into()));
        }
        Ok(())
    }

    /// Student-side losses with the stage-1 total `L_CE + L_s + L_f`.
    pub fn report(&self) -> Result<LossReport<T>> {
        self.validate()?;
        let l_ce = cross_entropy(&self.student_logits, &self.labels)?;
        let l_s = soft_label_loss(&self.teacher_logits, &self.student_logits, self.tau)?;
        let l_f = feature_loss(&self.teacher_features, &self.student_features, self.tau)?;
        Ok(LossReport {
            l_ce,
            l_s,
            l_f,
            total: stage1_total(l_ce, l_s, l_f),
        })
    }
}

/// Graph form of [`soft_label_loss`].
pub fn soft_label_loss_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    teacher: NodeId,
    student: NodeId,
    tau: f64,
) -> Result<NodeId> {
    check_tau(tau)?;
    if g.shape(teacher) != g.shape(student) {
        return Err(Error::shape(
            "soft_label_loss_node",
            format!("{:?} vs {:?}", g.shape(teacher), g.shape(student)),
        ));
    }
    let (b, c) = g.shape(teacher);
    if b < 2 || c < 2 {
        return Err(Error::Input(format!(
            "soft-label loss needs B >= 2 and C >= 2, got {b} x {c}"
        )));
    }
    let inv: T = lit(1.0 / tau);
    let ts = g.scale(teacher, inv);
    let yt = g.softmax_rows(ts);
    let ss = g.scale(student, inv);
    let ys = g.softmax_rows(ss);
    let rows = g.pearson_rows(ys, yt)?;
    let rows = g.sum_all(rows);
    let rows = g.scale(rows, lit(tau * tau / b as f64));
    let yst = g.transpose(ys);
    let ytt = g.transpose(yt);
    let cols = g.pearson_rows(yst, ytt)?;
    let cols = g.sum_all(cols);
    let cols = g.scale(cols, lit(tau * tau / c as f64));
    g.add(rows, cols)
}

/// Graph form of [`feature_loss`].
pub fn feature_loss_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    anchor: NodeId,
    other: NodeId,
    tau: f64,
) -> Result<NodeId> {
    check_tau(tau)?;
    if g.shape(anchor) != g.shape(other) {
        return Err(Error::shape(
            "feature_loss_node",
            format!("{:?} vs {:?}", g.shape(anchor), g.shape(other)),
        ));
    }
    let b = g.shape(anchor).0;
    if b < 2 {
        return Err(Error::Input("similarity distillation needs B >= 2".into()));
    }
    let inv: T = lit(1.0 / tau);
    let f = g.matmul_nt(anchor, anchor)?;
    let f = g.scale(f, inv);
    let t = g.softmax_rows(f);
    let fs = g.matmul_nt(other, anchor)?;
    let fs = g.scale(fs, inv);
    let s = g.softmax_rows(fs);
    let eps: T = lit(KL_LOG_EPS);
    let lt = g.log_eps(t, eps);
    let ls = g.log_eps(s, eps);
    let diff = g.sub(lt, ls)?;
    let kl = g.mul(t, diff)?;
    let kl = g.sum_all(kl);
    Ok(g.scale(kl, lit(1.0 / b as f64)))
}

/// Graph form of [`cross_entropy`].
pub fn cross_entropy_node<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let lp = g.log_softmax_rows(logits);
    g.nll(lp, labels)
}

//! Style codes, the attribute/channel mask matrix, and the edit algebra.
//!
//! The matrix has one row per named attribute plus a trailing "others" row
//! and one column per style channel. Each column is softmax-normalized into a
//! control-probability distribution; the rows of a target attribute set are
//! summed into a per-channel mask that gates the edit direction
//! `s_ref - s_src`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in style space plus the per-channel editability layout.
///
/// Channels whose flag is `false` (for example those feeding RGB projection or
/// super-resolution layers of a real generator) stay at their source value in
/// every edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStyleCode")]
pub struct StyleCode {
    values: Vec<f64>,
    editable: Vec<bool>,
}

#[derive(Deserialize)]
struct RawStyleCode {
    values: Vec<f64>,
    editable: Vec<bool>,
}

impl TryFrom<RawStyleCode> for StyleCode {
    type Error = Error;

    fn try_from(raw: RawStyleCode) -> Result<Self> {
        StyleCode::new(raw.values, raw.editable)
    }
}

impl StyleCode {
    pub fn new(values: Vec<f64>, editable: Vec<bool>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("style code must have at least one channel"));
        }
        if values.len() != editable.len() {
            return Err(Error::invalid(format!(
                "style code has {} values but {} editability flags",
                values.len(),
                editable.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("style channel {i} is not finite")));
        }
        Ok(Self { values, editable })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn editable(&self) -> &[bool] {
        &self.editable
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Unnormalized attribute/channel affinities, shape `(m + 1) x n`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMatrix {
    attribute_names: Vec<String>,
    n_channels: usize,
    entries: Vec<f64>,
}

impl MaskMatrix {
    /// All-zero matrix for the given attributes and channel count.
    pub fn zeros(attribute_names: Vec<String>, n_channels: usize) -> Result<Self> {
        let rows = attribute_names.len() + 1;
        Self::from_entries(attribute_names, n_channels, vec![0.0; rows * n_channels])
    }

    pub fn from_entries(
        attribute_names: Vec<String>,
        n_channels: usize,
        entries: Vec<f64>,
    ) -> Result<Self> {
        if attribute_names.is_empty() {
            return Err(Error::invalid("mask matrix needs at least one attribute"));
        }
        if n_channels == 0 {
            return Err(Error::invalid("mask matrix needs at least one channel"));
        }
        let rows = attribute_names.len() + 1;
        if entries.len() != rows * n_channels {
            return Err(Error::invalid(format!(
                "mask matrix expects {rows}x{n_channels} = {} entries, got {}",
                rows * n_channels,
                entries.len()
            )));
        }
        if let Some(k) = entries.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "mask matrix entry ({}, {}) is not finite",
                k / n_channels,
                k % n_channels
            )));
        }
        for (i, name) in attribute_names.iter().enumerate() {
            if attribute_names[..i].contains(name) {
                return Err(Error::invalid(format!("duplicate attribute name `{name}`")));
            }
        }
        Ok(Self {
            attribute_names,
            n_channels,
            entries,
        })
    }

    /// Number of named attributes (`m`), excluding "others".
    pub fn n_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.attribute_names.len() + 1
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    /// Row index of the "others" catch-all.
    pub fn others_row(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|n| n == name)
    }

    pub fn get(&self, row: usize, channel: usize) -> f64 {
        self.entries[row * self.n_channels + channel]
    }

    pub fn set(&mut self, row: usize, channel: usize, value: f64) {
        self.entries[row * self.n_channels + channel] = value;
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, channel)).collect()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub(crate) fn validate_finite(&self) -> Result<()> {
        match self.entries.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::invalid(format!(
                "mask matrix entry ({}, {}) is not finite",
                k / self.n_channels,
                k % self.n_channels
            ))),
        }
    }
}

/// Column-stochastic control probabilities, shape `(m + 1) x n`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlProbabilities {
    n_rows: usize,
    n_channels: usize,
    probs: Vec<f64>,
}

impl ControlProbabilities {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn others_row(&self) -> usize {
        self.n_rows - 1
    }

    pub fn get(&self, row: usize, channel: usize) -> f64 {
        self.probs[row * self.n_channels + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.get(r, channel)).collect()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.probs[row * self.n_channels..(row + 1) * self.n_channels]
    }
}

/// Per-channel edit gate in `[0, 1]`; zero on non-editable channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeMask {
    mask: Vec<f64>,
}

impl AttributeMask {
    /// Builds a mask from raw values, checking the `[0, 1]` range.
    pub fn new(mask: Vec<f64>) -> Result<Self> {
        if let Some(i) = mask
            .iter()
            .position(|v| !(v.is_finite() && (0.0..=1.0).contains(v)))
        {
            return Err(Error::invalid(format!(
                "mask entry {i} = {} outside [0, 1]",
                mask[i]
            )));
        }
        Ok(Self { mask })
    }

    pub fn values(&self) -> &[f64] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Numerically stable softmax. Equal inputs map to bitwise-equal outputs.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: given `p = softmax(x)` and `dL/dp`,
/// returns `dL/dx`.
pub fn softmax_vjp(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

pub fn control_probabilities(m: &MaskMatrix) -> Result<ControlProbabilities> {
    m.validate_finite()?;
    let (rows, n) = (m.n_rows(), m.n_channels());
    let mut probs = vec![0.0; rows * n];
    for c in 0..n {
        for (r, p) in softmax(&m.column(c)).into_iter().enumerate() {
            probs[r * n + c] = p;
        }
    }
    Ok(ControlProbabilities {
        n_rows: rows,
        n_channels: n,
        probs,
    })
}

/// Checks a target attribute set against `m` attributes: in range, no
/// "others", no duplicates.
pub fn validate_targets(targets: &[usize], n_attributes: usize) -> Result<()> {
    for (k, &t) in targets.iter().enumerate() {
        if t == n_attributes {
            return Err(Error::invalid(
                "target set must not contain the \"others\" row",
            ));
        }
        if t > n_attributes {
            return Err(Error::invalid(format!(
                "target attribute index {t} out of range for {n_attributes} attributes"
            )));
        }
        if targets[..k].contains(&t) {
            return Err(Error::invalid(format!("duplicate target attribute {t}")));
        }
    }
    Ok(())
}

pub fn attribute_mask(
    probs: &ControlProbabilities,
    targets: &[usize],
    editable: &[bool],
) -> Result<AttributeMask> {
    validate_targets(targets, probs.n_rows() - 1)?;
    if editable.len() != probs.n_channels() {
        return Err(Error::invalid(format!(
            "editability layout has {} channels, probabilities have {}",
            editable.len(),
            probs.n_channels()
        )));
    }
    let mask = editable
        .iter()
        .enumerate()
        .map(|(i, &ok)| {
            if !ok {
                return 0.0;
            }
            // rounding can push a sum over a full column a hair past 1
            targets.iter().map(|&t| probs.get(t, i)).sum::<f64>().min(1.0)
        })
        .collect();
    Ok(AttributeMask { mask })
}

/// `s_src + (s_ref - s_src) * mask * delta`, channel-wise.
pub fn edit_style_code(
    src: &StyleCode,
    reference: &StyleCode,
    mask: &AttributeMask,
    delta: f64,
) -> Result<StyleCode> {
    if src.len() != reference.len() || src.len() != mask.len() {
        return Err(Error::invalid(format!(
            "length mismatch: source {}, reference {}, mask {}",
            src.len(),
            reference.len(),
            mask.len()
        )));
    }
    if !delta.is_finite() {
        return Err(Error::invalid("edit intensity must be finite"));
    }
    let values = src
        .values
        .iter()
        .zip(&reference.values)
        .zip(&mask.mask)
        .zip(&src.editable)
        .map(|(((&s, &r), &w), &ok)| if ok { s + (r - s) * w * delta } else { s })
        .collect();
    StyleCode::new(values, src.editable.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("a{i}")).collect()
    }

    #[test]
    fn style_code_json_is_validated() {
        let s = StyleCode::new(vec![0.5, -1.0], vec![true, false]).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<StyleCode>(&text).unwrap(), s);
        assert!(serde_json::from_str::<StyleCode>(r#"{"values":[1.0],"editable":[]}"#).is_err());
    }

    #[test]
    fn uniform_column_gives_quarter_probabilities() {
        let m = MaskMatrix::zeros(names(3), 1).unwrap();
        let p = control_probabilities(&m).unwrap();
        assert_eq!(p.column(0), vec![0.25; 4]);
    }

    #[test]
    fn one_hot_logit_column_matches_scalar_oracle() {
        // e / (e + 3) and 1 / (e + 3)
        let m = MaskMatrix::from_entries(names(3), 1, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let p = control_probabilities(&m).unwrap();
        assert_abs_diff_eq!(p.get(3, 0), 0.475_366_886_418_671_7, epsilon = 1e-15);
        for r in 0..3 {
            assert_abs_diff_eq!(p.get(r, 0), 0.174_877_704_527_109_4, epsilon = 1e-15);
        }
    }

    #[test]
    fn shift_invariance_per_column() {
        let a = MaskMatrix::from_entries(names(1), 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let mut b = a.clone();
        b.set(0, 1, a.get(0, 1) + 5.0);
        b.set(1, 1, a.get(1, 1) + 5.0);
        let (pa, pb) = (control_probabilities(&a).unwrap(), control_probabilities(&b).unwrap());
        for r in 0..2 {
            assert_abs_diff_eq!(pa.get(r, 1), pb.get(r, 1), epsilon = 1e-15);
        }
    }

    #[test]
    fn non_finite_matrix_rejected() {
        assert!(MaskMatrix::from_entries(names(1), 1, vec![f64::NAN, 0.0]).is_err());
        let mut m = MaskMatrix::zeros(names(1), 1).unwrap();
        m.set(0, 0, f64::INFINITY);
        assert!(matches!(
            control_probabilities(&m),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn empty_target_set_gives_zero_mask() {
        let m = MaskMatrix::zeros(names(3), 4).unwrap();
        let p = control_probabilities(&m).unwrap();
        let mask = attribute_mask(&p, &[], &[true; 4]).unwrap();
        assert_eq!(mask.values(), &[0.0; 4]);
    }

    #[test]
    fn all_targets_complement_others() {
        let m = MaskMatrix::from_entries(
            names(2),
            2,
            vec![0.1, -0.4, 1.2, 0.0, -0.7, 2.5],
        )
        .unwrap();
        let p = control_probabilities(&m).unwrap();
        let mask = attribute_mask(&p, &[0, 1], &[true, true]).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(mask.values()[i], 1.0 - p.get(2, i), epsilon = 1e-15);
        }
    }

    #[test]
    fn two_of_four_rows_sum() {
        let m = MaskMatrix::from_entries(names(3), 1, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let p = control_probabilities(&m).unwrap();
        let mask = attribute_mask(&p, &[0, 1], &[true]).unwrap();
        assert_abs_diff_eq!(mask.values()[0], 0.349_755_409_054_218_9, epsilon = 1e-15);
    }

    #[test]
    fn others_row_rejected_as_target() {
        let m = MaskMatrix::zeros(names(3), 2).unwrap();
        let p = control_probabilities(&m).unwrap();
        assert!(attribute_mask(&p, &[3], &[true, true]).is_err());
        assert!(attribute_mask(&p, &[0, 0], &[true, true]).is_err());
    }

    #[test]
    fn non_editable_channels_masked_out() {
        let m = MaskMatrix::zeros(names(1), 3).unwrap();
        let p = control_probabilities(&m).unwrap();
        let mask = attribute_mask(&p, &[0], &[true, false, true]).unwrap();
        assert_eq!(mask.values(), &[0.5, 0.0, 0.5]);
    }

    fn code(v: &[f64]) -> StyleCode {
        StyleCode::new(v.to_vec(), vec![true; v.len()]).unwrap()
    }

    #[test]
    fn edit_examples() {
        let src = code(&[1.0, 2.0]);
        let reference = code(&[3.0, 6.0]);
        let m = |v: &[f64]| AttributeMask::new(v.to_vec()).unwrap();

        let out = edit_style_code(&src, &reference, &m(&[0.3, 0.9]), 0.0).unwrap();
        assert_eq!(out, src);
        let out = edit_style_code(&src, &reference, &m(&[1.0, 1.0]), 1.0).unwrap();
        assert_eq!(out, reference);
        let out = edit_style_code(&src, &reference, &m(&[1.0, 0.0]), 1.0).unwrap();
        assert_eq!(out.values(), &[3.0, 2.0]);
        let out = edit_style_code(&src, &reference, &m(&[0.5, 0.5]), 2.0).unwrap();
        assert_eq!(out.values(), &[3.0, 6.0]);
    }

    #[test]
    fn edit_length_mismatch() {
        let mask = AttributeMask::new(vec![1.0]).unwrap();
        assert!(edit_style_code(&code(&[1.0, 2.0]), &code(&[1.0, 2.0]), &mask, 1.0).is_err());
        assert!(edit_style_code(&code(&[1.0]), &code(&[1.0, 2.0]), &mask, 1.0).is_err());
    }

    #[test]
    fn edit_keeps_frozen_channels() {
        let src = StyleCode::new(vec![1.0, 2.0], vec![true, false]).unwrap();
        let reference = code(&[5.0, 7.0]);
        let mask = AttributeMask::new(vec![1.0, 1.0]).unwrap();
        let out = edit_style_code(&src, &reference, &mask, 2.5).unwrap();
        assert_eq!(out.values(), &[11.0, 2.0]);
        assert_eq!(out.editable(), src.editable());
    }

    #[test]
    fn style_code_validation() {
        assert!(StyleCode::new(vec![], vec![]).is_err());
        assert!(StyleCode::new(vec![1.0], vec![true, true]).is_err());
        assert!(StyleCode::new(vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn softmax_vjp_matches_finite_differences() {
        let x = [0.2, -1.3, 0.7, 2.0];
        let w = [0.5, -2.0, 1.5, 0.25];
        let f = |x: &[f64]| softmax(x).iter().zip(&w).map(|(p, w)| p * w).sum::<f64>();
        let g = softmax_vjp(&softmax(&x), &w);
        for k in 0..4 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert_abs_diff_eq!(g[k], fd, epsilon = 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn columns_are_stochastic(
                m in 1usize..5,
                n in 1usize..6,
                seed in proptest::collection::vec(-20.0f64..20.0, 30),
                shift in -50.0f64..50.0,
            ) {
                let entries: Vec<f64> = (0..(m + 1) * n).map(|k| seed[k % seed.len()] * (1.0 + k as f64 * 0.01)).collect();
                let mm = MaskMatrix::from_entries(names(m), n, entries).unwrap();
                let p = control_probabilities(&mm).unwrap();
                let mut shifted = mm.clone();
                for r in 0..=m {
                    shifted.set(r, 0, mm.get(r, 0) + shift);
                }
                let ps = control_probabilities(&shifted).unwrap();
                for c in 0..n {
                    let col = p.column(c);
                    prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
                }
                for r in 0..=m {
                    prop_assert!((p.get(r, 0) - ps.get(r, 0)).abs() < 1e-12);
                }
            }

            #[test]
            fn unit_intensity_is_interpolation(
                vals in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..=1.0, any::<bool>()), 1..20),
                delta in -3.0f64..3.0,
            ) {
                let editable: Vec<bool> = vals.iter().map(|v| v.3).collect();
                let src = StyleCode::new(vals.iter().map(|v| v.0).collect(), editable.clone()).unwrap();
                let reference = StyleCode::new(vals.iter().map(|v| v.1).collect(), editable.clone()).unwrap();
                let mask = AttributeMask::new(vals.iter().map(|v| if v.3 { v.2 } else { 0.0 }).collect()).unwrap();
                let one = edit_style_code(&src, &reference, &mask, 1.0).unwrap();
                let at = edit_style_code(&src, &reference, &mask, delta).unwrap();
                let at2 = edit_style_code(&src, &reference, &mask, 2.0 * delta).unwrap();
                for i in 0..vals.len() {
                    let (s, r, w) = (src.values()[i], reference.values()[i], mask.values()[i]);
                    prop_assert!((one.values()[i] - (s * (1.0 - w) + r * w)).abs() < 1e-12);
                    // affine in delta: f(2d) - f(d) == f(d) - f(0)
                    prop_assert!(((at2.values()[i] - at.values()[i]) - (at.values()[i] - s)).abs() < 1e-9);
                    if !editable[i] {
                        prop_assert_eq!(at.values()[i], s);
                    }
                }
            }
        }
    }
}

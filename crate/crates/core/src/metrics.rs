//! Segmentation metrics: per-sample IoU, overall IoU, mean IoU and
//! precision at IoU thresholds. Pixel counts stay integral until the final
//! division.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    /// Positive where the logit is strictly above zero.
    pub fn from_logits(height: usize, width: usize, logits: &[f32]) -> Result<Self> {
        Self::new(height, width, logits.iter().map(|x| *x > 0.0).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> u64 {
        self.values.iter().filter(|v| **v).count() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub intersection: u64,
    pub union: u64,
}

impl EvalRecord {
    /// `I / U`, with an empty union counting as perfect agreement.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<EvalRecord> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    let (mut i, mut u) = (0u64, 0u64);
    for (a, b) in pred.values.iter().zip(&gt.values) {
        i += (*a && *b) as u64;
        u += (*a || *b) as u64;
    }
    Ok(EvalRecord {
        intersection: i,
        union: u,
    })
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("no evaluation records".into()));
    }
    Ok(())
}

/// Total intersection over total union; 1 when every union is empty.
pub fn overall_iou(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    let i: u64 = records.iter().map(|r| r.intersection).sum();
    let u: u64 = records.iter().map(|r| r.union).sum();
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

pub fn mean_iou(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(records.iter().map(EvalRecord::iou).sum::<f64>() / records.len() as f64)
}

/// Fraction of samples with IoU at or above each threshold, in input order.
pub fn precision_at(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    nonempty(records)?;
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Usage(format!("threshold {t} outside (0, 1]")));
    }
    let k = records.len() as f64;
    Ok(thresholds
        .iter()
        .map(|t| {
            let hits = records.iter().filter(|r| r.iou() >= *t).count();
            (*t, hits as f64 / k)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub oiou: f64,
    pub miou: f64,
    /// `(threshold, proportion)` in ascending threshold order.
    pub pr_at: Vec<(f64, f64)>,
    pub k: usize,
}

impl EvalSummary {
    pub fn from_records(records: &[EvalRecord], thresholds: &[f64]) -> Result<Self> {
        let mut ts = thresholds.to_vec();
        ts.sort_by(|a, b| a.total_cmp(b));
        ts.dedup();
        Ok(Self {
            oiou: overall_iou(records)?,
            miou: mean_iou(records)?,
            pr_at: precision_at(records, &ts)?,
            k: records.len(),
        })
    }

    /// Every ratio lies in `[0, 1]` and `Pr@X` never rises with `X`.
    pub fn check_invariants(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.oiou) || !in_unit(self.miou) {
            return Err(Error::Invariant(format!("oIoU {} / mIoU {} outside [0, 1]", self.oiou, self.miou)));
        }
        for w in self.pr_at.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::Invariant(format!("Pr@{} = {} exceeds Pr@{} = {}", w[1].0, w[1].1, w[0].0, w[0].1)));
            }
        }
        if let Some((t, p)) = self.pr_at.iter().find(|(_, p)| !in_unit(*p)) {
            return Err(Error::Invariant(format!("Pr@{t} = {p} outside [0, 1]")));
        }
        Ok(())
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Markdown table with one `Pr@X` column per threshold, then oIoU and mIoU,
/// all on a percentage scale. Without thresholds only the header is written.
pub fn emit_report(summary: &EvalSummary) -> String {
    let mut head: Vec<String> = summary.pr_at.iter().map(|(t, _)| format!("Pr@{t}")).collect();
    head.push("oIoU".into());
    head.push("mIoU".into());
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", head.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(head.len()));
    if summary.pr_at.is_empty() {
        return out;
    }
    let mut row: Vec<String> = summary.pr_at.iter().map(|(_, p)| pct(*p)).collect();
    row.push(pct(summary.oiou));
    row.push(pct(summary.miou));
    let _ = writeln!(out, "| {} |", row.join(" | "));
    out
}

/// JSON sidecar with the summary and the raw per-sample counts.
pub fn summary_json(summary: &EvalSummary, records: &[EvalRecord], ids: &[u64]) -> serde_json::Value {
    serde_json::json!({
        "k": summary.k,
        "oiou": summary.oiou,
        "miou": summary.miou,
        "pr_at": summary.pr_at.iter().map(|(t, p)| serde_json::json!({"threshold": t, "precision": p})).collect::<Vec<_>>(),
        "ids": ids,
        "intersections": records.iter().map(|r| r.intersection).collect::<Vec<_>>(),
        "unions": records.iter().map(|r| r.union).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(i: u64, u: u64) -> EvalRecord {
        EvalRecord {
            intersection: i,
            union: u,
        }
    }

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for (y, x) in on {
            m.values[y * w + x] = true;
        }
        m
    }

    #[test]
    fn iou_cases() {
        let a = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(mask_iou(&a, &a).unwrap().iou(), 1.0);
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(mask_iou(&a, &b).unwrap().iou(), 0.0);
        let p = mask(2, 2, &[(0, 0)]);
        let g = mask(2, 2, &[(0, 0), (0, 1)]);
        assert_eq!(mask_iou(&p, &g).unwrap(), rec(1, 2));
        let e = BinaryMask::empty(2, 2);
        assert_eq!(mask_iou(&e, &e).unwrap().iou(), 1.0);
        assert!(matches!(mask_iou(&p, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregates_by_hand() {
        let rs = [rec(1, 2), rec(3, 4)];
        assert!((overall_iou(&rs).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((mean_iou(&rs).unwrap() - 0.625).abs() < 1e-15);
        assert_eq!(overall_iou(&[rec(3, 7)]).unwrap(), 3.0 / 7.0);
        assert_eq!(mean_iou(&[rec(3, 7)]).unwrap(), 3.0 / 7.0);
        assert_eq!(overall_iou(&[rec(5, 5), rec(2, 2)]).unwrap(), 1.0);
        assert_eq!(mean_iou(&[rec(2, 5); 4]).unwrap(), 0.4);
        assert_eq!(overall_iou(&[rec(0, 0)]).unwrap(), 1.0);
        assert!(matches!(overall_iou(&[]), Err(Error::Usage(_))));
        assert!(matches!(mean_iou(&[]), Err(Error::Usage(_))));
        assert!(matches!(precision_at(&[], &DEFAULT_THRESHOLDS), Err(Error::Usage(_))));
    }

    #[test]
    fn precision_by_hand() {
        let rs = [rec(55, 100), rec(72, 100), rec(45, 100)];
        let pr = precision_at(&rs, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(pr[0], (0.5, 2.0 / 3.0));
        assert_eq!(pr[2], (0.7, 1.0 / 3.0));
        assert_eq!(pr[4], (0.9, 0.0));
        let perfect = precision_at(&[rec(4, 4); 3], &DEFAULT_THRESHOLDS).unwrap();
        assert!(perfect.iter().all(|(_, p)| *p == 1.0));
        // inclusive at the threshold
        assert_eq!(precision_at(&[rec(1, 2)], &[0.5]).unwrap()[0].1, 1.0);
        assert!(precision_at(&rs, &[0.0]).is_err());
    }

    #[test]
    fn report_layout() {
        let s = EvalSummary::from_records(&[rec(1, 2), rec(3, 4)], &DEFAULT_THRESHOLDS).unwrap();
        let r = emit_report(&s);
        assert_eq!(r, emit_report(&s));
        let lines: Vec<_> = r.lines().collect();
        assert_eq!(lines[0], "| Pr@0.5 | Pr@0.6 | Pr@0.7 | Pr@0.8 | Pr@0.9 | oIoU | mIoU |");
        assert_eq!(lines[2], "| 100.00 | 50.00 | 50.00 | 0.00 | 0.00 | 66.67 | 62.50 |");
        let empty = EvalSummary { pr_at: vec![], ..s };
        assert_eq!(emit_report(&empty), "| oIoU | mIoU |\n|---|---|\n");
    }

    #[test]
    fn iou_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
            let p: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
            let g: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
            let (pm, gm) = (BinaryMask::new(h, w, p).unwrap(), BinaryMask::new(h, w, g).unwrap());
            let (mut i, mut u) = (0, 0);
            for y in 0..h {
                for x in 0..w {
                    if pm.get(y, x) && gm.get(y, x) {
                        i += 1;
                    }
                    if pm.get(y, x) || gm.get(y, x) {
                        u += 1;
                    }
                }
            }
            let r = mask_iou(&pm, &gm).unwrap();
            assert_eq!(r, rec(i, u));
            assert_eq!(r, mask_iou(&gm, &pm).unwrap());
        }
    }

    fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
        proptest::collection::vec((0u64..50, 0u64..50), 1..20)
            .prop_map(|v| v.into_iter().map(|(a, b)| rec(a.min(a + b), a + b)).collect())
    }

    proptest! {
        #[test]
        fn bounds_and_monotone_thresholds(rs in records()) {
            let s = EvalSummary::from_records(&rs, &DEFAULT_THRESHOLDS).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.oiou) && (0.0..=1.0).contains(&s.miou));
            for w in s.pr_at.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
            prop_assert!(s.pr_at.iter().all(|(_, p)| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn equal_unions_make_means_agree(is in proptest::collection::vec(0u64..=30, 1..20)) {
            let rs: Vec<_> = is.iter().map(|i| rec(*i, 30)).collect();
            prop_assert!((overall_iou(&rs).unwrap() - mean_iou(&rs).unwrap()).abs() < 1e-12);
        }
    }
}

//! Class-averaged top-1 accuracy in the ZSL and GZSL settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Codebook, Dataset, Instance};
use crate::trainer::Checkpoint;
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Zsl,
    Gzsl,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::Zsl => "zsl",
            Setting::Gzsl => "gzsl",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Setting::Zsl),
            "gzsl" => Ok(Setting::Gzsl),
            _ => Err(Error::Config(format!("unknown setting {s:?}"))),
        }
    }
}

/// Accuracies in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub split: String,
    pub per_class: BTreeMap<usize, f64>,
    /// Unseen-class average.
    pub ts: f64,
    /// Seen-class average (GZSL only).
    pub tr: Option<f64>,
    pub h: Option<f64>,
    pub n: usize,
}

/// Mean over `classes` of the per-class fraction of correct predictions, in percent.
pub fn per_class_top1(
    predictions: &[usize],
    labels: &[usize],
    classes: &BTreeSet<usize>,
) -> Result<(f64, BTreeMap<usize, f64>)> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(labels.len(), predictions.len()));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> =
        classes.iter().map(|&c| (c, (0, 0))).collect();
    for (p, l) in predictions.iter().zip(labels) {
        if let Some((hit, total)) = counts.get_mut(l) {
            *total += 1;
            *hit += usize::from(p == l);
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidInput("no classes to average over".into()));
    }
    let mut per_class = BTreeMap::new();
    for (c, (hit, total)) in counts {
        if total == 0 {
            return Err(Error::InvalidInput(format!(
                "class {c} has no test instances"
            )));
        }
        per_class.insert(c, 100.0 * hit as f64 / total as f64);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((mean, per_class))
}

pub fn harmonic_mean(ts: f64, tr: f64) -> Result<f64> {
    if !(ts >= 0.0 && tr >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "accuracies must be non-negative, got {ts} and {tr}"
        )));
    }
    if ts + tr == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * ts * tr / (ts + tr))
}

/// Predicts every test instance of `dataset` and scores the given setting.
///
/// GZSL ranks all classes and reports unseen (`ts`) and seen (`tr`)
/// averages. ZSL ranks unseen classes only and scores unseen test instances.
pub fn evaluate(
    model: &Checkpoint,
    dataset: &Dataset,
    codebook: &Codebook,
    setting: Setting,
    split_id: &str,
) -> Result<EvalReport> {
    let split = dataset.split();
    let candidates: Vec<usize> = match setting {
        Setting::Gzsl => dataset.classes().to_vec(),
        Setting::Zsl => split.unseen.iter().copied().collect(),
    };
    let book = model.prepare_codebook(codebook, &candidates)?;
    let tested: Vec<&Instance> = dataset
        .test_instances()
        .into_iter()
        .filter(|i| setting == Setting::Gzsl || split.unseen.contains(&i.class))
        .collect();
    let predictions: Vec<usize> = par::map(&tested, |i| model.predict(&i.input, &book))
        .into_iter()
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = tested.iter().map(|i| i.class).collect();
    let (ts, mut per_class) = per_class_top1(&predictions, &labels, &split.unseen)?;
    let (tr, h) = match setting {
        Setting::Zsl => (None, None),
        Setting::Gzsl => {
            let (tr, seen_pc) = per_class_top1(&predictions, &labels, &split.seen)?;
            per_class.extend(seen_pc);
            (Some(tr), Some(harmonic_mean(ts, tr)?))
        }
    };
    Ok(EvalReport {
        setting,
        split: split_id.to_string(),
        per_class,
        ts,
        tr,
        h,
        n: tested.len(),
    })
}

pub const CSV_HEADER: &str = "setting,split,ts,tr,H,n";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// One CSV row without the header, full precision.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.setting.as_str(),
            self.split,
            self.ts,
            opt(self.tr),
            opt(self.h),
            self.n
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    /// Aligned table with one decimal.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:<16} {:>6} {:>6} {:>6} {:>6}",
            "setting", "split", "ts", "tr", "H", "n"
        );
        let _ = writeln!(
            s,
            "{:<8} {:<16} {:>6} {:>6} {:>6} {:>6}",
            self.setting.as_str(),
            self.split,
            fmt(Some(self.ts)),
            fmt(self.tr),
            fmt(self.h),
            self.n
        );
        s
    }
}

/// Side-by-side CSV of labelled reports: `variant,setting,split,ts,tr,H,n`.
pub fn comparison_csv(rows: &[(&str, &EvalReport)]) -> String {
    let mut s = format!("variant,{CSV_HEADER}\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{name},{}", r.csv_row());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn class_average_not_instance_average() {
        let labels: Vec<usize> = std::iter::repeat_n(0, 10)
            .chain(std::iter::repeat_n(1, 90))
            .collect();
        let preds: Vec<usize> = std::iter::repeat_n(0, 100).collect();
        let classes = BTreeSet::from([0, 1]);
        let (acc, per) = per_class_top1(&preds, &labels, &classes).unwrap();
        assert_eq!(acc, 50.0);
        assert_eq!(per[&0], 100.0);
        assert_eq!(per_class_top1(&labels, &labels, &classes).unwrap().0, 100.0);
        assert!(per_class_top1(&preds, &labels, &BTreeSet::from([0, 1, 2])).is_err());
    }

    #[test]
    fn random_predictions_are_near_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let labels: Vec<usize> = (0..1000).map(|i| i % 4).collect();
        let preds: Vec<usize> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        let (acc, _) = per_class_top1(&preds, &labels, &BTreeSet::from([0, 1, 2, 3])).unwrap();
        assert!((acc - 25.0).abs() < 5.0, "{acc}");
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(39.5, 68.9).unwrap() - 50.2).abs() < 0.05);
        assert_eq!(harmonic_mean(0.0, 45.7).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!((harmonic_mean(33.3, 33.3).unwrap() - 33.3).abs() < 1e-12);
        assert!(harmonic_mean(-1.0, 3.0).is_err());
    }

    #[test]
    fn csv_and_table_layout() {
        let r = EvalReport {
            setting: Setting::Zsl,
            split: "ss".into(),
            per_class: BTreeMap::new(),
            ts: 12.25,
            tr: None,
            h: None,
            n: 40,
        };
        assert_eq!(r.to_csv(), "setting,split,ts,tr,H,n\nzsl,ss,12.25,,,40\n");
        assert!(r.to_table().contains("12.2") || r.to_table().contains("12.3"));
        let c = comparison_csv(&[("flat", &r)]);
        assert!(c.starts_with("variant,setting"));
    }
}

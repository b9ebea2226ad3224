use std::collections::BTreeMap;
use std::fmt;

use super::run::PlanSummary;
use crate::error::{Error, Result};
use crate::federation::Method;

#[derive(Clone, Debug, PartialEq)]
pub struct RankedMethod {
    pub method: Method,
    /// 1-based; tied methods share a rank.
    pub rank: usize,
    pub tied: bool,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Ranking of the requested methods in one sweep setting.
#[derive(Clone, Debug, PartialEq)]
pub struct SettingRanking {
    pub setting: String,
    pub ranked: Vec<RankedMethod>,
    /// Set when pfeddc was compared and is not (jointly) first.
    pub pfeddc_not_first: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub settings: Vec<SettingRanking>,
}

impl ComparisonReport {
    pub fn flagged(&self) -> impl Iterator<Item = &SettingRanking> {
        self.settings.iter().filter(|s| s.pfeddc_not_first)
    }
}

/// Ranks `methods` by mean final accuracy within every setting of the
/// summary. Equal means share a rank and are marked as tied.
pub fn compare_methods(summary: &PlanSummary, methods: &[Method]) -> Result<ComparisonReport> {
    if methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    let mut by_setting: BTreeMap<String, BTreeMap<Method, (f64, f64)>> = BTreeMap::new();
    for cell in &summary.cells {
        if !cell.seeds.is_empty() {
            by_setting
                .entry(cell.key.setting())
                .or_default()
                .insert(cell.key.method, (cell.mean_accuracy, cell.std_accuracy));
        }
    }
    if by_setting.is_empty() {
        return Err(Error::Config("summary holds no completed cells".into()));
    }
    let mut settings = Vec::new();
    for (setting, results) in by_setting {
        let mut rows = Vec::with_capacity(methods.len());
        for &m in methods {
            let &(mean, std) = results
                .get(&m)
                .ok_or_else(|| Error::Config(format!("method {m} missing from setting {setting}")))?;
            rows.push((m, mean, std));
        }
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        let ranked: Vec<RankedMethod> = rows
            .iter()
            .map(|&(method, mean, std)| RankedMethod {
                method,
                rank: 1 + rows.iter().filter(|r| r.1 > mean).count(),
                tied: rows.iter().filter(|r| r.1 == mean).count() > 1,
                mean_accuracy: mean,
                std_accuracy: std,
            })
            .collect();
        let pfeddc_not_first = ranked.iter().any(|r| r.method == Method::Pfeddc && r.rank != 1);
        settings.push(SettingRanking {
            setting,
            ranked,
            pfeddc_not_first,
        });
    }
    Ok(ComparisonReport { settings })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.settings {
            writeln!(f, "{}", s.setting)?;
            for r in &s.ranked {
                writeln!(
                    f,
                    "  {:>2}{} {:<17} {:6.2} ± {:5.2}",
                    r.rank,
                    if r.tied { "=" } else { " " },
                    r.method.name(),
                    100.0 * r.mean_accuracy,
                    100.0 * r.std_accuracy
                )?;
            }
            if s.pfeddc_not_first {
                writeln!(f, "  ! pfeddc is not ranked first")?;
            }
        }
        Ok(())
    }
}

//! Price placeholders and sale-to-list ratio arithmetic.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Fractions are clamped to this range before quantization.
pub const MAX_FRACTION: f64 = 2.0;
/// Step of the decoder's placeholder grid.
pub const GRID_STEP: f64 = 0.05;
/// Number of grid placeholders (`0.00, 0.05, ..., 2.00`).
pub const GRID_SIZE: usize = 41;
/// One rounding unit of the placeholder's fixed 3-digit precision.
pub const PLACEHOLDER_UNIT: f64 = 0.001;

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^<price-(\d+\.\d+)>$").expect("regex"));
static CURRENCY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\$(\d+(?:,\d{3})*(?:\.\d+)?)$").expect("regex"));
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+(?:,\d{3})*(?:\.\d+)?$").expect("regex"));

fn check_listed(listed: f64) -> Result<(), CorpusError> {
    if listed > 0.0 && listed.is_finite() {
        Ok(())
    } else {
        Err(CorpusError::Domain(format!("listed price must be positive, got {listed}")))
    }
}

fn format_fraction(fraction: f64) -> String {
    format!("<price-{:.3}>", fraction.clamp(0.0, MAX_FRACTION))
}

/// `$35` at listed `$40` becomes `<price-0.875>`.
pub fn price_to_placeholder(price: f64, listed: f64) -> Result<String, CorpusError> {
    check_listed(listed)?;
    if !price.is_finite() {
        return Err(CorpusError::Domain(format!("price {price} is not finite")));
    }
    Ok(format_fraction(price / listed))
}

pub fn placeholder_fraction(token: &str) -> Result<f64, CorpusError> {
    let caps = PLACEHOLDER
        .captures(token)
        .ok_or_else(|| CorpusError::Placeholder(token.to_string()))?;
    caps[1].parse::<f64>().map_err(|_| CorpusError::Placeholder(token.to_string()))
}

pub fn placeholder_to_price(token: &str, listed: f64) -> Result<f64, CorpusError> {
    check_listed(listed)?;
    Ok(placeholder_fraction(token)? * listed)
}

pub fn is_placeholder(token: &str) -> bool {
    PLACEHOLDER.is_match(token)
}

/// Index of the grid placeholder nearest to `fraction` (after clamping).
pub fn grid_index(fraction: f64) -> usize {
    let f = fraction.clamp(0.0, MAX_FRACTION);
    ((f / GRID_STEP).round() as usize).min(GRID_SIZE - 1)
}

pub fn grid_fraction(index: usize) -> f64 {
    index as f64 * GRID_STEP
}

/// Surface token of grid cell `index`.
pub fn grid_token(index: usize) -> String {
    format_fraction(grid_fraction(index))
}

/// Parses a currency amount from a token (`$35`, `$1,200.50`).
pub fn currency_amount(token: &str) -> Option<f64> {
    CURRENCY.captures(token).and_then(|c| c[1].replace(',', "").parse().ok())
}

/// Finds price mentions in a token sequence: `$35`, a bare number following a
/// `$` token, or an existing placeholder (resolved against `listed`).
pub fn extract_prices(tokens: &[String], listed: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(v) = currency_amount(tok) {
            out.push((i, v));
        } else if i > 0 && tokens[i - 1] == "$" && NUMBER.is_match(tok) {
            if let Ok(v) = tok.replace(',', "").parse() {
                out.push((i, v));
            }
        } else if let Ok(f) = placeholder_fraction(tok) {
            out.push((i, f * listed));
        }
    }
    out
}

/// `(sale - buyer_target) / (listed - buyer_target)`.
pub fn compute_ratio(sale: f64, buyer_target: f64, listed: f64) -> Result<f64, CorpusError> {
    let denom = listed - buyer_target;
    if denom == 0.0 {
        return Err(CorpusError::Domain("listed price equals buyer target; ratio undefined".into()));
    }
    Ok((sale - buyer_target) / denom)
}

/// Four cut points splitting ratios into five classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioBoundaries {
    pub cuts: [f64; 4],
    /// Set when two or more cut points coincide.
    pub degenerate: bool,
}

impl RatioBoundaries {
    /// Quintile cut points (20/40/60/80%) with lower interpolation.
    pub fn fit(train_ratios: &[f64]) -> Result<Self, CorpusError> {
        if train_ratios.len() < 5 {
            return Err(CorpusError::Fit(format!("need at least 5 ratios, got {}", train_ratios.len())));
        }
        if train_ratios.iter().any(|r| !r.is_finite()) {
            return Err(CorpusError::Fit("non-finite ratio".into()));
        }
        let mut sorted = train_ratios.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut cuts = [0.0; 4];
        for (k, cut) in cuts.iter_mut().enumerate() {
            let idx = ((k + 1) * (n - 1)) / 5;
            *cut = sorted[idx];
        }
        let degenerate = cuts.windows(2).any(|w| w[0] >= w[1]);
        if degenerate {
            log::warn!("degenerate ratio boundaries {cuts:?}: quantiles coincide");
        }
        Ok(Self { cuts, degenerate })
    }

    /// Class in `1..=5`; a ratio equal to a cut point falls in the lower class.
    pub fn class_of(&self, r: f64) -> usize {
        1 + self.cuts.iter().filter(|&&c| r > c).count()
    }
}

pub fn ratio_to_class(r: f64, boundaries: &RatioBoundaries) -> usize {
    boundaries.class_of(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholder_examples() {
        assert_eq!(price_to_placeholder(35.0, 40.0).unwrap(), "<price-0.875>");
        assert_eq!(price_to_placeholder(40.0, 40.0).unwrap(), "<price-1.000>");
        assert_eq!(price_to_placeholder(12.5, 50.0).unwrap(), "<price-0.250>");
        assert_eq!(placeholder_to_price("<price-0.875>", 40.0).unwrap(), 35.0);
        assert_eq!(placeholder_to_price("<price-1.000>", 40.0).unwrap(), 40.0);
    }

    #[test]
    fn placeholder_errors() {
        assert!(matches!(price_to_placeholder(3.0, 0.0), Err(CorpusError::Domain(_))));
        assert!(matches!(price_to_placeholder(3.0, -1.0), Err(CorpusError::Domain(_))));
        assert!(matches!(placeholder_to_price("<price-abc>", 4.0), Err(CorpusError::Placeholder(_))));
        assert!(matches!(placeholder_to_price("$35", 4.0), Err(CorpusError::Placeholder(_))));
    }

    #[test]
    fn fractions_clamp_to_range() {
        assert_eq!(price_to_placeholder(500.0, 40.0).unwrap(), "<price-2.000>");
        assert_eq!(price_to_placeholder(-5.0, 40.0).unwrap(), "<price-0.000>");
    }

    #[test]
    fn grid_has_41_cells() {
        assert_eq!(grid_token(0), "<price-0.000>");
        assert_eq!(grid_token(40), "<price-2.000>");
        assert_eq!(grid_index(0.875), 18);
        assert_eq!(grid_index(9.0), 40);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compute_ratio(40.0, 36.0, 40.0).unwrap(), 1.0);
        assert_eq!(compute_ratio(36.0, 36.0, 40.0).unwrap(), 0.0);
        assert_eq!(compute_ratio(35.0, 36.0, 40.0).unwrap(), -0.25);
        assert!(compute_ratio(35.0, 40.0, 40.0).is_err());
    }

    #[test]
    fn quintiles_of_ten() {
        let ratios: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let b = RatioBoundaries::fit(&ratios).unwrap();
        let mut sizes = [0; 5];
        for r in &ratios {
            sizes[b.class_of(*r) - 1] += 1;
        }
        assert_eq!(sizes, [2, 2, 2, 2, 2]);
        assert!(!b.degenerate);
        assert_eq!(b.class_of(-3.0), 1);
        assert_eq!(b.class_of(7.0), 5);
    }

    #[test]
    fn equal_ratios_are_degenerate() {
        let b = RatioBoundaries::fit(&[0.5; 8]).unwrap();
        assert!(b.degenerate);
        let classes: Vec<usize> = (0..8).map(|_| b.class_of(0.5)).collect();
        assert!(classes.iter().all(|&c| c == classes[0]));
    }

    #[test]
    fn too_few_ratios() {
        assert!(matches!(RatioBoundaries::fit(&[0.1, 0.2, 0.3, 0.4]), Err(CorpusError::Fit(_))));
    }

    #[test]
    fn extracts_currency_mentions() {
        let toks: Vec<String> = ["i", "can", "do", "$30", "or", "$", "25", "<price-0.500>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(extract_prices(&toks, 40.0), vec![(3, 30.0), (6, 25.0), (7, 20.0)]);
    }
}

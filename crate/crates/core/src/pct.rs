//! Decimal half-up rounding for presented percentages and ratios.
//!
//! Binary floating point cannot represent values such as 55.185 exactly
//! (the nearest double is 55.18499999...), so rounding the double directly
//! would round down. Values are first rendered to 15 significant digits,
//! which absorbs representation and accumulated arithmetic error, and the
//! half-up rule is then applied to the decimal digits.

/// Rounds `x` half away from zero at `places` decimals.
pub fn round_half_up(x: f64, places: usize) -> f64 {
    format_fixed(x, places).parse().expect("formatted decimal parses")
}

/// Formats `x` with exactly `places` decimals using half-up rounding.
pub fn format_fixed(x: f64, places: usize) -> String {
    assert!(places <= 9, "at most 9 decimal places supported");
    if !x.is_finite() {
        return x.to_string();
    }
    let negative = x < 0.0;
    let int_digits = if x.abs() >= 1.0 { x.abs().log10().floor() as usize + 1 } else { 1 };
    let decimals = 15usize.saturating_sub(int_digits).max(places + 1);
    let text = format!("{:.*}", decimals, x.abs());
    let (int_part, frac_part) = text.split_once('.').expect("fixed format has a point");

    // digits of int_part followed by the kept fraction digits, as a decimal string
    let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes().take(places)).map(|b| b - b'0').collect();
    let next = frac_part.as_bytes()[places] - b'0';
    if next >= 5 {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let mut out = String::new();
    let is_zero = digits.iter().all(|d| *d == 0);
    if negative && !is_zero {
        out.push('-');
    }
    out.extend(digits[..split].iter().map(|d| char::from(b'0' + d)));
    if places > 0 {
        out.push('.');
        out.extend(digits[split..].iter().map(|d| char::from(b'0' + d)));
    }
    out
}

/// `covered / total × 100` rounded half-up to two decimals, computed on integers.
///
/// `total == 0` yields 100.0 (nothing to cover).
pub fn ratio_pct(covered: u64, total: u64) -> f64 {
    if total == 0 {
        return 100.0;
    }
    let covered = covered.min(total) as u128;
    let total = total as u128;
    // hundredths of a percent, half-up
    let scaled = (covered * 10_000 * 2 + total) / (2 * total);
    scaled as f64 / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_round_up_despite_binary_representation() {
        assert_eq!(format_fixed((55.60 + 54.77) / 2.0, 2), "55.19");
        assert_eq!(format_fixed((43.13 + 39.72) / 2.0, 2), "41.43");
        assert_eq!(format_fixed(2.675, 2), "2.68");
        assert_eq!(format_fixed(0.89735, 4), "0.8974");
    }

    #[test]
    fn carries_propagate() {
        assert_eq!(format_fixed(9.995, 2), "10.00");
        assert_eq!(format_fixed(99.999, 2), "100.00");
        assert_eq!(format_fixed(0.0, 4), "0.0000");
        assert_eq!(format_fixed(1.0, 0), "1");
        assert_eq!(format_fixed(-1.005, 2), "-1.01");
        assert_eq!(format_fixed(-0.001, 2), "0.00");
    }

    #[test]
    fn large_magnitudes_keep_their_ties() {
        assert_eq!(format_fixed(9909.095, 2), "9909.10");
        assert_eq!(format_fixed(123456.785, 2), "123456.79");
        assert_eq!(format_fixed(1e20, 2), "100000000000000000000.00");
    }

    #[test]
    fn ratio_pct_is_exact() {
        assert_eq!(ratio_pct(89, 100), 89.0);
        assert_eq!(ratio_pct(99, 100), 99.0);
        assert_eq!(ratio_pct(0, 0), 100.0);
        assert_eq!(ratio_pct(1, 3), 33.33);
        assert_eq!(ratio_pct(2, 3), 66.67);
        // 1/8 = 12.5%, exact; 1/16 = 6.25%
        assert_eq!(ratio_pct(1, 16), 6.25);
        // 1/32 = 3.125% -> half-up 3.13
        assert_eq!(ratio_pct(1, 32), 3.13);
    }

    #[test]
    fn round_half_up_returns_number() {
        assert_eq!(round_half_up(55.185, 2), 55.19);
        assert_eq!(round_half_up(0.75, 4), 0.75);
    }
}

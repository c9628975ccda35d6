use crate::error::{Error, Result};

const DAYS_IN_MONTH: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

/// `year + day_of_year / 365`, where `day_of_year` is the number of days
/// before `month` in a non-leap calendar plus `day`.
///
/// `day == 0` means the day is unknown (the start of the month is used) and
/// `month == 0, day == 0` is a bare year. January 28th, 1922 maps to
/// `1922 + 28/365`.
pub fn date_to_real(year: i32, month: u32, day: u32) -> Result<f64> {
    let invalid = || Error::Date { year, month, day };
    if month == 0 {
        return if day == 0 { Ok(year as f64) } else { Err(invalid()) };
    }
    if month > 12 {
        return Err(invalid());
    }
    let mut last = DAYS_IN_MONTH[month as usize - 1];
    if month == 2 && is_leap(year) {
        last = 29;
    }
    if day > last {
        return Err(invalid());
    }
    let before: u32 = DAYS_IN_MONTH[..month as usize - 1].iter().sum();
    Ok(year as f64 + (before + day) as f64 / 365.0)
}

/// Parses `YYYY-MM-DD` (a leading `-` marks a BCE year). Returns `None` if
/// the text does not have the date shape at all.
pub fn parse_date(text: &str) -> Option<Result<f64>> {
    let (sign, body) = match text.strip_prefix('-') {
        Some(rest) => (-1, rest),
        None => (1, text),
    };
    let parts: Vec<&str> = body.split('-').collect();
    if parts.len() != 3 || parts.iter().any(|p| p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit())) {
        return None;
    }
    let year: i32 = parts[0].parse().ok()?;
    let month: u32 = parts[1].parse().ok()?;
    let day: u32 = parts[2].parse().ok()?;
    Some(date_to_real(sign * year, month, day))
}

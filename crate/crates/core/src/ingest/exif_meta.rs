use chrono::{NaiveDateTime, Timelike};
use exif::{In, Tag, Value};

#[derive(Debug, Default, Clone, PartialEq)]
pub(crate) struct ExifSummary {
    pub captured_at: Option<NaiveDateTime>,
    pub has_subsec: bool,
    pub camera_model: Option<String>,
    pub camera_serial: Option<String>,
    pub lens_id: Option<String>,
}

fn ascii(exif: &exif::Exif, tag: Tag) -> Option<String> {
    let field = exif.get_field(tag, In::PRIMARY)?;
    match &field.value {
        Value::Ascii(parts) => {
            let s = parts
                .iter()
                .map(|p| String::from_utf8_lossy(p).trim().to_string())
                .find(|s| !s.is_empty())?;
            Some(s)
        }
        _ => None,
    }
}

fn parse_datetime(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s.trim(), "%Y:%m:%d %H:%M:%S").ok()
}

/// Fractional seconds from an EXIF SubSecTime string: "79" means 0.79 s.
pub(crate) fn subsec_nanos(digits: &str) -> Option<u32> {
    let digits = digits.trim();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut padded: String = digits.chars().take(9).collect();
    while padded.len() < 9 {
        padded.push('0');
    }
    padded.parse().ok()
}

pub(crate) fn read(bytes: &[u8]) -> ExifSummary {
    let mut cursor = std::io::Cursor::new(bytes);
    let exif = match exif::Reader::new().read_from_container(&mut cursor) {
        Ok(e) => e,
        Err(_) => return ExifSummary::default(),
    };

    // DateTimeOriginal, then DateTimeDigitized, then DateTime
    let candidates = [
        (Tag::DateTimeOriginal, Tag::SubSecTimeOriginal),
        (Tag::DateTimeDigitized, Tag::SubSecTimeDigitized),
        (Tag::DateTime, Tag::SubSecTime),
    ];
    let mut captured_at = None;
    let mut has_subsec = false;
    for (dt_tag, subsec_tag) in candidates {
        if let Some(dt) = ascii(&exif, dt_tag).as_deref().and_then(parse_datetime) {
            let sub = ascii(&exif, subsec_tag).as_deref().and_then(subsec_nanos);
            has_subsec = sub.is_some();
            captured_at = Some(match sub {
                Some(n) => dt.with_nanosecond(n).unwrap_or(dt),
                None => dt,
            });
            break;
        }
    }

    let camera_model = match (ascii(&exif, Tag::Make), ascii(&exif, Tag::Model)) {
        (Some(make), Some(model)) => Some(format!("{make} {model}")),
        (make, model) => make.or(model),
    };

    ExifSummary {
        captured_at,
        has_subsec,
        camera_model,
        camera_serial: ascii(&exif, Tag::BodySerialNumber),
        lens_id: ascii(&exif, Tag::LensModel).or_else(|| ascii(&exif, Tag::LensSerialNumber)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsec_digits_are_fractional() {
        assert_eq!(subsec_nanos("79"), Some(790_000_000));
        assert_eq!(subsec_nanos("5"), Some(500_000_000));
        assert_eq!(subsec_nanos("x1"), None);
        assert_eq!(subsec_nanos(""), None);
    }

    #[test]
    fn garbage_has_no_exif() {
        assert_eq!(read(b"not an image"), ExifSummary::default());
    }
}

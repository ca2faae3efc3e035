use super::{Label, Magnification, Subtype};
use crate::error::{Error, Result};

/// Fields encoded in a `SOB_<B|M>_<SUBTYPE>-<patient>-<mag>-<seq>.png` name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedName {
    pub label: Label,
    pub subtype: Subtype,
    pub patient_id: String,
    pub magnification: Magnification,
    pub sequence: u32,
}

fn parse_err(name: &str, component: &'static str, detail: impl Into<String>) -> Error {
    Error::Parse {
        name: name.to_string(),
        component,
        detail: detail.into(),
    }
}

/// Parses a convention-named image file (file name only, no directories).
///
/// Patient ids may themselves contain dashes (`14-22549AB`), so the
/// magnification and sequence are taken from the right.
pub fn parse_filename(name: &str) -> Result<ParsedName> {
    let stem = name
        .strip_suffix(".png")
        .ok_or_else(|| parse_err(name, "extension", "expected `.png`"))?;
    let rest = stem
        .strip_prefix("SOB_")
        .ok_or_else(|| parse_err(name, "prefix", "expected `SOB_`"))?;
    let (class_code, rest) = rest
        .split_once('_')
        .ok_or_else(|| parse_err(name, "class", "expected `B_` or `M_`"))?;
    let label = match class_code {
        "B" => Label::Benign,
        "M" => Label::Malignant,
        other => {
            return Err(parse_err(
                name,
                "class",
                format!("`{other}` is neither B nor M"),
            ))
        }
    };
    let (subtype_code, rest) = rest
        .split_once('-')
        .ok_or_else(|| parse_err(name, "subtype", "missing `-` after subtype"))?;
    let subtype: Subtype = subtype_code
        .parse()
        .map_err(|_| parse_err(name, "subtype", format!("unknown code `{subtype_code}`")))?;
    if subtype.label() != label {
        return Err(parse_err(
            name,
            "subtype",
            format!("{subtype} is not a {label} subtype"),
        ));
    }
    let (rest, seq) = rest
        .rsplit_once('-')
        .ok_or_else(|| parse_err(name, "sequence", "missing"))?;
    let (patient_id, mag) = rest
        .rsplit_once('-')
        .ok_or_else(|| parse_err(name, "magnification", "missing"))?;
    let magnification = mag
        .parse::<u32>()
        .ok()
        .and_then(|v| Magnification::try_from(v).ok())
        .ok_or_else(|| {
            parse_err(
                name,
                "magnification",
                format!("`{mag}` is not 40/100/200/400"),
            )
        })?;
    if seq.is_empty() || !seq.bytes().all(|b| b.is_ascii_digit()) {
        return Err(parse_err(
            name,
            "sequence",
            format!("`{seq}` is not a number"),
        ));
    }
    let sequence = seq
        .parse()
        .map_err(|_| parse_err(name, "sequence", format!("`{seq}` is out of range")))?;
    if patient_id.is_empty() {
        return Err(parse_err(name, "patient", "empty patient id"));
    }
    Ok(ParsedName {
        label,
        subtype,
        patient_id: patient_id.to_string(),
        magnification,
        sequence,
    })
}

/// Inverse of [`parse_filename`].
pub fn format_filename(
    subtype: Subtype,
    patient_id: &str,
    magnification: Magnification,
    sequence: u32,
) -> String {
    let class = match subtype.label() {
        Label::Benign => "B",
        Label::Malignant => "M",
    };
    format!(
        "SOB_{class}_{}-{patient_id}-{}-{sequence:03}.png",
        subtype.code(),
        magnification.value()
    )
}

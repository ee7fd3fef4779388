//! Minimal IPTC-IIM reader: pulls `2:25` keyword datasets out of the
//! Photoshop (APP13) segment of a JPEG file.

use std::collections::BTreeSet;

const PHOTOSHOP_SIG: &[u8] = b"Photoshop 3.0\0";
const RESOURCE_IPTC: u16 = 0x0404;
const RECORD_APPLICATION: u8 = 2;
const DATASET_KEYWORDS: u8 = 25;

/// Returns the IPTC keywords of a JPEG byte stream. Non-JPEG input and
/// files without an IPTC block yield an empty set.
pub fn read_keywords(jpeg: &[u8]) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for segment in app13_segments(jpeg) {
        if let Some(iim) = iptc_resource(segment) {
            collect_keywords(iim, &mut out);
        }
    }
    out
}

fn app13_segments(data: &[u8]) -> Vec<&[u8]> {
    let mut segments = Vec::new();
    if data.len() < 4 || data[0] != 0xFF || data[1] != 0xD8 {
        return segments;
    }
    let mut pos = 2;
    while pos + 4 <= data.len() {
        if data[pos] != 0xFF {
            break;
        }
        let marker = data[pos + 1];
        // fill bytes
        if marker == 0xFF {
            pos += 1;
            continue;
        }
        // start of scan or end of image: no more metadata segments
        if marker == 0xDA || marker == 0xD9 {
            break;
        }
        if (0xD0..=0xD7).contains(&marker) || marker == 0x01 {
            pos += 2;
            continue;
        }
        let len = u16::from_be_bytes([data[pos + 2], data[pos + 3]]) as usize;
        if len < 2 || pos + 2 + len > data.len() {
            break;
        }
        let body = &data[pos + 4..pos + 2 + len];
        if marker == 0xED {
            segments.push(body);
        }
        pos += 2 + len;
    }
    segments
}

fn iptc_resource(segment: &[u8]) -> Option<&[u8]> {
    let mut rest = segment.strip_prefix(PHOTOSHOP_SIG)?;
    while rest.len() >= 12 && &rest[..4] == b"8BIM" {
        let id = u16::from_be_bytes([rest[4], rest[5]]);
        // Pascal string name, padded so name field length is even
        let name_len = rest[6] as usize;
        let mut name_field = 1 + name_len;
        if name_field % 2 == 1 {
            name_field += 1;
        }
        let size_at = 6 + name_field;
        if rest.len() < size_at + 4 {
            return None;
        }
        let size = u32::from_be_bytes(rest[size_at..size_at + 4].try_into().ok()?) as usize;
        let data_at = size_at + 4;
        if rest.len() < data_at + size {
            return None;
        }
        if id == RESOURCE_IPTC {
            return Some(&rest[data_at..data_at + size]);
        }
        let padded = size + (size % 2);
        rest = rest.get(data_at + padded..)?;
    }
    None
}

fn collect_keywords(mut iim: &[u8], out: &mut BTreeSet<String>) {
    while iim.len() >= 5 && iim[0] == 0x1C {
        let record = iim[1];
        let dataset = iim[2];
        let raw_len = u16::from_be_bytes([iim[3], iim[4]]);
        let (len, header) = if raw_len & 0x8000 != 0 {
            // extended dataset: low 15 bits give the byte count of the length field
            let n = (raw_len & 0x7FFF) as usize;
            if n == 0 || n > 4 || iim.len() < 5 + n {
                return;
            }
            let len = iim[5..5 + n].iter().fold(0usize, |acc, b| (acc << 8) | *b as usize);
            (len, 5 + n)
        } else {
            (raw_len as usize, 5)
        };
        if iim.len() < header + len {
            return;
        }
        if record == RECORD_APPLICATION && dataset == DATASET_KEYWORDS {
            let kw = String::from_utf8_lossy(&iim[header..header + len]).trim().to_string();
            if !kw.is_empty() {
                out.insert(kw);
            }
        }
        iim = &iim[header + len..];
    }
}

/// Builds an APP13 segment (marker included) carrying the given keywords.
/// Used to produce fixtures with embedded keywords.
pub fn encode_app13(keywords: &[&str]) -> Vec<u8> {
    let mut iim = Vec::new();
    // record version dataset, conventionally first
    iim.extend_from_slice(&[0x1C, 2, 0, 0, 2, 0, 4]);
    for kw in keywords {
        let bytes = kw.as_bytes();
        iim.extend_from_slice(&[0x1C, RECORD_APPLICATION, DATASET_KEYWORDS]);
        iim.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
        iim.extend_from_slice(bytes);
    }
    let mut body = Vec::new();
    body.extend_from_slice(PHOTOSHOP_SIG);
    body.extend_from_slice(b"8BIM");
    body.extend_from_slice(&RESOURCE_IPTC.to_be_bytes());
    body.extend_from_slice(&[0, 0]);
    body.extend_from_slice(&(iim.len() as u32).to_be_bytes());
    body.extend_from_slice(&iim);
    if iim.len() % 2 == 1 {
        body.push(0);
    }
    let mut seg = vec![0xFF, 0xED];
    seg.extend_from_slice(&((body.len() + 2) as u16).to_be_bytes());
    seg.extend_from_slice(&body);
    seg
}

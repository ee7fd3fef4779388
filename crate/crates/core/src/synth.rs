//! Synthetic fixtures: moving-square image sequences with known ground
//! truth, and JPEG encoding with embedded EXIF/IPTC metadata.

use crate::ingest::iptc;
use crate::region::Region;
use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::Cursor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareTrack {
    pub x0: i32,
    pub y0: i32,
    pub dx: i32,
    pub dy: i32,
    pub size: u32,
    pub intensity: u8,
}

impl SquareTrack {
    pub fn position(&self, frame: usize) -> (i32, i32) {
        (self.x0 + self.dx * frame as i32, self.y0 + self.dy * frame as i32)
    }
}

/// Squares moving at constant velocity over a flat background with
/// per-pixel Gaussian noise.
#[derive(Debug, Clone)]
pub struct MovingSquares {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    pub background: [u8; 3],
    pub noise_sigma: f64,
    pub seed: u64,
    pub squares: Vec<SquareTrack>,
}

impl MovingSquares {
    /// One 40x40 white square moving 5 px/frame on mid-gray, noise sigma 2.
    pub fn single(frames: usize, seed: u64) -> Self {
        Self {
            width: 400,
            height: 300,
            frames,
            background: [100, 100, 100],
            noise_sigma: 2.0,
            seed,
            squares: vec![SquareTrack {
                x0: 20,
                y0: 120,
                dx: 5,
                dy: 0,
                size: 40,
                intensity: 255,
            }],
        }
    }

    /// Ground-truth box of every square in `frame`, clipped to the image.
    pub fn truth(&self, frame: usize) -> Vec<Region> {
        self.squares
            .iter()
            .filter_map(|s| {
                let (x, y) = s.position(frame);
                Region::from_corners_clamped(
                    x as f64,
                    y as f64,
                    (x + s.size as i32) as f64,
                    (y + s.size as i32) as f64,
                    self.width,
                    self.height,
                )
            })
            .collect()
    }

    pub fn render(&self, frame: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(frame as u64));
        let noise = Normal::new(0.0, self.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let truths: Vec<(Region, u8)> = self
            .squares
            .iter()
            .zip(self.truth(frame))
            .map(|(s, r)| (r, s.intensity))
            .collect();
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let n = if self.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let base = truths
                .iter()
                .find(|(r, _)| x >= r.x && y >= r.y && (x as u64) < r.right() && (y as u64) < r.bottom())
                .map(|(_, v)| [*v; 3])
                .unwrap_or(self.background);
            let px = base.map(|c| (c as f64 + n).round().clamp(0.0, 255.0) as u8);
            Rgb(px)
        })
    }

    pub fn render_all(&self) -> Vec<RgbImage> {
        (0..self.frames).map(|f| self.render(f)).collect()
    }
}

/// Metadata to embed when encoding a fixture JPEG.
#[derive(Debug, Clone, Default)]
pub struct FixtureMeta {
    pub captured_at: Option<NaiveDateTime>,
    /// (make, model)
    pub camera_model: Option<(String, String)>,
    pub camera_serial: Option<String>,
    pub lens_id: Option<String>,
    pub keywords: Vec<String>,
}

fn exif_app1(meta: &FixtureMeta) -> Option<Vec<u8>> {
    use exif::{Field, In, Tag, Value};
    let ascii = |tag: Tag, s: &str| Field {
        tag,
        ifd_num: In::PRIMARY,
        value: Value::Ascii(vec![s.as_bytes().to_vec()]),
    };
    let mut fields = Vec::new();
    if let Some(t) = meta.captured_at {
        let stamp = t.format("%Y:%m:%d %H:%M:%S").to_string();
        fields.push(ascii(Tag::DateTimeOriginal, &stamp));
        fields.push(ascii(Tag::DateTime, &stamp));
        let centis = t.nanosecond() / 10_000_000;
        if t.nanosecond() != 0 {
            fields.push(ascii(Tag::SubSecTimeOriginal, &format!("{centis:02}")));
        }
    }
    if let Some((make, model)) = &meta.camera_model {
        fields.push(ascii(Tag::Make, make));
        fields.push(ascii(Tag::Model, model));
    }
    if let Some(s) = &meta.camera_serial {
        fields.push(ascii(Tag::BodySerialNumber, s));
    }
    if let Some(s) = &meta.lens_id {
        fields.push(ascii(Tag::LensModel, s));
    }
    if fields.is_empty() {
        return None;
    }
    let mut writer = exif::experimental::Writer::new();
    for f in &fields {
        writer.push_field(f);
    }
    let mut tiff = Cursor::new(Vec::new());
    writer.write(&mut tiff, false).expect("in-memory exif write");
    let tiff = tiff.into_inner();

    let mut seg = vec![0xFF, 0xE1];
    seg.extend_from_slice(&((tiff.len() + 8) as u16).to_be_bytes());
    seg.extend_from_slice(b"Exif\0\0");
    seg.extend_from_slice(&tiff);
    Some(seg)
}

/// Encodes `img` as JPEG (quality 95) with EXIF and IPTC segments spliced
/// in directly after SOI.
pub fn encode_jpeg(img: &RgbImage, meta: &FixtureMeta) -> Vec<u8> {
    let mut jpeg = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut jpeg, 95)
        .encode_image(img)
        .expect("in-memory jpeg encode");
    let mut out = Vec::with_capacity(jpeg.len() + 512);
    out.extend_from_slice(&jpeg[..2]);
    if let Some(app1) = exif_app1(meta) {
        out.extend_from_slice(&app1);
    }
    if !meta.keywords.is_empty() {
        let kws: Vec<&str> = meta.keywords.iter().map(String::as_str).collect();
        out.extend_from_slice(&iptc::encode_app13(&kws));
    }
    out.extend_from_slice(&jpeg[2..]);
    out
}

/// One image of a written corpus with its ground-truth boxes.
#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub truth: Vec<Region>,
}

/// Writes `batches` bursts of `per_batch` JPEG frames into `dir`. Bursts are
/// a minute apart with frames 0.5 s apart; every third burst is a grayscale
/// night sequence. Each frame shows one bright square crossing the scene.
pub fn write_corpus(dir: &Path, batches: usize, per_batch: usize, seed: u64) -> std::io::Result<Vec<CorpusImage>> {
    std::fs::create_dir_all(dir)?;
    let start = NaiveDate::from_ymd_opt(2022, 3, 29)
        .unwrap()
        .and_hms_opt(19, 0, 0)
        .unwrap();
    let mut out = Vec::new();
    for b in 0..batches {
        let night = b % 3 == 2;
        let seq = MovingSquares {
            width: 320,
            height: 240,
            frames: per_batch,
            background: if night { [70, 70, 70] } else { [90, 125, 80] },
            noise_sigma: 2.0,
            seed: seed.wrapping_add(b as u64),
            squares: vec![SquareTrack {
                x0: 10 + 7 * b as i32,
                y0: 60 + 11 * (b as i32 % 5),
                dx: 10,
                dy: 3,
                size: 40,
                intensity: if night { 235 } else { 255 },
            }],
        };
        let keywords: Vec<String> = match b % 4 {
            1 => vec!["rain".into()],
            3 => vec!["overcast".into(), "fog".into()],
            _ => Vec::new(),
        };
        for f in 0..per_batch {
            let img = seq.render(f);
            let at = start + Duration::seconds(60 * b as i64) + Duration::milliseconds(500 * f as i64);
            let meta = FixtureMeta {
                captured_at: Some(at),
                camera_model: Some(("Synth".into(), "Trap".into())),
                camera_serial: Some(format!("CAM-{}", b % 2)),
                lens_id: None,
                keywords: keywords.clone(),
            };
            let name = format!("b{b:02}_f{f:03}.jpg");
            let path = dir.join(&name);
            std::fs::write(&path, encode_jpeg(&img, &meta))?;
            out.push(CorpusImage {
                image_id: name,
                path,
                width: seq.width,
                height: seq.height,
                truth: seq.truth(f),
            });
        }
    }
    Ok(out)
}

//! Brown–Conrady lens distortion correction keyed by camera serial.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraProfile {
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    /// Principal point; the image centre when absent.
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    pub fx: f64,
    pub fy: f64,
}

impl CameraProfile {
    pub fn identity() -> Self {
        Self {
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            cx: None,
            cy: None,
            fx: 1.0,
            fy: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    fn centre(&self, width: u32, height: u32) -> (f64, f64) {
        (
            self.cx.unwrap_or((width as f64 - 1.0) / 2.0),
            self.cy.unwrap_or((height as f64 - 1.0) / 2.0),
        )
    }

    /// Maps an undistorted pixel position to where the lens images it.
    pub fn distort_point(&self, u: f64, v: f64, width: u32, height: u32) -> (f64, f64) {
        let (cx, cy) = self.centre(width, height);
        let x = (u - cx) / self.fx;
        let y = (v - cy) / self.fy;
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (cx + xd * self.fx, cy + yd * self.fy)
    }

    /// Inverse of [`distort_point`](Self::distort_point) by fixed-point
    /// iteration; adequate for the mild distortions of trap lenses.
    pub fn undistort_point(&self, ud: f64, vd: f64, width: u32, height: u32) -> (f64, f64) {
        let (mut u, mut v) = (ud, vd);
        for _ in 0..50 {
            let (du, dv) = self.distort_point(u, v, width, height);
            let (eu, ev) = (ud - du, vd - dv);
            u += eu;
            v += ev;
            if eu.abs() < 1e-9 && ev.abs() < 1e-9 {
                break;
            }
        }
        (u, v)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("no camera profile for serial {serial:?}")]
    MissingProfile { serial: Option<String> },
    #[error("reading camera profiles {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing camera profiles {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Profiles keyed by camera serial, as stored in `profiles.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProfileSet(pub BTreeMap<String, CameraProfile>);

impl ProfileSet {
    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ProfileError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    /// Looks up the profile for `serial`. Without a match, strict mode
    /// fails and lenient mode falls back to identity.
    pub fn resolve(&self, serial: Option<&str>, strict: bool) -> Result<CameraProfile, ProfileError> {
        match serial.and_then(|s| self.0.get(s)) {
            Some(p) => Ok(p.clone()),
            None if strict => Err(ProfileError::MissingProfile {
                serial: serial.map(str::to_string),
            }),
            None => Ok(CameraProfile::identity()),
        }
    }
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = img.dimensions();
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return Rgb([0, 0, 0]);
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |xi: f64, yi: f64| -> [f64; 3] {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            [0.0; 3]
        } else {
            img.get_pixel(xi as u32, yi as u32).0.map(f64::from)
        }
    };
    let a = sample(x0, y0);
    let b = sample(x0 + 1.0, y0);
    let c = sample(x0, y0 + 1.0);
    let d = sample(x0 + 1.0, y0 + 1.0);
    let mut out = [0u8; 3];
    for i in 0..3 {
        let top = a[i] + (b[i] - a[i]) * fx;
        let bottom = c[i] + (d[i] - c[i]) * fx;
        out[i] = (top + (bottom - top) * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Removes lens distortion. Output size equals input size; pixels whose
/// source falls outside the frame become black. Identity is a no-op copy.
pub fn preprocess(img: &RgbImage, profile: &CameraProfile) -> RgbImage {
    if profile.is_identity() {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |u, v| {
        let (xs, ys) = profile.distort_point(u as f64, v as f64, w, h);
        bilinear(img, xs, ys)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(k1: f64) -> CameraProfile {
        CameraProfile {
            k1,
            fx: 300.0,
            fy: 300.0,
            ..CameraProfile::identity()
        }
    }

    #[test]
    fn identity_is_bit_identical() {
        let img = RgbImage::from_fn(31, 17, |x, y| Rgb([(x * 7) as u8, (y * 13) as u8, (x ^ y) as u8]));
        assert_eq!(preprocess(&img, &CameraProfile::identity()), img);
    }

    #[test]
    fn undistort_inverts_distort() {
        let p = CameraProfile {
            k2: -0.02,
            p1: 0.001,
            p2: -0.002,
            ..profile(0.1)
        };
        for (u, v) in [(0.0, 0.0), (10.0, 200.0), (319.0, 239.0), (160.0, 120.0)] {
            let (ud, vd) = p.distort_point(u, v, 320, 240);
            let (ru, rv) = p.undistort_point(ud, vd, 320, 240);
            assert!((ru - u).abs() < 1e-6 && (rv - v).abs() < 1e-6);
        }
    }

    /// Renders vertical and horizontal 2 px lines as they would appear
    /// through the lens, by pulling each distorted pixel back into the
    /// undistorted scene with 4x4 supersampling.
    fn distorted_grid(p: &CameraProfile, w: u32, h: u32, spacing: f64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let mut dark = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let xd = x as f64 - 0.5 + (sx as f64 + 0.5) / 4.0;
                    let yd = y as f64 - 0.5 + (sy as f64 + 0.5) / 4.0;
                    let (u, v) = p.undistort_point(xd, yd, w, h);
                    let on = |c: f64| {
                        let m = c.rem_euclid(spacing);
                        m < 1.0 || m > spacing - 1.0
                    };
                    if on(u) || on(v) {
                        dark += 1;
                    }
                }
            }
            let g = (255 - dark * 255 / 16) as u8;
            Rgb([g, g, g])
        })
    }

    /// RMS deviation from a fitted straight line of the darkness centroid
    /// of each vertical gridline, sampled per row away from crossings.
    fn vertical_line_rms(img: &RgbImage, xs: &[f64], spacing: f64) -> f64 {
        let (w, h) = img.dimensions();
        let mut sq = 0.0;
        let mut n = 0usize;
        for &x_line in xs {
            let mut pts = Vec::new();
            for y in 10..h - 10 {
                let m = (y as f64).rem_euclid(spacing);
                if m < 6.0 || m > spacing - 6.0 {
                    continue;
                }
                let lo = (x_line - 6.0).max(0.0) as u32;
                let hi = ((x_line + 6.0) as u32).min(w - 1);
                let (mut s, mut sx) = (0.0, 0.0);
                for x in lo..=hi {
                    let d = 255.0 - img.get_pixel(x, y).0[0] as f64;
                    s += d;
                    sx += d * x as f64;
                }
                if s > 0.0 {
                    pts.push((y as f64, sx / s));
                }
            }
            let k = pts.len() as f64;
            let my = pts.iter().map(|p| p.0).sum::<f64>() / k;
            let mx = pts.iter().map(|p| p.1).sum::<f64>() / k;
            let cov: f64 = pts.iter().map(|p| (p.0 - my) * (p.1 - mx)).sum();
            let var: f64 = pts.iter().map(|p| (p.0 - my).powi(2)).sum();
            let slope = cov / var;
            for (y, x) in &pts {
                let r = x - (mx + slope * (y - my));
                sq += r * r;
                n += 1;
            }
        }
        (sq / n as f64).sqrt()
    }

    #[test]
    fn gridlines_become_straight() {
        let (w, h) = (320, 240);
        let p = CameraProfile {
            fx: 120.0,
            fy: 120.0,
            ..profile(0.1)
        };
        let spacing = 40.0;
        let distorted = distorted_grid(&p, w, h, spacing);
        let xs = [40.0, 80.0, 240.0, 280.0];
        let before = vertical_line_rms(&distorted, &xs, spacing);
        let corrected = preprocess(&distorted, &p);
        let after = vertical_line_rms(&corrected, &xs, spacing);
        assert!(before > 1.0, "fixture not visibly distorted: {before}");
        assert!(after < 0.5, "rms after correction {after}");
    }

    #[test]
    fn strict_mode_rejects_unknown_serial() {
        let set = ProfileSet(BTreeMap::from([("A1".to_string(), profile(0.1))]));
        assert!(matches!(
            set.resolve(Some("B2"), true),
            Err(ProfileError::MissingProfile { .. })
        ));
        assert!(set.resolve(Some("B2"), false).unwrap().is_identity());
        assert_eq!(set.resolve(Some("A1"), true).unwrap().k1, 0.1);
    }

    #[test]
    fn profiles_parse_keyed_by_serial() {
        let json = r#"{"CAM-0": {"k1": -0.05, "fx": 800, "fy": 800}}"#;
        let set: ProfileSet = serde_json::from_str(json).unwrap();
        assert_eq!(set.0["CAM-0"].k1, -0.05);
        assert!(serde_json::from_str::<ProfileSet>(r#"{"x": {"fx": 1, "fy": 1, "k9": 1}}"#).is_err());
    }
}

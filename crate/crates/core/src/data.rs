//! Dataset plumbing: binary netpbm images, tab-separated manifests,
//! synthetic scene generation, and loading into appearance stacks.
//!
//! Manifests store paths relative to their own location, so a regenerated
//! dataset in a different directory is byte-identical to the original.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridcore::{resize_bilinear, Grid};
use crate::texture::{canonical_modalities, Modality, ModalityStack};

// netpbm codec ---------------------------------------------------------------

struct ByteReader<'a> {
    what: &'a str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what.to_string(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.data.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self, name: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected {name}")));
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("unreadable {name}")))
    }
}

/// Decodes a binary PPM (`P6`, three channels) or PGM (`P5`, one channel)
/// with maxval 255. Byte `v` maps to `v / 255`.
pub fn read_image(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes, &path.display().to_string())
}

fn decode_netpbm(bytes: &[u8], what: &str) -> Result<Grid> {
    let mut r = ByteReader {
        what,
        data: bytes,
        pos: 0,
    };
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(r.err("expected P5 or P6 magic")),
    };
    r.pos = 2;
    let width = r.read_number("width")?;
    let height = r.read_number("height")?;
    let maxval = r.read_number("maxval")?;
    if maxval != 255 {
        return Err(r.err(format!("unsupported maxval {maxval}, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(r.err("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.err("expected single whitespace before payload")),
    }
    let need = width * height * channels;
    let payload = bytes
        .get(r.pos..r.pos + need)
        .ok_or_else(|| r.err(format!("payload truncated, need {need} bytes")))?;
    // Payload is pixel-interleaved; grids are channel-major.
    let mut data = vec![0.0; need];
    for i in 0..width * height {
        for c in 0..channels {
            data[c * width * height + i] = payload[i * channels + c] as f64 / 255.0;
        }
    }
    Grid::new(channels, height, width, data)
}

/// Encodes a 1-channel grid as binary PGM or a 3-channel grid as binary PPM,
/// mapping `x` to `round(clamp(x, 0, 1) * 255)` with round half away from
/// zero. Round-tripping any decoded image is byte-exact.
pub fn write_image(grid: &Grid, path: &Path) -> Result<()> {
    let bytes = encode_netpbm(grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_netpbm(grid: &Grid) -> Result<Vec<u8>> {
    let channels = grid.channels();
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::shape("write_image", "1 or 3 channels", grid.shape_str()));
        }
    };
    let (h, w) = (grid.height(), grid.width());
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..channels {
            let v = grid.channel(c)[i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

// Manifest -------------------------------------------------------------------

/// One dataset record. Paths are stored relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub gt: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub thermal: Option<PathBuf>,
    pub flow: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn modality_path(&self, m: Modality) -> Option<&PathBuf> {
        match m {
            Modality::Depth => self.depth.as_ref(),
            Modality::Thermal => self.thermal.as_ref(),
            Modality::Flow => self.flow.as_ref(),
        }
    }
}

fn path_field(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "-".to_string(), |p| p.display().to_string())
}

/// Writes `id<TAB>image<TAB>gt<TAB>depth<TAB>thermal<TAB>flow` lines, `-`
/// for absent planes.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.image.display(),
            path_field(&e.gt),
            path_field(&e.depth),
            path_field(&e.thermal),
            path_field(&e.flow),
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Format {
                what: what.clone(),
                offset: line_offset,
                reason: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let opt = |s: &str| {
            if s == "-" {
                None
            } else {
                Some(PathBuf::from(s))
            }
        };
        let image = opt(fields[1]).ok_or_else(|| Error::Format {
            what: what.clone(),
            offset: line_offset,
            reason: "image path cannot be \"-\"".into(),
        })?;
        entries.push(ManifestEntry {
            id: fields[0].to_string(),
            image,
            gt: opt(fields[2]),
            depth: opt(fields[3]),
            thermal: opt(fields[4]),
            flow: opt(fields[5]),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(&e.id) {
            return Err(Error::param("manifest", format!("duplicate sample id \"{}\"", e.id)));
        }
    }
    Ok(entries)
}

// Synthetic generation -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobKind {
    Ellipse,
    RoundedRect,
}

impl BlobKind {
    pub fn name(self) -> &'static str {
        match self {
            BlobKind::Ellipse => "ellipse",
            BlobKind::RoundedRect => "rounded-rect",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(BlobKind::Ellipse),
            "rounded-rect" => Ok(BlobKind::RoundedRect),
            other => Err(Error::param("blob_kind", format!("unknown blob kind \"{other}\""))),
        }
    }
}

/// Parameters for the synthetic scene generator.
///
/// Scenes are a noisy flat background with 1-2 brighter blobs; declared
/// modalities render as simple mask-correlated planes with their own noise.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub count: usize,
    pub side: usize,
    pub blob_min: usize,
    pub blob_max: usize,
    pub blob_kind: BlobKind,
    /// Foreground color lift over the background, per channel.
    pub color_offset: f64,
    /// Uniform additive noise amplitude; must stay below the offset.
    pub noise_amp: f64,
    pub modalities: Vec<Modality>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 8,
            side: 64,
            blob_min: 1,
            blob_max: 2,
            blob_kind: BlobKind::Ellipse,
            color_offset: 0.4,
            noise_amp: 0.05,
            modalities: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::param("count", "must be positive"));
        }
        if self.side == 0 || self.side % 16 != 0 {
            return Err(Error::param(
                "side",
                format!("must be a positive multiple of 16, got {}", self.side),
            ));
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max {
            return Err(Error::param(
                "blobs",
                format!("need 1 <= min <= max, got {}..{}", self.blob_min, self.blob_max),
            ));
        }
        if !(self.color_offset.is_finite() && (0.0..=1.0).contains(&self.color_offset)) {
            return Err(Error::param("color_offset", "must be in [0, 1]"));
        }
        if !(self.noise_amp.is_finite() && self.noise_amp >= 0.0) {
            return Err(Error::param("noise_amp", "must be finite and >= 0"));
        }
        if self.noise_amp >= self.color_offset {
            return Err(Error::param(
                "noise_amp",
                format!(
                    "noise {} must stay below the color offset {} or the task is unsolvable",
                    self.noise_amp, self.color_offset
                ),
            ));
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Blob {
    fn contains(&self, kind: BlobKind, px: f64, py: f64) -> bool {
        let dx = (px - self.cx).abs();
        let dy = (py - self.cy).abs();
        match kind {
            BlobKind::Ellipse => {
                let u = dx / self.rx;
                let v = dy / self.ry;
                u * u + v * v <= 1.0
            }
            BlobKind::RoundedRect => {
                let cr = 0.3 * self.rx.min(self.ry);
                let qx = (dx - (self.rx - cr)).max(0.0);
                let qy = (dy - (self.ry - cr)).max(0.0);
                qx.hypot(qy) <= cr
            }
        }
    }
}

/// Renders the dataset under `out_dir` and returns the manifest path.
///
/// One seeded generator drives every draw in a fixed order, so the same spec
/// reproduces every file byte for byte. Ids are zero-padded (`00000`, ...);
/// images are `<id>.ppm`, masks `<id>_gt.pgm`, modality planes
/// `<id>_<modality>.pgm`.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let modalities = canonical_modalities(&spec.modalities);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.side;
    let sf = s as f64;
    let mut entries = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let id = format!("{i:05}");
        let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.08..0.45));
        let n_blobs = rng.gen_range(spec.blob_min..=spec.blob_max);
        let blobs: Vec<Blob> = (0..n_blobs)
            .map(|_| Blob {
                cx: rng.gen_range(0.28 * sf..0.72 * sf),
                cy: rng.gen_range(0.28 * sf..0.72 * sf),
                rx: rng.gen_range(0.12 * sf..0.28 * sf),
                ry: rng.gen_range(0.12 * sf..0.28 * sf),
            })
            .collect();
        // Pixel-center rasterization of the blob union.
        let mask = Grid::from_fn(1, s, s, |_, y, x| {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if blobs.iter().any(|b| b.contains(spec.blob_kind, px, py)) {
                1.0
            } else {
                0.0
            }
        })?;
        let mut image = Grid::zeros(3, s, s);
        for y in 0..s {
            for x in 0..s {
                let fg = mask.at(0, y, x) == 1.0;
                for c in 0..3 {
                    let base = if fg { (bg[c] + spec.color_offset).min(1.0) } else { bg[c] };
                    let noise = rng.gen_range(-spec.noise_amp..=spec.noise_amp);
                    image.data_mut()[(c * s + y) * s + x] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
        let image_name = format!("{id}.ppm");
        let gt_name = format!("{id}_gt.pgm");
        write_image(&image, &out_dir.join(&image_name))?;
        write_image(&mask, &out_dir.join(&gt_name))?;

        let mut entry = ManifestEntry {
            id: id.clone(),
            image: PathBuf::from(&image_name),
            gt: Some(PathBuf::from(&gt_name)),
            depth: None,
            thermal: None,
            flow: None,
        };
        for &m in &modalities {
            let plane = render_modality(m, &mask, s, spec.noise_amp, &mut rng);
            let name = format!("{id}_{}.pgm", m.name());
            write_image(&plane, &out_dir.join(&name))?;
            let path = Some(PathBuf::from(&name));
            match m {
                Modality::Depth => entry.depth = path,
                Modality::Thermal => entry.thermal = path,
                Modality::Flow => entry.flow = path,
            }
        }
        entries.push(entry);
    }
    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}

/// Modality planes correlate with the mask through fixed simple rules:
/// depth is a radial ramp lifted on the blob, thermal and flow are
/// constants lifted on the blob. Each plane carries its own noise.
fn render_modality(m: Modality, mask: &Grid, s: usize, noise_amp: f64, rng: &mut ChaCha8Rng) -> Grid {
    let sf = s as f64;
    let max_r = (sf / 2.0) * std::f64::consts::SQRT_2;
    let mut plane = Grid::zeros(1, s, s);
    for y in 0..s {
        for x in 0..s {
            let fg = mask.at(0, y, x);
            let base = match m {
                Modality::Depth => {
                    let r = ((x as f64 + 0.5) - sf / 2.0).hypot((y as f64 + 0.5) - sf / 2.0) / max_r;
                    0.2 + 0.15 * (1.0 - r) + 0.45 * fg
                }
                Modality::Thermal => 0.25 + 0.5 * fg,
                Modality::Flow => 0.15 + 0.55 * fg,
            };
            let noise = rng.gen_range(-noise_amp..=noise_amp);
            plane.data_mut()[y * s + x] = (base + noise).clamp(0.0, 1.0);
        }
    }
    plane
}

// Loading --------------------------------------------------------------------

/// One loaded sample: the appearance stack at the target side, and the
/// ground-truth mask when the manifest has one.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub stack: ModalityStack,
    pub gt: Option<Grid>,
}

/// Nearest-neighbor resize with pixel-center mapping; binary planes stay
/// binary.
fn resize_nearest(g: &Grid, out_h: usize, out_w: usize) -> Grid {
    let (c_n, in_h, in_w) = g.shape();
    Grid::from_fn(c_n, out_h, out_w, |c, y, x| {
        let sy = (((y as f64 + 0.5) * in_h as f64 / out_h as f64) as usize).min(in_h - 1);
        let sx = (((x as f64 + 0.5) * in_w as f64 / out_w as f64) as usize).min(in_w - 1);
        g.at(c, sy, sx)
    })
    .expect("nearest resize preserves finiteness")
}

fn sample_err(id: &str, e: Error) -> Error {
    Error::Sample {
        id: id.to_string(),
        reason: e.to_string(),
    }
}

/// Loads every manifest record: RGB and modality planes bilinearly resized
/// to `target_side` squared, ground truth resized nearest-neighbor, and the
/// declared modalities stacked (missing planes pad as constant 0.5).
pub fn load_dataset(manifest_path: &Path, target_side: usize, declared: &[Modality]) -> Result<Vec<Sample>> {
    if target_side == 0 {
        return Err(Error::param("target_side", "must be positive"));
    }
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let declared = canonical_modalities(declared);
    let mut samples = Vec::with_capacity(entries.len());
    for e in &entries {
        let rgb = read_image(&base.join(&e.image)).map_err(|err| sample_err(&e.id, err))?;
        if rgb.channels() != 3 {
            return Err(Error::Sample {
                id: e.id.clone(),
                reason: format!("image must be 3-channel, got {}", rgb.shape_str()),
            });
        }
        let rgb = resize_bilinear(&rgb, target_side, target_side).map_err(|err| sample_err(&e.id, err))?;
        let mut extras = Vec::new();
        for &m in &declared {
            if let Some(rel) = e.modality_path(m) {
                let plane = read_image(&base.join(rel)).map_err(|err| sample_err(&e.id, err))?;
                if plane.channels() != 1 {
                    return Err(Error::Sample {
                        id: e.id.clone(),
                        reason: format!("{} plane must be 1-channel, got {}", m.name(), plane.shape_str()),
                    });
                }
                let plane =
                    resize_bilinear(&plane, target_side, target_side).map_err(|err| sample_err(&e.id, err))?;
                extras.push((m, plane));
            }
        }
        let stack = ModalityStack::new(rgb, &declared, &extras).map_err(|err| sample_err(&e.id, err))?;
        let gt = match &e.gt {
            Some(rel) => {
                let g = read_image(&base.join(rel)).map_err(|err| sample_err(&e.id, err))?;
                if g.channels() != 1 {
                    return Err(Error::Sample {
                        id: e.id.clone(),
                        reason: format!("ground truth must be 1-channel, got {}", g.shape_str()),
                    });
                }
                Some(resize_nearest(&g, target_side, target_side))
            }
            None => None,
        };
        samples.push(Sample {
            id: e.id.clone(),
            stack,
            gt,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::f_beta;
    use tempfile::TempDir;

    fn pseudo_random_bytes(n: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen()).collect()
    }

    #[test]
    fn codec_roundtrip_is_byte_exact() {
        let dir = TempDir::new().unwrap();
        for (channels, name) in [(3usize, "a.ppm"), (1usize, "b.pgm")] {
            let bytes = pseudo_random_bytes(channels * 6 * 5, 3);
            let data: Vec<f64> = (0..channels * 6 * 5)
                .map(|i| bytes[(i % (6 * 5)) * channels + i / (6 * 5)] as f64 / 255.0)
                .collect();
            let grid = Grid::new(channels, 6, 5, data).unwrap();
            let path = dir.path().join(name);
            write_image(&grid, &path).unwrap();
            let back = read_image(&path).unwrap();
            assert_eq!(back.shape(), grid.shape());
            assert_eq!(back.data(), grid.data());
            write_image(&back, &path).unwrap();
            let reback = read_image(&path).unwrap();
            assert_eq!(reback.data(), back.data());
        }
    }

    #[test]
    fn half_rounds_away_from_zero() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("h.pgm");
        write_image(&Grid::constant(1, 2, 2, 0.5).unwrap(), &path).unwrap();
        let back = read_image(&path).unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn decode_rejects_bad_headers() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.pgm");
        fs::write(&path, b"P4\n2 2\n255\n====").unwrap();
        assert!(matches!(read_image(&path).unwrap_err(), Error::Format { .. }));
        fs::write(&path, b"P5\n2 2\n127\n====").unwrap();
        let err = read_image(&path).unwrap_err();
        assert!(err.to_string().contains("127"), "{err}");
        fs::write(&path, b"P5\n4 4\n255\nab").unwrap();
        let err = read_image(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn decode_handles_header_comments() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        let g = read_image(&path).unwrap();
        assert_eq!(g.shape(), (1, 1, 2));
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.tsv");
        let entries = vec![
            ManifestEntry {
                id: "00000".into(),
                image: "00000.ppm".into(),
                gt: Some("00000_gt.pgm".into()),
                depth: Some("00000_depth.pgm".into()),
                thermal: None,
                flow: None,
            },
            ManifestEntry {
                id: "00001".into(),
                image: "00001.ppm".into(),
                gt: None,
                depth: None,
                thermal: None,
                flow: None,
            },
        ];
        write_manifest(&entries, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("00001\t00001.ppm\t-\t-\t-\t-\n"));
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);

        fs::write(&path, "a\tx.ppm\t-\t-\t-\t-\na\ty.ppm\t-\t-\t-\t-\n").unwrap();
        assert!(read_manifest(&path).unwrap_err().to_string().contains("duplicate"));
        fs::write(&path, "a\tx.ppm\t-\t-\n").unwrap();
        assert!(matches!(read_manifest(&path).unwrap_err(), Error::Format { .. }));
    }

    fn quick_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            count: 3,
            side: 48,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            modalities: vec![Modality::Depth, Modality::Flow],
            ..quick_spec(7)
        };
        let d1 = TempDir::new().unwrap();
        let d2 = TempDir::new().unwrap();
        let m1 = gen_synthetic(&spec, d1.path()).unwrap();
        let m2 = gen_synthetic(&spec, d2.path()).unwrap();
        let mut names: Vec<String> = fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(names.contains(&"00000.ppm".to_string()));
        assert!(names.contains(&"00002_flow.pgm".to_string()));
        for name in &names {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    }

    #[test]
    fn zero_noise_scene_is_two_flat_colors_partitioned_by_gt() {
        let spec = SyntheticSpec {
            noise_amp: 0.0,
            blob_kind: BlobKind::RoundedRect,
            ..quick_spec(11)
        };
        let dir = TempDir::new().unwrap();
        let manifest = gen_synthetic(&spec, dir.path()).unwrap();
        let samples = load_dataset(&manifest, spec.side, &[]).unwrap();
        for s in &samples {
            let gt = s.gt.as_ref().unwrap();
            let rgb = s.stack.rgb();
            let fg_count = gt.data().iter().filter(|&&v| v == 1.0).count();
            assert!(fg_count > 0, "blob rasterized to nothing");
            assert!(gt.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let first_bg = gt.data().iter().position(|&v| v == 0.0).unwrap();
            let first_fg = gt.data().iter().position(|&v| v == 1.0).unwrap();
            for c in 0..3 {
                let plane = rgb.channel(c);
                for (i, &g) in gt.data().iter().enumerate() {
                    let want = if g == 1.0 { plane[first_fg] } else { plane[first_bg] };
                    assert_eq!(plane[i], want, "sample {} channel {c} pixel {i}", s.id);
                }
                assert_ne!(plane[first_fg], plane[first_bg]);
            }
        }
    }

    #[test]
    fn depth_is_higher_on_the_foreground() {
        let spec = SyntheticSpec {
            modalities: vec![Modality::Depth],
            ..quick_spec(13)
        };
        let dir = TempDir::new().unwrap();
        let manifest = gen_synthetic(&spec, dir.path()).unwrap();
        let samples = load_dataset(&manifest, spec.side, &[Modality::Depth]).unwrap();
        for s in &samples {
            let gt = s.gt.as_ref().unwrap();
            let depth = s.stack.planes().channel(3);
            let mut fg = (0.0, 0usize);
            let mut bg = (0.0, 0usize);
            for (i, &g) in gt.data().iter().enumerate() {
                if g == 1.0 {
                    fg = (fg.0 + depth[i], fg.1 + 1);
                } else {
                    bg = (bg.0 + depth[i], bg.1 + 1);
                }
            }
            assert!(fg.0 / fg.1 as f64 > bg.0 / bg.1 as f64, "sample {}", s.id);
        }
    }

    // A plain threshold sweep on one color channel must already solve the
    // task; otherwise no model could learn it.
    #[test]
    fn default_noise_keeps_the_task_threshold_separable() {
        let spec = SyntheticSpec {
            count: 4,
            side: 64,
            ..quick_spec(17)
        };
        let dir = TempDir::new().unwrap();
        let manifest = gen_synthetic(&spec, dir.path()).unwrap();
        let samples = load_dataset(&manifest, 64, &[]).unwrap();
        for s in &samples {
            let gt = s.gt.as_ref().unwrap();
            let red = s.stack.planes().extract_channels(0, 1).unwrap();
            let mut best = 0.0f64;
            for t255 in 0..=255u32 {
                let t = t255 as f64 / 255.0;
                let bin = red.map(|v| if v > t { 1.0 } else { 0.0 }).unwrap();
                best = best.max(f_beta(&bin, gt).unwrap());
            }
            assert!(best >= 0.9, "sample {} best {}", s.id, best);
        }
    }

    #[test]
    fn loading_pads_missing_declared_planes() {
        let spec = quick_spec(19); // generated without any modality
        let dir = TempDir::new().unwrap();
        let manifest = gen_synthetic(&spec, dir.path()).unwrap();
        let samples = load_dataset(&manifest, spec.side, &[Modality::Thermal]).unwrap();
        let s = &samples[0];
        assert_eq!(s.stack.channels(), 4);
        assert!(!s.stack.is_available(Modality::Thermal));
        assert!(s.stack.planes().channel(3).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn loading_at_native_side_is_identity() {
        let spec = quick_spec(23);
        let dir = TempDir::new().unwrap();
        let manifest = gen_synthetic(&spec, dir.path()).unwrap();
        let samples = load_dataset(&manifest, spec.side, &[]).unwrap();
        let raw = read_image(&dir.path().join("00000.ppm")).unwrap();
        assert_eq!(samples[0].stack.rgb().data(), raw.data());
    }

    #[test]
    fn gt_resize_stays_binary() {
        let dir = TempDir::new().unwrap();
        let half = Grid::from_fn(1, 32, 32, |_, _, x| if x < 16 { 1.0 } else { 0.0 }).unwrap();
        let img = Grid::constant(3, 32, 32, 0.3).unwrap();
        write_image(&img, &dir.path().join("s.ppm")).unwrap();
        write_image(&half, &dir.path().join("s_gt.pgm")).unwrap();
        let entries = vec![ManifestEntry {
            id: "s".into(),
            image: "s.ppm".into(),
            gt: Some("s_gt.pgm".into()),
            depth: None,
            thermal: None,
            flow: None,
        }];
        let mpath = dir.path().join("m.tsv");
        write_manifest(&entries, &mpath).unwrap();
        let samples = load_dataset(&mpath, 64, &[]).unwrap();
        let gt = samples[0].gt.as_ref().unwrap();
        assert_eq!(gt.shape(), (1, 64, 64));
        assert!(gt.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // The half split survives upsampling.
        assert_eq!(gt.at(0, 10, 0), 1.0);
        assert_eq!(gt.at(0, 10, 63), 0.0);
    }

    #[test]
    fn loading_missing_file_names_the_sample() {
        let dir = TempDir::new().unwrap();
        let entries = vec![ManifestEntry {
            id: "ghost".into(),
            image: "missing.ppm".into(),
            gt: None,
            depth: None,
            thermal: None,
            flow: None,
        }];
        let mpath = dir.path().join("m.tsv");
        write_manifest(&entries, &mpath).unwrap();
        let err = load_dataset(&mpath, 32, &[]).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec::default().validate().is_ok());
        assert!(SyntheticSpec {
            side: 50,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            noise_amp: 0.5,
            color_offset: 0.4,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            blob_min: 3,
            blob_max: 2,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            count: 0,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
    }
}

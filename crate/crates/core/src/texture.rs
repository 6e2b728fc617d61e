//! Appearance stacks, windowed texture fields, and boundary masks.
//!
//! For every pixel `i` and every offset `j` inside a `k x k` window, the
//! saliency texture holds `|p_i - p_j|` and the appearance texture holds
//! `exp(-alpha * sum_c (x_c(i) - x_c(j))^2)` over all stack channels. The two
//! fields are built by the same window walk, so their entries index-align
//! per pixel; out-of-bounds neighbors are left as zero-filled invalid slots
//! and counted per pixel.

use crate::error::{Error, Result};
use crate::gridcore::{resize_bilinear, Grid};

/// Optional appearance channels beyond RGB, in canonical stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Depth,
    Thermal,
    Flow,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Depth, Modality::Thermal, Modality::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Depth => "depth",
            Modality::Thermal => "thermal",
            Modality::Flow => "flow",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Modality::Depth),
            "thermal" => Ok(Modality::Thermal),
            "flow" => Ok(Modality::Flow),
            other => Err(Error::param("modality", format!("unknown modality \"{other}\""))),
        }
    }
}

/// Canonicalizes a declared modality list: sorted, deduplicated.
pub fn canonical_modalities(declared: &[Modality]) -> Vec<Modality> {
    let mut v = declared.to_vec();
    v.sort();
    v.dedup();
    v
}

/// RGB plus declared extra channels, one channel per extra modality.
///
/// A declared modality is always present as a channel: if the sample has no
/// plane for it, the channel is the constant 0.5 and the availability flag is
/// false. All values lie in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ModalityStack {
    planes: Grid,
    declared: Vec<Modality>,
    available: Vec<bool>,
}

fn check_unit_range(g: &Grid, what: &str) -> Result<()> {
    if let Some(i) = g.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::param(
            what.to_string(),
            format!("value {} at flat index {i} outside [0, 1]", g.data()[i]),
        ));
    }
    Ok(())
}

impl ModalityStack {
    /// Stacks RGB and extra planes in canonical order, padding missing
    /// declared modalities with the constant 0.5. Extra planes for
    /// undeclared modalities are ignored.
    pub fn new(rgb: Grid, declared: &[Modality], extras: &[(Modality, Grid)]) -> Result<Self> {
        if rgb.channels() != 3 {
            return Err(Error::shape("ModalityStack rgb", "3 channels", rgb.shape_str()));
        }
        check_unit_range(&rgb, "ModalityStack rgb")?;
        let declared = canonical_modalities(declared);
        let (h, w) = (rgb.height(), rgb.width());
        let mut data = rgb.data().to_vec();
        let mut available = Vec::with_capacity(declared.len());
        for &m in &declared {
            match extras.iter().find(|(em, _)| *em == m) {
                Some((_, plane)) => {
                    if plane.shape() != (1, h, w) {
                        return Err(Error::shape(
                            format!("ModalityStack {} plane", m.name()),
                            format!("1x{h}x{w}"),
                            plane.shape_str(),
                        ));
                    }
                    check_unit_range(plane, m.name())?;
                    data.extend_from_slice(plane.data());
                    available.push(true);
                }
                None => {
                    data.extend(std::iter::repeat(0.5).take(h * w));
                    available.push(false);
                }
            }
        }
        let planes = Grid::new(3 + declared.len(), h, w, data)?;
        Ok(ModalityStack {
            planes,
            declared,
            available,
        })
    }

    pub fn planes(&self) -> &Grid {
        &self.planes
    }

    pub fn channels(&self) -> usize {
        self.planes.channels()
    }

    pub fn height(&self) -> usize {
        self.planes.height()
    }

    pub fn width(&self) -> usize {
        self.planes.width()
    }

    pub fn declared(&self) -> &[Modality] {
        &self.declared
    }

    /// True when the modality is declared and came from a real plane rather
    /// than constant padding.
    pub fn is_available(&self, m: Modality) -> bool {
        self.declared
            .iter()
            .position(|&d| d == m)
            .map(|i| self.available[i])
            .unwrap_or(false)
    }

    /// The RGB channels as a standalone grid.
    pub fn rgb(&self) -> Grid {
        self.planes.extract_channels(0, 3).expect("stack has rgb")
    }

    /// All planes bilinearly resized; declaration and availability carry over.
    pub fn resized(&self, out_h: usize, out_w: usize) -> Result<ModalityStack> {
        Ok(ModalityStack {
            planes: resize_bilinear(&self.planes, out_h, out_w)?,
            declared: self.declared.clone(),
            available: self.available.clone(),
        })
    }

    /// Horizontal mirror of every plane.
    pub fn flipped(&self) -> ModalityStack {
        ModalityStack {
            planes: self.planes.flip_horizontal(),
            declared: self.declared.clone(),
            available: self.available.clone(),
        }
    }
}

/// Per-pixel `k x k` neighbor entries with explicit validity.
///
/// Slot `(wy, wx)` of pixel `(y, x)` describes neighbor
/// `(y + wy - k/2, x + wx - k/2)`; slots whose neighbor falls outside the
/// grid are invalid and hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureField {
    k: usize,
    height: usize,
    width: usize,
    entries: Vec<f64>,
    valid: Vec<u16>,
}

impl TextureField {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// The `k*k` slot values for one pixel, row-major over the window.
    pub fn entries_at(&self, y: usize, x: usize) -> &[f64] {
        let kk = self.k * self.k;
        let base = (y * self.width + x) * kk;
        &self.entries[base..base + kk]
    }

    /// Number of in-bounds neighbors of the pixel.
    pub fn valid_count(&self, y: usize, x: usize) -> usize {
        self.valid[y * self.width + x] as usize
    }

    pub fn slot_is_valid(&self, y: usize, x: usize, wy: usize, wx: usize) -> bool {
        let r = self.k / 2;
        let ny = y as isize + wy as isize - r as isize;
        let nx = x as isize + wx as isize - r as isize;
        ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width
    }
}

fn check_window(k: usize) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::param("k", format!("window size must be odd and >= 3, got {k}")));
    }
    Ok(())
}

/// Shared window walk: both texture kinds use this one border rule.
fn build_field(
    h: usize,
    w: usize,
    k: usize,
    mut entry: impl FnMut(usize, usize, usize, usize) -> f64,
) -> TextureField {
    let r = k / 2;
    let kk = k * k;
    let mut entries = vec![0.0; h * w * kk];
    let mut valid = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * kk;
            let mut count = 0u16;
            for wy in 0..k {
                let ny = y as isize + wy as isize - r as isize;
                if ny < 0 || ny as usize >= h {
                    continue;
                }
                for wx in 0..k {
                    let nx = x as isize + wx as isize - r as isize;
                    if nx < 0 || nx as usize >= w {
                        continue;
                    }
                    entries[base + wy * k + wx] = entry(y, x, ny as usize, nx as usize);
                    count += 1;
                }
            }
            valid[y * w + x] = count;
        }
    }
    TextureField {
        k,
        height: h,
        width: w,
        entries,
        valid,
    }
}

/// Saliency texture: slot value `|p_i - p_j|` for each in-window neighbor.
pub fn texture_saliency(pred: &Grid, k: usize) -> Result<TextureField> {
    if pred.channels() != 1 {
        return Err(Error::shape("texture_saliency", "single channel", pred.shape_str()));
    }
    check_window(k)?;
    let plane = pred.channel(0);
    let w = pred.width();
    Ok(build_field(pred.height(), w, k, |y, x, ny, nx| {
        (plane[y * w + x] - plane[ny * w + nx]).abs()
    }))
}

/// Appearance texture: slot value `exp(-alpha * d2)` where `d2` sums squared
/// channel differences over every stack channel.
pub fn texture_appearance(stack: &ModalityStack, k: usize, alpha: f64) -> Result<TextureField> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::param("alpha", "must be finite and positive"));
    }
    let (h, w) = (stack.height(), stack.width());
    check_window(k)?;
    let planes = stack.planes();
    let c_n = planes.channels();
    Ok(build_field(h, w, k, |y, x, ny, nx| {
        let mut d2 = 0.0;
        for c in 0..c_n {
            let ch = planes.channel(c);
            let d = ch[y * w + x] - ch[ny * w + nx];
            d2 += d * d;
        }
        (-alpha * d2).exp()
    }))
}

/// Pixels where the over-0.5 binarization changes across any 4-connected
/// in-bounds edge; both sides of a change are marked.
#[derive(Debug, Clone)]
pub struct BoundaryMask {
    grid: Grid,
    count: usize,
}

impl BoundaryMask {
    /// 0/1 indicator plane, `1 x H x W`.
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_boundary(&self, y: usize, x: usize) -> bool {
        self.grid.at(0, y, x) != 0.0
    }
}

pub fn boundary_mask(pred: &Grid) -> Result<BoundaryMask> {
    if pred.channels() != 1 {
        return Err(Error::shape("boundary_mask", "single channel", pred.shape_str()));
    }
    let (h, w) = (pred.height(), pred.width());
    let plane = pred.channel(0);
    let bin: Vec<bool> = plane.iter().map(|&v| v > 0.5).collect();
    let mut data = vec![0.0; h * w];
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            let here = bin[y * w + x];
            let mut differs = false;
            if y > 0 && bin[(y - 1) * w + x] != here {
                differs = true;
            }
            if y + 1 < h && bin[(y + 1) * w + x] != here {
                differs = true;
            }
            if x > 0 && bin[y * w + x - 1] != here {
                differs = true;
            }
            if x + 1 < w && bin[y * w + x + 1] != here {
                differs = true;
            }
            if differs {
                data[y * w + x] = 1.0;
                count += 1;
            }
        }
    }
    Ok(BoundaryMask {
        grid: Grid::new(1, h, w, data)?,
        count,
    })
}

//! Procedural map sheets in the style of old topographic survey maps.
//!
//! Geometry is integer-exact: every mask pixel is decided with integer
//! arithmetic (segment distances in `i128`), and all randomness comes from
//! ChaCha streams or a fixed integer hash. A sheet is therefore the same
//! bytes on every platform.
//!
//! Rivers and lakes share one dense-dot water texture keyed by world
//! coordinates, so a crop from deep inside either is indistinguishable;
//! only the surroundings tell them apart.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spatem_tensor::{Rng, Tensor};

use crate::error::{Error, Result};

pub const CLASSES: [&str; 4] = ["stream", "wetland", "river", "lake"];
pub const STREAM: usize = 0;
pub const WETLAND: usize = 1;
pub const RIVER: usize = 2;
pub const LAKE: usize = 3;

/// Tiles per full sequence: central, 8 spatial neighbours, 4 temporal.
pub const SEQUENCE_LEN: usize = 13;
/// Years on each side of the central edition used as temporal context.
pub const TEMPORAL_SPAN: usize = 2;

pub mod palette {
    pub const PAPER: [u8; 3] = [236, 230, 212];
    pub const WATER: [u8; 3] = [196, 218, 232];
    pub const WATER_DOT: [u8; 3] = [52, 96, 168];
    pub const SHORE: [u8; 3] = [40, 72, 140];
    pub const STREAM: [u8; 3] = [36, 84, 170];
    pub const MARSH: [u8; 3] = [64, 112, 150];
    pub const DUST: [u8; 3] = [70, 64, 60];
    pub const GLARE: [u8; 3] = [252, 250, 244];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub tile_size: usize,
    pub sheet_size: usize,
    /// Editions rendered per world.
    pub years: usize,
    /// Per-pixel probability of a dust or glare speck.
    pub speckle_density: f64,
    /// Probability that a wetland stroke is missing in a given edition.
    pub fade_probability: f64,
    /// Reach of water texture beyond the shoreline, in pixels.
    pub bleed_radius: usize,
    /// Largest shift of the whole sheet in any edition, in pixels. Editions
    /// drift by at most one pixel per axis from year to year.
    pub jitter: usize,
    /// Ambiguous training pairs per sheet sequence (members = 2 per pair).
    pub ambiguous_fraction: f64,
    /// Positives per negative.
    pub positive_ratio: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            sheet_size: 1024,
            years: 5,
            speckle_density: 0.004,
            fade_probability: 0.3,
            bleed_radius: 2,
            jitter: 4,
            ambiguous_fraction: 0.0,
            positive_ratio: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let p = self.tile_size;
        if p < 8 || !p.is_multiple_of(8) {
            return fail(format!("tile size {p} must be a positive multiple of 8"));
        }
        if self.sheet_size < 3 * p {
            return fail(format!("sheet {} smaller than a 3x3 tile neighbourhood", self.sheet_size));
        }
        if self.jitter * 8 >= p {
            return fail(format!("jitter {} must stay below tile/8", self.jitter));
        }
        if self.years < 2 * TEMPORAL_SPAN + 1 {
            return fail(format!("need at least {} years, got {}", 2 * TEMPORAL_SPAN + 1, self.years));
        }
        for (name, v) in [("speckle_density", self.speckle_density), ("fade_probability", self.fade_probability)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        if !(0.0..=4.0).contains(&self.ambiguous_fraction) {
            return fail(format!("ambiguous_fraction {} outside [0, 4]", self.ambiguous_fraction));
        }
        if self.positive_ratio == 0 {
            return fail("positive_ratio must be >= 1".into());
        }
        Ok(())
    }

    /// Negatives among `count` samples at the configured ratio.
    pub fn negatives(&self, count: usize) -> usize {
        let parts = self.positive_ratio + 1;
        (count + parts / 2) / parts
    }
}

// ---------------------------------------------------------------------------
// integer hashing

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash3(seed: u64, a: i64, b: i64) -> u64 {
    mix(mix(seed ^ mix(a as u64)) ^ b as u64)
}

/// Uniform in `[0, 1)` from the top 53 bits.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

// ---------------------------------------------------------------------------
// geometry

type Point = (i64, i64);

/// Polyline of constant width.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub points: Vec<Point>,
    pub width: i64,
}

/// Union of discs `(cx, cy, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub discs: Vec<(i64, i64, i64)>,
}

impl Blob {
    /// Radius of the smallest disc around the first centre holding the blob.
    fn extent(&self) -> i64 {
        let (cx, cy, _) = self.discs[0];
        self.discs.iter().map(|&(x, y, r)| isqrt((x - cx).pow(2) + (y - cy).pow(2)) + 1 + r).max().unwrap_or(0)
    }
}

fn isqrt(v: i64) -> i64 {
    let mut r = (v as f64).sqrt() as i64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Whether `p` is within `sqrt(limit4) / 2` of segment `ab`, i.e.
/// `4 * dist^2 <= limit4`, decided exactly.
fn near_segment(a: Point, b: Point, p: Point, limit4: i128) -> bool {
    let (vx, vy) = ((b.0 - a.0) as i128, (b.1 - a.1) as i128);
    let (ux, uy) = ((p.0 - a.0) as i128, (p.1 - a.1) as i128);
    let len2 = vx * vx + vy * vy;
    let t = ux * vx + uy * vy;
    if len2 == 0 || t <= 0 {
        return 4 * (ux * ux + uy * uy) <= limit4;
    }
    if t >= len2 {
        let (wx, wy) = ((p.0 - b.0) as i128, (p.1 - b.1) as i128);
        return 4 * (wx * wx + wy * wy) <= limit4;
    }
    let cross = ux * vy - uy * vx;
    4 * cross * cross <= limit4 * len2
}

/// Whether `p` is within `d` of the polyline.
fn band_within(band: &Band, p: Point, d: i64) -> bool {
    let limit4 = 4 * (d as i128) * (d as i128);
    band.points.windows(2).any(|s| near_segment(s[0], s[1], p, limit4))
}

/// Geometry of one world, in world pixel coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Geometry {
    pub rivers: Vec<Band>,
    pub lakes: Vec<Blob>,
    pub streams: Vec<Band>,
    pub wetlands: Vec<Blob>,
}

const BIT: [u8; 4] = [1, 2, 4, 8];

struct Raster {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    bits: Vec<u8>,
}

impl Raster {
    fn new(x0: i64, y0: i64, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h, bits: vec![0; w * h] }
    }

    fn clip(&self, lo: Point, hi: Point) -> Option<(usize, usize, usize, usize)> {
        let xa = (lo.0 - self.x0).max(0);
        let ya = (lo.1 - self.y0).max(0);
        let xb = (hi.0 - self.x0 + 1).min(self.w as i64);
        let yb = (hi.1 - self.y0 + 1).min(self.h as i64);
        (xa < xb && ya < yb).then_some((xa as usize, ya as usize, xb as usize, yb as usize))
    }

    fn paint_band(&mut self, band: &Band, bit: u8) {
        // 4 d^2 <= w^2 + 1 keeps one-pixel diagonals connected
        let limit4 = (band.width * band.width + 1) as i128;
        let reach = band.width / 2 + 1;
        for s in band.points.windows(2) {
            let lo = (s[0].0.min(s[1].0) - reach, s[0].1.min(s[1].1) - reach);
            let hi = (s[0].0.max(s[1].0) + reach, s[0].1.max(s[1].1) + reach);
            let Some((xa, ya, xb, yb)) = self.clip(lo, hi) else {
                continue;
            };
            for y in ya..yb {
                for x in xa..xb {
                    let p = (self.x0 + x as i64, self.y0 + y as i64);
                    if near_segment(s[0], s[1], p, limit4) {
                        self.bits[y * self.w + x] |= bit;
                    }
                }
            }
        }
    }

    fn paint_blob(&mut self, blob: &Blob, bit: u8) {
        for &(cx, cy, r) in &blob.discs {
            let Some((xa, ya, xb, yb)) = self.clip((cx - r, cy - r), (cx + r, cy + r)) else {
                continue;
            };
            for y in ya..yb {
                for x in xa..xb {
                    let (dx, dy) = (self.x0 + x as i64 - cx, self.y0 + y as i64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        self.bits[y * self.w + x] |= bit;
                    }
                }
            }
        }
    }

    /// Rivers win over lakes; water wins over streams and wetland.
    fn resolve(&mut self) {
        let water = BIT[RIVER] | BIT[LAKE];
        for b in &mut self.bits {
            if *b & BIT[RIVER] != 0 {
                *b &= !BIT[LAKE];
            }
            if *b & water != 0 {
                *b &= water;
            }
        }
    }
}

impl Geometry {
    fn rasterize(&self, x0: i64, y0: i64, w: usize, h: usize) -> Raster {
        let mut r = Raster::new(x0, y0, w, h);
        for b in &self.wetlands {
            r.paint_blob(b, BIT[WETLAND]);
        }
        for b in &self.streams {
            r.paint_band(b, BIT[STREAM]);
        }
        for b in &self.lakes {
            r.paint_blob(b, BIT[LAKE]);
        }
        for b in &self.rivers {
            r.paint_band(b, BIT[RIVER]);
        }
        r.resolve();
        r
    }

    /// Random world on a `size` sheet with tiles of `p` pixels.
    pub fn generate(rng: &mut Rng, size: usize, p: usize) -> Self {
        let s = size as i64;
        let p = p as i64;
        let mut g = Geometry::default();

        for _ in 0..1 + rng.below(2) {
            let horizontal = rng.bernoulli(0.5);
            let mut across = rng.range_i64(s / 8, 7 * s / 8);
            let mut points = Vec::new();
            for k in 0..=4 {
                let along = if k == 0 {
                    -p
                } else if k == 4 {
                    s + p
                } else {
                    k * s / 4
                };
                if k > 0 {
                    across = (across + rng.range_i64(-s / 10, s / 10)).clamp(s / 16, 15 * s / 16);
                }
                points.push(if horizontal { (along, across) } else { (across, along) });
            }
            let width = rng.range_i64(p / 8, p / 4);
            g.rivers.push(Band { points, width });
        }

        let want = 3 + rng.below(2);
        for _ in 0..200 {
            if g.lakes.len() == want {
                break;
            }
            let satellites = 1 + rng.below(3);
            let blob = random_blob(rng, s, 3 * p / 8, 7 * p / 8, satellites);
            let (cx, cy, _) = blob.discs[0];
            let ext = blob.extent();
            // the whole blob fits inside a 3x3 tile neighbourhood
            if 2 * ext >= 3 * p {
                continue;
            }
            let clear_river = g.rivers.iter().all(|r| !band_within(r, (cx, cy), ext + r.width + 8));
            let clear_lakes = g.lakes.iter().all(|l| {
                let (x, y, _) = l.discs[0];
                let gap = ext + l.extent() + 16;
                (x - cx).pow(2) + (y - cy).pow(2) > gap * gap
            });
            if clear_river && clear_lakes {
                g.lakes.push(blob);
            }
        }

        const DIRS: [Point; 16] = [
            (64, 0),
            (59, 24),
            (45, 45),
            (24, 59),
            (0, 64),
            (-24, 59),
            (-45, 45),
            (-59, 24),
            (-64, 0),
            (-59, -24),
            (-45, -45),
            (-24, -59),
            (0, -64),
            (24, -59),
            (45, -45),
            (59, -24),
        ];
        for _ in 0..4 + rng.below(4) {
            let mut pos = (rng.range_i64(0, s - 1), rng.range_i64(0, s - 1));
            let mut dir = rng.below(16) as i64;
            let mut points = vec![pos];
            for _ in 0..6 + rng.below(5) {
                dir = (dir + rng.range_i64(-1, 1)).rem_euclid(16);
                let len = rng.range_i64(40, 90);
                let (dx, dy) = DIRS[dir as usize];
                pos = (pos.0 + dx * len / 64, pos.1 + dy * len / 64);
                points.push(pos);
            }
            g.streams.push(Band { points, width: 1 + rng.below(2) as i64 });
        }

        for _ in 0..2 + rng.below(2) {
            let satellites = 2 + rng.below(2);
            g.wetlands.push(random_blob(rng, s, p / 4, p / 2, satellites));
        }
        g
    }
}

fn random_blob(rng: &mut Rng, s: i64, rmin: i64, rmax: i64, satellites: usize) -> Blob {
    let margin = 3 * rmax / 2;
    let (cx, cy) = (rng.range_i64(margin, s - margin), rng.range_i64(margin, s - margin));
    let r0 = rng.range_i64(rmin, rmax);
    let mut discs = vec![(cx, cy, r0)];
    for _ in 0..satellites {
        let off = (rng.range_i64(-r0 / 2, r0 / 2), rng.range_i64(-r0 / 2, r0 / 2));
        discs.push((cx + off.0, cy + off.1, rng.range_i64(r0 / 3, 2 * r0 / 3)));
    }
    Blob { discs }
}

// ---------------------------------------------------------------------------
// rendering

/// Edition-dependent rendering effects.
#[derive(Debug, Clone, Copy)]
pub struct Edition {
    /// Seed for speckle, bleed and stroke fade.
    pub noise_seed: u64,
    pub speckle_density: f64,
    pub fade_probability: f64,
    pub bleed_radius: usize,
}

/// One dot per 3x3 cell at a hashed position.
fn water_dot(texture_seed: u64, x: i64, y: i64) -> bool {
    let (cx, cy) = (x.div_euclid(3), y.div_euclid(3));
    let h = hash3(texture_seed, cx, cy);
    x.rem_euclid(3) == (h % 3) as i64 && y.rem_euclid(3) == ((h / 3) % 3) as i64
}

/// Short horizontal marsh strokes; `Some(id)` on a stroke pixel.
fn marsh_stroke(x: i64, y: i64) -> Option<(i64, i64)> {
    if y.rem_euclid(5) != 0 {
        return None;
    }
    let row = y.div_euclid(5);
    let shifted = x + 5 * row.rem_euclid(2);
    (shifted.rem_euclid(10) < 6).then_some((row, shifted.div_euclid(10)))
}

/// Planar RGB and per-class masks of a rendered window.
pub struct Rendered {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
    pub masks: Vec<u8>,
}

/// Renders the world window with top-left world pixel `(x0, y0)`.
pub fn render_window(geom: &Geometry, texture_seed: u64, x0: i64, y0: i64, w: usize, h: usize, ed: &Edition) -> Rendered {
    let m = ed.bleed_radius + 1;
    let big = geom.rasterize(x0 - m as i64, y0 - m as i64, w + 2 * m, h + 2 * m);
    let bw = big.w;
    let water = |bx: usize, by: usize| big.bits[by * bw + bx] & (BIT[RIVER] | BIT[LAKE]) != 0;
    let mut rgb = vec![0u8; 3 * w * h];
    let mut masks = vec![0u8; 4 * w * h];
    let plane = w * h;
    let fade_seed = mix(ed.noise_seed ^ 0xFADE);
    let bleed_seed = mix(ed.noise_seed ^ 0xB1EED);
    let speck_seed = mix(ed.noise_seed ^ 0x5BEC);
    for y in 0..h {
        for x in 0..w {
            let (bx, by) = (x + m, y + m);
            let bits = big.bits[by * bw + bx];
            let (wx, wy) = (x0 + x as i64, y0 + y as i64);
            for (c, &bit) in BIT.iter().enumerate() {
                masks[c * plane + y * w + x] = (bits & bit != 0) as u8;
            }
            let mut color = palette::PAPER;
            if water(bx, by) {
                let shore = !water(bx - 1, by) || !water(bx + 1, by) || !water(bx, by - 1) || !water(bx, by + 1);
                color = if shore {
                    palette::SHORE
                } else if water_dot(texture_seed, wx, wy) {
                    palette::WATER_DOT
                } else {
                    palette::WATER
                };
            } else {
                if bits & BIT[WETLAND] != 0 {
                    if let Some((row, k)) = marsh_stroke(wx, wy) {
                        if unit(hash3(fade_seed, row, k)) >= ed.fade_probability {
                            color = palette::MARSH;
                        }
                    }
                }
                if bits & BIT[STREAM] != 0 {
                    color = palette::STREAM;
                }
                let r = ed.bleed_radius;
                if r > 0 && color == palette::PAPER && water_dot(texture_seed, wx, wy) {
                    let near = (by - r..=by + r).any(|yy| (bx - r..=bx + r).any(|xx| water(xx, yy)));
                    if near && unit(hash3(bleed_seed, wx, wy)) < 0.5 {
                        color = palette::WATER_DOT;
                    }
                }
            }
            let u = unit(hash3(speck_seed, wx, wy));
            if u < ed.speckle_density {
                color = if u < ed.speckle_density / 2.0 { palette::DUST } else { palette::GLARE };
            }
            for c in 0..3 {
                rgb[c * plane + y * w + x] = color[c];
            }
        }
    }
    Rendered { w, h, rgb, masks }
}

// ---------------------------------------------------------------------------
// sheets

/// One rendered edition of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSheet {
    pub world_seed: u64,
    pub year: usize,
    pub size: usize,
    /// World offset of sheet pixel (0, 0) in this edition, `(x, y)`.
    pub shift: (i64, i64),
    /// Planar `[3, size, size]`.
    pub rgb: Vec<u8>,
    /// Planar binary `[4, size, size]` in [`CLASSES`] order.
    pub masks: Vec<u8>,
}

/// World geometry and texture seed for `world_seed`.
pub fn world(world_seed: u64, cfg: &GeneratorConfig) -> (Geometry, u64) {
    let mut rng = Rng::new(world_seed).fork("world");
    let geom = Geometry::generate(&mut rng, cfg.sheet_size, cfg.tile_size);
    (geom, rng.fork("texture").next_seed())
}

/// Sheet shift of every edition up to `year`: a clamped random walk with
/// steps in {-1, 0, 1} per axis.
fn shifts(world_seed: u64, year: usize, jitter: usize) -> Vec<(i64, i64)> {
    let mut rng = Rng::new(world_seed).fork("drift");
    let j = jitter as i64;
    let mut at = (rng.range_i64(-j, j), rng.range_i64(-j, j));
    let mut out = vec![at];
    for _ in 0..year {
        at = ((at.0 + rng.range_i64(-1, 1)).clamp(-j, j), (at.1 + rng.range_i64(-1, 1)).clamp(-j, j));
        out.push(at);
    }
    out
}

fn edition(world_seed: u64, year: usize, cfg: &GeneratorConfig) -> ((i64, i64), Edition) {
    let shift = shifts(world_seed, year, cfg.jitter)[year];
    let mut rng = Rng::new(world_seed).fork(&format!("edition/{year}"));
    let ed = Edition {
        noise_seed: rng.next_seed(),
        speckle_density: cfg.speckle_density,
        fade_probability: cfg.fade_probability,
        bleed_radius: cfg.bleed_radius,
    };
    (shift, ed)
}

pub fn render_sheet(world_seed: u64, year: usize, cfg: &GeneratorConfig) -> MapSheet {
    let (geom, texture) = world(world_seed, cfg);
    render_edition(&geom, texture, world_seed, year, cfg)
}

fn render_edition(geom: &Geometry, texture: u64, world_seed: u64, year: usize, cfg: &GeneratorConfig) -> MapSheet {
    let (shift, ed) = edition(world_seed, year, cfg);
    let s = cfg.sheet_size;
    let r = render_window(geom, texture, shift.0, shift.1, s, s, &ed);
    MapSheet { world_seed, year, size: s, shift, rgb: r.rgb, masks: r.masks }
}

/// Every edition `0..cfg.years` of one world, rendered in parallel.
pub fn render_world(world_seed: u64, cfg: &GeneratorConfig) -> Vec<MapSheet> {
    let (geom, texture) = world(world_seed, cfg);
    (0..cfg.years).into_par_iter().map(|y| render_edition(&geom, texture, world_seed, y, cfg)).collect()
}

/// Mirror index into `0..n` (edge pixel repeated: -1 -> 0, n -> n - 1).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

impl MapSheet {
    /// `[3, p, p]` crop at top-left `(y, x)`, mirrored past the sheet edge.
    pub fn tile(&self, y: i64, x: i64, p: usize) -> Tensor<f32> {
        let s = self.size;
        let plane = s * s;
        Tensor::from_fn(&[3, p, p], |i| {
            let (c, r, col) = (i / (p * p), (i / p) % p, i % p);
            let (sy, sx) = (reflect(y + r as i64, s), reflect(x + col as i64, s));
            self.rgb[c * plane + sy * s + sx] as f32 / 255.0
        })
    }

    /// `[4, p, p]` binary masks of an in-sheet crop.
    pub fn mask_tile(&self, y: usize, x: usize, p: usize) -> Tensor<f32> {
        let s = self.size;
        let plane = s * s;
        Tensor::from_fn(&[4, p, p], |i| {
            let (c, r, col) = (i / (p * p), (i / p) % p, i % p);
            self.masks[c * plane + (y + r) * s + x + col] as f32
        })
    }

    pub fn class_pixels(&self) -> [usize; 4] {
        let plane = self.size * self.size;
        std::array::from_fn(|c| self.masks[c * plane..(c + 1) * plane].iter().map(|&v| v as usize).sum())
    }

    pub fn rgb_tensor(&self) -> Tensor<f32> {
        let s = self.size;
        Tensor::from_fn(&[3, s, s], |i| self.rgb[i] as f32 / 255.0)
    }
}

// ---------------------------------------------------------------------------
// sequences

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMember {
    Lake,
    River,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTag {
    pub id: usize,
    pub member: PairMember,
}

/// Where a sequence came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub world_seed: u64,
    /// Top-left `(y, x)` of the central tile in sheet pixels.
    pub offset: (usize, usize),
    pub year: usize,
    /// Editions of the temporal tiles, chronological.
    pub temporal_years: Vec<usize>,
    pub pair: Option<PairTag>,
}

/// One sample: 13 tiles (central, 8 neighbours in raster order, 4 editions
/// in chronological order) and the central tile's class masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSequence {
    /// `[13, 3, P, P]`, values in `[0, 1]`.
    pub tiles: Tensor<f32>,
    /// `[4, P, P]`, binary.
    pub mask: Tensor<f32>,
    pub provenance: Provenance,
    pub positive: bool,
}

/// Neighbour offsets in 3x3 raster order without the centre.
pub const NEIGHBOURS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

impl ContextSequence {
    pub fn tile_size(&self) -> usize {
        self.tiles.shape()[2]
    }

    pub fn central(&self) -> Tensor<f32> {
        self.tiles.index0(0).expect("sequences hold 13 tiles")
    }

    /// Pixels per class in the central mask.
    pub fn class_pixels(&self) -> [usize; 4] {
        let plane = self.mask.numel() / 4;
        std::array::from_fn(|c| self.mask.data()[c * plane..(c + 1) * plane].iter().filter(|&&v| v > 0.5).count())
    }

    /// The tiles listed by `indices`, stacked `[K, 3, P, P]`.
    pub fn select(&self, indices: &[usize]) -> Tensor<f32> {
        let per = self.tiles.numel() / SEQUENCE_LEN;
        let p = self.tile_size();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.tiles.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(&[indices.len(), 3, p, p], data).expect("sizes follow from the tile count")
    }
}

/// Sequence whose central tile sits at `(y, x)` of `sheets[center]`; the
/// other sheets supply the temporal tiles in order.
pub fn sequence_at(sheets: &[&MapSheet], center: usize, y: usize, x: usize, p: usize, pair: Option<PairTag>) -> ContextSequence {
    let c = sheets[center];
    let mut parts = vec![c.tile(y as i64, x as i64, p)];
    for (dy, dx) in NEIGHBOURS {
        parts.push(c.tile(y as i64 + dy * p as i64, x as i64 + dx * p as i64, p));
    }
    let temporal: Vec<usize> = (0..sheets.len()).filter(|&i| i != center).collect();
    for &i in &temporal {
        parts.push(sheets[i].tile(y as i64, x as i64, p));
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    let tiles = Tensor::stack(&refs).expect("equal tile shapes");
    let mask = c.mask_tile(y, x, p);
    let positive = mask.data().iter().any(|&v| v > 0.5);
    ContextSequence {
        tiles,
        mask,
        provenance: Provenance {
            world_seed: c.world_seed,
            offset: (y, x),
            year: c.year,
            temporal_years: temporal.iter().map(|&i| sheets[i].year).collect(),
            pair,
        },
        positive,
    }
}

/// Runs of `2 * TEMPORAL_SPAN + 1` consecutive editions per world.
fn windows(sheets: &[MapSheet]) -> Vec<Vec<&MapSheet>> {
    let mut by_world: Vec<(u64, Vec<&MapSheet>)> = Vec::new();
    for s in sheets {
        match by_world.iter_mut().find(|(w, _)| *w == s.world_seed) {
            Some((_, v)) => v.push(s),
            None => by_world.push((s.world_seed, vec![s])),
        }
    }
    let span = 2 * TEMPORAL_SPAN + 1;
    let mut out = Vec::new();
    for (_, mut v) in by_world {
        v.sort_by_key(|s| s.year);
        for w in v.windows(span) {
            if w.windows(2).all(|p| p[1].year == p[0].year + 1) {
                out.push(w.to_vec());
            }
        }
    }
    out
}

/// Samples `count` sequences: `count - negatives` positives spread evenly
/// over the four classes, then negatives with empty central masks.
pub fn sample_sequences(sheets: &[MapSheet], count: usize, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<ContextSequence>> {
    let n_neg = cfg.negatives(count);
    let mut out = sample_balanced(sheets, count - n_neg, n_neg, 0, cfg, rng)?;
    rng.shuffle(&mut out);
    Ok(out)
}

/// Exactly `positives` then `negatives` sequences, unshuffled. Positive `i`
/// targets class `(first_class + i) % 4`, falling back to the next class
/// present when no sheet shows it.
pub fn sample_balanced(
    sheets: &[MapSheet],
    positives: usize,
    negatives: usize,
    first_class: usize,
    cfg: &GeneratorConfig,
    rng: &mut Rng,
) -> Result<Vec<ContextSequence>> {
    cfg.validate()?;
    let wins = windows(sheets);
    if wins.is_empty() {
        return Err(Error::Data(format!("need {} consecutive editions of one world", 2 * TEMPORAL_SPAN + 1)));
    }
    let p = cfg.tile_size;
    if wins.iter().any(|w| w[0].size < 3 * p) {
        return Err(Error::Data(format!("sheets too small for {p} px tiles")));
    }
    let mut out = Vec::with_capacity(positives + negatives);
    for i in 0..positives {
        let seq = (0..4)
            .find_map(|k| sample_positive(&wins, (first_class + i + k) % 4, p, rng))
            .ok_or_else(|| Error::Data("no foreground pixels in any sheet".into()))?;
        out.push(seq);
    }
    for _ in 0..negatives {
        out.push(sample_negative(&wins, p, rng)?);
    }
    Ok(out)
}

fn sample_positive(wins: &[Vec<&MapSheet>], class: usize, p: usize, rng: &mut Rng) -> Option<ContextSequence> {
    let start = rng.below(wins.len());
    for k in 0..wins.len() {
        let win = &wins[(start + k) % wins.len()];
        let c = win[TEMPORAL_SPAN];
        let s = c.size;
        let plane = &c.masks[class * s * s..(class + 1) * s * s];
        let total = plane.iter().filter(|&&v| v != 0).count();
        if total == 0 {
            continue;
        }
        let nth = rng.below(total);
        let idx = plane.iter().enumerate().filter(|(_, &v)| v != 0).nth(nth).map(|(i, _)| i)?;
        let (py, px) = (idx / s, idx % s);
        let place = |v: usize, rng: &mut Rng| {
            let u = p / 8 + rng.below(3 * p / 4);
            v.saturating_sub(u).min(s - p)
        };
        let (y, x) = (place(py, rng), place(px, rng));
        return Some(sequence_at(win, TEMPORAL_SPAN, y, x, p, None));
    }
    None
}

fn sample_negative(wins: &[Vec<&MapSheet>], p: usize, rng: &mut Rng) -> Result<ContextSequence> {
    for _ in 0..2000 {
        let win = &wins[rng.below(wins.len())];
        let c = win[TEMPORAL_SPAN];
        let s = c.size;
        let (y, x) = (rng.below(s - p + 1), rng.below(s - p + 1));
        let empty = (0..4).all(|k| (0..p).all(|r| c.masks[k * s * s + (y + r) * s + x..][..p].iter().all(|&v| v == 0)));
        if empty {
            return Ok(sequence_at(win, TEMPORAL_SPAN, y, x, p, None));
        }
    }
    Err(Error::Data("could not find an empty tile".into()))
}

// ---------------------------------------------------------------------------
// ambiguous pairs

/// Lake and river scenes sharing a byte-identical central tile.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguousPair {
    pub lake: ContextSequence,
    pub river: ContextSequence,
}

fn scene_editions(seed: u64, cfg: &GeneratorConfig) -> Vec<((i64, i64), Edition)> {
    let years = 2 * TEMPORAL_SPAN + 1;
    let eds: Vec<_> = (0..years).map(|y| edition(seed, y, cfg)).collect();
    // shifts relative to the central edition so both scenes share one frame
    let c = eds[TEMPORAL_SPAN].0;
    eds.into_iter().map(|((x, y), ed)| ((x - c.0, y - c.1), ed)).collect()
}

fn scene_sequence(geom: &Geometry, texture: u64, seed: u64, cfg: &GeneratorConfig, tag: PairTag) -> (ContextSequence, Vec<u8>) {
    let p = cfg.tile_size;
    let side = 3 * p;
    let sheets: Vec<MapSheet> = scene_editions(seed, cfg)
        .into_iter()
        .enumerate()
        .map(|(year, (shift, ed))| {
            let r = render_window(geom, texture, shift.0, shift.1, side, side, &ed);
            MapSheet { world_seed: seed, year, size: side, shift, rgb: r.rgb, masks: r.masks }
        })
        .collect();
    let refs: Vec<&MapSheet> = sheets.iter().collect();
    let seq = sequence_at(&refs, TEMPORAL_SPAN, p, p, p, Some(tag));
    let center = &sheets[TEMPORAL_SPAN];
    let water: Vec<u8> = (0..side * side).map(|i| center.masks[RIVER * side * side + i] | center.masks[LAKE * side * side + i]).collect();
    (seq, water)
}

/// Tiles of the 3x3 scene grid that are entirely water.
fn full_water_tiles(water: &[u8], p: usize) -> Vec<bool> {
    let side = 3 * p;
    (0..9)
        .map(|t| {
            let (ty, tx) = (t / 3, t % 3);
            (0..p).all(|r| water[(ty * p + r) * side + tx * p..][..p].iter().all(|&v| v != 0))
        })
        .collect()
}

/// One lake/river pair; `None` when the draw misses the layout constraints.
fn try_pair(id: usize, seed: u64, cfg: &GeneratorConfig) -> Option<AmbiguousPair> {
    let p = cfg.tile_size as i64;
    let mut rng = Rng::new(seed).fork("pair");
    let texture = rng.next_seed();
    let c = 3 * p / 2;

    // lake: disc around the centre, larger than the central tile but never
    // filling a neighbour
    let r = rng.range_i64(17 * p / 20, 5 * p / 4);
    let wiggle = p / 12;
    let (ox, oy) = (rng.range_i64(-wiggle, wiggle), rng.range_i64(-wiggle, wiggle));
    let mut discs = vec![(c + ox, c + oy, r)];
    for _ in 0..rng.below(3) {
        let (sx, sy) = (rng.range_i64(-r / 2, r / 2), rng.range_i64(-r / 2, r / 2));
        discs.push((c + ox + sx, c + oy + sy, rng.range_i64(r / 3, 3 * r / 5)));
    }
    let lake = Geometry { lakes: vec![Blob { discs }], ..Geometry::default() };

    // river: straight band through the centre, wide enough to cover the
    // central tile and the two neighbours along its course
    let dirs: [Point; 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];
    let (dx, dy) = dirs[rng.below(4)];
    let diagonal = dx != 0 && dy != 0;
    let width = if diagonal { rng.range_i64(8 * p / 5, 19 * p / 10) } else { rng.range_i64(6 * p / 5, 3 * p / 2) };
    let shift = rng.range_i64(-p / 20, p / 20);
    let (nx, ny) = (-dy * shift, dx * shift);
    let far = 4 * p;
    let river = Geometry {
        rivers: vec![Band { points: vec![(c + nx - dx * far, c + ny - dy * far), (c + nx + dx * far, c + ny + dy * far)], width }],
        ..Geometry::default()
    };

    let lake_tag = PairTag { id, member: PairMember::Lake };
    let river_tag = PairTag { id, member: PairMember::River };
    let (lake_seq, lake_water) = scene_sequence(&lake, texture, seed, cfg, lake_tag);
    let (river_seq, river_water) = scene_sequence(&river, texture, seed, cfg, river_tag);

    let p = p as usize;
    let lake_full = full_water_tiles(&lake_water, p);
    let river_full = full_water_tiles(&river_water, p);
    let lake_ok = lake_full[4] && lake_full.iter().filter(|&&f| f).count() == 1;
    let along = [(3, 5), (1, 7), (0, 8), (2, 6)][dirs.iter().position(|&d| d == (dx, dy)).expect("drawn from dirs")];
    let river_ok = river_full[4] && river_full[along.0] && river_full[along.1];
    let identical = lake_seq.central().data().iter().map(|v| v.to_bits()).eq(river_seq.central().data().iter().map(|v| v.to_bits()));
    let labelled = lake_seq.class_pixels() == [0, 0, 0, p * p] && river_seq.class_pixels() == [0, 0, p * p, 0];
    (lake_ok && river_ok && identical && labelled).then_some(AmbiguousPair { lake: lake_seq, river: river_seq })
}

/// `count` pairs whose central tiles are byte-identical water interiors;
/// only the neighbours show a closed shore (lake) or a continuing band
/// (river). Every emitted pair has been checked.
pub fn make_ambiguous_pairs(count: usize, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<AmbiguousPair>> {
    ambiguous_pairs_from(0, count, cfg, rng)
}

/// As [`make_ambiguous_pairs`] with pair ids starting at `first_id`.
pub fn ambiguous_pairs_from(first_id: usize, count: usize, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<AmbiguousPair>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(count);
    let mut misses = 0;
    while out.len() < count {
        let seed = rng.next_seed();
        match try_pair(first_id + out.len(), seed, cfg) {
            Some(pair) => out.push(pair),
            None => {
                misses += 1;
                if misses > 50 * (count + 1) {
                    return Err(Error::Data("ambiguous pair constraints keep failing".into()));
                }
            }
        }
    }
    Ok(out)
}

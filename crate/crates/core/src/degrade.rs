//! Seeded synthetic degradations and procedural clean images.
//!
//! * haze: `I = J·t + A·(1 − t)`
//! * rain: `I = clamp(O + S, 0, 1)` with an anti-aliased streak layer `S ≥ 0`
//! * low light: `I = L·R` with illumination `L ∈ (0, 1)`
//!
//! Every generator is a pure function of its input, parameters and seed.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DegradeError;
use crate::tensor::{Real, Tensor4};

fn invalid(what: &'static str, detail: impl Into<String>) -> DegradeError {
    DegradeError::InvalidParam {
        what,
        detail: detail.into(),
    }
}

fn check_unit<T: Real>(x: &Tensor4<T>, what: &'static str) -> Result<(), DegradeError> {
    let ok = x.data().iter().all(|v| (0.0..=1.0).contains(&v.as_f64()));
    if ok {
        Ok(())
    } else {
        Err(DegradeError::OutOfRange(what))
    }
}

/// Atmospheric light.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Airlight {
    Scalar(f64),
    PerChannel([f64; 3]),
}

impl Airlight {
    fn channel(&self, c: usize) -> f64 {
        match self {
            Airlight::Scalar(a) => *a,
            Airlight::PerChannel(v) => v[c % 3],
        }
    }
}

/// Transmission map `t(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transmission {
    Constant(f64),
    /// Linear in the row index from `top` to `bottom`.
    Ramp {
        top: f64,
        bottom: f64,
    },
    /// `exp(−β·d)` with depth falling linearly from `far` (top row) to `near`.
    Depth {
        beta: f64,
        near: f64,
        far: f64,
    },
}

impl Transmission {
    fn at_row(&self, y: usize, h: usize) -> f64 {
        let s = if h > 1 {
            y as f64 / (h - 1) as f64
        } else {
            0.0
        };
        match *self {
            Transmission::Constant(t) => t,
            Transmission::Ramp { top, bottom } => top + (bottom - top) * s,
            Transmission::Depth { beta, near, far } => (-beta * (far + (near - far) * s)).exp(),
        }
    }

    /// Per-row transmission; rejects any value outside `(0, 1]`.
    pub fn rows(&self, h: usize) -> Result<Vec<f64>, DegradeError> {
        let rows: Vec<f64> = (0..h).map(|y| self.at_row(y, h)).collect();
        match rows.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            Some(t) => Err(invalid("transmission", format!("{t} is outside (0, 1]"))),
            None => Ok(rows),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    pub airlight: Airlight,
    pub transmission: Transmission,
}

impl Default for HazeParams {
    fn default() -> Self {
        Self {
            airlight: Airlight::Scalar(0.95),
            transmission: Transmission::Ramp {
                top: 0.4,
                bottom: 0.9,
            },
        }
    }
}

pub fn make_haze<T: Real>(j: &Tensor4<T>, p: &HazeParams) -> Result<Tensor4<T>, DegradeError> {
    check_unit(j, "haze input")?;
    let [_, c, h, _] = j.shape();
    for ch in 0..c {
        let a = p.airlight.channel(ch);
        if !(0.0..=1.0).contains(&a) {
            return Err(invalid("airlight", format!("{a} is outside [0, 1]")));
        }
    }
    let t = p.transmission.rows(h)?;
    Ok(Tensor4::from_fn(j.shape(), |n, ch, y, x| {
        let tv = T::lit(t[y]);
        let a = T::lit(p.airlight.channel(ch));
        j.get(n, ch, y, x) * tv + a * (T::one() - tv)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainParams {
    pub count: usize,
    /// Degrees from vertical, positive leaning right.
    pub angle: f64,
    pub length: f64,
    pub width: f64,
    pub intensity: f64,
    /// Fade linearly from the streak head to its tail.
    pub fade: bool,
    pub seed: u64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            count: 24,
            angle: 10.0,
            length: 10.0,
            width: 1.0,
            intensity: 0.5,
            fade: false,
            seed: 0,
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + u * dx, a.1 + u * dy);
    (((px - qx).powi(2) + (py - qy).powi(2)).sqrt(), u)
}

/// Renders the streak layer for one `h × w` plane.
fn streak_layer(h: usize, w: usize, p: &RainParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut s = vec![0.0; h * w];
    let theta = p.angle * PI / 180.0;
    let dir = (theta.sin(), theta.cos());
    let half = p.length / 2.0;
    let reach = p.width / 2.0 + 0.5;
    for _ in 0..p.count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let a = (cx - dir.0 * half, cy - dir.1 * half);
        let b = (cx + dir.0 * half, cy + dir.1 * half);
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + reach).ceil().max(0.0) as usize).min(w);
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + reach).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (d, u) = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
                let coverage = (reach - d).clamp(0.0, 1.0);
                let fade = if p.fade { u } else { 1.0 };
                let v = p.intensity * coverage * fade;
                let cell = &mut s[y * w + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    s
}

/// Returns `(I_r, S)`; streaks are achromatic, so `S` repeats across channels.
pub fn make_rain<T: Real>(
    o: &Tensor4<T>,
    p: &RainParams,
) -> Result<(Tensor4<T>, Tensor4<T>), DegradeError> {
    check_unit(o, "rain input")?;
    if p.count > 0 {
        for (what, v) in [("streak length", p.length), ("streak width", p.width)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(what, format!("{v} must be positive")));
            }
        }
        if !(p.intensity > 0.0 && p.intensity <= 1.0) {
            return Err(invalid(
                "streak intensity",
                format!("{} is outside (0, 1]", p.intensity),
            ));
        }
        if !p.angle.is_finite() {
            return Err(invalid("streak angle", "must be finite"));
        }
    }
    let [n, c, h, w] = o.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut s = Tensor4::zeros(o.shape());
    for b in 0..n {
        let layer = streak_layer(h, w, p, &mut rng);
        for ch in 0..c {
            for (dst, &v) in s.plane_mut(b, ch).iter_mut().zip(&layer) {
                *dst = T::lit(v);
            }
        }
    }
    let out = o
        .zip_map(&s, |a, b| (a + b).min(T::one()).max(T::zero()))
        .expect("same shape");
    Ok((out, s))
}

/// Illumination field `L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Illumination {
    Constant(f64),
    /// Bilinearly interpolated random 4×4 control grid rescaled into `[min, max]`.
    Smooth {
        min: f64,
        max: f64,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowLightParams {
    pub illumination: Illumination,
}

impl Default for LowLightParams {
    fn default() -> Self {
        Self {
            illumination: Illumination::Smooth {
                min: 0.15,
                max: 0.35,
                seed: 0,
            },
        }
    }
}

const GRID: usize = 4;

fn smooth_field(h: usize, w: usize, min: f64, max: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<f64> = (0..GRID * GRID).map(|_| rng.random::<f64>()).collect();
    let sample = |y: usize, x: usize| {
        let gy = if h > 1 {
            y as f64 / (h - 1) as f64
        } else {
            0.0
        } * (GRID - 1) as f64;
        let gx = if w > 1 {
            x as f64 / (w - 1) as f64
        } else {
            0.0
        } * (GRID - 1) as f64;
        let (iy, ix) = ((gy as usize).min(GRID - 2), (gx as usize).min(GRID - 2));
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let g = |a: usize, b: usize| grid[a * GRID + b];
        (1.0 - fy) * ((1.0 - fx) * g(iy, ix) + fx * g(iy, ix + 1))
            + fy * ((1.0 - fx) * g(iy + 1, ix) + fx * g(iy + 1, ix + 1))
    };
    let raw: Vec<f64> = (0..h * w).map(|i| sample(i / w, i % w)).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    raw.iter()
        .map(|v| {
            if span > 0.0 {
                min + (max - min) * (v - lo) / span
            } else {
                (min + max) / 2.0
            }
        })
        .collect()
}

/// Illumination map for an `h × w` plane.
pub fn illumination_map(p: &LowLightParams, h: usize, w: usize) -> Result<Vec<f64>, DegradeError> {
    let open = |v: f64| v > 0.0 && v < 1.0;
    match p.illumination {
        Illumination::Constant(l) if open(l) => Ok(vec![l; h * w]),
        Illumination::Constant(l) => Err(invalid("illumination", format!("{l} is outside (0, 1)"))),
        Illumination::Smooth { min, max, seed } if open(min) && open(max) && min <= max => {
            Ok(smooth_field(h, w, min, max, seed))
        }
        Illumination::Smooth { min, max, .. } => Err(invalid(
            "illumination range",
            format!("[{min}, {max}] must be an ordered range inside (0, 1)"),
        )),
    }
}

pub fn make_lowlight<T: Real>(
    r: &Tensor4<T>,
    p: &LowLightParams,
) -> Result<Tensor4<T>, DegradeError> {
    check_unit(r, "low-light input")?;
    let [_, _, h, w] = r.shape();
    let l = illumination_map(p, h, w)?;
    Ok(Tensor4::from_fn(r.shape(), |n, c, y, x| {
        r.get(n, c, y, x) * T::lit(l[y * w + x])
    }))
}

/// Scene type of a generated pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scene {
    Haze,
    Rain,
    LowLight,
    /// Draws one of the other three uniformly per item.
    Mixed,
}

impl Scene {
    pub const CONCRETE: [Scene; 3] = [Scene::Haze, Scene::Rain, Scene::LowLight];

    pub fn name(self) -> &'static str {
        match self {
            Scene::Haze => "haze",
            Scene::Rain => "rain",
            Scene::LowLight => "lowlight",
            Scene::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scene {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Scene::Haze, Scene::Rain, Scene::LowLight, Scene::Mixed]
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scene `{s}` (haze|rain|lowlight|mixed)"))
    }
}

/// Parameters actually used for one generated pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Haze(HazeParams),
    Rain(RainParams),
    LowLight(LowLightParams),
}

impl Degradation {
    pub fn scene(&self) -> Scene {
        match self {
            Degradation::Haze(_) => Scene::Haze,
            Degradation::Rain(_) => Scene::Rain,
            Degradation::LowLight(_) => Scene::LowLight,
        }
    }

    pub fn apply<T: Real>(&self, clean: &Tensor4<T>) -> Result<Tensor4<T>, DegradeError> {
        match self {
            Degradation::Haze(p) => make_haze(clean, p),
            Degradation::Rain(p) => make_rain(clean, p).map(|(i, _)| i),
            Degradation::LowLight(p) => make_lowlight(clean, p),
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::Haze(p) => {
                write!(f, "scene=haze")?;
                match p.airlight {
                    Airlight::Scalar(a) => write!(f, " A={a:.6}")?,
                    Airlight::PerChannel([r, g, b]) => write!(f, " A={r:.6},{g:.6},{b:.6}")?,
                }
                match p.transmission {
                    Transmission::Constant(t) => write!(f, " t={t:.6}"),
                    Transmission::Ramp { top, bottom } => {
                        write!(f, " t_top={top:.6} t_bottom={bottom:.6}")
                    }
                    Transmission::Depth { beta, near, far } => {
                        write!(f, " beta={beta:.6} depth_near={near:.6} depth_far={far:.6}")
                    }
                }
            }
            Degradation::Rain(p) => write!(
                f,
                "scene=rain streaks={} angle={:.6} length={:.6} width={:.6} intensity={:.6} fade={} seed={}",
                p.count, p.angle, p.length, p.width, p.intensity, p.fade, p.seed
            ),
            Degradation::LowLight(p) => match p.illumination {
                Illumination::Constant(l) => write!(f, "scene=lowlight L={l:.6}"),
                Illumination::Smooth { min, max, seed } => {
                    write!(f, "scene=lowlight L_min={min:.6} L_max={max:.6} seed={seed}")
                }
            },
        }
    }
}

/// Draws randomized parameters around each scene's defaults.
pub fn sample_degradation<R: Rng>(scene: Scene, h: usize, w: usize, rng: &mut R) -> Degradation {
    let scene = match scene {
        Scene::Mixed => Scene::CONCRETE[rng.random_range(0..3)],
        s => s,
    };
    match scene {
        Scene::Haze => Degradation::Haze(HazeParams {
            airlight: Airlight::Scalar(rng.random_range(0.85..=1.0)),
            transmission: Transmission::Ramp {
                top: rng.random_range(0.3..=0.5),
                bottom: rng.random_range(0.8..=0.95),
            },
        }),
        Scene::Rain => {
            let area = (h * w) as f64;
            Degradation::Rain(RainParams {
                count: ((area / 40.0) * rng.random_range(0.6..=1.4))
                    .round()
                    .max(1.0) as usize,
                angle: rng.random_range(5.0..=15.0),
                length: h.min(w) as f64 * rng.random_range(0.2..=0.4),
                width: rng.random_range(0.8..=1.5),
                intensity: rng.random_range(0.3..=0.6),
                fade: false,
                seed: rng.random(),
            })
        }
        Scene::LowLight | Scene::Mixed => {
            let min = rng.random_range(0.12..=0.2);
            Degradation::LowLight(LowLightParams {
                illumination: Illumination::Smooth {
                    min,
                    max: min + rng.random_range(0.1..=0.2),
                    seed: rng.random(),
                },
            })
        }
    }
}

/// One generated training or evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub degraded: Tensor4<T>,
    pub clean: Tensor4<T>,
    /// Generating parameters; `None` for pairs loaded from disk.
    pub degradation: Option<Degradation>,
}

/// Per-item generator: independent ChaCha stream `index` of the dataset seed.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Degrades every clean image; the `i`-th item depends only on `(seed, i)`.
pub fn gen_dataset<T: Real>(
    clean: &[Tensor4<T>],
    scene: Scene,
    seed: u64,
) -> Result<Vec<Pair<T>>, DegradeError> {
    if clean.is_empty() {
        return Err(DegradeError::EmptyInput);
    }
    clean
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = item_rng(seed, i);
            let d = sample_degradation(scene, img.h(), img.w(), &mut rng);
            let degraded = d.apply(img)?;
            log::debug!("item={i} {d}");
            Ok(Pair {
                degraded,
                clean: img.clone(),
                degradation: Some(d),
            })
        })
        .collect()
}

/// Line-oriented parameter log, one `item=<i> scene=… key=value…` row per pair.
pub fn parameter_log<T>(pairs: &[Pair<T>]) -> String {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| match &p.degradation {
            Some(d) => format!("item={i} {d}\n"),
            None => format!("item={i} scene=unknown\n"),
        })
        .collect()
}

/// A `(1, 3, h, w)` clean image: a two-colour gradient with rectangles,
/// disks and a faint sinusoidal texture.
pub fn procedural_image(h: usize, w: usize, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || {
        [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ]
    };
    let (c0, c1) = (color(), color());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let angle = rng.random_range(0.0..2.0 * PI);
    let (gx, gy) = (angle.cos(), angle.sin());
    let (hf, wf) = (h as f64, w as f64);

    struct Shape {
        rect: bool,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..rng.random_range(2..=4))
        .map(|_| Shape {
            rect: rng.random_bool(0.5),
            cx: rng.random_range(0.0..wf),
            cy: rng.random_range(0.0..hf),
            rx: rng.random_range(0.1..0.3) * wf,
            ry: rng.random_range(0.1..0.3) * hf,
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let freq = rng.random_range(1.0..4.0) * 2.0 * PI / wf.max(hf);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.02..0.08);

    Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let s = (((xf / wf - 0.5) * gx + (yf / hf - 0.5) * gy) + 0.75) / 1.5;
        let mut v = c0[c] * (1.0 - s) + c1[c] * s;
        for sh in &shapes {
            let (dx, dy) = ((xf - sh.cx) / sh.rx, (yf - sh.cy) / sh.ry);
            let inside = if sh.rect {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            } else {
                dx * dx + dy * dy <= 1.0
            };
            if inside {
                v = sh.color[c];
            }
        }
        v += amp * (freq * (xf * gy - yf * gx) + phase).sin();
        v.clamp(0.0, 1.0)
    })
}

/// `count` procedural images; image `i` uses the derived seed of stream `i`.
pub fn procedural_set(count: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor4<f64>> {
    (0..count)
        .map(|i| procedural_image(h, w, item_rng(seed, i).random()))
        .collect()
}

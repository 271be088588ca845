//! Shoebox room impulse responses by the image method, with room/placement
//! sampling and reverberation-time estimators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_from_seed;

fn default_speed_of_sound() -> f64 {
    340.0
}

/// Rectangular room. Wall order for reflectivities and areas:
/// x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoomSpec {
    pub dims: (f64, f64, f64),
    pub wall_reflectivity: [f64; 6],
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
    pub sample_rate: u32,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lx, ly, lz) = self.dims;
        if !(lx > 0.0 && ly > 0.0 && lz > 0.0) {
            return Err(Error::Config(format!("room dims {:?} must be positive", self.dims)));
        }
        if self
            .wall_reflectivity
            .iter()
            .any(|&b| !(0.0..1.0).contains(&b))
        {
            return Err(Error::Config(format!(
                "wall reflectivity {:?} outside [0,1)",
                self.wall_reflectivity
            )));
        }
        if self.speed_of_sound <= 0.0 || self.sample_rate == 0 {
            return Err(Error::Config("speed of sound and sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    fn contains(&self, p: &PointSource) -> bool {
        let (x, y, z) = p.position;
        let (lx, ly, lz) = self.dims;
        0.0 < x && x < lx && 0.0 < y && y < ly && 0.0 < z && z < lz
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PointSource {
    pub position: (f64, f64, f64),
}

impl PointSource {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        PointSource { position: (x, y, z) }
    }

    pub fn distance_to(&self, other: &PointSource) -> f64 {
        let (ax, ay, az) = self.position;
        let (bx, by, bz) = other.position;
        ((ax - bx).powi(2) + (ay - by).powi(2) + (az - bz).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

impl Rir {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric("non-finite RIR tap".into()));
        }
        if taps.iter().all(|&t| t == 0.0) {
            return Err(Error::Empty("RIR has no non-zero taps".into()));
        }
        Ok(Rir { taps, sample_rate })
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }
}

/// Knobs the five-argument `generate_rir` leaves at defaults.
#[derive(Debug, Clone, Copy)]
pub struct RirOptions {
    /// Skip image sources whose amplitude falls this many dB (amplitude
    /// convention) below the direct path; None disables the early stop.
    pub early_stop_db: Option<f64>,
    /// Fractional delays use a (2·half_width + 1)-tap Hann-windowed sinc.
    pub sinc_half_width: usize,
}

impl Default for RirOptions {
    fn default() -> Self {
        RirOptions {
            early_stop_db: Some(-60.0),
            sinc_half_width: 40,
        }
    }
}

pub fn generate_rir(
    room: &RoomSpec,
    src: &PointSource,
    mic: &PointSource,
    max_order: usize,
    length_s: f64,
) -> Result<Rir> {
    generate_rir_with(room, src, mic, max_order, length_s, &RirOptions::default())
}

/// Allen-Berkley image method. Image (q,j,k,mx,my,mz) sits at
/// ((1-2q)sx + 2mx Lx, ...) and reflects |2mx-q| + |2my-j| + |2mz-k| times;
/// amplitude is the product of per-hit reflectivities over 4πd, placed at
/// delay d/c·fs with a windowed-sinc kernel.
pub fn generate_rir_with(
    room: &RoomSpec,
    src: &PointSource,
    mic: &PointSource,
    max_order: usize,
    length_s: f64,
    opts: &RirOptions,
) -> Result<Rir> {
    room.validate()?;
    if !room.contains(src) {
        return Err(Error::Config(format!("source {:?} outside room", src.position)));
    }
    if !room.contains(mic) {
        return Err(Error::Config(format!("microphone {:?} outside room", mic.position)));
    }
    let d_direct = src.distance_to(mic);
    if d_direct == 0.0 {
        return Err(Error::Config("source and microphone coincide".into()));
    }
    if length_s <= 0.0 {
        return Err(Error::Config(format!("RIR length {length_s} must be positive")));
    }
    let fs = room.sample_rate as f64;
    let n_taps = (length_s * fs).round() as usize;
    let c = room.speed_of_sound;
    let direct_amp = 1.0 / (4.0 * std::f64::consts::PI * d_direct);
    let amp_cutoff = opts
        .early_stop_db
        .map(|db| direct_amp * 10f64.powf(db / 20.0))
        .unwrap_or(0.0);
    let w = opts.sinc_half_width as isize;

    let (lx, ly, lz) = room.dims;
    let (sx, sy, sz) = src.position;
    let (rx, ry, rz) = mic.position;
    let beta = &room.wall_reflectivity;
    let order = max_order as i64;
    let m_hi = (order + 1) / 2;

    let mut taps = vec![0.0; n_taps];
    let mut placed_any = false;
    for q in 0..2i64 {
        for mx in -m_hi..=m_hi {
            let hx = (2 * mx - q).unsigned_abs();
            if hx as i64 > order {
                continue;
            }
            let img_x = (1 - 2 * q) as f64 * sx + 2.0 * mx as f64 * lx;
            let bx = beta[0].powi((mx - q).unsigned_abs() as i32) * beta[1].powi(mx.unsigned_abs() as i32);
            for j in 0..2i64 {
                for my in -m_hi..=m_hi {
                    let hy = (2 * my - j).unsigned_abs();
                    if (hx + hy) as i64 > order {
                        continue;
                    }
                    let img_y = (1 - 2 * j) as f64 * sy + 2.0 * my as f64 * ly;
                    let by = beta[2].powi((my - j).unsigned_abs() as i32)
                        * beta[3].powi(my.unsigned_abs() as i32);
                    for k in 0..2i64 {
                        for mz in -m_hi..=m_hi {
                            let hz = (2 * mz - k).unsigned_abs();
                            if (hx + hy + hz) as i64 > order {
                                continue;
                            }
                            let img_z = (1 - 2 * k) as f64 * sz + 2.0 * mz as f64 * lz;
                            let bz = beta[4].powi((mz - k).unsigned_abs() as i32)
                                * beta[5].powi(mz.unsigned_abs() as i32);
                            let d = ((img_x - rx).powi(2)
                                + (img_y - ry).powi(2)
                                + (img_z - rz).powi(2))
                            .sqrt();
                            if d == 0.0 {
                                continue;
                            }
                            let amp = bx * by * bz / (4.0 * std::f64::consts::PI * d);
                            if amp < amp_cutoff {
                                continue;
                            }
                            let center = d / c * fs;
                            let idx0 = center.round() as isize;
                            if idx0 - w >= n_taps as isize {
                                continue;
                            }
                            for o in -w..=w {
                                let n = idx0 + o;
                                if n < 0 || n >= n_taps as isize {
                                    continue;
                                }
                                let x = n as f64 - center;
                                if x.abs() > w as f64 {
                                    continue;
                                }
                                let window = 0.5
                                    * (1.0
                                        + (std::f64::consts::PI * x / (w as f64 + 1.0)).cos());
                                let sinc = if x == 0.0 {
                                    1.0
                                } else {
                                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                                };
                                taps[n as usize] += amp * sinc * window;
                                placed_any = true;
                            }
                        }
                    }
                }
            }
        }
    }
    if !placed_any {
        return Err(Error::Shape(format!(
            "RIR of {length_s} s is shorter than the direct-path delay"
        )));
    }
    Rir::new(taps, room.sample_rate)
}

/// One (source, microphone) pair inside a sampled room.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub src: PointSource,
    pub mic: PointSource,
}

pub const WALL_CLEARANCE_M: f64 = 0.3;
pub const MIN_SRC_MIC_DISTANCE_M: f64 = 0.5;

/// Room dims Lx,Ly in [3,10], Lz in [2.5,4]; per-wall reflectivity in
/// [0.2,0.95]; placements respect wall clearance and a minimum source-mic
/// distance. Deterministic under the seed.
pub fn sample_room_setup(
    seed: u64,
    n_positions: usize,
    sample_rate: u32,
) -> (RoomSpec, Vec<Placement>) {
    let mut rng = rng_from_seed(seed);
    let dims = (
        rng.random_range(3.0..10.0),
        rng.random_range(3.0..10.0),
        rng.random_range(2.5..4.0),
    );
    let mut beta = [0.0; 6];
    for b in beta.iter_mut() {
        *b = rng.random_range(0.2..0.95);
    }
    let room = RoomSpec {
        dims,
        wall_reflectivity: beta,
        speed_of_sound: default_speed_of_sound(),
        sample_rate,
    };
    let draw_point = |rng: &mut rand_chacha::ChaCha8Rng| {
        PointSource::new(
            rng.random_range(WALL_CLEARANCE_M..dims.0 - WALL_CLEARANCE_M),
            rng.random_range(WALL_CLEARANCE_M..dims.1 - WALL_CLEARANCE_M),
            rng.random_range(WALL_CLEARANCE_M..dims.2 - WALL_CLEARANCE_M),
        )
    };
    let mut placements = Vec::with_capacity(n_positions);
    while placements.len() < n_positions {
        let src = draw_point(&mut rng);
        let mic = draw_point(&mut rng);
        if src.distance_to(&mic) >= MIN_SRC_MIC_DISTANCE_M {
            placements.push(Placement { src, mic });
        }
    }
    (room, placements)
}

/// Sabine estimate T60 = 0.161·V / Σ S_i(1-β_i²).
pub fn sabine_t60(room: &RoomSpec) -> f64 {
    let (lx, ly, lz) = room.dims;
    let areas = [ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly];
    let absorption: f64 = areas
        .iter()
        .zip(&room.wall_reflectivity)
        .map(|(s, b)| s * (1.0 - b * b))
        .sum();
    0.161 * room.volume() / absorption
}

/// T60 from Schroeder backward integration with a linear fit over the
/// [-35, -5] dB stretch of the energy decay curve. None when the RIR does
/// not decay far enough to fit.
pub fn schroeder_t60(rir: &Rir) -> Option<f64> {
    let n = rir.taps.len();
    if n < 2 {
        return None;
    }
    let mut edc = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        acc += rir.taps[i] * rir.taps[i];
        edc[i] = acc;
    }
    let total = edc[0];
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc
        .iter()
        .map(|&e| 10.0 * (e / total).max(1e-30).log10())
        .collect();
    let start = db.iter().position(|&d| d <= -5.0)?;
    let end = db.iter().position(|&d| d <= -35.0)?;
    if end <= start + 1 {
        return None;
    }
    let fs = rir.sample_rate as f64;
    let m = (end - start) as f64;
    let mut st = 0.0;
    let mut sy = 0.0;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for i in start..end {
        let t = i as f64 / fs;
        st += t;
        sy += db[i];
        stt += t * t;
        sty += t * db[i];
    }
    let denom = m * stt - st * st;
    if denom.abs() < 1e-30 {
        return None;
    }
    let slope = (m * sty - st * sy) / denom;
    if slope >= 0.0 {
        return None;
    }
    Some(-60.0 / slope)
}

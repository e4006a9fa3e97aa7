//! Synthetic truck fleets with planted site popularity and daily/weekly rhythm.
//!
//! Each truck repeatedly decides, with probability `daily[hour] * weekly[day]`,
//! whether to work. Working means driving in a straight line to a site drawn
//! in proportion to its attraction (never the site it stands at), reporting a
//! position every 30 s, then dwelling there. Otherwise it goes offline for
//! `rest_s`. Dwell points stay within a few metres of the site centre, and
//! travel points are only reported away from both ends of the trip, so every
//! dwell shows up as exactly one stay point.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridding::{BBox, CellId, GridSpec, METERS_PER_DEG_LAT};
use crate::ingest::{haversine, Track, TrajectoryPoint, DEFAULT_MAX_GAP_S, DEFAULT_STAY_DURATION_S, DEFAULT_STAY_RADIUS_M};

/// 2022-08-01T00:00:00Z, a Monday.
pub const DEFAULT_T0: i64 = 1_659_312_000;
pub const POINT_INTERVAL_S: i64 = 30;
/// Largest travel jitter, metres.
pub const TRAVEL_JITTER_M: f64 = 20.0;
/// Largest distance of a dwell point from its site centre, metres.
pub const DWELL_JITTER_M: f64 = 20.0;
/// Travel points closer than this to either end of a trip are not reported.
const QUIET_ZONE_M: f64 = DEFAULT_STAY_RADIUS_M + 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub lat: f64,
    pub lon: f64,
    pub attraction: f64,
}

/// Dwell durations are uniform on `[mean_s - spread_s, mean_s + spread_s]`,
/// rounded down to the point interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellDistribution {
    pub mean_s: f64,
    pub spread_s: f64,
}

impl DwellDistribution {
    pub fn min_s(&self) -> f64 {
        self.mean_s - self.spread_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub bbox: BBox,
    pub n_trucks: usize,
    pub sites: Vec<Site>,
    pub dwell: DwellDistribution,
    pub speed_mps: f64,
    /// Probability of working in each hour of the day, `[0, 1]`.
    pub daily: Vec<f64>,
    /// Multiplier per weekday (Monday first), `[0, 1]`.
    pub weekly: Vec<f64>,
    pub rest_s: i64,
    pub days: u32,
    pub t0: i64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.sites.is_empty() {
            return bad("at least one site is needed".into());
        }
        if self.n_trucks == 0 || self.days == 0 {
            return bad("need at least one truck and one day".into());
        }
        if let Some(s) = self.sites.iter().find(|s| !self.bbox.contains(s.lat, s.lon)) {
            return bad(format!("site at ({}, {}) lies outside the box", s.lat, s.lon));
        }
        if self.sites.iter().any(|s| !(s.attraction > 0.0) || !s.attraction.is_finite()) {
            return bad("site attractions must be positive".into());
        }
        if !(self.dwell.spread_s >= 0.0) || !(self.dwell.min_s() >= DEFAULT_STAY_DURATION_S as f64 + POINT_INTERVAL_S as f64) {
            return bad(format!(
                "every dwell must outlast the {} s stay duration (shortest is {} s)",
                DEFAULT_STAY_DURATION_S,
                self.dwell.min_s()
            ));
        }
        if !(self.speed_mps > 0.0) || !self.speed_mps.is_finite() {
            return bad(format!("speed {}", self.speed_mps));
        }
        if self.daily.len() != 24 || self.weekly.len() != 7 {
            return bad("profiles need 24 hourly and 7 daily values".into());
        }
        if self.daily.iter().chain(&self.weekly).any(|&v| !(0.0..=1.0).contains(&v)) {
            return bad("profile values must lie in [0, 1]".into());
        }
        if self.rest_s <= DEFAULT_MAX_GAP_S {
            return bad(format!("rest of {} s would not separate consecutive dwells", self.rest_s));
        }
        Ok(())
    }

    pub fn end(&self) -> i64 {
        self.t0 + self.days as i64 * 86_400
    }

    /// Working probability at time `t` (UTC).
    pub fn intensity(&self, t: i64) -> f64 {
        let hour = t.rem_euclid(86_400) / 3_600;
        // 1970-01-01 was a Thursday
        let weekday = (t.div_euclid(86_400) + 3).rem_euclid(7);
        self.daily[hour as usize] * self.weekly[weekday as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedDwell {
    pub truck: usize,
    pub site: usize,
    /// Times of the first and last dwell point.
    pub t_start: i64,
    pub t_end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub dwells: Vec<PlantedDwell>,
    /// `attraction * working probability` per site and hour since `t0`.
    pub site_intensity: Vec<Vec<f64>>,
}

pub fn truck_id(i: usize) -> String {
    format!("T{i:04}")
}

fn offset(lat: f64, lon: f64, north_m: f64, east_m: f64) -> (f64, f64) {
    let m_lon = METERS_PER_DEG_LAT * lat.to_radians().cos();
    (lat + north_m / METERS_PER_DEG_LAT, lon + east_m / m_lon)
}

fn jittered(rng: &mut ChaCha8Rng, lat: f64, lon: f64, radius: f64) -> (f64, f64) {
    let r = radius * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    offset(lat, lon, r * a.sin(), r * a.cos())
}

struct TruckRun {
    points: Vec<TrajectoryPoint>,
    dwells: Vec<PlantedDwell>,
}

fn simulate_truck(cfg: &WorldConfig, truck: usize) -> TruckRun {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(truck as u64 + 1);
    let id = truck_id(truck);
    let weights: Vec<f64> = cfg.sites.iter().map(|s| s.attraction).collect();
    let pick_all = WeightedIndex::new(&weights).expect("validated attractions");
    let mut site = pick_all.sample(&mut rng);
    let mut t = cfg.t0 + rng.gen_range(0..cfg.rest_s / POINT_INTERVAL_S) * POINT_INTERVAL_S;
    let end = cfg.end();
    let mut run = TruckRun {
        points: Vec::new(),
        dwells: Vec::new(),
    };
    let push = |run: &mut TruckRun, t: i64, (lat, lon): (f64, f64)| {
        run.points.push(TrajectoryPoint::new(id.clone(), t, lat, lon));
    };
    while t < end {
        if rng.gen::<f64>() >= cfg.intensity(t) {
            t += cfg.rest_s;
            continue;
        }
        let dest = if cfg.sites.len() == 1 {
            0
        } else {
            let mut w = weights.clone();
            w[site] = 0.0;
            WeightedIndex::new(&w).expect("another site exists").sample(&mut rng)
        };
        let (from, to) = (cfg.sites[site], cfg.sites[dest]);
        let dist = haversine((from.lat, from.lon), (to.lat, to.lon));
        let steps = ((dist / cfg.speed_mps) / POINT_INTERVAL_S as f64).ceil() as i64;
        let mut trip = Vec::new();
        for j in 1..steps {
            let f = j as f64 / steps as f64;
            let (lat, lon) = (from.lat + f * (to.lat - from.lat), from.lon + f * (to.lon - from.lon));
            let p = jittered(&mut rng, lat, lon, TRAVEL_JITTER_M);
            if haversine(p, (from.lat, from.lon)) > QUIET_ZONE_M && haversine(p, (to.lat, to.lon)) > QUIET_ZONE_M {
                trip.push((t + j * POINT_INTERVAL_S, p));
            }
        }
        // with a single site the truck leaves unobserved and comes back
        let arrive = if dest == site { t + cfg.rest_s } else { t + steps.max(1) * POINT_INTERVAL_S };
        let dur = rng.gen_range(cfg.dwell.min_s()..=cfg.dwell.mean_s + cfg.dwell.spread_s);
        let n = (dur / POINT_INTERVAL_S as f64).floor() as i64;
        let leave = arrive + n * POINT_INTERVAL_S;
        if leave >= end {
            break;
        }
        for (tp, p) in trip {
            push(&mut run, tp, p);
        }
        for j in 0..=n {
            let p = jittered(&mut rng, to.lat, to.lon, DWELL_JITTER_M);
            push(&mut run, arrive + j * POINT_INTERVAL_S, p);
        }
        run.dwells.push(PlantedDwell {
            truck,
            site: dest,
            t_start: arrive,
            t_end: leave,
        });
        site = dest;
        t = leave + POINT_INTERVAL_S;
    }
    run
}

/// Points ordered by truck then time, and the planted dwells.
pub fn generate(cfg: &WorldConfig, jobs: usize) -> Result<(Vec<TrajectoryPoint>, GroundTruth)> {
    cfg.validate()?;
    let trucks: Vec<usize> = (0..cfg.n_trucks).collect();
    let runs = crate::parallel::map(&trucks, jobs, |&i| simulate_truck(cfg, i));
    let mut points = Vec::new();
    let mut dwells = Vec::new();
    for r in runs {
        points.extend(r.points);
        dwells.extend(r.dwells);
    }
    let hours = cfg.days as usize * 24;
    let site_intensity = cfg
        .sites
        .iter()
        .map(|s| (0..hours).map(|h| s.attraction * cfg.intensity(cfg.t0 + h as i64 * 3_600)).collect())
        .collect();
    Ok((points, GroundTruth { dwells, site_intensity }))
}

/// Groups generated points into per-truck tracks.
pub fn to_tracks(points: &[TrajectoryPoint]) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    for p in points {
        match tracks.last_mut() {
            Some(t) if t.truck_id == p.truck_id => t.points.push(p.clone()),
            _ => tracks.push(Track {
                truck_id: p.truck_id.clone(),
                points: vec![p.clone()],
            }),
        }
    }
    tracks
}

/// Expected share of cell-slots per activity class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub zero_fraction: f64,
    pub class_mix: [f64; 3],
}

fn poisson_cdf(lambda: f64, b: u32) -> f64 {
    let mut term = (-lambda).exp();
    let mut acc = term;
    for i in 1..=b {
        term *= lambda / i as f64;
        acc += term;
    }
    acc.min(1.0)
}

/// Analytic class mix over the whole grid and period, treating per cell-slot
/// counts as Poisson. A site receives arrivals at rate
/// `n_trucks * p * a_s / sum(a) / (p * C + (1 - p) * R)` (working probability
/// `p`, mean work cycle `C`, rest `R`), and a slot of length `L` sees every
/// dwell starting within `L + D` (mean dwell `D`).
pub fn imbalance_profile(cfg: &WorldConfig, grid: &GridSpec, slot_len: i64, medium_bound: u32) -> Result<ImbalanceProfile> {
    cfg.validate()?;
    let total_a: f64 = cfg.sites.iter().map(|s| s.attraction).sum();
    let n = cfg.sites.len();
    // mean trip length, origins weighted by attraction
    let mut trip = 0.0;
    if n > 1 {
        for (i, a) in cfg.sites.iter().enumerate() {
            let rest_a = total_a - a.attraction;
            for (j, b) in cfg.sites.iter().enumerate() {
                if i != j {
                    let d = haversine((a.lat, a.lon), (b.lat, b.lon));
                    trip += (a.attraction / total_a) * (b.attraction / rest_a) * (d / cfg.speed_mps);
                }
            }
        }
    } else {
        trip = cfg.rest_s as f64;
    }
    let dwell = cfg.dwell.mean_s;
    let cycle = trip + dwell + POINT_INTERVAL_S as f64;
    let rest = cfg.rest_s as f64;
    let mut share = vec![0.0; grid.n_cells()];
    for s in &cfg.sites {
        if let Some(c) = grid.locate(s.lat, s.lon) {
            share[c] += s.attraction / total_a;
        }
    }
    let n_slots = ((cfg.end() - cfg.t0) / slot_len).max(1);
    let mut mix = [0.0; 3];
    for slot in 0..n_slots {
        let mid = cfg.t0 + slot * slot_len + slot_len / 2;
        let p = cfg.intensity(mid);
        let rate = if p == 0.0 {
            0.0
        } else {
            cfg.n_trucks as f64 * p / (p * cycle + (1.0 - p) * rest)
        };
        for &sh in &share {
            let lambda = rate * sh * (slot_len as f64 + dwell);
            let p0 = (-lambda).exp();
            let p_le = poisson_cdf(lambda, medium_bound);
            mix[0] += p0;
            mix[1] += p_le - p0;
            mix[2] += 1.0 - p_le;
        }
    }
    let total = (n_slots as usize * grid.n_cells()) as f64;
    let class_mix = mix.map(|m| m / total);
    Ok(ImbalanceProfile {
        zero_fraction: class_mix[0],
        class_mix,
    })
}

/// Hourly working probability: off at night, ramps at dawn and dusk.
pub fn default_daily_profile() -> Vec<f64> {
    let mut d = vec![0.0; 24];
    d[5] = 0.3;
    d[6] = 0.7;
    for v in &mut d[7..19] {
        *v = 1.0;
    }
    d[19] = 0.7;
    d[20] = 0.3;
    d
}

/// Near-flat week with a slightly quieter weekend.
pub fn default_weekly_profile() -> Vec<f64> {
    vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.95, 0.9]
}

/// Side length of the default fixture's square cells, metres.
pub const FIXTURE_CELL_M: f64 = 1_000.0;
const FIXTURE_SIDE_CELLS: usize = 8;
const FIXTURE_HOT: usize = 6;
const FIXTURE_MEDIUM: usize = 10;

/// Desk-scale world: an 8 x 8 km box of 1 km cells with one site per cell,
/// six busy sites, ten moderate ones and many quiet ones, over 14 days.
pub fn default_fixture(seed: u64) -> WorldConfig {
    let (lat0, lon0) = (30.60, 104.00);
    let side = FIXTURE_SIDE_CELLS as f64 * FIXTURE_CELL_M;
    let lat1 = lat0 + side / METERS_PER_DEG_LAT;
    let mid = 0.5 * (lat0 + lat1);
    let lon1 = lon0 + side / (METERS_PER_DEG_LAT * mid.to_radians().cos());
    let bbox = BBox {
        lat_min: lat0,
        lon_min: lon0,
        lat_max: lat1,
        lon_max: lon1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cells = FIXTURE_SIDE_CELLS * FIXTURE_SIDE_CELLS;
    let mut order: Vec<usize> = (0..n_cells).collect();
    order.shuffle(&mut rng);
    let mut tier = vec![0.5; n_cells];
    for &c in &order[..FIXTURE_HOT] {
        tier[c] = 10.0;
    }
    for &c in &order[FIXTURE_HOT..FIXTURE_HOT + FIXTURE_MEDIUM] {
        tier[c] = 2.5;
    }
    let m_lon = METERS_PER_DEG_LAT * mid.to_radians().cos();
    let sites = (0..n_cells)
        .map(|c| {
            let (row, col) = (c / FIXTURE_SIDE_CELLS, c % FIXTURE_SIDE_CELLS);
            let north = (row as f64 + 0.5) * FIXTURE_CELL_M + rng.gen_range(-150.0..150.0);
            let east = (col as f64 + 0.5) * FIXTURE_CELL_M + rng.gen_range(-150.0..150.0);
            Site {
                lat: lat0 + north / METERS_PER_DEG_LAT,
                lon: lon0 + east / m_lon,
                attraction: tier[c],
            }
        })
        .collect();
    WorldConfig {
        bbox,
        n_trucks: 60,
        sites,
        dwell: DwellDistribution {
            mean_s: 1_200.0,
            spread_s: 300.0,
        },
        speed_mps: 8.0,
        daily: default_daily_profile(),
        weekly: default_weekly_profile(),
        rest_s: 3_600,
        days: 14,
        t0: DEFAULT_T0,
        seed,
    }
}

/// Cell of every site under `grid`.
pub fn site_cells(cfg: &WorldConfig, grid: &GridSpec) -> Vec<Option<CellId>> {
    cfg.sites.iter().map(|s| grid.locate(s.lat, s.lon)).collect()
}

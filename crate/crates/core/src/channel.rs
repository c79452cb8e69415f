//! IRS-assisted MISO link: Rician channel sampling, cascading, MRT precoding,
//! achievable rate, pilot observations and episode stepping.
//!
//! All powers are linear (mW) internally; dBm values are converted once when
//! a config file is loaded. Matrices are row-major `N × M` (IRS element by
//! BS antenna).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{D2tError, Result};

pub type C64 = Complex64;

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Line-of-sight geometry of one environment, in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosAngles {
    /// Departure angle at the BS array towards the IRS.
    pub bs_departure: f64,
    /// Arrival angle at the IRS from the BS.
    pub irs_arrival: f64,
    /// Departure angle at the IRS towards the user.
    pub irs_departure: f64,
}

impl LosAngles {
    /// Draws angles uniformly in (-π/2, π/2) from `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c4f_535f_414e_474c);
        let mut draw = || rng.random_range(-PI / 2.0..PI / 2.0);
        LosAngles {
            bs_departure: draw(),
            irs_arrival: draw(),
            irs_departure: draw(),
        }
    }
}

/// Physical constants of one environment, in linear units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub m: usize,
    pub n: usize,
    pub p_mw: f64,
    pub noise_mw: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub l0_db: f64,
    pub episode_len: usize,
    pub los_angles: LosAngles,
    /// Seed of the fixed pilot codebook; shared by every environment of a run.
    pub pilot_seed: u64,
    pub seed: u64,
}

/// On-disk form of [`EnvConfig`]: powers in dBm, angles optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfigFile {
    pub m: usize,
    pub n: usize,
    pub p_dbm: f64,
    pub noise_dbm: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub d0: f64,
    pub d1: f64,
    pub d2: f64,
    pub l0_db: f64,
    pub episode_len: usize,
    #[serde(default)]
    pub los_angles: Option<LosAngles>,
    pub pilot_seed: u64,
    pub seed: u64,
}

impl Default for EnvConfigFile {
    fn default() -> Self {
        EnvConfigFile {
            m: 4,
            n: 16,
            p_dbm: 5.0,
            noise_dbm: -90.0,
            kappa1: 10.0,
            kappa2: 10.0,
            xi1: 2.2,
            xi2: 2.8,
            d0: 1.0,
            d1: 30.0,
            d2: 4.0,
            l0_db: -30.0,
            episode_len: 20,
            los_angles: None,
            pilot_seed: 1,
            seed: 0,
        }
    }
}

impl EnvConfigFile {
    pub fn resolve(&self) -> Result<EnvConfig> {
        let cfg = EnvConfig {
            m: self.m,
            n: self.n,
            p_mw: dbm_to_mw(self.p_dbm),
            noise_mw: dbm_to_mw(self.noise_dbm),
            kappa1: self.kappa1,
            kappa2: self.kappa2,
            xi1: self.xi1,
            xi2: self.xi2,
            d0: self.d0,
            d1: self.d1,
            d2: self.d2,
            l0_db: self.l0_db,
            episode_len: self.episode_len,
            los_angles: self
                .los_angles
                .unwrap_or_else(|| LosAngles::from_seed(self.seed)),
            pilot_seed: self.pilot_seed,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(D2tError::Config(m.to_string()));
        if self.m == 0 || self.n == 0 || self.episode_len == 0 {
            return fail("M, N and T must be at least 1");
        }
        if !(self.p_mw > 0.0 && self.noise_mw > 0.0) {
            return fail("transmit and noise power must be positive");
        }
        if !(self.kappa1 >= 0.0 && self.kappa2 >= 0.0) {
            return fail("Rician factors must be non-negative");
        }
        if !(self.d0 > 0.0 && self.d1 >= self.d0 && self.d2 >= self.d0) {
            return fail("distances must satisfy d1, d2 >= d0 > 0");
        }
        Ok(())
    }

    /// Large-scale gain of the BS→IRS and IRS→user links.
    pub fn link_gains(&self) -> Result<(f64, f64)> {
        Ok((
            path_loss_linear(self.xi1, self.d1, self)?,
            path_loss_linear(self.xi2, self.d2, self)?,
        ))
    }

    pub fn num_pilots(&self) -> usize {
        2 * self.n.min(self.m) + 2
    }

    pub fn vector_len(&self) -> usize {
        2 * self.n * self.m
    }
}

/// `10^((L0 - 10 ξ log10(d/d0)) / 10)`.
pub fn path_loss_linear(xi: f64, d: f64, cfg: &EnvConfig) -> Result<f64> {
    if d < cfg.d0 {
        return Err(D2tError::Config(format!(
            "distance {d} below reference {}",
            cfg.d0
        )));
    }
    Ok(db_to_linear(cfg.l0_db - 10.0 * xi * (d / cfg.d0).log10()))
}

/// Half-wavelength ULA steering vector `[e^{jπ i sin θ}]`.
pub fn steering(len: usize, theta: f64) -> Vec<C64> {
    (0..len)
        .map(|i| C64::from_polar(1.0, PI * i as f64 * theta.sin()))
        .collect()
}

/// Circularly-symmetric complex normal with unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Link {
    /// G, `N × M`.
    BsToIrs,
    /// h, length `N`.
    IrsToUser,
}

/// Deterministic LOS component of a link.
pub fn los_component(cfg: &EnvConfig, link: Link) -> Vec<C64> {
    let a = &cfg.los_angles;
    match link {
        Link::BsToIrs => {
            let irs = steering(cfg.n, a.irs_arrival);
            let bs = steering(cfg.m, a.bs_departure);
            let mut g = Vec::with_capacity(cfg.n * cfg.m);
            for ai in &irs {
                for bj in &bs {
                    g.push(ai * bj.conj());
                }
            }
            g
        }
        Link::IrsToUser => steering(cfg.n, a.irs_departure),
    }
}

/// `√L (√(κ/(1+κ))·LOS + √(1/(1+κ))·Rayleigh)`.
pub fn sample_rician<R: Rng + ?Sized>(
    cfg: &EnvConfig,
    link: Link,
    rng: &mut R,
) -> Result<Vec<C64>> {
    let (gain, kappa) = match link {
        Link::BsToIrs => (path_loss_linear(cfg.xi1, cfg.d1, cfg)?, cfg.kappa1),
        Link::IrsToUser => (path_loss_linear(cfg.xi2, cfg.d2, cfg)?, cfg.kappa2),
    };
    let los = los_component(cfg, link);
    let (wl, ws) = ((kappa / (1.0 + kappa)).sqrt(), (1.0 / (1.0 + kappa)).sqrt());
    let amp = gain.sqrt();
    Ok(los
        .into_iter()
        .map(|l| amp * (wl * l + ws * complex_normal(rng)))
        .collect())
}

/// `H = diag(hᴴ)·G`, i.e. `H[n, m] = conj(h[n])·G[n, m]`.
pub fn cascade(g: &[C64], h: &[C64], n: usize, m: usize) -> Result<Vec<C64>> {
    if g.len() != n * m || h.len() != n {
        return Err(D2tError::Shape(format!(
            "cascade expects G {n}x{m} and h {n}, got {} and {}",
            g.len(),
            h.len()
        )));
    }
    Ok(g.iter()
        .enumerate()
        .map(|(i, gv)| h[i / m].conj() * gv)
        .collect())
}

/// One time slot's channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub n: usize,
    pub m: usize,
    pub g: Vec<C64>,
    pub h: Vec<C64>,
    pub cascaded: Vec<C64>,
}

impl ChannelRealization {
    pub fn new(g: Vec<C64>, h: Vec<C64>, n: usize, m: usize) -> Result<Self> {
        let cascaded = cascade(&g, &h, n, m)?;
        Ok(ChannelRealization {
            n,
            m,
            g,
            h,
            cascaded,
        })
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Result<Self> {
        let g = sample_rician(cfg, Link::BsToIrs, rng)?;
        let h = sample_rician(cfg, Link::IrsToUser, rng)?;
        Self::new(g, h, cfg.n, cfg.m)
    }
}

/// Reflection vector `e^{jφ}` for unit-amplitude elements.
pub fn reflection(phases: &[f64]) -> Vec<C64> {
    phases.iter().map(|&p| C64::from_polar(1.0, p)).collect()
}

/// Effective channel `φᵀH`, length `M`.
pub fn effective_channel(phases: &[f64], h: &[C64], m: usize) -> Vec<C64> {
    let mut v = vec![C64::new(0.0, 0.0); m];
    for (n, &p) in phases.iter().enumerate() {
        let e = C64::from_polar(1.0, p);
        for j in 0..m {
            v[j] += e * h[n * m + j];
        }
    }
    v
}

/// `‖φᵀH‖²`.
pub fn effective_gain(phases: &[f64], h: &[C64], m: usize) -> f64 {
    effective_channel(phases, h, m)
        .iter()
        .map(C64::norm_sqr)
        .sum()
}

/// Maximum-ratio precoder `√P (φᵀH)ᴴ / ‖φᵀH‖`.
pub fn mrt_precoder(phases: &[f64], h: &[C64], m: usize, p_mw: f64) -> Result<Vec<C64>> {
    let v = effective_channel(phases, h, m);
    let norm = v.iter().map(C64::norm_sqr).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(D2tError::DegenerateChannel);
    }
    Ok(v.iter().map(|x| x.conj() * (p_mw.sqrt() / norm)).collect())
}

/// `log2(1 + |φᵀH f|² / σ²)` for an arbitrary precoder `f`.
pub fn rate_with_precoder(phases: &[f64], h: &[C64], f: &[C64], noise_mw: f64) -> f64 {
    let v = effective_channel(phases, h, f.len());
    let s: C64 = v.iter().zip(f).map(|(a, b)| a * b).sum();
    (1.0 + s.norm_sqr() / noise_mw).log2()
}

/// `log2(1 + P‖φᵀH‖²/σ²)`, the rate under MRT.
pub fn achievable_rate(phases: &[f64], h: &[C64], cfg: &EnvConfig) -> f64 {
    (1.0 + cfg.p_mw * effective_gain(phases, h, cfg.m) / cfg.noise_mw).log2()
}

/// Fixed probe configurations: IRS phases per probe and the BS antenna
/// excited for that probe.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotBook {
    pub phases: Vec<Vec<f64>>,
    pub antenna: Vec<usize>,
}

impl PilotBook {
    pub fn new(cfg: &EnvConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.pilot_seed);
        let np = cfg.num_pilots();
        let phases = (0..np)
            .map(|_| (0..cfg.n).map(|_| rng.random_range(-PI..PI)).collect())
            .collect();
        let antenna = (0..np).map(|p| p % cfg.m).collect();
        PilotBook { phases, antenna }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Stacked pilot receptions: real parts then imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotObservation {
    pub y: Vec<f64>,
}

/// `y_p = (φ_pᵀH) f_p + n_p` with `f_p = √P e_{antenna(p)}` and `n_p ~ CN(0, σ²)`.
pub fn pilot_observe<R: Rng + ?Sized>(
    h: &[C64],
    book: &PilotBook,
    cfg: &EnvConfig,
    noise_mw: f64,
    rng: &mut R,
) -> PilotObservation {
    let np = book.len();
    let mut y = vec![0.0; 2 * np];
    for p in 0..np {
        let v = effective_channel(&book.phases[p], h, cfg.m);
        let mut r = v[book.antenna[p]] * cfg.p_mw.sqrt();
        if noise_mw > 0.0 {
            r += complex_normal(rng) * noise_mw.sqrt();
        }
        y[p] = r.re;
        y[np + p] = r.im;
    }
    PilotObservation { y }
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub reward: f64,
    /// Channel and pilots for the following slot, `None` once the episode ends.
    pub next: Option<(ChannelRealization, PilotObservation)>,
}

/// Episodic environment with channels drawn i.i.d. per slot.
#[derive(Clone, Debug)]
pub struct Environment {
    pub cfg: EnvConfig,
    pub book: PilotBook,
    rng: ChaCha8Rng,
    slot: usize,
    current: ChannelRealization,
    pilot: PilotObservation,
}

impl Environment {
    /// Starts the first episode from the config seed.
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        let seed = cfg.seed;
        Self::with_seed(cfg, seed)
    }

    pub fn with_seed(cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let book = PilotBook::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = ChannelRealization::sample(&cfg, &mut rng)?;
        let pilot = pilot_observe(&current.cascaded, &book, &cfg, cfg.noise_mw, &mut rng);
        Ok(Environment {
            cfg,
            book,
            rng,
            slot: 0,
            current,
            pilot,
        })
    }

    /// Begins a fresh episode, continuing the environment's random stream.
    pub fn reset(&mut self) -> Result<()> {
        self.slot = 0;
        self.draw()
    }

    fn draw(&mut self) -> Result<()> {
        self.current = ChannelRealization::sample(&self.cfg, &mut self.rng)?;
        self.pilot = pilot_observe(
            &self.current.cascaded,
            &self.book,
            &self.cfg,
            self.cfg.noise_mw,
            &mut self.rng,
        );
        Ok(())
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn horizon(&self) -> usize {
        self.cfg.episode_len
    }

    pub fn channel(&self) -> &ChannelRealization {
        &self.current
    }

    pub fn pilot(&self) -> &PilotObservation {
        &self.pilot
    }

    /// Applies `phases` in the current slot; the reward is the MRT rate, or 0
    /// on a degenerate channel.
    pub fn step(&mut self, phases: &[f64]) -> Result<StepOutcome> {
        if self.slot >= self.cfg.episode_len {
            return Err(D2tError::EpisodeOver {
                slot: self.slot,
                horizon: self.cfg.episode_len,
            });
        }
        if phases.len() != self.cfg.n {
            return Err(D2tError::Shape(format!(
                "action has {} phases, expected {}",
                phases.len(),
                self.cfg.n
            )));
        }
        let reward = match mrt_precoder(phases, &self.current.cascaded, self.cfg.m, self.cfg.p_mw) {
            Ok(f) => rate_with_precoder(phases, &self.current.cascaded, &f, self.cfg.noise_mw),
            Err(D2tError::DegenerateChannel) => 0.0,
            Err(e) => return Err(e),
        };
        self.slot += 1;
        let next = if self.slot < self.cfg.episode_len {
            self.draw()?;
            Some((self.current.clone(), self.pilot.clone()))
        } else {
            None
        };
        Ok(StepOutcome { reward, next })
    }
}

/// Wraps every angle into `[-π, π)`.
pub fn wrap_phases(phases: &mut [f64]) {
    for p in phases {
        *p = (*p + PI).rem_euclid(2.0 * PI) - PI;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EnvConfig {
        EnvConfigFile::default().resolve().unwrap()
    }

    fn random_channel(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<C64> {
        (0..n * m).map(|_| complex_normal(rng)).collect()
    }

    #[test]
    fn path_loss_reference_and_decade() {
        let c = cfg();
        assert!((path_loss_linear(2.0, c.d0, &c).unwrap() - 1e-3).abs() < 1e-18);
        assert!((path_loss_linear(2.0, 10.0 * c.d0, &c).unwrap() - 1e-5).abs() < 1e-19);
        let mut prev = f64::INFINITY;
        for d in [1.0, 2.0, 5.0, 20.0, 100.0] {
            let g = path_loss_linear(2.2, d, &c).unwrap();
            assert!(g < prev);
            prev = g;
        }
        assert!(path_loss_linear(2.0, 0.5, &c).is_err());
    }

    #[test]
    fn power_conversions() {
        let c = cfg();
        assert!((c.p_mw - 3.1623).abs() < 1e-4);
        assert!((c.noise_mw - 1e-9).abs() < 1e-24);
        assert_eq!((c.kappa1, c.kappa2), (10.0, 10.0));
    }

    #[test]
    fn config_invariants() {
        let mut f = EnvConfigFile::default();
        f.d1 = 0.5;
        assert!(f.resolve().is_err());
        let mut f = EnvConfigFile::default();
        f.n = 0;
        assert!(f.resolve().is_err());
        let mut f = EnvConfigFile::default();
        f.kappa2 = -1.0;
        assert!(f.resolve().is_err());
    }

    #[test]
    fn rician_large_kappa_is_los() {
        let mut c = cfg();
        c.kappa1 = 1e12;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_rician(&c, Link::BsToIrs, &mut rng).unwrap();
        let los = los_component(&c, Link::BsToIrs);
        let amp = path_loss_linear(c.xi1, c.d1, &c).unwrap().sqrt();
        for (s, l) in g.iter().zip(&los) {
            assert!((s - l * amp).norm() / amp < 1e-5);
        }
    }

    #[test]
    fn cascade_cases() {
        let g = vec![C64::new(1.0, 2.0)];
        let h = vec![C64::new(0.5, -1.0)];
        assert_eq!(cascade(&g, &h, 1, 1).unwrap(), vec![h[0].conj() * g[0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_channel(&mut rng, 3, 2);
        let ones = vec![C64::new(1.0, 0.0); 3];
        assert_eq!(cascade(&g, &ones, 3, 2).unwrap(), g);

        let h = random_channel(&mut rng, 3, 1);
        let got = cascade(&g, &h, 3, 2).unwrap();
        // diag(hᴴ)·G by explicit triple loop
        let mut want = vec![C64::new(0.0, 0.0); 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..3 {
                    let d = if i == k {
                        h[i].conj()
                    } else {
                        C64::new(0.0, 0.0)
                    };
                    want[i * 2 + j] += d * g[k * 2 + j];
                }
            }
        }
        assert_eq!(got, want);
        assert!(cascade(&g, &h[..2], 3, 2).is_err());
    }

    #[test]
    fn mrt_power_and_single_antenna() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = random_channel(&mut rng, 5, 3);
            let ph: Vec<f64> = (0..5).map(|_| rng.random_range(-PI..PI)).collect();
            let f = mrt_precoder(&ph, &h, 3, c.p_mw).unwrap();
            let p: f64 = f.iter().map(C64::norm_sqr).sum();
            assert!((p - c.p_mw).abs() < 1e-12);
        }
        let h = random_channel(&mut rng, 4, 1);
        let ph = vec![0.1, 0.2, -0.3, 1.0];
        let f = mrt_precoder(&ph, &h, 1, c.p_mw).unwrap();
        let v = effective_channel(&ph, &h, 1)[0];
        let want = C64::from_polar(c.p_mw.sqrt(), -v.arg());
        assert!((f[0] - want).norm() < 1e-12);
    }

    #[test]
    fn mrt_degenerate() {
        let h = vec![C64::new(0.0, 0.0); 4];
        assert!(matches!(
            mrt_precoder(&[0.0, 0.0], &h, 2, 1.0),
            Err(D2tError::DegenerateChannel)
        ));
    }

    #[test]
    fn mrt_beats_random_precoders() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<C64> = random_channel(&mut rng, 4, 4)
            .iter()
            .map(|x| x * 1e-5)
            .collect();
        let ph: Vec<f64> = (0..4).map(|_| rng.random_range(-PI..PI)).collect();
        let f = mrt_precoder(&ph, &h, 4, c.p_mw).unwrap();
        let best = rate_with_precoder(&ph, &h, &f, c.noise_mw);
        assert!((best - achievable_rate(&ph, &h, &c)).abs() < 1e-9);
        for _ in 0..1000 {
            let raw: Vec<C64> = (0..4).map(|_| complex_normal(&mut rng)).collect();
            let nrm = raw.iter().map(C64::norm_sqr).sum::<f64>().sqrt();
            let f: Vec<C64> = raw.iter().map(|x| x * (c.p_mw.sqrt() / nrm)).collect();
            assert!(rate_with_precoder(&ph, &h, &f, c.noise_mw) <= best + 1e-12);
        }
    }

    #[test]
    fn rate_cases() {
        let mut c = cfg();
        assert_eq!(
            achievable_rate(
                &[0.0],
                &[C64::new(0.0, 0.0)],
                &EnvConfig { m: 1, ..c.clone() }
            ),
            0.0
        );
        c.m = 1;
        c.p_mw = 2.0;
        c.noise_mw = 0.5;
        // P|h|²/σ² = 2 * 0.25 / 0.5 = 1
        assert!((achievable_rate(&[0.7], &[C64::new(0.0, 0.5)], &c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rate_invariant_to_common_phase() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: Vec<C64> = random_channel(&mut rng, 16, 4)
            .iter()
            .map(|x| x * 1e-5)
            .collect();
        let ph: Vec<f64> = (0..16).map(|_| rng.random_range(-PI..PI)).collect();
        let r0 = achievable_rate(&ph, &h, &c);
        for shift in [0.3, -2.0, 7.0] {
            let s: Vec<f64> = ph.iter().map(|p| p + shift).collect();
            assert!((achievable_rate(&s, &h, &c) - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn pilots_noiseless_and_shape() {
        let c = cfg();
        let book = PilotBook::new(&c);
        assert_eq!(book.len(), 2 * 4 + 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ch = ChannelRealization::sample(&c, &mut rng).unwrap();
        let obs = pilot_observe(&ch.cascaded, &book, &c, 0.0, &mut rng);
        assert_eq!(obs.y.len(), 2 * book.len());
        for p in 0..book.len() {
            let v = effective_channel(&book.phases[p], &ch.cascaded, c.m)[book.antenna[p]]
                * c.p_mw.sqrt();
            assert_eq!(obs.y[p], v.re);
            assert_eq!(obs.y[book.len() + p], v.im);
        }
    }

    #[test]
    fn pilots_distinguish_single_entry_changes() {
        let c = cfg();
        let book = PilotBook::new(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = ChannelRealization::sample(&c, &mut rng).unwrap().cascaded;
            let mut b = a.clone();
            let idx = rng.random_range(0..a.len());
            b[idx] += complex_normal(&mut rng) * a[idx].norm();
            let ya = pilot_observe(&a, &book, &c, 0.0, &mut rng).y;
            let yb = pilot_observe(&b, &book, &c, 0.0, &mut rng).y;
            assert_ne!(ya, yb);
        }
    }

    #[test]
    fn episode_is_deterministic_and_positive() {
        let c = cfg();
        let roll = || {
            let mut env = Environment::new(c.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut rewards = Vec::new();
            for t in 0..c.episode_len {
                let ph: Vec<f64> = (0..c.n).map(|_| rng.random_range(-PI..PI)).collect();
                let out = env.step(&ph).unwrap();
                assert!(out.reward > 0.0);
                assert_eq!(out.next.is_some(), t + 1 < c.episode_len);
                rewards.push(out.reward);
            }
            assert!(matches!(
                env.step(&vec![0.0; c.n]),
                Err(D2tError::EpisodeOver { .. })
            ));
            rewards
        };
        assert_eq!(roll(), roll());
    }

    #[test]
    fn realization_invariant() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let ch = ChannelRealization::sample(&c, &mut rng).unwrap();
            for n in 0..c.n {
                for m in 0..c.m {
                    let want = ch.h[n].conj() * ch.g[n * c.m + m];
                    assert!(
                        (ch.cascaded[n * c.m + m] - want).norm() <= 1e-12 * want.norm().max(1e-300)
                    );
                }
            }
        }
    }
}

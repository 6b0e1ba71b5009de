//! Synthetic CAN traffic: periodic ECU broadcasts with Gaussian jitter, plus
//! flooding, fuzzy and malfunction injection.
//!
//! Every generated timestamp is rounded to whole microseconds so streams
//! survive a text round trip with six decimals unchanged.

use rand::{Rng, RngCore};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canio::{AddressWidth, CanFrame, FrameError, Label};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("no ECU profiles given")]
    EmptyProfiles,
    #[error("profile {can_id:#x}: {reason}")]
    InvalidProfile { can_id: u32, reason: String },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("invalid attack: {0}")]
    InvalidAttack(String),
    #[error("attack window [{start}, {end}] lies outside the frame horizon [{first}, {last}]")]
    OutsideHorizon { start: f64, end: f64, first: f64, last: f64 },
    #[error("malfunction target {0:#x} does not occur in the stream")]
    UnknownTarget(u32),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadMode {
    /// Same bytes every cycle.
    Constant,
    /// First byte is a rolling counter, the rest constant.
    Counter,
    /// Fresh random bytes every cycle.
    Random,
}

fn default_dlc() -> u8 {
    8
}

/// One periodic broadcaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcuProfile {
    pub can_id: u32,
    /// Seconds between nominal transmissions.
    pub period: f64,
    pub jitter_std: f64,
    pub payload_mode: PayloadMode,
    /// Phase of the first nominal transmission, in `[0, period)`.
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "default_dlc")]
    pub dlc: u8,
}

impl EcuProfile {
    /// Jitter-free constant-payload profile starting at t = 0.
    pub fn new(can_id: u32, period: f64) -> Self {
        Self {
            can_id,
            period,
            jitter_std: 0.0,
            payload_mode: PayloadMode::Constant,
            offset: 0.0,
            dlc: 8,
        }
    }

    pub fn validate(&self, width: AddressWidth) -> Result<(), SimError> {
        let bad = |reason: &str| SimError::InvalidProfile {
            can_id: self.can_id,
            reason: reason.to_string(),
        };
        if self.can_id > width.max_id() {
            return Err(bad("id exceeds address width"));
        }
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(bad("period must be positive"));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std < self.period / 2.0) {
            return Err(bad("jitter_std must lie in [0, period/2)"));
        }
        if !(self.offset >= 0.0 && self.offset < self.period) {
            return Err(bad("offset must lie in [0, period)"));
        }
        if self.dlc > 8 {
            return Err(bad("dlc exceeds 8"));
        }
        Ok(())
    }
}

fn quantize_us(t: f64) -> f64 {
    (t * 1e6).round() / 1e6
}

fn frame_order(a: &CanFrame, b: &CanFrame) -> std::cmp::Ordering {
    a.timestamp()
        .total_cmp(&b.timestamp())
        .then(a.can_id().cmp(&b.can_id()))
}

/// Periodic traffic for every profile over `[0, horizon)`, merged in
/// (timestamp, id) order. All frames are labeled Normal.
pub fn generate_normal(profiles: &[EcuProfile], horizon: f64, seed: u64) -> Result<Vec<CanFrame>, SimError> {
    if profiles.is_empty() {
        return Err(SimError::EmptyProfiles);
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(SimError::BadHorizon(horizon));
    }
    let width = if profiles.iter().any(|p| p.can_id > AddressWidth::Standard.max_id()) {
        AddressWidth::Extended
    } else {
        AddressWidth::Standard
    };
    for p in profiles {
        p.validate(width)?;
    }
    let expected: f64 = profiles.iter().map(|p| horizon / p.period).sum();
    let mut frames = Vec::with_capacity(expected as usize + profiles.len());
    for (idx, p) in profiles.iter().enumerate() {
        let mut rng = rng_for(seed, &[0, idx as u64]);
        let jitter = Normal::new(0.0, p.jitter_std).expect("validated jitter");
        let mut base = [0u8; 8];
        rng.fill_bytes(&mut base);
        let mut payload = base;
        let mut k: u64 = 0;
        loop {
            let nominal = p.offset + k as f64 * p.period;
            if nominal >= horizon {
                break;
            }
            let mut t = nominal;
            if p.jitter_std > 0.0 {
                t += jitter.sample(&mut rng);
            }
            let t = quantize_us(t.max(0.0));
            match p.payload_mode {
                PayloadMode::Constant => {}
                PayloadMode::Counter => payload[0] = k as u8,
                PayloadMode::Random => rng.fill_bytes(&mut payload),
            }
            if t < horizon {
                frames.push(CanFrame::new(t, p.can_id, &payload[..p.dlc as usize], Label::Normal, width)?);
            }
            k += 1;
        }
    }
    frames.sort_by(frame_order);
    Ok(frames)
}

fn default_fuzzy_period() -> f64 {
    0.0003
}

fn default_malfunction_period() -> f64 {
    0.001
}

/// Attack type and its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackKind {
    /// Id 0x000 with an all-zero payload.
    Flooding { period: f64 },
    /// Uniform ids over the address width with random payloads.
    Fuzzy {
        #[serde(default = "default_fuzzy_period")]
        period: f64,
        #[serde(default)]
        address_width: AddressWidth,
    },
    /// A legitimate id replayed with random payloads.
    Malfunction {
        target: u32,
        #[serde(default = "default_malfunction_period")]
        period: f64,
    },
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Flooding { .. } => "flooding",
            Self::Fuzzy { .. } => "fuzzy",
            Self::Malfunction { .. } => "malfunction",
        }
    }

    pub fn period(&self) -> f64 {
        match *self {
            Self::Flooding { period } | Self::Fuzzy { period, .. } | Self::Malfunction { period, .. } => period,
        }
    }

    fn address_width(&self) -> AddressWidth {
        match *self {
            Self::Fuzzy { address_width, .. } => address_width,
            Self::Malfunction { target, .. } if target > AddressWidth::Standard.max_id() => AddressWidth::Extended,
            _ => AddressWidth::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    pub start: f64,
    pub duration: f64,
}

impl AttackSpec {
    pub fn flooding(start: f64, duration: f64, period: f64) -> Self {
        Self {
            kind: AttackKind::Flooding { period },
            start,
            duration,
        }
    }

    pub fn fuzzy(start: f64, duration: f64) -> Self {
        Self {
            kind: AttackKind::Fuzzy {
                period: default_fuzzy_period(),
                address_width: AddressWidth::Standard,
            },
            start,
            duration,
        }
    }

    pub fn malfunction(target: u32, start: f64, duration: f64, period: f64) -> Self {
        Self {
            kind: AttackKind::Malfunction { target, period },
            start,
            duration,
        }
    }

    /// Number of frames the injector will emit.
    pub fn injected_count(&self) -> usize {
        // Small slack so 0.1 / 0.0005 counts as 200 despite rounding.
        (self.duration / self.kind.period() + 1e-9).floor() as usize
    }

    fn validate(&self) -> Result<(), SimError> {
        let period = self.kind.period();
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(SimError::InvalidAttack("duration must be positive".into()));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(SimError::InvalidAttack("period must be positive".into()));
        }
        if !(self.start.is_finite() && self.start >= 0.0) {
            return Err(SimError::InvalidAttack("start must be non-negative".into()));
        }
        Ok(())
    }
}

/// Inserts attack frames into a time-sorted stream.
///
/// Original frames keep their order and labels; injected frames are labeled
/// Attack and placed at `start + i * period` for `i < floor(duration / period)`.
pub fn inject_attack(frames: &[CanFrame], spec: &AttackSpec, seed: u64) -> Result<Vec<CanFrame>, SimError> {
    spec.validate()?;
    let (first, last) = match (frames.first(), frames.last()) {
        (Some(f), Some(l)) => (f.timestamp(), l.timestamp()),
        _ => (0.0, 0.0),
    };
    let end = spec.start + spec.duration;
    if frames.is_empty() || spec.start < first || end > last {
        return Err(SimError::OutsideHorizon {
            start: spec.start,
            end,
            first,
            last,
        });
    }
    if let AttackKind::Malfunction { target, .. } = spec.kind {
        if !frames.iter().any(|f| f.can_id() == target) {
            return Err(SimError::UnknownTarget(target));
        }
    }

    let mut rng = rng_for(seed, &[1]);
    let period = spec.kind.period();
    let width = spec.kind.address_width();
    let mut injected = Vec::with_capacity(spec.injected_count());
    for i in 0..spec.injected_count() {
        let t = quantize_us(spec.start + i as f64 * period);
        let mut payload = [0u8; 8];
        let id = match spec.kind {
            AttackKind::Flooding { .. } => 0,
            AttackKind::Fuzzy { address_width, .. } => {
                rng.fill_bytes(&mut payload);
                rng.random_range(0..=address_width.max_id())
            }
            AttackKind::Malfunction { target, .. } => {
                rng.fill_bytes(&mut payload);
                target
            }
        };
        injected.push(CanFrame::new(t, id, &payload, Label::Attack, width)?);
    }

    let mut out = Vec::with_capacity(frames.len() + injected.len());
    let mut orig = frames.iter().peekable();
    for inj in injected {
        while let Some(o) = orig.next_if(|o| frame_order(o, &inj).is_le()) {
            out.push(*o);
        }
        out.push(inj);
    }
    out.extend(orig.copied());
    Ok(out)
}

/// How one attack stream of the benchmark suite is laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub attack: AttackKind,
    /// Approximate total frames in the stream.
    pub frames: usize,
    /// Fraction of those frames that are injected.
    pub attack_ratio: f64,
    /// The attack time is split into this many evenly spaced bursts.
    pub bursts: usize,
}

impl AttackPlan {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.attack_ratio > 0.0 && self.attack_ratio < 1.0) {
            return Err(SimError::InvalidAttack("attack_ratio must lie in (0, 1)".into()));
        }
        if self.bursts == 0 || self.frames == 0 {
            return Err(SimError::InvalidAttack("frames and bursts must be positive".into()));
        }
        Ok(())
    }
}

/// Scenario file contents for the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub seed: u64,
    /// Number of ECUs to synthesize when `profiles` is absent.
    pub ecu_count: usize,
    pub profiles: Option<Vec<EcuProfile>>,
    /// Approximate attack-free stream length.
    pub attack_free_frames: usize,
    /// Attack-free horizon in seconds; overrides `attack_free_frames`.
    pub horizon: Option<f64>,
    pub attacks: Vec<AttackPlan>,
}

/// The id targeted by the default malfunction plan. It is always among the
/// synthesized profiles.
pub const MALFUNCTION_TARGET: u32 = 0x316;

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            ecu_count: 40,
            profiles: None,
            attack_free_frames: 140_000,
            horizon: None,
            attacks: vec![
                AttackPlan {
                    attack: AttackKind::Flooding { period: 0.0005 },
                    frames: 85_000,
                    attack_ratio: 14_999.0 / 85_000.0,
                    bursts: 4,
                },
                AttackPlan {
                    attack: AttackKind::Fuzzy {
                        period: default_fuzzy_period(),
                        address_width: AddressWidth::Standard,
                    },
                    frames: 41_000,
                    attack_ratio: 0.15,
                    bursts: 4,
                },
                AttackPlan {
                    attack: AttackKind::Malfunction {
                        target: MALFUNCTION_TARGET,
                        period: default_malfunction_period(),
                    },
                    frames: 51_000,
                    attack_ratio: 0.15,
                    bursts: 4,
                },
            ],
        }
    }
}

impl Scenario {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Same layout with every stream length multiplied by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        let scale = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        self.attack_free_frames = scale(self.attack_free_frames);
        self.horizon = self.horizon.map(|h| h * factor);
        for plan in &mut self.attacks {
            plan.frames = scale(plan.frames);
        }
        self
    }

    pub fn build(&self) -> Result<BenchmarkSuite, SimError> {
        let profiles = match &self.profiles {
            Some(p) => p.clone(),
            None => default_profiles(self.ecu_count, self.seed)?,
        };
        if profiles.is_empty() {
            return Err(SimError::EmptyProfiles);
        }
        let rate: f64 = profiles.iter().map(|p| 1.0 / p.period).sum();
        let horizon = self.horizon.unwrap_or(self.attack_free_frames as f64 / rate);
        let attack_free = generate_normal(&profiles, horizon, crate::util::derive_seed(self.seed, &[10]))?;

        let mut attacks = Vec::with_capacity(self.attacks.len());
        for (i, plan) in self.attacks.iter().enumerate() {
            plan.validate()?;
            let stream_seed = crate::util::derive_seed(self.seed, &[11, i as u64]);
            let normal_frames = plan.frames as f64 * (1.0 - plan.attack_ratio);
            let attack_frames = plan.frames as f64 * plan.attack_ratio;
            let h = normal_frames / rate;
            let mut frames = generate_normal(&profiles, h, stream_seed)?;
            let burst = attack_frames * plan.attack.period() / plan.bursts as f64;
            let gap = h / (plan.bursts + 1) as f64;
            if burst >= gap {
                return Err(SimError::InvalidAttack(format!(
                    "{} plan needs {burst:.3} s bursts but only {gap:.3} s between burst centers",
                    plan.attack.name()
                )));
            }
            for b in 0..plan.bursts {
                let center = gap * (b + 1) as f64;
                let spec = AttackSpec {
                    kind: plan.attack.clone(),
                    start: quantize_us(center - burst / 2.0),
                    duration: burst,
                };
                frames = inject_attack(&frames, &spec, crate::util::derive_seed(stream_seed, &[b as u64]))?;
            }
            attacks.push(AttackStream {
                name: plan.attack.name().to_string(),
                plan: plan.clone(),
                frames,
            });
        }
        Ok(BenchmarkSuite {
            profiles,
            attack_free,
            attacks,
        })
    }
}

/// `count` profiles with distinct standard ids (always including
/// [`MALFUNCTION_TARGET`]) and periods drawn from {10, 20, 50, 100} ms.
pub fn default_profiles(count: usize, seed: u64) -> Result<Vec<EcuProfile>, SimError> {
    if count == 0 {
        return Err(SimError::EmptyProfiles);
    }
    let mut rng = rng_for(seed, &[2]);
    let mut ids: Vec<u32> = (0x010..0x7F0).filter(|&id| id != MALFUNCTION_TARGET).collect();
    ids.shuffle(&mut rng);
    ids.truncate(count - 1);
    ids.push(MALFUNCTION_TARGET);
    ids.sort_unstable();

    // Roughly 3:3:2:2 over the period classes.
    const PERIODS: [f64; 10] = [0.01, 0.02, 0.05, 0.1, 0.01, 0.02, 0.05, 0.1, 0.01, 0.02];
    let mut periods: Vec<f64> = (0..count).map(|i| PERIODS[i % PERIODS.len()]).collect();
    periods.shuffle(&mut rng);

    Ok(ids
        .into_iter()
        .zip(periods)
        .map(|(can_id, period)| {
            let payload_mode = match rng.random_range(0..3) {
                0 => PayloadMode::Constant,
                1 => PayloadMode::Counter,
                _ => PayloadMode::Random,
            };
            let slots = (period / 1e-4).round() as u32;
            EcuProfile {
                can_id,
                period,
                jitter_std: rng.random_range(20e-6..50e-6),
                payload_mode,
                offset: rng.random_range(0..slots) as f64 * 1e-4,
                dlc: 8,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackStream {
    pub name: String,
    pub plan: AttackPlan,
    pub frames: Vec<CanFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSuite {
    pub profiles: Vec<EcuProfile>,
    pub attack_free: Vec<CanFrame>,
    pub attacks: Vec<AttackStream>,
}

impl BenchmarkSuite {
    pub fn attack(&self, name: &str) -> Option<&[CanFrame]> {
        self.attacks
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.frames.as_slice())
    }

    /// `("attack_free", ..)` followed by each attack stream.
    pub fn streams(&self) -> impl Iterator<Item = (&str, &[CanFrame])> {
        std::iter::once(("attack_free", self.attack_free.as_slice()))
            .chain(self.attacks.iter().map(|a| (a.name.as_str(), a.frames.as_slice())))
    }
}

/// Default suite: 40 ECUs, ~140k attack-free frames and three attack streams.
pub fn make_benchmark_suite(seed: u64) -> Result<BenchmarkSuite, SimError> {
    Scenario::with_seed(seed).build()
}

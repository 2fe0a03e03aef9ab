//! Network geometry, path loss, Rayleigh fading and normalized channel gains.
//!
//! The primary station sits at the origin and the secondary station at
//! `(L, 0)`. Users are drawn uniformly in distance and angle around their
//! serving station; the PU-to-secondary distance follows from the planar
//! coordinates.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::textio;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const LAYOUT_STREAM: u64 = 0x6c61_796f_7574;
const FADING_STREAM: u64 = 0x6661_6469_6e67;

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a parent seed and a list of indices.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(parent), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    /// Primary-to-secondary station distance `L` in meters.
    pub distance_pt_st: f64,
    pub d_ref: f64,
    pub d_pt_max: f64,
    pub d_st_max: f64,
    pub pathloss_exponent: f64,
    pub gain_pt_dbi: f64,
    pub gain_st_dbi: f64,
    pub carrier_hz: f64,
    pub subcarrier_bw_hz: f64,
    /// Per-subcarrier noise power at every receiver.
    pub noise_dbm: f64,
    pub num_pu: usize,
    pub num_su: usize,
    pub num_subcarriers: usize,
}

impl Topology {
    /// Full-size simulation parameters: 32 subcarriers and `L` at
    /// normalized distance 0.5.
    pub fn full_scale() -> Self {
        let mut t = Topology {
            distance_pt_st: 0.0,
            d_ref: 10.0,
            d_pt_max: 500.0,
            d_st_max: 150.0,
            pathloss_exponent: 3.6,
            gain_pt_dbi: 10.0,
            gain_st_dbi: 5.0,
            carrier_hz: 2.0e9,
            subcarrier_bw_hz: 78e3,
            noise_dbm: -110.0,
            num_pu: 2,
            num_su: 2,
            num_subcarriers: 32,
        };
        t.set_normalized_distance(0.5);
        t
    }

    /// [`Topology::full_scale`] with 8 subcarriers, the default size for tests and sweeps.
    pub fn desk_scale() -> Self {
        Topology {
            num_subcarriers: 8,
            ..Self::full_scale()
        }
    }

    pub fn normalized_distance(&self) -> f64 {
        (self.distance_pt_st - self.d_ref) / (self.d_pt_max - self.d_ref)
    }

    pub fn set_normalized_distance(&mut self, d: f64) {
        self.distance_pt_st = self.d_ref + d * (self.d_pt_max - self.d_ref);
    }

    pub fn noise_watts(&self) -> f64 {
        dbm_to_watts(self.noise_dbm)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidTopology(m.to_string()));
        let positive = [
            self.distance_pt_st,
            self.d_ref,
            self.d_pt_max,
            self.d_st_max,
            self.carrier_hz,
            self.subcarrier_bw_hz,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("distances and bandwidths must be positive and finite");
        }
        if !(self.d_ref < self.d_st_max && self.d_st_max <= self.d_pt_max) {
            return bad("require d_ref < d_st_max <= d_pt_max");
        }
        if self.distance_pt_st < self.d_ref {
            return bad("station separation is inside the reference radius");
        }
        if !(self.pathloss_exponent >= 2.0) {
            return bad("path-loss exponent must be at least 2");
        }
        if self.num_pu == 0 || self.num_su == 0 || self.num_subcarriers == 0 {
            return bad("user and subcarrier counts must be positive");
        }
        if !(self.noise_dbm.is_finite()
            && self.gain_pt_dbi.is_finite()
            && self.gain_st_dbi.is_finite())
        {
            return bad("gains and noise must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserLayout {
    pub pu_distance: Vec<f64>,
    pub pu_distance_st: Vec<f64>,
    pub su_distance: Vec<f64>,
}

pub fn generate_layout(topology: &Topology, seed: u64) -> UserLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[LAYOUT_STREAM]));
    let l = topology.distance_pt_st;
    let mut pu_distance = Vec::with_capacity(topology.num_pu);
    let mut pu_distance_st = Vec::with_capacity(topology.num_pu);
    for _ in 0..topology.num_pu {
        let r = rng.random_range(topology.d_ref..=topology.d_pt_max);
        let theta = rng.random_range(0.0..2.0 * PI);
        let (x, y) = (r * theta.cos(), r * theta.sin());
        pu_distance.push(r);
        pu_distance_st.push((x - l).hypot(y).max(topology.d_ref));
    }
    let su_distance = (0..topology.num_su)
        .map(|_| rng.random_range(topology.d_ref..=topology.d_st_max))
        .collect();
    UserLayout {
        pu_distance,
        pu_distance_st,
        su_distance,
    }
}

/// Free-space gain at `d_ref`, then exponent-law decay.
pub fn pathloss_gain(distance: f64, topology: &Topology, antenna_gain_dbi: f64) -> Result<f64> {
    if !(distance >= topology.d_ref) {
        return Err(Error::InsideReferenceRadius {
            distance,
            d_ref: topology.d_ref,
        });
    }
    let k0 = (SPEED_OF_LIGHT / (4.0 * PI * topology.carrier_hz * topology.d_ref)).powi(2);
    Ok(10f64.powf(antenna_gain_dbi / 10.0)
        * k0
        * (distance / topology.d_ref).powf(-topology.pathloss_exponent))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    /// `F[k][i]`, primary station to PU k.
    pub f_direct: Array2<f64>,
    /// `F_ST[i]`, primary station to secondary station.
    pub f_relay_hop: Array1<f64>,
    /// `H[k][i]`, secondary station to PU k.
    pub h_st_pu: Array2<f64>,
    /// `G[j][i]`, secondary station to SU j.
    pub g_st_su: Array2<f64>,
}

impl ChannelState {
    pub fn zeros(num_pu: usize, num_su: usize, num_subcarriers: usize) -> Self {
        ChannelState {
            f_direct: Array2::zeros((num_pu, num_subcarriers)),
            f_relay_hop: Array1::zeros(num_subcarriers),
            h_st_pu: Array2::zeros((num_pu, num_subcarriers)),
            g_st_su: Array2::zeros((num_su, num_subcarriers)),
        }
    }

    /// `(K, J, N_F)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.f_direct.nrows(),
            self.g_st_su.nrows(),
            self.f_relay_hop.len(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (k, j, n) = self.dims();
        if self.f_direct.dim() != (k, n)
            || self.h_st_pu.dim() != (k, n)
            || self.g_st_su.dim() != (j, n)
        {
            return Err(Error::InvalidInstance(
                "channel array shapes disagree".into(),
            ));
        }
        let all = self
            .f_direct
            .iter()
            .chain(self.f_relay_hop.iter())
            .chain(self.h_st_pu.iter())
            .chain(self.g_st_su.iter());
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::InvalidInstance(format!(
                    "channel gain {v} is not finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub channels: ChannelState,
    pub p_max_pt: f64,
    pub p_max_st: f64,
    pub r_req: Vec<f64>,
    pub weight_pu: f64,
    pub weight_su: f64,
    /// Noise power the gains were normalized by; sets the default penalty.
    pub noise_w: f64,
}

impl ProblemInstance {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.channels.dims()
    }

    pub fn num_pu(&self) -> usize {
        self.channels.f_direct.nrows()
    }

    pub fn num_su(&self) -> usize {
        self.channels.g_st_su.nrows()
    }

    pub fn num_subcarriers(&self) -> usize {
        self.channels.f_relay_hop.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.channels.validate()?;
        if !(self.p_max_pt > 0.0
            && self.p_max_st > 0.0
            && self.p_max_pt.is_finite()
            && self.p_max_st.is_finite())
        {
            return Err(Error::InvalidInstance(
                "power budgets must be positive".into(),
            ));
        }
        if self.r_req.len() != self.num_pu() {
            return Err(Error::InvalidInstance(
                "one QoS target per PU required".into(),
            ));
        }
        if self.r_req.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::InvalidInstance(
                "QoS targets must be nonnegative".into(),
            ));
        }
        if !(self.weight_pu >= 0.0 && self.weight_su >= 0.0) {
            return Err(Error::InvalidInstance("weights must be nonnegative".into()));
        }
        if !(self.noise_w > 0.0) {
            return Err(Error::InvalidInstance(
                "noise power must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (k, j, n) = self.dims();
        let mut out = format!(
            "crnoma-instance v1 K={k} J={j} NF={n} p_max_pt={:.16e} p_max_st={:.16e} weight_pu={:.16e} weight_su={:.16e} noise_w={:.16e}\n",
            self.p_max_pt, self.p_max_st, self.weight_pu, self.weight_su, self.noise_w
        );
        textio::push_array(&mut out, "r_req", &self.r_req);
        textio::push_array(&mut out, "f_direct", &self.channels.f_direct);
        textio::push_array(&mut out, "f_relay_hop", &self.channels.f_relay_hop);
        textio::push_array(&mut out, "h_st_pu", &self.channels.h_st_pu);
        textio::push_array(&mut out, "g_st_su", &self.channels.g_st_su);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = textio::parse_header(lines.next().unwrap_or_default(), "crnoma-instance")?;
        let k: usize = textio::header_value(&header, "K")?;
        let j: usize = textio::header_value(&header, "J")?;
        let n: usize = textio::header_value(&header, "NF")?;
        let mut arrays = textio::parse_arrays(lines)?;
        let shape = |v: Vec<f64>, rows: usize| {
            Array2::from_shape_vec((rows, n), v).map_err(|e| Error::Parse(e.to_string()))
        };
        let instance = ProblemInstance {
            channels: ChannelState {
                f_direct: shape(textio::take_array(&mut arrays, "f_direct", k * n)?, k)?,
                f_relay_hop: Array1::from(textio::take_array(&mut arrays, "f_relay_hop", n)?),
                h_st_pu: shape(textio::take_array(&mut arrays, "h_st_pu", k * n)?, k)?,
                g_st_su: shape(textio::take_array(&mut arrays, "g_st_su", j * n)?, j)?,
            },
            p_max_pt: textio::header_value(&header, "p_max_pt")?,
            p_max_st: textio::header_value(&header, "p_max_st")?,
            r_req: textio::take_array(&mut arrays, "r_req", k)?,
            weight_pu: textio::header_value(&header, "weight_pu")?,
            weight_su: textio::header_value(&header, "weight_su")?,
            noise_w: textio::header_value(&header, "noise_w")?,
        };
        instance.validate()?;
        Ok(instance)
    }
}

/// Budgets, weights and QoS applied on top of the drawn channels.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOverrides {
    pub p_max_pt: f64,
    pub p_max_st: f64,
    pub r_req: f64,
    pub weight_pu: f64,
    pub weight_su: f64,
}

impl Default for InstanceOverrides {
    /// 40 dBm at both stations, 1 bit/s/Hz per PU, w = 2, μ = 1.
    fn default() -> Self {
        InstanceOverrides {
            p_max_pt: dbm_to_watts(40.0),
            p_max_st: dbm_to_watts(40.0),
            r_req: 1.0,
            weight_pu: 2.0,
            weight_su: 1.0,
        }
    }
}

/// Draws i.i.d. unit-mean Rayleigh power gains for every link and
/// normalizes by the receiver noise.
///
/// Link gains use the transmitting station's antenna gain.
pub fn generate_instance(
    topology: &Topology,
    layout: &UserLayout,
    seed: u64,
    overrides: &InstanceOverrides,
) -> Result<ProblemInstance> {
    topology.validate()?;
    let (k, j, n) = (topology.num_pu, topology.num_su, topology.num_subcarriers);
    if layout.pu_distance.len() != k
        || layout.pu_distance_st.len() != k
        || layout.su_distance.len() != j
    {
        return Err(Error::InvalidInstance(
            "layout does not match topology".into(),
        ));
    }
    let sigma2 = topology.noise_watts();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[FADING_STREAM]));
    let mut draw = |gamma: f64| -> f64 {
        let h2: f64 = Exp1.sample(&mut rng);
        gamma * h2 / sigma2
    };

    let mut channels = ChannelState::zeros(k, j, n);
    for kk in 0..k {
        let gamma = pathloss_gain(layout.pu_distance[kk], topology, topology.gain_pt_dbi)?;
        for i in 0..n {
            channels.f_direct[[kk, i]] = draw(gamma);
        }
    }
    let gamma_relay = pathloss_gain(topology.distance_pt_st, topology, topology.gain_pt_dbi)?;
    for i in 0..n {
        channels.f_relay_hop[i] = draw(gamma_relay);
    }
    for kk in 0..k {
        let gamma = pathloss_gain(layout.pu_distance_st[kk], topology, topology.gain_st_dbi)?;
        for i in 0..n {
            channels.h_st_pu[[kk, i]] = draw(gamma);
        }
    }
    for jj in 0..j {
        let gamma = pathloss_gain(layout.su_distance[jj], topology, topology.gain_st_dbi)?;
        for i in 0..n {
            channels.g_st_su[[jj, i]] = draw(gamma);
        }
    }

    let instance = ProblemInstance {
        channels,
        p_max_pt: overrides.p_max_pt,
        p_max_st: overrides.p_max_st,
        r_req: vec![overrides.r_req; k],
        weight_pu: overrides.weight_pu,
        weight_su: overrides.weight_su,
        noise_w: sigma2,
    };
    instance.validate()?;
    Ok(instance)
}

/// Layout and fading from a single seed (the streams are split internally).
pub fn random_instance(
    topology: &Topology,
    seed: u64,
    overrides: &InstanceOverrides,
) -> Result<ProblemInstance> {
    let layout = generate_layout(topology, seed);
    generate_instance(topology, &layout, seed, overrides)
}

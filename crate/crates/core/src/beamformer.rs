//! Filter-and-sum beamforming: array geometry, steering vectors, diffuse-noise
//! coherence, superdirective (MVDR) weights and the learnable multi-direction
//! neural beamformer.
//!
//! Complex filters follow `Y(w) = sum_i H_i(w) F_i(w)` with no conjugation, so
//! an MVDR weight vector `w` is applied as `H = conj(w)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, ParamStore, Var};
use crate::error::{Error, Result};
use crate::features::ComplexSpectrogram;
use crate::tensor::Tensor;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

/// Matrices with a larger condition estimate are treated as singular.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    mic_positions: Vec<[f64; 3]>,
    speed_of_sound: f64,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>, speed_of_sound: f64) -> Result<Self> {
        if mic_positions.len() < 2 {
            return Err(Error::invalid("geometry", "at least two microphones are required"));
        }
        if !(speed_of_sound > 0.0) {
            return Err(Error::invalid("geometry", "speed of sound must be positive"));
        }
        for (i, a) in mic_positions.iter().enumerate() {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("geometry", format!("mic {i} has a non-finite coordinate")));
            }
            for (j, b) in mic_positions.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(Error::invalid("geometry", format!("mics {i} and {j} share a position")));
                }
            }
        }
        Ok(Self {
            mic_positions,
            speed_of_sound,
        })
    }

    /// `ring` mics equispaced on a horizontal circle (mic `k` at azimuth
    /// `2*pi*k/ring`), optionally followed by one mic at the center.
    pub fn circular(radius: f64, ring: usize, center: bool, speed_of_sound: f64) -> Result<Self> {
        let mut pos: Vec<[f64; 3]> = (0..ring)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
                [radius * a.cos(), radius * a.sin(), 0.0]
            })
            .collect();
        if center {
            pos.push([0.0; 3]);
        }
        Self::new(pos, speed_of_sound)
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.mic_positions
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn subarray(&self, picks: &[usize]) -> Result<Self> {
        let pos = picks
            .iter()
            .map(|&i| {
                self.mic_positions
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid("geometry", format!("mic {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Self::new(pos, self.speed_of_sound)
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid(&self.mic_positions)
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.mic_positions[i], self.mic_positions[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// Plane-wave arrival time at each mic relative to the array centroid, in
    /// seconds. Mics closer to the source have negative delay.
    pub fn delays(&self, direction: &LookingDirection) -> Vec<f64> {
        delays(&self.mic_positions, self.speed_of_sound, direction)
    }
}

/// Serializable description of a circular array and the microphone pair the
/// front-ends consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Ring radius in meters.
    pub radius: f64,
    pub ring: usize,
    pub center: bool,
    pub speed_of_sound: f64,
    /// Picked microphones, in input channel order.
    pub pair: Vec<usize>,
}

impl Default for GeometryConfig {
    /// Six mics on a 4.25 cm circle plus one at the center; the picked pair is
    /// the diagonal (azimuth 0 and pi).
    fn default() -> Self {
        Self {
            radius: 0.0425,
            ring: 6,
            center: true,
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
            pair: vec![0, 3],
        }
    }
}

impl GeometryConfig {
    pub fn full(&self) -> Result<ArrayGeometry> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::config("geometry.radius", "must be positive"));
        }
        ArrayGeometry::circular(self.radius, self.ring, self.center, self.speed_of_sound)
            .map_err(|e| Error::config("geometry", e.to_string()))
    }

    pub fn picked(&self) -> Result<ArrayGeometry> {
        self.full()?
            .subarray(&self.pair)
            .map_err(|e| Error::config("geometry.pair", e.to_string()))
    }
}

fn centroid(pos: &[[f64; 3]]) -> [f64; 3] {
    let n = pos.len() as f64;
    let mut c = [0.0; 3];
    for p in pos {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    c
}

fn delays(pos: &[[f64; 3]], c: f64, direction: &LookingDirection) -> Vec<f64> {
    let u = direction.unit_vector();
    let m = centroid(pos);
    pos.iter()
        .map(|p| -((p[0] - m[0]) * u[0] + (p[1] - m[1]) * u[1] + (p[2] - m[2]) * u[2]) / c)
        .collect()
}

/// Far-field source direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookingDirection {
    pub azimuth: f64,
    pub elevation: f64,
}

impl LookingDirection {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        let tau = 2.0 * std::f64::consts::PI;
        if !(0.0..tau).contains(&azimuth) {
            return Err(Error::invalid("direction", format!("azimuth {azimuth} outside [0, 2pi)")));
        }
        if !(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2).contains(&elevation) {
            return Err(Error::invalid("direction", format!("elevation {elevation} outside [-pi/2, pi/2]")));
        }
        Ok(Self { azimuth, elevation })
    }

    /// Any azimuth, wrapped into `[0, 2pi)`, at zero elevation.
    pub fn horizontal(azimuth: f64) -> Self {
        let tau = 2.0 * std::f64::consts::PI;
        let a = azimuth.rem_euclid(tau);
        Self {
            azimuth: if a >= tau { 0.0 } else { a },
            elevation: 0.0,
        }
    }

    /// `count` horizontal directions at azimuths `k * 2pi / count`.
    pub fn equispaced(count: usize) -> Vec<Self> {
        (0..count)
            .map(|k| Self::horizontal(2.0 * std::f64::consts::PI * k as f64 / count as f64))
            .collect()
    }

    /// Unit vector pointing from the array towards the source.
    pub fn unit_vector(&self) -> [f64; 3] {
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        [ce * self.azimuth.cos(), ce * self.azimuth.sin(), se]
    }
}

/// `d_i = exp(-j 2 pi f tau_i)`.
pub fn steering_vector(geometry: &ArrayGeometry, direction: &LookingDirection, freq: f64) -> Vec<Complex64> {
    steering_from_delays(&geometry.delays(direction), freq)
}

/// Same as [`steering_vector`] for raw positions; coincident mics are allowed.
pub fn steering_vector_at(positions: &[[f64; 3]], speed_of_sound: f64, direction: &LookingDirection, freq: f64) -> Vec<Complex64> {
    steering_from_delays(&delays(positions, speed_of_sound, direction), freq)
}

fn steering_from_delays(delays: &[f64], freq: f64) -> Vec<Complex64> {
    delays
        .iter()
        .map(|&tau| Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * freq * tau))
        .collect()
}

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Spherically diffuse noise coherence `sinc(2 f |m_i - m_j| / c)`.
pub fn diffuse_coherence(geometry: &ArrayGeometry, freq: f64) -> DMatrix<f64> {
    let n = geometry.num_mics();
    let c = geometry.speed_of_sound();
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { sinc(2.0 * freq * geometry.distance(i, j) / c) })
}

/// Largest over smallest absolute eigenvalue of a symmetric matrix.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|x| x.abs()).collect();
    let max = abs.iter().cloned().fold(0.0, f64::max);
    let min = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// MVDR weights `w = (G + dI)^-1 d / (d^H (G + dI)^-1 d)` for a real symmetric
/// noise coherence `G` and diagonal loading `d`.
pub fn superdirective_weights(coherence: &DMatrix<f64>, steering: &[Complex64], loading: f64) -> Result<Vec<Complex64>> {
    let n = steering.len();
    if coherence.nrows() != n || coherence.ncols() != n {
        return Err(Error::ShapeMismatch {
            op: "superdirective_weights",
            left: vec![coherence.nrows(), coherence.ncols()],
            right: vec![n],
        });
    }
    if !(loading >= 0.0) {
        return Err(Error::invalid("superdirective_weights", "diagonal loading must be non-negative"));
    }
    let a = coherence + DMatrix::identity(n, n) * loading;
    let condition = condition_estimate(&a);
    if !(condition < MAX_CONDITION) {
        return Err(Error::SingularMatrix { condition });
    }
    let chol = a.cholesky().ok_or(Error::SingularMatrix { condition })?;
    let re = chol.solve(&DVector::from_iterator(n, steering.iter().map(|z| z.re)));
    let im = chol.solve(&DVector::from_iterator(n, steering.iter().map(|z| z.im)));
    let x: Vec<Complex64> = (0..n).map(|i| Complex64::new(re[i], im[i])).collect();
    let denom: Complex64 = steering.iter().zip(&x).map(|(d, xi)| d.conj() * xi).sum();
    Ok(x.iter().map(|xi| xi / denom).collect())
}

/// Delay-and-sum weights `d / N`.
pub fn delay_and_sum_weights(steering: &[Complex64]) -> Vec<Complex64> {
    let n = steering.len() as f64;
    steering.iter().map(|d| d / n).collect()
}

/// `w^H d`.
pub fn response(weights: &[Complex64], steering: &[Complex64]) -> Complex64 {
    weights.iter().zip(steering).map(|(w, d)| w.conj() * d).sum()
}

/// Applies per-bin filters `h[b][i]` to per-channel spectrograms:
/// `Y[t,b] = sum_i h[b][i] F_i[t,b]`.
pub fn apply_beamformer(h: &[Vec<Complex64>], spectrograms: &[ComplexSpectrogram]) -> Result<ComplexSpectrogram> {
    let first = spectrograms.first().ok_or_else(|| Error::invalid("apply_beamformer", "no input channels"))?;
    let (frames, bins) = (first.num_frames(), first.num_bins());
    let n = spectrograms.len();
    if h.len() != bins || h.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch {
            op: "apply_beamformer",
            left: vec![h.len(), h.first().map_or(0, Vec::len)],
            right: vec![bins, n],
        });
    }
    if spectrograms.iter().any(|s| s.frames.shape() != first.frames.shape()) {
        return Err(Error::invalid("apply_beamformer", "channel spectrograms differ in shape"));
    }
    let mut out = Vec::with_capacity(frames * bins * 2);
    for t in 0..frames {
        for (b, hb) in h.iter().enumerate() {
            let y: Complex64 = hb.iter().zip(spectrograms).map(|(hi, s)| hi * s.get(t, b)).sum();
            out.push(y.re);
            out.push(y.im);
        }
    }
    Ok(ComplexSpectrogram {
        frames: Tensor::new(&[frames, bins, 2], out)?,
        bin_freqs: first.bin_freqs.clone(),
        frame_shift: first.frame_shift,
    })
}

/// Superdirective filters (`H = conj(w)`) for every direction and bin.
pub fn superdirective_filters(
    geometry: &ArrayGeometry,
    directions: &[LookingDirection],
    bin_freqs: &[f64],
    loading: f64,
) -> Result<Vec<Vec<Vec<Complex64>>>> {
    directions
        .iter()
        .map(|dir| {
            bin_freqs
                .iter()
                .map(|&f| {
                    let g = diffuse_coherence(geometry, f);
                    let d = steering_vector(geometry, dir, f);
                    let w = superdirective_weights(&g, &d, loading)?;
                    Ok(w.iter().map(|z| z.conj()).collect())
                })
                .collect()
        })
        .collect()
}

/// Parameter names of the neural beamformer.
pub mod names {
    pub const FILTERS: &str = "nb.filters";
    pub const COMBINER: &str = "nb.combiner.weight";
    pub const COMBINER_BIAS: &str = "nb.combiner.bias";
}

/// Learnable filters for `D` looking directions plus the convolution that
/// combines the direction streams into one.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    /// `[D, B, N, 2]`
    pub filters: Tensor,
    /// `[1, D, kt, kf]`
    pub combiner: Tensor,
    /// `[1]`
    pub combiner_bias: Tensor,
    pub trainable: bool,
}

impl BeamformerWeights {
    /// Superdirective filters for each direction; the combiner selects
    /// direction `look_index` so the initial model is the classical beamformer
    /// steered there.
    pub fn superdirective(
        geometry: &ArrayGeometry,
        directions: &[LookingDirection],
        bin_freqs: &[f64],
        loading: f64,
        combiner_kernel: (usize, usize),
        look_index: usize,
    ) -> Result<Self> {
        if look_index >= directions.len() {
            return Err(Error::invalid("beamformer", format!("look index {look_index} out of range")));
        }
        let filters = superdirective_filters(geometry, directions, bin_freqs, loading)?;
        let (d, b, n) = (directions.len(), bin_freqs.len(), geometry.num_mics());
        let mut data = Vec::with_capacity(d * b * n * 2);
        for dir in &filters {
            for bin in dir {
                for z in bin {
                    data.extend([z.re, z.im]);
                }
            }
        }
        let (kt, kf) = combiner_kernel;
        let mut combiner = Tensor::zeros(&[1, d, kt, kf]);
        combiner.data_mut()[(look_index * kt + kt / 2) * kf + kf / 2] = 1.0;
        Ok(Self {
            filters: Tensor::new(&[d, b, n, 2], data)?,
            combiner,
            combiner_bias: Tensor::zeros(&[1]),
            trainable: true,
        })
    }

    pub fn insert_into(self, params: &mut ParamStore) {
        params.insert(names::FILTERS, self.filters);
        params.insert(names::COMBINER, self.combiner);
        params.insert(names::COMBINER_BIAS, self.combiner_bias);
    }

    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let get = |n: &str| params.get(n).cloned().ok_or_else(|| Error::MissingParam(n.to_string()));
        Ok(Self {
            filters: get(names::FILTERS)?,
            combiner: get(names::COMBINER)?,
            combiner_bias: get(names::COMBINER_BIAS)?,
            trainable: true,
        })
    }
}

/// Per-direction filter-and-sum outputs `[D, M, B, 2]` for multichannel
/// spectra `[M, B, N, 2]`.
pub fn direction_streams(g: &mut Graph, params: &ParamStore, spectra: Var) -> Result<Var> {
    let h = g.param_from(params, names::FILTERS)?;
    g.complex_filter_sum(h, spectra)
}

/// Neural beamformer: per-direction filter-and-sum, then a trainable
/// convolution over the direction streams (as input channels, with the real
/// and imaginary parts as two batch items). Returns `[M, B, 2]`.
pub fn neural_beamformer_forward(g: &mut Graph, params: &ParamStore, spectra: Var) -> Result<Var> {
    let streams = direction_streams(g, params, spectra)?;
    let kernel = g.param_from(params, names::COMBINER)?;
    let bias = g.param_from(params, names::COMBINER_BIAS)?;
    // [D, M, B, 2] -> [2, D, M, B]
    let x = g.permute(streams, &[3, 0, 1, 2])?;
    let y = g.conv2d(x, kernel, Some(bias), (1, 1), Padding::Same)?;
    // [2, 1, M, B] -> [M, B, 2, 1]
    let y = g.permute(y, &[2, 3, 0, 1])?;
    let s = g.shape(y).to_vec();
    g.reshape(y, &s[..3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use std::f64::consts::PI;

    fn pair(spacing: f64) -> ArrayGeometry {
        ArrayGeometry::new(vec![[0.0; 3], [spacing, 0.0, 0.0]], DEFAULT_SPEED_OF_SOUND).unwrap()
    }

    #[test]
    fn steering_at_dc_is_ones() {
        let g = ArrayGeometry::circular(0.0425, 6, true, 343.0).unwrap();
        for z in steering_vector(&g, &LookingDirection::horizontal(1.0), 0.0) {
            assert_eq!(z, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn coincident_mics_have_unit_steering() {
        let pos = vec![[0.0; 3]; 3];
        for z in steering_vector_at(&pos, 343.0, &LookingDirection::horizontal(0.3), 1234.0) {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn endfire_phase_difference() {
        let d = steering_vector(&pair(0.05), &LookingDirection::horizontal(0.0), 1000.0);
        let phase = (d[1] / d[0]).arg();
        // mic 1 is closer to an endfire source on +x, so its phase leads.
        let expected = 2.0 * PI * 1000.0 * 0.05 / 343.0;
        assert!((phase - expected).abs() < 1e-12);
        assert!((expected - 0.916).abs() < 1e-3);
        assert!(d.iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn coherence_properties() {
        let g = pair(0.05);
        let dc = diffuse_coherence(&g, 0.0);
        assert!(dc.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let f = 343.0 / (2.0 * 0.05);
        let m = diffuse_coherence(&g, f);
        assert_eq!(m[(0, 0)], 1.0);
        assert!(m[(0, 1)].abs() < 1e-15);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
    }

    #[test]
    fn identity_coherence_gives_scaled_steering() {
        let g = ArrayGeometry::circular(0.0425, 6, true, 343.0).unwrap();
        let d = steering_vector(&g, &LookingDirection::horizontal(2.0), 2500.0);
        let w = superdirective_weights(&DMatrix::identity(7, 7), &d, 0.0).unwrap();
        for (wi, di) in w.iter().zip(&d) {
            assert!((wi - di / 7.0).norm() < 1e-12);
        }
        assert_eq!(delay_and_sum_weights(&d), d.iter().map(|z| z / 7.0).collect::<Vec<_>>());
    }

    #[test]
    fn unloaded_dc_coherence_is_singular() {
        let g = pair(0.05);
        let d = steering_vector(&g, &LookingDirection::horizontal(0.0), 0.0);
        let err = superdirective_weights(&diffuse_coherence(&g, 0.0), &d, 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularMatrix { .. }));
    }

    #[test]
    fn channel_zero_selector_is_identity() {
        let spec = |seed: f64| ComplexSpectrogram {
            frames: Tensor::from_fn(&[3, 4, 2], |i| (i as f64 * seed).sin()),
            bin_freqs: vec![0.0, 1.0, 2.0, 3.0],
            frame_shift: 0.01,
        };
        let chans = vec![spec(0.3), spec(0.7)];
        let h = vec![vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]; 4];
        let y = apply_beamformer(&h, &chans).unwrap();
        assert_eq!(y.frames, chans[0].frames);
    }

    #[test]
    fn apply_beamformer_shape_mismatch() {
        let spec = ComplexSpectrogram {
            frames: Tensor::zeros(&[2, 4, 2]),
            bin_freqs: vec![0.0; 4],
            frame_shift: 0.01,
        };
        let h = vec![vec![Complex64::new(1.0, 0.0); 3]; 4];
        assert!(apply_beamformer(&h, &[spec.clone(), spec]).is_err());
    }

    #[test]
    fn missing_weights_are_reported() {
        let mut g = Graph::new(Precision::F64);
        let x = g.input(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        let err = neural_beamformer_forward(&mut g, &ParamStore::new(), x).unwrap_err();
        assert!(matches!(err, Error::MissingParam(_)));
    }

    #[test]
    fn direction_validation() {
        assert!(LookingDirection::new(2.0 * PI, 0.0).is_err());
        assert!(LookingDirection::new(0.0, 2.0).is_err());
        assert!(LookingDirection::new(6.0, -1.0).is_ok());
        let dirs = LookingDirection::equispaced(7);
        assert_eq!(dirs.len(), 7);
        assert!((dirs[1].azimuth - 2.0 * PI / 7.0).abs() < 1e-15);
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new(vec![[0.0; 3]], 343.0).is_err());
        assert!(ArrayGeometry::new(vec![[0.0; 3], [0.0; 3]], 343.0).is_err());
        let g = ArrayGeometry::circular(0.0425, 6, true, 343.0).unwrap();
        assert_eq!(g.num_mics(), 7);
        assert!((g.distance(0, 3) - 0.085).abs() < 1e-12);
        assert!(g.centroid().iter().all(|c| c.abs() < 1e-15));
    }
}

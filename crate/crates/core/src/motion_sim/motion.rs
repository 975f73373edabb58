//! Motion trajectories over the phase-encode axis and their severity labels.

use std::fmt;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AffineParams;
use crate::error::{Error, Result};

/// Integer motion severity class: 0 is motion-free, 10 the most severe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SeverityLabel(u8);

impl SeverityLabel {
    pub const MAX: u8 = 10;
    /// Number of distinct labels.
    pub const COUNT: usize = Self::MAX as usize + 1;

    pub fn new(y: u8) -> Result<Self> {
        if y > Self::MAX {
            return Err(Error::Contract(format!(
                "severity label {y} outside valid range 0-{}",
                Self::MAX
            )));
        }
        Ok(Self(y))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = SeverityLabel> {
        (0..=Self::MAX).map(SeverityLabel)
    }
}

impl TryFrom<u8> for SeverityLabel {
    type Error = Error;

    fn try_from(y: u8) -> Result<Self> {
        Self::new(y)
    }
}

impl From<SeverityLabel> for u8 {
    fn from(y: SeverityLabel) -> u8 {
        y.0
    }
}

impl fmt::Display for SeverityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Maps a motion amplitude (degrees or mm) to its severity class by rounding
/// half up. Amplitudes above 10 are clamped.
pub fn label_from_amplitude(amplitude: f64) -> Result<SeverityLabel> {
    if amplitude.is_nan() || amplitude < 0.0 {
        return Err(Error::Parameter(format!(
            "motion amplitude {amplitude} must be non-negative"
        )));
    }
    let max = f64::from(SeverityLabel::MAX);
    let a = if amplitude > max {
        warn!("motion amplitude {amplitude} above {max}, clamped");
        max
    } else {
        amplitude
    };
    SeverityLabel::new((a + 0.5).floor() as u8)
}

/// A piecewise-constant motion trajectory over k-space acquisition.
///
/// Phase-encode lines are indexed in acquisition order over the centered
/// spectrum (line `rows / 2` carries the DC row). Segment `s` covers lines
/// `segment_bounds[s]..segment_bounds[s + 1]` and was acquired while the
/// subject sat in `states[segment_states[s]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMotionSpec")]
pub struct MotionSpec {
    states: Vec<AffineParams>,
    segment_bounds: Vec<usize>,
    segment_states: Vec<usize>,
    amplitude: f64,
}

#[derive(Deserialize)]
struct RawMotionSpec {
    states: Vec<AffineParams>,
    segment_bounds: Vec<usize>,
    segment_states: Vec<usize>,
    #[serde(default)]
    #[allow(dead_code)]
    amplitude: Option<f64>,
}

impl TryFrom<RawMotionSpec> for MotionSpec {
    type Error = Error;

    fn try_from(raw: RawMotionSpec) -> Result<Self> {
        MotionSpec::new(raw.states, raw.segment_bounds, raw.segment_states)
    }
}

impl MotionSpec {
    pub fn new(
        states: Vec<AffineParams>,
        segment_bounds: Vec<usize>,
        segment_states: Vec<usize>,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Contract(
                "motion spec needs at least one state".into(),
            ));
        }
        if !states[0].is_identity() {
            return Err(Error::Contract(
                "first motion state must be the identity".into(),
            ));
        }
        for s in &states {
            s.validate()?;
        }
        if segment_bounds.len() < 2 || segment_bounds[0] != 0 {
            return Err(Error::Contract(format!(
                "segment bounds {segment_bounds:?} must start at 0 and delimit at least one segment"
            )));
        }
        if segment_bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "segment bounds {segment_bounds:?} must be strictly increasing"
            )));
        }
        if segment_states.len() != segment_bounds.len() - 1 {
            return Err(Error::Contract(format!(
                "{} segments but {} segment states",
                segment_bounds.len() - 1,
                segment_states.len()
            )));
        }
        if let Some(bad) = segment_states.iter().find(|&&s| s >= states.len()) {
            return Err(Error::Contract(format!(
                "segment refers to state {bad}, only {} states",
                states.len()
            )));
        }
        let amplitude = states
            .iter()
            .map(AffineParams::amplitude)
            .fold(0.0, f64::max);
        Ok(Self {
            states,
            segment_bounds,
            segment_states,
            amplitude,
        })
    }

    /// The motion-free trajectory over `rows` phase-encode lines.
    pub fn identity(rows: usize) -> Result<Self> {
        Self::new(vec![AffineParams::identity()], vec![0, rows], vec![0])
    }

    pub fn states(&self) -> &[AffineParams] {
        &self.states
    }

    pub fn segment_bounds(&self) -> &[usize] {
        &self.segment_bounds
    }

    pub fn segment_states(&self) -> &[usize] {
        &self.segment_states
    }

    /// Max over states of the largest absolute rotation/translation component.
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Number of phase-encode lines covered.
    pub fn rows(&self) -> usize {
        *self.segment_bounds.last().expect("validated non-empty")
    }

    /// `(line range, state)` for every segment.
    pub fn segments(&self) -> impl Iterator<Item = (std::ops::Range<usize>, &AffineParams)> {
        self.segment_bounds
            .windows(2)
            .zip(&self.segment_states)
            .map(|(w, &s)| (w[0]..w[1], &self.states[s]))
    }

    pub fn is_identity(&self) -> bool {
        self.states.iter().all(AffineParams::is_identity)
    }
}

/// Draws a random trajectory of `n_states` contiguous k-space blocks whose
/// amplitude rounds to `y`.
///
/// For `y >= 1` a shared window `a ~ U[y - 0.5, min(y + 0.5, 10))` is drawn
/// and every non-identity component is drawn from `U[-a, a]`; one randomly
/// chosen component is then pinned to `±a` so the trajectory amplitude is
/// exactly `a`.
pub fn sample_motion_spec<R: Rng + ?Sized>(
    y: SeverityLabel,
    n_states: usize,
    rows: usize,
    rng: &mut R,
) -> Result<MotionSpec> {
    if n_states == 0 {
        return Err(Error::Configuration("n_states must be at least 1".into()));
    }
    if n_states > rows {
        return Err(Error::Configuration(format!(
            "{n_states} motion states cannot share {rows} phase-encode rows"
        )));
    }
    if y.value() > 0 && n_states < 2 {
        return Err(Error::Configuration(format!(
            "severity {y} needs at least 2 motion states; state 0 is always the identity"
        )));
    }

    let bounds = random_partition(rows, n_states, rng);
    let segment_states = (0..n_states).collect();

    let mut states = vec![AffineParams::identity()];
    if y.value() == 0 {
        states.resize(n_states, AffineParams::identity());
        return MotionSpec::new(states, bounds, segment_states);
    }

    let yf = f64::from(y.value());
    let hi = (yf + 0.5).min(f64::from(SeverityLabel::MAX));
    let a = if hi > yf - 0.5 {
        rng.gen_range(yf - 0.5..hi)
    } else {
        hi
    };
    let draw = |rng: &mut R| rng.gen_range(-a..=a);
    for _ in 1..n_states {
        states.push(AffineParams {
            rotation_deg: draw(rng),
            translation_mm: (draw(rng), draw(rng)),
        });
    }
    let pinned_state = rng.gen_range(1..n_states);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let s = &mut states[pinned_state];
    match rng.gen_range(0..3) {
        0 => s.rotation_deg = sign * a,
        1 => s.translation_mm.0 = sign * a,
        _ => s.translation_mm.1 = sign * a,
    }
    MotionSpec::new(states, bounds, segment_states)
}

/// Splits `0..rows` into `parts` non-empty contiguous blocks at random cuts.
fn random_partition<R: Rng + ?Sized>(rows: usize, parts: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts = rand::seq::index::sample(rng, rows - 1, parts - 1).into_vec();
    cuts.iter_mut().for_each(|c| *c += 1);
    cuts.sort_unstable();
    let mut bounds = Vec::with_capacity(parts + 1);
    bounds.push(0);
    bounds.extend(cuts);
    bounds.push(rows);
    bounds
}

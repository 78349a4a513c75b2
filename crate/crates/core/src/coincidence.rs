//! Time tags, detection windows, delay histograms, g²(0) and two-photon
//! interference visibility.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interferometer::{Detector, Window};

#[derive(Debug, Error)]
pub enum CoincidenceError {
    #[error("malformed time-tag row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("undefined estimate: {0}")]
    Undefined(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoincidenceError>;

/// One detector click; `time_ns` is relative to the start of its repetition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeTag {
    pub detector: Detector,
    pub time_ns: f64,
    pub repetition: u64,
}

/// Gated detection windows relative to the early excitation at `early_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeWindows {
    pub early_ns: f64,
    pub separation_ns: f64,
    pub width_ns: f64,
    pub readout_start_ns: f64,
    pub readout_width_ns: f64,
}

impl Default for TimeWindows {
    fn default() -> Self {
        Self {
            early_ns: 0.0,
            separation_ns: 11.8,
            width_ns: 2.0,
            readout_start_ns: 0.0,
            readout_width_ns: 50.0,
        }
    }
}

impl TimeWindows {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_ns > 0.0 && self.width_ns <= self.separation_ns) {
            return Err(CoincidenceError::Invalid(format!(
                "window width {} ns must be positive and not exceed the separation {} ns",
                self.width_ns, self.separation_ns
            )));
        }
        if self.readout_width_ns <= 0.0 {
            return Err(CoincidenceError::Invalid("readout window must be positive".into()));
        }
        Ok(())
    }

    pub fn start_ns(&self, window: Window) -> f64 {
        match window {
            Window::Early => self.early_ns,
            Window::Middle => self.early_ns + self.separation_ns,
            Window::Late => self.early_ns + 2.0 * self.separation_ns,
            Window::Readout => self.readout_start_ns,
        }
    }

    pub fn width(&self, window: Window) -> f64 {
        if window == Window::Readout {
            self.readout_width_ns
        } else {
            self.width_ns
        }
    }

    pub fn classify(&self, time_ns: f64) -> Option<Window> {
        [Window::Early, Window::Middle, Window::Late, Window::Readout]
            .into_iter()
            .find(|&w| {
                let s = self.start_ns(w);
                time_ns >= s && time_ns < s + self.width(w)
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_start_ns: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["bin_start_ns", "count"])?;
        for (s, c) in self.bin_start_ns.iter().zip(&self.counts) {
            wr.write_record([format!("{s}"), c.to_string()])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Histogram of tag arrival times within the repetition, over `[0, max_time)`.
pub fn time_histogram(tags: &[TimeTag], bin_width_ns: f64, max_time_ns: f64) -> Result<Histogram> {
    if !(bin_width_ns > 0.0 && max_time_ns > 0.0) {
        return Err(CoincidenceError::Invalid("bin width and range must be positive".into()));
    }
    let n_bins = (max_time_ns / bin_width_ns).ceil() as usize;
    let mut counts = vec![0u64; n_bins];
    for t in tags {
        if t.time_ns >= 0.0 && t.time_ns < max_time_ns {
            counts[((t.time_ns / bin_width_ns).floor() as usize).min(n_bins - 1)] += 1;
        }
    }
    Ok(Histogram {
        bin_start_ns: (0..n_bins).map(|b| b as f64 * bin_width_ns).collect(),
        counts,
    })
}

/// Histogram of `t(D2) − t(D1)` over absolute times `rep · period + t`,
/// for delays in `[-max_delay, max_delay)`.
pub fn delay_histogram(
    tags: &[TimeTag],
    period_ns: f64,
    bin_width_ns: f64,
    max_delay_ns: f64,
) -> Result<Histogram> {
    if !(bin_width_ns > 0.0 && max_delay_ns > 0.0 && period_ns > 0.0) {
        return Err(CoincidenceError::Invalid(
            "bin width, range and period must be positive".into(),
        ));
    }
    let n_bins = (2.0 * max_delay_ns / bin_width_ns).ceil() as usize;
    let mut counts = vec![0u64; n_bins];
    let abs = |t: &TimeTag| t.repetition as f64 * period_ns + t.time_ns;
    let mut d1: Vec<f64> = tags.iter().filter(|t| t.detector == Detector::D1).map(abs).collect();
    let mut d2: Vec<f64> = tags.iter().filter(|t| t.detector == Detector::D2).map(abs).collect();
    d1.sort_by(f64::total_cmp);
    d2.sort_by(f64::total_cmp);
    let mut lo = 0;
    for &t1 in &d1 {
        while lo < d2.len() && d2[lo] < t1 - max_delay_ns {
            lo += 1;
        }
        let mut k = lo;
        while k < d2.len() && d2[k] < t1 + max_delay_ns {
            let bin = ((d2[k] - t1 + max_delay_ns) / bin_width_ns).floor() as usize;
            if bin < n_bins {
                counts[bin] += 1;
            }
            k += 1;
        }
    }
    Ok(Histogram {
        bin_start_ns: (0..n_bins)
            .map(|b| -max_delay_ns + b as f64 * bin_width_ns)
            .collect(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct G2Result {
    pub g2: f64,
    pub sigma: f64,
    pub zero_delay: u64,
    pub side_mean: f64,
    pub side_peaks: usize,
}

fn reps_with(tags: &[TimeTag], windows: &TimeWindows, window: Window, det: Detector) -> HashSet<u64> {
    tags.iter()
        .filter(|t| t.detector == det && windows.classify(t.time_ns) == Some(window))
        .map(|t| t.repetition)
        .collect()
}

/// g²(0) from D1–D2 coincidences inside one gated window: same-repetition
/// coincidences over the mean coincidences at repetition offsets
/// `±1..=±side_peaks`.
pub fn g2_zero(
    tags: &[TimeTag],
    windows: &TimeWindows,
    window: Window,
    side_peaks: usize,
) -> Result<G2Result> {
    if side_peaks == 0 {
        return Err(CoincidenceError::Invalid("need at least one side peak".into()));
    }
    let s1 = reps_with(tags, windows, window, Detector::D1);
    let s2 = reps_with(tags, windows, window, Detector::D2);
    let count = |k: i64| {
        s1.iter()
            .filter(|&&r| {
                let j = r as i64 + k;
                j >= 0 && s2.contains(&(j as u64))
            })
            .count() as u64
    };
    let zero = count(0);
    let side: u64 = (1..=side_peaks as i64).map(|k| count(k) + count(-k)).sum();
    let n_side = 2 * side_peaks;
    if side == 0 {
        return Err(CoincidenceError::Undefined(
            "no side-peak coincidences; g2 normalisation undefined".into(),
        ));
    }
    let mean = side as f64 / n_side as f64;
    let g2 = zero as f64 / mean;
    let rel = (1.0 / (zero.max(1) as f64) + 1.0 / side as f64).sqrt();
    Ok(G2Result {
        g2,
        sigma: g2.max(1.0 / mean) * rel,
        zero_delay: zero,
        side_mean: mean,
        side_peaks,
    })
}

/// Mean of the early- and late-window g²(0).
pub fn g2_zero_two_windows(tags: &[TimeTag], windows: &TimeWindows, side_peaks: usize) -> Result<G2Result> {
    let e = g2_zero(tags, windows, Window::Early, side_peaks)?;
    let l = g2_zero(tags, windows, Window::Late, side_peaks)?;
    Ok(G2Result {
        g2: 0.5 * (e.g2 + l.g2),
        sigma: 0.5 * (e.sigma.powi(2) + l.sigma.powi(2)).sqrt(),
        zero_delay: e.zero_delay + l.zero_delay,
        side_mean: 0.5 * (e.side_mean + l.side_mean),
        side_peaks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomResult {
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
    pub visibility: f64,
    pub sigma: f64,
}

/// Same-repetition D1–D2 coincidences with at least one click in the middle
/// window, split by delay into peaks at `−T`, `0`, `+T`;
/// `V = 1 − 2 N2 / (N1 + N3)`.
pub fn hom_visibility(tags: &[TimeTag], windows: &TimeWindows) -> Result<HomResult> {
    let mut by_rep: Vec<&TimeTag> = tags
        .iter()
        .filter(|t| matches!(windows.classify(t.time_ns), Some(Window::Early | Window::Middle | Window::Late)))
        .collect();
    by_rep.sort_by(|a, b| a.repetition.cmp(&b.repetition).then(a.time_ns.total_cmp(&b.time_ns)));
    let half = windows.width_ns;
    let sep = windows.separation_ns;
    let (mut n1, mut n2, mut n3) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < by_rep.len() {
        let mut j = i;
        while j < by_rep.len() && by_rep[j].repetition == by_rep[i].repetition {
            j += 1;
        }
        let group = &by_rep[i..j];
        for a in group.iter().filter(|t| t.detector == Detector::D1) {
            for b in group.iter().filter(|t| t.detector == Detector::D2) {
                let middle = windows.classify(a.time_ns) == Some(Window::Middle)
                    || windows.classify(b.time_ns) == Some(Window::Middle);
                if !middle {
                    continue;
                }
                let tau = b.time_ns - a.time_ns;
                if tau.abs() <= half {
                    n2 += 1;
                } else if (tau + sep).abs() <= half {
                    n1 += 1;
                } else if (tau - sep).abs() <= half {
                    n3 += 1;
                }
            }
        }
        i = j;
    }
    let s = (n1 + n3) as f64;
    if s == 0.0 {
        return Err(CoincidenceError::Undefined(
            "no coincidences in the side peaks".into(),
        ));
    }
    let n2f = n2 as f64;
    let visibility = 1.0 - 2.0 * n2f / s;
    let sigma = ((2.0 / s).powi(2) * n2f + (2.0 * n2f / (s * s)).powi(2) * s).sqrt();
    Ok(HomResult {
        n1,
        n2,
        n3,
        visibility,
        sigma,
    })
}

/// Visibility corrected for multi-photon events and interferometer contrast.
pub fn hom_correct(v_raw: f64, g2: f64, classical_visibility: f64) -> f64 {
    v_raw * (1.0 + 2.0 * g2) / classical_visibility
}

pub fn write_tags_csv<W: Write>(tags: &[TimeTag], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for t in tags {
        wr.serialize(t)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Parsed tags plus warnings for out-of-order rows.
pub fn read_tags_csv<R: Read>(r: R) -> Result<(Vec<TimeTag>, Vec<String>)> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers()?.clone();
    let expected = ["detector", "time_ns", "repetition"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(CoincidenceError::Malformed {
            row: 0,
            message: format!("expected header {expected:?}, got {headers:?}"),
        });
    }
    let mut tags = Vec::new();
    let mut warnings = Vec::new();
    let mut last: Option<(u64, f64)> = None;
    for (k, rec) in rd.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| CoincidenceError::Malformed { row, message: e.to_string() })?;
        let tag: TimeTag = rec
            .deserialize(Some(&headers))
            .map_err(|e| CoincidenceError::Malformed { row, message: e.to_string() })?;
        if !tag.time_ns.is_finite() {
            return Err(CoincidenceError::Malformed {
                row,
                message: "non-finite timestamp".into(),
            });
        }
        if let Some((r, t)) = last {
            if (tag.repetition, tag.time_ns) < (r, t) {
                warnings.push(format!("row {row}: timestamp earlier than previous row"));
            }
        }
        last = Some((tag.repetition, tag.time_ns));
        tags.push(tag);
    }
    Ok((tags, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tag(d: Detector, t: f64, r: u64) -> TimeTag {
        TimeTag {
            detector: d,
            time_ns: t,
            repetition: r,
        }
    }

    #[test]
    fn window_classification() {
        let w = TimeWindows {
            early_ns: 10.0,
            readout_start_ns: 60.0,
            ..TimeWindows::default()
        };
        assert_eq!(w.classify(10.5), Some(Window::Early));
        assert_eq!(w.classify(22.0), Some(Window::Middle));
        assert_eq!(w.classify(33.7), Some(Window::Late));
        assert_eq!(w.classify(15.0), None);
        assert_eq!(w.classify(70.0), Some(Window::Readout));
    }

    #[test]
    fn hom_correction_examples() {
        assert!((hom_correct(0.865, 0.047, 1.0) - 0.946).abs() < 1e-3);
        assert!((hom_correct(0.865, 0.047, 0.989) - 0.9568).abs() < 1e-3);
    }

    #[test]
    fn uncorrelated_tags_give_unit_g2() {
        let w = TimeWindows::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tags = Vec::new();
        for r in 0..200_000 {
            for d in [Detector::D1, Detector::D2] {
                if rng.random::<f64>() < 0.05 {
                    tags.push(tag(d, 0.5, r));
                }
            }
        }
        let g = g2_zero(&tags, &w, Window::Early, 10).unwrap();
        assert!((g.g2 - 1.0).abs() < 4.0 * g.sigma, "{g:?}");
    }

    #[test]
    fn antibunched_source_has_zero_g2() {
        let w = TimeWindows::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tags: Vec<_> = (0..10_000)
            .filter_map(|r| {
                (rng.random::<f64>() < 0.3).then(|| {
                    let d = if rng.random::<bool>() { Detector::D1 } else { Detector::D2 };
                    tag(d, 0.7, r)
                })
            })
            .collect();
        let g = g2_zero(&tags, &w, Window::Early, 5).unwrap();
        assert_eq!(g.zero_delay, 0);
        assert_eq!(g.g2, 0.0);
    }

    #[test]
    fn g2_without_side_peaks_is_undefined() {
        let w = TimeWindows::default();
        let tags = vec![tag(Detector::D1, 0.5, 0), tag(Detector::D2, 0.6, 0)];
        assert!(matches!(g2_zero(&tags, &w, Window::Early, 3), Err(CoincidenceError::Undefined(_))));
    }

    #[test]
    fn hom_peaks_for_distinguishable_pairs() {
        let w = TimeWindows::default();
        let t = w.separation_ns;
        let tags = vec![
            // early D2, middle D1 → τ = −T
            tag(Detector::D2, 0.5, 0),
            tag(Detector::D1, t + 0.5, 0),
            // both middle → τ = 0
            tag(Detector::D1, t + 0.4, 1),
            tag(Detector::D2, t + 0.6, 1),
            // middle D1, late D2 → τ = +T
            tag(Detector::D1, t + 0.5, 2),
            tag(Detector::D2, 2.0 * t + 0.5, 2),
            // early and late only: ignored
            tag(Detector::D1, 0.5, 3),
            tag(Detector::D2, 2.0 * t + 0.5, 3),
        ];
        let h = hom_visibility(&tags, &w).unwrap();
        assert_eq!((h.n1, h.n2, h.n3), (1, 1, 1));
        assert!((h.visibility - 0.0).abs() < 1e-12);
    }

    #[test]
    fn single_tag_time_histogram() {
        let h = time_histogram(&[tag(Detector::D1, 5.0, 0)], 1.0, 10.0).unwrap();
        assert_eq!(h.counts[5], 1);
        assert_eq!(h.total(), 1);
    }

    #[test]
    fn histogram_counts_cross_repetition_delays() {
        let tags = vec![
            tag(Detector::D1, 1.0, 0),
            tag(Detector::D2, 1.5, 0),
            tag(Detector::D2, 1.0, 1),
        ];
        let h = delay_histogram(&tags, 100.0, 1.0, 150.0).unwrap();
        assert_eq!(h.total(), 2);
        let at = |ns: f64| h.counts[((ns + 150.0) / 1.0) as usize];
        assert_eq!(at(0.5), 1);
        assert_eq!(at(100.0), 1);
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("bin_start_ns,count\n-150,0\n"));
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let tags = vec![tag(Detector::D1, 1.25, 0), tag(Detector::D2, 0.5, 3)];
        let mut buf = Vec::new();
        write_tags_csv(&tags, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("detector,time_ns,repetition\nD1,1.25,0\n"));
        let (back, warn) = read_tags_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tags);
        assert!(warn.is_empty());

        let unordered = "detector,time_ns,repetition\nD1,5,2\nD2,1,1\n";
        let (_, warn) = read_tags_csv(unordered.as_bytes()).unwrap();
        assert_eq!(warn.len(), 1);

        let bad = "detector,time_ns,repetition\nD3,1,1\n";
        assert!(matches!(read_tags_csv(bad.as_bytes()), Err(CoincidenceError::Malformed { row: 1, .. })));
        let bad_header = "det,time,rep\nD1,1,1\n";
        assert!(read_tags_csv(bad_header.as_bytes()).is_err());
        let bad_num = "detector,time_ns,repetition\nD1,abc,1\n";
        assert!(read_tags_csv(bad_num.as_bytes()).is_err());
    }
}

//! CSV ingestion, sliding windows, chronological splits and the synthetic
//! non-stationary generator.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HtvError, Result};
use crate::htpgm::standard_normal;
use crate::tensor::Tensor;

pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";
pub const CALENDAR_FEATURES: usize = 4;

/// A multivariate series: one row per timestamp, one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub channels: Vec<String>,
    pub timestamps: Vec<NaiveDateTime>,
    /// [len, V]
    pub values: Tensor,
}

impl Series {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn width(&self) -> usize {
        self.channels.len()
    }

    /// Rows `start..end` as a new series.
    pub fn segment(&self, start: usize, end: usize) -> Result<Series> {
        Ok(Series {
            channels: self.channels.clone(),
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values.slice_rows(start, end)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub forward_filled: usize,
    pub leading_dropped: usize,
}

impl LoadReport {
    pub fn warnings(&self) -> usize {
        self.forward_filled + self.leading_dropped
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        TIME_FORMAT,
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return d.and_hms_opt(0, 0, 0);
        }
    }
    None
}

fn parse_value(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Some(f64::NAN);
    }
    s.parse::<f64>().ok()
}

/// Reads an ETT-style CSV: header row, timestamp first, then one column per
/// channel. Missing values are forward-filled; rows before every channel has
/// seen a value are dropped. Both are counted in the report.
pub fn read_csv<R: Read>(reader: R) -> Result<(Series, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(HtvError::Ingestion {
            line: 1,
            message: "need a timestamp column and at least one channel".into(),
        });
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let v = channels.len();
    let mut stamps = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| HtvError::Ingestion {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != v + 1 {
            return Err(HtvError::Ingestion {
                line,
                message: format!("expected {} fields, found {}", v + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| HtvError::Ingestion {
            line,
            message: format!("unparseable timestamp `{}`", &rec[0]),
        })?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| {
                parse_value(f).ok_or_else(|| HtvError::Ingestion {
                    line,
                    message: format!("unparseable value `{f}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        stamps.push(ts);
        rows.push(vals);
    }

    for c in 0..v {
        if rows.iter().all(|r| !r[c].is_finite()) {
            return Err(HtvError::Channel(format!(
                "channel `{}` has no finite values",
                channels[c]
            )));
        }
    }
    let mut report = LoadReport::default();
    let first_complete = (0..v)
        .map(|c| rows.iter().position(|r| r[c].is_finite()).expect("checked"))
        .max()
        .unwrap_or(0);
    for r in &rows[..first_complete] {
        report.leading_dropped += r.iter().filter(|x| !x.is_finite()).count();
    }
    let mut last = rows[first_complete].clone();
    let mut data = Vec::with_capacity((rows.len() - first_complete) * v);
    for r in &rows[first_complete..] {
        for c in 0..v {
            if r[c].is_finite() {
                last[c] = r[c];
            } else {
                report.forward_filled += 1;
            }
        }
        data.extend_from_slice(&last);
    }
    let n = rows.len() - first_complete;
    Ok((
        Series {
            channels,
            timestamps: stamps[first_complete..].to_vec(),
            values: Tensor::new(&[n, v], data)?,
        },
        report,
    ))
}

pub fn load_csv(path: &Path) -> Result<(Series, LoadReport)> {
    read_csv(std::fs::File::open(path)?)
}

/// Writes the same dialect `read_csv` accepts. Values use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_csv<W: Write>(series: &Series, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(series.channels.iter().cloned());
    w.write_record(&header)?;
    for (r, ts) in series.timestamps.iter().enumerate() {
        let mut rec = vec![ts.format(TIME_FORMAT).to_string()];
        rec.extend(series.values.row(r).iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(series: &Series, path: &Path) -> Result<()> {
    write_csv(series, std::fs::File::create(path)?)
}

/// Month, day, weekday, hour, each scaled to [−0.5, 0.5].
pub fn calendar_features(ts: &NaiveDateTime) -> [f64; CALENDAR_FEATURES] {
    [
        (ts.month0() as f64) / 11.0 - 0.5,
        (ts.day0() as f64) / 30.0 - 0.5,
        (ts.weekday().num_days_from_monday() as f64) / 6.0 - 0.5,
        (ts.hour() as f64) / 23.0 - 0.5,
    ]
}

/// One (input, target) pair cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    /// [T, V] raw values.
    pub x: Tensor,
    /// [H, V] raw values immediately after `x`.
    pub target: Tensor,
    /// [T + H, F] calendar features.
    pub time_features: Tensor,
    pub window_id: usize,
    /// Row of the first input step within the source series.
    pub start: usize,
}

impl SeriesWindow {
    /// Calendar features of the input steps only.
    pub fn input_time_features(&self) -> Tensor {
        self.time_features
            .slice_rows(0, self.x.rows())
            .expect("window has T rows of features")
    }
}

pub fn window_count(len: usize, input_len: usize, horizon: usize, stride: usize) -> usize {
    if len < input_len + horizon || stride == 0 {
        0
    } else {
        (len - input_len - horizon) / stride + 1
    }
}

/// Windows starting at 0, `stride` apart.
pub fn make_windows(series: &Series, input_len: usize, horizon: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    if stride == 0 || input_len == 0 || horizon == 0 {
        return Err(HtvError::Window(
            "input_len, horizon and stride must be positive".into(),
        ));
    }
    if series.len() < input_len + horizon {
        return Err(HtvError::Window(format!(
            "series of length {} is shorter than input_len + horizon = {}",
            series.len(),
            input_len + horizon
        )));
    }
    let n = window_count(series.len(), input_len, horizon, stride);
    (0..n)
        .map(|w| {
            let start = w * stride;
            let tf: Vec<f64> = series.timestamps[start..start + input_len + horizon]
                .iter()
                .flat_map(calendar_features)
                .collect();
            Ok(SeriesWindow {
                x: series.values.slice_rows(start, start + input_len)?,
                target: series
                    .values
                    .slice_rows(start + input_len, start + input_len + horizon)?,
                time_features: Tensor::new(&[input_len + horizon, CALENDAR_FEATURES], tf)?,
                window_id: w,
                start,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SeriesWindow>,
    pub val: Vec<SeriesWindow>,
    pub test: Vec<SeriesWindow>,
    /// Row indices where val and test segments begin.
    pub boundaries: (usize, usize),
    pub boundary_timestamps: (Option<NaiveDateTime>, Option<NaiveDateTime>),
}

impl DatasetSplit {
    /// Rows of the full series touched by any window in `windows`.
    pub fn covered_rows(windows: &[SeriesWindow], input_len: usize, horizon: usize) -> Vec<(usize, usize)> {
        windows
            .iter()
            .map(|w| (w.start, w.start + input_len + horizon))
            .collect()
    }
}

/// Contiguous chronological segments with boundaries at floor(len·r).
/// Windows are cut inside each segment, so none straddles a boundary.
/// A zero ratio yields an empty split.
pub fn chrono_split(
    series: &Series,
    ratios: (f64, f64, f64),
    input_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<DatasetSplit> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(HtvError::Split(format!(
            "ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let len = series.len();
    // the tolerance keeps 0.7 + 0.1 from flooring to 799 of 1000
    let b1 = (len as f64 * a + 1e-9).floor() as usize;
    let b2 = (len as f64 * (a + b) + 1e-9).floor() as usize;
    let b2 = if c == 0.0 { len } else { b2 };
    let segment = |start: usize, end: usize, name: &str, ratio: f64| -> Result<Vec<SeriesWindow>> {
        if ratio == 0.0 {
            return Ok(Vec::new());
        }
        if end - start < input_len + horizon {
            return Err(HtvError::Split(format!(
                "{name} segment has {} rows, fewer than input_len + horizon = {}",
                end - start,
                input_len + horizon
            )));
        }
        let seg = series.segment(start, end)?;
        let mut ws = make_windows(&seg, input_len, horizon, stride)?;
        for w in &mut ws {
            w.start += start;
        }
        Ok(ws)
    };
    Ok(DatasetSplit {
        train: segment(0, b1, "train", a)?,
        val: segment(b1, b2, "val", b)?,
        test: segment(b2, len, "test", c)?,
        boundaries: (b1, b2),
        boundary_timestamps: (series.timestamps.get(b1).copied(), series.timestamps.get(b2).copied()),
    })
}

/// Parameters of the synthetic non-stationary generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub channels: usize,
    pub length: usize,
    pub seed: u64,
    /// Per-channel slope per step.
    pub trend: Vec<f64>,
    pub period: Vec<f64>,
    pub amplitude: Vec<f64>,
    /// Steps at which the noise scale changes, ascending.
    pub regime_times: Vec<usize>,
    /// Noise multiplier in force from the matching regime time on.
    pub regime_scales: Vec<f64>,
    pub noise_std: f64,
    /// Row-major [V, V]; output channel i = Σ_j mixing[i][j]·raw_j.
    pub mixing: Vec<f64>,
    pub start: NaiveDateTime,
}

impl SynthSpec {
    /// V channels with period-24 seasonality, a mild per-channel trend, a
    /// noise regime switch at 60% of the series and light cross-channel mixing.
    pub fn benchmark(channels: usize, length: usize, seed: u64) -> Self {
        let mut mixing = vec![0.0; channels * channels];
        for i in 0..channels {
            mixing[i * channels + i] = 1.0;
            if channels > 1 {
                mixing[i * channels + (i + 1) % channels] += 0.3;
            }
        }
        Self {
            channels,
            length,
            seed,
            trend: (0..channels)
                .map(|c| 0.002 * (c as f64 + 1.0) * if c % 2 == 0 { 1.0 } else { -1.0 })
                .collect(),
            period: vec![24.0; channels],
            amplitude: (0..channels).map(|c| 1.0 + 0.25 * c as f64).collect(),
            regime_times: vec![length * 3 / 5],
            regime_scales: vec![3.0],
            noise_std: 0.2,
            mixing,
            start: NaiveDate::from_ymd_opt(2016, 7, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.channels;
        let check = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(HtvError::config(field, msg)) };
        check(v > 0, "synth_channels", "must be positive")?;
        check(self.length > 0, "synth_length", "must be positive")?;
        check(self.trend.len() == v, "synth_trend", "needs one entry per channel")?;
        check(
            self.period.len() == v && self.period.iter().all(|p| *p > 0.0),
            "synth_period",
            "needs one positive entry per channel",
        )?;
        check(
            self.amplitude.len() == v,
            "synth_amplitude",
            "needs one entry per channel",
        )?;
        check(
            self.regime_times.len() == self.regime_scales.len(),
            "synth_regime",
            "times and scales differ in length",
        )?;
        check(
            self.regime_times.windows(2).all(|w| w[0] <= w[1]),
            "synth_regime",
            "times must ascend",
        )?;
        check(self.mixing.len() == v * v, "synth_mixing", "must be square [V, V]")?;
        check(self.noise_std >= 0.0, "synth_noise", "must be >= 0")
    }

    pub fn regime_scale(&self, t: usize) -> f64 {
        self.regime_times
            .iter()
            .zip(&self.regime_scales)
            .filter(|(start, _)| t >= **start)
            .map(|(_, s)| *s)
            .next_back()
            .unwrap_or(1.0)
    }
}

/// raw_c(t) = trend_c·t + amp_c·sin(2πt/period_c) + regime(t)·noise, then mixed.
/// Timestamps are hourly from `spec.start`, so the calendar features cycle
/// with the step index (24 h, 7 d, 12 months).
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Series> {
    spec.validate()?;
    let (v, n) = (spec.channels, spec.length);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = standard_normal(&[n, v], &mut rng);
    let mut raw = vec![0.0; v];
    let mut data = Vec::with_capacity(n * v);
    for t in 0..n {
        let scale = spec.regime_scale(t);
        for c in 0..v {
            let tf = t as f64;
            raw[c] = spec.trend[c] * tf
                + spec.amplitude[c] * (2.0 * std::f64::consts::PI * tf / spec.period[c]).sin()
                + scale * spec.noise_std * noise.at(t, c);
        }
        for i in 0..v {
            data.push((0..v).map(|j| spec.mixing[i * v + j] * raw[j]).sum());
        }
    }
    Ok(Series {
        channels: (0..v).map(|c| format!("ch{c}")).collect(),
        timestamps: (0..n).map(|t| spec.start + Duration::hours(t as i64)).collect(),
        values: Tensor::new(&[n, v], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_series(len: usize, v: usize) -> Series {
        let spec = SynthSpec::benchmark(v, len, 0);
        let mut s = generate_synthetic(&spec).unwrap();
        s.values = Tensor::new(&[len, v], (0..len * v).map(|i| i as f64).collect()).unwrap();
        s
    }

    #[test]
    fn reads_small_file() {
        let text = "date,a,b\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,3,4\n2016-07-01 02:00:00,5,6\n";
        let (s, rep) = read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.values.shape(), &[3, 2]);
        assert_eq!(s.values.data(), &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(rep.warnings(), 0);
    }

    #[test]
    fn forward_fills_mid_gap() {
        let text = "date,a,b\n2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,,4\n2016-07-01 02:00:00,5,6\n";
        let (s, rep) = read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.values.column(0), vec![1., 1., 5.]);
        assert_eq!(rep.warnings(), 1);
    }

    #[test]
    fn drops_leading_gaps() {
        let text = "date,a,b\n2016-07-01 00:00:00,NaN,2\n2016-07-01 01:00:00,3,4\n";
        let (s, rep) = read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(rep.leading_dropped, 1);
    }

    #[test]
    fn ett_header_has_seven_channels() {
        let text =
            "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n2016-07-01 00:00:00,5.827,2.009,1.599,0.462,4.203,1.34,30.531\n";
        let (s, _) = read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.width(), 7);
        assert_eq!(s.channels[6], "OT");
    }

    #[test]
    fn ingestion_errors_name_the_line() {
        let text = "date,a\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,abc\n";
        match read_csv(text.as_bytes()) {
            Err(HtvError::Ingestion { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "date,a\nnot-a-date,1\n";
        assert!(matches!(
            read_csv(text.as_bytes()),
            Err(HtvError::Ingestion { line: 2, .. })
        ));
        let text = "date,a,b\n2016-07-01 00:00:00,1,\n2016-07-01 01:00:00,2,nan\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(HtvError::Channel(_))));
    }

    #[test]
    fn window_count_examples() {
        let s = ramp_series(200, 1);
        assert_eq!(make_windows(&s, 96, 96, 1).unwrap().len(), 9);
        let s = ramp_series(20, 1);
        assert_eq!(make_windows(&s, 12, 8, 1).unwrap().len(), 1);
        assert_eq!(make_windows(&s, 4, 2, 20).unwrap().len(), 1);
        assert!(make_windows(&s, 16, 8, 1).is_err());
    }

    #[test]
    fn window_contents_are_contiguous() {
        let s = ramp_series(30, 2);
        let w = &make_windows(&s, 5, 3, 4).unwrap()[2];
        assert_eq!(w.start, 8);
        assert_eq!(w.x.at(0, 0), 16.0);
        assert_eq!(w.target.at(0, 0), s.values.at(13, 0));
        assert_eq!(w.time_features.shape(), &[8, 4]);
    }

    #[test]
    fn split_boundaries() {
        let s = ramp_series(1000, 1);
        let sp = chrono_split(&s, (0.7, 0.1, 0.2), 24, 12, 1).unwrap();
        assert_eq!(sp.boundaries, (700, 800));
        assert!(sp.train.iter().all(|w| w.start + 36 <= 700));
        assert!(sp.val.iter().all(|w| w.start >= 700 && w.start + 36 <= 800));
        assert!(sp.test.iter().all(|w| w.start >= 800));

        let sp = chrono_split(&s, (0.8, 0.0, 0.2), 24, 12, 1).unwrap();
        assert!(sp.val.is_empty());
        assert!(!sp.test.is_empty());

        assert!(matches!(
            chrono_split(&s, (0.98, 0.01, 0.01), 24, 12, 1),
            Err(HtvError::Split(_))
        ));
        assert!(matches!(
            chrono_split(&s, (0.5, 0.1, 0.1), 24, 12, 1),
            Err(HtvError::Split(_))
        ));
    }

    #[test]
    fn synthetic_pure_sinusoid() {
        let mut spec = SynthSpec::benchmark(2, 96, 1);
        spec.noise_std = 0.0;
        spec.trend = vec![0.0; 2];
        spec.mixing = vec![1., 0., 0., 1.];
        let s = generate_synthetic(&spec).unwrap();
        for t in 0..72 {
            assert!((s.values.at(t, 0) - s.values.at(t + 24, 0)).abs() < 1e-12);
        }
        assert!((s.values.at(6, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_regime_switch_scales_noise() {
        let mut spec = SynthSpec::benchmark(1, 4000, 5);
        spec.trend = vec![0.0];
        spec.amplitude = vec![0.0];
        spec.regime_times = vec![2000];
        spec.regime_scales = vec![3.0];
        spec.noise_std = 1.0;
        let s = generate_synthetic(&spec).unwrap();
        let col = s.values.column(0);
        let std = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        // rolling windows of 200 on each side of the switch
        for k in 0..5 {
            let before = std(&col[1000 + 200 * k..1200 + 200 * k]);
            let after = std(&col[2000 + 200 * k..2200 + 200 * k]);
            let ratio = after / before;
            assert!((ratio - 3.0).abs() < 0.6, "ratio {ratio}");
        }
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SynthSpec::benchmark(3, 300, 42);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SynthSpec {
            seed: 43,
            ..spec.clone()
        };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    proptest! {
        #[test]
        fn window_count_formula(len in 1usize..400, t in 1usize..64, h in 1usize..32, stride in 1usize..40) {
            let s = ramp_series(len, 1);
            match make_windows(&s, t, h, stride) {
                Ok(ws) => {
                    prop_assert!(len >= t + h);
                    prop_assert_eq!(ws.len(), (len - t - h) / stride + 1);
                    prop_assert!(ws.iter().all(|w| w.start + t + h <= len));
                }
                Err(_) => prop_assert!(len < t + h),
            }
        }

        #[test]
        fn csv_round_trip(values in prop::collection::vec(-1e6f64..1e6, 12)) {
            let mut s = ramp_series(4, 3);
            s.values = Tensor::new(&[4, 3], values).unwrap();
            let mut buf = Vec::new();
            write_csv(&s, &mut buf).unwrap();
            let (back, rep) = read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(rep.warnings(), 0);
            prop_assert_eq!(&back, &s);
            let mut again = Vec::new();
            write_csv(&back, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}

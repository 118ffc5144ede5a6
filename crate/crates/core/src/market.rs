//! Price panels, fluctuation vectors and agent observations.
//!
//! An [`AssetPanel`] is immutable once built. Truncated views produced by
//! [`AssetPanel::head`] share storage with the full panel, which lets the
//! backtester hand each strategy a view that physically cannot reach periods
//! at or after the one being decided.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng;

pub const CSV_HEADER: [&str; 7] = ["asset", "period", "open", "high", "low", "close", "volume"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PanelFormat {
    Csv,
}

/// One OHLCV bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    fn validate(&self, asset: &str, period: &str) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::NonPositivePrice {
                asset: asset.to_string(),
                period: period.to_string(),
            });
        }
        let bad = |msg: &str| Error::InconsistentBar {
            asset: asset.to_string(),
            period: period.to_string(),
            msg: msg.to_string(),
        };
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err(bad("volume must be finite and nonnegative"));
        }
        if self.high < self.low {
            return Err(bad("high < low"));
        }
        if self.open < self.low || self.open > self.high {
            return Err(bad("open outside [low, high]"));
        }
        if self.close < self.low || self.close > self.high {
            return Err(bad("close outside [low, high]"));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct PanelData {
    asset_ids: Vec<String>,
    period_labels: Vec<String>,
    // row-major d x stride
    stride: usize,
    open: Vec<f64>,
    high: Vec<f64>,
    low: Vec<f64>,
    close: Vec<f64>,
    volume: Vec<f64>,
}

/// Aligned OHLCV series for `d` assets over `T` periods.
#[derive(Debug, Clone)]
pub struct AssetPanel {
    data: Arc<PanelData>,
    periods: usize,
}

impl AssetPanel {
    /// Builds a panel from per-asset bar rows (`bars[a][t]`).
    pub fn from_bars(
        asset_ids: Vec<String>,
        period_labels: Option<Vec<String>>,
        bars: Vec<Vec<Bar>>,
    ) -> Result<Self> {
        let d = asset_ids.len();
        if d == 0 || bars.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "{} asset ids for {} bar rows",
                d,
                bars.len()
            )));
        }
        let t_len = bars[0].len();
        if t_len == 0 {
            return Err(Error::ShapeMismatch("panel needs at least one period".into()));
        }
        if let Some((a, row)) = bars.iter().enumerate().find(|(_, r)| r.len() != t_len) {
            return Err(Error::ShapeMismatch(format!(
                "asset {} has {} periods, expected {}",
                asset_ids[a],
                row.len(),
                t_len
            )));
        }
        let labels = match period_labels {
            Some(l) if l.len() == t_len => l,
            Some(l) => {
                return Err(Error::ShapeMismatch(format!(
                    "{} period labels for {} periods",
                    l.len(),
                    t_len
                )))
            }
            None => (0..t_len).map(|t| t.to_string()).collect(),
        };
        let mut data = PanelData {
            asset_ids,
            period_labels: labels,
            stride: t_len,
            open: Vec::with_capacity(d * t_len),
            high: Vec::with_capacity(d * t_len),
            low: Vec::with_capacity(d * t_len),
            close: Vec::with_capacity(d * t_len),
            volume: Vec::with_capacity(d * t_len),
        };
        for (a, row) in bars.iter().enumerate() {
            for (t, bar) in row.iter().enumerate() {
                bar.validate(&data.asset_ids[a], &data.period_labels[t])?;
                data.open.push(bar.open);
                data.high.push(bar.high);
                data.low.push(bar.low);
                data.close.push(bar.close);
                data.volume.push(bar.volume);
            }
        }
        Ok(Self {
            data: Arc::new(data),
            periods: t_len,
        })
    }

    /// Panel whose per-period close/open ratios are `ratios[a][t]`.
    ///
    /// Opens chain from the previous close starting at 1.0, high/low are the
    /// max/min of open and close, volume is 1.
    pub fn from_fluctuations(ratios: &[Vec<f64>]) -> Result<Self> {
        let ids = (0..ratios.len()).map(|a| format!("A{a}")).collect();
        let bars = ratios
            .iter()
            .map(|row| {
                let mut open = 1.0;
                row.iter()
                    .map(|x| {
                        let close = open * x;
                        let bar = Bar {
                            open,
                            high: open.max(close),
                            low: open.min(close),
                            close,
                            volume: 1.0,
                        };
                        open = close;
                        bar
                    })
                    .collect()
            })
            .collect();
        Self::from_bars(ids, None, bars)
    }

    pub fn assets(&self) -> usize {
        self.data.asset_ids.len()
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.data.asset_ids
    }

    pub fn period_labels(&self) -> &[String] {
        &self.data.period_labels[..self.periods]
    }

    #[inline]
    fn idx(&self, a: usize, t: usize) -> usize {
        assert!(t < self.periods, "period {t} beyond visible panel ({})", self.periods);
        a * self.data.stride + t
    }

    pub fn open(&self, a: usize, t: usize) -> f64 {
        self.data.open[self.idx(a, t)]
    }

    pub fn high(&self, a: usize, t: usize) -> f64 {
        self.data.high[self.idx(a, t)]
    }

    pub fn low(&self, a: usize, t: usize) -> f64 {
        self.data.low[self.idx(a, t)]
    }

    pub fn close(&self, a: usize, t: usize) -> f64 {
        self.data.close[self.idx(a, t)]
    }

    pub fn volume(&self, a: usize, t: usize) -> f64 {
        self.data.volume[self.idx(a, t)]
    }

    pub fn bar(&self, a: usize, t: usize) -> Bar {
        let i = self.idx(a, t);
        Bar {
            open: self.data.open[i],
            high: self.data.high[i],
            low: self.data.low[i],
            close: self.data.close[i],
            volume: self.data.volume[i],
        }
    }

    /// View of the first `periods` periods, sharing storage.
    pub fn head(&self, periods: usize) -> Result<Self> {
        if periods == 0 || periods > self.periods {
            return Err(Error::IndexOutOfRange {
                index: periods,
                len: self.periods,
            });
        }
        Ok(Self {
            data: Arc::clone(&self.data),
            periods,
        })
    }

    /// New panel holding the listed assets (repeats allowed) under new ids.
    pub fn select_assets(&self, indices: &[usize], ids: Vec<String>) -> Result<Self> {
        if indices.len() != ids.len() {
            return Err(Error::ShapeMismatch("one id per selected asset".into()));
        }
        let bars = indices
            .iter()
            .map(|&a| {
                if a >= self.assets() {
                    return Err(Error::InvalidArgument(format!("asset index {a} out of range")));
                }
                Ok((0..self.periods).map(|t| self.bar(a, t)).collect())
            })
            .collect::<Result<Vec<Vec<Bar>>>>()?;
        Self::from_bars(ids, Some(self.period_labels().to_vec()), bars)
    }

    /// Same data with every visible bar replaced by `f(asset, period, bar)`.
    pub fn map_bars(&self, f: impl Fn(usize, usize, Bar) -> Bar) -> Result<Self> {
        let bars = (0..self.assets())
            .map(|a| (0..self.periods).map(|t| f(a, t, self.bar(a, t))).collect())
            .collect();
        Self::from_bars(
            self.asset_ids().to_vec(),
            Some(self.period_labels().to_vec()),
            bars,
        )
    }
}

impl PartialEq for AssetPanel {
    fn eq(&self, other: &Self) -> bool {
        if self.assets() != other.assets()
            || self.periods != other.periods
            || self.asset_ids() != other.asset_ids()
            || self.period_labels() != other.period_labels()
        {
            return false;
        }
        (0..self.assets()).all(|a| (0..self.periods).all(|t| self.bar(a, t) == other.bar(a, t)))
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    asset: String,
    period: String,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
}

/// Reads an OHLCV panel.
pub fn load_panel(path: &Path, format: PanelFormat) -> Result<AssetPanel> {
    match format {
        PanelFormat::Csv => load_csv(path),
    }
}

fn load_csv(path: &Path) -> Result<AssetPanel> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(1, format!("expected header `{}`", CSV_HEADER.join(","))));
    }

    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<HashMap<String, Bar>> = Vec::new();
    for record in reader.deserialize::<CsvRow>() {
        let row = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let a = *index.entry(row.asset.clone()).or_insert_with(|| {
            ids.push(row.asset.clone());
            rows.push(HashMap::new());
            ids.len() - 1
        });
        let bar = Bar {
            open: row.open,
            high: row.high,
            low: row.low,
            close: row.close,
            volume: row.volume,
        };
        bar.validate(&row.asset, &row.period)?;
        if rows[a].insert(row.period.clone(), bar).is_some() {
            return Err(parse_err(
                0,
                format!("duplicate row for asset {} period {}", row.asset, row.period),
            ));
        }
    }
    if ids.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }

    let mut labels: Vec<String> = rows[0].keys().cloned().collect();
    sort_period_labels(&mut labels);
    for (a, row) in rows.iter().enumerate() {
        if row.len() != labels.len() || labels.iter().any(|l| !row.contains_key(l)) {
            return Err(parse_err(
                0,
                format!(
                    "asset {} has {} periods, asset {} has {}; every asset needs the same periods",
                    ids[a],
                    row.len(),
                    ids[0],
                    labels.len()
                ),
            ));
        }
    }
    let bars = rows
        .iter()
        .map(|row| labels.iter().map(|l| row[l]).collect())
        .collect();
    AssetPanel::from_bars(ids, Some(labels), bars)
}

/// Integer labels sort numerically; anything else (ISO dates) lexically.
fn sort_period_labels(labels: &mut [String]) {
    if labels.iter().all(|l| l.parse::<u64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<u64>().unwrap_or(0));
    } else {
        labels.sort();
    }
}

/// Writes a panel in the CSV format read by [`load_panel`].
///
/// Floats use Rust's shortest round-trip formatting, so reloading yields
/// bit-identical values.
pub fn save_panel(panel: &AssetPanel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", CSV_HEADER.join(","))?;
    for (a, id) in panel.asset_ids().iter().enumerate() {
        for (t, label) in panel.period_labels().iter().enumerate() {
            let b = panel.bar(a, t);
            writeln!(
                w,
                "{id},{label},{},{},{},{},{}",
                b.open, b.high, b.low, b.close, b.volume
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-asset close/open ratios for one period.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationVector(Vec<f64>);

impl FluctuationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty fluctuation vector".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidArgument(
                "fluctuation entries must be positive and finite".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn fluctuation(panel: &AssetPanel, t: usize) -> Result<FluctuationVector> {
    if t >= panel.periods() {
        return Err(Error::IndexOutOfRange {
            index: t,
            len: panel.periods(),
        });
    }
    Ok(FluctuationVector(
        (0..panel.assets())
            .map(|a| panel.close(a, t) / panel.open(a, t))
            .collect(),
    ))
}

/// Observation tensor of shape `d × n × 4`, channels (open, high, low, volume).
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    assets: usize,
    history: usize,
    data: Vec<f64>,
}

impl StateTensor {
    pub const CHANNELS: usize = 4;
    pub const OPEN: usize = 0;
    pub const HIGH: usize = 1;
    pub const LOW: usize = 2;
    pub const VOLUME: usize = 3;

    pub fn from_raw(assets: usize, history: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != assets * history * Self::CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {assets}x{history}x4 tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("state tensor entries must be finite".into()));
        }
        Ok(Self {
            assets,
            history,
            data,
        })
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    pub fn history(&self) -> usize {
        self.history
    }

    #[inline]
    pub fn get(&self, asset: usize, period: usize, channel: usize) -> f64 {
        self.data[(asset * self.history + period) * Self::CHANNELS + channel]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Same tensor with asset rows reordered: row `i` of the result is row `perm[i]`.
    pub fn permute_assets(&self, perm: &[usize]) -> Self {
        let row = self.history * Self::CHANNELS;
        let mut data = Vec::with_capacity(self.data.len());
        for &a in perm {
            data.extend_from_slice(&self.data[a * row..(a + 1) * row]);
        }
        Self {
            assets: self.assets,
            history: self.history,
            data,
        }
    }
}

/// Observation for deciding period `t`: periods `t-n .. t-1`.
///
/// Prices are divided by each asset's most recent open (`open[a, t-1]`);
/// volume by the asset's mean volume over the slab, or by 1 when that mean
/// is zero.
pub fn state_tensor(panel: &AssetPanel, t: usize, n: usize) -> Result<StateTensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("history length must be at least 1".into()));
    }
    if t < n {
        return Err(Error::InsufficientHistory { t, need: n });
    }
    if t - 1 >= panel.periods() {
        return Err(Error::IndexOutOfRange {
            index: t - 1,
            len: panel.periods(),
        });
    }
    let d = panel.assets();
    let mut data = Vec::with_capacity(d * n * StateTensor::CHANNELS);
    for a in 0..d {
        let scale = panel.open(a, t - 1);
        let mean_vol = (t - n..t).map(|s| panel.volume(a, s)).sum::<f64>() / n as f64;
        let vol_scale = if mean_vol > 0.0 { mean_vol } else { 1.0 };
        for s in t - n..t {
            data.push(panel.open(a, s) / scale);
            data.push(panel.high(a, s) / scale);
            data.push(panel.low(a, s) / scale);
            data.push(panel.volume(a, s) / vol_scale);
        }
    }
    StateTensor::from_raw(d, n, data)
}

/// Draws `k` assets uniformly with replacement.
///
/// Draw `j` is `uniform_index(rng, d)` on `rng::seeded(seed)`. The first copy
/// of an asset keeps its id; later copies become `<id>#<copy>`.
pub fn bootstrap_select(universe: &AssetPanel, k: usize, seed: u64) -> Result<AssetPanel> {
    let d = universe.assets();
    if d == 0 {
        return Err(Error::EmptyUniverse);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("bootstrap sample size must be at least 1".into()));
    }
    let mut rng = rng::seeded(seed);
    let picks: Vec<usize> = (0..k).map(|_| rng::uniform_index(&mut rng, d)).collect();
    let mut copies = vec![0usize; d];
    let ids = picks
        .iter()
        .map(|&a| {
            copies[a] += 1;
            let id = &universe.asset_ids()[a];
            if copies[a] == 1 {
                id.clone()
            } else {
                format!("{id}#{}", copies[a])
            }
        })
        .collect();
    universe.select_assets(&picks, ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(d: usize, t: usize) -> AssetPanel {
        AssetPanel::from_fluctuations(&vec![vec![1.0; t]; d]).unwrap()
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_constant_market() {
        let mut s = String::from("asset,period,open,high,low,close,volume\n");
        for a in ["x", "y"] {
            for t in 0..3 {
                s.push_str(&format!("{a},{t},1.0,1.0,1.0,1.0,0\n"));
            }
        }
        let f = write(&s);
        let p = load_panel(f.path(), PanelFormat::Csv).unwrap();
        assert_eq!(p.assets(), 2);
        assert_eq!(p.periods(), 3);
        assert_eq!(p.asset_ids(), &["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn rejects_zero_open() {
        let f = write("asset,period,open,high,low,close,volume\nx,0,0,1,0.5,1,3\n");
        let err = load_panel(f.path(), PanelFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("non-positive price"), "{err}");
    }

    #[test]
    fn rejects_high_below_low() {
        let f = write("asset,period,open,high,low,close,volume\nx,0,1,0.9,1.1,1,3\n");
        let err = load_panel(f.path(), PanelFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("high < low"), "{err}");
    }

    #[test]
    fn rejects_gaps_and_malformed_rows() {
        let gap = write(
            "asset,period,open,high,low,close,volume\nx,0,1,1,1,1,0\nx,1,1,1,1,1,0\ny,0,1,1,1,1,0\n",
        );
        assert!(matches!(
            load_panel(gap.path(), PanelFormat::Csv),
            Err(Error::Parse { .. })
        ));
        let bad = write("asset,period,open,high,low,close,volume\nx,0,1,abc,1,1,0\n");
        assert!(matches!(
            load_panel(bad.path(), PanelFormat::Csv),
            Err(Error::Parse { .. })
        ));
        let header = write("a,b,c\n1,2,3\n");
        assert!(load_panel(header.path(), PanelFormat::Csv).is_err());
    }

    #[test]
    fn sorts_periods_numerically_and_by_date() {
        let f = write(
            "asset,period,open,high,low,close,volume\nx,10,2,2,2,2,0\nx,9,1,1,1,1,0\n",
        );
        let p = load_panel(f.path(), PanelFormat::Csv).unwrap();
        assert_eq!(p.period_labels(), &["9".to_string(), "10".to_string()]);
        assert_eq!(p.open(0, 0), 1.0);
        let f = write(
            "asset,period,open,high,low,close,volume\nx,2020-01-03,2,2,2,2,0\nx,2020-01-02,1,1,1,1,0\n",
        );
        let p = load_panel(f.path(), PanelFormat::Csv).unwrap();
        assert_eq!(p.period_labels()[0], "2020-01-02");
    }

    #[test]
    fn fluctuation_ratios() {
        let p = flat(3, 4);
        assert_eq!(fluctuation(&p, 2).unwrap().as_slice(), &[1.0; 3]);
        let bars = vec![
            vec![Bar { open: 10.0, high: 11.0, low: 10.0, close: 11.0, volume: 0.0 }],
            vec![Bar { open: 20.0, high: 20.0, low: 19.0, close: 19.0, volume: 0.0 }],
        ];
        let p = AssetPanel::from_bars(vec!["a".into(), "b".into()], None, bars).unwrap();
        let x = fluctuation(&p, 0).unwrap();
        assert!((x.as_slice()[0] - 1.1).abs() < 1e-15);
        assert!((x.as_slice()[1] - 0.95).abs() < 1e-15);
        assert!(matches!(fluctuation(&p, 1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn state_tensor_normalization() {
        let p = flat(2, 6);
        let s = state_tensor(&p, 5, 3).unwrap();
        for a in 0..2 {
            for j in 0..3 {
                for c in 0..3 {
                    assert_eq!(s.get(a, j, c), 1.0);
                }
            }
        }
        let bars = vec![vec![
            Bar { open: 10.0, high: 10.0, low: 10.0, close: 10.0, volume: 2.0 },
            Bar { open: 20.0, high: 20.0, low: 20.0, close: 20.0, volume: 6.0 },
            Bar { open: 5.0, high: 5.0, low: 5.0, close: 5.0, volume: 1.0 },
        ]];
        let p = AssetPanel::from_bars(vec!["a".into()], None, bars).unwrap();
        let s = state_tensor(&p, 2, 2).unwrap();
        assert_eq!(s.get(0, 0, StateTensor::OPEN), 0.5);
        assert_eq!(s.get(0, 1, StateTensor::OPEN), 1.0);
        assert_eq!(s.get(0, 0, StateTensor::VOLUME), 0.5);
        assert_eq!(s.get(0, 1, StateTensor::VOLUME), 1.5);
        assert!(matches!(
            state_tensor(&p, 1, 2),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn zero_volume_slab_divides_by_one() {
        let p = AssetPanel::from_bars(
            vec!["a".into()],
            None,
            vec![vec![Bar { open: 1.0, high: 1.0, low: 1.0, close: 1.0, volume: 0.0 }; 3]],
        )
        .unwrap();
        let s = state_tensor(&p, 3, 3).unwrap();
        assert_eq!(s.get(0, 2, StateTensor::VOLUME), 0.0);
    }

    #[test]
    fn head_hides_later_periods() {
        let p = flat(2, 5);
        let h = p.head(3).unwrap();
        assert_eq!(h.periods(), 3);
        assert!(fluctuation(&h, 3).is_err());
        assert!(p.head(6).is_err());
    }

    #[test]
    fn bootstrap_singleton_and_determinism() {
        let p = flat(1, 3);
        let s = bootstrap_select(&p, 1, 5).unwrap();
        assert_eq!(s, p);
        let u = AssetPanel::from_fluctuations(
            &(0..10).map(|a| vec![1.0 + a as f64 * 0.01; 4]).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = bootstrap_select(&u, 25, 42).unwrap();
        let b = bootstrap_select(&u, 25, 42).unwrap();
        assert_eq!(a, b);
        let mut ids = a.asset_ids().to_vec();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 25, "duplicates must get distinct ids");
        assert!(bootstrap_select(&u, 0, 1).is_err());
    }
}

use log::warn;

use super::time::{civil_from_days, days_from_civil};
use super::{normalize_label, EdfError, EegRecord};

pub const DIGITAL_MIN: i32 = -32768;
pub const DIGITAL_MAX: i32 = 32767;

#[derive(Clone, Debug, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: usize,
}

impl SignalHeader {
    fn gain(&self) -> f64 {
        (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min) as f64
    }

    pub fn to_physical(&self, digital: i16) -> f64 {
        (digital as f64 - self.digital_min as f64) * self.gain() + self.physical_min
    }

    /// One digital step expressed in physical units.
    pub fn quantization_step(&self) -> f64 {
        self.gain().abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    /// `dd.mm.yy` as stored.
    pub start_date: String,
    /// `hh.mm.ss` as stored.
    pub start_clock: String,
    /// Seconds since 1970-01-01 derived from the date and clock fields.
    pub start_time: f64,
    pub header_bytes: usize,
    pub n_records: usize,
    pub record_duration_s: f64,
    pub signals: Vec<SignalHeader>,
}

struct Fields<'a> {
    bytes: &'a [u8],
}

impl<'a> Fields<'a> {
    fn need(&self, offset: usize, len: usize, what: &'static str) -> Result<(), EdfError> {
        if offset + len > self.bytes.len() {
            return Err(EdfError::Truncated {
                what,
                offset,
                needed: len,
                available: self.bytes.len().saturating_sub(offset),
            });
        }
        Ok(())
    }

    fn text(&self, offset: usize, len: usize) -> String {
        self.bytes[offset..offset + len]
            .iter()
            .map(|&b| if b.is_ascii() { b as char } else { '?' })
            .collect::<String>()
            .trim()
            .to_string()
    }

    fn number<T: std::str::FromStr>(&self, offset: usize, len: usize, field: &'static str) -> Result<T, EdfError> {
        let s = self.text(offset, len);
        s.parse().map_err(|_| EdfError::Field { field, offset, value: s })
    }
}

fn parse_start(date: &str, clock: &str) -> Option<f64> {
    let d: Vec<u32> = date.split('.').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    let c: Vec<u32> = clock.split('.').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    if d.len() != 3 || c.len() != 3 {
        return None;
    }
    let (day, month, yy) = (d[0], d[1], d[2]);
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) || yy > 99 || c[0] > 23 || c[1] > 59 || c[2] > 59 {
        return None;
    }
    let year = if yy >= 85 { 1900 + yy } else { 2000 + yy } as i64;
    let days = days_from_civil(year, month, day);
    Some((days * 86400 + (c[0] * 3600 + c[1] * 60 + c[2]) as i64) as f64)
}

/// Parses the fixed and per-signal header only; `bytes` may stop after the header.
pub fn parse_edf_header(bytes: &[u8]) -> Result<EdfHeader, EdfError> {
    parse_header(bytes)
}

impl EdfHeader {
    pub fn duration_s(&self) -> f64 {
        self.n_records as f64 * self.record_duration_s
    }
}

fn parse_header(bytes: &[u8]) -> Result<EdfHeader, EdfError> {
    let f = Fields { bytes };
    f.need(0, 256, "fixed header")?;
    let ns: usize = f.number(252, 4, "number of signals")?;
    if ns == 0 {
        return Err(EdfError::Invalid("file declares zero signals".into()));
    }
    let header_bytes: usize = f.number(184, 8, "header bytes")?;
    let expected = 256 * (ns + 1);
    if header_bytes != expected {
        return Err(EdfError::Invalid(format!(
            "header length {header_bytes} != 256*(ns+1) = {expected}"
        )));
    }
    f.need(256, 256 * ns, "signal headers")?;

    let raw_records: i64 = f.number(236, 8, "number of data records")?;
    if raw_records == -1 {
        return Err(EdfError::UnknownRecordCount);
    }
    if raw_records < 0 {
        return Err(EdfError::Field {
            field: "number of data records",
            offset: 236,
            value: raw_records.to_string(),
        });
    }
    let record_duration_s: f64 = f.number(244, 8, "duration of a data record")?;
    if !(record_duration_s > 0.0 && record_duration_s.is_finite()) {
        return Err(EdfError::Field {
            field: "duration of a data record",
            offset: 244,
            value: record_duration_s.to_string(),
        });
    }
    let start_date = f.text(168, 8);
    let start_clock = f.text(176, 8);
    let start_time = parse_start(&start_date, &start_clock).ok_or_else(|| EdfError::Field {
        field: "start date/time",
        offset: 168,
        value: format!("{start_date} {start_clock}"),
    })?;

    // Per-signal fields are stored column-wise: all labels, then all transducers, ...
    let mut offset = 256;
    let mut column = |width: usize| {
        let start = offset;
        offset += width * ns;
        (0..ns).map(move |i| start + i * width)
    };
    let labels: Vec<usize> = column(16).collect();
    let transducers: Vec<usize> = column(80).collect();
    let dims: Vec<usize> = column(8).collect();
    let pmins: Vec<usize> = column(8).collect();
    let pmaxs: Vec<usize> = column(8).collect();
    let dmins: Vec<usize> = column(8).collect();
    let dmaxs: Vec<usize> = column(8).collect();
    let prefilters: Vec<usize> = column(80).collect();
    let sprs: Vec<usize> = column(8).collect();

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let s = SignalHeader {
            label: f.text(labels[i], 16),
            transducer: f.text(transducers[i], 80),
            physical_dimension: f.text(dims[i], 8),
            physical_min: f.number(pmins[i], 8, "physical minimum")?,
            physical_max: f.number(pmaxs[i], 8, "physical maximum")?,
            digital_min: f.number(dmins[i], 8, "digital minimum")?,
            digital_max: f.number(dmaxs[i], 8, "digital maximum")?,
            prefilter: f.text(prefilters[i], 80),
            samples_per_record: f.number(sprs[i], 8, "samples per record")?,
        };
        if s.digital_max <= s.digital_min {
            return Err(EdfError::Invalid(format!(
                "signal `{}`: digital max {} <= digital min {}",
                s.label, s.digital_max, s.digital_min
            )));
        }
        if s.physical_max == s.physical_min || !s.physical_max.is_finite() || !s.physical_min.is_finite() {
            return Err(EdfError::Invalid(format!(
                "signal `{}`: degenerate physical range [{}, {}]",
                s.label, s.physical_min, s.physical_max
            )));
        }
        if s.samples_per_record == 0 {
            return Err(EdfError::Invalid(format!("signal `{}` has zero samples per record", s.label)));
        }
        signals.push(s);
    }

    Ok(EdfHeader {
        version: f.text(0, 8),
        patient: f.text(8, 80),
        recording: f.text(88, 80),
        start_date,
        start_clock,
        start_time,
        header_bytes,
        n_records: raw_records as usize,
        record_duration_s,
        signals,
    })
}

/// Parses a complete EDF file image.
///
/// All signals must share one sampling rate. When a label repeats, the first
/// occurrence is kept.
pub fn parse_edf(bytes: &[u8]) -> Result<(EdfHeader, EegRecord), EdfError> {
    let header = parse_header(bytes)?;
    let spr0 = header.signals[0].samples_per_record;
    if header.signals.iter().any(|s| s.samples_per_record != spr0) {
        return Err(EdfError::Invalid("signals use different sampling rates".into()));
    }
    let record_bytes = header
        .signals
        .iter()
        .try_fold(0usize, |acc, s| acc.checked_add(s.samples_per_record.checked_mul(2)?))
        .ok_or_else(|| EdfError::Invalid("record size overflows".into()))?;
    let payload = header
        .n_records
        .checked_mul(record_bytes)
        .ok_or_else(|| EdfError::Invalid("payload size overflows".into()))?;
    let start = header.header_bytes;
    if start.checked_add(payload).is_none_or(|end| end > bytes.len()) {
        return Err(EdfError::Truncated {
            what: "data records",
            offset: start,
            needed: payload,
            available: bytes.len() - start,
        });
    }

    let mut keep = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, s) in header.signals.iter().enumerate() {
        if seen.insert(normalize_label(&s.label)) {
            keep.push(i);
        } else {
            warn!("duplicate channel label `{}`; keeping first occurrence", s.label);
        }
    }

    let n_samples = header.n_records * spr0;
    let mut data: Vec<Vec<f64>> = keep.iter().map(|_| Vec::with_capacity(n_samples)).collect();
    let mut signal_offsets = Vec::with_capacity(header.signals.len());
    let mut acc = 0;
    for s in &header.signals {
        signal_offsets.push(acc);
        acc += s.samples_per_record * 2;
    }
    for r in 0..header.n_records {
        let rec = &bytes[start + r * record_bytes..start + (r + 1) * record_bytes];
        for (row, &si) in data.iter_mut().zip(&keep) {
            let sig = &header.signals[si];
            let off = signal_offsets[si];
            for c in rec[off..off + sig.samples_per_record * 2].chunks_exact(2) {
                row.push(sig.to_physical(i16::from_le_bytes([c[0], c[1]])));
            }
        }
    }
    let fs = spr0 as f64 / header.record_duration_s;
    let channels = keep.iter().map(|&i| header.signals[i].label.clone()).collect();
    let record = EegRecord::new(channels, fs, data, header.start_time)?;
    Ok((header, record))
}

fn put(out: &mut Vec<u8>, s: &str, width: usize) {
    let mut b: Vec<u8> = s.bytes().filter(u8::is_ascii).take(width).collect();
    b.resize(width, b' ');
    out.extend_from_slice(&b);
}

/// Formats a number into at most 8 ASCII characters.
fn num8(v: f64) -> String {
    for prec in (0..=6).rev() {
        let s = format!("{v:.prec$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s.len() <= 8 {
            return s;
        }
    }
    format!("{}", v.round() as i64)
}

fn physical_bounds(row: &[f64]) -> (f64, f64) {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    // Widen slightly and round outward so the 8-character fields hold the exact bounds.
    let span = (hi - lo).max(1e-3);
    let lo = ((lo - 0.01 * span) * 1000.0).floor() / 1000.0;
    let hi = ((hi + 0.01 * span) * 1000.0).ceil() / 1000.0;
    let parsed = |v: f64| num8(v).parse::<f64>().unwrap_or(v);
    let (mut plo, mut phi) = (parsed(lo), parsed(hi));
    if plo > lo {
        plo = parsed(lo - span * 0.01);
    }
    if phi < hi {
        phi = parsed(hi + span * 0.01);
    }
    (plo, phi)
}

/// Serialises a record as EDF with 16-bit samples. Physical ranges are taken from
/// the data, so the round-trip error per sample is at most one quantization step.
pub fn write_edf(record: &EegRecord, patient: &str) -> Result<Vec<u8>, EdfError> {
    let ns = record.channels.len();
    if ns == 0 {
        return Err(EdfError::Invalid("record has no channels".into()));
    }
    let n = record.n_samples();
    let fs_int = record.fs.round();
    let (spr, n_records, duration) = if (record.fs - fs_int).abs() < 1e-9 && fs_int >= 1.0 && n.is_multiple_of(fs_int as usize) {
        (fs_int as usize, n / fs_int as usize, 1.0)
    } else {
        (n.max(1), 1, n.max(1) as f64 / record.fs)
    };
    if spr > 99_999_999 {
        return Err(EdfError::Invalid("record too long for a single data record".into()));
    }

    let start = record.start_time.floor() as i64;
    let (y, mo, d) = civil_from_days(start.div_euclid(86400));
    let secs = start.rem_euclid(86400);
    if !(1985..=2084).contains(&y) {
        return Err(EdfError::Invalid(format!("start year {y} not representable in EDF")));
    }

    let bounds: Vec<(f64, f64)> = record.data.iter().map(|r| physical_bounds(r)).collect();

    let mut out = Vec::with_capacity(256 * (ns + 1) + n * ns * 2);
    put(&mut out, "0", 8);
    put(&mut out, patient, 80);
    put(&mut out, "teeg", 80);
    put(&mut out, &format!("{:02}.{:02}.{:02}", d, mo, y % 100), 8);
    put(&mut out, &format!("{:02}.{:02}.{:02}", secs / 3600, (secs / 60) % 60, secs % 60), 8);
    put(&mut out, &(256 * (ns + 1)).to_string(), 8);
    put(&mut out, "", 44);
    put(&mut out, &n_records.to_string(), 8);
    put(&mut out, &num8(duration), 8);
    put(&mut out, &ns.to_string(), 4);
    for c in &record.channels {
        put(&mut out, c, 16);
    }
    for _ in 0..ns {
        put(&mut out, "", 80);
    }
    for _ in 0..ns {
        put(&mut out, "uV", 8);
    }
    for (lo, _) in &bounds {
        put(&mut out, &num8(*lo), 8);
    }
    for (_, hi) in &bounds {
        put(&mut out, &num8(*hi), 8);
    }
    for _ in 0..ns {
        put(&mut out, &DIGITAL_MIN.to_string(), 8);
    }
    for _ in 0..ns {
        put(&mut out, &DIGITAL_MAX.to_string(), 8);
    }
    for _ in 0..ns {
        put(&mut out, "", 80);
    }
    for _ in 0..ns {
        put(&mut out, &spr.to_string(), 8);
    }
    for _ in 0..ns {
        put(&mut out, "", 32);
    }

    let dspan = (DIGITAL_MAX - DIGITAL_MIN) as f64;
    for r in 0..n_records {
        for (row, (lo, hi)) in record.data.iter().zip(&bounds) {
            let scale = dspan / (hi - lo);
            for &x in &row[r * spr..((r + 1) * spr).min(row.len())] {
                let dv = ((x - lo) * scale + DIGITAL_MIN as f64).round();
                let dv = dv.clamp(DIGITAL_MIN as f64, DIGITAL_MAX as f64) as i16;
                out.extend_from_slice(&dv.to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_signal_file() -> Vec<u8> {
        // 2 signals, 1 record of 4 samples each, 1 s duration.
        let mut out = Vec::new();
        put(&mut out, "0", 8);
        put(&mut out, "X", 80);
        put(&mut out, "Y", 80);
        put(&mut out, "01.02.03", 8);
        put(&mut out, "04.05.06", 8);
        put(&mut out, "768", 8);
        put(&mut out, "", 44);
        put(&mut out, "1", 8);
        put(&mut out, "1", 8);
        put(&mut out, "2", 4);
        for l in ["FP1-F7", "F7-T7"] {
            put(&mut out, l, 16);
        }
        for _ in 0..2 {
            put(&mut out, "", 80);
        }
        for _ in 0..2 {
            put(&mut out, "uV", 8);
        }
        for v in ["-100", "0"] {
            put(&mut out, v, 8);
        }
        for v in ["100", "10"] {
            put(&mut out, v, 8);
        }
        for v in ["-32768", "0"] {
            put(&mut out, v, 8);
        }
        for v in ["32767", "100"] {
            put(&mut out, v, 8);
        }
        for _ in 0..2 {
            put(&mut out, "", 80);
        }
        for _ in 0..2 {
            put(&mut out, "4", 8);
        }
        for _ in 0..2 {
            put(&mut out, "", 32);
        }
        for d in [0i16, -32768, 32767, 100] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for d in [0i16, 50, 100, 10] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    #[test]
    fn hand_assembled_file_decodes_exactly() {
        let bytes = two_signal_file();
        let (h, rec) = parse_edf(&bytes).unwrap();
        assert_eq!(h.signals.len(), 2);
        assert_eq!(rec.fs, 4.0);
        assert_eq!(rec.channels, vec!["FP1-F7", "F7-T7"]);
        let g0 = 200.0 / 65535.0;
        let expect0 = [32768.0 * g0 - 100.0, -100.0, 100.0, 32868.0 * g0 - 100.0];
        for (a, b) in rec.data[0].iter().zip(expect0) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(rec.data[1], vec![0.0, 5.0, 10.0, 1.0]);
        let expected_start = (days_from_civil(2003, 2, 1) * 86400 + 4 * 3600 + 5 * 60 + 6) as f64;
        assert_eq!(rec.start_time, expected_start);
    }

    #[test]
    fn digital_zero_scaling() {
        let s = SignalHeader {
            label: "x".into(),
            transducer: String::new(),
            physical_dimension: "uV".into(),
            physical_min: -100.0,
            physical_max: 100.0,
            digital_min: -32768,
            digital_max: 32767,
            prefilter: String::new(),
            samples_per_record: 1,
        };
        // Independent evaluation: 32768 * 200 / 65535 - 100.
        let oracle = 32768.0 * 200.0 / 65535.0 - 100.0;
        assert!((s.to_physical(0) - oracle).abs() < 1e-12);
        assert!((s.to_physical(0) - 0.001526).abs() < 1e-6);
        assert!((s.quantization_step() - 0.003052).abs() < 1e-6);
    }

    #[test]
    fn hundred_bytes_is_truncated_header() {
        let err = parse_edf(&[b' '; 100]).unwrap_err();
        assert!(matches!(err, EdfError::Truncated { what: "fixed header", .. }), "{err}");
    }

    #[test]
    fn unknown_record_count_is_rejected() {
        let mut bytes = two_signal_file();
        bytes[236..244].copy_from_slice(b"-1      ");
        assert!(matches!(parse_edf(&bytes), Err(EdfError::UnknownRecordCount)));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = two_signal_file();
        match parse_edf(&bytes[..bytes.len() - 1]) {
            Err(EdfError::Truncated { offset, .. }) => assert_eq!(offset, 768),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_is_rejected() {
        let mut bytes = two_signal_file();
        bytes[252..256].copy_from_slice(b"ab  ");
        assert!(matches!(parse_edf(&bytes), Err(EdfError::Field { .. })));
    }

    #[test]
    fn duplicate_labels_keep_first() {
        let mut bytes = two_signal_file();
        bytes[256 + 16..256 + 32].copy_from_slice(b"FP1-F7          ");
        let (h, rec) = parse_edf(&bytes).unwrap();
        assert_eq!(h.signals.len(), 2);
        assert_eq!(rec.channels, vec!["FP1-F7"]);
        assert_eq!(rec.data.len(), 1);
    }

    #[test]
    fn num8_fits_field() {
        for v in [0.0, -100.0, 1234.5678, -12345.678901, 0.000123, 99999999.0] {
            assert!(num8(v).len() <= 8, "{v} -> {}", num8(v));
        }
    }
}

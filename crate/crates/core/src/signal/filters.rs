use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::SignalError;
use crate::edfio::EegRecord;

/// Normalised second-order section:
/// `y = b0 x + b1 x[-1] + b2 x[-2] - a1 y[-1] - a2 y[-2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    pub fn notch(fs: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::from_raw([1.0, -2.0 * c, 1.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
    }

    /// Bilinear-transformed analogue low-pass, pre-warped at `fc`.
    pub fn lowpass(fs: f64, fc: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::from_raw(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    pub fn highpass(fs: f64, fc: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::from_raw(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        )
    }

    pub fn response(&self, f: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        num / den
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let disc = Complex64::new(self.a[0] * self.a[0] - 4.0 * self.a[1], 0.0).sqrt();
        [(-self.a[0] + disc) / 2.0, (-self.a[0] - disc) / 2.0]
    }

    pub fn is_stable(&self) -> bool {
        self.b.iter().chain(&self.a).all(|v| v.is_finite()) && self.poles().iter().all(|p| p.norm() < 1.0)
    }
}

/// Butterworth pole-pair quality factors for an even `order`.
fn butterworth_qs(order: usize) -> Vec<f64> {
    let n = order as f64;
    (0..order / 2)
        .map(|k| 1.0 / (2.0 * ((2 * k + 1) as f64 * PI / (2.0 * n)).sin()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub notch_hz: f64,
    pub notch_q: f64,
    pub highpass_hz: f64,
    pub lowpass_hz: f64,
    /// Order of each Butterworth edge; the band-pass has twice this order.
    pub edge_order: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            notch_hz: 60.0,
            notch_q: 30.0,
            highpass_hz: 0.5,
            lowpass_hz: 100.0,
            edge_order: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub fs: f64,
    pub notch: Biquad,
    pub bandpass: Vec<Biquad>,
}

impl FilterBank {
    pub fn sections(&self) -> impl Iterator<Item = &Biquad> {
        std::iter::once(&self.notch).chain(&self.bandpass)
    }

    pub fn magnitude(&self, f: f64) -> f64 {
        self.sections().map(|s| s.response(f, self.fs)).product::<Complex64>().norm()
    }

    pub fn is_stable(&self) -> bool {
        self.sections().all(Biquad::is_stable)
    }

    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut x = vec![0.0; n];
        if n > 0 {
            x[0] = 1.0;
        }
        let mut st = self.stream(1);
        st.process_channel(0, &mut x);
        x
    }

    /// Fresh zero-state filter for `n_channels` channels.
    pub fn stream(&self, n_channels: usize) -> FilterState {
        let sections: Vec<Biquad> = self.sections().copied().collect();
        FilterState {
            fs: self.fs,
            z: vec![vec![[0.0; 2]; sections.len()]; n_channels],
            sections,
        }
    }
}

pub fn design_filters(fs: f64) -> Result<FilterBank, SignalError> {
    design_filters_with(fs, &FilterConfig::default())
}

pub fn design_filters_with(fs: f64, cfg: &FilterConfig) -> Result<FilterBank, SignalError> {
    if !(fs > 200.0 && fs.is_finite()) {
        return Err(SignalError::SamplingRate(fs));
    }
    let nyq = fs / 2.0;
    let ok = |f: f64| f > 0.0 && f < nyq;
    if !ok(cfg.notch_hz) || !ok(cfg.highpass_hz) || !ok(cfg.lowpass_hz) || cfg.highpass_hz >= cfg.lowpass_hz {
        return Err(SignalError::Design(format!(
            "frequencies must satisfy 0 < hp < lp < {nyq} Hz and 0 < notch < {nyq} Hz"
        )));
    }
    if cfg.edge_order == 0 || !cfg.edge_order.is_multiple_of(2) {
        return Err(SignalError::Design(format!("edge order {} must be even", cfg.edge_order)));
    }
    let qs = butterworth_qs(cfg.edge_order);
    let mut bandpass: Vec<Biquad> = qs.iter().map(|&q| Biquad::highpass(fs, cfg.highpass_hz, q)).collect();
    bandpass.extend(qs.iter().map(|&q| Biquad::lowpass(fs, cfg.lowpass_hz, q)));
    let bank = FilterBank {
        fs,
        notch: Biquad::notch(fs, cfg.notch_hz, cfg.notch_q),
        bandpass,
    };
    if !bank.is_stable() {
        return Err(SignalError::Design("designed filter is unstable".into()));
    }
    Ok(bank)
}

/// Per-channel direct-form-II-transposed state carried across chunks.
#[derive(Clone, Debug)]
pub struct FilterState {
    fs: f64,
    sections: Vec<Biquad>,
    z: Vec<Vec<[f64; 2]>>,
}

impl FilterState {
    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn reset(&mut self) {
        for ch in &mut self.z {
            ch.iter_mut().for_each(|s| *s = [0.0; 2]);
        }
    }

    pub fn process_channel(&mut self, ch: usize, x: &mut [f64]) {
        for (s, z) in self.sections.iter().zip(self.z[ch].iter_mut()) {
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            let [mut z1, mut z2] = *z;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
            *z = [z1, z2];
        }
    }

    pub fn process(&mut self, data: &mut [Vec<f64>]) {
        for (ch, row) in data.iter_mut().enumerate() {
            self.process_channel(ch, row);
        }
    }
}

/// Causal filtering of every channel from a zero initial state.
pub fn apply_filters(record: &EegRecord, bank: &FilterBank) -> Result<EegRecord, SignalError> {
    if (record.fs - bank.fs).abs() > 1e-9 {
        return Err(SignalError::RateMismatch {
            record: record.fs,
            bank: bank.fs,
        });
    }
    let mut data = record.data.clone();
    bank.stream(data.len()).process(&mut data);
    Ok(EegRecord {
        data,
        ..record.clone()
    })
}

use serde::{Deserialize, Serialize};

use crate::audio::{window_values, Window};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Binder, Builder, WnConv2d};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// `(fft_size, hop_length, window_length)` per resolution.
    pub resolutions: Vec<(usize, usize, usize)>,
    /// Widths of the strided layers of each period discriminator.
    pub period_channels: Vec<usize>,
    pub resolution_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig::desk()
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        DiscriminatorConfig {
            periods: vec![2, 3, 5, 7, 11],
            resolutions: vec![(512, 128, 512), (1024, 256, 1024), (256, 64, 256)],
            period_channels: vec![8, 16, 32, 32],
            resolution_channels: 4,
            leaky_slope: 0.1,
        }
    }

    pub fn paper() -> Self {
        DiscriminatorConfig {
            periods: vec![2, 3, 5, 7, 11],
            resolutions: vec![(1024, 256, 1024), (2048, 512, 2048), (512, 128, 512)],
            period_channels: vec![32, 128, 512, 1024, 1024],
            resolution_channels: 32,
            leaky_slope: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.iter().any(|&p| p == 0) || self.period_channels.is_empty() {
            return Err(Error::Config("periods must be positive and channel list non-empty".into()));
        }
        if self
            .resolutions
            .iter()
            .any(|&(n, h, w)| h == 0 || w == 0 || w > n)
        {
            return Err(Error::Config("need 0 < window <= fft and hop > 0".into()));
        }
        if self.periods.is_empty() && self.resolutions.is_empty() {
            return Err(Error::Config("at least one discriminator is required".into()));
        }
        Ok(())
    }
}

/// Score map and intermediate activations of one sub-discriminator.
pub struct DiscOutput {
    /// `[B, N]`
    pub score: Tensor,
    pub features: Vec<Tensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeriodDiscriminator {
    pub period: usize,
    pub convs: Vec<WnConv2d>,
    pub post: WnConv2d,
}

impl PeriodDiscriminator {
    fn new(b: &mut Builder, period: usize, channels: &[usize]) -> Self {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i + 1 == channels.len() { 1 } else { 3 };
            convs.push(b.conv2d(&format!("conv{i}"), cin, c, (5, 1), (stride, 1), (2, 0)));
            cin = c;
        }
        let post = b.conv2d("post", cin, 1, (3, 1), (1, 1), (1, 0));
        PeriodDiscriminator { period, convs, post }
    }

    fn forward(&self, bind: &Binder, x: &Tensor, slope: f64) -> DiscOutput {
        let (batch, len) = (x.shape()[0], x.shape()[1]);
        let p = self.period;
        let padded = len.div_ceil(p) * p;
        let mut h = x.pad(1, 0, padded - len).reshape(&[batch, 1, padded / p, p]);
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            h = c.forward(bind, &h).leaky_relu(slope);
            features.push(h.clone());
        }
        let out = self.post.forward(bind, &h);
        features.push(out.clone());
        let n = out.len() / batch;
        DiscOutput {
            score: out.reshape(&[batch, n]),
            features,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolutionDiscriminator {
    pub fft_size: usize,
    pub hop_length: usize,
    pub window: Vec<f64>,
    pub convs: Vec<WnConv2d>,
    pub post: WnConv2d,
}

impl ResolutionDiscriminator {
    fn new(b: &mut Builder, (fft, hop, win): (usize, usize, usize), ch: usize) -> Self {
        let mut window = vec![0.0; fft];
        let off = (fft - win) / 2;
        window[off..off + win].copy_from_slice(&window_values(Window::Hann, win));
        let mut convs = vec![b.conv2d("conv0", 1, ch, (3, 9), (1, 1), (1, 4))];
        for i in 1..4 {
            convs.push(b.conv2d(&format!("conv{i}"), ch, ch, (3, 9), (1, 2), (1, 4)));
        }
        convs.push(b.conv2d("conv4", ch, ch, (3, 3), (1, 1), (1, 1)));
        let post = b.conv2d("post", ch, 1, (3, 3), (1, 1), (1, 1));
        ResolutionDiscriminator {
            fft_size: fft,
            hop_length: hop,
            window,
            convs,
            post,
        }
    }

    fn forward(&self, bind: &Binder, x: &Tensor, slope: f64) -> DiscOutput {
        let batch = x.shape()[0];
        let mag = x.stft_magnitude(self.fft_size, self.hop_length, &self.window);
        let (frames, bins) = (mag.shape()[1], mag.shape()[2]);
        let mut h = mag.reshape(&[batch, 1, frames, bins]);
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for c in &self.convs {
            h = c.forward(bind, &h).leaky_relu(slope);
            features.push(h.clone());
        }
        let out = self.post.forward(bind, &h);
        features.push(out.clone());
        let n = out.len() / batch;
        DiscOutput {
            score: out.reshape(&[batch, n]),
            features,
        }
    }
}

/// Multi-period (waveform folded by period) and multi-resolution
/// (magnitude spectrogram) discriminators.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorBank {
    pub config: DiscriminatorConfig,
    pub periods: Vec<PeriodDiscriminator>,
    pub resolutions: Vec<ResolutionDiscriminator>,
}

impl DiscriminatorBank {
    /// `b` should carry the discriminator group.
    pub fn new(b: &mut Builder, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let periods = cfg
            .periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(&mut b.scope(&format!("mpd{p}")), p, &cfg.period_channels))
            .collect();
        let resolutions = cfg
            .resolutions
            .iter()
            .enumerate()
            .map(|(i, &r)| ResolutionDiscriminator::new(&mut b.scope(&format!("mrd{i}")), r, cfg.resolution_channels))
            .collect();
        Ok(DiscriminatorBank {
            config: cfg.clone(),
            periods,
            resolutions,
        })
    }

    pub fn len(&self) -> usize {
        self.periods.len() + self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every sub-discriminator applied to `x: [B, T]`.
    pub fn forward(&self, bind: &Binder, x: &Tensor) -> Vec<DiscOutput> {
        let s = self.config.leaky_slope;
        self.periods
            .iter()
            .map(|d| d.forward(bind, x, s))
            .chain(self.resolutions.iter().map(|d| d.forward(bind, x, s)))
            .collect()
    }
}

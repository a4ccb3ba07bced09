//! Coordinate-MLP neural fields.
//!
//! A field maps normalized coordinates in [−1,1]^d_in to signal values.
//! Two forward paths exist on purpose: [`FieldModel::predict`] is a plain
//! straight-line evaluation, while [`forward_tape`] records the same
//! computation on a [`Tape`] for differentiation. Tests cross-check them
//! elementwise, so neither can silently drift.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Counts coordinates seen outside [−1,1] during prediction (debug builds).
/// Fields extrapolate fine; the counter only makes accidental denormalized
/// inputs visible to tests.
pub static OUT_OF_RANGE_COORDS: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// sin(ω₀·z) on every hidden layer.
    Sine { omega0: f64 },
    Relu,
}

pub const DEFAULT_OMEGA0: f64 = 30.0;

/// Architecture of one dense coordinate MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldArch {
    /// Number of linear layers (≥ 1), counting input and output maps.
    pub n_layers: usize,
    /// Hidden width (unused when n_layers == 1).
    pub hidden: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub activation: Activation,
    /// Frequencies of the sin/cos positional encoding, if any.
    /// Expands the input to d_in · (1 + 2·n) features.
    pub pos_enc: Option<usize>,
    pub bias: bool,
}

impl FieldArch {
    pub fn sine(n_layers: usize, hidden: usize, d_in: usize, d_out: usize) -> Self {
        FieldArch {
            n_layers,
            hidden,
            d_in,
            d_out,
            activation: Activation::Sine {
                omega0: DEFAULT_OMEGA0,
            },
            pos_enc: None,
            bias: true,
        }
    }

    pub fn relu(n_layers: usize, hidden: usize, d_in: usize, d_out: usize) -> Self {
        FieldArch {
            n_layers,
            hidden,
            d_in,
            d_out,
            activation: Activation::Relu,
            pos_enc: None,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.d_in < 1 || self.d_out < 1 {
            return Err(Error::contract(format!(
                "invalid arch: n_layers={}, d_in={}, d_out={}",
                self.n_layers, self.d_in, self.d_out
            )));
        }
        if self.n_layers > 1 && self.hidden < 1 {
            return Err(Error::contract("hidden width must be >= 1".to_string()));
        }
        if let Activation::Sine { omega0 } = self.activation {
            if !(omega0 > 0.0) {
                return Err(Error::contract(format!("omega0 must be > 0, got {omega0}")));
            }
        }
        Ok(())
    }

    /// Input width after positional encoding.
    pub fn encoded_in(&self) -> usize {
        match self.pos_enc {
            Some(n) => self.d_in * (1 + 2 * n),
            None => self.d_in,
        }
    }

    /// (in, out) of each linear layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.n_layers);
        let mut prev = self.encoded_in();
        for l in 0..self.n_layers {
            let out = if l + 1 == self.n_layers {
                self.d_out
            } else {
                self.hidden
            };
            dims.push((prev, out));
            prev = out;
        }
        dims
    }

    /// Exact parameter count: Σ layers (in·out + out·[bias]).
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + if self.bias { o } else { 0 })
            .sum()
    }

    /// Flat offsets of each layer's weight matrix and bias.
    pub fn param_layout(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::with_capacity(self.n_layers);
        let mut off = 0;
        for (i, o) in self.layer_dims() {
            let w = off..off + i * o;
            off = w.end;
            let b = if self.bias {
                let b = off..off + o;
                off = b.end;
                Some(b)
            } else {
                None
            };
            spans.push(LayerSpan {
                in_dim: i,
                out_dim: o,
                w,
                b,
            });
        }
        spans
    }

    /// Flat range of the final linear layer's parameters.
    pub fn last_layer_span(&self) -> std::ops::Range<usize> {
        let layout = self.param_layout();
        let last = layout.last().expect("n_layers >= 1");
        let end = last.b.as_ref().map(|b| b.end).unwrap_or(last.w.end);
        last.w.start..end
    }

    /// Positional encoding of raw coordinates: per input dim
    /// [x, sin(2^0 πx), cos(2^0 πx), …, sin(2^{n−1} πx), cos(2^{n−1} πx)].
    pub fn encode(&self, coords: &Tensor) -> Tensor {
        let Some(n_freq) = self.pos_enc else {
            return coords.clone();
        };
        let (m, d) = (coords.rows(), coords.cols());
        let width = d * (1 + 2 * n_freq);
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            for &x in coords.row(r) {
                data.push(x);
                for k in 0..n_freq {
                    let arg = std::f64::consts::PI * (1u64 << k) as f64 * x;
                    data.push(arg.sin());
                    data.push(arg.cos());
                }
            }
        }
        Tensor::new(vec![m, width], data).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct LayerSpan {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: std::ops::Range<usize>,
    pub b: Option<std::ops::Range<usize>>,
}

/// Draw fresh parameters. Sine nets follow the SIREN scheme: first layer
/// U(−1/fan_in, 1/fan_in), later layers U(−√(6/fan_in)/ω₀, √(6/fan_in)/ω₀);
/// ReLU nets use He-uniform weights with zero biases.
pub fn init_params(arch: &FieldArch, rng: &mut Rng) -> Result<Tensor> {
    arch.validate()?;
    let mut data = vec![0.0; arch.param_count()];
    for (l, span) in arch.param_layout().iter().enumerate() {
        let fan_in = span.in_dim as f64;
        let w_limit = match arch.activation {
            Activation::Sine { omega0 } => {
                if l == 0 {
                    1.0 / fan_in
                } else {
                    (6.0 / fan_in).sqrt() / omega0
                }
            }
            Activation::Relu => (6.0 / fan_in).sqrt(),
        };
        for slot in &mut data[span.w.clone()] {
            *slot = rng.uniform(-w_limit, w_limit);
        }
        if let Some(b) = &span.b {
            match arch.activation {
                Activation::Sine { .. } => {
                    let b_limit = 1.0 / fan_in.sqrt();
                    for slot in &mut data[b.clone()] {
                        *slot = rng.uniform(-b_limit, b_limit);
                    }
                }
                // He convention: biases start at zero.
                Activation::Relu => {}
            }
        }
    }
    Ok(Tensor::vector(data))
}

/// One field: an architecture plus its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub arch: FieldArch,
    pub params: Tensor,
}

impl FieldModel {
    pub fn new(arch: FieldArch, params: Tensor) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::dim(
                "FieldModel::new",
                arch.param_count(),
                params.len(),
            ));
        }
        Ok(FieldModel { arch, params })
    }

    pub fn init(arch: FieldArch, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&arch, rng)?;
        Ok(FieldModel { arch, params })
    }

    /// Forward pass that also returns the activations entering the final
    /// linear layer (the encoded input when there is only one layer). Used
    /// for closed-form last-layer score functions.
    pub fn predict_hidden(&self, coords: &Tensor) -> (Tensor, Tensor) {
        let spans = self.arch.param_layout();
        let p = self.params.data();
        let mut h = self.arch.encode(coords);
        let last = spans.len() - 1;
        let mut hidden = h.clone();
        for (l, span) in spans.iter().enumerate() {
            if l == last {
                hidden = h.clone();
            }
            let w = Tensor::new(
                vec![span.in_dim, span.out_dim],
                p[span.w.clone()].to_vec(),
            )
            .unwrap();
            let mut z = h.matmul(&w);
            if let Some(b) = &span.b {
                let bias = Tensor::vector(p[b.clone()].to_vec());
                z = z.add_row_vec(&bias);
            }
            h = if l == last {
                z
            } else {
                match self.arch.activation {
                    Activation::Sine { omega0 } => z.map(|x| (omega0 * x).sin()),
                    Activation::Relu => z.map(|x| x.max(0.0)),
                }
            };
        }
        (h, hidden)
    }

    /// Straight-line forward pass (no tape). Coordinates are (m, d_in).
    pub fn predict(&self, coords: &Tensor) -> Tensor {
        #[cfg(debug_assertions)]
        {
            if coords.data().iter().any(|&x| !(-1.0..=1.0).contains(&x)) {
                OUT_OF_RANGE_COORDS.fetch_add(1, Ordering::Relaxed);
            }
        }
        let spans = self.arch.param_layout();
        let p = self.params.data();
        let mut h = self.arch.encode(coords);
        let last = spans.len() - 1;
        for (l, span) in spans.iter().enumerate() {
            let w = Tensor::new(
                vec![span.in_dim, span.out_dim],
                p[span.w.clone()].to_vec(),
            )
            .unwrap();
            let mut z = h.matmul(&w);
            if let Some(b) = &span.b {
                let bias = Tensor::vector(p[b.clone()].to_vec());
                z = z.add_row_vec(&bias);
            }
            h = if l == last {
                z
            } else {
                match self.arch.activation {
                    Activation::Sine { omega0 } => z.map(|x| (omega0 * x).sin()),
                    Activation::Relu => z.map(|x| x.max(0.0)),
                }
            };
        }
        h
    }
}

/// Records the field's forward pass on a tape. `params` must be a flat
/// vector node matching the architecture's parameter count; returns the
/// output node of shape (m, d_out).
pub fn forward_tape(
    tape: &mut Tape,
    arch: &FieldArch,
    params: NodeId,
    coords: &Tensor,
) -> Result<NodeId> {
    arch.validate()?;
    let got = tape.value(params).len();
    if got != arch.param_count() {
        return Err(Error::dim("forward_tape params", arch.param_count(), got));
    }
    if coords.shape().len() != 2 || coords.cols() != arch.d_in {
        return Err(Error::dim(
            "forward_tape coords",
            format!("(m, {})", arch.d_in),
            format!("{:?}", coords.shape()),
        ));
    }
    let encoded = arch.encode(coords);
    let mut h = tape.constant(encoded);
    let spans = arch.param_layout();
    let last = spans.len() - 1;
    for (l, span) in spans.iter().enumerate() {
        let w = tape.segment(params, span.w.start, &[span.in_dim, span.out_dim]);
        let mut z = tape.matmul(h, w);
        if let Some(b) = &span.b {
            let bias = tape.segment(params, b.start, &[span.out_dim]);
            z = tape.add_row_vec(z, bias);
        }
        h = if l == last {
            z
        } else {
            match arch.activation {
                Activation::Sine { omega0 } => {
                    let scaled = tape.scale(z, omega0);
                    tape.sin(scaled)
                }
                Activation::Relu => tape.relu(z),
            }
        };
    }
    tape.check_finite()?;
    Ok(h)
}

/// Named architecture presets mirroring the configurations reported for the
/// image / audio / video / grid experiments, exposed for `inspect` and the
/// parameter-count checks.
pub fn preset(name: &str) -> Option<(FieldArch, usize)> {
    // (per-module arch, module count)
    let sine = FieldArch::sine;
    let relu = FieldArch::relu;
    let no_bias = |mut a: FieldArch| {
        a.bias = false;
        a
    };
    Some(match name {
        "image" => (sine(5, 256, 2, 3), 1),
        "image-module" => (sine(5, 128, 2, 3), 4),
        "audio" => (no_bias(sine(5, 256, 1, 1)), 1),
        "audio-module" => (no_bias(sine(5, 128, 1, 1)), 4),
        "video" => (sine(5, 256, 3, 3), 1),
        "video-module" => (sine(5, 128, 3, 3), 4),
        "grid" => (relu(10, 512, 1025, 3), 1),
        "grid-module" => (relu(10, 256, 516, 3), 4),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_trivial() {
        // One linear layer, 2 in, 3 out, with bias: 2·3 + 3 = 9.
        let arch = FieldArch::sine(1, 0, 2, 3);
        assert_eq!(arch.param_count(), 9);
    }

    #[test]
    fn param_count_reported_configs() {
        // Five-layer d=256 single net (d_in = d_out = 1, no biases): 197,120.
        let (audio, _) = preset("audio").unwrap();
        assert_eq!(audio.param_count(), 197_120);
        // Image config cross-checked against the reported 198.91K / 201.23K.
        let (img, _) = preset("image").unwrap();
        assert_eq!(img.param_count(), 198_915);
        let (img_mod, n) = preset("image-module").unwrap();
        assert_eq!(n * img_mod.param_count(), 201_228);
        // Grid (un-modularized and per-module) totals from the appendix table.
        let (grid, _) = preset("grid").unwrap();
        assert_eq!(grid.param_count(), 2_628_099);
        let (grid_mod, _) = preset("grid-module").unwrap();
        assert_eq!(grid_mod.param_count(), 659_459);
    }

    #[test]
    fn modular_audio_total_within_one_percent_of_single() {
        let (single, _) = preset("audio").unwrap();
        let (module, n) = preset("audio-module").unwrap();
        let total = (n * module.param_count()) as f64;
        let ratio = total / single.param_count() as f64;
        assert!((ratio - 1.0).abs() < 0.01, "ratio {ratio}");
    }

    #[test]
    fn init_is_reproducible() {
        let arch = FieldArch::sine(3, 8, 2, 1);
        let a = init_params(&arch, &mut Rng::with_stream(7, 1)).unwrap();
        let b = init_params(&arch, &mut Rng::with_stream(7, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_ranges_follow_siren_scheme() {
        let arch = FieldArch::sine(3, 64, 2, 1);
        let p = init_params(&arch, &mut Rng::new(3)).unwrap();
        let layout = arch.param_layout();
        let first = &layout[0];
        for &w in &p.data()[first.w.clone()] {
            assert!(w.abs() <= 1.0 / 2.0);
        }
        let second = &layout[1];
        let limit = (6.0_f64 / 64.0).sqrt() / DEFAULT_OMEGA0;
        for &w in &p.data()[second.w.clone()] {
            assert!(w.abs() <= limit);
        }
    }

    #[test]
    fn zero_weight_net_outputs_bias() {
        let arch = FieldArch::sine(2, 4, 1, 2);
        let mut params = Tensor::zeros(&[arch.param_count()]);
        let layout = arch.param_layout();
        let out_b = layout.last().unwrap().b.clone().unwrap();
        params.data_mut()[out_b][0] = 0.25;
        let model = FieldModel::new(arch, params).unwrap();
        let coords = Tensor::matrix(3, 1, vec![-0.5, 0.0, 0.5]).unwrap();
        let out = model.predict(&coords);
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.25, 0.0]);
        }
    }

    #[test]
    fn one_layer_sine_identity() {
        // y = sin(ω₀·w·x) with ω₀·w = π/2, x = 1 → 1.
        let mut arch = FieldArch::sine(2, 1, 1, 1);
        arch.bias = false;
        let w0 = std::f64::consts::FRAC_PI_2 / DEFAULT_OMEGA0;
        // Layers: 1→1 (hidden, sine), 1→1 (output). Output weight 1.
        let params = Tensor::vector(vec![w0, 1.0]);
        let model = FieldModel::new(arch, params).unwrap();
        let out = model.predict(&Tensor::matrix(1, 1, vec![1.0]).unwrap());
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn positional_encoding_width() {
        // d_in = 2, 4 frequencies → 2 + 2·2·4 = 18 features.
        let mut arch = FieldArch::relu(3, 8, 2, 1);
        arch.pos_enc = Some(4);
        assert_eq!(arch.encoded_in(), 18);
        let coords = Tensor::matrix(5, 2, vec![0.1; 10]).unwrap();
        assert_eq!(arch.encode(&coords).shape(), &[5, 18]);
        // Parameter count uses the expanded width.
        assert_eq!(
            arch.param_count(),
            18 * 8 + 8 + 8 * 8 + 8 + 8 * 1 + 1
        );
    }

    #[test]
    fn tape_forward_matches_straight_line() {
        for (name, arch) in [
            ("sine", FieldArch::sine(5, 8, 2, 3)),
            ("relu", FieldArch::relu(4, 8, 2, 3)),
        ] {
            let mut rng = Rng::with_stream(42, 9);
            let model = FieldModel::init(arch.clone(), &mut rng).unwrap();
            let mut coords = Vec::new();
            for i in 0..4 {
                for j in 0..2 {
                    coords.push(-1.0 + 0.4 * (i * 2 + j) as f64);
                }
            }
            let coords = Tensor::matrix(4, 2, coords).unwrap();
            let direct = model.predict(&coords);
            let mut tape = Tape::new();
            let p = tape.leaf(model.params.clone());
            let out = forward_tape(&mut tape, &arch, p, &coords).unwrap();
            assert_eq!(tape.value(out).data(), direct.data(), "{name} mismatch");
        }
    }

    #[test]
    fn sine_output_respects_linear_bound() {
        let arch = FieldArch::sine(4, 16, 2, 2);
        let mut rng = Rng::with_stream(5, 0);
        let model = FieldModel::init(arch.clone(), &mut rng).unwrap();
        let layout = arch.param_layout();
        let last = layout.last().unwrap();
        let p = model.params.data();
        // Per output dim: |out| ≤ Σ_i |W_i| + |b| since hidden values ∈ [−1,1].
        let mut bound = vec![0.0; last.out_dim];
        for i in 0..last.in_dim {
            for (j, b) in bound.iter_mut().enumerate() {
                *b += p[last.w.start + i * last.out_dim + j].abs();
            }
        }
        if let Some(bspan) = &last.b {
            for (j, b) in bound.iter_mut().enumerate() {
                *b += p[bspan.start + j].abs();
            }
        }
        let mut coords = Vec::new();
        let mut r = Rng::with_stream(6, 0);
        for _ in 0..100 {
            coords.push(r.uniform(-1.0, 1.0));
            coords.push(r.uniform(-1.0, 1.0));
        }
        let out = model.predict(&Tensor::matrix(100, 2, coords).unwrap());
        for row in 0..100 {
            for (j, &v) in out.row(row).iter().enumerate() {
                assert!(v.abs() <= bound[j] + 1e-12);
            }
        }
    }

    #[test]
    fn wrong_param_len_rejected() {
        let arch = FieldArch::sine(2, 4, 1, 1);
        let bad = Tensor::zeros(&[3]);
        assert!(FieldModel::new(arch, bad).is_err());
    }
}

//! Latent-conditioned SDF decoders.
//!
//! Two implementations share the [`SdfDecoder`] interface: an analytic
//! latent ellipsoid, exact for spheres, and a small feed-forward network
//! read from a `USMW` weight file. Both return first derivatives with
//! respect to the latent code and the query point.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LATENT_DIM: usize = 64;

/// Value and first derivatives of a decoded SDF sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfEval {
    pub value: f64,
    pub d_z: Vec<f64>,
    pub d_p: Vector3<f64>,
}

pub trait SdfDecoder: Send + Sync {
    fn latent_dim(&self) -> usize;

    fn decode(&self, z: &[f64], p: &Vector3<f64>) -> Result<f64>;

    fn decode_jacobians(&self, z: &[f64], p: &Vector3<f64>) -> Result<SdfEval>;

    /// Radius of a canonical-frame sphere enclosing the zero level set.
    fn bounding_radius(&self, z: &[f64]) -> f64;

    fn spec(&self) -> DecoderSpec;

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::invalid(format!(
                "latent code has {} components, decoder expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecoderSpec {
    AnalyticEllipsoid {
        latent_dim: usize,
    },
    Mlp {
        latent_dim: usize,
        widths: Vec<usize>,
        activation: Activation,
        latent_injection: usize,
    },
}

/// Gaussian over the latent code with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl LatentGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::invalid(format!(
                "latent mean has {} entries but variance has {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("latent variances must be nonnegative"));
        }
        Ok(Self { mean, var })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Ellipsoid whose radii are `exp(0.5 * z[0..3])`.
///
/// Uses the smooth approximation `k0 (k0 - 1) / k1` with `k0 = |p / r|` and
/// `k1 = |p / r^2|`. The remaining latent components do not affect the shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticEllipsoid {
    latent_dim: usize,
}

impl Default for AnalyticEllipsoid {
    fn default() -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
        }
    }
}

impl AnalyticEllipsoid {
    const SELECTOR_GAIN: f64 = 0.5;
    const ORIGIN_RADIUS: f64 = 1e-9;

    pub fn new(latent_dim: usize) -> Result<Self> {
        if latent_dim < 3 {
            return Err(Error::invalid("analytic decoder needs at least 3 latent components"));
        }
        Ok(Self { latent_dim })
    }

    pub fn radii(&self, z: &[f64]) -> Vector3<f64> {
        Vector3::new(z[0], z[1], z[2]).map(|v| (Self::SELECTOR_GAIN * v).exp())
    }

    /// Latent head producing the given radii.
    pub fn latent_for_radii(&self, radii: &Vector3<f64>) -> Vec<f64> {
        let mut z = vec![0.0; self.latent_dim];
        for i in 0..3 {
            z[i] = radii[i].ln() / Self::SELECTOR_GAIN;
        }
        z
    }
}

impl SdfDecoder for AnalyticEllipsoid {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn decode(&self, z: &[f64], p: &Vector3<f64>) -> Result<f64> {
        self.check_dim(z)?;
        let r = self.radii(z);
        if p.norm() < Self::ORIGIN_RADIUS {
            return Ok(-r.min());
        }
        let k0 = p.component_div(&r).norm();
        let k1 = p.component_div(&r.component_mul(&r)).norm();
        Ok(k0 * (k0 - 1.0) / k1)
    }

    fn decode_jacobians(&self, z: &[f64], p: &Vector3<f64>) -> Result<SdfEval> {
        self.check_dim(z)?;
        let r = self.radii(z);
        let mut d_z = vec![0.0; self.latent_dim];
        if p.norm() < Self::ORIGIN_RADIUS {
            let i = r.imin();
            d_z[i] = -Self::SELECTOR_GAIN * r[i];
            return Ok(SdfEval {
                value: -r[i],
                d_z,
                d_p: Vector3::zeros(),
            });
        }
        let a = p.component_div(&r);
        let b = a.component_div(&r);
        let k0 = a.norm();
        let k1 = b.norm();
        let value = k0 * (k0 - 1.0) / k1;
        let ds_dk0 = (2.0 * k0 - 1.0) / k1;
        let ds_dk1 = -value / k1;

        let mut d_p = Vector3::zeros();
        for i in 0..3 {
            let dk0_dp = a[i] / (k0 * r[i]);
            let dk1_dp = b[i] / (k1 * r[i] * r[i]);
            d_p[i] = ds_dk0 * dk0_dp + ds_dk1 * dk1_dp;

            let dk0_dr = -a[i] * a[i] / (k0 * r[i]);
            let dk1_dr = -2.0 * b[i] * b[i] / (k1 * r[i]);
            let ds_dr = ds_dk0 * dk0_dr + ds_dk1 * dk1_dr;
            d_z[i] = ds_dr * Self::SELECTOR_GAIN * r[i];
        }
        Ok(SdfEval { value, d_z, d_p })
    }

    fn bounding_radius(&self, z: &[f64]) -> f64 {
        self.radii(z).max()
    }

    fn spec(&self) -> DecoderSpec {
        DecoderSpec::AnalyticEllipsoid {
            latent_dim: self.latent_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Softplus,
    Tanh,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Softplus => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Softplus),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Relu),
            other => Err(Error::format("activation", format!("unknown code {other}"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => crate::numeric::sigmoid(x),
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dense layer with row-major `rows x cols` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::invalid(format!(
                "layer {rows}x{cols} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let acc = row
                .iter()
                .zip(x)
                .fold(self.bias[r] as f64, |acc, (&w, &xi)| acc + w as f64 * xi);
            out.push(acc);
        }
    }
}

/// Feed-forward SDF network. The input is `[z, p]`; hidden layers use one
/// activation and the single output goes through `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDecoder {
    layers: Vec<DenseLayer>,
    activation: Activation,
    latent_dim: usize,
}

const WEIGHT_MAGIC: &[u8; 4] = b"USMW";
const WEIGHT_VERSION: u32 = 1;
const OUTPUT_GAIN: f64 = 1.0;

impl MlpDecoder {
    pub fn new(layers: Vec<DenseLayer>, activation: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::format("layer_count", "network has no layers"))?;
        if first.cols < 4 {
            return Err(Error::format(
                "layer[0].cols",
                format!("input width {} leaves no latent components", first.cols),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].cols != pair[0].rows {
                return Err(Error::format(
                    format!("layer[{}].cols", i + 1),
                    format!("expected {} to match previous rows, found {}", pair[0].rows, pair[1].cols),
                ));
            }
        }
        let last = layers.len() - 1;
        if layers[last].rows != 1 {
            return Err(Error::format(
                format!("layer[{last}].rows"),
                format!("output layer must have 1 row, found {}", layers[last].rows),
            ));
        }
        let latent_dim = first.cols - 3;
        Ok(Self {
            layers,
            activation,
            latent_dim,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Pre-activations of every layer for input `[z, p]`.
    fn forward_trace(&self, z: &[f64], p: &Vector3<f64>) -> Vec<Vec<f64>> {
        let mut input: Vec<f64> = z.iter().copied().chain(p.iter().copied()).collect();
        let mut trace = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(layer.rows);
            layer.forward(&input, &mut pre);
            if i < last {
                input = pre.iter().map(|&x| self.activation.apply(x)).collect();
            }
            trace.push(pre);
        }
        trace
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.rows as u32).to_le_bytes());
            out.extend_from_slice(&(layer.cols as u32).to_le_bytes());
            for w in &layer.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for b in &layer.bias {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out.push(self.activation.code());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        let mut magic = [0u8; 4];
        reader.fill(&mut magic, "magic")?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::format("magic", format!("expected \"USMW\", found {magic:?}")));
        }
        let version = reader.u32("version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let count = reader.u32("layer_count")? as usize;
        if count == 0 {
            return Err(Error::format("layer_count", "network has no layers"));
        }
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let rows = reader.u32(&format!("layer[{i}].rows"))? as usize;
            let cols = reader.u32(&format!("layer[{i}].cols"))? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|&n| n <= reader.remaining() / 4)
                .ok_or_else(|| Error::format(format!("layer[{i}].weights"), "truncated"))?;
            let weights = reader.f32s(n, &format!("layer[{i}].weights"))?;
            let bias = reader.f32s(rows, &format!("layer[{i}].bias"))?;
            layers.push(DenseLayer {
                rows,
                cols,
                weights,
                bias,
            });
        }
        let mut code = [0u8; 1];
        reader.fill(&mut code, "activation")?;
        let activation = Activation::from_code(code[0])?;
        if reader.remaining() != 0 {
            return Err(Error::format(
                "trailer",
                format!("{} unexpected bytes after activation code", reader.remaining()),
            ));
        }
        Self::new(layers, activation)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn fill(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        let mut slice = &self.bytes[self.pos..];
        slice
            .read_exact(buf)
            .map_err(|_| Error::format(field, "truncated"))?;
        self.pos += buf.len();
        Ok(())
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        if self.remaining() < n * 4 {
            return Err(Error::format(field, "truncated"));
        }
        let out = self.bytes[self.pos..self.pos + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos += n * 4;
        Ok(out)
    }
}

impl SdfDecoder for MlpDecoder {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn decode(&self, z: &[f64], p: &Vector3<f64>) -> Result<f64> {
        self.check_dim(z)?;
        let trace = self.forward_trace(z, p);
        Ok(OUTPUT_GAIN * trace.last().unwrap()[0].tanh())
    }

    fn decode_jacobians(&self, z: &[f64], p: &Vector3<f64>) -> Result<SdfEval> {
        self.check_dim(z)?;
        let trace = self.forward_trace(z, p);
        let out_pre = trace.last().unwrap()[0];
        let value = OUTPUT_GAIN * out_pre.tanh();

        // Reverse accumulation: `grad` holds dS/d(pre-activation) of the
        // current layer, then is pulled back through its weights.
        let mut grad = vec![OUTPUT_GAIN * (1.0 - out_pre.tanh().powi(2))];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut input_grad = vec![0.0; layer.cols];
            for (r, &g) in grad.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                for (acc, &w) in input_grad.iter_mut().zip(row) {
                    *acc += g * w as f64;
                }
            }
            if i > 0 {
                for (g, &pre) in input_grad.iter_mut().zip(&trace[i - 1]) {
                    *g *= self.activation.derivative(pre);
                }
            }
            grad = input_grad;
        }
        let d_p = Vector3::new(
            grad[self.latent_dim],
            grad[self.latent_dim + 1],
            grad[self.latent_dim + 2],
        );
        grad.truncate(self.latent_dim);
        Ok(SdfEval {
            value,
            d_z: grad,
            d_p,
        })
    }

    fn bounding_radius(&self, _z: &[f64]) -> f64 {
        1.0
    }

    fn spec(&self) -> DecoderSpec {
        DecoderSpec::Mlp {
            latent_dim: self.latent_dim,
            widths: self.layers.iter().map(|l| l.rows).collect(),
            activation: self.activation,
            latent_injection: 0,
        }
    }
}

/// Runtime decoder selection, as parsed from `analytic` or `mlp:<path>`.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Analytic(AnalyticEllipsoid),
    Mlp(MlpDecoder),
}

impl Decoder {
    pub fn from_selector(selector: &str) -> Result<Self> {
        if selector == "analytic" {
            return Ok(Decoder::Analytic(AnalyticEllipsoid::default()));
        }
        if let Some(path) = selector.strip_prefix("mlp:") {
            return Ok(Decoder::Mlp(MlpDecoder::load(path)?));
        }
        Err(Error::invalid(format!(
            "decoder selector {selector:?} is neither \"analytic\" nor \"mlp:<path>\""
        )))
    }

    fn inner(&self) -> &dyn SdfDecoder {
        match self {
            Decoder::Analytic(d) => d,
            Decoder::Mlp(d) => d,
        }
    }
}

impl SdfDecoder for Decoder {
    fn latent_dim(&self) -> usize {
        self.inner().latent_dim()
    }

    fn decode(&self, z: &[f64], p: &Vector3<f64>) -> Result<f64> {
        self.inner().decode(z, p)
    }

    fn decode_jacobians(&self, z: &[f64], p: &Vector3<f64>) -> Result<SdfEval> {
        self.inner().decode_jacobians(z, p)
    }

    fn bounding_radius(&self, z: &[f64]) -> f64 {
        self.inner().bounding_radius(z)
    }

    fn spec(&self) -> DecoderSpec {
        self.inner().spec()
    }
}

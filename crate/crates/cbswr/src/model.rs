//! The four learnable components: encoder, embedding module, decoder and
//! clustering head, with a small convolutional default architecture.
//!
//! The encoder downsamples twice (stride-2 conv blocks), flattens and
//! projects to the representation space. The embedding module is a single
//! fully connected layer followed by L2 normalization, so embeddings live on
//! the unit sphere. The decoder mirrors the encoder with transposed
//! convolutions and a sigmoid output bound. The head is an affine map from
//! embedding space to cluster logits.

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::data::ImageSample;
use crate::error::{Error, Result};

/// Encoder output `r = G(I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationVector {
    pub values: Array1<f64>,
}

/// Unit-norm metric-space vector `f = F(r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Array1<f64>,
}

impl EmbeddingVector {
    /// Validates the unit-norm invariant (within 1e-6).
    pub fn new(values: Array1<f64>) -> Result<Self> {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!(
                "embedding norm {norm} is not 1 within 1e-6"
            )));
        }
        Ok(EmbeddingVector { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.dot(&other.values)
    }
}

/// Pre-softmax clustering scores, one per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsVector {
    pub values: Array1<f64>,
}

/// Architecture hyperparameters. Spatial dims must be divisible by 4 because
/// the encoder halves them twice.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_shape: (usize, usize, usize),
    pub conv_channels: (usize, usize),
    /// Representation dimension d_r.
    pub repr_dim: usize,
    /// Embedding dimension d_e.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_shape: (1, 16, 16),
            conv_channels: (8, 16),
            repr_dim: 64,
            embed_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_shape;
        if c == 0 {
            return Err(Error::Config("model.image_shape needs at least one channel".into()));
        }
        if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "model.image_shape spatial dims ({h}, {w}) must be multiples of 4"
            )));
        }
        if self.conv_channels.0 == 0 || self.conv_channels.1 == 0 {
            return Err(Error::Config("model.conv_channels must be positive".into()));
        }
        if self.repr_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        Ok(())
    }

    /// Flattened size after the two stride-2 conv blocks.
    pub fn conv_flat_dim(&self) -> usize {
        let (_, h, w) = self.image_shape;
        self.conv_channels.1 * (h / 4) * (w / 4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1_w: Array4<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array4<f64>,
    pub conv2_b: Array1<f64>,
    pub fc_w: Array2<f64>,
    pub fc_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub fc_w: Array2<f64>,
    pub fc_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub fc_w: Array2<f64>,
    pub fc_b: Array1<f64>,
    pub deconv1_w: Array4<f64>,
    pub deconv1_b: Array1<f64>,
    pub deconv2_w: Array4<f64>,
    pub deconv2_b: Array1<f64>,
}

/// Softmax classifier parameters (theta).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHeadParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Which of the four components a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Embedding,
    Decoder,
    ClusterHead,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Embedding => "embedding",
            ParamGroup::Decoder => "decoder",
            ParamGroup::ClusterHead => "cluster_head",
        }
    }
}

/// Canonical parameter names, in the fixed ordering used by the optimizer,
/// checkpoints and gradient extraction.
pub const PARAM_NAMES: [&str; 16] = [
    "encoder.conv1_w",
    "encoder.conv1_b",
    "encoder.conv2_w",
    "encoder.conv2_b",
    "encoder.fc_w",
    "encoder.fc_b",
    "embedding.fc_w",
    "embedding.fc_b",
    "decoder.fc_w",
    "decoder.fc_b",
    "decoder.deconv1_w",
    "decoder.deconv1_b",
    "decoder.deconv2_w",
    "decoder.deconv2_b",
    "cluster_head.w",
    "cluster_head.b",
];

pub const PARAM_GROUPS: [ParamGroup; 16] = [
    ParamGroup::Encoder,
    ParamGroup::Encoder,
    ParamGroup::Encoder,
    ParamGroup::Encoder,
    ParamGroup::Encoder,
    ParamGroup::Encoder,
    ParamGroup::Embedding,
    ParamGroup::Embedding,
    ParamGroup::Decoder,
    ParamGroup::Decoder,
    ParamGroup::Decoder,
    ParamGroup::Decoder,
    ParamGroup::Decoder,
    ParamGroup::Decoder,
    ParamGroup::ClusterHead,
    ParamGroup::ClusterHead,
];

/// All learnable parameters plus the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub clusters: usize,
    pub encoder: EncoderParams,
    pub embedding: EmbeddingParams,
    pub decoder: DecoderParams,
    pub head: ClusterHeadParams,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect()
}

impl ModelBundle {
    /// Seeded uniform fan-in initialization; biases start at zero. The draw
    /// order follows [`PARAM_NAMES`], so the same seed reproduces the same
    /// parameters bit-for-bit.
    pub fn init(config: &ModelConfig, clusters: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if clusters == 0 {
            return Err(Error::Config("cluster count must be positive".into()));
        }
        let (c, _, _) = config.image_shape;
        let (c1, c2) = config.conv_channels;
        let flat = config.conv_flat_dim();
        let d_r = config.repr_dim;
        let d_e = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let conv1_w = Array4::from_shape_vec(
            (c1, c, 3, 3),
            uniform_fan_in(&mut rng, c * 9, c1 * c * 9),
        )
        .expect("conv1 shape");
        let conv2_w = Array4::from_shape_vec(
            (c2, c1, 3, 3),
            uniform_fan_in(&mut rng, c1 * 9, c2 * c1 * 9),
        )
        .expect("conv2 shape");
        let enc_fc_w =
            Array2::from_shape_vec((d_r, flat), uniform_fan_in(&mut rng, flat, d_r * flat))
                .expect("enc fc shape");
        let emb_fc_w =
            Array2::from_shape_vec((d_e, d_r), uniform_fan_in(&mut rng, d_r, d_e * d_r))
                .expect("emb fc shape");
        let dec_fc_w =
            Array2::from_shape_vec((flat, d_r), uniform_fan_in(&mut rng, d_r, flat * d_r))
                .expect("dec fc shape");
        let deconv1_w = Array4::from_shape_vec(
            (c2, c1, 4, 4),
            uniform_fan_in(&mut rng, c2 * 16, c2 * c1 * 16),
        )
        .expect("deconv1 shape");
        let deconv2_w = Array4::from_shape_vec(
            (c1, c, 4, 4),
            uniform_fan_in(&mut rng, c1 * 16, c1 * c * 16),
        )
        .expect("deconv2 shape");
        let head_w =
            Array2::from_shape_vec((clusters, d_e), uniform_fan_in(&mut rng, d_e, clusters * d_e))
                .expect("head shape");

        Ok(ModelBundle {
            config: config.clone(),
            clusters,
            encoder: EncoderParams {
                conv1_w,
                conv1_b: Array1::zeros(c1),
                conv2_w,
                conv2_b: Array1::zeros(c2),
                fc_w: enc_fc_w,
                fc_b: Array1::zeros(d_r),
            },
            embedding: EmbeddingParams { fc_w: emb_fc_w, fc_b: Array1::zeros(d_e) },
            decoder: DecoderParams {
                fc_w: dec_fc_w,
                fc_b: Array1::zeros(flat),
                deconv1_w,
                deconv1_b: Array1::zeros(c1),
                deconv2_w,
                deconv2_b: Array1::zeros(c),
            },
            head: ClusterHeadParams {
                w: head_w,
                b: Array1::zeros(clusters),
            },
        })
    }

    /// Read-only views over all parameters in canonical order.
    pub fn param_views(&self) -> Vec<ArrayViewD<'_, f64>> {
        vec![
            self.encoder.conv1_w.view().into_dyn(),
            self.encoder.conv1_b.view().into_dyn(),
            self.encoder.conv2_w.view().into_dyn(),
            self.encoder.conv2_b.view().into_dyn(),
            self.encoder.fc_w.view().into_dyn(),
            self.encoder.fc_b.view().into_dyn(),
            self.embedding.fc_w.view().into_dyn(),
            self.embedding.fc_b.view().into_dyn(),
            self.decoder.fc_w.view().into_dyn(),
            self.decoder.fc_b.view().into_dyn(),
            self.decoder.deconv1_w.view().into_dyn(),
            self.decoder.deconv1_b.view().into_dyn(),
            self.decoder.deconv2_w.view().into_dyn(),
            self.decoder.deconv2_b.view().into_dyn(),
            self.head.w.view().into_dyn(),
            self.head.b.view().into_dyn(),
        ]
    }

    /// Mutable views over all parameters in canonical order.
    pub fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        vec![
            self.encoder.conv1_w.view_mut().into_dyn(),
            self.encoder.conv1_b.view_mut().into_dyn(),
            self.encoder.conv2_w.view_mut().into_dyn(),
            self.encoder.conv2_b.view_mut().into_dyn(),
            self.encoder.fc_w.view_mut().into_dyn(),
            self.encoder.fc_b.view_mut().into_dyn(),
            self.embedding.fc_w.view_mut().into_dyn(),
            self.embedding.fc_b.view_mut().into_dyn(),
            self.decoder.fc_w.view_mut().into_dyn(),
            self.decoder.fc_b.view_mut().into_dyn(),
            self.decoder.deconv1_w.view_mut().into_dyn(),
            self.decoder.deconv1_b.view_mut().into_dyn(),
            self.decoder.deconv2_w.view_mut().into_dyn(),
            self.decoder.deconv2_b.view_mut().into_dyn(),
            self.head.w.view_mut().into_dyn(),
            self.head.b.view_mut().into_dyn(),
        ]
    }

    pub fn total_params(&self) -> usize {
        self.param_views().iter().map(|v| v.len()).sum()
    }

    /// Assemble a batch into an `[m, C, H, W]` array, checking each image
    /// against the configured shape.
    pub fn batch_array(&self, batch: &[ImageSample]) -> Result<Array4<f64>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (c, h, w) = self.config.image_shape;
        let mut out = Array4::<f64>::zeros((batch.len(), c, h, w));
        for (i, img) in batch.iter().enumerate() {
            if img.shape() != (c, h, w) {
                return Err(Error::Config(format!(
                    "image sample {} has shape {:?}, config expects ({c}, {h}, {w})",
                    img.sample_id,
                    img.shape()
                )));
            }
            out.index_axis_mut(ndarray::Axis(0), i).assign(&img.pixels);
        }
        Ok(out)
    }
}

/// Tape node ids for every parameter, used to build differentiable forward
/// passes and to read gradients back out.
pub struct GraphParams {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub enc_fc_w: NodeId,
    pub enc_fc_b: NodeId,
    pub emb_w: NodeId,
    pub emb_b: NodeId,
    pub dec_fc_w: NodeId,
    pub dec_fc_b: NodeId,
    pub deconv1_w: NodeId,
    pub deconv1_b: NodeId,
    pub deconv2_w: NodeId,
    pub deconv2_b: NodeId,
    pub head_w: NodeId,
    pub head_b: NodeId,
}

impl GraphParams {
    /// Node ids in canonical parameter order.
    pub fn ordered(&self) -> [NodeId; 16] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.enc_fc_w,
            self.enc_fc_b,
            self.emb_w,
            self.emb_b,
            self.dec_fc_w,
            self.dec_fc_b,
            self.deconv1_w,
            self.deconv1_b,
            self.deconv2_w,
            self.deconv2_b,
            self.head_w,
            self.head_b,
        ]
    }
}

impl ModelBundle {
    /// Insert every parameter as a tape leaf.
    pub fn graph_params(&self, tape: &mut Tape) -> GraphParams {
        GraphParams {
            conv1_w: tape.leaf(self.encoder.conv1_w.clone().into_dyn()),
            conv1_b: tape.leaf(self.encoder.conv1_b.clone().into_dyn()),
            conv2_w: tape.leaf(self.encoder.conv2_w.clone().into_dyn()),
            conv2_b: tape.leaf(self.encoder.conv2_b.clone().into_dyn()),
            enc_fc_w: tape.leaf(self.encoder.fc_w.clone().into_dyn()),
            enc_fc_b: tape.leaf(self.encoder.fc_b.clone().into_dyn()),
            emb_w: tape.leaf(self.embedding.fc_w.clone().into_dyn()),
            emb_b: tape.leaf(self.embedding.fc_b.clone().into_dyn()),
            dec_fc_w: tape.leaf(self.decoder.fc_w.clone().into_dyn()),
            dec_fc_b: tape.leaf(self.decoder.fc_b.clone().into_dyn()),
            deconv1_w: tape.leaf(self.decoder.deconv1_w.clone().into_dyn()),
            deconv1_b: tape.leaf(self.decoder.deconv1_b.clone().into_dyn()),
            deconv2_w: tape.leaf(self.decoder.deconv2_w.clone().into_dyn()),
            deconv2_b: tape.leaf(self.decoder.deconv2_b.clone().into_dyn()),
            head_w: tape.leaf(self.head.w.clone().into_dyn()),
            head_b: tape.leaf(self.head.b.clone().into_dyn()),
        }
    }

    /// Encoder G: `[m, C, H, W] -> [m, d_r]`. Pixels are shifted from
    /// [0, 1] to [-0.5, 0.5] before the first convolution so the shared DC
    /// component does not dominate the representation geometry.
    pub fn encode_graph(&self, tape: &mut Tape, gp: &GraphParams, x: NodeId) -> NodeId {
        let half = tape.leaf(ndarray::ArrayD::from_elem(tape.value(x).raw_dim(), 0.5));
        let x = tape.sub(x, half);
        let c1 = tape.conv2d(x, gp.conv1_w, gp.conv1_b, 2, 1);
        let a1 = tape.tanh(c1);
        let c2 = tape.conv2d(a1, gp.conv2_w, gp.conv2_b, 2, 1);
        let a2 = tape.tanh(c2);
        let m = tape.value(a2).shape()[0];
        let flat = tape.reshape(a2, &[m, self.config.conv_flat_dim()]);
        let wt = tape.transpose(gp.enc_fc_w);
        let proj = tape.matmul(flat, wt);
        tape.add_row_bias(proj, gp.enc_fc_b)
    }

    /// Embedding module F: `[m, d_r] -> [m, d_e]`, rows on the unit sphere.
    pub fn embed_graph(&self, tape: &mut Tape, gp: &GraphParams, r: NodeId) -> Result<NodeId> {
        let wt = tape.transpose(gp.emb_w);
        let proj = tape.matmul(r, wt);
        let pre = tape.add_row_bias(proj, gp.emb_b);
        tape.l2_normalize_rows(pre)
    }

    /// Clustering head: `[m, d_e] -> [m, K]` logits, affine in the input.
    pub fn logits_graph(&self, tape: &mut Tape, gp: &GraphParams, f: NodeId) -> NodeId {
        let wt = tape.transpose(gp.head_w);
        let proj = tape.matmul(f, wt);
        tape.add_row_bias(proj, gp.head_b)
    }

    /// Decoder D: `[n, d_r] -> [n, C, H, W]`, sigmoid-bounded to [0, 1].
    pub fn decode_graph(&self, tape: &mut Tape, gp: &GraphParams, r: NodeId) -> NodeId {
        let (c, h, w) = self.config.image_shape;
        let (_, c2) = self.config.conv_channels;
        let n = tape.value(r).shape()[0];
        let wt = tape.transpose(gp.dec_fc_w);
        let proj = tape.matmul(r, wt);
        let pre = tape.add_row_bias(proj, gp.dec_fc_b);
        let act = tape.tanh(pre);
        let grid = tape.reshape(act, &[n, c2, h / 4, w / 4]);
        let d1 = tape.conv_transpose2d(grid, gp.deconv1_w, gp.deconv1_b, 2, 1);
        let a1 = tape.tanh(d1);
        let d2 = tape.conv_transpose2d(a1, gp.deconv2_w, gp.deconv2_b, 2, 1);
        debug_assert_eq!(tape.value(d2).shape(), &[n, c, h, w]);
        tape.sigmoid(d2)
    }

    /// Forward pass of G over a batch.
    pub fn encode(&self, batch: &[ImageSample]) -> Result<Vec<RepresentationVector>> {
        let x = self.batch_array(batch)?;
        let mut tape = Tape::new();
        let gp = self.graph_params(&mut tape);
        let xid = tape.leaf(x.into_dyn());
        let r = self.encode_graph(&mut tape, &gp, xid);
        let rv = tape.value(r).view().into_dimensionality::<Ix2>().expect("rank 2");
        Ok(rv
            .rows()
            .into_iter()
            .map(|row| RepresentationVector { values: row.to_owned() })
            .collect())
    }

    /// Forward pass of F over one representation-space vector (image
    /// representations and centroid representations alike).
    pub fn embed(&self, r: &RepresentationVector) -> Result<EmbeddingVector> {
        if r.values.len() != self.config.repr_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("representation of dim {}", self.config.repr_dim),
                actual: format!("dim {}", r.values.len()),
            });
        }
        if r.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { component: "representation", value: f64::NAN });
        }
        let mut tape = Tape::new();
        let gp = self.graph_params(&mut tape);
        let rid = tape.leaf(
            Array2::from_shape_vec((1, r.values.len()), r.values.to_vec())
                .expect("row vector")
                .into_dyn(),
        );
        let f = self.embed_graph(&mut tape, &gp, rid)?;
        let row = tape.value(f).view().into_dimensionality::<Ix2>().expect("rank 2").row(0).to_owned();
        EmbeddingVector::new(row)
    }

    /// Forward pass of D from representation space back to image space.
    /// Accepts centroid representations; any d_r vector decodes.
    pub fn decode(&self, r: &RepresentationVector) -> Result<Array3<f64>> {
        if r.values.len() != self.config.repr_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("representation of dim {}", self.config.repr_dim),
                actual: format!("dim {}", r.values.len()),
            });
        }
        let mut tape = Tape::new();
        let gp = self.graph_params(&mut tape);
        let rid = tape.leaf(
            Array2::from_shape_vec((1, r.values.len()), r.values.to_vec())
                .expect("row vector")
                .into_dyn(),
        );
        let img = self.decode_graph(&mut tape, &gp, rid);
        let v = tape.value(img).view().into_dimensionality::<Ix4>().expect("rank 4");
        Ok(v.index_axis(ndarray::Axis(0), 0).to_owned())
    }

    /// Clustering scores for one embedding.
    pub fn cluster_logits(&self, f: &EmbeddingVector) -> Result<LogitsVector> {
        if f.values().len() != self.config.embed_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("embedding of dim {}", self.config.embed_dim),
                actual: format!("dim {}", f.values().len()),
            });
        }
        let logits = self.head.w.dot(f.values()) + &self.head.b;
        Ok(LogitsVector { values: logits })
    }
}

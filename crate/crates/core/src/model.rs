//! The fusion network shared by teacher and student.
//!
//! Per modality: 1-D temporal convolution to `d` channels plus sinusoidal
//! positions, then one transformer encoder shared across modalities. The
//! three encoded sequences are concatenated on the feature axis, averaged
//! over time into the joint representation `H` (length `3d`), and a two-layer
//! head maps `H` to class logits.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::{Modality, ModalitySample};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, join, positional_encoding, softmax, Conv1d, Encoder, EncoderCache, Linear, Params};
use crate::scalar::Scalar;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionNetConfig {
    /// Embedding dimension `d`.
    pub d: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub conv_kernel: usize,
    /// Input feature dims `d_L, d_A, d_V`.
    pub input_dims: [usize; 3],
}

impl Default for FusionNetConfig {
    fn default() -> Self {
        FusionNetConfig {
            d: 40,
            num_heads: 10,
            num_layers: 2,
            ffn_dim: 160,
            dropout: 0.1,
            num_classes: 4,
            conv_kernel: 3,
            input_dims: [12, 8, 6],
        }
    }
}

impl FusionNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 || self.num_heads == 0 || !self.d.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d = {} must be a positive multiple of num_heads = {}",
                self.d, self.num_heads
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2".into());
        }
        if self.ffn_dim == 0 || self.input_dims.contains(&0) {
            return bad("ffn_dim and input dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn joint_dim(&self) -> usize {
        3 * self.d
    }
}

pub type BatchOutput<T> = (Vec<JointRepresentation<T>>, Vec<Response<T>>);

/// Pooled fused vector `H` of length `3d`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRepresentation<T> {
    pub h: Array1<T>,
}

/// Class logits and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Response<T> {
    pub logits: Array1<T>,
    pub probs: Array1<T>,
}

impl<T: Scalar> Response<T> {
    pub fn from_logits(logits: Array1<T>) -> Self {
        let probs = softmax(&logits);
        Response { logits, probs }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.probs.iter().enumerate() {
            if v > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Concatenates `(T, d)` encodings on the feature axis and averages over time.
pub fn fuse<T: Scalar>(e_l: ArrayView2<T>, e_a: ArrayView2<T>, e_v: ArrayView2<T>) -> Result<JointRepresentation<T>> {
    if e_l.nrows() != e_a.nrows() || e_l.nrows() != e_v.nrows() {
        return Err(Error::Shape(format!(
            "fusion needs equal sequence lengths, got {}/{}/{}; pad or truncate the inputs \
             (e.g. --pad-to-max)",
            e_l.nrows(),
            e_a.nrows(),
            e_v.nrows()
        )));
    }
    if e_l.nrows() == 0 {
        return Err(Error::Shape("cannot pool an empty sequence".into()));
    }
    let z = concatenate(Axis(1), &[e_l, e_a, e_v]).expect("equal rows");
    let h = z.mean_axis(Axis(0)).expect("nonempty");
    Ok(JointRepresentation { h })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNet<T> {
    pub config: FusionNetConfig,
    pub convs: [Conv1d<T>; 3],
    pub encoder: Encoder<T>,
    pub head1: Linear<T>,
    pub head2: Linear<T>,
}

/// Intermediate values of one training-mode forward pass.
pub struct SampleTrace<T> {
    cols: [Array2<T>; 3],
    enc: [EncoderCache<T>; 3],
    frames: [usize; 3],
    h: Array1<T>,
    head_pre: Array1<T>,
    head_act: Array1<T>,
}

fn to3<X>(v: Vec<X>) -> [X; 3] {
    v.try_into().ok().expect("three modalities")
}

impl<T: Scalar> FusionNet<T> {
    pub fn new(config: FusionNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed, &[0x4E37]);
        let c = &config;
        let convs = std::array::from_fn(|m| Conv1d::new(&mut rng, c.input_dims[m], c.d, c.conv_kernel));
        let encoder = Encoder::new(&mut rng, c.d, c.num_heads, c.ffn_dim, c.num_layers);
        let head1 = Linear::new(&mut rng, c.joint_dim(), c.joint_dim());
        let head2 = Linear::new(&mut rng, c.joint_dim(), c.num_classes);
        Ok(FusionNet {
            config,
            convs,
            encoder,
            head1,
            head2,
        })
    }

    /// Same shapes, all parameters zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(T::zero());
        z
    }

    fn check_input(&self, m: Modality, x: ArrayView2<T>) -> Result<()> {
        let expect = self.config.input_dims[m.index()];
        if x.ncols() != expect {
            return Err(Error::Shape(format!(
                "modality {m}: expected feature dim {expect}, got {}",
                x.ncols()
            )));
        }
        Ok(())
    }

    /// `Conv(x) + PE(T, d)`.
    pub fn embed_modality(&self, m: Modality, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(m, x)?;
        let (y, _) = self.convs[m.index()].forward(x);
        Ok(y + &positional_encoding(x.nrows(), self.config.d))
    }

    /// Eval-mode encoder (no dropout).
    pub fn encode(&self, f: ArrayView2<T>) -> Array2<T> {
        self.encoder.forward(f, None, 0.0).0
    }

    pub fn respond(&self, h: &JointRepresentation<T>) -> Response<T> {
        let x = h.h.view().insert_axis(Axis(0));
        let a = self.head1.forward(x).mapv(gelu);
        let logits = self.head2.forward(a.view()).remove_axis(Axis(0));
        Response::from_logits(logits)
    }

    pub fn forward_sample(&self, sample: &ModalitySample<T>) -> Result<(JointRepresentation<T>, Response<T>)> {
        let mut enc = Vec::with_capacity(3);
        for m in Modality::ALL {
            let f = self.embed_modality(m, sample.modality(m).view())?;
            enc.push(self.encode(f.view()));
        }
        let h = fuse(enc[0].view(), enc[1].view(), enc[2].view())?;
        let r = self.respond(&h);
        Ok((h, r))
    }

    /// Eval-mode forward over a batch. Samples are processed independently.
    pub fn forward(&self, batch: &[&ModalitySample<T>]) -> Result<BatchOutput<T>> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut hs = Vec::with_capacity(batch.len());
        let mut rs = Vec::with_capacity(batch.len());
        for s in batch {
            let (h, r) = self.forward_sample(s)?;
            hs.push(h);
            rs.push(r);
        }
        Ok((hs, rs))
    }

    /// Forward pass recording what [`FusionNet::backward`] needs. Dropout is
    /// active iff `rng` is given.
    pub fn forward_trace(
        &self,
        sample: &ModalitySample<T>,
        mut rng: Option<&mut Rng>,
    ) -> Result<(SampleTrace<T>, Array1<T>)> {
        let d = self.config.d;
        let mut cols = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        let mut outs = Vec::with_capacity(3);
        let mut frames = [0; 3];
        for m in Modality::ALL {
            let x = sample.modality(m).view();
            self.check_input(m, x)?;
            let (y, c) = self.convs[m.index()].forward(x);
            let f = y + &positional_encoding(x.nrows(), d);
            let (e, cache) = self.encoder.forward(f.view(), rng.as_deref_mut(), self.config.dropout);
            frames[m.index()] = x.nrows();
            cols.push(c);
            caches.push(cache);
            outs.push(e);
        }
        let h = fuse(outs[0].view(), outs[1].view(), outs[2].view())?.h;
        let head_pre = self.head1.forward(h.view().insert_axis(Axis(0))).remove_axis(Axis(0));
        let head_act = head_pre.mapv(gelu);
        let logits = self
            .head2
            .forward(head_act.view().insert_axis(Axis(0)))
            .remove_axis(Axis(0));
        let trace = SampleTrace {
            cols: to3(cols),
            enc: to3(caches),
            frames,
            h,
            head_pre,
            head_act,
        };
        Ok((trace, logits))
    }

    pub fn trace_h<'a>(&self, trace: &'a SampleTrace<T>) -> &'a Array1<T> {
        &trace.h
    }

    /// Accumulates parameter gradients given `dL/dH` (from representation
    /// losses) and `dL/dlogits`.
    pub fn backward(&self, trace: &SampleTrace<T>, d_h: &Array1<T>, d_logits: &Array1<T>, grad: &mut FusionNet<T>) {
        let row = |v: &Array1<T>| v.clone().insert_axis(Axis(0));
        let d_act = self
            .head2
            .backward(row(&trace.head_act).view(), row(d_logits).view(), &mut grad.head2);
        let d_pre = d_act.remove_axis(Axis(0)) * &trace.head_pre.mapv(gelu_grad);
        let d_h_head = self
            .head1
            .backward(row(&trace.h).view(), row(&d_pre).view(), &mut grad.head1)
            .remove_axis(Axis(0));
        let d_h_total = d_h_head + d_h;
        let d = self.config.d;
        for m in 0..3 {
            let frames = trace.frames[m];
            let per_frame = d_h_total.slice(s![m * d..(m + 1) * d]).to_owned() / T::from_usize_lossy(frames);
            let d_e = per_frame
                .insert_axis(Axis(0))
                .broadcast((frames, d))
                .expect("broadcast")
                .to_owned();
            let d_f = self.encoder.backward(&trace.enc[m], d_e.view(), &mut grad.encoder);
            self.convs[m].backward_params(&trace.cols[m], d_f.view(), &mut grad.convs[m]);
        }
    }
}

impl<T: Scalar> Params<T> for FusionNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (m, conv) in self.convs.iter().enumerate() {
            conv.visit(&join(prefix, &format!("conv_{}", Modality::from_index(m))), f);
        }
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head1.visit(&join(prefix, "head1"), f);
        self.head2.visit(&join(prefix, "head2"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for conv in &mut self.convs {
            conv.visit_mut(f);
        }
        self.encoder.visit_mut(f);
        self.head1.visit_mut(f);
        self.head2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> FusionNetConfig {
        FusionNetConfig {
            d: 4,
            num_heads: 2,
            num_layers: 1,
            ffn_dim: 8,
            dropout: 0.0,
            num_classes: 3,
            conv_kernel: 3,
            input_dims: [3, 2, 2],
        }
    }

    #[test]
    fn config_validation() {
        assert!(FusionNetConfig { num_heads: 3, ..tiny() }.validate().is_err());
        assert!(FusionNetConfig {
            conv_kernel: 2,
            ..tiny()
        }
        .validate()
        .is_err());
        FusionNetConfig::default().validate().unwrap();
    }

    #[test]
    fn fuse_means_columns() {
        let h = fuse(
            array![[1.0], [3.0]].view(),
            array![[2.0], [4.0]].view(),
            array![[0.0], [0.0]].view(),
        )
        .unwrap();
        assert_eq!(h.h, array![2.0, 3.0, 0.0]);
    }

    #[test]
    fn fuse_rejects_unequal_lengths() {
        let err = fuse(
            Array2::<f64>::zeros((2, 1)).view(),
            Array2::zeros((3, 1)).view(),
            Array2::zeros((2, 1)).view(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn zero_input_embeds_to_positions() {
        let mut net = FusionNet::<f64>::new(tiny(), 0).unwrap();
        net.convs[0].b.fill(0.0);
        let x = Array2::zeros((5, 3));
        let f = net.embed_modality(Modality::Language, x.view()).unwrap();
        assert_eq!(f, positional_encoding::<f64>(5, 4));
    }

    #[test]
    fn embed_rejects_wrong_dim() {
        let net = FusionNet::<f64>::new(tiny(), 0).unwrap();
        assert!(net
            .embed_modality(Modality::Audio, Array2::zeros((5, 3)).view())
            .is_err());
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let mut net = FusionNet::<f64>::new(tiny(), 0).unwrap();
        net.head2.fill(0.0);
        let r = net.respond(&JointRepresentation {
            h: Array1::from_elem(12, 0.3),
        });
        for &p in &r.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }
}

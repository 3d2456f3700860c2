// SPDX-License-Identifier: MIT OR Apache-2.0

//! The dual-space auto-encoder.
//!
//! Two ReLU MLP encoders map a representation `x` into a truthful latent
//! `h_truth` and a semantic latent `h_sem`. The latents are fused by a
//! single-head attention step in which `h_sem` is the only query token and
//! `h_truth` the only key/value token, then decoded back:
//!
//! ```text
//! z  = h_sem + Wo · softmax([(Wq h_sem)·(Wk h_truth) / √d]) · (Wv h_truth)
//! x' = Dec(z)
//! ```
//!
//! With one key the softmax weight is exactly 1, so `z = h_sem + Wo Wv h_truth`;
//! the query/key projections still exist and receive (zero) gradients.

use crate::error::{check_len, Error, Result};
use crate::numkit::{prefixed, seeded_rng, Matrix, Mlp, MlpCache, ParamSet, TensorView};
use crate::tensorfile::TensorFile;

pub const CHECKPOINT_FORMAT: &str = "truthx-ckpt/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_latent: usize,
}

impl ModelDims {
    /// Full-size configuration for a 4096-wide LLM.
    pub const FULL: Self = Self {
        d_model: 4096,
        d_hidden: 2048,
        d_latent: 1024,
    };
    /// Desk-scale default.
    pub const DESK: Self = Self {
        d_model: 64,
        d_hidden: 32,
        d_latent: 16,
    };

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_hidden == 0 || self.d_latent == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Architecture ablations carried by the model itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelFlags {
    /// Force `h_sem = 0`; the semantic encoder is unused.
    pub no_semantic_space: bool,
    /// Replace attention fusion with `z = h_sem + h_truth`.
    pub no_attention: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnFusion {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttnFusion {
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Matrix::identity(d),
            wk: Matrix::identity(d),
            wv: Matrix::identity(d),
            wo: Matrix::identity(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthXParams {
    pub dims: ModelDims,
    pub flags: ModelFlags,
    pub seed: u64,
    pub truth_enc: Mlp,
    pub sem_enc: Mlp,
    pub fusion: AttnFusion,
    pub dec: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub h_truth: Vec<f64>,
    pub h_sem: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapPair {
    pub x_pos_to_neg: Vec<f64>,
    pub x_neg_to_pos: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    truth: MlpCache,
    sem: Option<MlpCache>,
}

#[derive(Debug, Clone)]
pub struct FuseCache {
    h_sem: Vec<f64>,
    h_truth: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    weight: f64,
}

/// Cache for one `Dec(fuse(h_sem, h_truth))` evaluation.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    fuse: FuseCache,
    dec: MlpCache,
}

impl TruthXParams {
    /// Seeded Glorot initialisation of every weight; biases start at zero.
    pub fn init(dims: ModelDims, flags: ModelFlags, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = seeded_rng(seed, 0x7472_7574_6878);
        let enc = [dims.d_model, dims.d_hidden, dims.d_latent];
        let dec = [dims.d_latent, dims.d_hidden, dims.d_model];
        let truth_enc = Mlp::glorot(&enc, &mut rng);
        let sem_enc = Mlp::glorot(&enc, &mut rng);
        let d = dims.d_latent;
        let fusion = AttnFusion {
            wq: Matrix::glorot(d, d, &mut rng),
            wk: Matrix::glorot(d, d, &mut rng),
            wv: Matrix::glorot(d, d, &mut rng),
            wo: Matrix::glorot(d, d, &mut rng),
        };
        let dec = Mlp::glorot(&dec, &mut rng);
        Ok(Self {
            dims,
            flags,
            seed,
            truth_enc,
            sem_enc,
            fusion,
            dec,
        })
    }

    /// All-zero parameters with the given shapes.
    pub fn zeros(dims: ModelDims, flags: ModelFlags) -> Self {
        let enc = [dims.d_model, dims.d_hidden, dims.d_latent];
        let dec = [dims.d_latent, dims.d_hidden, dims.d_model];
        Self {
            dims,
            flags,
            seed: 0,
            truth_enc: Mlp::zeros(&enc),
            sem_enc: Mlp::zeros(&enc),
            fusion: AttnFusion::zeros(dims.d_latent),
            dec: Mlp::zeros(&dec),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<LatentPair> {
        check_len("auto-encoder input", x, self.dims.d_model)?;
        let h_truth = self.truth_enc.apply(x)?;
        let h_sem = if self.flags.no_semantic_space {
            vec![0.0; self.dims.d_latent]
        } else {
            self.sem_enc.apply(x)?
        };
        Ok(LatentPair { h_truth, h_sem })
    }

    pub fn encode_cached(&self, x: &[f64]) -> Result<(LatentPair, EncodeCache)> {
        check_len("auto-encoder input", x, self.dims.d_model)?;
        let (h_truth, truth) = self.truth_enc.forward(x)?;
        let (h_sem, sem) = if self.flags.no_semantic_space {
            (vec![0.0; self.dims.d_latent], None)
        } else {
            let (h, c) = self.sem_enc.forward(x)?;
            (h, Some(c))
        };
        Ok((LatentPair { h_truth, h_sem }, EncodeCache { truth, sem }))
    }

    /// Softmax weight of the single key; identically 1.
    pub fn attention_weight(&self, h_sem: &[f64], h_truth: &[f64]) -> Result<f64> {
        Ok(self.fuse_cached(h_sem, h_truth)?.1.weight)
    }

    pub fn fuse(&self, h_sem: &[f64], h_truth: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fuse_cached(h_sem, h_truth)?.0)
    }

    fn fuse_cached(&self, h_sem: &[f64], h_truth: &[f64]) -> Result<(Vec<f64>, FuseCache)> {
        let d = self.dims.d_latent;
        check_len("h_sem", h_sem, d)?;
        check_len("h_truth", h_truth, d)?;
        if self.flags.no_attention {
            let z = h_sem.iter().zip(h_truth).map(|(a, b)| a + b).collect();
            let cache = FuseCache {
                h_sem: h_sem.to_vec(),
                h_truth: h_truth.to_vec(),
                q: Vec::new(),
                k: Vec::new(),
                v: Vec::new(),
                weight: 1.0,
            };
            return Ok((z, cache));
        }
        let f = &self.fusion;
        let q = f.wq.matvec(h_sem);
        let k = f.wk.matvec(h_truth);
        let v = f.wv.matvec(h_truth);
        let logit = crate::numkit::dot(&q, &k) / (d as f64).sqrt();
        let weight = crate::numkit::softmax(&[logit])[0];
        let attn: Vec<f64> = v.iter().map(|x| weight * x).collect();
        let out = f.wo.matvec(&attn);
        let z = h_sem.iter().zip(&out).map(|(a, b)| a + b).collect();
        Ok((
            z,
            FuseCache {
                h_sem: h_sem.to_vec(),
                h_truth: h_truth.to_vec(),
                q,
                k,
                v,
                weight,
            },
        ))
    }

    /// `Dec(h_sem + Attn(h_sem, h_truth))` with its cache.
    pub fn decode_latents(
        &self,
        h_sem: &[f64],
        h_truth: &[f64],
    ) -> Result<(Vec<f64>, DecodeCache)> {
        let (z, fuse) = self.fuse_cached(h_sem, h_truth)?;
        let (x, dec) = self.dec.forward(&z)?;
        Ok((x, DecodeCache { fuse, dec }))
    }

    /// `Dec(h_sem + Attn(h_sem, h_truth))` without a cache.
    pub fn decode(&self, h_sem: &[f64], h_truth: &[f64]) -> Result<Vec<f64>> {
        let z = self.fuse(h_sem, h_truth)?;
        self.dec.apply(&z)
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        let lat = self.encode(x)?;
        self.decode(&lat.h_sem, &lat.h_truth)
    }

    /// Reconstruct `x_pos` and `x_neg` with their truthful latents exchanged.
    pub fn swap_reconstruct(&self, x_pos: &[f64], x_neg: &[f64]) -> Result<SwapPair> {
        let pos = self.encode(x_pos)?;
        let neg = self.encode(x_neg)?;
        Ok(SwapPair {
            x_pos_to_neg: self.decode(&pos.h_sem, &neg.h_truth)?,
            x_neg_to_pos: self.decode(&neg.h_sem, &pos.h_truth)?,
        })
    }

    /// Backpropagate `dx` through decoder and fusion. Returns `(dh_sem, dh_truth)`.
    pub fn backward_decode(
        &self,
        cache: &DecodeCache,
        dx: &[f64],
        grads: &mut Self,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let dz = self.dec.backward(&cache.dec, dx, &mut grads.dec)?;
        let c = &cache.fuse;
        if self.flags.no_attention {
            return Ok((dz.clone(), dz));
        }
        let d = self.dims.d_latent;
        let f = &self.fusion;
        let g = &mut grads.fusion;
        let mut dh_sem = dz.clone();
        let attn: Vec<f64> = c.v.iter().map(|x| c.weight * x).collect();
        g.wo.add_outer(&dz, &attn, 1.0);
        let d_attn = f.wo.matvec_t(&dz);
        let d_weight = crate::numkit::dot(&d_attn, &c.v);
        let dv: Vec<f64> = d_attn.iter().map(|x| c.weight * x).collect();
        // Softmax over a single logit: d w / d logit = w (1 - w) = 0.
        let d_logit = c.weight * (d_weight - c.weight * d_weight);
        let scale = d_logit / (d as f64).sqrt();
        let dq: Vec<f64> = c.k.iter().map(|x| scale * x).collect();
        let dk: Vec<f64> = c.q.iter().map(|x| scale * x).collect();
        g.wq.add_outer(&dq, &c.h_sem, 1.0);
        g.wk.add_outer(&dk, &c.h_truth, 1.0);
        g.wv.add_outer(&dv, &c.h_truth, 1.0);
        crate::numkit::axpy(1.0, &f.wq.matvec_t(&dq), &mut dh_sem);
        let mut dh_truth = f.wk.matvec_t(&dk);
        crate::numkit::axpy(1.0, &f.wv.matvec_t(&dv), &mut dh_truth);
        Ok((dh_sem, dh_truth))
    }

    /// Backpropagate latent gradients through both encoders. Returns `dx`.
    pub fn backward_encode(
        &self,
        cache: &EncodeCache,
        dh_truth: &[f64],
        dh_sem: &[f64],
        grads: &mut Self,
    ) -> Result<Vec<f64>> {
        let mut dx = self
            .truth_enc
            .backward(&cache.truth, dh_truth, &mut grads.truth_enc)?;
        if let Some(sem) = &cache.sem {
            let dxs = self.sem_enc.backward(sem, dh_sem, &mut grads.sem_enc)?;
            crate::numkit::axpy(1.0, &dxs, &mut dx);
        }
        Ok(dx)
    }

    /// Serialise into a tensor container.
    pub fn to_container(&self) -> TensorFile {
        let mut tf = TensorFile::new(CHECKPOINT_FORMAT);
        self.write_into(&mut tf);
        tf
    }

    pub(crate) fn write_into(&self, tf: &mut TensorFile) {
        tf.push_meta(
            "dims",
            format!(
                "{} {} {}",
                self.dims.d_model, self.dims.d_hidden, self.dims.d_latent
            ),
        );
        tf.push_meta("no_semantic_space", u8::from(self.flags.no_semantic_space));
        tf.push_meta("no_attention", u8::from(self.flags.no_attention));
        tf.push_meta("seed", self.seed);
        for t in self.tensors() {
            tf.push_tensor(t.name, t.shape, t.data.to_vec());
        }
    }

    pub fn from_container(tf: &TensorFile) -> Result<Self> {
        let dims_raw = tf.meta("dims")?;
        let d: Vec<usize> = dims_raw
            .split(' ')
            .map(|v| {
                v.parse().map_err(|_| Error::Data {
                    line: 0,
                    msg: format!("bad dims `{dims_raw}`"),
                })
            })
            .collect::<Result<_>>()?;
        if d.len() != 3 {
            return Err(Error::Data {
                line: 0,
                msg: format!("bad dims `{dims_raw}`"),
            });
        }
        let dims = ModelDims {
            d_model: d[0],
            d_hidden: d[1],
            d_latent: d[2],
        };
        dims.validate()?;
        let flags = ModelFlags {
            no_semantic_space: tf.meta_parse::<u8>("no_semantic_space")? != 0,
            no_attention: tf.meta_parse::<u8>("no_attention")? != 0,
        };
        let mut p = Self::zeros(dims, flags);
        p.seed = tf.meta_parse("seed")?;
        let names: Vec<(String, Vec<usize>)> =
            p.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        let mut slots = p.tensors_mut();
        for ((name, shape), slot) in names.iter().zip(slots.iter_mut()) {
            let t = tf.tensor(name)?;
            if &t.shape != shape {
                return Err(Error::Data {
                    line: 0,
                    msg: format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape
                    ),
                });
            }
            slot.copy_from_slice(&t.data);
        }
        Ok(p)
    }
}

impl ParamSet for TruthXParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = prefixed("truth_enc", self.truth_enc.tensors());
        out.extend(prefixed("sem_enc", self.sem_enc.tensors()));
        let d = self.dims.d_latent;
        for (name, m) in [
            ("fusion.wq", &self.fusion.wq),
            ("fusion.wk", &self.fusion.wk),
            ("fusion.wv", &self.fusion.wv),
            ("fusion.wo", &self.fusion.wo),
        ] {
            out.push(TensorView {
                name: name.into(),
                shape: vec![d, d],
                data: &m.data,
            });
        }
        out.extend(prefixed("dec", self.dec.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.truth_enc.tensors_mut();
        out.extend(self.sem_enc.tensors_mut());
        out.push(&mut self.fusion.wq.data);
        out.push(&mut self.fusion.wk.data);
        out.push(&mut self.fusion.wv.data);
        out.push(&mut self.fusion.wo.data);
        out.extend(self.dec.tensors_mut());
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            flags: self.flags,
            seed: self.seed,
            truth_enc: self.truth_enc.zeros_like(),
            sem_enc: self.sem_enc.zeros_like(),
            fusion: AttnFusion::zeros(self.dims.d_latent),
            dec: self.dec.zeros_like(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::Rng;

    const TINY: ModelDims = ModelDims {
        d_model: 6,
        d_hidden: 5,
        d_latent: 4,
    };

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed, 99);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = TruthXParams::init(ModelDims::DESK, ModelFlags::default(), 0).unwrap();
        let b = TruthXParams::init(ModelDims::DESK, ModelFlags::default(), 0).unwrap();
        assert_eq!(a, b);
        let c = TruthXParams::init(ModelDims::DESK, ModelFlags::default(), 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn full_size_dims_layer_shapes() {
        // Shape bookkeeping only; avoid allocating 4096-wide weights.
        let d = ModelDims::FULL;
        let z = Mlp::zeros(&[d.d_model, d.d_hidden, d.d_latent]);
        assert_eq!(
            (z.layers[0].weight.rows, z.layers[0].weight.cols),
            (2048, 4096)
        );
        assert_eq!(
            (z.layers[1].weight.rows, z.layers[1].weight.cols),
            (1024, 2048)
        );
    }

    #[test]
    fn desk_decoder_shapes_mirror_encoder() {
        let p = TruthXParams::init(ModelDims::DESK, ModelFlags::default(), 0).unwrap();
        let shapes: Vec<(usize, usize)> = p
            .dec
            .layers
            .iter()
            .map(|l| (l.weight.rows, l.weight.cols))
            .collect();
        assert_eq!(shapes, vec![(32, 16), (64, 32)]);
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let p = TruthXParams::zeros(TINY, ModelFlags::default());
        let lat = p.encode(&rand_vec(6, 1)).unwrap();
        assert_eq!(lat.h_truth, vec![0.0; 4]);
        assert_eq!(lat.h_sem, vec![0.0; 4]);
        assert_eq!(p.reconstruct(&rand_vec(6, 2)).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn identical_encoders_give_identical_latents() {
        let mut p = TruthXParams::init(TINY, ModelFlags::default(), 3).unwrap();
        p.sem_enc = p.truth_enc.clone();
        for s in 0..5 {
            let lat = p.encode(&rand_vec(6, s)).unwrap();
            assert_eq!(lat.h_truth, lat.h_sem);
        }
    }

    /// Straight-line loops over the raw weights, independent of `Mlp`.
    fn straight_line_encoder(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let l1 = &m.layers[0];
        let l2 = &m.layers[1];
        let mut hidden = vec![0.0; l1.weight.rows];
        for r in 0..l1.weight.rows {
            let mut acc = l1.bias[r];
            for c in 0..l1.weight.cols {
                acc += l1.weight.data[r * l1.weight.cols + c] * x[c];
            }
            hidden[r] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut out = vec![0.0; l2.weight.rows];
        for r in 0..l2.weight.rows {
            let mut acc = l2.bias[r];
            for c in 0..l2.weight.cols {
                acc += l2.weight.data[r * l2.weight.cols + c] * hidden[c];
            }
            out[r] = acc;
        }
        out
    }

    #[test]
    fn seed0_encode_matches_straight_line_and_golden() {
        let p = TruthXParams::init(TINY, ModelFlags::default(), 0).unwrap();
        let x = [0.5, -1.0, 0.25, 2.0, -0.75, 1.5];
        let lat = p.encode(&x).unwrap();
        let t = straight_line_encoder(&p.truth_enc, &x);
        let s = straight_line_encoder(&p.sem_enc, &x);
        for i in 0..4 {
            assert!((lat.h_truth[i] - t[i]).abs() < 1e-14);
            assert!((lat.h_sem[i] - s[i]).abs() < 1e-14);
        }
        // Frozen from the first verified run.
        let golden_truth = GOLDEN_TRUTH;
        for i in 0..4 {
            assert!(
                (lat.h_truth[i] - golden_truth[i]).abs() < 1e-12,
                "{:?}",
                lat.h_truth
            );
        }
    }

    const GOLDEN_TRUTH: [f64; 4] = [
        0.209035075147136,
        0.1254755553410228,
        -0.003492405266897425,
        -0.3332600188755256,
    ];

    #[test]
    fn identity_fusion_adds() {
        let mut p = TruthXParams::init(TINY, ModelFlags::default(), 0).unwrap();
        p.fusion = AttnFusion::identity(4);
        let (a, b) = (rand_vec(4, 5), rand_vec(4, 6));
        let z = p.fuse(&a, &b).unwrap();
        for i in 0..4 {
            assert!((z[i] - (a[i] + b[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn no_attention_flag_adds_regardless_of_fusion() {
        let mut p = TruthXParams::init(
            TINY,
            ModelFlags {
                no_attention: true,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let (a, b) = (rand_vec(4, 5), rand_vec(4, 6));
        let z1 = p.fuse(&a, &b).unwrap();
        p.fusion.wv.data.iter_mut().for_each(|v| *v *= 3.0);
        let z2 = p.fuse(&a, &b).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1, crate::numkit::add(&a, &b));
    }

    #[test]
    fn zero_value_projection_passes_query_through() {
        let mut p = TruthXParams::init(TINY, ModelFlags::default(), 0).unwrap();
        p.fusion.wv = Matrix::zeros(4, 4);
        let (a, b) = (rand_vec(4, 5), rand_vec(4, 6));
        assert_eq!(p.fuse(&a, &b).unwrap(), a);
    }

    #[test]
    fn no_semantic_space_uses_truth_only() {
        let p = TruthXParams::init(
            TINY,
            ModelFlags {
                no_semantic_space: true,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        let x = rand_vec(6, 9);
        let h_truth = p.truth_enc.apply(&x).unwrap();
        let z = p.fusion.wo.matvec(&p.fusion.wv.matvec(&h_truth));
        let expect = p.dec.apply(&z).unwrap();
        let got = p.reconstruct(&x).unwrap();
        for i in 0..6 {
            assert!((got[i] - expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn swap_identities() {
        let mut p = TruthXParams::init(TINY, ModelFlags::default(), 4).unwrap();
        let (xp, xn) = (rand_vec(6, 10), rand_vec(6, 11));
        let s = p.swap_reconstruct(&xp, &xn).unwrap();
        let r = p.swap_reconstruct(&xn, &xp).unwrap();
        assert_eq!(s.x_pos_to_neg, r.x_neg_to_pos);
        assert_eq!(s.x_neg_to_pos, r.x_pos_to_neg);

        p.fusion = AttnFusion::identity(4);
        let s = p.swap_reconstruct(&xp, &xn).unwrap();
        let lp = p.encode(&xp).unwrap();
        let ln = p.encode(&xn).unwrap();
        let expect = p
            .dec
            .apply(&crate::numkit::add(&lp.h_sem, &ln.h_truth))
            .unwrap();
        for i in 0..6 {
            assert!((s.x_pos_to_neg[i] - expect[i]).abs() < 1e-14);
        }
    }

    /// Nonzero biases keep ReLU pre-activations away from the all-dead kink.
    fn jitter_biases(p: &mut TruthXParams, seed: u64) {
        let mut rng = seeded_rng(seed, 5);
        for m in [&mut p.truth_enc, &mut p.sem_enc, &mut p.dec] {
            for l in m.layers.iter_mut() {
                l.bias
                    .iter_mut()
                    .for_each(|b| *b = rng.gen_range(0.05..0.5));
            }
        }
    }

    #[test]
    fn decode_backward_matches_central_differences() {
        for flags in [
            ModelFlags::default(),
            ModelFlags {
                no_attention: true,
                ..Default::default()
            },
            ModelFlags {
                no_semantic_space: true,
                ..Default::default()
            },
        ] {
            let mut p = TruthXParams::init(TINY, flags, 11).unwrap();
            jitter_biases(&mut p, 21);
            let x = rand_vec(6, 12);
            let w = rand_vec(6, 13);
            let obj = |q: &TruthXParams| crate::numkit::dot(&q.reconstruct(&x).unwrap(), &w);
            let mut g = p.zeros_like();
            let (lat, ec) = p.encode_cached(&x).unwrap();
            let (_, dc) = p.decode_latents(&lat.h_sem, &lat.h_truth).unwrap();
            let (dhs, dht) = p.backward_decode(&dc, &w, &mut g).unwrap();
            p.backward_encode(&ec, &dht, &dhs, &mut g).unwrap();
            let r = finite_diff_check(&mut p.clone(), &g, obj, GradCheckConfig::default());
            assert!(r.passed, "{flags:?}: {r:?}");
            assert!(g.fusion.wq.data.iter().all(|&v| v == 0.0));
            assert!(g.fusion.wk.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn container_roundtrip_bitwise() {
        let p = TruthXParams::init(
            TINY,
            ModelFlags {
                no_attention: true,
                ..Default::default()
            },
            8,
        )
        .unwrap();
        let mut buf = Vec::new();
        p.to_container().write_to(&mut buf).unwrap();
        let tf = TensorFile::read_from(&buf[..], CHECKPOINT_FORMAT).unwrap();
        let q = TruthXParams::from_container(&tf).unwrap();
        assert_eq!(p, q);
        let bits = |m: &TruthXParams| m.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
    }

    proptest! {
        #[test]
        fn single_key_weight_is_one(seed in 0u64..500, xs in proptest::collection::vec(-3.0f64..3.0, 8)) {
            let p = TruthXParams::init(TINY, ModelFlags::default(), seed).unwrap();
            let (hs, ht) = xs.split_at(4);
            prop_assert_eq!(p.attention_weight(hs, ht).unwrap(), 1.0);
            let z = p.fuse(hs, ht).unwrap();
            let direct = crate::numkit::add(hs, &p.fusion.wo.matvec(&p.fusion.wv.matvec(ht)));
            prop_assert_eq!(z, direct);
        }

        #[test]
        fn swap_of_identical_inputs_is_reconstruction(seed in 0u64..500, x in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let p = TruthXParams::init(TINY, ModelFlags::default(), seed).unwrap();
            let s = p.swap_reconstruct(&x, &x).unwrap();
            let r = p.reconstruct(&x).unwrap();
            prop_assert_eq!(&s.x_pos_to_neg, &r);
            prop_assert_eq!(&s.x_neg_to_pos, &r);
        }
    }
}

//! CGKN with locality and homogeneity for ring lattices where every other
//! site is observed.
//!
//! With `sites` observed values `u1[s]` and `sites` unobserved values `u2[s]`
//! interleaved as `u1[0], u2[0], u1[1], u2[1], ...`, site `s` owns a latent
//! block `v[s*J .. (s+1)*J]` encoded from its two unobserved neighbours
//! `(u2[s-1], u2[s])`. Both coefficient networks read
//! `(u1[s-1], u1[s], u1[s+1])`; the observed drift at `s` couples latent
//! blocks `s-1..=s+1`, the latent drift couples blocks `s-2..=s+2`. All
//! indices are cyclic. Each unobserved value is decoded by two sites and the
//! two estimates are averaged.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cgkn::layer_dims;
use super::{BoundCg, CgModel, CoefSeries, Coefs, Dims, ModelKind, StepCoefs};
use crate::diffcore::{Gradients, MlpParams, MlpVars, Tape, Var, GATHER_ZERO};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSpec {
    pub sites: usize,
    pub j: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub u1_hidden: Vec<usize>,
    pub v_hidden: Vec<usize>,
    pub sigma2: f64,
}

impl LocalSpec {
    /// Five/five/four/four-layer networks.
    pub fn lorenz96(sites: usize, j: usize) -> Self {
        Self {
            sites,
            j,
            encoder_hidden: vec![64, 64, 64],
            decoder_hidden: vec![64, 64, 64],
            u1_hidden: vec![21, 21],
            v_hidden: vec![21, 21],
            sigma2: 1.0,
        }
    }
}

/// Index maps between per-site network outputs and global matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLayout {
    pub sites: usize,
    pub j: usize,
    g1_index: Rc<[usize]>,
    g2_index: Rc<[usize]>,
}

impl LocalLayout {
    pub fn new(sites: usize, j: usize) -> Result<Self> {
        if sites < 5 || j == 0 {
            return Err(Error::Config(format!(
                "local model needs at least 5 sites and J >= 1, got {sites} sites, J = {j}"
            )));
        }
        let dv = sites * j;
        let (w1, wv) = (1 + 3 * j, j * (1 + 5 * j));
        let mut g1 = vec![GATHER_ZERO; sites * dv];
        for s in 0..sites {
            for o in 0..3 {
                let t = (s + sites + o - 1) % sites;
                for jj in 0..j {
                    g1[s * dv + t * j + jj] = s * w1 + 1 + o * j + jj;
                }
            }
        }
        let mut g2 = vec![GATHER_ZERO; dv * dv];
        for s in 0..sites {
            for a in 0..j {
                let row = s * j + a;
                for o in 0..5 {
                    let t = (s + sites + o - 2) % sites;
                    for b in 0..j {
                        g2[row * dv + t * j + b] = s * wv + j + a * 5 * j + o * j + b;
                    }
                }
            }
        }
        Ok(Self {
            sites,
            j,
            g1_index: g1.into(),
            g2_index: g2.into(),
        })
    }

    pub fn d_v(&self) -> usize {
        self.sites * self.j
    }

    /// Per-site output widths `(1 + 3J, J(1 + 5J))`.
    pub fn widths(&self) -> (usize, usize) {
        (1 + 3 * self.j, self.j * (1 + 5 * self.j))
    }

    fn wrap(&self, s: usize, offset: isize) -> usize {
        let n = self.sites as isize;
        ((s as isize + offset).rem_euclid(n)) as usize
    }

    /// `(batch*sites) x 3` neighbourhoods `(x[s-1], x[s], x[s+1])` of a
    /// `batch x sites` matrix.
    fn stencil3(&self, batch: usize) -> Rc<[usize]> {
        let n = self.sites;
        let mut idx = Vec::with_capacity(batch * n * 3);
        for b in 0..batch {
            for s in 0..n {
                for o in -1..=1 {
                    idx.push(b * n + self.wrap(s, o));
                }
            }
        }
        idx.into()
    }

    /// `(batch*sites) x (width*J)` latent neighbourhoods of blocks
    /// `s - width/2 ..= s + width/2`.
    fn latent_stencil(&self, batch: usize, width: usize) -> Rc<[usize]> {
        let (n, j) = (self.sites, self.j);
        let half = (width / 2) as isize;
        let mut idx = Vec::with_capacity(batch * n * width * j);
        for b in 0..batch {
            for s in 0..n {
                for o in -half..=half {
                    let t = self.wrap(s, o);
                    for jj in 0..j {
                        idx.push(b * n * j + t * j + jj);
                    }
                }
            }
        }
        idx.into()
    }

    pub(crate) fn drift(
        &self,
        tape: &mut Tape,
        u1_raw: Var,
        v_raw: Var,
        v: Var,
        rows: usize,
    ) -> (Var, Var) {
        let (n, j) = (self.sites, self.j);
        let f1 = tape.slice_cols(u1_raw, 0, 1);
        let g1 = tape.slice_cols(u1_raw, 1, 3 * j);
        let nb3 = tape.gather(v, self.latent_stencil(rows, 3), rows * n, 3 * j);
        let a = tape.batch_matvec(g1, nb3, 1, 3 * j);
        let du1 = tape.add(f1, a);
        let du1 = tape.reshape(du1, rows, n);

        let f2 = tape.slice_cols(v_raw, 0, j);
        let g2 = tape.slice_cols(v_raw, j, 5 * j * j);
        let nb5 = tape.gather(v, self.latent_stencil(rows, 5), rows * n, 5 * j);
        let b = tape.batch_matvec(g2, nb5, j, 5 * j);
        let dv = tape.add(f2, b);
        let dv = tape.reshape(dv, rows, n * j);
        (du1, dv)
    }

    pub(crate) fn step(&self, tape: &mut Tape, u1_raw: Var, v_raw: Var, row: usize) -> StepCoefs {
        let (n, dv) = (self.sites, self.d_v());
        let (w1, wv) = self.widths();
        let u = tape.slice(u1_raw, row * n * w1, n, w1);
        let f1 = tape.slice_cols(u, 0, 1);
        let g1 = tape.gather(u, self.g1_index.clone(), n, dv);
        let l = tape.slice(v_raw, row * n * wv, n, wv);
        let f2 = tape.slice_cols(l, 0, self.j);
        let f2 = tape.reshape(f2, dv, 1);
        let g2 = tape.gather(l, self.g2_index.clone(), dv, dv);
        StepCoefs { f1, g1, f2, g2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalCgknModel {
    pub sites: usize,
    pub j: usize,
    /// `2 -> J`, shared by all sites.
    pub encoder: MlpParams,
    /// `J -> 2`, shared by all sites.
    pub decoder: MlpParams,
    /// `3 -> 1 + 3J`: `[f1 | g1 over blocks s-1, s, s+1]`.
    pub net_u1: MlpParams,
    /// `3 -> J(1 + 5J)`: `[f2 block | g2 rows over blocks s-2..=s+2]`.
    pub net_v: MlpParams,
    pub sigma1: Vec<f64>,
    pub sigma2: f64,
    layout: Rc<LocalLayout>,
}

impl LocalCgknModel {
    pub fn new(spec: &LocalSpec, rng: &mut impl Rng) -> Result<Self> {
        let layout = LocalLayout::new(spec.sites, spec.j)?;
        let (w1, wv) = layout.widths();
        Ok(Self {
            sites: spec.sites,
            j: spec.j,
            encoder: MlpParams::init(&layer_dims(2, &spec.encoder_hidden, spec.j), rng)?,
            decoder: MlpParams::init(&layer_dims(spec.j, &spec.decoder_hidden, 2), rng)?,
            net_u1: MlpParams::init(&layer_dims(3, &spec.u1_hidden, w1), rng)?,
            net_v: MlpParams::init(&layer_dims(3, &spec.v_hidden, wv), rng)?,
            sigma1: vec![1.0; spec.sites],
            sigma2: spec.sigma2,
            layout: Rc::new(layout),
        })
    }

    pub fn from_parts(
        sites: usize,
        encoder: MlpParams,
        decoder: MlpParams,
        net_u1: MlpParams,
        net_v: MlpParams,
        sigma1: Vec<f64>,
        sigma2: f64,
    ) -> Result<Self> {
        let j = encoder.output_dim();
        let layout = LocalLayout::new(sites, j)?;
        let (w1, wv) = layout.widths();
        if encoder.input_dim() != 2 || decoder.input_dim() != j || decoder.output_dim() != 2 {
            return Err(Error::Config(
                "local autoencoder must map 2 -> J -> 2".into(),
            ));
        }
        if net_u1.input_dim() != 3 || net_u1.output_dim() != w1 {
            return Err(Error::dim(
                "observed coefficient network output",
                w1,
                net_u1.output_dim(),
            ));
        }
        if net_v.input_dim() != 3 || net_v.output_dim() != wv {
            return Err(Error::dim(
                "latent coefficient network output",
                wv,
                net_v.output_dim(),
            ));
        }
        if sigma1.len() != sites {
            return Err(Error::dim("sigma1 length", sites, sigma1.len()));
        }
        Ok(Self {
            sites,
            j,
            encoder,
            decoder,
            net_u1,
            net_v,
            sigma1,
            sigma2,
            layout: Rc::new(layout),
        })
    }

    pub fn layout(&self) -> &LocalLayout {
        &self.layout
    }
}

struct Bound {
    layout: Rc<LocalLayout>,
    encoder: MlpVars,
    decoder: MlpVars,
    net_u1: MlpVars,
    net_v: MlpVars,
}

impl CgModel for LocalCgknModel {
    fn kind(&self) -> ModelKind {
        ModelKind::LocalCgkn
    }

    fn dims(&self) -> Dims {
        Dims {
            d_u1: self.sites,
            d_u2: self.sites,
            d_v: self.sites * self.j,
        }
    }

    fn sigma1(&self) -> &[f64] {
        &self.sigma1
    }

    fn set_sigma1(&mut self, sigma1: Vec<f64>) {
        self.sigma1 = sigma1;
    }

    fn sigma2(&self) -> Vec<f64> {
        vec![self.sigma2; self.sites * self.j]
    }

    fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Box<dyn BoundCg + 'a> {
        let b = |p: &MlpParams, t: &mut Tape| {
            if trainable {
                p.bind(t)
            } else {
                p.bind_frozen(t)
            }
        };
        Box::new(Bound {
            layout: self.layout.clone(),
            encoder: b(&self.encoder, tape),
            decoder: b(&self.decoder, tape),
            net_u1: b(&self.net_u1, tape),
            net_v: b(&self.net_v, tape),
        })
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t.extend(self.net_u1.tensors_mut());
        t.extend(self.net_v.tensors_mut());
        t
    }
}

impl BoundCg for Bound {
    fn encode(&self, tape: &mut Tape, u2: Var) -> Var {
        let (rows, n) = tape.shape(u2);
        let mut idx = Vec::with_capacity(rows * n * 2);
        for b in 0..rows {
            for s in 0..n {
                idx.push(b * n + self.layout.wrap(s, -1));
                idx.push(b * n + s);
            }
        }
        let x = tape.gather(u2, idx.into(), rows * n, 2);
        let v = self.encoder.forward(tape, x);
        tape.reshape(v, rows, n * self.layout.j)
    }

    fn decode(&self, tape: &mut Tape, v: Var) -> Var {
        let rows = tape.shape(v).0;
        let (n, j) = (self.layout.sites, self.layout.j);
        let blocks = tape.reshape(v, rows * n, j);
        let pairs = self.decoder.forward(tape, blocks);
        let mut own = Vec::with_capacity(rows * n);
        let mut next = Vec::with_capacity(rows * n);
        for b in 0..rows {
            for k in 0..n {
                own.push((b * n + k) * 2 + 1);
                next.push((b * n + self.layout.wrap(k, 1)) * 2);
            }
        }
        let a = tape.gather(pairs, own.into(), rows, n);
        let c = tape.gather(pairs, next.into(), rows, n);
        let sum = tape.add(a, c);
        tape.scale(sum, 0.5)
    }

    fn coefficients(&self, tape: &mut Tape, u1: Var) -> CoefSeries {
        let (rows, n) = tape.shape(u1);
        let x = tape.gather(u1, self.layout.stencil3(rows), rows * n, 3);
        let u1_raw = self.net_u1.forward(tape, x);
        let v_raw = self.net_v.forward(tape, x);
        CoefSeries {
            coefs: Coefs::Local {
                u1_raw,
                v_raw,
                layout: self.layout.clone(),
            },
            rows,
            dims: Dims {
                d_u1: n,
                d_u2: n,
                d_v: n * self.layout.j,
            },
        }
    }

    fn gradients(&self, grads: &Gradients) -> Result<Vec<Vec<f64>>> {
        let mut g = self.encoder.gradients(grads, "encoder")?;
        g.extend(self.decoder.gradients(grads, "decoder")?);
        g.extend(
            self.net_u1
                .gradients(grads, "observed coefficient network")?,
        );
        g.extend(self.net_v.gradients(grads, "latent coefficient network")?);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_support::{affinity_defect, dynamics_match_drift, random_matrix};
    use crate::models::{cg_dynamics, decode, encode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(sites: usize, j: usize, seed: u64) -> LocalCgknModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LocalCgknModel::new(&LocalSpec::lorenz96(sites, j), &mut rng).unwrap()
    }

    #[test]
    fn reference_sizes() {
        let m = model(20, 6, 0);
        assert_eq!(m.dims().d_v, 120);
        assert_eq!(m.net_u1.output_dim(), 19);
        assert_eq!(m.net_v.output_dim(), 186);
        for (n, target) in [
            (m.encoder.num_params(), 8646.0),
            (m.decoder.num_params(), 8942.0),
            (m.net_u1.num_params() + m.net_v.num_params(), 5757.0),
        ] {
            assert!((n as f64 - target).abs() / target < 0.2, "{n} vs {target}");
        }
        assert!(LocalLayout::new(4, 6).is_err());
    }

    #[test]
    fn zero_networks_give_zero_dynamics() {
        let mut m = model(6, 2, 1);
        m.net_u1 = MlpParams::zeros(m.net_u1.layer_dims());
        m.net_v = MlpParams::zeros(m.net_v.layer_dims());
        let d = cg_dynamics(&m, &[0.5, 1.0, -2.0, 3.0, 0.1, 0.0]).unwrap();
        assert!(d.f1.iter().chain(&d.f2).all(|&x| x == 0.0));
        assert_eq!(d.g1.max_abs() + d.g2.max_abs(), 0.0);
    }

    #[test]
    fn band_structure() {
        let m = model(20, 6, 2);
        let u1 = random_matrix(1, 20, 3.0, 4).into_data();
        let d = cg_dynamics(&m, &u1).unwrap();
        for r in 0..120 {
            let s = r / 6;
            let nonzero = d.g2.row(r).iter().filter(|&&x| x != 0.0).count();
            assert!(nonzero <= 30, "row {r}: {nonzero}");
            for c in 0..120 {
                let t = c / 6;
                let dist = (s as isize - t as isize)
                    .rem_euclid(20)
                    .min((t as isize - s as isize).rem_euclid(20));
                if dist > 2 {
                    assert_eq!(d.g2[(r, c)], 0.0);
                }
            }
        }
        for s in 0..20 {
            let nonzero = d.g1.row(s).iter().filter(|&&x| x != 0.0).count();
            assert!(nonzero <= 18);
        }
    }

    #[test]
    fn shifting_sites_permutes_blocks() {
        let m = model(8, 3, 3);
        let u1 = random_matrix(1, 8, 3.0, 5).into_data();
        let mut shifted = u1.clone();
        shifted.rotate_right(1);
        let a = cg_dynamics(&m, &u1).unwrap();
        let b = cg_dynamics(&m, &shifted).unwrap();
        for s in 0..8 {
            let t = (s + 1) % 8;
            assert_eq!(a.f2[s * 3..s * 3 + 3], b.f2[t * 3..t * 3 + 3]);
            assert_eq!(a.f1[s], b.f1[t]);
            for r in 0..3 {
                for c in 0..24 {
                    let c2 = (c + 3) % 24;
                    assert_eq!(a.g2[(s * 3 + r, c)], b.g2[(t * 3 + r, c2)]);
                }
            }
        }
    }

    #[test]
    fn equal_inputs_give_equal_blocks() {
        let m = model(6, 2, 4);
        let d = cg_dynamics(&m, &[0.7; 6]).unwrap();
        for s in 1..6 {
            assert_eq!(d.f2[0..2], d.f2[s * 2..s * 2 + 2]);
            assert_eq!(d.f1[0], d.f1[s]);
        }
    }

    #[test]
    fn drift_is_affine_and_matches_dense_assembly() {
        let m = model(7, 2, 5);
        assert!(affinity_defect(&m, 1, 100) < 1e-10);
        dynamics_match_drift(&m, 6);
    }

    #[test]
    fn decoder_averages_two_sites() {
        let m = model(5, 2, 6);
        let v = random_matrix(2, 10, 1.0, 7);
        let out = decode(&m, &v).unwrap();
        for b in 0..2 {
            for k in 0..5 {
                let own = m.decoder.forward(&v.row(b)[k * 2..k * 2 + 2]).unwrap();
                let k1 = (k + 1) % 5;
                let next = m.decoder.forward(&v.row(b)[k1 * 2..k1 * 2 + 2]).unwrap();
                let expect = 0.5 * (own[1] + next[0]);
                assert!((out[(b, k)] - expect).abs() < 1e-12);
            }
        }
        let u2 = random_matrix(1, 5, 1.0, 8);
        let enc = encode(&m, &u2).unwrap();
        let site0 = m.encoder.forward(&[u2[(0, 4)], u2[(0, 0)]]).unwrap();
        assert_eq!(&enc.row(0)[0..2], site0.as_slice());
    }
}

//! Relaxed linear attention over a demonstration-plus-query context, computed
//! directly and as a zero-shot term plus a sum of outer products, with the
//! matching gradient-descent weight update built through backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::attention_head;
use crate::numerics::{AttentionKind, Graph, Tensor};

/// `W_K`: `d_k×d`, `W_V`: `d_v×d`, demonstration states `X′`: `d×m`,
/// zero-shot states `X`: `d×k`, query `q`: length `d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFormInstance {
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub x_demo: Tensor,
    pub x_zero: Tensor,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualFormReport {
    pub a_direct: Vec<f64>,
    pub a_decomposed: Vec<f64>,
    /// `W_V X (W_K X)ᵀ`, `d_v×d_k`.
    #[serde(skip)]
    pub w_zsl: Tensor,
    /// `Σ_i e_i ⊗ W_K x′_i`, `d_v×d_k`.
    #[serde(skip)]
    pub delta_w: Tensor,
    /// Meta-gradients `e_i = W_V x′_i`, one per demonstration.
    pub meta_gradients: Vec<Vec<f64>>,
    /// `max|a_direct − a_decomposed| / max(max|a_direct|, 1e-30)`.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdReport {
    pub delta_w_gd: Tensor,
    pub delta_w: Tensor,
    pub max_abs_diff: f64,
}

fn columns(t: &Tensor) -> Vec<Vec<f64>> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..cols)
        .map(|j| (0..rows).map(|i| t.data()[i * cols + j]).collect())
        .collect()
}

fn hcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = a.dims2("hcat")?;
    let (rb, cb) = b.dims2("hcat")?;
    if ra != rb {
        return Err(Error::Dimension {
            op: "hcat",
            left: vec![ra, ca],
            right: vec![rb, cb],
        });
    }
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for i in 0..ra {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::new(vec![ra, ca + cb], data)
}

impl DualFormInstance {
    pub fn new(w_k: Tensor, w_v: Tensor, x_demo: Tensor, x_zero: Tensor, q: Vec<f64>) -> Result<Self> {
        let inst = Self {
            w_k,
            w_v,
            x_demo,
            x_zero,
            q,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn d(&self) -> usize {
        self.w_k.shape()[1]
    }

    pub fn m(&self) -> usize {
        self.x_demo.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (dk, d) = self.w_k.dims2("dual_form")?;
        let (dv, d2) = self.w_v.dims2("dual_form")?;
        let (d3, m) = self.x_demo.dims2("dual_form")?;
        let (d4, k) = self.x_zero.dims2("dual_form")?;
        if d2 != d || d3 != d || d4 != d || self.q.len() != dk {
            return Err(Error::Dimension {
                op: "dual_form",
                left: vec![dk, d, dv, d2],
                right: vec![d3, m, d4, k, self.q.len()],
            });
        }
        for t in [&self.w_k, &self.w_v, &self.x_demo, &self.x_zero] {
            t.check_finite("dual_form")?;
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "dual_form" });
        }
        Ok(())
    }

    /// Seeded instance with `N(0, 1/d)` projections and standard-normal states.
    pub fn random(seed: u64, d: usize, m: usize, k: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid sigma");
        let x = Normal::new(0.0, 1.0).expect("valid sigma");
        let mut draw = |n: usize, dist: &Normal<f64>| -> Vec<f64> {
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let w_k = Tensor::new(vec![d, d], draw(d * d, &w)).expect("shape");
        let w_v = Tensor::new(vec![d, d], draw(d * d, &w)).expect("shape");
        let x_demo = Tensor::new(vec![d, m], draw(d * m, &x)).expect("shape");
        let x_zero = Tensor::new(vec![d, k], draw(d * k, &x)).expect("shape");
        let q = draw(d, &x);
        Self {
            w_k,
            w_v,
            x_demo,
            x_zero,
            q,
        }
    }

    /// Same projections and query with a different demonstration set.
    pub fn with_demos(&self, x_demo: Tensor) -> Result<Self> {
        Self::new(
            self.w_k.clone(),
            self.w_v.clone(),
            x_demo,
            self.x_zero.clone(),
            self.q.clone(),
        )
    }

    /// Full context `[X′; X]`, demonstrations first.
    pub fn context(&self) -> Result<Tensor> {
        hcat(&self.x_demo, &self.x_zero)
    }
}

/// `W_V C (W_K C)ᵀ q` over the concatenated context `C = [X′; X]`.
pub fn direct(inst: &DualFormInstance) -> Result<Vec<f64>> {
    inst.validate()?;
    let c = inst.context()?;
    let values = inst.w_v.matmul(&c)?;
    let keys = inst.w_k.matmul(&c)?;
    values.matmul_nt(&keys)?.matvec(&inst.q)
}

/// `W_ZSL q + Σ_i (W_V x′_i ⊗ W_K x′_i) q`, with the pieces recorded.
pub fn decomposed(inst: &DualFormInstance) -> Result<(Vec<f64>, DualFormReport)> {
    inst.validate()?;
    let dv = inst.w_v.shape()[0];
    let dk = inst.w_k.shape()[0];
    let w_zsl = inst
        .w_v
        .matmul(&inst.x_zero)?
        .matmul_nt(&inst.w_k.matmul(&inst.x_zero)?)?;
    let mut delta_w = Tensor::zeros(&[dv, dk]);
    let mut meta_gradients = Vec::with_capacity(inst.m());
    for x in columns(&inst.x_demo) {
        let e = inst.w_v.matvec(&x)?;
        let key = inst.w_k.matvec(&x)?;
        delta_w.add_assign(&Tensor::outer(&Tensor::vector(e.clone()), &Tensor::vector(key))?)?;
        meta_gradients.push(e);
    }
    let zsl_q = w_zsl.matvec(&inst.q)?;
    let delta_q = delta_w.matvec(&inst.q)?;
    let a_decomposed: Vec<f64> = zsl_q.iter().zip(&delta_q).map(|(a, b)| a + b).collect();
    let a_direct = direct(inst)?;
    let max_rel_error = relative_error(&a_direct, &a_decomposed);
    let report = DualFormReport {
        a_direct,
        a_decomposed: a_decomposed.clone(),
        w_zsl,
        delta_w,
        meta_gradients,
        max_rel_error,
    };
    Ok((a_decomposed, report))
}

/// Max absolute difference scaled by the largest reference magnitude.
pub fn relative_error(reference: &[f64], other: &[f64]) -> f64 {
    let diff = reference
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|a| a.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-30)
}

/// Builds a linear layer `y = W u` over inputs `u_i = W_K x′_i` whose
/// back-propagated output errors make `−lr·∂L/∂y_i = e_i = W_V x′_i`, takes
/// the weight gradient by reverse-mode differentiation, and compares the
/// resulting step `ΔW_GD = −lr·∂L/∂W` with the decomposition's `ΔW`.
pub fn gd_correspondence(inst: &DualFormInstance, lr: f64) -> Result<GdReport> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("lr must be positive, got {lr}")));
    }
    let (_, report) = decomposed(inst)?;
    let dv = inst.w_v.shape()[0];
    let dk = inst.w_k.shape()[0];
    let xs = columns(&inst.x_demo);
    let m = xs.len();
    if m == 0 {
        return Ok(GdReport {
            delta_w_gd: Tensor::zeros(&[dv, dk]),
            max_abs_diff: report.delta_w.max_abs_diff(&Tensor::zeros(&[dv, dk]))?,
            delta_w: report.delta_w,
        });
    }
    let inputs: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| inst.w_k.matvec(x))
        .collect::<Result<_>>()?;
    let out_grads: Vec<Vec<f64>> = report
        .meta_gradients
        .iter()
        .map(|e| e.iter().map(|v| -v / lr).collect())
        .collect();
    let u = Tensor::from_rows(&inputs)?;
    let g_out = Tensor::from_rows(&out_grads)?;
    let w0 = Tensor::zeros(&[dk, dv]);
    let mut g = Graph::new();
    let u_var = g.constant(&u);
    let w_var = g.param(&w0);
    let gout_var = g.constant(&g_out);
    let y = g.matmul(u_var, w_var)?;
    let weighted = g.mul(y, gout_var)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;
    let grad = g.grad(w_var).expect("parameter gradient").transpose()?;
    let delta_w_gd = grad.scale(-lr);
    let max_abs_diff = delta_w_gd.max_abs_diff(&report.delta_w)?;
    Ok(GdReport {
        delta_w_gd,
        delta_w: report.delta_w,
        max_abs_diff,
    })
}

/// `max|softmax − relaxed|` for the query attending over the full context.
pub fn softmax_gap(inst: &DualFormInstance) -> Result<f64> {
    let c = inst.context()?;
    let relaxed = direct(inst)?;
    let soft = attention_head(&inst.w_k, &inst.w_v, &c, &inst.q, AttentionKind::Softmax)?;
    Ok(relaxed
        .iter()
        .zip(&soft)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityRow {
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    pub max_rel_error: f64,
    pub gd_max_abs_diff: f64,
    pub softmax_gap: f64,
}

/// Certifies the identity on `n` seeded instances with `d ∈ [1, max_d]`,
/// `m ∈ [1, max_m]` and a zero-shot block of 1–4 columns.
pub fn certify(n: usize, base_seed: u64, max_d: usize, max_m: usize, lr: f64) -> Result<Vec<IdentityRow>> {
    (0..n as u64)
        .map(|i| {
            let seed = crate::seeds::derive_seed(base_seed, i);
            let d = 1 + (seed % max_d as u64) as usize;
            let m = 1 + ((seed >> 16) % max_m as u64) as usize;
            let k = 1 + ((seed >> 32) % 4) as usize;
            let inst = DualFormInstance::random(seed, d, m, k);
            let (_, report) = decomposed(&inst)?;
            let gd = gd_correspondence(&inst, lr)?;
            Ok(IdentityRow {
                seed,
                d,
                m,
                max_rel_error: report.max_rel_error,
                gd_max_abs_diff: gd.max_abs_diff,
                softmax_gap: softmax_gap(&inst)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn scalar_case() -> DualFormInstance {
        DualFormInstance::new(
            t(&[vec![3.0]]),
            t(&[vec![2.0]]),
            t(&[vec![1.0]]),
            t(&[vec![1.0]]),
            vec![1.0],
        )
        .unwrap()
    }

    #[test]
    fn scalar_hand_expansion() {
        let inst = scalar_case();
        // (2·1)(3·1)·1 from the demonstration plus the same from the zero-shot column.
        assert_eq!(direct(&inst).unwrap(), vec![12.0]);
        let (a, report) = decomposed(&inst).unwrap();
        assert_eq!(a, vec![12.0]);
        assert_eq!(report.w_zsl.data(), &[6.0]);
        assert_eq!(report.delta_w.data(), &[6.0]);
        assert_eq!(report.meta_gradients, vec![vec![2.0]]);
    }

    #[test]
    fn empty_demonstrations_leave_zero_shot_term() {
        let inst = DualFormInstance::random(3, 5, 2, 3);
        let empty = inst.with_demos(Tensor::zeros(&[5, 0])).unwrap();
        let (a, report) = decomposed(&empty).unwrap();
        assert_eq!(a, report.w_zsl.matvec(&empty.q).unwrap());
        assert_eq!(direct(&empty).unwrap(), a);
        assert!(report.delta_w.data().iter().all(|&v| v == 0.0));
        let gd = gd_correspondence(&empty, 0.1).unwrap();
        assert_eq!(gd.max_abs_diff, 0.0);
    }

    #[test]
    fn zero_query_gives_zero() {
        let mut inst = DualFormInstance::random(4, 6, 3, 2);
        inst.q = vec![0.0; 6];
        assert!(direct(&inst).unwrap().iter().all(|&v| v == 0.0));
        assert!(decomposed(&inst).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_demonstration_update_is_rank_one() {
        let inst = DualFormInstance::random(8, 7, 1, 2);
        let (_, report) = decomposed(&inst).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(7, 7, report.delta_w.data());
        assert_eq!(m.rank(1e-10), 1);
    }

    #[test]
    fn gd_textbook_example() {
        // One example with e = [1, 0] and input [0, 1]: W_V x′ = e, W_K x′ = x.
        let inst = DualFormInstance::new(
            t(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
            t(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            t(&[vec![1.0], vec![0.0]]),
            t(&[vec![0.0], vec![0.0]]),
            vec![1.0, 1.0],
        )
        .unwrap();
        let gd = gd_correspondence(&inst, 1.0).unwrap();
        assert_eq!(gd.delta_w_gd.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(gd.max_abs_diff, 0.0);
    }

    #[test]
    fn zero_errors_give_zero_update() {
        let mut inst = DualFormInstance::random(1, 4, 3, 1);
        inst.w_v = Tensor::zeros(&[4, 4]);
        let gd = gd_correspondence(&inst, 0.5).unwrap();
        assert!(gd.delta_w_gd.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rectangular_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut draw = |r: usize, c: usize| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| n.sample(&mut rng)).collect()).unwrap()
        };
        let inst = DualFormInstance::new(draw(3, 5), draw(4, 5), draw(5, 6), draw(5, 2), vec![0.3, -1.0, 2.0]).unwrap();
        let (a, report) = decomposed(&inst).unwrap();
        assert_eq!(a.len(), 4);
        assert!(report.max_rel_error <= 1e-12);
        assert!(gd_correspondence(&inst, 0.01).unwrap().max_abs_diff <= 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let inst = scalar_case();
        assert!(DualFormInstance::new(
            inst.w_k.clone(),
            inst.w_v.clone(),
            Tensor::zeros(&[2, 1]),
            inst.x_zero.clone(),
            vec![1.0]
        )
        .is_err());
        assert!(DualFormInstance::new(
            inst.w_k.clone(),
            inst.w_v.clone(),
            inst.x_demo.clone(),
            inst.x_zero.clone(),
            vec![1.0, 2.0]
        )
        .is_err());
    }

    #[test]
    fn certify_small_sweep() {
        let rows = certify(50, 9, 16, 8, 0.1).unwrap();
        for r in rows {
            assert!(r.max_rel_error <= 1e-10, "{r:?}");
            assert!(r.gd_max_abs_diff <= 1e-12, "{r:?}");
            assert!(r.softmax_gap.is_finite());
        }
    }

    #[test]
    fn model_relaxed_attention_agrees_with_direct() {
        use crate::numerics::Span;
        for seed in 0..20 {
            let inst = DualFormInstance::random(seed, 8, 5, 3);
            let c = inst.context().unwrap();
            let n = c.shape()[1];
            let keys = inst.w_k.matmul(&c).unwrap().transpose().unwrap();
            let values = inst.w_v.matmul(&c).unwrap().transpose().unwrap();
            let mut queries = Tensor::zeros(&[n, 8]);
            queries.row_mut(n - 1).copy_from_slice(&inst.q);
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(&queries), g.constant(&keys), g.constant(&values));
            let out = g
                .attention(qv, kv, vv, &[Span { start: 0, len: n }], 1, AttentionKind::RelaxedLinear)
                .unwrap();
            let model_row = g.value(out).row(n - 1).to_vec();
            assert!(relative_error(&direct(&inst).unwrap(), &model_row) <= 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn direct_matches_decomposed(seed in any::<u64>(), d in 1usize..=64, m in 0usize..=32, k in 1usize..=4) {
            let inst = DualFormInstance::random(seed, d, m, k);
            let (_, report) = decomposed(&inst).unwrap();
            prop_assert!(report.max_rel_error <= 1e-10);
        }

        #[test]
        fn demonstrations_contribute_additively(seed in any::<u64>(), d in 1usize..=32, m1 in 1usize..=16, m2 in 1usize..=16) {
            let base = DualFormInstance::random(seed, d, m1 + m2, 2);
            let cols = columns(&base.x_demo);
            let pick = |range: std::ops::Range<usize>| {
                let sub: Vec<Vec<f64>> = cols[range].to_vec();
                Tensor::from_rows(&sub).unwrap().transpose().unwrap()
            };
            let zsl_q = decomposed(&base).unwrap().1.w_zsl.matvec(&base.q).unwrap();
            let contrib = |inst: &DualFormInstance| -> Vec<f64> {
                decomposed(inst).unwrap().0.iter().zip(&zsl_q).map(|(a, z)| a - z).collect()
            };
            let both = contrib(&base);
            let first = contrib(&base.with_demos(pick(0..m1)).unwrap());
            let second = contrib(&base.with_demos(pick(m1..m1 + m2)).unwrap());
            for ((b, f), s) in both.iter().zip(&first).zip(&second) {
                prop_assert!((b - (f + s)).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}

use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 6], 3.25));
    let gamma = g.constant(Tensor::full([6], 1.0));
    let beta = g.constant(Tensor::zeros([6]));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_matmul_is_noop() {
    let mut g = Graph::<f64>::new();
    let x = random(&[3, 3], 1);
    let i = g.constant(Tensor::eye(3));
    let xv = g.constant(x.clone());
    let y = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = g.constant(Tensor::zeros([3, 2]));
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn square_derivative() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn cross_entropy_gradient_is_probs_minus_onehot() {
    let mut g = Graph::<f64>::new();
    let z = random(&[1, 5], 9);
    let zv = g.param(z.clone());
    let rows = g.cross_entropy(zv, &[Some(2)]).unwrap();
    let loss = g.sum(rows);
    let grads = g.backward(loss).unwrap();
    let mut g2 = Graph::<f64>::new();
    let zc = g2.constant(z);
    let p = g2.softmax(zc).unwrap();
    let mut expected = g2.value(p).clone();
    expected.data_mut()[2] -= 1.0;
    assert!(grads.get(zv).unwrap().max_abs_diff(&expected) < 1e-15);
}

#[test]
fn backward_errors() {
    let mut other = Graph::<f64>::new();
    let v = other.constant(Tensor::scalar(1.0));
    assert!(Graph::<f64>::new().backward(v).unwrap_err().to_string().contains("empty"));
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(g.backward(x).unwrap_err().to_string().contains("scalar"));
}

#[test]
fn backward_is_deterministic() {
    let mut g = Graph::<f32>::new();
    let a = g.param(random(&[4, 5], 3).cast());
    let b = g.param(random(&[5, 3], 4).cast());
    let c = g.matmul(a, b).unwrap();
    let s = g.softmax(c).unwrap();
    let l = g.sum(s);
    let sq = g.mul(c, c).unwrap();
    let l2 = g.sum(sq);
    let tot = g.add(l, l2).unwrap();
    let g1 = g.backward(tot).unwrap();
    let g2 = g.backward(tot).unwrap();
    for v in [a, b] {
        let (x, y) = (g1.get(v).unwrap(), g2.get(v).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

struct SumFn;
impl TapeFn for SumFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> crate::Result<Var> {
        Ok(g.sum(x[0]))
    }
}

struct DotSelf;
impl TapeFn for DotSelf {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> crate::Result<Var> {
        let sq = g.mul(x[0], x[0])?;
        Ok(g.sum(sq))
    }
}

struct Explode;
impl TapeFn for Explode {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> crate::Result<Var> {
        let big = g.scale(x[0], T::lit(1e300));
        let sq = g.mul(big, big)?;
        Ok(g.sum(sq))
    }
}

#[test]
fn grad_check_trivial_cases() {
    // The analytic gradient is exactly 1; only the difference quotient rounds.
    assert!(grad_check(&SumFn, &[random(&[7], 2)], 1e-3).unwrap() < 1e-10);
    assert!(grad_check(&DotSelf, &[Tensor::<f64>::zeros([3])], 1e-3).unwrap() < 1e-6);
    assert!(matches!(
        grad_check(&Explode, &[Tensor::<f64>::full([2], 1.0)], 1e-3),
        Err(crate::Error::NonFinite(_))
    ));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&[rows, cols], seed).map(|v| v * 20.0).cast());
        let y = g.softmax(x).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

/// Each primitive reduced to a scalar through a fixed random projection so that
/// every output element carries a distinct weight.
#[derive(Clone, Copy, Debug)]
enum Prim {
    MatMul,
    BatchedMatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Softmax,
    CausalSoftmax,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Concat,
    Slice,
    Transpose,
    Gelu,
}

const PRIMS: [Prim; 16] = [
    Prim::MatMul,
    Prim::BatchedMatMul,
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::AddBias,
    Prim::Scale,
    Prim::Softmax,
    Prim::CausalSoftmax,
    Prim::LayerNorm,
    Prim::Embedding,
    Prim::CrossEntropy,
    Prim::Concat,
    Prim::Slice,
    Prim::Transpose,
    Prim::Gelu,
];

impl Prim {
    fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let r = |s: &[usize], k: u64| random(s, seed * 31 + k);
        match self {
            Prim::MatMul => vec![r(&[3, 4], 0), r(&[4, 2], 1)],
            Prim::BatchedMatMul => vec![r(&[2, 3, 4], 0), r(&[2, 4, 3], 1)],
            Prim::Add | Prim::Sub | Prim::Mul => vec![r(&[3, 4], 0), r(&[3, 4], 1)],
            Prim::AddBias => vec![r(&[3, 4], 0), r(&[4], 1)],
            Prim::LayerNorm => vec![r(&[3, 5], 0), r(&[5], 1), r(&[5], 2)],
            Prim::Embedding => vec![r(&[6, 3], 0)],
            Prim::Concat => vec![r(&[2, 3], 0), r(&[2, 2], 1)],
            Prim::CausalSoftmax => vec![r(&[2, 4, 4], 0)],
            _ => vec![r(&[3, 4], 0)],
        }
    }
}

struct PrimFn {
    prim: Prim,
    seed: u64,
}

impl TapeFn for PrimFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> crate::Result<Var> {
        let y = match self.prim {
            Prim::MatMul | Prim::BatchedMatMul => g.matmul(x[0], x[1])?,
            Prim::Add => g.add(x[0], x[1])?,
            Prim::Sub => g.sub(x[0], x[1])?,
            Prim::Mul => g.mul(x[0], x[1])?,
            Prim::AddBias => g.add_bias(x[0], x[1])?,
            Prim::Scale => g.scale(x[0], T::lit(-1.7)),
            Prim::Softmax => {
                let s = g.scale(x[0], T::lit(3.0));
                g.softmax(s)?
            }
            Prim::CausalSoftmax => {
                let s = g.scale(x[0], T::lit(3.0));
                g.causal_softmax(s)?
            }
            Prim::LayerNorm => g.layer_norm(x[0], x[1], x[2])?,
            Prim::Embedding => g.embedding(x[0], &[4, 0, 4, 2])?,
            Prim::CrossEntropy => {
                let s = g.scale(x[0], T::lit(2.0));
                g.cross_entropy(s, &[Some(1), None, Some(3)])?
            }
            Prim::Concat => g.concat(&[x[0], x[1]], 1)?,
            Prim::Slice => g.slice(x[0], 1, 1, 2)?,
            Prim::Transpose => g.transpose(x[0])?,
            Prim::Gelu => {
                let s = g.scale(x[0], T::lit(2.5));
                g.gelu(s)
            }
        };
        let shape = g.shape(y).to_vec();
        let w = g.constant(random(&shape, self.seed + 1000).cast());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for prim in PRIMS {
        for seed in 0..3 {
            let f = PrimFn { prim, seed };
            let x64 = prim.inputs(seed);
            let err64 = grad_check(&f, &x64, FD_STEP).unwrap();
            assert!(err64 < 1e-6, "{prim:?} seed {seed}: f64 rel err {err64:e}");
            let x32: Vec<Tensor<f32>> = x64.iter().map(Tensor::cast).collect();
            let err32 = grad_check_vs_f64(&f, &x32, FD_STEP).unwrap();
            assert!(err32 < 1e-4, "{prim:?} seed {seed}: f32 rel err {err32:e}");
        }
    }
}

struct Mlp;
impl TapeFn for Mlp {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var]) -> crate::Result<Var> {
        let x = g.constant(random(&[5, 4], 77).cast());
        let h = g.matmul(x, p[0])?;
        let h = g.add_bias(h, p[1])?;
        let h = g.gelu(h);
        let o = g.matmul(h, p[2])?;
        let o = g.add_bias(o, p[3])?;
        let rows = g.cross_entropy(o, &[Some(0), Some(2), Some(1), None, Some(2)])?;
        Ok(g.sum(rows))
    }
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences() {
    let params = vec![
        random(&[4, 6], 1),
        random(&[6], 2),
        random(&[6, 3], 3),
        random(&[3], 4),
    ];
    let err = grad_check(&Mlp, &params, FD_STEP).unwrap();
    assert!(err < 1e-6, "rel err {err:e}");
}

/// Central-difference step for the 64-bit oracle. At 1e-3 the O(h²) truncation
/// term alone reaches ~1e-5 relative on curved primitives (softmax, gelu).
const FD_STEP: f64 = 1e-5;

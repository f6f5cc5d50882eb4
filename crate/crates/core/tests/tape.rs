use gsina::tensor::{grad_check, Axis, Tape, Tensor, Var};
use gsina::{Error, Result};
use proptest::collection::vec;
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Contracts an output with fixed non-uniform weights so every Jacobian
/// row is exercised.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let v = t.value(y).clone();
    let w: Vec<f64> = (0..v.len()).map(|i| (i as f64 * 0.7 + 0.3).sin()).collect();
    let w = t.constant(Tensor::new(v.shape().to_vec(), w)?);
    let p = t.mul(y, w)?;
    t.sum(p, None)
}

fn fd_error(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> f64 {
    let r = grad_check(
        |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y)
        },
        x,
        H,
        TOL,
    )
    .unwrap();
    r.max_rel_error
}

fn matrix(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5).prop_flat_map(move |(r, c)| {
        vec(lo..hi, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

/// Two matrices of one shape.
fn pair(lo: f64, hi: f64) -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..5, 1usize..5).prop_flat_map(move |(r, c)| {
        (vec(-2.0..2.0f64, r * c), vec(lo..hi, r * c))
            .prop_map(move |(a, b)| (Tensor::matrix(r, c, a).unwrap(), Tensor::matrix(r, c, b).unwrap()))
    })
}

/// Values at least `gap` apart from each other and from `avoid`.
fn separated(t: &Tensor, gap: f64, avoid: &[f64]) -> bool {
    let d = t.data();
    for (i, &a) in d.iter().enumerate() {
        if avoid.iter().any(|&z| (a - z).abs() < gap) {
            return false;
        }
        if d[i + 1..].iter().any(|&b| (a - b).abs() < gap) {
            return false;
        }
    }
    true
}

macro_rules! check {
    ($e:expr) => {{
        let err = $e;
        prop_assert!(err <= TOL, "relative error {:e}", err);
    }};
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_primitives_match_finite_differences(x in matrix(-2.0, 2.0), p in matrix(0.3, 3.0)) {
        check!(fd_error(|t, v| t.exp(v), &x));
        check!(fd_error(|t, v| t.neg(v), &x));
        check!(fd_error(|t, v| t.scale(v, -1.7), &x));
        check!(fd_error(|t, v| t.add_scalar(v, 0.4), &x));
        check!(fd_error(|t, v| t.log(v), &p));
        check!(fd_error(|t, v| t.sqrt(v), &p));
        check!(fd_error(|t, v| t.transpose(v), &x));
        check!(fd_error(|t, v| { let n = t.value(v).len(); t.reshape(v, &[n]) }, &x));
        check!(fd_error(|t, v| t.softmax_rows(v), &x));
    }

    #[test]
    fn kinked_primitives_match_away_from_kinks(x in matrix(-2.0, 2.0)) {
        prop_assume!(separated(&x, 1e-3, &[0.0, -0.5, 0.5]));
        check!(fd_error(|t, v| t.relu(v), &x));
        check!(fd_error(|t, v| t.clamp(v, -0.5, 0.5), &x));
        for axis in [None, Some(Axis::Rows), Some(Axis::Cols)] {
            check!(fd_error(|t, v| t.max(v, axis), &x));
        }
    }

    #[test]
    fn binary_primitives_match_finite_differences((a, b) in pair(0.5, 2.0)) {
        for (x, other) in [(&a, &b), (&b, &a)] {
            let o = other.clone();
            check!(fd_error(|t, v| { let c = t.constant(o.clone()); t.add(v, c) }, x));
            check!(fd_error(|t, v| { let c = t.constant(o.clone()); t.sub(c, v) }, x));
            check!(fd_error(|t, v| { let c = t.constant(o.clone()); t.mul(v, c) }, x));
        }
        // numerator and denominator sides
        let bc = b.clone();
        check!(fd_error(|t, v| { let c = t.constant(bc.clone()); t.div(v, c) }, &a));
        let ac = a.clone();
        check!(fd_error(|t, v| { let c = t.constant(ac.clone()); t.div(c, v) }, &b));
    }

    #[test]
    fn matmul_matches_finite_differences(
        (a, b) in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(n, k, m)| {
            (vec(-2.0..2.0f64, n * k), vec(-2.0..2.0f64, k * m))
                .prop_map(move |(x, y)| (Tensor::matrix(n, k, x).unwrap(), Tensor::matrix(k, m, y).unwrap()))
        })
    ) {
        let bc = b.clone();
        check!(fd_error(|t, v| { let c = t.constant(bc.clone()); t.matmul(v, c) }, &a));
        let ac = a.clone();
        check!(fd_error(|t, v| { let c = t.constant(ac.clone()); t.matmul(c, v) }, &b));
    }

    #[test]
    fn reductions_and_broadcasts_match(x in matrix(-2.0, 2.0)) {
        for axis in [None, Some(Axis::Rows), Some(Axis::Cols)] {
            check!(fd_error(|t, v| t.sum(v, axis), &x));
            check!(fd_error(|t, v| t.mean(v, axis), &x));
        }
        let (r, c) = x.dims2();
        let row = Tensor::matrix(1, c, x.row(0).to_vec()).unwrap();
        check!(fd_error(|t, v| t.broadcast_row(v, 3), &row));
        let col = Tensor::matrix(r, 1, (0..r).map(|i| x.at(i, 0)).collect()).unwrap();
        check!(fd_error(|t, v| t.broadcast_col(v, 3), &col));
    }

    #[test]
    fn indexing_primitives_match(
        x in matrix(-2.0, 2.0),
        picks in vec(0usize..100, 1..7),
        segs in vec(0usize..3, 4),
    ) {
        let (r, c) = x.dims2();
        let index: Vec<usize> = picks.iter().map(|p| p % r).collect();
        check!(fd_error(|t, v| t.gather_rows(v, &index), &x));
        let segment: Vec<usize> = (0..r).map(|i| segs[i % segs.len()]).collect();
        check!(fd_error(|t, v| t.segment_sum(v, &segment, 3), &x));
        if separated(&x, 1e-3, &[]) {
            check!(fd_error(|t, v| t.segment_max(v, &segment, 3), &x));
        }
        let other = Tensor::full(&[r, 2], 0.5);
        let o = other.clone();
        check!(fd_error(|t, v| { let k = t.constant(o.clone()); t.concat(&[v, k], Axis::Cols) }, &x));
        let below = Tensor::full(&[2, c], -0.25);
        check!(fd_error(|t, v| { let k = t.constant(below.clone()); t.concat(&[k, v], Axis::Rows) }, &x));
    }
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    let s = t.add(a, b).unwrap();
    assert_eq!(t.value(s).data(), &[4.0, 6.0]);

    let m = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let i = t.constant(Tensor::eye(2));
    let mv = t.constant(m.clone());
    let p = t.matmul(i, mv).unwrap();
    assert_eq!(t.value(p), &m);

    let v = t.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
    let seg = t.segment_sum(v, &[0, 0, 1], 2).unwrap();
    assert_eq!(t.value(seg).data(), &[3.0, 3.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let s = t.sum(x, None).unwrap();
    assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    assert_eq!(t.backward(y).unwrap().wrt(x).item(), 6.0);
}

#[test]
fn kinks_take_first_attaining_index() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![2.0, 2.0, 1.0]));
    let m = t.max(x, None).unwrap();
    assert_eq!(t.backward(m).unwrap().wrt(x).data(), &[1.0, 0.0, 0.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0, -1.0, 1.0]));
    let r = t.relu(x).unwrap();
    let s = t.sum(r, None).unwrap();
    assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[1.0, 0.0, 1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(3, 1, vec![5.0, 5.0, 1.0]).unwrap());
    let m = t.segment_max(x, &[0, 0, 1], 3).unwrap();
    assert_eq!(t.value(m).data(), &[5.0, 1.0, 0.0]);
    let s = t.sum(m, None).unwrap();
    assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[1.0, 0.0, 1.0]);
}

#[test]
fn shared_subexpressions_accumulate() {
    let x0 = Tensor::vector(vec![0.7, -1.3, 2.1]);

    let mut t = Tape::new();
    let x = t.leaf(x0.clone());
    let sq = t.mul(x, x).unwrap();
    let e = t.exp(x).unwrap();
    let a = t.mul(sq, e).unwrap();
    let shared = t.add(a, sq).unwrap();
    let loss = t.sum(shared, None).unwrap();
    let g_shared = t.backward(loss).unwrap().wrt(x).clone();

    let mut t = Tape::new();
    let x = t.leaf(x0);
    let sq1 = t.mul(x, x).unwrap();
    let sq2 = t.mul(x, x).unwrap();
    let e = t.exp(x).unwrap();
    let a = t.mul(sq1, e).unwrap();
    let dup = t.add(a, sq2).unwrap();
    let loss = t.sum(dup, None).unwrap();
    let g_dup = t.backward(loss).unwrap().wrt(x).clone();

    assert_eq!(g_shared, g_dup);
}

#[test]
fn grad_check_controls() {
    let x = Tensor::vector(vec![0.5, -2.0, 3.0, 1.25]);
    let ok = grad_check(
        |t, v| {
            let s = t.mul(v, v)?;
            t.sum(s, None)
        },
        &x,
        H,
        1e-6,
    )
    .unwrap();
    assert!(ok.passed);

    // treating one factor as a constant drops half the derivative
    let bad = grad_check(
        |t, v| {
            let c = t.constant(t.value(v).clone());
            let s = t.mul(v, c)?;
            t.sum(s, None)
        },
        &x,
        H,
        1e-6,
    )
    .unwrap();
    assert!(!bad.passed);
    assert!((bad.max_rel_error - 0.5).abs() < 1e-6);
}

#[test]
fn error_cases() {
    let mut t = Tape::new();
    let v = t.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(v), Err(Error::NotScalar(_))));

    let w = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(t.add(v, w), Err(Error::ShapeMismatch { .. })));

    let z = t.constant(Tensor::vector(vec![0.0, 1.0]));
    assert!(matches!(t.log(z), Err(Error::NonFiniteValue(_))));

    let mut other = Tape::new();
    let foreign = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(t.exp(foreign), Err(Error::DetachedTensor)));
    assert!(matches!(t.backward(foreign), Err(Error::DetachedTensor)));
}

#[test]
fn identical_inputs_give_identical_bits() {
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 1.37).sin()).collect()).unwrap());
        let s = t.softmax_rows(x).unwrap();
        let xt = t.transpose(x).unwrap();
        let m = t.matmul(s, xt).unwrap();
        let l = t.sum(m, None).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).item().to_bits(), g.wrt(x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

//! Support shared across integration tests.
#![allow(dead_code)]

use std::rc::Rc;

use dpi_core::autodiff::fdiff::{central_difference, max_rel_error};
use dpi_core::autodiff::{Tape, TensorId};
use dpi_core::stream_rng;
use rand::Rng;

/// Absolute floor for relative gradient errors; entries this small are
/// dominated by f32 rounding noise in the finite differences themselves.
pub const GRAD_FLOOR: f32 = 5e-2;

/// Finite-difference step. Chosen for f32: large enough that function
/// rounding noise stays below the tolerance, small enough that curvature
/// does.
pub const FD_EPS: f32 = 5e-3;

/// Check one tape program against central differences.
///
/// `shapes` gives the leaves; values are sampled uniformly from `range` with
/// `signed` optionally flipping signs. The loss is a fixed random weighting
/// of the program output, so every output element gets a distinct cotangent.
/// Returns the max relative error across all leaf gradients.
pub fn fd_check(
    shapes: &[(usize, usize)],
    range: (f32, f32),
    signed: bool,
    seed: u64,
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
) -> f32 {
    let mut rng = stream_rng(0xFD, seed);
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let mut base = Vec::with_capacity(total);
    for _ in 0..total {
        let mut v: f32 = rng.gen_range(range.0..range.1);
        if signed && rng.gen_bool(0.5) {
            v = -v;
        }
        base.push(v);
    }

    // Build once to learn the output shape, then fix loss weights.
    let run = |vals: &[f32], want_grad: bool| -> (f32, Option<Vec<f32>>) {
        let mut t = Tape::new();
        let mut ids = Vec::new();
        let mut off = 0;
        for &(r, c) in shapes {
            ids.push(t.leaf(r, c, vals[off..off + r * c].to_vec()));
            off += r * c;
        }
        let out = build(&mut t, &ids);
        let (orow, ocol) = (t.rows(out), t.cols(out));
        let mut wrng = stream_rng(0xFD ^ 0x5151, seed);
        let w: Vec<f32> = (0..orow * ocol).map(|_| wrng.gen_range(0.5..1.5)).collect();
        let wid = t.leaf(orow, ocol, w);
        let prod = t.mul(out, wid);
        let loss = t.sum_all(prod);
        let lv = t.value(loss)[0];
        if !want_grad {
            return (lv, None);
        }
        t.backward(loss).unwrap();
        let mut g = Vec::with_capacity(total);
        for (&id, &(r, c)) in ids.iter().zip(shapes) {
            match t.grad(id) {
                Some(gv) => g.extend_from_slice(gv),
                None => g.extend(std::iter::repeat(0.0).take(r * c)),
            }
        }
        (lv, Some(g))
    };

    let (_, analytic) = run(&base, true);
    let numeric = central_difference(|x| run(x, false).0, &base, FD_EPS);
    max_rel_error(&analytic.unwrap(), &numeric, GRAD_FLOOR)
}

/// Every tape primitive with representative shapes. Used by the per-op tests
/// and re-run wholesale by the acceptance suite.
pub fn all_primitive_checks(seed: u64) -> Vec<(&'static str, f32)> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f32| out.push((name, err));

    push(
        "matmul",
        fd_check(&[(3, 5), (5, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.matmul(ids[0], ids[1])
        }),
    );
    push(
        "add",
        fd_check(&[(3, 4), (3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.add(ids[0], ids[1])
        }),
    );
    push(
        "sub",
        fd_check(&[(3, 4), (3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.sub(ids[0], ids[1])
        }),
    );
    push(
        "mul",
        fd_check(&[(3, 4), (3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.mul(ids[0], ids[1])
        }),
    );
    push(
        "add_row",
        fd_check(&[(3, 4), (1, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.add_row(ids[0], ids[1])
        }),
    );
    push(
        "sub_row",
        fd_check(&[(3, 4), (1, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.sub_row(ids[0], ids[1])
        }),
    );
    push(
        "mul_row",
        fd_check(&[(3, 4), (1, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.mul_row(ids[0], ids[1])
        }),
    );
    push(
        "scale",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| t.scale(ids[0], -1.7)),
    );
    push(
        "add_const",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.add_const(ids[0], 0.9)
        }),
    );
    push(
        "relu",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| t.relu(ids[0])),
    );
    push(
        "sqrt",
        fd_check(&[(3, 4)], (0.5, 1.5), false, seed, |t, ids| t.sqrt(ids[0])),
    );
    push(
        "recip",
        fd_check(&[(3, 4)], (0.8, 1.8), false, seed, |t, ids| t.recip(ids[0])),
    );
    push(
        "sin",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| t.sin(ids[0])),
    );
    push(
        "cos",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| t.cos(ids[0])),
    );
    push(
        "min_const",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.min_const(ids[0], 0.2)
        }),
    );
    push(
        "max_const",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.max_const(ids[0], 0.2)
        }),
    );
    push(
        "mul_scalar",
        fd_check(&[(3, 4), (1, 1)], (0.4, 1.4), true, seed, |t, ids| {
            t.mul_scalar(ids[0], ids[1])
        }),
    );
    push(
        "concat_cols",
        fd_check(&[(3, 2), (3, 3), (3, 1)], (0.4, 1.4), true, seed, |t, ids| {
            t.concat_cols(ids)
        }),
    );
    push(
        "concat_rows",
        fd_check(&[(2, 3), (1, 3), (3, 3)], (0.4, 1.4), true, seed, |t, ids| {
            t.concat_rows(ids)
        }),
    );
    push(
        "slice_cols",
        fd_check(&[(3, 5)], (0.4, 1.4), true, seed, |t, ids| {
            t.slice_cols(ids[0], 1, 4)
        }),
    );
    push(
        "slice_rows",
        fd_check(&[(5, 3)], (0.4, 1.4), true, seed, |t, ids| {
            t.slice_rows(ids[0], 2, 4)
        }),
    );
    push(
        "gather_rows",
        fd_check(&[(4, 3)], (0.4, 1.4), true, seed, |t, ids| {
            t.gather_rows(ids[0], Rc::new(vec![3, 0, 3, 1]))
        }),
    );
    push(
        "scatter_add_rows",
        fd_check(&[(4, 3)], (0.4, 1.4), true, seed, |t, ids| {
            t.scatter_add_rows(ids[0], Rc::new(vec![1, 0, 1, 2]), 3)
        }),
    );
    push(
        "sum_all",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| t.sum_all(ids[0])),
    );
    push(
        "mean_rows",
        fd_check(&[(4, 3)], (0.4, 1.4), true, seed, |t, ids| t.mean_rows(ids[0])),
    );
    push(
        "sum_cols",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| t.sum_cols(ids[0])),
    );
    push(
        "scale_rows",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.scale_rows(ids[0], Rc::new(vec![0.5, -1.25, 2.0]))
        }),
    );
    push(
        "reshape",
        fd_check(&[(3, 4)], (0.4, 1.4), true, seed, |t, ids| {
            t.reshape(ids[0], 4, 3)
        }),
    );

    out
}

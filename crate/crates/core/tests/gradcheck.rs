//! Central finite-difference checks for every tape primitive, plus a few
//! composite programs that mirror how the model wires primitives together.

mod common;

use std::rc::Rc;

use common::{all_primitive_checks, fd_check};

const TOL: f32 = 1e-3;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in [1u64, 2, 3] {
        for (name, err) in all_primitive_checks(seed) {
            assert!(err < TOL, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn mlp_like_composite_matches_finite_differences() {
    // x -> relu(x*W + b) -> *V -> residual add, a miniature of the
    // propagator block.
    let err = fd_check(
        &[(4, 3), (3, 5), (1, 5), (5, 5)],
        (0.4, 1.2),
        true,
        11,
        |t, ids| {
            let z = t.matmul(ids[0], ids[1]);
            let z = t.add_row(z, ids[2]);
            let h = t.relu(z);
            let o = t.matmul(h, ids[3]);
            t.add(o, h)
        },
    );
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn norm_like_composite_matches_finite_differences() {
    // Row norms via sqrt(sum of squares + eps): the edge-length feature.
    let err = fd_check(&[(5, 3)], (0.4, 1.2), true, 12, |t, ids| {
        let sq = t.mul(ids[0], ids[0]);
        let s = t.sum_cols(sq);
        let s = t.add_const(s, 1e-8);
        t.sqrt(s)
    });
    assert!(err < TOL, "rel err {err}");
}

#[test]
fn message_passing_composite_matches_finite_differences() {
    // Gather sender/receiver rows, combine, scatter back: the aggregation
    // pattern used by every propagation step.
    let send = Rc::new(vec![0u32, 1, 2, 2, 3]);
    let recv = Rc::new(vec![1u32, 0, 3, 1, 2]);
    let err = fd_check(&[(4, 3), (3, 3)], (0.4, 1.2), true, 13, |t, ids| {
        let hs = t.gather_rows(ids[0], send.clone());
        let hr = t.gather_rows(ids[0], recv.clone());
        let d = t.sub(hs, hr);
        let m = t.matmul(d, ids[1]);
        let m = t.relu(m);
        let agg = t.scatter_add_rows(m, recv.clone(), 4);
        t.add(agg, ids[0])
    });
    assert!(err < TOL, "rel err {err}");
}

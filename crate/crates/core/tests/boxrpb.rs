mod common;

use common::{project, rand_tensor, sample_coords, store_gradcheck, weights};
use plaindet::attention::{cross_attention, AttentionConfig, MultiHeadAttention};
use plaindet::boxrpb::{axial_add, center_rpb, decomposed_boxrpb, naive_boxrpb, BiasTerm, RpbMlp};
use plaindet::geometry::{diff, BBox, GridSize};
use plaindet::numerics::{ParamStore, Tape};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn zero_store(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        let id = store.id_of(&n).unwrap();
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn random_boxes(rng: &mut StdRng, k: usize, grid: GridSize) -> Vec<BBox> {
    (0..k)
        .map(|_| {
            let w = rng.gen_range(0.3..grid.w as f64);
            let h = rng.gen_range(0.3..grid.h as f64);
            BBox::new(rng.gen_range(0.0..grid.w as f64), rng.gen_range(0.0..grid.h as f64), w, h).unwrap()
        })
        .collect()
}

#[test]
fn broadcast_identity_on_random_shapes() {
    let mut rng = StdRng::seed_from_u64(200);
    for _ in 0..200 {
        let (k, h, w, m) = (rng.gen_range(1..6), rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..5));
        let bx: Vec<f64> = (0..k * w * m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let by: Vec<f64> = (0..k * h * m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let term = BiasTerm::Axial {
            k,
            grid: GridSize::new(h, w),
            heads: m,
            bx: bx.clone(),
            by: by.clone(),
        };
        let full = term.materialize().unwrap();
        assert_eq!(full.len(), k * h * w * m);
        for kk in 0..k {
            for i in 0..h {
                for j in 0..w {
                    for mm in 0..m {
                        let want = bx[(kk * w + j) * m + mm] + by[(kk * h + i) * m + mm];
                        assert_eq!(full[((kk * h + i) * w + j) * m + mm].to_bits(), want.to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn decomposed_mlps_match_loop_oracle() {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..20 {
        let grid = GridSize::new(rng.gen_range(1..7), rng.gen_range(1..7));
        let (k, m) = (rng.gen_range(1..5), rng.gen_range(1..4));
        let mut store = ParamStore::new();
        let mx = RpbMlp::new(&mut store, "x", 2, 8, m, &mut rng).unwrap();
        let my = RpbMlp::new(&mut store, "y", 2, 8, m, &mut rng).unwrap();
        let boxes = random_boxes(&mut rng, k, grid);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let bv = diff::boxes_constant(&mut tape, &boxes).unwrap();
        let off = diff::corner_offsets(&mut tape, bv, grid, true).unwrap();
        let b = decomposed_boxrpb(&mut tape, &p, &off, &mx, &my).unwrap();
        let (bxv, byv) = b.axial.unwrap();
        let (bx, by, full) = (tape.value(bxv).to_vec(), tape.value(byv).to_vec(), tape.value(b.full).to_vec());
        for kk in 0..k {
            for i in 0..grid.h {
                for j in 0..grid.w {
                    for mm in 0..m {
                        let want = bx[(kk * grid.w + j) * m + mm] + by[(kk * grid.h + i) * m + mm];
                        assert!((full[((kk * grid.h + i) * grid.w + j) * m + mm] - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn zero_mlp_gives_zero_bias_and_unbiased_attention() {
    let mut rng = StdRng::seed_from_u64(9);
    let grid = GridSize::new(3, 4);
    let cfg = AttentionConfig::new(8, 2).unwrap();
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", cfg, &mut rng);
    let naive = RpbMlp::new(&mut store, "naive", 4, 6, 2, &mut rng).unwrap();
    let mx = RpbMlp::new(&mut store, "mx", 2, 6, 2, &mut rng).unwrap();
    let my = RpbMlp::new(&mut store, "my", 2, 6, 2, &mut rng).unwrap();
    for prefix in ["naive", "mx", "my"] {
        zero_store(&mut store, prefix);
    }
    let boxes = random_boxes(&mut rng, 3, grid);
    let x = rand_tensor(&mut rng, &[3, 8], -1.0, 1.0);
    let mem = rand_tensor(&mut rng, &[12, 8], -1.0, 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let xv = tape.leaf(&x).unwrap();
    let mv = tape.leaf(&mem).unwrap();
    let bv = diff::boxes_constant(&mut tape, &boxes).unwrap();
    let off = diff::corner_offsets(&mut tape, bv, grid, true).unwrap();
    let plain = cross_attention(&mut tape, &p, &attn, xv, mv, grid, None, None, None).unwrap();
    for bias in [
        naive_boxrpb(&mut tape, &p, &off, &naive).unwrap(),
        decomposed_boxrpb(&mut tape, &p, &off, &mx, &my).unwrap(),
    ] {
        assert!(tape.value(bias.full).iter().all(|&v| v == 0.0));
        let biased = cross_attention(&mut tape, &p, &attn, xv, mv, grid, Some(&bias), None, None).unwrap();
        assert_eq!(tape.value(biased.output), tape.value(plain.output));
        assert_eq!(tape.value(biased.weights), tape.value(plain.weights));
    }
}

#[test]
fn zero_vertical_mlp_is_constant_down_columns() {
    let mut rng = StdRng::seed_from_u64(4);
    let grid = GridSize::new(5, 4);
    let mut store = ParamStore::new();
    let mx = RpbMlp::new(&mut store, "mx", 2, 6, 3, &mut rng).unwrap();
    let my = RpbMlp::new(&mut store, "my", 2, 6, 3, &mut rng).unwrap();
    zero_store(&mut store, "my");
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let bv = diff::boxes_constant(&mut tape, &random_boxes(&mut rng, 2, grid)).unwrap();
    let off = diff::corner_offsets(&mut tape, bv, grid, true).unwrap();
    let b = decomposed_boxrpb(&mut tape, &p, &off, &mx, &my).unwrap();
    let full = tape.value(b.full);
    let m = 3;
    for k in 0..2 {
        for i in 1..grid.h {
            for j in 0..grid.w {
                for mm in 0..m {
                    assert_eq!(full[((k * grid.h + i) * grid.w + j) * m + mm], full[(k * grid.h * grid.w + j) * m + mm]);
                }
            }
        }
    }
}

#[test]
fn identical_boxes_give_identical_slices() {
    let mut rng = StdRng::seed_from_u64(5);
    let grid = GridSize::new(4, 4);
    let mut store = ParamStore::new();
    let mlp = RpbMlp::new(&mut store, "n", 4, 8, 2, &mut rng).unwrap();
    let b = random_boxes(&mut rng, 1, grid)[0];
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let bv = diff::boxes_constant(&mut tape, &[b, b]).unwrap();
    let off = diff::corner_offsets(&mut tape, bv, grid, true).unwrap();
    let bias = naive_boxrpb(&mut tape, &p, &off, &mlp).unwrap();
    let v = tape.value(bias.full);
    let half = v.len() / 2;
    assert_eq!(v[..half], v[half..]);
}

#[test]
fn center_variant_hand_cases() {
    let mut rng = StdRng::seed_from_u64(6);
    let grid = GridSize::new(3, 3);
    // box centered on cell (1, 2): that cell's center offsets are zero
    let b = BBox::new(2.5, 1.5, 1.0, 2.0).unwrap();
    let mut tape = Tape::new();
    let bv = diff::boxes_constant(&mut tape, &[b]).unwrap();
    let (dcx, dcy) = diff::center_offsets(&mut tape, bv, grid, true).unwrap();
    assert_eq!(tape.value(dcx)[2], 0.0);
    assert_eq!(tape.value(dcy)[1], 0.0);

    // 1x1 grid, 2 -> 2 -> 1 MLP by hand
    let mut store = ParamStore::new();
    let mlp = RpbMlp::new(&mut store, "c", 2, 2, 1, &mut rng).unwrap();
    let w1 = [0.5, -1.0, 2.0, 0.25];
    store.load_values("c.0.weight", &[2, 2], &w1).unwrap();
    store.load_values("c.0.bias", &[2], &[0.1, 0.3]).unwrap();
    store.load_values("c.1.weight", &[2, 1], &[1.5, -0.5]).unwrap();
    store.load_values("c.1.bias", &[1], &[-0.2]).unwrap();
    let grid = GridSize::new(1, 1);
    let b = BBox::new(0.3, 0.8, 0.4, 0.2).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape).unwrap();
    let bv = diff::boxes_constant(&mut tape, &[b]).unwrap();
    let (dcx, dcy) = diff::center_offsets(&mut tape, bv, grid, true).unwrap();
    let out = center_rpb(&mut tape, &p, dcx, dcy, &mlp).unwrap();
    let x: [f64; 2] = [0.5 - 0.3, 0.5 - 0.8];
    let h: Vec<f64> = (0..2).map(|j| (x[0] * w1[j] + x[1] * w1[2 + j] + [0.1, 0.3][j]).max(0.0)).collect();
    let want: f64 = 1.5 * h[0] - 0.5 * h[1] - 0.2;
    assert!((tape.value(out.full)[0] - want).abs() < 1e-14);

    let mut zero = ParamStore::new();
    let z = RpbMlp::new(&mut zero, "z", 2, 4, 2, &mut rng).unwrap();
    zero_store(&mut zero, "z");
    let mut tape = Tape::new();
    let p = zero.bind(&mut tape).unwrap();
    let bv = diff::boxes_constant(&mut tape, &random_boxes(&mut rng, 2, GridSize::new(3, 3))).unwrap();
    let (dcx, dcy) = diff::center_offsets(&mut tape, bv, GridSize::new(3, 3), true).unwrap();
    let out = center_rpb(&mut tape, &p, dcx, dcy, &z).unwrap();
    assert!(tape.value(out.full).iter().all(|&v| v == 0.0));
}

fn bias_gradients(naive: bool) {
    let mut rng = StdRng::seed_from_u64(if naive { 41 } else { 42 });
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let grid = GridSize::new(rng.gen_range(1..4), rng.gen_range(1..4));
        let k = rng.gen_range(1..3);
        let mut store = ParamStore::new();
        let (a, b) = if naive {
            (RpbMlp::new(&mut store, "n", 4, 5, 2, &mut rng).unwrap(), None)
        } else {
            (
                RpbMlp::new(&mut store, "x", 2, 5, 2, &mut rng).unwrap(),
                Some(RpbMlp::new(&mut store, "y", 2, 5, 2, &mut rng).unwrap()),
            )
        };
        let boxes: Vec<f64> = random_boxes(&mut rng, k, grid).iter().flat_map(|b| b.to_array()).collect();
        let boxes = plaindet::Tensor::new(vec![k, 4], boxes).unwrap();
        let w = weights(&mut rng, 256);
        let total = store.num_values() + boxes.len();
        let coords = sample_coords(&mut rng, total, 40);
        let err = store_gradcheck(&store, &[boxes], Some(&coords), 1e-6, |t, p, v| {
            let off = diff::corner_offsets(t, v[0], grid, true)?;
            let bias = match &b {
                None => naive_boxrpb(t, p, &off, &a)?,
                Some(my) => decomposed_boxrpb(t, p, &off, &a, my)?,
            };
            project(t, bias.full, &w)
        });
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn naive_bias_gradients() {
    bias_gradients(true);
}

#[test]
fn decomposed_bias_gradients() {
    bias_gradients(false);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integer_shift_permutes_full_bias(
        x1 in 0u32..32, y1 in 0u32..32, w in 4u32..40, h in 4u32..40,
        d in 1usize..3, normalize in any::<bool>(), seed in 0u64..1000,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = 6;
        let grid = GridSize::new(n, n);
        let mut store = ParamStore::new();
        let mlp = RpbMlp::new(&mut store, "n", 4, 6, 2, &mut rng).unwrap();
        let mx = RpbMlp::new(&mut store, "x", 2, 6, 2, &mut rng).unwrap();
        let my = RpbMlp::new(&mut store, "y", 2, 6, 2, &mut rng).unwrap();
        let q = |v: u32| v as f64 / 16.0;
        let b = BBox::from_corners(q(x1), q(y1), q(x1 + w), q(y1 + h)).unwrap();
        let s = b.translate(d as f64, d as f64);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let mut fulls = Vec::new();
        for bb in [b, s] {
            let bv = diff::boxes_constant(&mut tape, &[bb]).unwrap();
            let off = diff::corner_offsets(&mut tape, bv, grid, normalize).unwrap();
            let nb = naive_boxrpb(&mut tape, &p, &off, &mlp).unwrap();
            let db = decomposed_boxrpb(&mut tape, &p, &off, &mx, &my).unwrap();
            fulls.push((tape.value(nb.full).to_vec(), tape.value(db.full).to_vec()));
        }
        for i in 0..n - d {
            for j in 0..n - d {
                for m in 0..2 {
                    let a = (i * n + j) * 2 + m;
                    let shifted = ((i + d) * n + j + d) * 2 + m;
                    prop_assert_eq!(fulls[0].0[a], fulls[1].0[shifted]);
                    prop_assert_eq!(fulls[0].1[a], fulls[1].1[shifted]);
                }
            }
        }
    }
}

#[test]
fn axial_add_rejects_mismatched_factors() {
    let mut tape = Tape::new();
    let bx = tape.constant(vec![2, 3, 1], vec![0.0; 6]).unwrap();
    let by = tape.constant(vec![1, 3, 1], vec![0.0; 3]).unwrap();
    assert!(axial_add(&mut tape, bx, by).is_err());
}

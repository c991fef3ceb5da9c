use mambajscc_core::csi::CsiEmbed;
use mambajscc_core::gradcheck::{check_gradients, weighted_sum};
use mambajscc_core::graph::scan_macs;
use mambajscc_core::params::normal;
use mambajscc_core::ssm::{
    discretize_taylor, discretize_zoh_exact, vs6_forward, AbarRule, DirectionParams, SsmConfig, Vs6Vars,
    VssmBlock,
};
use mambajscc_core::{Bindings, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat_vec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
}

/// `y_t = Σ_{k≤t} C·Ā^{t−k}·B̄·v_k + D·v_t`, with every power formed from
/// scratch.
fn unrolled_oracle(abar: &[f64], bbar: &[f64], c: &[f64], d: f64, v: &[f64], n: usize) -> Vec<f64> {
    (0..v.len())
        .map(|t| {
            let mut acc = d * v[t];
            for (k, &vk) in v.iter().enumerate().take(t + 1) {
                let mut x = bbar.to_vec();
                for _ in 0..t - k {
                    x = mat_vec(abar, &x, n);
                }
                acc += c.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() * vk;
            }
            acc
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[test]
fn scan_matches_unrolled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let len = rng.random_range(1..=16);
        let abar = uniform(&mut rng, n * n, 1.0 / n as f64);
        let bbar = uniform(&mut rng, n, 1.0);
        let c = uniform(&mut rng, n, 1.0);
        let d: f64 = rng.random_range(-1.0..1.0);
        let v = uniform(&mut rng, len, 2.0);

        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[n, n], abar.clone()).unwrap());
        let bv = g.constant(Tensor::new(&[n, 1], bbar.clone()).unwrap());
        let cv = g.constant(Tensor::new(&[1, n], c.clone()).unwrap());
        let dv = g.constant(Tensor::new(&[1, 1], vec![d]).unwrap());
        let vv = g.constant(Tensor::vector(&v));
        let y = g.selective_scan(vv, av, bv, cv, dv).unwrap();

        let expect = unrolled_oracle(&abar, &bbar, &c, d, &v, n);
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-10, "max abs error {worst:e}");
}

#[test]
fn scan_random_n3_d6_to_machine_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, len) = (3, 6);
    let abar = uniform(&mut rng, n * n, 0.5);
    let bbar = uniform(&mut rng, n, 1.0);
    let c = uniform(&mut rng, n, 1.0);
    let v = uniform(&mut rng, len, 1.0);
    let mut g = Graph::new();
    let av = g.constant(Tensor::new(&[n, n], abar.clone()).unwrap());
    let bv = g.constant(Tensor::new(&[n, 1], bbar.clone()).unwrap());
    let cv = g.constant(Tensor::new(&[1, n], c.clone()).unwrap());
    let dv = g.constant(Tensor::new(&[1, 1], vec![0.4]).unwrap());
    let vv = g.constant(Tensor::vector(&v));
    let y = g.selective_scan(vv, av, bv, cv, dv).unwrap();
    let expect = unrolled_oracle(&abar, &bbar, &c, 0.4, &v, n);
    let got = g.value(y).data();
    assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(g.macs(), scan_macs(len, n));
}

fn scalar(x: f64) -> Tensor {
    Tensor::new(&[1, 1], vec![x]).unwrap()
}

fn taylor_bbar(delta: f64) -> f64 {
    let mut g = Graph::new();
    let d = g.constant(scalar(delta));
    let a = g.constant(scalar(-1.0));
    let b = g.constant(scalar(1.0));
    let (_, bbar) = discretize_taylor(&mut g, d, a, b, AbarRule::MatrixExp).unwrap();
    g.value(bbar).item()
}

fn zoh_bbar(delta: f64) -> f64 {
    discretize_zoh_exact(&scalar(delta), &scalar(-1.0), &scalar(1.0)).unwrap().1.item()
}

#[test]
fn taylor_gap_is_second_order() {
    let gap = |d: f64| (taylor_bbar(d) - zoh_bbar(d)).abs();
    for (big, small) in [(0.2, 0.1), (0.1, 0.05)] {
        let ratio = gap(big) / gap(small);
        assert!((3.5..=4.5).contains(&ratio), "Δ {big} → {small}: ratio {ratio}");
    }
    assert!((zoh_bbar(0.1) - 0.0951626).abs() < 5e-7);
    assert!((taylor_bbar(0.1) - 0.1).abs() < 5e-7);
    assert!((gap(0.1) - 0.0048374).abs() < 5e-7);
}

/// Integrates `Φ' = MΦ, Φ(0) = I` and `X' = MX + ΔB, X(0) = 0` over `[0, 1]`
/// with classical RK4, giving `(expm(M), ∫₀¹ expm(sM) ds · ΔB)`.
fn rk4_zoh(m: &[f64], db: &[f64], n: usize, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let h = 1.0 / steps as f64;
    // State: n×n block for Φ followed by an n-vector for X.
    let f = |s: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n + n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n).map(|k| m[i * n + k] * s[k * n + j]).sum();
            }
            out[n * n + i] = (0..n).map(|k| m[i * n + k] * s[n * n + k]).sum::<f64>() + db[i];
        }
        out
    };
    let axpy = |x: &[f64], k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(x, k)| x + a * k).collect() };
    let mut s = vec![0.0; n * n + n];
    for i in 0..n {
        s[i * n + i] = 1.0;
    }
    for _ in 0..steps {
        let k1 = f(&s);
        let k2 = f(&axpy(&s, &k1, h / 2.0));
        let k3 = f(&axpy(&s, &k2, h / 2.0));
        let k4 = f(&axpy(&s, &k3, h));
        for i in 0..s.len() {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    (s[..n * n].to_vec(), s[n * n..].to_vec())
}

#[test]
fn exact_zoh_and_matrix_exp_match_rk4() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..5 {
        let n = 3;
        let delta = Tensor::new(&[n, n], uniform(&mut rng, n * n, 0.4)).unwrap();
        let mut a = Tensor::new(&[n, n], uniform(&mut rng, n * n, 0.5)).unwrap();
        for i in 0..n {
            a.data_mut()[i * n + i] -= 1.5;
        }
        let b = Tensor::new(&[n, 1], uniform(&mut rng, n, 1.0)).unwrap();
        let m = mambajscc_core::linalg::matmul(delta.data(), a.data(), n, n, n);
        let db = mambajscc_core::linalg::matmul(delta.data(), b.data(), n, n, 1);
        let (phi, x) = rk4_zoh(&m, &db, n, 2000);

        let (abar, bbar) = discretize_zoh_exact(&delta, &a, &b).unwrap();
        assert!(abar.data().iter().zip(&phi).all(|(p, q)| (p - q).abs() < 1e-11));
        assert!(bbar.data().iter().zip(&x).all(|(p, q)| (p - q).abs() < 1e-11));

        let mut g = Graph::new();
        let (dv, av, bv) = (g.constant(delta), g.constant(a), g.constant(b));
        let (abar_g, _) = discretize_taylor(&mut g, dv, av, bv, AbarRule::MatrixExp).unwrap();
        assert!(g.value(abar_g).data().iter().zip(&phi).all(|(p, q)| (p - q).abs() < 1e-11));
    }
}

#[test]
fn entrywise_exponential_is_expansive_at_the_initial_point() {
    // Δ = 0.1·I, A = −I: every off-diagonal entry of exp(ΔA) is e⁰ = 1, so
    // each row sums to N − 1 + e^{−0.1} > 1.
    let n = 4;
    let mut g = Graph::new();
    let delta = g.constant(Tensor::eye(n).map(|x| 0.1 * x));
    let a = g.constant(Tensor::eye(n).map(|x| -x));
    let b = g.constant(Tensor::ones(&[n, 1]));
    let (entrywise, _) = discretize_taylor(&mut g, delta, a, b, AbarRule::Elementwise).unwrap();
    let (matrix, _) = discretize_taylor(&mut g, delta, a, b, AbarRule::MatrixExp).unwrap();
    let row_sum = |t: &Tensor| t.data()[..n].iter().sum::<f64>();
    assert!((row_sum(g.value(entrywise)) - (3.0 + (-0.1f64).exp())).abs() < 1e-15);
    assert!((row_sum(g.value(matrix)) - (-0.1f64).exp()).abs() < 1e-15);
}

fn direction(rng: &mut ChaCha8Rng, n: usize, len: usize, std: f64) -> DirectionParams {
    DirectionParams {
        g: normal(rng, &[1, n], std),
        delta: normal(rng, &[n, n], std),
        h1: normal(rng, &[n, len], std),
        h2: normal(rng, &[n, len], std),
        h3: normal(rng, &[n, len], std),
        a: normal(rng, &[n, n], std),
        d: normal(rng, &[1, 1], std),
    }
}

fn bind(g: &mut Graph, dirs: &[DirectionParams; 4]) -> Vs6Vars {
    Vs6Vars {
        dirs: [0, 1, 2, 3].map(|j| dirs[j].bind(g, false)),
    }
}

#[test]
fn identity_scans_return_four_times_input() {
    // B = H2·v = 0 keeps the state at zero, so each direction returns D·v = v.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let n = rng.random_range(1..=4);
        let dirs = [0; 4].map(|_| {
            let mut p = direction(&mut rng, n, h * w, 1.0);
            p.h2 = Tensor::zeros(&[n, h * w]);
            p.d = scalar(1.0);
            p
        });
        let z = normal(&mut rng, &[h, w], 1.0);
        let mut g = Graph::new();
        let vars = bind(&mut g, &dirs);
        let zv = g.constant(z.clone());
        let y = vs6_forward(&mut g, zv, &vars, AbarRule::MatrixExp).unwrap();
        let expect: Vec<f64> = z.data().iter().map(|x| 4.0 * x).collect();
        assert_eq!(g.value(y).data(), expect.as_slice());
    }
}

#[test]
fn zero_input_with_zero_bias_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dirs = [0; 4].map(|_| {
        let mut p = direction(&mut rng, 3, 12, 1.0);
        p.delta = Tensor::zeros(&[3, 3]);
        p
    });
    let mut g = Graph::new();
    let vars = bind(&mut g, &dirs);
    let z = g.constant(Tensor::zeros(&[3, 4]));
    let y = vs6_forward(&mut g, z, &vars, AbarRule::MatrixExp).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_pixel_is_a_sum_of_four_scalar_systems() {
    let z = 0.7;
    let raw = [
        [0.3, 0.2, 0.5, -0.4, 0.9, -1.0, 0.6],
        [-0.1, 0.05, 1.2, 0.3, -0.7, -2.0, 0.0],
        [0.8, 0.4, -0.3, 0.2, 0.1, -0.5, 1.5],
        [0.0, 0.1, 0.4, 0.4, 0.4, -1.0, -0.2],
    ];
    let mut expect = 0.0;
    let dirs = raw.map(|[gg, dl, h1, h2, h3, a, d]| {
        let delta = h1 * z * gg + dl;
        let bbar = delta * (h2 * z);
        let c = h3 * z;
        expect += c * bbar * z + d * z;
        DirectionParams {
            g: scalar(gg),
            delta: scalar(dl),
            h1: scalar(h1),
            h2: scalar(h2),
            h3: scalar(h3),
            a: scalar(a),
            d: scalar(d),
        }
    });
    let mut g = Graph::new();
    let vars = bind(&mut g, &dirs);
    let zv = g.constant(scalar(z));
    let y = vs6_forward(&mut g, zv, &vars, AbarRule::MatrixExp).unwrap();
    assert!((g.value(y).item() - expect).abs() < 1e-14);
}

#[test]
fn small_random_parameters_keep_outputs_finite() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, n) = (4, 4, 4);
        let dirs = [0; 4].map(|_| direction(&mut rng, n, h * w, 0.02));
        let z = normal(&mut rng, &[h, w], 1.0);
        let mut g = Graph::new();
        let vars = bind(&mut g, &dirs);
        let zv = g.constant(z);
        let y = vs6_forward(&mut g, zv, &vars, AbarRule::MatrixExp).unwrap();
        assert!(g.value(y).all_finite(), "seed {seed}");
    }
}

#[test]
fn scan_cost_is_linear_in_sequence_length() {
    for n in 1..=16 {
        for len in [1, 7, 64, 256, 1024] {
            assert_eq!(scan_macs(2 * len, n), 2 * scan_macs(len, n));
        }
    }
}

fn tiny_cfg() -> SsmConfig {
    SsmConfig {
        state_dim: 2,
        ..SsmConfig::default()
    }
}

fn tiny_block(seed: u64) -> (ParamStore, VssmBlock, CsiEmbed) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = VssmBlock::new(&mut store, "blk", 2, 4, 4, tiny_cfg(), &mut rng);
    let embed = CsiEmbed::new(&mut store, "blk.csi", 4, block.inner_channels(), &mut rng);
    // Spread the initial values so every parameter carries signal.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let fresh = normal(&mut rng, t.shape(), 0.1);
        for (x, y) in t.data_mut().iter_mut().zip(fresh.data()) {
            *x += y;
        }
    }
    (store, block, embed)
}

#[test]
fn zero_output_projection_is_the_identity() {
    let (mut store, block, _) = tiny_block(1);
    for id in [block.out_w, block.out_b] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = normal(&mut rng, &[2, 4, 4], 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, &p, xv, None).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn closed_gate_kills_the_scan_branch() {
    let (mut store, block, _) = tiny_block(2);
    for id in [block.gate_w, block.gate_b, block.out_b] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = normal(&mut rng, &[2, 4, 4], 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, &p, xv, None).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn block_with_csi_matches_finite_differences() {
    for seed in 0..5 {
        let (store, block, embed) = tiny_block(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = vec![normal(&mut rng, &[2, 4, 4], 1.0), normal(&mut rng, &[4], 1.0)];
        inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
        let r = check_gradients(&inputs, 1e-5, None, |g, v| {
            let p = Bindings::from_vars(v[2..].to_vec());
            let add = embed.project(g, &p, v[1])?;
            let y = block.forward(g, &p, v[0], Some(add))?;
            weighted_sum(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scan_is_linear_in_its_input(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let abar = Tensor::new(&[n, n], uniform(&mut rng, n * n, 0.3)).unwrap();
        let bbar = normal(&mut rng, &[n, 1], 1.0);
        let c = normal(&mut rng, &[1, n], 1.0);
        let d = normal(&mut rng, &[1, 1], 1.0);
        let u = normal(&mut rng, &[9], 1.0);
        let v = normal(&mut rng, &[9], 1.0);
        let combo = Tensor::new(&[9], u.data().iter().zip(v.data()).map(|(a, b)| alpha * a + b).collect()).unwrap();
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let vars = [&abar, &bbar, &c, &d, x].map(|t| g.constant(t.clone()));
            let y = g.selective_scan(vars[4], vars[0], vars[1], vars[2], vars[3]).unwrap();
            g.value(y).clone()
        };
        let (yu, yv, yc) = (run(&u), run(&v), run(&combo));
        for i in 0..9 {
            let lin = alpha * yu.data()[i] + yv.data()[i];
            prop_assert!((yc.data()[i] - lin).abs() < 1e-10);
        }
    }
}

use glass_core::model::{bce_mean, focal_per_pixel, loss_las};
use glass_core::ndgrad::{Tape, Tensor, Var};
use glass_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random_tensor(shape: &[usize], scale: f64, rng: &mut glass_core::rng::Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
    Tensor::new(shape, data).unwrap()
}

fn eval(params: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false).unwrap()).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).item().unwrap()
}

fn analytic(params: &[Tensor], build: &Build) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true).unwrap()).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    vars.iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect()
}

fn central(params: &[Tensor], build: &Build, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..params.len() {
        let mut g = Vec::new();
        for j in 0..params[i].len() {
            let mut plus = params.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = params.to_vec();
            minus[i].data_mut()[j] -= h;
            g.push((eval(&plus, build) - eval(&minus, build)) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<_>>();
    let (a, b) = (flat(a), flat(b));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

/// Random MLP graph number `k`: parameters and a loss builder.
fn graph(k: u64) -> (Vec<Tensor>, Box<Build>) {
    let mut rng = seeded(1000 + k);
    let n = rng.gen_range(2..8);
    let c = rng.gen_range(2..6);
    let h = rng.gen_range(2..6);
    let params = vec![
        random_tensor(&[n, c], 1.0, &mut rng),
        random_tensor(&[c, h], 0.7, &mut rng),
        random_tensor(&[h], 0.2, &mut rng),
        random_tensor(&[h, 1], 0.7, &mut rng),
        random_tensor(&[1], 0.2, &mut rng),
    ];
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    let gamma = [0.0, 1.0, 2.0][rng.gen_range(0..3)];
    let target = rng.gen_range(0.0..1.0);
    let kind = k % 4;
    let build: Box<Build> = Box::new(move |t: &mut Tape, p: &[Var]| {
        let z = t.matmul(p[0], p[1]).unwrap();
        let z = t.add(z, p[2]).unwrap();
        let z = if kind == 3 { t.sigmoid(z).unwrap() } else { t.leaky_relu(z, 0.2).unwrap() };
        let z = t.matmul(z, p[3]).unwrap();
        let z = t.add(z, p[4]).unwrap();
        let z = t.sigmoid(z).unwrap();
        match kind {
            0 => bce_mean(t, z, 0.0).unwrap(),
            1 => bce_mean(t, z, target).unwrap(),
            2 => loss_las(t, z, &mask, gamma, 1.0).unwrap(),
            _ => {
                let a = bce_mean(t, z, 1.0).unwrap();
                let f = focal_per_pixel(t, z, &mask, 2.0).unwrap();
                let f = t.mean(f).unwrap();
                let s = t.add(a, f).unwrap();
                t.scale(s, 0.5).unwrap()
            }
        }
    });
    (params, build)
}

#[test]
fn hundred_random_graphs_match_central_differences() {
    let started = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let (params, build) = graph(k);
        let e = rel_err(&analytic(&params, &*build), &central(&params, &*build, 1e-5));
        assert!(e <= 1e-4, "graph {k}: relative error {e}");
        worst = worst.max(e);
    }
    assert!(started.elapsed().as_secs_f64() < 30.0);
    assert!(worst < 1e-4);
}

#[test]
fn ohem_subset_gradient_matches_differences() {
    let mut rng = seeded(5);
    let logits = random_tensor(&[12, 1], 1.5, &mut rng);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
    let build: Box<Build> = Box::new(move |t: &mut Tape, p: &[Var]| {
        let z = t.sigmoid(p[0]).unwrap();
        loss_las(t, z, &mask, 2.0, 0.5).unwrap()
    });
    let params = [logits];
    let e = rel_err(&analytic(&params, &*build), &central(&params, &*build, 1e-6));
    assert!(e <= 1e-6, "{e}");
}

proptest! {
    #[test]
    fn elementwise_chain_gradients(xs in prop::collection::vec(0.1f64..3.0, 1..12), k in -2.0f64..2.0, p in 0.5f64..3.0) {
        let build: Box<Build> = Box::new(move |t: &mut Tape, v: &[Var]| {
            let a = t.pow(v[0], p).unwrap();
            let b = t.log(v[0]).unwrap();
            let c = t.mul(a, b).unwrap();
            let d = t.scale(c, k).unwrap();
            let e = t.sigmoid(d).unwrap();
            t.sum(e).unwrap()
        });
        let n = xs.len();
        let params = [Tensor::new(&[n], xs.clone()).unwrap()];
        let got = analytic(&params, &*build);
        for (g, x) in got[0].iter().zip(&xs) {
            let s = 1.0 / (1.0 + (-k * x.powf(p) * x.ln()).exp());
            let want = s * (1.0 - s) * k * x.powf(p - 1.0) * (p * x.ln() + 1.0);
            prop_assert!((g - want).abs() <= 1e-9 * want.abs() + 1e-300, "{} vs {}", g, want);
        }
    }

    #[test]
    fn broadcast_add_gradient_sums_rows(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let params = [random_tensor(&[rows, cols], 1.0, &mut rng), random_tensor(&[cols], 1.0, &mut rng)];
        let g = analytic(&params, &|t: &mut Tape, v: &[Var]| {
            let s = t.add(v[0], v[1]).unwrap();
            t.sum(s).unwrap()
        });
        prop_assert!(g[0].iter().all(|&x| x == 1.0));
        prop_assert!(g[1].iter().all(|&x| x == rows as f64));
    }
}

//! Independent brute-force evaluation of the hierarchical bound on a tiny
//! instance: three data points, a root with two leaves, `J = D = 2`. Every
//! (path, level) pair is enumerated and each expectation written out from
//! scratch, with its own log-gamma and digamma.

use hcrl::hierarchy::{Hierarchy, NodeParams};
use hcrl::variational::{elbo_hcrl, InstanceState, Observation};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn lgamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + x.ln() - 0.5 / x
        - x2 * (1.0 / 12.0 - x2 * (1.0 / 120.0 - x2 * (1.0 / 252.0 - x2 * (1.0 / 240.0 - x2 / 132.0))))
}

struct Node {
    mu: [f64; 2],
    s2: [f64; 2],
    a: f64,
    b: f64,
}

/// root, left leaf, right leaf
fn nodes() -> [Node; 3] {
    [
        Node { mu: [0.1, -0.2], s2: [1.3, 0.8], a: 1.0, b: 1.0 },
        Node { mu: [1.5, 0.4], s2: [0.4, 0.6], a: 2.5, b: 1.7 },
        Node { mu: [-1.1, 0.9], s2: [0.7, 0.3], a: 0.8, b: 2.2 },
    ]
}

const GAMMA: f64 = 1.4;
const ALPHA: [f64; 2] = [1.2, 0.7];

struct Inst {
    x: [f64; 2],
    mu_z: [f64; 2],
    s2_z: [f64; 2],
    alpha_t: [f64; 2],
    omega: [f64; 2],
    q: [f64; 2],
    /// decoder outputs `[μ_x, log σ²_x]`, one per Monte Carlo sample
    dec: Vec<[f64; 4]>,
}

fn instances() -> Vec<Inst> {
    vec![
        Inst {
            x: [0.3, -1.2],
            mu_z: [0.9, 0.1],
            s2_z: [0.2, 0.5],
            alpha_t: [2.0, 3.5],
            omega: [0.3, 0.7],
            q: [0.8, 0.2],
            dec: vec![[0.2, -1.0, -0.3, 0.1], [0.5, -1.4, 0.2, -0.2]],
        },
        Inst {
            x: [-2.0, 0.7],
            mu_z: [-1.3, 0.6],
            s2_z: [0.9, 0.1],
            alpha_t: [0.6, 1.9],
            omega: [0.55, 0.45],
            q: [0.1, 0.9],
            dec: vec![[-1.7, 0.5, 0.4, -0.6], [-2.2, 0.9, 0.0, 0.3]],
        },
        Inst {
            x: [0.0, 0.4],
            mu_z: [0.2, -0.4],
            s2_z: [1.1, 0.7],
            alpha_t: [4.2, 0.9],
            omega: [0.9, 0.1],
            q: [0.45, 0.55],
            dec: vec![[0.1, 0.3, -0.5, -0.5], [-0.1, 0.6, 0.1, 0.2]],
        },
    ]
}

pub fn build_tree() -> Hierarchy {
    let n = nodes();
    let mut tree = Hierarchy::chain(2, 2, GAMMA).unwrap();
    let p = |k: usize| NodeParams::new(n[k].mu.to_vec(), n[k].s2.to_vec(), n[k].a, n[k].b).unwrap();
    tree.node_mut(0).params = p(0);
    tree.node_mut(1).params = p(1);
    tree.push_child(0, p(2)).unwrap();
    tree
}

fn e_log_v(n: &Node) -> f64 {
    digamma(n.a) - digamma(n.a + n.b)
}

fn e_log_1mv(n: &Node) -> f64 {
    digamma(n.b) - digamma(n.a + n.b)
}

/// `E_{N(z; m, s)}[log N(z; μ, σ²)]`, one dimension at a time.
fn e_log_normal(m: &[f64; 2], s: &[f64; 2], n: &Node) -> f64 {
    (0..2)
        .map(|j| -0.5 * LN_2PI - 0.5 * n.s2[j].ln() - ((m[j] - n.mu[j]).powi(2) + s[j]) / (2.0 * n.s2[j]))
        .sum()
}

fn dirichlet_log_norm(a: &[f64]) -> f64 {
    lgamma(a.iter().sum()) - a.iter().map(|&v| lgamma(v)).sum::<f64>()
}

/// `E_q[log p(η | α)] − E_q[log q(η | α̃)]`.
fn eta_block(alpha_t: &[f64; 2]) -> f64 {
    let t0: f64 = alpha_t.iter().sum();
    let e: Vec<f64> = alpha_t.iter().map(|&a| digamma(a) - digamma(t0)).collect();
    let lp = dirichlet_log_norm(&ALPHA) + (0..2).map(|l| (ALPHA[l] - 1.0) * e[l]).sum::<f64>();
    let lq = dirichlet_log_norm(alpha_t) + (0..2).map(|l| (alpha_t[l] - 1.0) * e[l]).sum::<f64>();
    lp - lq
}

/// `E_q[log Beta(v; 1, γ)] − E_q[log Beta(v; a, b)]` for a non-root stick.
fn stick_block(n: &Node) -> f64 {
    let lp = dirichlet_log_norm(&[1.0, GAMMA]) + (GAMMA - 1.0) * e_log_1mv(n);
    let lq = dirichlet_log_norm(&[n.a, n.b]) + (n.a - 1.0) * e_log_v(n) + (n.b - 1.0) * e_log_1mv(n);
    lp - lq
}

fn gaussian_loglik(x: &[f64; 2], o: &[f64; 4]) -> f64 {
    (0..2)
        .map(|d| -0.5 * (LN_2PI + o[2 + d]) - 0.5 * (x[d] - o[d]).powi(2) * (-o[2 + d]).exp())
        .sum()
}

/// Full bound by enumeration. With `shared` the level proportion is one
/// global Dirichlet counted once; otherwise each instance has its own.
pub fn oracle(shared: Option<[f64; 2]>) -> f64 {
    let n = nodes();
    // node indices of each full path, and the expected log path prior
    let paths = [[0usize, 1], [0, 2]];
    let log_prior = [e_log_v(&n[1]), e_log_1mv(&n[1]) + e_log_v(&n[2])];
    let mut total = 0.0;
    for inst in instances() {
        let alpha_t = shared.unwrap_or(inst.alpha_t);
        let t0: f64 = alpha_t.iter().sum();
        let mut pairs = 0.0;
        for (zi, path) in paths.iter().enumerate() {
            for (l, &node) in path.iter().enumerate() {
                let w = inst.q[zi] * inst.omega[l];
                let e_log_eta = digamma(alpha_t[l]) - digamma(t0);
                pairs += w
                    * (log_prior[zi] + e_log_eta + e_log_normal(&inst.mu_z, &inst.s2_z, &n[node])
                        - inst.q[zi].ln()
                        - inst.omega[l].ln());
            }
        }
        let recon = inst.dec.iter().map(|o| gaussian_loglik(&inst.x, o)).sum::<f64>() / inst.dec.len() as f64;
        let z_entropy: f64 = inst.s2_z.iter().map(|s| 0.5 * (LN_2PI + 1.0 + s.ln())).sum();
        let eta = if shared.is_none() { eta_block(&alpha_t) } else { 0.0 };
        total += recon + pairs + z_entropy + eta;
    }
    if let Some(g) = shared {
        total += eta_block(&g);
    }
    total + stick_block(&n[1]) + stick_block(&n[2])
}

/// The library bound on the same instance.
pub fn library(shared: Option<[f64; 2]>) -> f64 {
    let tree = build_tree();
    let insts = instances();
    let x: Vec<Vec<f64>> = insts.iter().map(|i| i.x.to_vec()).collect();
    let states: Vec<InstanceState> = insts
        .iter()
        .map(|i| InstanceState {
            mu_z: i.mu_z.to_vec(),
            sigma2_z: i.s2_z.to_vec(),
            alpha_tilde: i.alpha_t.to_vec(),
            omega: i.omega.to_vec(),
            q_path: i.q.to_vec(),
        })
        .collect();
    let decoded: Vec<Vec<Vec<f64>>> = insts.iter().map(|i| i.dec.iter().map(|o| o.to_vec()).collect()).collect();
    let g = shared.map(|g| g.to_vec());
    elbo_hcrl(&x, Observation::Gaussian, &tree, &ALPHA, g.as_deref(), &states, &decoded)
        .unwrap()
        .total()
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Brute-force maximum of `sum_j p_j f_j` over the set, by enumerating the
/// vertices of `{u : |u_j| <= 1, sum |u_j| <= gamma, sum pt_j u_j = 0}` with
/// `p = q + pt * u`. At a vertex every coordinate is -1, 0 or 1 except at most
/// two, which are pinned down by the equality and, for two, the budget.
#[allow(clippy::needless_range_loop)]
pub fn oracle(losses: &[f64], q: &[f64], pt: &[f64], gamma: f64) -> f64 {
    let n = losses.len();
    let mut best = f64::NEG_INFINITY;
    let mut u = vec![0.0; n];
    let eval = |u: &[f64]| -> Option<f64> {
        let eq: f64 = u.iter().zip(pt).map(|(x, w)| x * w).sum();
        let budget: f64 = u.iter().map(|x| x.abs()).sum();
        if eq.abs() > 1e-9 || budget > gamma + 1e-9 || u.iter().any(|x| x.abs() > 1.0 + 1e-9) {
            return None;
        }
        Some((0..n).map(|j| (q[j] + pt[j] * u[j]) * losses[j]).sum())
    };
    let total = 3usize.pow(n as u32);
    for free_mask in 0..(1usize << n) {
        let free: Vec<usize> = (0..n).filter(|j| free_mask >> j & 1 == 1).collect();
        if free.len() > 2 {
            continue;
        }
        for code in 0..total {
            let mut c = code;
            let mut skip = false;
            for j in 0..n {
                let digit = c % 3;
                c /= 3;
                if free.contains(&j) {
                    // Free coordinates use only digit 0 to avoid repeats.
                    if digit != 0 {
                        skip = true;
                    }
                    u[j] = 0.0;
                } else {
                    u[j] = digit as f64 - 1.0;
                }
            }
            if skip {
                continue;
            }
            let rest_eq: f64 = u.iter().zip(pt).map(|(x, w)| x * w).sum();
            let rest_abs: f64 = u.iter().map(|x| x.abs()).sum();
            match free.as_slice() {
                [] => {}
                [i] => u[*i] = -rest_eq / pt[*i],
                [i, k] => {
                    // pt_i x + pt_k y = -rest_eq ; s_i x + s_k y = gamma - rest_abs
                    let mut found = None;
                    for (si, sk) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                        let det = pt[*i] * sk - pt[*k] * si;
                        if det.abs() < 1e-14 {
                            continue;
                        }
                        let r = gamma - rest_abs;
                        let x = (-rest_eq * sk - pt[*k] * r) / det;
                        let y = (pt[*i] * r + rest_eq * si) / det;
                        if x * si >= -1e-12 && y * sk >= -1e-12 {
                            let mut cand = u.clone();
                            cand[*i] = x;
                            cand[*k] = y;
                            if let Some(v) = eval(&cand) {
                                found = Some(found.map_or(v, |b: f64| b.max(v)));
                            }
                        }
                    }
                    if let Some(v) = found {
                        best = best.max(v);
                    }
                    continue;
                }
                _ => unreachable!(),
            }
            if let Some(v) = eval(&u) {
                best = best.max(v);
            }
        }
    }
    best
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let n = rng.random_range(2..=max_n);
    let uniform = rng.random_bool(0.3);
    let q: Vec<f64> = if uniform {
        vec![1.0 / n as f64; n]
    } else {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    };
    let pt: Vec<f64> = if uniform { q.clone() } else { q.iter().map(|x| x * rng.random_range(0.1..1.0)).collect() };
    let gamma = rng.random_range(0.0..(n as f64 + 0.5));
    let losses: Vec<f64> = if rng.random_bool(0.3) {
        (0..n).map(|_| rng.random_range(0..3) as f64).collect()
    } else {
        (0..n).map(|_| rng.random_range(0.0..3.0)).collect()
    };
    (losses, q, pt, gamma)
}


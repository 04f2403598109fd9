use aspire_core::lagrangian::{
    block_gradient, central_gradient, central_value, regularized_value, Block, BlockInputs, CentralState, Regularization,
    SystemState,
};
use aspire_core::models::{local_loss, local_loss_and_grad, LabeledDataset, ModelSpec};
use aspire_core::uncertainty::{make_plane, solve_cutting_plane_lp, CdNormSet, CuttingPlaneSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Random problem: datasets, model, a plane set with random duals and a
/// state with every block away from zero.
pub struct Problem {
    pub spec: ModelSpec,
    pub data: Vec<LabeledDataset>,
    pub state: SystemState,
    pub p_bar: f64,
    pub kappa1: f64,
    pub reg: Regularization,
}

fn random_dataset(rng: &mut ChaCha8Rng, dim: usize, classes: usize, n: usize) -> LabeledDataset {
    let features = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::new(features, labels, dim, classes, 0).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> Problem {
    let n = rng.random_range(2..=5);
    let (dim, classes) = (3, rng.random_range(2..=4));
    let spec = if rng.random_bool(0.5) {
        ModelSpec::logistic(dim, classes).unwrap()
    } else {
        ModelSpec::mlp(dim, &[4], classes).unwrap()
    };
    let data: Vec<_> = (0..n).map(|_| random_dataset(rng, dim, classes, 12)).collect();
    let set = CdNormSet::uniform(n, rng.random_range(0.2..2.0)).unwrap();
    let mut planes = CuttingPlaneSet::new(5);
    for t in 0..rng.random_range(1..=3) {
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let p = solve_cutting_plane_lp(&f, &set).unwrap();
        planes.add_plane(make_plane(&p, &set, t).unwrap()).unwrap();
    }
    for plane in planes.planes_mut() {
        plane.dual = rng.random_range(0.1..2.0);
    }
    let p = spec.num_params();
    let mut state = SystemState::new(random_vec(rng, p, 1.0), n, rng.random_range(0.1..3.0), planes);
    for j in 0..n {
        state.w[j] = random_vec(rng, p, 1.0);
        state.phi[j] = random_vec(rng, p, 1.0);
    }
    let reg = Regularization { c1: rng.random_range(0.0..1.0), c2: rng.random_range(0.0..1.0) };
    Problem { spec, data, state, p_bar: set.p_bar(), kappa1: rng.random_range(0.1..2.0), reg }
}

impl Problem {
    fn losses(&self, state: &SystemState) -> Vec<f64> {
        state.w.iter().zip(&self.data).map(|(w, d)| local_loss(w, &self.spec, d).unwrap()).collect()
    }

    fn value(&self, state: &SystemState) -> f64 {
        regularized_value(state, &self.losses(state), self.p_bar, self.kappa1, self.reg).unwrap()
    }

    /// Central-difference gradient with respect to one block.
    fn numeric(&self, block: Block) -> Vec<f64> {
        let len = match block {
            Block::W(_) | Block::Z | Block::Phi(_) => self.state.z.len(),
            Block::H | Block::Lambda(_) => 1,
        };
        (0..len)
            .map(|k| {
                let mut up = self.state.clone();
                let mut down = self.state.clone();
                for (s, delta) in [(&mut up, STEP), (&mut down, -STEP)] {
                    match block {
                        Block::W(j) => s.w[j][k] += delta,
                        Block::Z => s.z[k] += delta,
                        Block::H => s.h += delta,
                        Block::Lambda(l) => s.planes.planes_mut()[l].dual += delta,
                        Block::Phi(j) => s.phi[j][k] += delta,
                    }
                }
                (self.value(&up) - self.value(&down)) / (2.0 * STEP)
            })
            .collect()
    }

    /// Largest relative error over every block of the regularized Lagrangian.
    pub fn max_block_error(&self) -> f64 {
        let losses = self.losses(&self.state);
        let grads: Vec<Vec<f64>> = self
            .state
            .w
            .iter()
            .zip(&self.data)
            .map(|(w, d)| local_loss_and_grad(w, &self.spec, d, None).unwrap().1)
            .collect();
        let inputs = BlockInputs { losses: &losses, grads: &grads };
        let n = self.state.w.len();
        let mut blocks = vec![Block::Z, Block::H];
        blocks.extend((0..n).map(Block::W));
        blocks.extend((0..n).map(Block::Phi));
        blocks.extend((0..self.state.planes.len()).map(Block::Lambda));
        blocks
            .into_iter()
            .map(|b| {
                let analytic = block_gradient(b, &self.state, inputs, self.p_bar, self.kappa1, Some(self.reg)).unwrap();
                relative_error(&analytic, &self.numeric(b))
            })
            .fold(0.0, f64::max)
    }

    /// Same check for the single-model Lagrangian at `z`.
    pub fn max_central_error(&self) -> f64 {
        let c1 = self.reg.c1;
        let central = CentralState { w: self.state.z.clone(), h: self.state.h, planes: self.state.planes.clone() };
        let eval = |s: &CentralState| {
            let losses: Vec<f64> = self.data.iter().map(|d| local_loss(&s.w, &self.spec, d).unwrap()).collect();
            central_value(s, &losses, self.p_bar, c1)
        };
        let losses: Vec<f64> = self.data.iter().map(|d| local_loss(&central.w, &self.spec, d).unwrap()).collect();
        let grads: Vec<Vec<f64>> =
            self.data.iter().map(|d| local_loss_and_grad(&central.w, &self.spec, d, None).unwrap().1).collect();
        let (gw, gh, gl) = central_gradient(&central, &losses, &grads, self.p_bar, c1);
        let diff = |edit: &dyn Fn(&mut CentralState, f64)| {
            let mut up = central.clone();
            let mut down = central.clone();
            edit(&mut up, STEP);
            edit(&mut down, -STEP);
            (eval(&up) - eval(&down)) / (2.0 * STEP)
        };
        let nw: Vec<f64> = (0..gw.len()).map(|k| diff(&|s, d| s.w[k] += d)).collect();
        let nh = diff(&|s, d| s.h += d);
        let nl: Vec<f64> = (0..gl.len()).map(|l| diff(&|s, d| s.planes.planes_mut()[l].dual += d)).collect();
        relative_error(&gw, &nw).max(relative_error(&[gh], &[nh])).max(relative_error(&gl, &nl))
    }
}

/// `|a - b| / max(|a|, |b|, 1)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1.0)
}

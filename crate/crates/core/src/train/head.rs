//! Trainable linear decoder from front-end output to clean stacked features,
//! and the reconstruction loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::frontend::{Frontend, Init, ParamSpec};
use crate::tensor::Tensor;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Seed offset so the head draws differ from the front-end's.
const HEAD_SEED_SALT: u64 = 0x4845_4144;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateHead {
    /// `[S, D] -> [S, F*B*2]`.
    Dense { input: usize, output: usize },
    /// One `[W, W]` map shared by the `frames` blocks of each row; used when
    /// the front-end already emits spectra.
    PerFrame { frames: usize, width: usize },
}

impl SurrogateHead {
    pub fn for_frontend(frontend: &Frontend) -> Self {
        let width = 2 * frontend.bins();
        if frontend.spec.beamformer {
            SurrogateHead::PerFrame {
                frames: frontend.frames_per_stack,
                width,
            }
        } else {
            SurrogateHead::Dense {
                input: frontend.output_width(),
                output: frontend.frames_per_stack * width,
            }
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (i, o) = match *self {
            SurrogateHead::Dense { input, output } => (input, output),
            SurrogateHead::PerFrame { width, .. } => (width, width),
        };
        vec![
            ParamSpec {
                name: HEAD_WEIGHT.into(),
                shape: vec![i, o],
                init: Init::GlorotUniform { fan_in: i, fan_out: o },
            },
            ParamSpec {
                name: HEAD_BIAS.into(),
                shape: vec![o],
                init: Init::Zeros,
            },
        ]
    }

    /// Adds Glorot-uniform head weights to `store`.
    pub fn init_into(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SEED_SALT);
        for p in self.param_specs() {
            let t = p.init.sample(&p.shape, &mut rng);
            store.insert(p.name, t);
        }
    }

    /// Decoded features `[S, target width]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param_from(params, HEAD_WEIGHT)?;
        let b = g.param_from(params, HEAD_BIAS)?;
        match *self {
            SurrogateHead::Dense { .. } => g.linear(x, w, Some(b)),
            SurrogateHead::PerFrame { frames, width } => {
                let s = g.shape(x)[0];
                let r = g.reshape(x, &[s * frames, width])?;
                let y = g.linear(r, w, Some(b))?;
                g.reshape(y, &[s, frames * width])
            }
        }
    }
}

/// Mean squared error between `decoded` `[S, W]` and `target` `[S', W]`,
/// both trimmed to `min(S, S')` rows.
pub fn surrogate_loss(g: &mut Graph, decoded: Var, target: &Tensor) -> Result<Var> {
    let (sd, st) = (g.shape(decoded).to_vec(), target.shape().to_vec());
    if sd.len() != 2 || st.len() != 2 || sd[1] != st[1] {
        return Err(Error::ShapeMismatch {
            op: "surrogate_loss",
            left: sd,
            right: st,
        });
    }
    let rows = sd[0].min(st[0]);
    let decoded = if rows < sd[0] { g.slice(decoded, 0, 0, rows)? } else { decoded };
    let target = if rows < st[0] {
        Tensor::new(&[rows, st[1]], target.data()[..rows * st[1]].to_vec())?
    } else {
        target.clone()
    };
    let t = g.input(target)?;
    g.mse(decoded, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn equal_output_gives_zero_loss() {
        let mut g = Graph::new(Precision::F64);
        let t = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.3);
        let x = g.input(t.clone()).unwrap();
        let l = surrogate_loss(&mut g, x, &t).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
    }

    #[test]
    fn doubling_error_doubles_root_loss() {
        let t = Tensor::from_fn(&[2, 3], |i| (i as f64).cos());
        let root = |k: f64| {
            let mut g = Graph::new(Precision::F64);
            let x = g.input(t.map(|v| v + k * 0.25)).unwrap();
            let l = surrogate_loss(&mut g, x, &t).unwrap();
            g.value(l).item().unwrap().sqrt()
        };
        assert!((root(2.0) - 2.0 * root(1.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_oracle_with_trim() {
        let a = Tensor::from_fn(&[4, 3], |i| (i as f64 * 1.7).sin());
        let b = Tensor::from_fn(&[3, 3], |i| (i as f64 * 0.4).cos());
        let mut g = Graph::new(Precision::F64);
        let x = g.input(a.clone()).unwrap();
        let l = surrogate_loss(&mut g, x, &b).unwrap();
        let mut acc = 0.0;
        for i in 0..9 {
            acc += (a.data()[i] - b.data()[i]).powi(2);
        }
        assert!((g.value(l).item().unwrap() - acc / 9.0).abs() < 1e-14);
    }

    #[test]
    fn per_frame_head_is_shared() {
        let head = SurrogateHead::PerFrame { frames: 2, width: 2 };
        let mut p = ParamStore::new();
        p.insert(HEAD_WEIGHT, Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        p.insert(HEAD_BIAS, Tensor::zeros(&[2]));
        let mut g = Graph::new(Precision::F64);
        let x = g.input(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = head.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 1.0, 4.0, 3.0]);
    }
}

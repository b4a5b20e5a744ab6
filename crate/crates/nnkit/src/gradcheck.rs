//! Central finite-difference gradient checking in 64-bit arithmetic.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamSet;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// At most this many elements are probed per parameter block.
    pub max_per_block: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-6,
            max_per_block: 24,
            floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Probes whose ± perturbation changed a relu mask or other branch.
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.checked() > 0 && self.max_rel_err() < tol
    }
}

fn eval<F>(f: &F, ps: &ParamSet<f64>) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::with_branch_tracking();
    let out = f(&mut g, ps)?;
    Ok((g.value(out).item(), g.branch_signature()))
}

/// Compares analytic parameter gradients of the scalar built by `f` against
/// central differences. Gradients already stored in `ps` are cleared.
pub fn gradcheck<F>(ps: &mut ParamSet<f64>, opts: &GradcheckOptions, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    ps.zero_grads();
    let base_sig = {
        let mut g = Graph::with_branch_tracking();
        let out = f(&mut g, ps)?;
        g.backward(out, ps)?;
        g.branch_signature()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let n = ps.value(id).len();
        let picks: Vec<usize> = if n <= opts.max_per_block {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_per_block).into_vec()
        };
        let mut block = BlockReport {
            name: ps.get(id).name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        for i in picks {
            let orig = ps.value(id).data()[i];
            ps.value_mut(id).data_mut()[i] = orig + opts.step;
            let (fp, sp) = eval(&f, ps)?;
            ps.value_mut(id).data_mut()[i] = orig - opts.step;
            let (fm, sm) = eval(&f, ps)?;
            ps.value_mut(id).data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                block.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = ps.grad(id).data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            block.checked += 1;
            block.max_rel_err = block.max_rel_err.max(rel);
        }
        report.blocks.push(block);
    }
    Ok(report)
}

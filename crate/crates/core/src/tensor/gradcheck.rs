use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, ParamStore, Var};
use crate::error::{Error, Result};

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// At most this many coordinates are probed per tensor.
    pub max_coords: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-4, max_coords: 200, seed: 0, mode: Mode::Train }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences and returns the largest relative error
/// `|g_an − g_fd| / max(1e-8, |g_an| + |g_fd|)`.
pub fn grad_check<F>(params: &ParamStore, cfg: GradCheck, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(cfg.eps > 0.0) {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let mut g = Graph::new(cfg.mode);
    let loss = f(&mut g, params)?;
    if !g.value(loss).is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let analytic = g.backward(loss)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad(cfg.mode);
        let loss = f(&mut g, store)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric("perturbed loss is not finite".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect();
    for name in names {
        let n = params.get(&name)?.value.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = params.get(&name)?.value.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + cfg.eps;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - cfg.eps;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * cfg.eps);
            let an = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-8);
            if rel > worst {
                log::debug!("grad_check {name}[{i}]: analytic {an:e}, numeric {fd:e}");
            }
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert_linear("l1", 4, 5, &mut rng);
        s.insert_linear("l2", 5, 3, &mut rng);
        s.insert_batch_norm("bn", 5);
        s.insert("alpha", Tensor::scalar(0.3), true);
        for (_, p) in s.iter_mut() {
            if p.trainable {
                p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i as f64).sin());
            }
        }
        s
    }

    fn input() -> Tensor {
        Tensor::new(vec![6, 4], (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_is_exact() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![3, 1], vec![0.4, -1.3, 2.2]).unwrap(), true);
        let a = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 3.0, 1.0], vec![0.0, 1.0, 4.0]]).unwrap();
        let err = grad_check(&s, GradCheck::default(), |g, p| {
            let w = g.param(p, "w")?;
            let a = g.constant(a.clone());
            let wt = g.transpose(w)?;
            let aw = g.matmul(a, w)?;
            g.matmul(wt, aw)
        })
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn every_op_passes() {
        let s = random_store(1);
        let x = input();
        let err = grad_check(&s, GradCheck::default(), |g, p| {
            let x = g.constant(x.clone());
            let w1 = g.param(p, "l1.weight")?;
            let b1 = g.param(p, "l1.bias")?;
            let h = g.linear(x, w1, b1)?;
            let h = g.leaky_relu(h, 0.2);
            let h = g.batch_norm(p, h, "bn")?;
            let w2 = g.param(p, "l2.weight")?;
            let b2 = g.param(p, "l2.bias")?;
            let y = g.linear(h, w2, b2)?;
            let sm = g.softmax(y, 1)?;
            let sm0 = g.softmax(y, 0)?;
            let lse = g.logsumexp(y, 0)?;
            let gathered = g.gather(y, &[0, 2, 2, 5, 1, 3])?;
            let r = g.reshape(gathered, &[3, 2, 3])?;
            let pooled = g.max_pool(r, 1)?;
            let yt = g.transpose(y)?;
            let att = g.attention(y, y, y, 0.7)?;
            let sl = g.slice(att, 1, 1, 2)?;
            let cat = g.concat(&[sl, sm], 1)?;
            let alpha = g.param(p, "alpha")?;
            let padded = g.pad_slack(yt, alpha)?;
            let mu = vec![0.0; 4];
            let nu = vec![0.0; 7];
            let sk = g.sinkhorn(padded, &mu, &nu, 3)?;
            let e = g.exp(sk);
            let c = g.clamp(e, 1e-7, 1.0 - 1e-7);
            let l = g.log(c)?;
            let t1 = g.sum(l);
            let sq = g.mul(cat, cat)?;
            let t2 = g.sum(sq);
            let t3 = g.sum(pooled);
            let t4 = g.sum(lse);
            let m0 = g.mul(sm0, y)?;
            let t5 = g.mean(m0);
            let sc = g.scale(t2, 0.5);
            let a = g.add(t1, sc)?;
            let b = g.sub(a, t3)?;
            let c2 = g.add(b, t4)?;
            let c3 = g.add(c2, t5)?;
            Ok(g.add_scalar(c3, 1.0))
        })
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn eval_mode_batch_norm_passes() {
        let s = random_store(2);
        let x = input();
        let cfg = GradCheck { mode: Mode::Eval, ..GradCheck::default() };
        let err = grad_check(&s, cfg, |g, p| {
            let x = g.constant(x.clone());
            let w1 = g.param(p, "l1.weight")?;
            let b1 = g.param(p, "l1.bias")?;
            let h = g.linear(x, w1, b1)?;
            let h = g.batch_norm(p, h, "bn")?;
            let sq = g.mul(h, h)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let s = random_store(3);
        let cfg = GradCheck { eps: 0.0, ..GradCheck::default() };
        assert!(grad_check(&s, cfg, |g, p| g.param(p, "alpha")).is_err());
    }
}

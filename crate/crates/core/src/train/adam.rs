use crate::nets::ParamSet;
use ndarray::ArrayD;

/// Adam optimizer state for one parameter set. Parameters that received no
/// gradient in a step are left untouched (their moments do not decay).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = (0..params.len())
            .map(|i| ArrayD::zeros(params.value(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| ArrayD::zeros(params.value(i).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// One update over the whole parameter set.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Option<ArrayD<f32>>]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let corr1 = 1.0 - (self.beta1).powi(self.t as i32);
        let corr2 = 1.0 - (self.beta2).powi(self.t as i32);
        let lr_t = (self.lr * corr2.sqrt() / corr1) as f32;
        let eps = self.eps as f32;
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |mv, &gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            let p = params.value_mut(i);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| *pv -= lr_t * mv / (vv.sqrt() + eps));
        }
    }

    /// Flat export of the moment arrays for checkpointing.
    pub fn moments(&self) -> (&[ArrayD<f32>], &[ArrayD<f32>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(
        &mut self,
        m: Vec<ArrayD<f32>>,
        v: Vec<ArrayD<f32>>,
        t: u64,
    ) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_params() -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        use rand::Rng;
        for i in 0..3 {
            let arr = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |_| {
                rng.random_range(-1.0f32..1.0)
            });
            ps.add(format!("p{i}"), arr);
        }
        ps
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Minimize (p - 3)^2 elementwise on every array.
        let mut ps = toy_params();
        let mut adam = Adam::new(&ps, 0.05, 0.5, 0.999);
        for _ in 0..600 {
            let grads: Vec<Option<ArrayD<f32>>> = (0..ps.len())
                .map(|i| Some(ps.value(i).mapv(|p| 2.0 * (p - 3.0))))
                .collect();
            adam.step(&mut ps, &grads);
        }
        for i in 0..ps.len() {
            for &v in ps.value(i).iter() {
                assert!((v - 3.0).abs() < 0.05, "got {v}");
            }
        }
    }

    #[test]
    fn skipped_grads_leave_params_unchanged() {
        let mut ps = toy_params();
        let before1 = ps.value(1).clone();
        let before0 = ps.value(0).clone();
        let mut adam = Adam::new(&ps, 0.1, 0.5, 0.999);
        let grads: Vec<Option<ArrayD<f32>>> = (0..ps.len())
            .map(|i| {
                (i == 0).then(|| ArrayD::from_elem(IxDyn(ps.value(0).shape()), 1.0f32))
            })
            .collect();
        adam.step(&mut ps, &grads);
        assert_eq!(ps.value(1), &before1);
        assert_ne!(ps.value(0), &before0);
    }
}

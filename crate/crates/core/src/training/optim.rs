use crate::model::{Gradients, ParamGroup, ProtoConceptsNet};

/// Adam hyperparameters shared by every group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay applied to backbone and add-on weights only.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    group: ParamGroup,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with one moment buffer per trained group. Fresh state per stage.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    t: i32,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(net: &ProtoConceptsNet, groups: &[ParamGroup], cfg: OptimizerConfig) -> Self {
        let zeros = Gradients::zeros_for(net);
        Adam {
            cfg,
            t: 0,
            state: groups
                .iter()
                .map(|&g| Moments {
                    group: g,
                    m: vec![0.0; zeros.group(g).len()],
                    v: vec![0.0; zeros.group(g).len()],
                })
                .collect(),
        }
    }

    /// One update of every trained group; `lr(g)` gives the rate in effect.
    pub fn step(
        &mut self,
        net: &mut ProtoConceptsNet,
        grads: &Gradients,
        lr: impl Fn(ParamGroup) -> f64,
    ) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for st in &mut self.state {
            let rate = lr(st.group);
            let decay = match st.group {
                ParamGroup::Backbone | ParamGroup::AddOn => self.cfg.weight_decay,
                _ => 0.0,
            };
            let mut params = net.group_values(st.group);
            let g = grads.group(st.group);
            for i in 0..params.len() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.cfg.epsilon);
                params[i] -= rate * (update + decay * params[i]);
            }
            net.set_group_values(st.group, &params);
        }
    }
}

use crate::losses::ClassAssignment;

/// Prototype-to-class weights with a 0/1 prune mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceLayer {
    num_prototypes: usize,
    num_classes: usize,
    /// m×C, row-major (one row per prototype).
    pub weights: Vec<f64>,
    pub mask: Vec<bool>,
    pub assignment: ClassAssignment,
}

/// One prototype's share of a class logit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub prototype: usize,
    pub similarity: f64,
    pub weight: f64,
    pub contribution: f64,
}

/// Sums in an order that does not depend on prototype indexing, so permuting
/// prototypes leaves logits bit-identical.
fn order_free_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    terms.into_iter().sum()
}

impl EvidenceLayer {
    /// Weight 1 on assigned connections, −0.5 elsewhere, nothing masked.
    pub fn from_assignment(assignment: ClassAssignment) -> Self {
        let m = assignment.num_prototypes();
        let c = assignment.num_classes();
        let mut weights = vec![-0.5; m * c];
        for j in 0..m {
            for k in 0..c {
                if assignment.is_assigned(j, k) {
                    weights[j * c + k] = 1.0;
                }
            }
        }
        EvidenceLayer {
            num_prototypes: m,
            num_classes: c,
            weights,
            mask: vec![true; m],
            assignment,
        }
    }

    pub fn num_prototypes(&self) -> usize {
        self.num_prototypes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weight(&self, prototype: usize, class: usize) -> f64 {
        self.weights[prototype * self.num_classes + class]
    }

    pub fn row(&self, prototype: usize) -> &[f64] {
        let c = self.num_classes;
        &self.weights[prototype * c..(prototype + 1) * c]
    }

    pub fn surviving(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Class logits `Σ_j mask_j · sim_j · w[j][c]`.
    pub fn logits(&self, similarities: &[f64]) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                order_free_sum(
                    (0..self.num_prototypes)
                        .filter(|&j| self.mask[j])
                        .map(|j| similarities[j] * self.weight(j, c))
                        .collect(),
                )
            })
            .collect()
    }

    /// Contributions of unmasked prototypes to `class`, in prototype order.
    pub fn contributions(&self, similarities: &[f64], class: usize) -> Vec<Contribution> {
        (0..self.num_prototypes)
            .filter(|&j| self.mask[j])
            .map(|j| {
                let w = self.weight(j, class);
                Contribution {
                    prototype: j,
                    similarity: similarities[j],
                    weight: w,
                    contribution: similarities[j] * w,
                }
            })
            .collect()
    }

    /// Zeroes the weight rows of masked prototypes.
    pub fn zero_masked_rows(&mut self) {
        let c = self.num_classes;
        for j in 0..self.num_prototypes {
            if !self.mask[j] {
                self.weights[j * c..(j + 1) * c].fill(0.0);
            }
        }
    }

    /// Reorders prototypes: new row `i` is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let c = self.num_classes;
        let mut weights = Vec::with_capacity(self.weights.len());
        for &j in order {
            weights.extend_from_slice(&self.weights[j * c..(j + 1) * c]);
        }
        EvidenceLayer {
            num_prototypes: self.num_prototypes,
            num_classes: c,
            weights,
            mask: order.iter().map(|&j| self.mask[j]).collect(),
            assignment: self.assignment.permuted(order),
        }
    }
}

/// Class-specific evidence layer: `m_per_class` prototypes per class.
pub fn init_evidence_class_specific(m_per_class: usize, num_classes: usize) -> EvidenceLayer {
    EvidenceLayer::from_assignment(ClassAssignment::class_specific(m_per_class, num_classes))
}

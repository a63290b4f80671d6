use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{is_member, LatentPatchGrid};
use crate::model::ProtoConceptsNet;
use crate::nn::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub mask: Vec<bool>,
    /// Member patches per ball over the scanned images.
    pub member_counts: Vec<usize>,
    pub pruned: Vec<usize>,
}

impl PruneReport {
    pub fn surviving(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Member patches of every ball in one grid.
pub fn count_members(net: &ProtoConceptsNet, grid: &LatentPatchGrid) -> Result<Vec<usize>> {
    net.balls
        .iter()
        .map(|ball| {
            let mut n = 0;
            for p in grid.patches() {
                n += is_member(p, ball, &net.geometry_config)? as usize;
            }
            Ok(n)
        })
        .collect()
}

/// Member counts over a set of images, one latent grid at a time.
pub fn member_counts(net: &ProtoConceptsNet, images: &[FeatureMap]) -> Result<Vec<usize>> {
    if images.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let per_image: Vec<Vec<usize>> = images
        .par_iter()
        .map(|x| count_members(net, &net.latent(x, "")?))
        .collect::<Result<_>>()?;
    let mut total = vec![0; net.num_prototypes()];
    for counts in per_image {
        for (t, c) in total.iter_mut().zip(counts) {
            *t += c;
        }
    }
    Ok(total)
}

/// Masks every ball whose count is zero. Other mask entries are unchanged.
pub fn prune_with_counts(net: &mut ProtoConceptsNet, counts: &[usize]) -> Result<PruneReport> {
    if counts.len() != net.num_prototypes() {
        return Err(Error::DimensionMismatch {
            expected: net.num_prototypes(),
            got: counts.len(),
        });
    }
    let mut pruned = Vec::new();
    for (j, &c) in counts.iter().enumerate() {
        if c == 0 && net.evidence.mask[j] {
            net.evidence.mask[j] = false;
            pruned.push(j);
        }
    }
    net.evidence.zero_masked_rows();
    net.metadata.pruned = true;
    if net.evidence.surviving() == 0 {
        log::warn!("every prototype ball is empty: the pruned model cannot classify");
    }
    Ok(PruneReport {
        mask: net.evidence.mask.clone(),
        member_counts: counts.to_vec(),
        pruned,
    })
}

/// Removes balls that contain no patch of `grids`.
pub fn prune_empty_balls(
    net: &mut ProtoConceptsNet,
    grids: &[LatentPatchGrid],
) -> Result<PruneReport> {
    if grids.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let mut total = vec![0; net.num_prototypes()];
    for g in grids {
        for (t, c) in total.iter_mut().zip(count_members(net, g)?) {
            *t += c;
        }
    }
    prune_with_counts(net, &total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Geometry, GeometryConfig};
    use crate::losses::ClassAssignment;
    use crate::model::NetSpec;

    fn net() -> ProtoConceptsNet {
        let spec = NetSpec {
            backbone_channels: vec![4],
            input_size: (8, 8),
            prototype_dim: 2,
            geometry: Geometry::Log,
            geometry_config: GeometryConfig::default(),
            radius_init: 0.01,
            assignment: ClassAssignment::class_specific(2, 2),
        };
        let mut n = ProtoConceptsNet::new(&spec, 0).unwrap();
        let centers = [[0.0, 0.0], [1.0, 1.0], [5.0, 5.0], [0.5, 0.5]];
        for (b, c) in n.balls.iter_mut().zip(centers) {
            b.center = c.to_vec();
        }
        n
    }

    #[test]
    fn masks_exactly_the_empty_balls() {
        let mut n = net();
        let grid = LatentPatchGrid::from_patches(
            1,
            3,
            &[vec![1.0, 1.0], vec![0.5, 0.55], vec![1.0, 1.05]],
            "a",
        )
        .unwrap();
        let report = prune_empty_balls(&mut n, &[grid]).unwrap();
        assert_eq!(report.member_counts, vec![0, 2, 0, 1]);
        assert_eq!(report.mask, vec![false, true, false, true]);
        assert_eq!(report.pruned, vec![0, 2]);
        assert!(n.evidence.row(0).iter().all(|&w| w == 0.0));
    }

    #[test]
    fn degenerate_inputs() {
        let mut n = net();
        assert!(matches!(
            prune_empty_balls(&mut n, &[]),
            Err(Error::EmptyTrainingSet)
        ));
        let report = prune_with_counts(&mut n, &[0, 0, 0, 0]).unwrap();
        assert_eq!(report.surviving(), 0);
    }
}

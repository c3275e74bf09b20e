use super::manifest::Label;
use crate::config::AugmentMode;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One slot of an epoch: which record to load and whether to augment it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct EpochEntry {
    pub index: usize,
    pub augment: bool,
}

/// Every record once, then extra Normal draws with replacement until the
/// Normal count equals `target`. Normal entries are marked for augmentation
/// in `NormalOnly` and `Full` modes, Cancer entries only in `Full`.
pub fn balance_normal_oversample(
    labels: &[Label],
    target: usize,
    mode: AugmentMode,
    rng: &mut Rng,
) -> Result<Vec<EpochEntry>> {
    let normals: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Label::Normal)
        .collect();
    if normals.is_empty() {
        return Err(Error::Config(
            "cannot oversample a set with no Normal images".into(),
        ));
    }
    if target < normals.len() {
        return Err(Error::Contract(format!(
            "oversampling target {target} is below the {} Normal images present",
            normals.len()
        )));
    }
    let aug_normal = mode != AugmentMode::None;
    let aug_cancer = mode == AugmentMode::Full;
    let mut out: Vec<EpochEntry> = labels
        .iter()
        .enumerate()
        .map(|(index, l)| EpochEntry {
            index,
            augment: if *l == Label::Normal {
                aug_normal
            } else {
                aug_cancer
            },
        })
        .collect();
    for _ in normals.len()..target {
        out.push(EpochEntry {
            index: normals[rng.below(normals.len())],
            augment: aug_normal,
        });
    }
    Ok(out)
}

/// The shuffled sample list for one training epoch under `mode`.
pub fn epoch_plan(labels: &[Label], mode: AugmentMode, rng: &mut Rng) -> Result<Vec<EpochEntry>> {
    let mut plan = match mode {
        AugmentMode::NormalOnly => {
            let cancer = labels.iter().filter(|&&l| l == Label::Cancer).count();
            let normal = labels.len() - cancer;
            balance_normal_oversample(labels, cancer.max(normal), mode, rng)?
        }
        _ => (0..labels.len())
            .map(|index| EpochEntry {
                index,
                augment: mode == AugmentMode::Full,
            })
            .collect(),
    };
    rng.shuffle(&mut plan);
    Ok(plan)
}

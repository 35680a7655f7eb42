use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub v_ref: usize,
    pub v_rend: usize,
    /// Contiguous stream bins, one reference each (scene mode).
    pub bins: usize,
    /// Render views must lie strictly closer than this to their bin's reference.
    pub interval: usize,
    pub restrict: bool,
}

impl ViewConfig {
    pub fn object() -> Self {
        Self {
            v_ref: 1,
            v_rend: 4,
            bins: 1,
            interval: 5,
            restrict: false,
        }
    }

    pub fn scene() -> Self {
        Self {
            v_ref: 8,
            v_rend: 8,
            bins: 8,
            interval: 5,
            restrict: true,
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.v_ref == 0 || self.v_rend == 0 {
            return Err(Error::Config("v_ref and v_rend must be positive".into()));
        }
        if mode == Mode::Scene && self.bins != self.v_ref {
            return Err(Error::Config(format!(
                "scene mode takes one reference per bin: bins {} != v_ref {}",
                self.bins, self.v_ref
            )));
        }
        if mode == Mode::Scene && self.restrict && self.interval < 2 {
            return Err(Error::Config("interval must be at least 2".into()));
        }
        Ok(())
    }
}

/// Reference and render indices into a camera stream; always disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSplit {
    pub reference: Vec<usize>,
    pub render: Vec<usize>,
}

/// Draws a reference/render split for a stream of `n_views` cameras.
///
/// Object mode picks distinct random views. Scene mode cuts the stream into
/// `bins` contiguous bins with one random reference each; render view `k`
/// belongs to bin `k mod bins` and, when `restrict` is on, lies within
/// `interval − 1` stream steps of that bin's reference.
pub fn select_views(n_views: usize, mode: Mode, cfg: &ViewConfig, rng: &mut impl Rng) -> Result<ViewSplit> {
    cfg.validate(mode)?;
    if n_views < cfg.v_ref + cfg.v_rend {
        return Err(Error::Selection(format!(
            "{n_views} views cannot hold {} reference and {} render views",
            cfg.v_ref, cfg.v_rend
        )));
    }
    match mode {
        Mode::Object => {
            let mut all: Vec<usize> = (0..n_views).collect();
            all.shuffle(rng);
            Ok(ViewSplit {
                reference: all[..cfg.v_ref].to_vec(),
                render: all[cfg.v_ref..cfg.v_ref + cfg.v_rend].to_vec(),
            })
        }
        Mode::Scene => {
            let reference: Vec<usize> = (0..cfg.bins)
                .map(|b| rng.gen_range(b * n_views / cfg.bins..(b + 1) * n_views / cfg.bins))
                .collect();
            let mut render: Vec<usize> = Vec::with_capacity(cfg.v_rend);
            for k in 0..cfg.v_rend {
                let anchor = reference[k % cfg.bins];
                let allowed = |i: &usize| {
                    !reference.contains(i) && !render.contains(i) && (!cfg.restrict || i.abs_diff(anchor) < cfg.interval)
                };
                let candidates: Vec<usize> = (0..n_views).filter(allowed).collect();
                let &pick = candidates.choose(rng).ok_or_else(|| {
                    Error::Selection(format!("no render view available near reference {anchor}"))
                })?;
                render.push(pick);
            }
            Ok(ViewSplit { reference, render })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn object_split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = select_views(36, Mode::Object, &ViewConfig::object(), &mut rng).unwrap();
        assert_eq!((s.reference.len(), s.render.len()), (1, 4));
        assert!(s.render.iter().all(|r| !s.reference.contains(r)));
        assert!(matches!(
            select_views(4, Mode::Object, &ViewConfig::object(), &mut rng),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn scene_split_respects_bins_and_interval() {
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = select_views(64, Mode::Scene, &ViewConfig::scene(), &mut rng).unwrap();
            for (b, &r) in s.reference.iter().enumerate() {
                assert!((b * 8..b * 8 + 8).contains(&r));
            }
            for (k, &r) in s.render.iter().enumerate() {
                assert!(!s.reference.contains(&r));
                assert!(r.abs_diff(s.reference[k % 8]) < 5);
            }
            let mut uniq = s.render.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 8);
        }
    }

    #[test]
    fn unrestricted_scene_split_is_disjoint() {
        let cfg = ViewConfig {
            restrict: false,
            ..ViewConfig::scene()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let far = (0..200)
            .map(|_| select_views(64, Mode::Scene, &cfg, &mut rng).unwrap())
            .filter(|s| s.render.iter().enumerate().any(|(k, r)| r.abs_diff(s.reference[k % 8]) >= 5))
            .count();
        assert!(far > 0);
    }
}

//! Episode generation with a uniform-random exploration policy.

use super::layout::{LayoutMode, LayoutSpec};
use super::sim::{render, reward, step, truth, EnvState, Frame, TruthInstance, EPISODE_CAP, N_ACTIONS};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One rollout of the simulator: `|actions| = |frames| - 1`, truth covers
/// every dynamic instance in every frame.
#[derive(Clone, Debug)]
pub struct Episode {
    pub layout_name: String,
    pub frames: Vec<Frame>,
    pub actions: Vec<usize>,
    pub truth: Vec<Vec<TruthInstance>>,
    pub rewards: Vec<f32>,
}

impl Episode {
    pub fn len_steps(&self) -> usize {
        self.actions.len()
    }
}

/// Roll one episode under uniform-random actions, ending on win/lose or the
/// step cap.
pub fn generate_episode(layout: &LayoutSpec, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = EnvState::init(layout, seed ^ 0x9e37_79b9);
    let mut ep = Episode {
        layout_name: layout.name.clone(),
        frames: vec![render(&state, layout)],
        actions: Vec::new(),
        truth: vec![truth(&state, layout)],
        rewards: Vec::new(),
    };
    for _ in 0..EPISODE_CAP {
        let action = rng.gen_range(0..N_ACTIONS);
        let next = step(&state, layout, action);
        ep.actions.push(action);
        ep.rewards.push(reward(&state, &next));
        ep.frames.push(render(&next, layout));
        ep.truth.push(truth(&next, layout));
        state = next;
        if state.outcome.is_some() {
            break;
        }
    }
    ep
}

/// Disjoint train/test layout sets for the k-to-m generalization split.
pub fn make_layout_split(
    k_train: usize,
    m_test: usize,
    mode: LayoutMode,
    seed: u64,
) -> Result<(Vec<LayoutSpec>, Vec<LayoutSpec>)> {
    if k_train == 0 || m_test == 0 {
        return Err(Error::Config("need at least one train and one test layout".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut grids: Vec<Vec<super::layout::CellKind>> = Vec::new();
    let mut salt = 0u64;
    while train.len() < k_train || test.len() < m_test {
        let (name, which_train) = if train.len() < k_train {
            (format!("train_{:02}", train.len()), true)
        } else {
            (format!("test_{:02}", test.len()), false)
        };
        let l = LayoutSpec::generate(&name, seed.wrapping_add(salt), mode);
        salt += 1;
        // Disjointness: skip any layout whose terrain repeats an earlier one.
        if grids.contains(&l.cells) {
            continue;
        }
        grids.push(l.cells.clone());
        if which_train {
            train.push(l);
        } else {
            test.push(l);
        }
    }
    Ok((train, test))
}

/// Episodes for one layout until at least `frames_wanted` frames exist.
pub fn episodes_for_layout(layout: &LayoutSpec, frames_wanted: usize, seed: u64) -> Vec<Episode> {
    let mut eps = Vec::new();
    let mut total = 0;
    let mut i = 0u64;
    while total < frames_wanted {
        let ep = generate_episode(layout, seed.wrapping_add(i).wrapping_mul(0x100_0193));
        total += ep.frames.len();
        eps.push(ep);
        i += 1;
    }
    eps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episodes_are_reproducible_from_the_seed() {
        let l = LayoutSpec::generate("t", 2, LayoutMode::Full);
        let a = generate_episode(&l, 42);
        let b = generate_episode(&l, 42);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(a.actions.len(), a.frames.len() - 1);
        assert_eq!(a.truth.len(), a.frames.len());
    }

    #[test]
    fn split_layouts_are_disjoint() {
        let (train, test) = make_layout_split(3, 5, LayoutMode::Simple, 9).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 5);
        for tr in &train {
            for te in &test {
                assert_ne!(tr.cells, te.cells);
            }
        }
    }

    #[test]
    fn accumulated_shrink_reward_is_bounded_by_initial_distance() {
        let l = LayoutSpec::generate("t", 4, LayoutMode::Simple);
        let ep = generate_episode(&l, 7);
        let shrink: f32 = ep
            .rewards
            .iter()
            .map(|&r| if r.abs() < 4.9 { r.max(0.0) } else { 0.0 })
            .sum();
        let s0 = EnvState::init(&l, 0);
        assert!(shrink <= s0.best_dist + 1e-4);
    }
}

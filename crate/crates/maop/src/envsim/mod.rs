//! Deterministic desk-scale 2-D platformer: layouts, physics, rendering,
//! rewards and dataset generation.

pub mod dataset;
pub mod layout;
pub mod sim;

pub use dataset::{episodes_for_layout, generate_episode, make_layout_split, Episode};
pub use layout::{CellKind, LayoutMode, LayoutSpec, Palette, CANVAS, CELL_PX, GRID};
pub use sim::{
    render, reward, step, truth, EnvState, Frame, HazardState, Outcome, TruthInstance,
    ACTION_NAMES, ACT_DOWN, ACT_JUMP, ACT_LEFT, ACT_NOOP, ACT_RIGHT, ACT_UP, CLASS_AGENT,
    CLASS_HAZARD, EPISODE_CAP, N_ACTIONS,
};

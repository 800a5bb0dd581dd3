//! Interactive evaluation environment.
//!
//! Serves ground-truth rewards from a [`WorldSpec`], forbids repeated items
//! within an episode, and terminates when the category quit rule fires or
//! the round budget is exhausted. The quit rule reads: the episode ends when
//! the current item's category already occurs more than `tolerance` times
//! among the previous `window_size` recommendations.

use serde::{Deserialize, Serialize};

use crate::data::WorldSpec;
use crate::error::{Error, Result};

/// Category-boredom rule: fire when the current category's count among the
/// last `window_size` recommendations exceeds `tolerance`. `window_size = 0`
/// disables the rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuitRule {
    pub window_size: u32,
    pub tolerance: u32,
}

impl QuitRule {
    pub fn new(window_size: u32, tolerance: u32) -> Self {
        QuitRule {
            window_size,
            tolerance,
        }
    }

    pub fn disabled() -> Self {
        QuitRule {
            window_size: 0,
            tolerance: 0,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.window_size > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    QuitRule,
    MaxRounds,
}

/// One recommendation already served in the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub item_id: usize,
    pub reward: f64,
    pub category_id: u32,
}

/// Episode state for a single user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub user_id: usize,
    pub history: Vec<HistoryStep>,
    pub termination: Option<TerminationReason>,
}

impl EnvState {
    pub fn terminated(&self) -> bool {
        self.termination.is_some()
    }

    pub fn contains_item(&self, item_id: usize) -> bool {
        self.history.iter().any(|h| h.item_id == item_id)
    }

    /// Sum of per-step rewards, the terminal step included.
    pub fn episode_return(&self) -> f64 {
        self.history.iter().map(|h| h.reward).sum()
    }
}

/// Starts a fresh episode for `user_id`.
pub fn reset(world: &WorldSpec, user_id: usize) -> Result<EnvState> {
    if user_id >= world.n_users {
        return Err(Error::Validation(format!(
            "user {user_id} out of range (n_users = {})",
            world.n_users
        )));
    }
    Ok(EnvState {
        user_id,
        history: Vec::new(),
        termination: None,
    })
}

/// True iff `current_category` occurs more than `tolerance` times among the
/// (at most `window_size`) categories in `recent_categories`.
pub fn should_quit(recent_categories: &[u32], current_category: u32, rule: &QuitRule) -> bool {
    if !rule.is_enabled() {
        return false;
    }
    debug_assert!(recent_categories.len() <= rule.window_size as usize);
    let count = recent_categories
        .iter()
        .filter(|&&c| c == current_category)
        .count() as u32;
    count > rule.tolerance
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub reason: Option<TerminationReason>,
}

/// Serves `item_id` to the episode's user. The quit check runs against the
/// previous `min(window_size, len)` categories before the item is appended;
/// the triggering step's reward still counts toward the episode return.
pub fn step(world: &WorldSpec, state: &mut EnvState, item_id: usize) -> Result<StepOutcome> {
    if state.terminated() {
        return Err(Error::Validation("step on a terminated episode".into()));
    }
    if item_id >= world.n_items {
        return Err(Error::Validation(format!(
            "item {item_id} out of range (n_items = {})",
            world.n_items
        )));
    }
    if state.contains_item(item_id) {
        return Err(Error::Validation(format!(
            "item {item_id} was already recommended in this episode"
        )));
    }

    let reward = world.preference[state.user_id][item_id];
    let category = world.item_category[item_id];

    let window = (world.quit_rule.window_size as usize).min(state.history.len());
    let recent: Vec<u32> = state.history[state.history.len() - window..]
        .iter()
        .map(|h| h.category_id)
        .collect();
    let quit = should_quit(&recent, category, &world.quit_rule);

    state.history.push(HistoryStep {
        item_id,
        reward,
        category_id: category,
    });

    let reason = if quit {
        Some(TerminationReason::QuitRule)
    } else if state.history.len() >= world.max_rounds as usize {
        Some(TerminationReason::MaxRounds)
    } else {
        None
    };
    state.termination = reason;

    Ok(StepOutcome {
        reward,
        done: reason.is_some(),
        reason,
    })
}

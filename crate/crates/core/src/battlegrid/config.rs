use super::EnvError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Allies against scripted enemies on a grid.
    Battle,
    /// Agents crossing a one-dimensional lane with hazard cells.
    Corridor,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Battle => "battle",
            Scenario::Corridor => "corridor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "battle" => Some(Scenario::Battle),
            "corridor" => Some(Scenario::Corridor),
            _ => None,
        }
    }
}

/// Environment parameters. Distances are Chebyshev.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub scenario: Scenario,
    pub grid_width: usize,
    pub grid_height: usize,
    pub n_allies: usize,
    pub n_enemies: usize,
    pub ally_hp: u32,
    pub enemy_hp: u32,
    pub attack_damage: u32,
    pub attack_range: usize,
    pub sight_range: usize,
    pub max_steps: usize,
    pub kill_reward: f64,
    pub win_reward: f64,
    pub damage_reward_scale: f64,
    /// Corridor only: number of cells in the lane, goal at the last cell.
    pub lane_length: usize,
    /// Corridor only: hazard cells placed from the seed, never adjacent.
    pub n_hazards: usize,
    pub progress_reward: f64,
    pub goal_bonus: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::battle_3v3()
    }
}

impl EnvConfig {
    /// Three allies against three scripted enemies. The maximum episode
    /// return is 9 (damage) + 3 (kills) + 8 (win) = 20.
    pub fn battle_3v3() -> Self {
        Self {
            scenario: Scenario::Battle,
            grid_width: 8,
            grid_height: 6,
            n_allies: 3,
            n_enemies: 3,
            ally_hp: 4,
            enemy_hp: 3,
            attack_damage: 1,
            attack_range: 2,
            sight_range: 4,
            max_steps: 30,
            kill_reward: 1.0,
            win_reward: 8.0,
            damage_reward_scale: 1.0,
            lane_length: 10,
            n_hazards: 2,
            progress_reward: 0.1,
            goal_bonus: 1.0,
            seed: 0,
        }
    }

    /// Ten agents on a ten-cell lane; maximum return 10 × (0.9 + 1.0) = 19.
    pub fn corridor_10() -> Self {
        Self {
            scenario: Scenario::Corridor,
            grid_width: 10,
            grid_height: 1,
            n_allies: 10,
            n_enemies: 0,
            ally_hp: 1,
            sight_range: 2,
            attack_range: 0,
            max_steps: 20,
            lane_length: 10,
            n_hazards: 2,
            progress_reward: 0.1,
            goal_bonus: 1.0,
            ..Self::battle_3v3()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.n_allies == 0 {
            return bad("n_allies must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.attack_range > self.sight_range {
            return bad("attack_range must not exceed sight_range");
        }
        match self.scenario {
            Scenario::Battle => {
                if self.grid_width == 0 || self.grid_height == 0 {
                    return bad("grid dimensions must be positive");
                }
                if self.n_enemies == 0 {
                    return bad("n_enemies must be positive");
                }
                if self.ally_hp == 0 || self.enemy_hp == 0 || self.attack_damage == 0 {
                    return bad("hit points and attack damage must be positive");
                }
                let band = self.band_cells();
                if self.n_allies > band || self.n_enemies > band {
                    return Err(EnvError::Capacity {
                        units: self.n_allies.max(self.n_enemies),
                        cells: band,
                    });
                }
            }
            Scenario::Corridor => {
                if self.lane_length < 2 {
                    return bad("lane_length must be at least 2");
                }
                // hazards live on interior cells 1..L-1, never adjacent
                let interior = self.lane_length - 2;
                if self.n_hazards > interior.div_ceil(2) {
                    return Err(EnvError::Capacity { units: self.n_hazards, cells: interior.div_ceil(2) });
                }
            }
        }
        Ok(())
    }

    /// Columns reserved for each side's starting band.
    pub(crate) fn band_width(&self) -> usize {
        (self.grid_width / 3).max(1)
    }

    fn band_cells(&self) -> usize {
        self.band_width() * self.grid_height
    }

    pub fn n_agents(&self) -> usize {
        self.n_allies
    }

    pub fn n_actions(&self) -> usize {
        match self.scenario {
            Scenario::Battle => 5 + self.n_enemies,
            Scenario::Corridor => 3,
        }
    }

    /// Length of each agent's observation vector.
    pub fn obs_len(&self) -> usize {
        match self.scenario {
            Scenario::Battle => (self.n_allies - 1 + self.n_enemies) * super::SLOT_FEATURES + 1,
            Scenario::Corridor => (self.n_allies - 1) * super::SLOT_FEATURES + 4,
        }
    }

    /// Length of the global state vector fed to the mixer.
    pub fn state_len(&self) -> usize {
        match self.scenario {
            Scenario::Battle => 3 * (self.n_allies + self.n_enemies) + 1,
            Scenario::Corridor => self.n_allies * self.obs_len(),
        }
    }

    /// Largest achievable episode return.
    pub fn max_return(&self) -> f64 {
        match self.scenario {
            Scenario::Battle => {
                let n = self.n_enemies as f64;
                self.damage_reward_scale * n * self.enemy_hp as f64 + self.kill_reward * n + self.win_reward
            }
            Scenario::Corridor => {
                self.n_allies as f64
                    * (self.progress_reward * (self.lane_length - 1) as f64 + self.goal_bonus)
            }
        }
    }
}

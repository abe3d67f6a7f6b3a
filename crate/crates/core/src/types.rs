use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Initial and boundary temperatures of one heat-equation run, in kelvin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub t_ic: f64,
    pub t_x1: f64,
    pub t_x2: f64,
    pub t_y1: f64,
    pub t_y2: f64,
}

impl SimParams {
    pub fn uniform(t: f64) -> Self {
        SimParams {
            t_ic: t,
            t_x1: t,
            t_x2: t,
            t_y1: t,
            t_y2: t,
        }
    }

    /// Design-row order: (T_IC, T_x1, T_y1, T_x2, T_y2).
    pub fn from_row(row: &[f64]) -> Self {
        assert_eq!(row.len(), 5, "a parameter row has 5 temperatures");
        SimParams {
            t_ic: row[0],
            t_x1: row[1],
            t_y1: row[2],
            t_x2: row[3],
            t_y2: row[4],
        }
    }

    pub fn to_row(&self) -> [f64; 5] {
        [self.t_ic, self.t_x1, self.t_y1, self.t_x2, self.t_y2]
    }

    pub fn min_temp(&self) -> f64 {
        self.to_row().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn max_temp(&self) -> f64 {
        self.to_row().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One solver time step as streamed to the server.
///
/// The field is shared so that repeated draws from a buffer do not copy it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub params: SimParams,
    pub t: u32,
    pub field: Arc<[f32]>,
    pub client_id: u32,
    pub sim_index: u32,
}

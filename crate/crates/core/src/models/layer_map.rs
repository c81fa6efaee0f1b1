use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Rounding applied to `i · L_T / L_S` when the depths do not divide.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapRule {
    #[default]
    Ceil,
    Floor,
}

/// Student layer `i` (1-based) is matched with teacher layer `teacher(i)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    teacher_layers: Vec<usize>,
    teacher_depth: usize,
}

impl LayerMap {
    /// Checks that the map is strictly increasing, in range and ends at the
    /// teacher's last layer.
    pub fn new(teacher_layers: Vec<usize>, teacher_depth: usize) -> Result<Self> {
        let increasing = teacher_layers.windows(2).all(|w| w[0] < w[1]);
        let in_range = teacher_layers
            .iter()
            .all(|&t| (1..=teacher_depth).contains(&t));
        if teacher_layers.is_empty()
            || !increasing
            || !in_range
            || teacher_layers.last() != Some(&teacher_depth)
        {
            return Err(ModelError::Config(format!(
                "layer map {teacher_layers:?} must be strictly increasing within 1..={teacher_depth} and end at {teacher_depth}"
            )));
        }
        Ok(LayerMap {
            teacher_layers,
            teacher_depth,
        })
    }

    pub fn student_depth(&self) -> usize {
        self.teacher_layers.len()
    }

    pub fn teacher_depth(&self) -> usize {
        self.teacher_depth
    }

    /// Teacher layer for student layer `i`, both 1-based.
    pub fn teacher(&self, i: usize) -> usize {
        self.teacher_layers[i - 1]
    }

    /// `(student, teacher)` pairs, 1-based.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.teacher_layers
            .iter()
            .enumerate()
            .map(|(i, &t)| (i + 1, t))
    }
}

/// Skip mapping: student layer `i` reads teacher layer `i · L_T / L_S`,
/// rounded per `rule` when the depths do not divide.
pub fn skip_layer_map(student: usize, teacher: usize, rule: MapRule) -> Result<LayerMap> {
    if student == 0 || student > teacher {
        return Err(ModelError::Config(format!(
            "cannot map {student} student layers onto {teacher} teacher layers"
        )));
    }
    let map = (1..=student)
        .map(|i| {
            let num = i * teacher;
            match rule {
                MapRule::Ceil => num.div_ceil(student),
                MapRule::Floor => num / student,
            }
        })
        .collect();
    LayerMap::new(map, teacher)
}

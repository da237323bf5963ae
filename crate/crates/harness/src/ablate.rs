use std::fmt;
use std::str::FromStr;

use ddt_core::backbone::FeatureExtractionConfig;
use ddt_core::self_training::{Role, SelfTrainingConfig, TeacherMode};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::pipeline::{Experiment, TrainMode};
use crate::run::{write_atomic, write_json};

pub const LAMBDA_GRID: [f64; 5] = [0.33, 0.5, 1.0, 2.0, 3.0];
pub const SIGMA_GRID: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParam {
    Lambda,
    Sigma,
    /// Feature extraction `time_steps:save_steps`.
    Steps,
    /// Which halves see the strong view: `none`, `sup`, `unsup` or `both`.
    Augmentation,
    Teacher,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Lambda => "lambda",
            AblationParam::Sigma => "sigma",
            AblationParam::Steps => "steps",
            AblationParam::Augmentation => "augmentation",
            AblationParam::Teacher => "teacher",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let f = |g: [f64; 5]| g.iter().map(|v| v.to_string()).collect();
        match self {
            AblationParam::Lambda => f(LAMBDA_GRID),
            AblationParam::Sigma => f(SIGMA_GRID),
            AblationParam::Steps => ["1:1", "5:1", "5:5", "10:5"].map(String::from).to_vec(),
            AblationParam::Augmentation => ["none", "sup", "unsup", "both"].map(String::from).to_vec(),
            AblationParam::Teacher => TeacherMode::ALL.iter().map(|m| m.name().to_string()).collect(),
        }
    }
}

impl fmt::Display for AblationParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(AblationParam::Lambda),
            "sigma" => Ok(AblationParam::Sigma),
            "steps" => Ok(AblationParam::Steps),
            "augmentation" => Ok(AblationParam::Augmentation),
            "teacher" => Ok(AblationParam::Teacher),
            _ => Err(HarnessError::Config(format!(
                "unknown ablation parameter {s:?}; expected lambda, sigma, steps, augmentation or teacher"
            ))),
        }
    }
}

/// Settings of one sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub mode: TeacherMode,
    pub self_training: SelfTrainingConfig,
    pub features: FeatureExtractionConfig,
}

pub fn variant(base: &Experiment, param: AblationParam, value: &str) -> Result<Variant> {
    let mut v = Variant {
        mode: TeacherMode::Ddt,
        self_training: base.config.self_training.clone(),
        features: base.config.features.clone(),
    };
    let bad = || HarnessError::Config(format!("invalid {param} value {value:?}"));
    match param {
        AblationParam::Lambda => v.self_training.lambda = value.parse().map_err(|_| bad())?,
        AblationParam::Sigma => v.self_training.sigma = value.parse().map_err(|_| bad())?,
        AblationParam::Steps => {
            let (t, s) = value.split_once(':').ok_or_else(bad)?;
            v.features.time_steps = t.parse().map_err(|_| bad())?;
            v.features.save_steps = s.parse().map_err(|_| bad())?;
        }
        AblationParam::Augmentation => {
            let (sup, unsup) = match value {
                "none" => (false, false),
                "sup" => (true, false),
                "unsup" => (false, true),
                "both" => (true, true),
                _ => return Err(bad()),
            };
            v.self_training.strong_on_sup = sup;
            v.self_training.strong_on_unsup = unsup;
        }
        AblationParam::Teacher => v.mode = value.parse().map_err(|_| bad())?,
    }
    v.self_training.teacher_mode = v.mode;
    v.self_training.validate()?;
    v.features.validate(base.config.diffusion.pretrain.arch.t_max)?;
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub param: AblationParam,
    pub value: String,
    pub mode: TeacherMode,
    pub final_role: Role,
    pub target_map: f64,
    pub student_target_map: Option<f64>,
    pub mean_teacher_target_map: Option<f64>,
    pub diffusion_teacher_target_map: Option<f64>,
    pub source_map: Option<f64>,
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut s = String::from(
        "param,value,mode,final_role,target_map,student_target_map,mean_teacher_target_map,diffusion_teacher_target_map,source_map\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{},{},{},{}\n",
            r.param,
            r.value,
            r.mode,
            r.final_role.name(),
            r.target_map,
            opt(r.student_target_map),
            opt(r.mean_teacher_target_map),
            opt(r.diffusion_teacher_target_map),
            opt(r.source_map)
        ));
    }
    s
}

/// Runs one self-training run per value under `ablate/<param>=<value>` and
/// writes `ablate/<param>.csv` and `ablate/<param>.json`.
pub fn ablate(exp: &Experiment, param: AblationParam, values: &[String]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one value".into()));
    }
    let variants = values.iter().map(|v| variant(exp, param, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, v) in values.iter().zip(variants) {
        let run = format!("ablate/{param}={value}");
        let s = exp.train_with(TrainMode::SelfTraining(v.mode), &run, &v.self_training, &v.features)?;
        rows.push(AblationRow {
            param,
            value: value.clone(),
            mode: v.mode,
            final_role: s.final_role,
            target_map: s.target_map,
            student_target_map: s.student_target_map,
            mean_teacher_target_map: s.mean_teacher_target_map,
            diffusion_teacher_target_map: s.diffusion_teacher_target_map,
            source_map: s.source_map,
        });
    }
    let dir = exp.dir.subdir("ablate")?;
    write_atomic(&dir.join(format!("{param}.csv")), rows_csv(&rows).as_bytes())?;
    write_json(&dir.join(format!("{param}.json")), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        assert_eq!(AblationParam::Lambda.default_values(), ["0.33", "0.5", "1", "2", "3"]);
        assert_eq!(AblationParam::Sigma.default_values(), ["0.3", "0.4", "0.5", "0.6", "0.7"]);
        assert_eq!(AblationParam::Teacher.default_values().len(), 4);
        for p in ["lambda", "sigma", "steps", "augmentation", "teacher"] {
            assert_eq!(p.parse::<AblationParam>().unwrap().name(), p);
        }
    }

    #[test]
    fn csv_has_one_row_per_value() {
        let row = |v: &str| AblationRow {
            param: AblationParam::Sigma,
            value: v.into(),
            mode: TeacherMode::Ddt,
            final_role: Role::MeanTeacher,
            target_map: 0.5,
            student_target_map: Some(0.4),
            mean_teacher_target_map: Some(0.5),
            diffusion_teacher_target_map: None,
            source_map: None,
        };
        let csv = rows_csv(&[row("0.3"), row("0.4")]);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(1).unwrap(), "sigma,0.3,ddt,mean_teacher,0.500000,0.400000,0.500000,,");
    }
}

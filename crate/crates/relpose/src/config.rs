//! Declarative run configuration.
//!
//! One TOML file drives every command; flags override individual values and
//! the resolved ("effective") configuration is echoed into each output file
//! so results always carry their provenance. Defaults reproduce the stock
//! pipeline: τ = 0.15 m inlier threshold with β = 5/τ, matching temperature
//! 0.1, 100/3 test and 20/5 train hypothesis/minimal-set sizes, 4 refinement
//! rounds, 20 set samplings of 32 correspondences, a null anchor at 30% of
//! the maximum score charging 120 px, a 90 px precision threshold, and a
//! 30%→80% curriculum ramp stepping 10% every 4000 iterations.
//!
//! The seed resolves in precedence order: `--seed` flag, `seed` key in the
//! file, the `RELPOSE_SEED` environment variable, then 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::SamplingMode;
use crate::objective::CurriculumSchedule;
use crate::ransac::{RansacConfig, RansacMode};
use crate::toy::scene::SceneConfig;
use crate::toy::train::{OptimizerConfig, TrainConfig};

/// Name of the environment variable supplying the default seed.
pub const SEED_ENV_VAR: &str = "RELPOSE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Resolved by [`load`]; `None` only in a config that was never loaded.
    pub seed: Option<u64>,
    pub generation: GenerationSection,
    pub solver: SolverSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    pub curriculum: CurriculumSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            generation: GenerationSection::default(),
            solver: SolverSection::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
            curriculum: CurriculumSection::default(),
        }
    }
}

/// Synthetic-scene recipe plus how many scenes a run works on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub scenes: usize,
    pub points: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub grid_factor: f64,
    pub focal: f64,
    pub depth_range: [f64; 2],
    /// Relative rotation magnitude between the views, radians.
    pub rotation_angle_range: [f64; 2],
    pub translation_x: [f64; 2],
    pub translation_y: [f64; 2],
    pub translation_z: [f64; 2],
    /// Std-dev of the depth noise applied when rendering maps, meters.
    pub noise_sigma: f64,
    /// Fraction of points whose rendered geometry is corrupted.
    pub outlier_fraction: f64,
    pub descriptor_dim: usize,
    pub max_point_retries: usize,
    pub max_scene_retries: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let stock = SceneConfig::default();
        GenerationSection {
            scenes: 4,
            points: stock.points,
            grid_width: stock.grid_width,
            grid_height: stock.grid_height,
            grid_factor: stock.grid_factor,
            focal: stock.focal,
            depth_range: [stock.depth_range.0, stock.depth_range.1],
            rotation_angle_range: [stock.rotation_angle_range.0, stock.rotation_angle_range.1],
            translation_x: [stock.translation_ranges[0].0, stock.translation_ranges[0].1],
            translation_y: [stock.translation_ranges[1].0, stock.translation_ranges[1].1],
            translation_z: [stock.translation_ranges[2].0, stock.translation_ranges[2].1],
            noise_sigma: stock.noise_sigma,
            outlier_fraction: stock.outlier_fraction,
            descriptor_dim: stock.descriptor_dim,
            max_point_retries: stock.max_point_retries,
            max_scene_retries: stock.max_scene_retries,
        }
    }
}

impl GenerationSection {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            grid_width: self.grid_width,
            grid_height: self.grid_height,
            grid_factor: self.grid_factor,
            focal: self.focal,
            points: self.points,
            depth_range: (self.depth_range[0], self.depth_range[1]),
            rotation_angle_range: (self.rotation_angle_range[0], self.rotation_angle_range[1]),
            translation_ranges: [
                (self.translation_x[0], self.translation_x[1]),
                (self.translation_y[0], self.translation_y[1]),
                (self.translation_z[0], self.translation_z[1]),
            ],
            noise_sigma: self.noise_sigma,
            outlier_fraction: self.outlier_fraction,
            descriptor_dim: self.descriptor_dim,
            max_point_retries: self.max_point_retries,
            max_scene_retries: self.max_scene_retries,
        }
    }
}

/// Estimation-time parameters shared by solving and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    /// Inlier threshold τ on 3D residuals, meters.
    pub tau: f64,
    /// Sigmoid sharpness for the soft inlier count; `None` means `5 / tau`.
    pub beta: Option<f64>,
    /// Dual-softmax temperature.
    pub theta: f64,
    /// Hypotheses per correspondence set at test time.
    pub hypotheses: usize,
    /// Minimal-set size at test time.
    pub minimal_set_size: usize,
    pub max_refinements: usize,
    /// Correspondence sets drawn per estimation (Q).
    pub samplings: usize,
    /// Correspondences per set (|Y|).
    pub set_size: usize,
    pub with_replacement: bool,
    /// Dustbin logit appended to the similarity matrix, if any.
    pub dustbin: Option<f64>,
    /// Null anchor score as a fraction of the maximum soft inlier count.
    pub null_fraction: f64,
    /// Loss charged to the null hypothesis, pixels.
    pub vcre_max: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let test = RansacConfig::test();
        let train = TrainConfig::default();
        SolverSection {
            tau: test.inlier_threshold,
            beta: None,
            theta: train.temperature,
            hypotheses: test.hypotheses,
            minimal_set_size: test.minimal_set_size,
            max_refinements: test.max_refinements,
            samplings: train.samplings,
            set_size: train.set_size,
            with_replacement: false,
            dustbin: None,
            null_fraction: train.null_fraction,
            vcre_max: train.vcre_max,
        }
    }
}

impl SolverSection {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(5.0 / self.tau)
    }

    pub fn sampling_mode(&self) -> SamplingMode {
        if self.with_replacement {
            SamplingMode::WithReplacement
        } else {
            SamplingMode::WithoutReplacement
        }
    }

    /// Test-time RANSAC configuration.
    pub fn ransac(&self) -> RansacConfig {
        RansacConfig {
            hypotheses: self.hypotheses,
            minimal_set_size: self.minimal_set_size,
            inlier_threshold: self.tau,
            beta: self.beta(),
            max_refinements: self.max_refinements,
            mode: RansacMode::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Hypotheses per correspondence set while training.
    pub hypotheses: usize,
    /// Minimal-set size while training.
    pub minimal_set_size: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let stock = TrainConfig::default();
        TrainingSection {
            iterations: stock.iterations,
            learning_rate: stock.optimizer.learning_rate,
            hypotheses: stock.ransac.hypotheses,
            minimal_set_size: stock.ransac.minimal_set_size,
            checkpoint_every: stock.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Precision threshold on reprojection error, pixels.
    pub threshold: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection { threshold: crate::evaluation::DEFAULT_PRECISION_THRESHOLD }
    }
}

/// Fractional ramp of the per-iteration training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    pub start: f64,
    pub end: f64,
    pub step: f64,
    /// Iterations between successive ramp steps.
    pub every: u64,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        CurriculumSection {
            start: crate::objective::CURRICULUM_START_FRACTION,
            end: crate::objective::CURRICULUM_START_FRACTION
                + crate::objective::CURRICULUM_INCREMENT_FRACTION
                    * (crate::objective::CURRICULUM_WARMUP_END
                        / crate::objective::CURRICULUM_INCREMENT_INTERVAL)
                        as f64,
            step: crate::objective::CURRICULUM_INCREMENT_FRACTION,
            every: crate::objective::CURRICULUM_INCREMENT_INTERVAL,
        }
    }
}

impl CurriculumSection {
    /// Concrete schedule for a batch of `batch_size` scenes.
    pub fn schedule(&self, batch_size: usize) -> CurriculumSchedule {
        let steps = ((self.end - self.start) / self.step).round().max(0.0) as u64;
        CurriculumSchedule {
            b_min: ((self.start * batch_size as f64).floor() as usize).max(1),
            b_max: ((self.end * batch_size as f64).floor() as usize).clamp(1, batch_size),
            start_fraction: self.start,
            increment_fraction: self.step,
            increment_interval: self.every,
            warmup_end: steps * self.every,
        }
    }
}

impl RunConfig {
    /// The resolved seed; 0 for a config built without [`load`].
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Training configuration for `batch_size` scenes.
    pub fn train_config(&self, batch_size: usize) -> TrainConfig {
        TrainConfig {
            iterations: self.training.iterations,
            samplings: self.solver.samplings,
            set_size: self.solver.set_size,
            temperature: self.solver.theta,
            sampling: self.solver.sampling_mode(),
            ransac: RansacConfig {
                hypotheses: self.training.hypotheses,
                minimal_set_size: self.training.minimal_set_size,
                inlier_threshold: self.solver.tau,
                beta: self.solver.beta(),
                max_refinements: self.solver.max_refinements,
                mode: RansacMode::Train,
            },
            optimizer: OptimizerConfig {
                learning_rate: self.training.learning_rate,
                ..OptimizerConfig::default()
            },
            null_fraction: self.solver.null_fraction,
            vcre_max: self.solver.vcre_max,
            curriculum: Some(self.curriculum.schedule(batch_size)),
            start_iteration: 0,
            checkpoint_every: self.training.checkpoint_every,
            seed: self.seed(),
        }
    }

    /// Validate every section against the modules it configures.
    pub fn validate(&self) -> Result<()> {
        as_validation(self.generation.scene_config().validate())?;
        as_validation(self.solver.ransac().validate())?;
        // Training params are checked through the combined config; batch
        // size 1 keeps the curriculum bounds trivially consistent.
        as_validation(self.train_config(1).validate())?;
        let c = &self.curriculum;
        if !(c.start.is_finite() && c.end.is_finite() && c.step.is_finite())
            || !(0.0 < c.start && c.start <= c.end && c.end <= 1.0)
            || c.step <= 0.0
            || c.every == 0
        {
            return Err(Error::Validation(format!(
                "curriculum ramp must satisfy 0 < start <= end <= 1 with positive step and \
                 interval, got start {} end {} step {} every {}",
                c.start, c.end, c.step, c.every
            )));
        }
        let t = self.evaluation.threshold;
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Validation(format!(
                "precision threshold must be positive, got {t}"
            )));
        }
        if let Some(d) = self.solver.dustbin {
            if !d.is_finite() {
                return Err(Error::Validation(format!("dustbin logit must be finite, got {d}")));
            }
        }
        Ok(())
    }

    /// Serialize the effective configuration; [`load`] of the result gives
    /// back an equal config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }
}

fn as_validation<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Validation(_) => e,
        other => Error::Validation(other.to_string()),
    })
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(raw) => raw
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Validation(format!("{SEED_ENV_VAR} must be a u64, got {raw:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Validation(format!("{SEED_ENV_VAR}: {e}"))),
    }
}

/// Parse a config from TOML text (no seed resolution, no validation).
pub fn parse(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
}

/// Load the effective configuration.
///
/// `path = None` starts from defaults. The seed resolves as flag > file >
/// [`SEED_ENV_VAR`] > 0, and the result is fully validated.
pub fn load(path: Option<&Path>, seed_flag: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let seed = match seed_flag.or(cfg.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    cfg.seed = Some(seed);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::NULL_SCORE_FRACTION;

    #[test]
    fn defaults_validate_and_mirror_the_modules() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(0);
        cfg.validate().unwrap();
        assert_eq!(cfg.solver.tau, 0.15);
        assert_eq!(cfg.solver.beta(), 5.0 / 0.15);
        assert_eq!(cfg.solver.theta, 0.1);
        assert_eq!(cfg.solver.hypotheses, 100);
        assert_eq!(cfg.solver.minimal_set_size, 3);
        assert_eq!(cfg.training.hypotheses, 20);
        assert_eq!(cfg.training.minimal_set_size, 5);
        assert_eq!(cfg.solver.samplings, 20);
        assert_eq!(cfg.solver.set_size, 32);
        assert_eq!(cfg.solver.null_fraction, NULL_SCORE_FRACTION);
        assert_eq!(cfg.solver.vcre_max, 120.0);
        assert_eq!(cfg.evaluation.threshold, 90.0);
        assert_eq!(cfg.curriculum.end, 0.8);
        assert_eq!(cfg.training.iterations, 2000);
    }

    #[test]
    fn default_schedule_matches_the_stock_ramp() {
        let cfg = RunConfig::default();
        for batch in [1, 4, 48] {
            assert_eq!(cfg.curriculum.schedule(batch), CurriculumSchedule::for_batch(batch));
        }
    }

    #[test]
    fn default_train_config_matches_the_stock_one() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(0);
        let derived = cfg.train_config(4);
        let stock =
            TrainConfig { curriculum: Some(CurriculumSchedule::for_batch(4)), ..TrainConfig::default() };
        assert_eq!(derived, stock);
        assert_eq!(cfg.generation.scene_config(), SceneConfig::default());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(7);
        cfg.solver.beta = Some(40.0);
        cfg.generation.scenes = 2;
        let parsed = parse(&cfg.echo()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg = parse("seed = 3\n[generation]\nscenes = 2\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.generation.scenes, 2);
        assert_eq!(cfg.generation.points, 40);
        assert_eq!(cfg.solver.set_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse("banana = 1\n"), Err(Error::Validation(_))));
        assert!(matches!(parse("[solver]\ntau = 0.15\ntypo = 2\n"), Err(Error::Validation(_))));
    }

    #[test]
    fn invalid_outlier_fraction_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(0);
        cfg.generation.outlier_fraction = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn solver_domain_errors_surface_as_validation() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(0);
        cfg.solver.tau = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 11\n").unwrap();
        assert_eq!(load(Some(&path), Some(5)).unwrap().seed(), 5);
        assert_eq!(load(Some(&path), None).unwrap().seed(), 11);
        assert_eq!(load(None, None).unwrap().seed(), 0);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(load(Some(Path::new("/nonexistent/run.toml")), None), Err(Error::Io(_))));
    }

    #[test]
    fn with_replacement_flag_switches_the_mode() {
        let cfg = parse("[solver]\nwith_replacement = true\n").unwrap();
        assert_eq!(cfg.solver.sampling_mode(), SamplingMode::WithReplacement);
        assert_eq!(cfg.train_config(2).sampling, SamplingMode::WithReplacement);
    }
}

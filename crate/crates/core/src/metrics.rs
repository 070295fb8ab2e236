//! Open-loop and closed-loop scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreWeights {
    pub thresh_ade: f64,
    pub thresh_fde: f64,
    pub thresh_comfort: f64,
    pub cost_acc: f64,
    pub cost_jerk: f64,
    pub w_ade: f64,
    pub w_fde: f64,
    pub w_comfort: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            thresh_ade: 4.0,
            thresh_fde: 8.0,
            thresh_comfort: 200.0,
            cost_acc: 1.0,
            cost_jerk: 0.5,
            w_ade: 0.35,
            w_fde: 0.25,
            w_comfort: 0.40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopWeights {
    pub w: [f64; 6],
    pub thresh_center: f64,
    pub thresh_speed: f64,
}

impl Default for ClosedLoopWeights {
    fn default() -> Self {
        Self {
            w: [0.1, 0.25, 0.25, 0.1, 0.1, 0.2],
            thresh_center: 40.0,
            thresh_speed: 40.0,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `(minADE, minFDE)`, each minimized independently over the predictions.
pub fn min_displacement(preds: &[Trajectory], gt: &Trajectory) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return Err(Error::Config("min_displacement needs at least one prediction".into()));
    }
    let (mut ade, mut fde) = (f64::INFINITY, f64::INFINITY);
    for p in preds {
        if p.horizon() != gt.horizon() {
            return Err(Error::Shape {
                context: "min_displacement",
                expected: vec![gt.horizon()],
                got: vec![p.horizon()],
            });
        }
        let d: Vec<f64> = p
            .positions
            .iter()
            .zip(&gt.positions)
            .map(|(a, b)| dist(*a, *b))
            .collect();
        ade = ade.min(d.iter().sum::<f64>() / d.len() as f64);
        fde = fde.min(*d.last().unwrap());
    }
    Ok((ade, fde))
}

/// `100 · clip(1 − x/thresh, 0, 1)`.
pub fn score_clip(x: f64, thresh: f64) -> f64 {
    100.0 * (1.0 - x / thresh).clamp(0.0, 1.0)
}

/// Mean magnitudes of the second and third position differences, divided
/// by `dt²` and `dt³`.
pub fn acc_jerk(traj: &Trajectory) -> Result<(f64, f64)> {
    let p = &traj.positions;
    if p.len() < 4 {
        return Err(Error::Config(format!(
            "comfort needs at least 4 steps, got {}",
            p.len()
        )));
    }
    let diff = |v: &[[f64; 2]]| -> Vec<[f64; 2]> {
        v.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect()
    };
    let d2 = diff(&diff(p));
    let d3 = diff(&d2);
    let mean_norm = |v: &[[f64; 2]]| v.iter().map(|d| d[0].hypot(d[1])).sum::<f64>() / v.len() as f64;
    let dt = traj.dt;
    Ok((mean_norm(&d2) / (dt * dt), mean_norm(&d3) / (dt * dt * dt)))
}

/// Mean over predictions of `cost_acc·Acc + cost_jerk·Jerk`.
pub fn comfort_cost(preds: &[Trajectory], weights: &ScoreWeights) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Config("comfort needs at least one prediction".into()));
    }
    let mut total = 0.0;
    for p in preds {
        let (a, j) = acc_jerk(p)?;
        total += weights.cost_acc * a + weights.cost_jerk * j;
    }
    Ok(total / preds.len() as f64)
}

pub fn comfort_score(preds: &[Trajectory], weights: &ScoreWeights) -> Result<f64> {
    Ok(score_clip(comfort_cost(preds, weights)?, weights.thresh_comfort))
}

/// `(1 − CR) · (w_ade·S_ade + w_fde·S_fde + w_comfort·S_comfort)`.
pub fn open_loop_score(s_ade: f64, s_fde: f64, s_comfort: f64, cr: f64, weights: &ScoreWeights) -> f64 {
    (1.0 - cr) * (weights.w_ade * s_ade + weights.w_fde * s_fde + weights.w_comfort * s_comfort)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceKind {
    /// Mean distance of final positions from their centroid.
    #[default]
    Centroid,
    /// Mean pairwise distance between final positions.
    Pairwise,
}

pub fn divergence_score(preds: &[Trajectory], kind: DivergenceKind) -> Result<f64> {
    let ends: Vec<[f64; 2]> = preds.iter().map(|p| p.final_position()).collect();
    endpoint_divergence(&ends, kind)
}

pub fn endpoint_divergence(ends: &[[f64; 2]], kind: DivergenceKind) -> Result<f64> {
    let n = ends.len();
    if n < 2 {
        return Err(Error::Config(format!("divergence needs at least 2 generations, got {n}")));
    }
    Ok(match kind {
        DivergenceKind::Centroid => {
            let c = [
                ends.iter().map(|p| p[0]).sum::<f64>() / n as f64,
                ends.iter().map(|p| p[1]).sum::<f64>() / n as f64,
            ];
            ends.iter().map(|p| dist(*p, c)).sum::<f64>() / n as f64
        }
        DivergenceKind::Pairwise => {
            let mut s = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    s += dist(ends[i], ends[j]);
                }
            }
            s / (n * (n - 1) / 2) as f64
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopScores {
    pub success: f64,
    pub stability: f64,
    pub overall: f64,
}

/// `s` are per-scenario success percentages in `[0, 100]`; the `k`s are
/// events per 100 km.
pub fn closed_loop_scores(s: [f64; 6], k_center: f64, k_speed: f64, w: &ClosedLoopWeights) -> ClosedLoopScores {
    let success = s.iter().zip(&w.w).map(|(a, b)| a * b).sum::<f64>();
    let stability = 0.5 * (score_clip(k_center, w.thresh_center) + score_clip(k_speed, w.thresh_speed));
    ClosedLoopScores {
        success,
        stability,
        overall: 0.5 * (success + stability),
    }
}

/// Per-scene open-loop evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub min_ade: f64,
    pub min_fde: f64,
    pub comfort: f64,
    pub collision_rate: f64,
    pub open_loop: f64,
    pub divergence: f64,
    pub s_ade: f64,
    pub s_fde: f64,
}

/// Score `preds` against `gt`; `collided[i]` says whether generation `i`
/// hit anything during replay.
pub fn score_scene(
    preds: &[Trajectory],
    gt: &Trajectory,
    collided: &[bool],
    weights: &ScoreWeights,
    divergence: DivergenceKind,
) -> Result<SceneScore> {
    let (min_ade, min_fde) = min_displacement(preds, gt)?;
    let comfort = comfort_score(preds, weights)?;
    let cr = collided.iter().filter(|c| **c).count() as f64 / collided.len().max(1) as f64;
    let s_ade = score_clip(min_ade, weights.thresh_ade);
    let s_fde = score_clip(min_fde, weights.thresh_fde);
    Ok(SceneScore {
        min_ade,
        min_fde,
        comfort,
        collision_rate: cr,
        open_loop: open_loop_score(s_ade, s_fde, comfort, cr, weights),
        divergence: if preds.len() >= 2 {
            divergence_score(preds, divergence)?
        } else {
            0.0
        },
        s_ade,
        s_fde,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(v: f64, y: f64) -> Trajectory {
        Trajectory::from_positions((1..=30).map(|i| [v * i as f64 * 0.1, y]).collect(), 0.1)
    }

    #[test]
    fn displacement_examples() {
        let gt = line(10.0, 0.0);
        assert_eq!(min_displacement(&[gt.clone()], &gt).unwrap(), (0.0, 0.0));
        let (a, f) = min_displacement(&[gt.shifted([1.0, 0.0])], &gt).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (f - 1.0).abs() < 1e-12);
        assert!(min_displacement(&[], &gt).is_err());
        let short = Trajectory::from_positions(vec![[1.0, 0.0]; 3], 0.1);
        assert!(min_displacement(&[short], &gt).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(score_clip(0.0, 4.0), 100.0);
        assert_eq!(score_clip(4.0, 4.0), 0.0);
        assert_eq!(score_clip(2.0, 4.0), 50.0);
        assert_eq!(score_clip(9.0, 4.0), 0.0);
    }

    #[test]
    fn comfort_examples() {
        let w = ScoreWeights::default();
        // Integer positions keep the differences exact.
        let cv = Trajectory::from_positions((1..=30).map(|i| [i as f64, 0.5]).collect(), 0.1);
        assert_eq!(acc_jerk(&cv).unwrap(), (0.0, 0.0));
        assert_eq!(comfort_score(&[cv], &w).unwrap(), 100.0);
        let a = 2.0;
        let tr = Trajectory::from_positions(
            (1..=30).map(|i| [0.5 * a * (i as f64 * 0.1).powi(2), 0.0]).collect(),
            0.1,
        );
        let (acc, jerk) = acc_jerk(&tr).unwrap();
        assert!((acc - a).abs() < 1e-9 && jerk.abs() < 1e-6);
        let short = Trajectory::from_positions(vec![[0.0, 0.0]; 3], 0.1);
        assert!(comfort_score(&[short], &w).is_err());
    }

    #[test]
    fn open_loop_examples() {
        let w = ScoreWeights::default();
        assert!((open_loop_score(100.0, 100.0, 100.0, 0.0, &w) - 100.0).abs() < 1e-12);
        assert_eq!(open_loop_score(80.0, 30.0, 90.0, 1.0, &w), 0.0);
        assert!((open_loop_score(50.0, 100.0, 80.0, 0.1, &w) - 67.05).abs() < 1e-12);
    }

    #[test]
    fn divergence_examples() {
        let a = line(10.0, 1.0);
        assert_eq!(divergence_score(&[a.clone(), a.clone()], DivergenceKind::Centroid).unwrap(), 0.0);
        let ends = [[1.0, 0.0], [-1.0, 0.0]];
        assert_eq!(endpoint_divergence(&ends, DivergenceKind::Centroid).unwrap(), 1.0);
        assert_eq!(endpoint_divergence(&ends, DivergenceKind::Pairwise).unwrap(), 2.0);
        assert!(endpoint_divergence(&ends[..1], DivergenceKind::Centroid).is_err());
    }

    #[test]
    fn closed_loop_examples() {
        let w = ClosedLoopWeights::default();
        let r = closed_loop_scores([100.0; 6], 0.0, 0.0, &w);
        assert!((r.success - 100.0).abs() < 1e-12 && r.stability == 100.0 && (r.overall - 100.0).abs() < 1e-12);
        let r = closed_loop_scores([0.0; 6], 40.0, 55.0, &w);
        assert_eq!((r.success, r.stability, r.overall), (0.0, 0.0, 0.0));
        let r = closed_loop_scores([100.0, 100.0, 0.0, 0.0, 0.0, 0.0], 20.0, 0.0, &w);
        assert!((r.success - 35.0).abs() < 1e-12);
        assert_eq!(r.stability, 75.0);
        assert!((r.overall - 55.0).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        let s = ScoreWeights::default();
        assert!((s.w_ade + s.w_fde + s.w_comfort - 1.0).abs() < 1e-12);
        assert!((ClosedLoopWeights::default().w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

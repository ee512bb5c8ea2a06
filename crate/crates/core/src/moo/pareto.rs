use super::{EvaluationRecord, MooError, ObjectivePoint, ParetoFront, ReferencePoint};
use crate::search_space::Configuration;

/// Exact non-dominated subset of the usable records (maximize accuracy, minimize latency).
/// Records with identical objectives keep the earliest evaluation.
pub fn pareto_front(records: &[EvaluationRecord], reference_point: ReferencePoint) -> Result<ParetoFront, MooError> {
    let mut usable: Vec<&EvaluationRecord> = records.iter().filter(|r| r.is_usable()).collect();
    if usable.is_empty() {
        return Err(MooError::EmptyFront);
    }
    usable.sort_by(|a, b| {
        let (pa, pb) = (a.objectives.unwrap(), b.objectives.unwrap());
        pb.accuracy
            .total_cmp(&pa.accuracy)
            .then(pa.latency_ms.total_cmp(&pb.latency_ms))
            .then(a.index.cmp(&b.index))
    });
    let mut best_latency = f64::INFINITY;
    let mut kept: Vec<EvaluationRecord> = Vec::new();
    for r in usable {
        let p = r.objectives.unwrap();
        if p.latency_ms < best_latency {
            best_latency = p.latency_ms;
            kept.push(r.clone());
        }
    }
    kept.sort_by_key(|r| r.index);
    Ok(ParetoFront { records: kept, reference_point })
}

fn check_point(p: &ObjectivePoint, r: &ReferencePoint) -> Result<(), MooError> {
    if p.accuracy >= r.accuracy_floor && p.latency_ms <= r.latency_ceiling {
        Ok(())
    } else {
        Err(MooError::OutsideReference { accuracy: p.accuracy, latency_ms: p.latency_ms })
    }
}

/// Area dominated by `points` inside the reference box, by a sweep in decreasing accuracy.
pub fn hypervolume(points: &[ObjectivePoint], reference: ReferencePoint) -> Result<f64, MooError> {
    for p in points {
        check_point(p, &reference)?;
    }
    Ok(hypervolume_clipped(points, reference))
}

/// Like [`hypervolume`], but points outside the reference box contribute nothing.
pub fn hypervolume_clipped(points: &[ObjectivePoint], reference: ReferencePoint) -> f64 {
    let mut inside: Vec<ObjectivePoint> = points
        .iter()
        .copied()
        .filter(|p| p.accuracy >= reference.accuracy_floor && p.latency_ms <= reference.latency_ceiling)
        .collect();
    inside.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.latency_ms.total_cmp(&b.latency_ms)));
    let mut ceiling = reference.latency_ceiling;
    let mut volume = 0.0;
    for p in inside {
        if p.latency_ms < ceiling {
            volume += (p.accuracy - reference.accuracy_floor) * (ceiling - p.latency_ms);
            ceiling = p.latency_ms;
        }
    }
    volume
}

/// Weighted score `alpha * f~ + (1 - alpha) * (1 - g~)` with Min-Max normalization over the
/// front. Zero spread normalizes accuracy to 1 and latency to 0.
pub fn score(front: &ParetoFront, alpha: f64) -> Vec<f64> {
    let points = front.points();
    if points.is_empty() {
        return Vec::new();
    }
    let (fmin, fmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.accuracy), hi.max(p.accuracy)));
    let (gmin, gmax) =
        points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.latency_ms), hi.max(p.latency_ms)));
    points
        .iter()
        .map(|p| {
            let f = if fmax > fmin { (p.accuracy - fmin) / (fmax - fmin) } else { 1.0 };
            let g = if gmax > gmin { (p.latency_ms - gmin) / (gmax - gmin) } else { 0.0 };
            alpha * f + (1.0 - alpha) * (1.0 - g)
        })
        .collect()
}

const SCORE_TIE: f64 = 1e-12;

/// Index into `front.records` of the selected configuration.
pub(crate) fn select_index(front: &ParetoFront, alpha: f64) -> Result<usize, MooError> {
    let scores = score(front, alpha);
    if scores.is_empty() {
        return Err(MooError::EmptyFront);
    }
    let mut best = 0;
    for i in 1..scores.len() {
        let (a, b) = (front.records[i].objectives.unwrap(), front.records[best].objectives.unwrap());
        let better = if (scores[i] - scores[best]).abs() > SCORE_TIE {
            scores[i] > scores[best]
        } else if a.accuracy != b.accuracy {
            a.accuracy > b.accuracy
        } else if a.latency_ms != b.latency_ms {
            a.latency_ms < b.latency_ms
        } else {
            front.records[i].index < front.records[best].index
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// `a*`: the front member maximizing the score; ties go to higher accuracy, then lower
/// latency, then earlier evaluation.
pub fn select_optimal(front: &ParetoFront, alpha: f64) -> Result<Configuration, MooError> {
    select_index(front, alpha).map(|i| front.records[i].config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{MemoryFootprint, SearchFactorRanges};

    pub(crate) fn record(index: usize, accuracy: f64, latency_ms: f64) -> EvaluationRecord {
        let ranges = SearchFactorRanges::default();
        let mut config = ranges.minimum();
        config.spatial_up = [4, 8, 16][index % 3];
        EvaluationRecord {
            index,
            encoded: vec![],
            config,
            objectives: Some(ObjectivePoint::new(accuracy, latency_ms)),
            memory: MemoryFootprint { parameter_bytes: 0, peak_activation_bytes: 0, total: 0 },
            feasible: true,
            failure: None,
            epoch_seed: 0,
        }
    }

    const REF: ReferencePoint = ReferencePoint { accuracy_floor: 0.0, latency_ceiling: 12.0 };

    #[test]
    fn three_point_example() {
        let recs = vec![record(0, 0.9, 10.0), record(1, 0.8, 6.0), record(2, 0.7, 12.0)];
        let front = pareto_front(&recs, REF).unwrap();
        assert_eq!(front.points(), vec![ObjectivePoint::new(0.9, 10.0), ObjectivePoint::new(0.8, 6.0)]);
    }

    #[test]
    fn singleton_and_duplicates() {
        let front = pareto_front(&[record(0, 0.5, 3.0)], REF).unwrap();
        assert_eq!(front.records.len(), 1);
        let front = pareto_front(&[record(0, 0.5, 3.0), record(1, 0.5, 3.0)], REF).unwrap();
        assert_eq!(front.records.len(), 1);
        assert_eq!(front.records[0].index, 0);
    }

    #[test]
    fn empty_when_nothing_usable() {
        let mut r = record(0, 0.5, 3.0);
        r.objectives = None;
        assert!(matches!(pareto_front(&[r], REF), Err(MooError::EmptyFront)));
        assert!(matches!(pareto_front(&[], REF), Err(MooError::EmptyFront)));
    }

    #[test]
    fn hypervolume_cases() {
        assert_eq!(hypervolume(&[], REF).unwrap(), 0.0);
        assert!((hypervolume(&[ObjectivePoint::new(0.8, 6.0)], REF).unwrap() - 4.8).abs() < 1e-12);
        let two = [ObjectivePoint::new(0.9, 10.0), ObjectivePoint::new(0.8, 6.0)];
        assert!((hypervolume(&two, REF).unwrap() - 5.0).abs() < 1e-12);
        assert!(hypervolume(&[ObjectivePoint::new(0.8, 13.0)], REF).is_err());
        assert_eq!(hypervolume_clipped(&[ObjectivePoint::new(0.8, 13.0)], REF), 0.0);
    }

    #[test]
    fn tie_example_scores_and_selection() {
        let front = pareto_front(&[record(0, 0.9, 10.0), record(1, 0.8, 6.0)], REF).unwrap();
        let s = score(&front, 0.5);
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
        let chosen = select_optimal(&front, 0.5).unwrap();
        assert_eq!(chosen, front.records[0].config);
        // alpha = 1 ranks purely by normalized accuracy
        assert_eq!(score(&front, 1.0), vec![1.0, 0.0]);
    }

    #[test]
    fn singleton_scores_one() {
        let front = pareto_front(&[record(3, 0.4, 2.0)], REF).unwrap();
        assert_eq!(score(&front, 0.3), vec![1.0]);
        assert_eq!(select_optimal(&front, 0.3).unwrap(), front.records[0].config);
    }

    #[test]
    fn empty_front_selection_rejected() {
        let front = ParetoFront { records: vec![], reference_point: REF };
        assert!(matches!(select_optimal(&front, 0.5), Err(MooError::EmptyFront)));
    }
}

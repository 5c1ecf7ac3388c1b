//! Central finite-difference verification of analytic gradients.

use crate::element::Element;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub leaf: NodeId,
    /// `‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂)`, zero when both vanish.
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    /// Set when the graph itself could not be evaluated.
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

fn scalar_output<T: Element>(graph: &mut Graph<T>) -> Result<f64, String> {
    let out = graph.forward().map_err(|e| e.to_string())?;
    if out.numel() != 1 {
        return Err(format!("gradient check needs a scalar output, got {:?}", out.shape()));
    }
    Ok(out.data()[0].as_f64())
}

/// Compares analytic gradients of a scalar graph against central finite
/// differences for every leaf with `requires_grad`.
///
/// Existing leaf gradients are cleared. Failures are carried in the report.
pub fn check_gradients<T: Element>(graph: &mut Graph<T>, tolerance: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        tolerance,
        params: Vec::new(),
        error: None,
    };
    if let Err(e) = scalar_output(graph) {
        report.error = Some(e);
        return report;
    }
    graph.zero_grad();
    if let Err(e) = graph.backward(&Tensor::scalar(T::one())) {
        report.error = Some(e.to_string());
        return report;
    }

    for leaf in graph.trainable_leaves() {
        let analytic: Vec<f64> = match graph.grad(leaf) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; graph.value(leaf).map_or(0, Tensor::numel)],
        };
        let mut numeric = vec![0.0f64; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let original = graph.value(leaf).expect("leaf").data()[i];
            let mut eval_at = |x: T| -> Result<f64, String> {
                graph.leaf_mut(leaf).map_err(|e| e.to_string())?.data_mut()[i] = x;
                scalar_output(graph)
            };
            let h = T::from_f64(T::FD_STEP);
            let plus = eval_at(original + h);
            let minus = eval_at(original - h);
            let restored = eval_at(original);
            match (plus, minus, restored) {
                (Ok(p), Ok(m), Ok(_)) => *slot = (p - m) / (2.0 * h.as_f64()),
                (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => {
                    report.error = Some(e);
                    return report;
                }
            }
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
        let rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
        report.params.push(ParamCheck {
            leaf,
            rel_error,
            passed: rel_error < tolerance,
        });
    }
    graph.zero_grad();
    report
}
